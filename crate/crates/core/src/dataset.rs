//! Toy dataset: 64×64 RGB images on a 4×4 patch grid where one grid cell
//! carries a class-specific pattern over a low-noise background.
//!
//! The pattern cell is the known discriminative token, which gives the
//! saliency-quality tests ground truth "informative token" labels. Per-sample
//! pattern contrast varies so guidance confidence spreads over a range
//! instead of saturating.
//!
//! On disk a dataset is a directory of single-tensor TDW1 files plus a
//! `manifest.csv` with `filename,label` rows.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TOY_IMAGE_SIZE: usize = 64;
pub const TOY_PATCH_SIZE: usize = 16;
pub const TOY_CHANNELS: usize = 3;
pub const TOY_CLASSES: usize = 4;
pub const TOY_GRID_SIDE: usize = TOY_IMAGE_SIZE / TOY_PATCH_SIZE;
pub const TOY_TOKENS: usize = TOY_GRID_SIDE * TOY_GRID_SIDE;

const BACKGROUND_MAX: f64 = 0.2;
const CONTRAST_MIN: f64 = 0.35;

/// Desk-scale guidance preset: small, mean-pool readout so saliency
/// gradients reach every token.
pub fn toy_guidance_config() -> crate::model::ViTConfig {
    crate::model::ViTConfig {
        image_size: TOY_IMAGE_SIZE,
        patch_size: TOY_PATCH_SIZE,
        channels: TOY_CHANNELS,
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2.0,
        num_classes: TOY_CLASSES,
        pos_mode: crate::model::PosMode::Absolute,
        readout: crate::model::Readout::MeanPool,
    }
}

/// Desk-scale target preset: the larger model whose cost the pipeline cuts.
pub fn toy_target_config() -> crate::model::ViTConfig {
    crate::model::ViTConfig {
        image_size: TOY_IMAGE_SIZE,
        patch_size: TOY_PATCH_SIZE,
        channels: TOY_CHANNELS,
        dim: 48,
        depth: 3,
        heads: 4,
        mlp_ratio: 3.0,
        num_classes: TOY_CLASSES,
        pos_mode: crate::model::PosMode::Absolute,
        readout: crate::model::Readout::ClassToken,
    }
}

/// One generated sample with its ground-truth informative cell.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub image: Tensor,
    pub label: usize,
    /// Raster index of the grid cell holding the class pattern.
    pub pattern_cell: usize,
    /// Pattern intensity drawn for this sample; low values are hard.
    pub contrast: f64,
}

/// A dataset sample as the evaluation harness consumes it.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: Option<usize>,
}

impl From<&ToySample> for Sample {
    fn from(s: &ToySample) -> Self {
        Sample {
            id: format!("cell{}", s.pattern_cell),
            image: s.image.clone(),
            label: Some(s.label),
        }
    }
}

/// Deterministic toy dataset of `count` samples.
pub fn generate_toy_dataset(count: usize, seed: u64) -> Vec<ToySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_sample(&mut rng)).collect()
}

fn generate_sample(rng: &mut ChaCha8Rng) -> ToySample {
    let size = TOY_IMAGE_SIZE;
    let hw = size * size;
    let mut data = vec![0.0f64; TOY_CHANNELS * hw];
    for v in &mut data {
        *v = rng.gen_range(0.0..BACKGROUND_MAX);
    }
    let label = rng.gen_range(0..TOY_CLASSES);
    let cell = rng.gen_range(0..TOY_TOKENS);
    let contrast = rng.gen_range(CONTRAST_MIN..1.0);

    let cy = (cell / TOY_GRID_SIDE) * TOY_PATCH_SIZE;
    let cx = (cell % TOY_GRID_SIDE) * TOY_PATCH_SIZE;
    for py in 0..TOY_PATCH_SIZE {
        for px in 0..TOY_PATCH_SIZE {
            let y = cy + py;
            let x = cx + px;
            let mut pixel = [0.0f64; TOY_CHANNELS];
            match label {
                // Horizontal stripes in channel 0.
                0 => pixel[0] = if (py / 4) % 2 == 0 { contrast } else { 0.0 },
                // Vertical stripes in channel 1.
                1 => pixel[1] = if (px / 4) % 2 == 0 { contrast } else { 0.0 },
                // Coarse checkerboard in channel 2.
                2 => pixel[2] = if (py / 4 + px / 4) % 2 == 0 { contrast } else { 0.0 },
                // Cross-hatch: horizontal stripes in channel 0 plus vertical
                // stripes in channel 2.
                _ => {
                    pixel[0] = if (py / 4) % 2 == 1 { contrast } else { 0.0 };
                    pixel[2] = if (px / 4) % 2 == 1 { contrast } else { 0.0 };
                }
            }
            for (ch, &v) in pixel.iter().enumerate() {
                data[ch * hw + y * size + x] = v;
            }
        }
    }
    ToySample {
        image: Tensor::new(vec![TOY_CHANNELS, size, size], data).expect("toy image shape"),
        label,
        pattern_cell: cell,
        contrast,
    }
}

fn image_filename(index: usize) -> String {
    format!("img_{index:05}.tdw")
}

/// Write samples and a manifest into `dir`, creating it if needed.
pub fn write_dataset_dir(dir: &Path, samples: &[ToySample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("filename,label\n");
    for (i, s) in samples.iter().enumerate() {
        let name = image_filename(i);
        container::write_file(&dir.join(&name), "tensor", None, &[("image", &s.image)])?;
        manifest.push_str(&format!("{name},{}\n", s.label));
    }
    container::atomic_write(&dir.join("manifest.csv"), manifest.as_bytes())
}

/// Load one single-tensor image container.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let mut c = container::read_file(path)?;
    if c.kind != "tensor" {
        return Err(Error::Format(format!(
            "container kind is '{}', expected 'tensor'",
            c.kind
        )));
    }
    c.take("image")
}

/// Load a dataset directory in manifest order.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<Sample>> {
    let manifest_path = dir.join("manifest.csv");
    let manifest = fs::read_to_string(&manifest_path)?;
    let mut lines = manifest.lines();
    match lines.next() {
        Some("filename,label") => {}
        other => {
            return Err(Error::Format(format!(
                "manifest header is {other:?}, expected 'filename,label'"
            )))
        }
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, label_str) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!("manifest line {} lacks a comma: {line:?}", lineno + 2))
        })?;
        let label = if label_str.is_empty() {
            None
        } else {
            Some(label_str.parse::<usize>().map_err(|_| {
                Error::Format(format!("manifest line {}: bad label {label_str:?}", lineno + 2))
            })?)
        };
        let image = load_image(&dir.join(name)).map_err(|e| e.for_sample(name))?;
        samples.push(Sample {
            id: name.to_string(),
            image,
            label,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_toy_dataset(5, 77);
        let b = generate_toy_dataset(5, 77);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.pattern_cell, y.pattern_cell);
            assert_eq!(x.image, y.image);
        }
        let c = generate_toy_dataset(5, 78);
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn pattern_cell_dominates_its_patch() {
        for s in generate_toy_dataset(20, 3) {
            let hw = TOY_IMAGE_SIZE * TOY_IMAGE_SIZE;
            let cy = (s.pattern_cell / TOY_GRID_SIDE) * TOY_PATCH_SIZE;
            let cx = (s.pattern_cell % TOY_GRID_SIDE) * TOY_PATCH_SIZE;
            let mut peak: f64 = 0.0;
            for ch in 0..TOY_CHANNELS {
                for py in 0..TOY_PATCH_SIZE {
                    for px in 0..TOY_PATCH_SIZE {
                        let v = s.image.data()[ch * hw + (cy + py) * TOY_IMAGE_SIZE + cx + px];
                        peak = peak.max(v);
                    }
                }
            }
            assert!(peak >= CONTRAST_MIN * 0.8, "pattern too faint: {peak}");
        }
    }

    #[test]
    fn round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_toy_dataset(4, 9);
        write_dataset_dir(dir.path(), &samples).unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 4);
        for (orig, got) in samples.iter().zip(&loaded) {
            assert_eq!(got.label, Some(orig.label));
            assert_eq!(got.image, orig.image);
        }
    }

    #[test]
    fn empty_label_field_loads_as_unlabeled() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_toy_dataset(1, 10);
        write_dataset_dir(dir.path(), &samples).unwrap();
        let manifest = dir.path().join("manifest.csv");
        let text = std::fs::read_to_string(&manifest).unwrap();
        let stripped: String = text
            .lines()
            .map(|l| {
                if l.starts_with("img_") {
                    format!("{},\n", l.split(',').next().unwrap())
                } else {
                    format!("{l}\n")
                }
            })
            .collect();
        std::fs::write(&manifest, stripped).unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(loaded[0].label, None);
    }
}
