//! Weight persistence in the TDW1 container.

use std::path::Path;

use crate::container;
use crate::error::{Error, Result};
use crate::model::{validate_weights, PosMode, PositionalWeights, ViTConfig, ViTWeights};
use crate::tensor::Tensor;

/// Manifest order is fixed so identical weights serialize to identical bytes.
fn named_tensors(w: &ViTWeights) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = vec![
        ("patch_proj_weight".into(), &w.patch_weight),
        ("patch_proj_bias".into(), &w.patch_bias),
        ("class_token".into(), &w.class_token),
    ];
    match &w.positional {
        PositionalWeights::Absolute(p) => out.push(("pos_embed".into(), p)),
        PositionalWeights::RelativeBias(b) => out.push(("rel_bias".into(), b)),
    }
    for (i, b) in w.blocks.iter().enumerate() {
        out.push((format!("block{i}.ln1_gamma"), &b.ln1_gamma));
        out.push((format!("block{i}.ln1_beta"), &b.ln1_beta));
        out.push((format!("block{i}.qkv_weight"), &b.qkv_weight));
        out.push((format!("block{i}.qkv_bias"), &b.qkv_bias));
        out.push((format!("block{i}.proj_weight"), &b.proj_weight));
        out.push((format!("block{i}.proj_bias"), &b.proj_bias));
        out.push((format!("block{i}.ln2_gamma"), &b.ln2_gamma));
        out.push((format!("block{i}.ln2_beta"), &b.ln2_beta));
        out.push((format!("block{i}.fc1_weight"), &b.fc1_weight));
        out.push((format!("block{i}.fc1_bias"), &b.fc1_bias));
        out.push((format!("block{i}.fc2_weight"), &b.fc2_weight));
        out.push((format!("block{i}.fc2_bias"), &b.fc2_bias));
    }
    out.push(("final_norm_gamma".into(), &w.final_norm_gamma));
    out.push(("final_norm_beta".into(), &w.final_norm_beta));
    out.push(("head_weight".into(), &w.head_weight));
    out.push(("head_bias".into(), &w.head_bias));
    out
}

pub fn save_weights(weights: &ViTWeights, config: &ViTConfig, path: &Path) -> Result<()> {
    let config_json = serde_json::to_value(config)
        .map_err(|e| Error::Format(format!("config encode: {e}")))?;
    let named = named_tensors(weights);
    let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    container::write_file(path, "weights", Some(&config_json), &refs)
}

pub fn load_weights(path: &Path) -> Result<(ViTConfig, ViTWeights)> {
    let mut c = container::read_file(path)?;
    if c.kind != "weights" {
        return Err(Error::Format(format!(
            "container kind is '{}', expected 'weights'",
            c.kind
        )));
    }
    let config_json = c
        .config
        .take()
        .ok_or_else(|| Error::Format("missing config document".into()))?;
    let config: ViTConfig = serde_json::from_value(config_json)
        .map_err(|e| Error::Format(format!("config parse: {e}")))?;
    config.validate().map_err(|e| Error::Format(e.to_string()))?;

    let positional = match config.pos_mode {
        PosMode::Absolute => PositionalWeights::Absolute(c.take("pos_embed")?),
        PosMode::RelativeBias => PositionalWeights::RelativeBias(c.take("rel_bias")?),
    };
    let mut blocks = Vec::with_capacity(config.depth);
    let patch_weight = c.take("patch_proj_weight")?;
    let patch_bias = c.take("patch_proj_bias")?;
    let class_token = c.take("class_token")?;
    for i in 0..config.depth {
        blocks.push(crate::model::BlockWeights {
            ln1_gamma: c.take(&format!("block{i}.ln1_gamma"))?,
            ln1_beta: c.take(&format!("block{i}.ln1_beta"))?,
            qkv_weight: c.take(&format!("block{i}.qkv_weight"))?,
            qkv_bias: c.take(&format!("block{i}.qkv_bias"))?,
            proj_weight: c.take(&format!("block{i}.proj_weight"))?,
            proj_bias: c.take(&format!("block{i}.proj_bias"))?,
            ln2_gamma: c.take(&format!("block{i}.ln2_gamma"))?,
            ln2_beta: c.take(&format!("block{i}.ln2_beta"))?,
            fc1_weight: c.take(&format!("block{i}.fc1_weight"))?,
            fc1_bias: c.take(&format!("block{i}.fc1_bias"))?,
            fc2_weight: c.take(&format!("block{i}.fc2_weight"))?,
            fc2_bias: c.take(&format!("block{i}.fc2_bias"))?,
        });
    }
    let weights = ViTWeights {
        patch_weight,
        patch_bias,
        class_token,
        positional,
        blocks,
        final_norm_gamma: c.take("final_norm_gamma")?,
        final_norm_beta: c.take("final_norm_beta")?,
        head_weight: c.take("head_weight")?,
        head_bias: c.take("head_bias")?,
    };
    if let Some((name, _)) = c.tensors.first() {
        return Err(Error::Format(format!("unexpected tensor '{name}'")));
    }
    validate_weights(&config, &weights).map_err(|e| Error::Format(e.to_string()))?;
    Ok((config, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, Readout};

    fn config(pos_mode: PosMode) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            dim: 6,
            depth: 2,
            heads: 2,
            mlp_ratio: 1.5,
            num_classes: 4,
            pos_mode,
            readout: Readout::MeanPool,
        }
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for pos_mode in [PosMode::Absolute, PosMode::RelativeBias] {
            let model = Model::init(config(pos_mode), 99).unwrap();
            let path = dir.path().join("w.tdw");
            model.save(&path).unwrap();
            let loaded = Model::load(&path).unwrap();
            assert_eq!(loaded.config, model.config);
            assert_eq!(loaded.weights, model.weights);
        }
    }

    #[test]
    fn truncated_weight_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(config(PosMode::Absolute), 7).unwrap();
        let path = dir.path().join("w.tdw");
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_shape_is_reported_with_tensor_name() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::init(config(PosMode::Absolute), 7).unwrap();
        // Corrupt one tensor's shape while keeping the config intact.
        model.weights.head_bias = Tensor::zeros(&[5]);
        let path = dir.path().join("w.tdw");
        model.save(&path).unwrap();
        match Model::load(&path) {
            Err(Error::Format(m)) => assert!(m.contains("head_bias"), "{m}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
