//! The vision-transformer family used for both the guidance and the target
//! model.
//!
//! Blocks are pre-norm: `x + attn(norm(x))` then `x + mlp(norm(x))`. Logits
//! are read from the class token after the final norm by default; a
//! mean-pool readout over all tokens is available for guidance models,
//! whose saliency maps need classifier gradients to reach every token
//! position.
//!
//! The forward pass accepts any token count, so the same code runs full
//! sequences and reduced sequences produced by the dropper.

mod io;
pub mod train;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dropper::AdaptedPositional;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

/// How positional information enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    /// Learned per-position embeddings added to the input tokens.
    Absolute,
    /// Learned per-head additive bias on attention logits, indexed by
    /// token pair; shared across blocks.
    RelativeBias,
}

/// Which representation feeds the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Class-token row after the final norm.
    ClassToken,
    /// Mean over all token rows after the final norm. Guidance models use
    /// this so the class-score gradient is nonzero at every token, which
    /// the saliency map requires.
    MeanPool,
}

/// Architecture description for one transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Embedding width C.
    pub dim: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub pos_mode: PosMode,
    pub readout: Readout,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return Err(Error::Config("image/patch/channel sizes must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config(format!("mlp_ratio must be > 0, got {}", self.mlp_ratio)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Patch-grid side length (√T).
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch-token count T, a perfect square by construction.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Full sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    /// Flattened patch dimensionality before projection.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// MLP hidden width.
    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Parameters for one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// [C × 3C]; columns are Q, K, V concatenated.
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

/// Positional parameters; exactly one variant is active per model.
#[derive(Debug, Clone, PartialEq)]
pub enum PositionalWeights {
    /// [(T+1) × C]
    Absolute(Tensor),
    /// [(T+1) × (T+1) × heads]
    RelativeBias(Tensor),
}

/// Full parameter set of one transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights {
    /// [patch_dim × C]
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    /// [1 × C]
    pub class_token: Tensor,
    pub positional: PositionalWeights,
    pub blocks: Vec<BlockWeights>,
    pub final_norm_gamma: Tensor,
    pub final_norm_beta: Tensor,
    /// [C × num_classes]
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Rank-1 tensor of length num_classes.
    pub logits: Tensor,
    /// Output of the last transformer block, before the final norm; [n × C].
    pub final_block_features: Tensor,
    /// Token count seen by each block.
    pub token_counts: Vec<usize>,
}

/// A configured transformer with its weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ViTConfig,
    pub weights: ViTWeights,
}

impl Model {
    pub fn new(config: ViTConfig, weights: ViTWeights) -> Result<Self> {
        config.validate()?;
        validate_weights(&config, &weights)?;
        Ok(Self { config, weights })
    }

    /// Deterministic seeded initialization: fan-in-scaled uniform weights,
    /// unit norm gains, zero biases, small uniform positional parameters.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.dim;
        let hidden = config.mlp_hidden();
        let t1 = config.seq_len();

        let mut uniform = |shape: &[usize], bound: f64| -> Tensor {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("init shape")
        };
        let fan = |fan_in: usize| (1.0 / fan_in as f64).sqrt();

        let patch_weight = uniform(&[config.patch_dim(), c], fan(config.patch_dim()));
        let patch_bias = Tensor::zeros(&[c]);
        let class_token = uniform(&[1, c], 0.02);
        let positional = match config.pos_mode {
            PosMode::Absolute => PositionalWeights::Absolute(uniform(&[t1, c], 0.02)),
            PosMode::RelativeBias => {
                PositionalWeights::RelativeBias(uniform(&[t1, t1, config.heads], 0.02))
            }
        };
        let blocks = (0..config.depth)
            .map(|_| BlockWeights {
                ln1_gamma: Tensor::full(&[c], 1.0),
                ln1_beta: Tensor::zeros(&[c]),
                qkv_weight: uniform(&[c, 3 * c], fan(c)),
                qkv_bias: Tensor::zeros(&[3 * c]),
                proj_weight: uniform(&[c, c], fan(c)),
                proj_bias: Tensor::zeros(&[c]),
                ln2_gamma: Tensor::full(&[c], 1.0),
                ln2_beta: Tensor::zeros(&[c]),
                fc1_weight: uniform(&[c, hidden], fan(c)),
                fc1_bias: Tensor::zeros(&[hidden]),
                fc2_weight: uniform(&[hidden, c], fan(hidden)),
                fc2_bias: Tensor::zeros(&[c]),
            })
            .collect();
        let weights = ViTWeights {
            patch_weight,
            patch_bias,
            class_token,
            positional,
            blocks,
            final_norm_gamma: Tensor::full(&[c], 1.0),
            final_norm_beta: Tensor::zeros(&[c]),
            head_weight: uniform(&[c, config.num_classes], fan(c)),
            head_bias: Tensor::zeros(&[config.num_classes]),
        };
        Ok(Self { config, weights })
    }

    /// Split the image into non-overlapping patches (raster order), flatten
    /// each and project to the embedding width. Returns [T × C].
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        patch_matrix(&self.config, image)?
            .matmul(&self.weights.patch_weight)?
            .add_bias(&self.weights.patch_bias)
    }

    /// Prepend the class token to a [K × C] patch matrix.
    pub fn with_class_token(&self, patch_tokens: &Tensor) -> Result<Tensor> {
        crate::dropper::prepend_row(&self.weights.class_token, patch_tokens)
    }

    /// The identity positional adaptation covering the full sequence.
    pub fn full_positional(&self) -> AdaptedPositional {
        match &self.weights.positional {
            PositionalWeights::Absolute(p) => AdaptedPositional::Absolute(p.clone()),
            PositionalWeights::RelativeBias(b) => AdaptedPositional::RelativeBias(b.clone()),
        }
    }

    /// Run the transformer over `tokens` (class token in row 0) with the
    /// given positional structures. `pos` must match the token count.
    pub fn forward(&self, tokens: &Tensor, pos: &AdaptedPositional) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let n = tokens.shape()[0];
        if tokens.rank() != 2 || tokens.shape()[1] != cfg.dim {
            return Err(Error::Config(format!(
                "token matrix {:?} does not match embedding width {}",
                tokens.shape(),
                cfg.dim
            )));
        }
        let mut x = match pos {
            AdaptedPositional::Absolute(p) => {
                if p.shape() != [n, cfg.dim] {
                    return Err(Error::Adaptation(format!(
                        "absolute positional rows {:?} do not match {n} tokens of width {}",
                        p.shape(),
                        cfg.dim
                    )));
                }
                tokens.add(p)?
            }
            AdaptedPositional::RelativeBias(b) => {
                if b.shape() != [n, n, cfg.heads] {
                    return Err(Error::Adaptation(format!(
                        "relative bias {:?} does not match {n} tokens and {} heads",
                        b.shape(),
                        cfg.heads
                    )));
                }
                tokens.clone()
            }
        };
        let rel = match pos {
            AdaptedPositional::RelativeBias(b) => Some(b),
            AdaptedPositional::Absolute(_) => None,
        };

        let mut token_counts = Vec::with_capacity(cfg.depth);
        for block in &self.weights.blocks {
            token_counts.push(n);
            let normed = x.layer_norm(&block.ln1_gamma, &block.ln1_beta, LN_EPS)?;
            let (attn_out, _) = attention(&normed, block, rel, cfg.heads)?;
            x = x.add(&attn_out)?;
            let normed2 = x.layer_norm(&block.ln2_gamma, &block.ln2_beta, LN_EPS)?;
            let mlp_out = mlp(&normed2, block)?;
            x = x.add(&mlp_out)?;
        }

        let logits = self.logits_from_features(&x)?;
        Ok(ForwardTrace {
            logits,
            final_block_features: x,
            token_counts,
        })
    }

    /// The tail after the last block: final norm, readout, head.
    pub fn logits_from_features(&self, features: &Tensor) -> Result<Tensor> {
        let w = &self.weights;
        let y = features.layer_norm(&w.final_norm_gamma, &w.final_norm_beta, LN_EPS)?;
        let readout = match self.config.readout {
            Readout::ClassToken => Tensor::new(vec![1, self.config.dim], y.row(0).to_vec())?,
            Readout::MeanPool => y.mean_rows()?,
        };
        let logits = readout.matmul(&w.head_weight)?.add_bias(&w.head_bias)?;
        Tensor::new(vec![self.config.num_classes], logits.into_data())
    }

    /// Full-sequence convenience path: embed, prepend class token, apply
    /// the unreduced positional structures, run the blocks.
    pub fn forward_image(&self, image: &Tensor) -> Result<ForwardTrace> {
        let patches = self.patch_embed(image)?;
        let tokens = self.with_class_token(&patches)?;
        self.forward(&tokens, &self.full_positional())
    }

    /// Class probabilities for an image (softmax of the full-sequence logits).
    pub fn predict_probs(&self, image: &Tensor) -> Result<Tensor> {
        self.forward_image(image)?.logits.softmax(0)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        io::save_weights(&self.weights, &self.config, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (config, weights) = io::load_weights(path)?;
        Model::new(config, weights)
    }
}

/// Flatten the image into a [T × patch_dim] matrix of raster-ordered
/// patches, each laid out channel-major.
pub(crate) fn patch_matrix(cfg: &ViTConfig, image: &Tensor) -> Result<Tensor> {
    let expect = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != expect {
        return Err(Error::Config(format!(
            "image shape {:?} does not match configured {:?}",
            image.shape(),
            expect
        )));
    }
    let side = cfg.grid_side();
    let p = cfg.patch_size;
    let pd = cfg.patch_dim();
    let img = image.data();
    let hw = cfg.image_size * cfg.image_size;
    let mut patches = Vec::with_capacity(cfg.num_patches() * pd);
    for gy in 0..side {
        for gx in 0..side {
            for ch in 0..cfg.channels {
                for py in 0..p {
                    let row = gy * p + py;
                    let base = ch * hw + row * cfg.image_size + gx * p;
                    patches.extend_from_slice(&img[base..base + p]);
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_patches(), pd], patches)
}

/// Multi-head self-attention over pre-normed tokens. Returns the projected
/// output and the per-head attention maps (rows are probability vectors).
pub(crate) fn attention(
    normed: &Tensor,
    block: &BlockWeights,
    rel_bias: Option<&Tensor>,
    heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let n = normed.shape()[0];
    let c = normed.shape()[1];
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let qkv = normed.matmul(&block.qkv_weight)?.add_bias(&block.qkv_bias)?;
    let mut context = Tensor::zeros(&[n, c]);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = slice_cols(&qkv, h * d, d);
        let k = slice_cols(&qkv, c + h * d, d);
        let v = slice_cols(&qkv, 2 * c + h * d, d);
        let mut scores = q.matmul_bt(&k)?.scale(scale);
        if let Some(bias) = rel_bias {
            scores = scores.add(&head_slice(bias, h))?;
        }
        let att = scores.softmax(1)?;
        let ctx = att.matmul(&v)?;
        write_cols(&mut context, h * d, &ctx);
        maps.push(att);
    }
    let projected = context
        .matmul(&block.proj_weight)?
        .add_bias(&block.proj_bias)?;
    Ok((projected, maps))
}

pub(crate) fn mlp(normed: &Tensor, block: &BlockWeights) -> Result<Tensor> {
    let hidden = normed.matmul(&block.fc1_weight)?.add_bias(&block.fc1_bias)?;
    hidden
        .gelu()
        .matmul(&block.fc2_weight)?
        .add_bias(&block.fc2_bias)
}

/// Copy a column range out of an n×m tensor.
pub(crate) fn slice_cols(t: &Tensor, start: usize, width: usize) -> Tensor {
    let n = t.shape()[0];
    let m = t.shape()[1];
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        let row = &t.data()[i * m..i * m + m];
        data.extend_from_slice(&row[start..start + width]);
    }
    Tensor::new(vec![n, width], data).expect("slice_cols shape")
}

pub(crate) fn write_cols(dst: &mut Tensor, start: usize, src: &Tensor) {
    let n = src.shape()[0];
    let w = src.shape()[1];
    for i in 0..n {
        for j in 0..w {
            let v = src.data()[i * w + j];
            dst.set(&[i, start + j], v);
        }
    }
}

/// Extract the [n × n] bias matrix of head `h` from an [n × n × H] tensor.
pub(crate) fn head_slice(bias: &Tensor, h: usize) -> Tensor {
    let n = bias.shape()[0];
    let heads = bias.shape()[2];
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            data.push(bias.data()[(i * n + j) * heads + h]);
        }
    }
    Tensor::new(vec![n, n], data).expect("head_slice shape")
}

fn expect_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "tensor '{name}' has shape {:?}, config requires {:?}",
            t.shape(),
            shape
        )));
    }
    Ok(())
}

pub(crate) fn validate_weights(cfg: &ViTConfig, w: &ViTWeights) -> Result<()> {
    let c = cfg.dim;
    let hidden = cfg.mlp_hidden();
    let t1 = cfg.seq_len();
    expect_shape("patch_proj_weight", &w.patch_weight, &[cfg.patch_dim(), c])?;
    expect_shape("patch_proj_bias", &w.patch_bias, &[c])?;
    expect_shape("class_token", &w.class_token, &[1, c])?;
    match (&w.positional, cfg.pos_mode) {
        (PositionalWeights::Absolute(p), PosMode::Absolute) => {
            expect_shape("pos_embed", p, &[t1, c])?
        }
        (PositionalWeights::RelativeBias(b), PosMode::RelativeBias) => {
            expect_shape("rel_bias", b, &[t1, t1, cfg.heads])?
        }
        _ => {
            return Err(Error::Format(
                "positional weights do not match configured pos_mode".into(),
            ))
        }
    }
    if w.blocks.len() != cfg.depth {
        return Err(Error::Format(format!(
            "weights carry {} blocks, config requires {}",
            w.blocks.len(),
            cfg.depth
        )));
    }
    for (i, b) in w.blocks.iter().enumerate() {
        expect_shape(&format!("block{i}.ln1_gamma"), &b.ln1_gamma, &[c])?;
        expect_shape(&format!("block{i}.ln1_beta"), &b.ln1_beta, &[c])?;
        expect_shape(&format!("block{i}.qkv_weight"), &b.qkv_weight, &[c, 3 * c])?;
        expect_shape(&format!("block{i}.qkv_bias"), &b.qkv_bias, &[3 * c])?;
        expect_shape(&format!("block{i}.proj_weight"), &b.proj_weight, &[c, c])?;
        expect_shape(&format!("block{i}.proj_bias"), &b.proj_bias, &[c])?;
        expect_shape(&format!("block{i}.ln2_gamma"), &b.ln2_gamma, &[c])?;
        expect_shape(&format!("block{i}.ln2_beta"), &b.ln2_beta, &[c])?;
        expect_shape(&format!("block{i}.fc1_weight"), &b.fc1_weight, &[c, hidden])?;
        expect_shape(&format!("block{i}.fc1_bias"), &b.fc1_bias, &[hidden])?;
        expect_shape(&format!("block{i}.fc2_weight"), &b.fc2_weight, &[hidden, c])?;
        expect_shape(&format!("block{i}.fc2_bias"), &b.fc2_bias, &[c])?;
    }
    expect_shape("final_norm_gamma", &w.final_norm_gamma, &[c])?;
    expect_shape("final_norm_beta", &w.final_norm_beta, &[c])?;
    expect_shape("head_weight", &w.head_weight, &[c, cfg.num_classes])?;
    expect_shape("head_bias", &w.head_bias, &[cfg.num_classes])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropper;

    pub(crate) fn tiny_config(pos_mode: PosMode, readout: Readout) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
            pos_mode,
            readout,
        }
    }

    fn random_image(cfg: &ViTConfig, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::new(
            vec![cfg.channels, cfg.image_size, cfg.image_size],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn patch_embed_zero_image_zero_bias_is_zero() {
        let cfg = tiny_config(PosMode::Absolute, Readout::ClassToken);
        let model = Model::init(cfg.clone(), 1).unwrap();
        let image = Tensor::zeros(&[cfg.channels, cfg.image_size, cfg.image_size]);
        let emb = model.patch_embed(&image).unwrap();
        assert!(emb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_token_count() {
        let cfg = ViTConfig {
            image_size: 32,
            patch_size: 16,
            channels: 1,
            dim: 4,
            depth: 0,
            heads: 1,
            mlp_ratio: 1.0,
            num_classes: 2,
            pos_mode: PosMode::Absolute,
            readout: Readout::ClassToken,
        };
        let model = Model::init(cfg.clone(), 2).unwrap();
        let emb = model.patch_embed(&random_image(&cfg, 3)).unwrap();
        assert_eq!(emb.shape(), &[4, 4]);
    }

    #[test]
    fn patch_embed_is_local_per_patch() {
        let cfg = tiny_config(PosMode::Absolute, Readout::ClassToken);
        let model = Model::init(cfg.clone(), 7).unwrap();
        // Light up only the patch at grid position (1, 0) -> raster index 2.
        let mut image = Tensor::zeros(&[1, 8, 8]);
        image.set(&[0, 5, 1], 2.0);
        let emb = model.patch_embed(&image).unwrap();
        for t in 0..4 {
            let row_is_zero = emb.row(t).iter().all(|&v| v == 0.0);
            assert_eq!(row_is_zero, t != 2, "row {t}");
        }
    }

    #[test]
    fn patch_embed_rejects_wrong_image() {
        let cfg = tiny_config(PosMode::Absolute, Readout::ClassToken);
        let model = Model::init(cfg, 1).unwrap();
        let image = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(model.patch_embed(&image), Err(Error::Config(_))));
    }

    #[test]
    fn depth_zero_matches_closed_form() {
        let mut cfg = tiny_config(PosMode::Absolute, Readout::ClassToken);
        cfg.depth = 0;
        let model = Model::init(cfg.clone(), 11).unwrap();
        let image = random_image(&cfg, 4);
        let trace = model.forward_image(&image).unwrap();

        // Closed form: head(norm(class token + its positional row)).
        let p = match &model.weights.positional {
            PositionalWeights::Absolute(p) => p,
            _ => unreachable!(),
        };
        let cls: Vec<f64> = model
            .weights
            .class_token
            .row(0)
            .iter()
            .zip(p.row(0))
            .map(|(a, b)| a + b)
            .collect();
        let row = Tensor::new(vec![1, cfg.dim], cls).unwrap();
        let normed = row
            .layer_norm(&model.weights.final_norm_gamma, &model.weights.final_norm_beta, LN_EPS)
            .unwrap();
        let logits = normed
            .matmul(&model.weights.head_weight)
            .unwrap()
            .add_bias(&model.weights.head_bias)
            .unwrap();
        for (a, b) in trace.logits.data().iter().zip(logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_selection_forward_is_identity() {
        for pos_mode in [PosMode::Absolute, PosMode::RelativeBias] {
            let cfg = tiny_config(pos_mode, Readout::ClassToken);
            let model = Model::init(cfg.clone(), 5).unwrap();
            let image = random_image(&cfg, 6);
            let patches = model.patch_embed(&image).unwrap();
            let tokens = model.with_class_token(&patches).unwrap();
            let baseline = model.forward(&tokens, &model.full_positional()).unwrap();

            let t = cfg.num_patches();
            let sel = dropper::TokenSelection::new((0..t).collect(), t).unwrap();
            let gathered =
                dropper::gather_tokens(&patches, &model.weights.class_token, &sel).unwrap();
            let pos = dropper::adapt(&model.weights.positional, &sel).unwrap();
            let reduced = model.forward(&gathered, &pos).unwrap();

            assert_eq!(baseline.logits, reduced.logits);
            assert_eq!(baseline.final_block_features, reduced.final_block_features);
        }
    }

    #[test]
    fn permuting_kept_tokens_and_positions_together_preserves_logits() {
        for (pos_mode, readout) in [
            (PosMode::Absolute, Readout::ClassToken),
            (PosMode::Absolute, Readout::MeanPool),
            (PosMode::RelativeBias, Readout::ClassToken),
        ] {
            let cfg = tiny_config(pos_mode, readout);
            let model = Model::init(cfg.clone(), 13).unwrap();
            let image = random_image(&cfg, 14);
            let patches = model.patch_embed(&image).unwrap();
            let tokens = model.with_class_token(&patches).unwrap();
            let pos = model.full_positional();
            let baseline = model.forward(&tokens, &pos).unwrap();

            // Permute patch rows 1..n and apply the same permutation to the
            // positional structures.
            let n = cfg.seq_len();
            let perm: Vec<usize> = std::iter::once(0)
                .chain((1..n).rev())
                .collect();
            let permuted_tokens = permute_rows(&tokens, &perm);
            let permuted_pos = match &pos {
                AdaptedPositional::Absolute(p) => {
                    AdaptedPositional::Absolute(permute_rows(p, &perm))
                }
                AdaptedPositional::RelativeBias(b) => {
                    AdaptedPositional::RelativeBias(permute_bias(b, &perm))
                }
            };
            let permuted = model.forward(&permuted_tokens, &permuted_pos).unwrap();
            for (a, b) in baseline.logits.data().iter().zip(permuted.logits.data()) {
                assert!((a - b).abs() < 1e-9, "{pos_mode:?}/{readout:?}");
            }
        }
    }

    #[test]
    fn zeroing_unselected_positional_rows_does_not_change_output() {
        let cfg = tiny_config(PosMode::Absolute, Readout::ClassToken);
        let model = Model::init(cfg.clone(), 21).unwrap();
        let image = random_image(&cfg, 22);
        let patches = model.patch_embed(&image).unwrap();
        let sel = dropper::TokenSelection::new(vec![1, 3], cfg.num_patches()).unwrap();
        let gathered = dropper::gather_tokens(&patches, &model.weights.class_token, &sel).unwrap();
        let pos = dropper::adapt(&model.weights.positional, &sel).unwrap();
        let trace = model.forward(&gathered, &pos).unwrap();

        // Zero the positional rows the selection never touches (patch rows 0
        // and 2, i.e. embedding rows 1 and 3).
        let mut zeroed = model.clone();
        if let PositionalWeights::Absolute(p) = &mut zeroed.weights.positional {
            let c = cfg.dim;
            let mut q = p.clone();
            for row in [1, 3] {
                for j in 0..c {
                    q.set(&[row, j], 0.0);
                }
            }
            *p = q;
        }
        let pos2 = dropper::adapt(&zeroed.weights.positional, &sel).unwrap();
        let trace2 = zeroed.forward(&gathered, &pos2).unwrap();
        assert_eq!(trace.logits, trace2.logits);
    }

    #[test]
    fn attention_rows_are_probability_vectors() {
        let cfg = tiny_config(PosMode::RelativeBias, Readout::ClassToken);
        let model = Model::init(cfg.clone(), 31).unwrap();
        let image = random_image(&cfg, 32);
        let patches = model.patch_embed(&image).unwrap();
        let tokens = model.with_class_token(&patches).unwrap();
        let normed = tokens
            .layer_norm(
                &model.weights.blocks[0].ln1_gamma,
                &model.weights.blocks[0].ln1_beta,
                LN_EPS,
            )
            .unwrap();
        let bias = match &model.weights.positional {
            PositionalWeights::RelativeBias(b) => b,
            _ => unreachable!(),
        };
        let (_, maps) = attention(&normed, &model.weights.blocks[0], Some(bias), cfg.heads).unwrap();
        assert_eq!(maps.len(), cfg.heads);
        for map in maps {
            for i in 0..map.shape()[0] {
                let sum: f64 = map.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(map.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn zero_rel_bias_equals_zero_absolute_positional() {
        let cfg_abs = tiny_config(PosMode::Absolute, Readout::ClassToken);
        let mut model_abs = Model::init(cfg_abs.clone(), 41).unwrap();
        model_abs.weights.positional =
            PositionalWeights::Absolute(Tensor::zeros(&[cfg_abs.seq_len(), cfg_abs.dim]));

        let mut cfg_rel = cfg_abs.clone();
        cfg_rel.pos_mode = PosMode::RelativeBias;
        let mut model_rel = Model::new(
            cfg_rel.clone(),
            ViTWeights {
                positional: PositionalWeights::RelativeBias(Tensor::zeros(&[
                    cfg_rel.seq_len(),
                    cfg_rel.seq_len(),
                    cfg_rel.heads,
                ])),
                ..model_abs.weights.clone()
            },
        )
        .unwrap();
        model_rel.config = cfg_rel;

        let image = random_image(&cfg_abs, 42);
        let a = model_abs.forward_image(&image).unwrap();
        let b = model_rel.forward_image(&image).unwrap();
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_mismatched_positional() {
        let cfg = tiny_config(PosMode::Absolute, Readout::ClassToken);
        let model = Model::init(cfg.clone(), 51).unwrap();
        let tokens = Tensor::zeros(&[3, cfg.dim]);
        let pos = AdaptedPositional::Absolute(Tensor::zeros(&[4, cfg.dim]));
        assert!(matches!(
            model.forward(&tokens, &pos),
            Err(Error::Adaptation(_))
        ));
    }

    fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
        let cols = t.shape()[1];
        let mut data = Vec::with_capacity(t.len());
        for &i in perm {
            data.extend_from_slice(t.row(i));
        }
        Tensor::new(vec![perm.len(), cols], data).unwrap()
    }

    fn permute_bias(b: &Tensor, perm: &[usize]) -> Tensor {
        let n = perm.len();
        let heads = b.shape()[2];
        let mut out = Tensor::zeros(&[n, n, heads]);
        for (a_new, &a_old) in perm.iter().enumerate() {
            for (b_new, &b_old) in perm.iter().enumerate() {
                for h in 0..heads {
                    let v = b.at(&[a_old, b_old, h]);
                    out.set(&[a_new, b_new, h], v);
                }
            }
        }
        out
    }
}
