//! Saliency scoring: gradient-weighted class activation mapping over the
//! guidance model's final transformer block, resampled onto the target
//! model's token grid.

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Model, Readout};
use crate::tensor::Tensor;

/// Per-token importance scores in [0, 1] on a √T×√T grid, raster order
/// matching the patch embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    grid_h: usize,
    grid_w: usize,
    scores: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(grid_h: usize, grid_w: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != grid_h * grid_w {
            return Err(Error::Argument(format!(
                "{} scores do not fill a {grid_h}×{grid_w} grid",
                scores.len()
            )));
        }
        if scores.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(Error::Argument("saliency scores must lie in [0, 1]".into()));
        }
        Ok(Self {
            grid_h,
            grid_w,
            scores,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Render as CSV, one line per grid row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.scores.chunks(self.grid_w) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Exact reverse-mode gradient of one class logit with respect to the final
/// block's features. Only the tail (final norm, readout, head) sits between
/// those features and the logit, so that is the differentiated path.
pub fn tail_gradient(trace: &ForwardTrace, class_index: usize, model: &Model) -> Result<Tensor> {
    let features = &trace.final_block_features;
    let n = features.shape()[0];
    let c = features.shape()[1];
    if c != model.config.dim {
        return Err(Error::Config(format!(
            "trace width {c} does not match model dim {}",
            model.config.dim
        )));
    }
    if class_index >= model.config.num_classes {
        return Err(Error::Argument(format!(
            "class index {class_index} out of range for {} classes",
            model.config.num_classes
        )));
    }
    let w = &model.weights;
    // d logit / d readout = head column for the chosen class.
    let head_col: Vec<f64> = (0..c)
        .map(|j| w.head_weight.data()[j * model.config.num_classes + class_index])
        .collect();

    let gamma = w.final_norm_gamma.data();
    let mut grad = vec![0.0; n * c];
    for i in 0..n {
        // d logit / d y_i: zero except the class row for class-token
        // readout, uniform 1/n for mean pooling.
        let row_weight = match model.config.readout {
            Readout::ClassToken => {
                if i == 0 {
                    1.0
                } else {
                    continue;
                }
            }
            Readout::MeanPool => 1.0 / n as f64,
        };
        let x = features.row(i);
        let mean = x.iter().sum::<f64>() / c as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + crate::model::LN_EPS).sqrt();
        // Backprop through y = gamma ⊙ x_hat + beta for this row.
        let gg: Vec<f64> = (0..c).map(|j| row_weight * head_col[j] * gamma[j]).collect();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
        let m1 = gg.iter().sum::<f64>() / c as f64;
        let m2 = gg.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f64>() / c as f64;
        for j in 0..c {
            grad[i * c + j] = rstd * (gg[j] - m1 - xhat[j] * m2);
        }
    }
    Tensor::new(vec![n, c], grad)
}

/// Grad-CAM over patch tokens: drop the class-token row from features and
/// gradient, average the gradient per channel, weight the activations and
/// pool channels, rectify, and reshape to the raster grid.
pub fn grad_cam(trace: &ForwardTrace, grad: &Tensor, guidance_grid: (usize, usize)) -> Result<Tensor> {
    let features = &trace.final_block_features;
    if grad.shape() != features.shape() {
        return Err(Error::Shape {
            op: "grad_cam",
            detail: format!("gradient {:?} vs features {:?}", grad.shape(), features.shape()),
        });
    }
    let n = features.shape()[0];
    let c = features.shape()[1];
    let (h, w) = guidance_grid;
    if n == 0 || h * w != n - 1 {
        return Err(Error::Argument(format!(
            "grid {h}×{w} does not hold {} patch tokens",
            n.saturating_sub(1)
        )));
    }
    let t = n - 1;
    // Channel weights: per-channel mean of the patch-token gradients.
    let mut alpha = vec![0.0; c];
    for i in 1..n {
        for (a, g) in alpha.iter_mut().zip(grad.row(i)) {
            *a += g;
        }
    }
    for a in &mut alpha {
        *a /= t as f64;
    }
    let mut map = vec![0.0; t];
    for (i, m) in map.iter_mut().enumerate() {
        let row = features.row(i + 1);
        let weighted: f64 = row.iter().zip(&alpha).map(|(v, a)| v * a).sum();
        *m = weighted.max(0.0);
    }
    Tensor::new(vec![h, w], map)
}

/// Saliency for the target's token grid, computed from an existing guidance
/// trace: Grad-CAM, bilinear resample to √T×√T, min–max normalize, flatten.
pub fn saliency_from_trace(
    guidance: &Model,
    trace: &ForwardTrace,
    class_index: usize,
    target_t: usize,
) -> Result<SaliencyMap> {
    let side = (target_t as f64).sqrt().round() as usize;
    if side * side != target_t {
        return Err(Error::Config(format!(
            "target token count {target_t} is not a perfect square"
        )));
    }
    let g = guidance.config.grid_side();
    let grad = tail_gradient(trace, class_index, guidance)?;
    let cam = grad_cam(trace, &grad, (g, g))?;
    let resized = cam.bilinear_resize(side, side)?;
    let normalized = resized.minmax_normalize();
    SaliencyMap::new(side, side, normalized.into_data())
}

/// Run the guidance model on the image and score the target's token grid.
/// `class_index` is normally the guidance model's own argmax prediction.
pub fn saliency_for_target(
    image: &Tensor,
    guidance: &Model,
    class_index: usize,
    target_t: usize,
) -> Result<SaliencyMap> {
    let trace = guidance.forward_image(image)?;
    saliency_from_trace(guidance, &trace, class_index, target_t)
}
