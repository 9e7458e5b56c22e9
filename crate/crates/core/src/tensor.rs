//! Minimal dense f64 tensor kernel.
//!
//! Everything downstream (models, saliency, the trainer) is built on this
//! module. Tensors are immutable row-major buffers; every operation returns
//! a fresh tensor. All math is in 64-bit floats for determinism at desk
//! scale.
//!
//! Each compute operation also bumps a thread-local FLOP counter using a
//! fixed, documented convention (see [`op_count`]). The analytic cost model
//! in `flops` mirrors the same table, which lets tests compare the closed
//! form against an instrumented real forward pass.

use crate::error::{Error, Result};

/// Thread-local FLOP accounting for instrumented cost checks.
///
/// Convention (1 multiply-add = 2 FLOPs; comparisons and data movement are
/// free; transcendentals are charged a small fixed cost):
///
/// | operation                  | FLOPs charged            |
/// |----------------------------|--------------------------|
/// | matmul m×k · k×n           | 2·m·k·n                  |
/// | elementwise add / scale    | 1 per element            |
/// | bias add over rows         | 1 per element            |
/// | layer_norm on n×d          | 8·n·d                    |
/// | softmax over rows of len L | 5 per element            |
/// | gelu                       | 10 per element           |
/// | mean over rows n×d         | n·d + d                  |
/// | bilinear_resize            | 11 per output element    |
/// | minmax_normalize           | 2 per element            |
/// | relu / gather / transpose  | 0                        |
pub mod op_count {
    use std::cell::Cell;

    thread_local! {
        static FLOPS: Cell<u64> = const { Cell::new(0) };
    }

    /// Reset the current thread's counter to zero.
    pub fn reset() {
        FLOPS.with(|c| c.set(0));
    }

    /// Total FLOPs charged on this thread since the last reset.
    pub fn flops() -> u64 {
        FLOPS.with(|c| c.get())
    }

    pub(crate) fn charge(n: u64) {
        FLOPS.with(|c| c.set(c.get().wrapping_add(n)));
    }
}

/// Dense n-dimensional tensor of 64-bit floats, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and a flat row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "new",
                detail: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        if expected != data.len() {
            return Err(Error::Shape {
                op: "new",
                detail: format!(
                    "shape {shape:?} implies {expected} elements, buffer has {}",
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input; test convenience.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows: empty row list");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// All stored values finite (no NaN/Inf).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dim2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::Shape {
                op,
                detail: format!("expected rank-2 tensor, got shape {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Element access for rank ≤ 3 via a full index. Panics on bad index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat(index);
        self.data[i] = value;
    }

    fn flat(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for dim {i} (size {dim})");
            flat = flat * dim + ix;
        }
        flat
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().expect("row: scalar tensor");
        let rows: usize = self.shape[..self.shape.len() - 1].iter().product();
        assert!(i < rows, "row index out of bounds");
        &self.data[i * cols..(i + 1) * cols]
    }

    // ---- arithmetic -------------------------------------------------------

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dim2("matmul")?;
        let (k2, n) = other.dim2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!(
                    "inner dimensions disagree: left is {:?}, right is {:?}",
                    self.shape, other.shape
                ),
            });
        }
        op_count::charge(2 * (m * k * n) as u64);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_at(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dim2("matmul_at")?;
        let (k2, n) = other.dim2("matmul_at")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_at",
                detail: format!(
                    "inner dimensions disagree: left (transposed) is {:?}, right is {:?}",
                    self.shape, other.shape
                ),
            });
        }
        op_count::charge(2 * (m * k * n) as u64);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_bt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dim2("matmul_bt")?;
        let (n, k2) = other.dim2("matmul_bt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_bt",
                detail: format!(
                    "inner dimensions disagree: left is {:?}, right (transposed) is {:?}",
                    self.shape, other.shape
                ),
            });
        }
        op_count::charge(2 * (m * k * n) as u64);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (a, b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        op_count::charge(self.data.len() as u64);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        op_count::charge(self.data.len() as u64);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Add a length-`d` bias vector to every row of an n×d tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, d) = self.dim2("add_bias")?;
        if bias.data.len() != d {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("rows of {:?} vs bias {:?}", self.shape, bias.shape),
            });
        }
        op_count::charge(self.data.len() as u64);
        let mut data = self.data.clone();
        for row in data.chunks_mut(d) {
            for (x, b) in row.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (m, n) = self.dim2("transpose2")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], data)
    }

    /// Mean over rows of an n×d tensor, returning a 1×d tensor.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (n, d) = self.dim2("mean_rows")?;
        op_count::charge((n * d + d) as u64);
        let mut out = vec![0.0; d];
        for row in self.data.chunks(d) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let inv = 1.0 / n as f64;
        for o in &mut out {
            *o *= inv;
        }
        Tensor::new(vec![1, d], out)
    }

    // ---- neural-net primitives -------------------------------------------

    /// Numerically stable softmax along `axis` (rank 1 or 2).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Argument(format!(
                "softmax axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        op_count::charge(5 * self.data.len() as u64);
        match self.rank() {
            1 => {
                let mut data = self.data.clone();
                softmax_slice(&mut data);
                Tensor::new(self.shape.clone(), data)
            }
            2 => {
                let (m, n) = (self.shape[0], self.shape[1]);
                let mut data = self.data.clone();
                if axis == 1 {
                    for row in data.chunks_mut(n) {
                        softmax_slice(row);
                    }
                } else {
                    for j in 0..n {
                        let mut col: Vec<f64> = (0..m).map(|i| data[i * n + j]).collect();
                        softmax_slice(&mut col);
                        for (i, v) in col.into_iter().enumerate() {
                            data[i * n + j] = v;
                        }
                    }
                }
                Tensor::new(self.shape.clone(), data)
            }
            r => Err(Error::Argument(format!(
                "softmax supports rank 1 or 2, got rank {r}"
            ))),
        }
    }

    /// Per-row layer normalization with affine parameters.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, d) = self.dim2("layer_norm")?;
        if eps <= 0.0 {
            return Err(Error::Argument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        if gamma.data.len() != d || beta.data.len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "input {:?} needs gamma/beta of length {d}, got {:?}/{:?}",
                    self.shape, gamma.shape, beta.shape
                ),
            });
        }
        op_count::charge(8 * (n * d) as u64);
        let mut data = self.data.clone();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (x, (g, b)) in row.iter_mut().zip(gamma.data.iter().zip(&beta.data)) {
                *x = (*x - mean) * rstd * g + b;
            }
        }
        Tensor::new(self.shape.clone(), data)
    }

    /// Elementwise GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> Tensor {
        op_count::charge(10 * self.data.len() as u64);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| gelu_scalar(x)).collect(),
        }
    }

    pub fn relu(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x.max(0.0)).collect(),
        }
    }

    /// Bilinear resample of a 2-D map using half-pixel centers
    /// (the align-corners=false convention), replicating edges.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let (h, w) = self.dim2("bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Argument(
                "bilinear_resize output dims must be >= 1".into(),
            ));
        }
        op_count::charge(11 * (out_h * out_w) as u64);
        let scale_y = h as f64 / out_h as f64;
        let scale_x = w as f64 / out_w as f64;
        let mut data = vec![0.0; out_h * out_w];
        for oy in 0..out_h {
            let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let top = self.data[y0 * w + x0] * (1.0 - fx) + self.data[y0 * w + x1] * fx;
                let bot = self.data[y1 * w + x0] * (1.0 - fx) + self.data[y1 * w + x1] * fx;
                data[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
        Tensor::new(vec![out_h, out_w], data)
    }

    /// Affine rescale of all values to [0, 1]. A flat input maps to a
    /// uniform 0.5 so downstream ranking treats every element equally.
    pub fn minmax_normalize(&self) -> Tensor {
        op_count::charge(2 * self.data.len() as u64);
        let min = self.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == min {
            return Tensor::full(&self.shape, 0.5);
        }
        let inv = 1.0 / (max - min);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| (v - min) * inv).collect(),
        }
    }
}

fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    const CUBIC: f64 = 0.044_715;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + CUBIC * x * x * x)).tanh())
}

/// Indices of the `k` largest scores, ties broken toward the smaller index,
/// returned in ascending index order so spatial token order is preserved.
pub fn arg_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Argument(format!(
            "top-k count {k} out of range 1..={}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Descending by score; stable sort keeps equal scores in index order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("NaN score"));
    let mut keep: Vec<usize> = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.set(&[i, i], 1.0);
        }
        t
    }

    #[test]
    fn matmul_identity_is_exact() {
        let m = Tensor::from_rows(&[vec![1.5, -2.0, 3.0], vec![0.0, 4.0, -1.0], vec![7.0, 0.5, 2.0]]);
        assert_eq!(identity(3).matmul(&m).unwrap(), m);
        assert_eq!(m.matmul(&identity(3)).unwrap(), m);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_ones_row_column() {
        let k = 7;
        let row = Tensor::full(&[1, k], 1.0);
        let col = Tensor::full(&[k, 1], 1.0);
        let c = row.matmul(&col).unwrap();
        assert_eq!(c.data(), &[k as f64]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_bt_matches_explicit_transpose() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]);
        let b = Tensor::from_rows(&[vec![2.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]]);
        let via_bt = a.matmul_bt(&b).unwrap();
        let via_t = a.matmul(&b.transpose2().unwrap()).unwrap();
        assert_eq!(via_bt, via_t);
    }

    #[test]
    fn matmul_at_matches_explicit_transpose() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![2.0, 0.0, 1.0], vec![1.0, 1.0, 1.0], vec![0.5, -2.0, 0.0]]);
        let via_at = a.matmul_at(&b).unwrap();
        let via_t = a.transpose2().unwrap().matmul(&b).unwrap();
        assert_eq!(via_at, via_t);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let t = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_stable_under_large_logits() {
        let t = Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_closed_form_quarters() {
        // e^0 / (e^0 + e^ln 3) = 1/4
        let t = Tensor::new(vec![2], vec![0.0, 3.0_f64.ln()]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let x = Tensor::from_rows(&[vec![5.0, 5.0, 5.0, 5.0]]);
        let gamma = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let beta = Tensor::zeros(&[4]);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let x = Tensor::from_rows(&[vec![1.0, -1.0]]);
        let gamma = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let beta = Tensor::zeros(&[2]);
        let y = x.layer_norm(&gamma, &beta, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
        assert!((y.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_zero_gamma_collapses_to_beta() {
        let x = Tensor::from_rows(&[vec![3.0, -2.0, 9.0]]);
        let gamma = Tensor::zeros(&[3]);
        let beta = Tensor::new(vec![3], vec![0.7, 0.7, 0.7]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        for v in y.data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_var() {
        let x = Tensor::from_rows(&[vec![0.3, -4.0, 2.5, 10.0, -0.1], vec![1.0, 2.0, 3.0, 4.0, 5.0]]);
        let gamma = Tensor::new(vec![5], vec![1.0; 5]).unwrap();
        let beta = Tensor::zeros(&[5]);
        let y = x.layer_norm(&gamma, &beta, 1e-12).unwrap();
        for r in 0..2 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-9, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-9, "row var {var}");
        }
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.8412).abs() < 1e-4);
        // Large positive inputs approach the identity.
        assert!((gelu_scalar(20.0) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn bilinear_half_pixel_hand_case() {
        let src = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let out = src.bilinear_resize(1, 4).unwrap();
        let expected = [0.0, 0.25, 0.75, 1.0];
        for (v, e) in out.data().iter().zip(&expected) {
            assert!((v - e).abs() < 1e-12, "{:?}", out.data());
        }
    }

    #[test]
    fn bilinear_same_shape_is_identity() {
        let src = Tensor::from_rows(&[vec![0.1, 0.9], vec![0.4, 0.3]]);
        let out = src.bilinear_resize(2, 2).unwrap();
        for (v, e) in out.data().iter().zip(src.data()) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let src = Tensor::full(&[3, 5], 0.42);
        let out = src.bilinear_resize(7, 2).unwrap();
        for v in out.data() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }

    #[test]
    fn minmax_affine_and_degenerate() {
        let t = Tensor::new(vec![3], vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(t.minmax_normalize().data(), &[0.0, 0.5, 1.0]);

        let flat = Tensor::full(&[4], 3.3);
        assert_eq!(flat.minmax_normalize().data(), &[0.5; 4]);

        let t = Tensor::new(vec![3], vec![-1.0, 0.0, 3.0]).unwrap();
        assert_eq!(t.minmax_normalize().data(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn arg_top_k_basic_and_ties() {
        assert_eq!(arg_top_k(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(arg_top_k(&[0.4, 0.4, 0.4], 3).unwrap(), vec![0, 1, 2]);
        assert!(arg_top_k(&[0.1, 0.2], 0).is_err());
        assert!(arg_top_k(&[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn arg_top_k_matches_sort_oracle() {
        // Fixed 10-vector; oracle: sort (score desc, index asc), take k, sort.
        let scores = [0.31, 0.77, 0.12, 0.77, 0.05, 0.92, 0.44, 0.31, 0.68, 0.02];
        let k = 4;
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut expected = idx[..k].to_vec();
        expected.sort_unstable();
        assert_eq!(arg_top_k(&scores, k).unwrap(), expected);
    }

    #[test]
    fn op_counter_charges_matmul() {
        op_count::reset();
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[4, 5]);
        let _ = a.matmul(&b).unwrap();
        assert_eq!(op_count::flops(), 2 * 3 * 4 * 5);
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(xs in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let n = xs.len();
            let t = Tensor::new(vec![n], xs).unwrap();
            let s = t.softmax(0).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn arg_top_k_full_is_identity(xs in proptest::collection::vec(-10.0f64..10.0, 1..16)) {
            let n = xs.len();
            let keep = arg_top_k(&xs, n).unwrap();
            prop_assert_eq!(keep, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn minmax_idempotent_on_non_degenerate(xs in proptest::collection::vec(-10.0f64..10.0, 2..20)) {
            prop_assume!(xs.iter().cloned().fold(f64::INFINITY, f64::min)
                != xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            let n = xs.len();
            let t = Tensor::new(vec![n], xs).unwrap();
            let once = t.minmax_normalize();
            let twice = once.minmax_normalize();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn bilinear_stays_in_source_range(
            vals in proptest::collection::vec(-5.0f64..5.0, 6),
            oh in 1usize..7,
            ow in 1usize..7,
        ) {
            let src = Tensor::new(vec![2, 3], vals.clone()).unwrap();
            let out = src.bilinear_resize(oh, ow).unwrap();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in out.data() {
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }
}
