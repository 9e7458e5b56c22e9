//! Token dropping: converts a saliency map and a keep count into a reduced
//! token sequence with consistently adapted positional structures.
//!
//! The class token is never dropped. Kept indices are in ascending order,
//! preserving the raster spatial order of the patch grid so both absolute
//! positions and relative-bias indexing stay meaningful.

use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;
use crate::tensor::{arg_top_k, Tensor};

/// Ascending patch-token indices to keep; strictly increasing, non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSelection {
    keep_indices: Vec<usize>,
}

impl TokenSelection {
    /// Validate and wrap a list of kept patch indices out of `total` patches.
    pub fn new(keep_indices: Vec<usize>, total: usize) -> Result<Self> {
        if keep_indices.is_empty() {
            return Err(Error::Selection("empty selection".into()));
        }
        if !keep_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Selection(format!(
                "indices not strictly increasing: {keep_indices:?}"
            )));
        }
        if *keep_indices.last().unwrap() >= total {
            return Err(Error::Selection(format!(
                "index {} out of range for {total} patch tokens",
                keep_indices.last().unwrap()
            )));
        }
        Ok(Self { keep_indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.keep_indices
    }

    pub fn kept(&self) -> usize {
        self.keep_indices.len()
    }
}

/// Positional structures adapted to a reduced sequence. Row/slice 0 is the
/// class token; the rest follow the selection's ascending order.
#[derive(Debug, Clone, PartialEq)]
pub enum AdaptedPositional {
    /// [(K+1) × C]
    Absolute(Tensor),
    /// [(K+1) × (K+1) × heads]
    RelativeBias(Tensor),
}

/// Top-K selection over a saliency map. Ties break toward the smaller
/// index; the result is ascending.
pub fn select_tokens(saliency: &SaliencyMap, k: usize) -> Result<TokenSelection> {
    let scores = saliency.scores();
    if k == 0 || k > scores.len() {
        return Err(Error::Argument(format!(
            "keep count {k} out of range 1..={}",
            scores.len()
        )));
    }
    TokenSelection::new(arg_top_k(scores, k)?, scores.len())
}

/// Stack one row on top of a [K × C] matrix (class-token prepend).
pub fn prepend_row(row: &Tensor, rows: &Tensor) -> Result<Tensor> {
    if row.rank() != 2 || rows.rank() != 2 || row.shape()[0] != 1 || row.shape()[1] != rows.shape()[1]
    {
        return Err(Error::Shape {
            op: "prepend_row",
            detail: format!("{:?} on top of {:?}", row.shape(), rows.shape()),
        });
    }
    let mut data = Vec::with_capacity(row.len() + rows.len());
    data.extend_from_slice(row.data());
    data.extend_from_slice(rows.data());
    Tensor::new(vec![rows.shape()[0] + 1, rows.shape()[1]], data)
}

/// Gather kept patch embeddings and prepend the class token.
pub fn gather_tokens(x_patch: &Tensor, x_cls: &Tensor, sel: &TokenSelection) -> Result<Tensor> {
    let (t, c) = match x_patch.shape() {
        [t, c] => (*t, *c),
        s => {
            return Err(Error::Shape {
                op: "gather_tokens",
                detail: format!("patch matrix must be rank 2, got {s:?}"),
            })
        }
    };
    if let Some(&bad) = sel.indices().iter().find(|&&i| i >= t) {
        return Err(Error::Selection(format!(
            "selection index {bad} out of bounds for {t} patch tokens"
        )));
    }
    let mut data = Vec::with_capacity((sel.kept() + 1) * c);
    if x_cls.shape() != [1, c] {
        return Err(Error::Shape {
            op: "gather_tokens",
            detail: format!("class token {:?} incompatible with width {c}", x_cls.shape()),
        });
    }
    data.extend_from_slice(x_cls.data());
    for &i in sel.indices() {
        data.extend_from_slice(x_patch.row(i));
    }
    Tensor::new(vec![sel.kept() + 1, c], data)
}

/// Sub-select absolute positional embeddings. Row 0 is kept; patch row `i`
/// maps to embedding row `i + 1`.
pub fn adapt_absolute(p: &Tensor, sel: &TokenSelection) -> Result<Tensor> {
    let (rows, c) = match p.shape() {
        [r, c] => (*r, *c),
        s => {
            return Err(Error::Adaptation(format!(
                "positional matrix must be rank 2, got {s:?}"
            )))
        }
    };
    if sel.indices().last().unwrap() + 1 >= rows {
        return Err(Error::Adaptation(format!(
            "selection needs positional row {}, matrix has {rows}",
            sel.indices().last().unwrap() + 1
        )));
    }
    let mut data = Vec::with_capacity((sel.kept() + 1) * c);
    data.extend_from_slice(p.row(0));
    for &i in sel.indices() {
        data.extend_from_slice(p.row(i + 1));
    }
    Tensor::new(vec![sel.kept() + 1, c], data)
}

/// Sub-select a relative position bias on both token axes, always
/// including the class-token row/column (index 0).
pub fn adapt_relative_bias(b: &Tensor, sel: &TokenSelection) -> Result<Tensor> {
    let (rows, cols, heads) = match b.shape() {
        [r, c, h] => (*r, *c, *h),
        s => {
            return Err(Error::Adaptation(format!(
                "relative bias must be rank 3, got {s:?}"
            )))
        }
    };
    if rows != cols {
        return Err(Error::Adaptation(format!(
            "relative bias not square in token dims: {:?}",
            b.shape()
        )));
    }
    if sel.indices().last().unwrap() + 1 >= rows {
        return Err(Error::Adaptation(format!(
            "selection needs bias row {}, matrix has {rows}",
            sel.indices().last().unwrap() + 1
        )));
    }
    let index: Vec<usize> = std::iter::once(0)
        .chain(sel.indices().iter().map(|i| i + 1))
        .collect();
    let k1 = index.len();
    let mut out = Tensor::zeros(&[k1, k1, heads]);
    for (a_new, &a_old) in index.iter().enumerate() {
        for (b_new, &b_old) in index.iter().enumerate() {
            for h in 0..heads {
                let v = b.data()[(a_old * cols + b_old) * heads + h];
                out.set(&[a_new, b_new, h], v);
            }
        }
    }
    Ok(out)
}

/// Adapt whichever positional structure the model carries.
pub fn adapt(
    positional: &crate::model::PositionalWeights,
    sel: &TokenSelection,
) -> Result<AdaptedPositional> {
    match positional {
        crate::model::PositionalWeights::Absolute(p) => {
            Ok(AdaptedPositional::Absolute(adapt_absolute(p, sel)?))
        }
        crate::model::PositionalWeights::RelativeBias(b) => {
            Ok(AdaptedPositional::RelativeBias(adapt_relative_bias(b, sel)?))
        }
    }
}
