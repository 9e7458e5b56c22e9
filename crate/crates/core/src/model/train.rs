//! Per-sample SGD trainer used to obtain non-trivial desk-scale weights.
//!
//! The guided-dropping engine itself never updates weights; this exists so
//! the evaluation harness has models worth measuring. Training always runs
//! on full token sequences. Gradients are exact reverse-mode derivatives of
//! the cross-entropy loss, checked against finite differences in the tests.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    head_slice, slice_cols, write_cols, BlockWeights, Model, PositionalWeights, Readout,
    ViTWeights, LN_EPS,
};
use crate::tensor::Tensor;

/// One labeled training image.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image: Tensor,
    pub label: usize,
}

/// Trained weights plus the accuracy recorded on the training set.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Plain SGD with per-sample updates, deterministic for a given seed.
pub fn train_toy(
    mut model: Model,
    data: &[TrainExample],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Training("training dataset is empty".into()));
    }
    if lr < 0.0 {
        return Err(Error::Argument(format!("learning rate must be >= 0, got {lr}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_loss = f64::NAN;
    for _ in 0..epochs {
        shuffle(&mut order, &mut rng);
        for &i in &order {
            let ex = &data[i];
            let (loss, grads) = loss_and_grads(&model, &ex.image, ex.label)?;
            if !loss.is_finite() {
                return Err(Error::Training(
                    "loss diverged to NaN/Inf; lower the learning rate".into(),
                ));
            }
            last_loss = loss;
            sgd_step(&mut model.weights, &grads, lr);
        }
    }
    let mut correct = 0usize;
    for ex in data {
        let trace = model.forward_image(&ex.image)?;
        if argmax(trace.logits.data()) == ex.label {
            correct += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        train_accuracy: correct as f64 / data.len() as f64,
        final_loss: last_loss,
    })
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("NaN logit"))
        .map(|(i, _)| i)
        .expect("empty logits")
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Cross-entropy loss of one sample. NaN/Inf pass through so the training
/// loop can detect divergence.
pub fn sample_loss(model: &Model, image: &Tensor, label: usize) -> Result<f64> {
    let trace = model.forward_image(image)?;
    let probs = trace.logits.softmax(0)?;
    Ok(-probs.data()[label].ln())
}

struct BlockCache {
    x_in: Tensor,
    normed1: Tensor,
    qkv: Tensor,
    att: Vec<Tensor>,
    context: Tensor,
    x_mid: Tensor,
    normed2: Tensor,
    fc1: Tensor,
    gelu: Tensor,
}

struct ForwardCache {
    patch_matrix: Tensor,
    x0: Tensor,
    blocks: Vec<BlockCache>,
    features: Tensor,
    readout_row: Tensor,
    logits: Tensor,
}

fn forward_cached(model: &Model, image: &Tensor) -> Result<ForwardCache> {
    let cfg = &model.config;
    let w = &model.weights;
    let patch_matrix = crate::model::patch_matrix(cfg, image)?;
    let embedded = patch_matrix
        .matmul(&w.patch_weight)?
        .add_bias(&w.patch_bias)?;
    let tokens = crate::dropper::prepend_row(&w.class_token, &embedded)?;
    let (mut x, rel) = match &w.positional {
        PositionalWeights::Absolute(p) => (tokens.add(p)?, None),
        PositionalWeights::RelativeBias(b) => (tokens, Some(b)),
    };
    let x0 = x.clone();

    let n = x.shape()[0];
    let c = cfg.dim;
    let heads = cfg.heads;
    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();

    let mut blocks = Vec::with_capacity(cfg.depth);
    for block in &w.blocks {
        let x_in = x.clone();
        let normed1 = x.layer_norm(&block.ln1_gamma, &block.ln1_beta, LN_EPS)?;
        let qkv = normed1.matmul(&block.qkv_weight)?.add_bias(&block.qkv_bias)?;
        let mut context = Tensor::zeros(&[n, c]);
        let mut att_maps = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = slice_cols(&qkv, h * d, d);
            let k = slice_cols(&qkv, c + h * d, d);
            let v = slice_cols(&qkv, 2 * c + h * d, d);
            let mut scores = q.matmul_bt(&k)?.scale(scale);
            if let Some(bias) = rel {
                scores = scores.add(&head_slice(bias, h))?;
            }
            let att = scores.softmax(1)?;
            let ctx = att.matmul(&v)?;
            write_cols(&mut context, h * d, &ctx);
            att_maps.push(att);
        }
        let proj = context.matmul(&block.proj_weight)?.add_bias(&block.proj_bias)?;
        let x_mid = x.add(&proj)?;
        let normed2 = x_mid.layer_norm(&block.ln2_gamma, &block.ln2_beta, LN_EPS)?;
        let fc1 = normed2.matmul(&block.fc1_weight)?.add_bias(&block.fc1_bias)?;
        let gelu = fc1.gelu();
        let mlp_out = gelu.matmul(&block.fc2_weight)?.add_bias(&block.fc2_bias)?;
        x = x_mid.add(&mlp_out)?;
        blocks.push(BlockCache {
            x_in,
            normed1,
            qkv,
            att: att_maps,
            context,
            x_mid,
            normed2,
            fc1,
            gelu,
        });
    }

    let features = x;
    let y = features.layer_norm(&w.final_norm_gamma, &w.final_norm_beta, LN_EPS)?;
    let readout_row = match cfg.readout {
        Readout::ClassToken => Tensor::new(vec![1, c], y.row(0).to_vec())?,
        Readout::MeanPool => y.mean_rows()?,
    };
    let logits_row = readout_row.matmul(&w.head_weight)?.add_bias(&w.head_bias)?;
    let logits = Tensor::new(vec![cfg.num_classes], logits_row.into_data())?;
    Ok(ForwardCache {
        patch_matrix,
        x0,
        blocks,
        features,
        readout_row,
        logits,
    })
}

fn zeros_like_weights(w: &ViTWeights) -> ViTWeights {
    let z = |t: &Tensor| Tensor::zeros(t.shape());
    ViTWeights {
        patch_weight: z(&w.patch_weight),
        patch_bias: z(&w.patch_bias),
        class_token: z(&w.class_token),
        positional: match &w.positional {
            PositionalWeights::Absolute(p) => PositionalWeights::Absolute(z(p)),
            PositionalWeights::RelativeBias(b) => PositionalWeights::RelativeBias(z(b)),
        },
        blocks: w
            .blocks
            .iter()
            .map(|b| BlockWeights {
                ln1_gamma: z(&b.ln1_gamma),
                ln1_beta: z(&b.ln1_beta),
                qkv_weight: z(&b.qkv_weight),
                qkv_bias: z(&b.qkv_bias),
                proj_weight: z(&b.proj_weight),
                proj_bias: z(&b.proj_bias),
                ln2_gamma: z(&b.ln2_gamma),
                ln2_beta: z(&b.ln2_beta),
                fc1_weight: z(&b.fc1_weight),
                fc1_bias: z(&b.fc1_bias),
                fc2_weight: z(&b.fc2_weight),
                fc2_bias: z(&b.fc2_bias),
            })
            .collect(),
        final_norm_gamma: z(&w.final_norm_gamma),
        final_norm_beta: z(&w.final_norm_beta),
        head_weight: z(&w.head_weight),
        head_bias: z(&w.head_bias),
    }
}

fn param_pairs<'a>(
    w: &'a mut ViTWeights,
    g: &'a ViTWeights,
) -> Vec<(&'a mut Tensor, &'a Tensor)> {
    let mut pairs: Vec<(&mut Tensor, &Tensor)> = vec![
        (&mut w.patch_weight, &g.patch_weight),
        (&mut w.patch_bias, &g.patch_bias),
        (&mut w.class_token, &g.class_token),
    ];
    match (&mut w.positional, &g.positional) {
        (PositionalWeights::Absolute(p), PositionalWeights::Absolute(gp)) => pairs.push((p, gp)),
        (PositionalWeights::RelativeBias(b), PositionalWeights::RelativeBias(gb)) => {
            pairs.push((b, gb))
        }
        _ => unreachable!("gradient positional variant mismatch"),
    }
    for (wb, gb) in w.blocks.iter_mut().zip(&g.blocks) {
        pairs.push((&mut wb.ln1_gamma, &gb.ln1_gamma));
        pairs.push((&mut wb.ln1_beta, &gb.ln1_beta));
        pairs.push((&mut wb.qkv_weight, &gb.qkv_weight));
        pairs.push((&mut wb.qkv_bias, &gb.qkv_bias));
        pairs.push((&mut wb.proj_weight, &gb.proj_weight));
        pairs.push((&mut wb.proj_bias, &gb.proj_bias));
        pairs.push((&mut wb.ln2_gamma, &gb.ln2_gamma));
        pairs.push((&mut wb.ln2_beta, &gb.ln2_beta));
        pairs.push((&mut wb.fc1_weight, &gb.fc1_weight));
        pairs.push((&mut wb.fc1_bias, &gb.fc1_bias));
        pairs.push((&mut wb.fc2_weight, &gb.fc2_weight));
        pairs.push((&mut wb.fc2_bias, &gb.fc2_bias));
    }
    pairs.push((&mut w.final_norm_gamma, &g.final_norm_gamma));
    pairs.push((&mut w.final_norm_beta, &g.final_norm_beta));
    pairs.push((&mut w.head_weight, &g.head_weight));
    pairs.push((&mut w.head_bias, &g.head_bias));
    pairs
}

fn sgd_step(weights: &mut ViTWeights, grads: &ViTWeights, lr: f64) {
    for (p, g) in param_pairs(weights, grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
}

/// Layer-norm backward for one n×d activation. Returns the input gradient
/// and accumulates parameter gradients.
fn ln_backward(
    x: &Tensor,
    gamma: &Tensor,
    d_out: &Tensor,
    d_gamma: &mut Tensor,
    d_beta: &mut Tensor,
) -> Tensor {
    let n = x.shape()[0];
    let d = x.shape()[1];
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let xi = x.row(i);
        let gi = d_out.row(i);
        let mean = xi.iter().sum::<f64>() / d as f64;
        let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let xhat: Vec<f64> = xi.iter().map(|v| (v - mean) * rstd).collect();
        let gg: Vec<f64> = gi.iter().zip(gamma.data()).map(|(g, gm)| g * gm).collect();
        let m1 = gg.iter().sum::<f64>() / d as f64;
        let m2 = gg.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[i * d + j] = rstd * (gg[j] - m1 - xhat[j] * m2);
            d_gamma.data_mut()[j] += gi[j] * xhat[j];
            d_beta.data_mut()[j] += gi[j];
        }
    }
    Tensor::new(vec![n, d], dx).expect("ln_backward shape")
}

fn gelu_prime(x: f64) -> f64 {
    const S: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = S * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * S * (1.0 + 3.0 * A * x * x)
}

fn col_sums_into(t: &Tensor, acc: &mut Tensor) {
    let d = t.shape()[1];
    for row in t.data().chunks(d) {
        for (a, v) in acc.data_mut().iter_mut().zip(row) {
            *a += v;
        }
    }
}

fn acc_into(dst: &mut Tensor, src: &Tensor) {
    for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += b;
    }
}

/// Cross-entropy loss and exact gradients for one sample.
fn loss_and_grads(model: &Model, image: &Tensor, label: usize) -> Result<(f64, ViTWeights)> {
    let cfg = &model.config;
    let w = &model.weights;
    if label >= cfg.num_classes {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let cache = forward_cached(model, image)?;
    let probs = cache.logits.softmax(0)?;
    let loss = -probs.data()[label].ln();

    let mut grads = zeros_like_weights(w);
    let nc = cfg.num_classes;
    let c = cfg.dim;
    let n = cache.x0.shape()[0];
    let heads = cfg.heads;
    let d = cfg.head_dim();
    let scale = 1.0 / (d as f64).sqrt();

    // d loss / d logits = probs - onehot(label), as a 1×NC row.
    let mut dl = probs.data().to_vec();
    dl[label] -= 1.0;
    let d_logits = Tensor::new(vec![1, nc], dl)?;

    // Head.
    acc_into(&mut grads.head_weight, &cache.readout_row.matmul_at(&d_logits)?);
    acc_into(
        &mut grads.head_bias,
        &Tensor::new(vec![nc], d_logits.data().to_vec())?,
    );
    let d_readout = d_logits.matmul_bt(&w.head_weight)?; // 1×C

    // Readout into the final-norm output.
    let mut d_y = Tensor::zeros(&[n, c]);
    match cfg.readout {
        Readout::ClassToken => {
            for j in 0..c {
                d_y.set(&[0, j], d_readout.data()[j]);
            }
        }
        Readout::MeanPool => {
            let inv = 1.0 / n as f64;
            for i in 0..n {
                for j in 0..c {
                    d_y.set(&[i, j], d_readout.data()[j] * inv);
                }
            }
        }
    }
    let mut d_x = ln_backward(
        &cache.features,
        &w.final_norm_gamma,
        &d_y,
        &mut grads.final_norm_gamma,
        &mut grads.final_norm_beta,
    );

    // Blocks in reverse.
    for (bi, (block, bc)) in w.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut grads.blocks[bi];

        // MLP branch: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid)))).
        let d_mlp_out = &d_x;
        acc_into(&mut gb.fc2_weight, &bc.gelu.matmul_at(d_mlp_out)?);
        col_sums_into(d_mlp_out, &mut gb.fc2_bias);
        let d_gelu = d_mlp_out.matmul_bt(&block.fc2_weight)?;
        let mut d_fc1 = d_gelu.clone();
        for (g, x) in d_fc1.data_mut().iter_mut().zip(bc.fc1.data()) {
            *g *= gelu_prime(*x);
        }
        acc_into(&mut gb.fc1_weight, &bc.normed2.matmul_at(&d_fc1)?);
        col_sums_into(&d_fc1, &mut gb.fc1_bias);
        let d_normed2 = d_fc1.matmul_bt(&block.fc1_weight)?;
        let d_mid_ln = ln_backward(
            &bc.x_mid,
            &block.ln2_gamma,
            &d_normed2,
            &mut gb.ln2_gamma,
            &mut gb.ln2_beta,
        );
        let mut d_x_mid = d_x.clone();
        acc_into(&mut d_x_mid, &d_mid_ln);

        // Attention branch: x_mid = x_in + proj(context).
        let d_attn_out = &d_x_mid;
        acc_into(&mut gb.proj_weight, &bc.context.matmul_at(d_attn_out)?);
        col_sums_into(d_attn_out, &mut gb.proj_bias);
        let d_context = d_attn_out.matmul_bt(&block.proj_weight)?;

        let mut d_qkv = Tensor::zeros(&[n, 3 * c]);
        for h in 0..heads {
            let q = slice_cols(&bc.qkv, h * d, d);
            let k = slice_cols(&bc.qkv, c + h * d, d);
            let v = slice_cols(&bc.qkv, 2 * c + h * d, d);
            let att = &bc.att[h];
            let d_ctx = slice_cols(&d_context, h * d, d);
            let d_att = d_ctx.matmul_bt(&v)?;
            let d_v = att.matmul_at(&d_ctx)?;
            // Softmax rows backward.
            let mut d_scores = Tensor::zeros(&[n, n]);
            for i in 0..n {
                let a_row = att.row(i);
                let g_row = d_att.row(i);
                let dot: f64 = a_row.iter().zip(g_row).map(|(a, g)| a * g).sum();
                for j in 0..n {
                    d_scores.set(&[i, j], a_row[j] * (g_row[j] - dot));
                }
            }
            if let PositionalWeights::RelativeBias(_) = &w.positional {
                if let PositionalWeights::RelativeBias(gbias) = &mut grads.positional {
                    let hn = gbias.shape()[2];
                    for i in 0..n {
                        for j in 0..n {
                            let idx = (i * n + j) * hn + h;
                            gbias.data_mut()[idx] += d_scores.at(&[i, j]);
                        }
                    }
                }
            }
            let d_qk = d_scores.scale(scale);
            let d_q = d_qk.matmul(&k)?;
            let d_k = d_qk.matmul_at(&q)?;
            write_cols(&mut d_qkv, h * d, &d_q);
            write_cols(&mut d_qkv, c + h * d, &d_k);
            write_cols(&mut d_qkv, 2 * c + h * d, &d_v);
        }
        acc_into(&mut gb.qkv_weight, &bc.normed1.matmul_at(&d_qkv)?);
        col_sums_into(&d_qkv, &mut gb.qkv_bias);
        let d_normed1 = d_qkv.matmul_bt(&block.qkv_weight)?;
        let d_in_ln = ln_backward(
            &bc.x_in,
            &block.ln1_gamma,
            &d_normed1,
            &mut gb.ln1_gamma,
            &mut gb.ln1_beta,
        );
        d_x = d_x_mid;
        acc_into(&mut d_x, &d_in_ln);
    }

    // Input structures.
    if let PositionalWeights::Absolute(_) = &w.positional {
        if let PositionalWeights::Absolute(gp) = &mut grads.positional {
            acc_into(gp, &d_x);
        }
    }
    for j in 0..c {
        grads.class_token.data_mut()[j] += d_x.at(&[0, j]);
    }
    let t = n - 1;
    let d_patch_rows = Tensor::new(vec![t, c], d_x.data()[c..].to_vec())?;
    acc_into(
        &mut grads.patch_weight,
        &cache.patch_matrix.matmul_at(&d_patch_rows)?,
    );
    col_sums_into(&d_patch_rows, &mut grads.patch_bias);

    Ok((loss, grads))
}
