//! Per-sample inference orchestration and dataset-level evaluation.
//!
//! The flow per sample: guidance forward → exit check; on exit, the
//! guidance prediction is final. Otherwise the saliency map scores the
//! target's token grid, the confidence-to-drop mapping fixes the budget,
//! and the target runs on the reduced sequence with adapted positional
//! structures.

use serde::Serialize;

use crate::dataset::Sample;
use crate::dropper::{self, TokenSelection};
use crate::error::{Error, Result};
use crate::flops::{pipeline_flops, vit_forward_flops, FlopsReport};
use crate::model::{train::argmax, Model};
use crate::policy::{self, ExitDecision, PolicyParams};
use crate::saliency::{self, SaliencyMap};
use crate::tensor::Tensor;

/// Outcome of one sample, serialized as one JSONL record (field order fixed).
#[derive(Debug, Clone, Serialize)]
pub struct SampleResult {
    pub prediction: usize,
    pub exited_early: bool,
    pub confidence: f64,
    /// Patch tokens seen by the target model; T untouched on early exit.
    pub kept_tokens: usize,
    pub flops: FlopsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

/// Intermediate artifacts of one inference, for debug dumps and tests.
#[derive(Debug, Clone)]
pub struct InferDetail {
    pub decision: ExitDecision,
    pub saliency: Option<SaliencyMap>,
    pub selection: Option<TokenSelection>,
    pub target_logits: Option<Tensor>,
}

/// Aggregate metrics for one parameter setting.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub tau: f64,
    pub gamma: f64,
    pub r_max: f64,
    /// Absent when the dataset is unlabeled.
    pub accuracy: Option<f64>,
    pub mean_flops: f64,
    pub exit_rate: f64,
    pub mean_keep_ratio: f64,
}

/// Plain full-token reference run of the target model alone.
#[derive(Debug, Clone, Copy)]
pub struct BaselineSummary {
    pub accuracy: Option<f64>,
    /// Forward cost per sample; every sample costs the same.
    pub flops_per_sample: u64,
}

pub fn infer_one(
    image: &Tensor,
    label: Option<usize>,
    guidance: &Model,
    target: &Model,
    params: &PolicyParams,
) -> Result<SampleResult> {
    infer_one_detailed(image, label, guidance, target, params).map(|(r, _)| r)
}

pub fn infer_one_detailed(
    image: &Tensor,
    label: Option<usize>,
    guidance: &Model,
    target: &Model,
    params: &PolicyParams,
) -> Result<(SampleResult, InferDetail)> {
    let total_patches = target.config.num_patches();
    let guidance_trace = guidance.forward_image(image)?;
    let probs = guidance_trace.logits.softmax(0)?;
    let decision = policy::decide(&probs, params, total_patches)?;
    let flops = pipeline_flops(&decision, &guidance.config, &target.config);

    let (result, detail) = match decision {
        ExitDecision::Exit {
            class_index,
            confidence,
        } => (
            SampleResult {
                prediction: class_index,
                exited_early: true,
                confidence,
                kept_tokens: total_patches,
                flops,
                correct: None,
            },
            InferDetail {
                decision,
                saliency: None,
                selection: None,
                target_logits: None,
            },
        ),
        ExitDecision::Proceed {
            confidence,
            kept_count,
            ..
        } => {
            let guidance_class = argmax(probs.data());
            let saliency = saliency::saliency_from_trace(
                guidance,
                &guidance_trace,
                guidance_class,
                total_patches,
            )?;
            let selection = dropper::select_tokens(&saliency, kept_count)?;
            let patches = target.patch_embed(image)?;
            let tokens =
                dropper::gather_tokens(&patches, &target.weights.class_token, &selection)?;
            let pos = dropper::adapt(&target.weights.positional, &selection)?;
            let trace = target.forward(&tokens, &pos)?;
            let prediction = argmax(trace.logits.data());
            (
                SampleResult {
                    prediction,
                    exited_early: false,
                    confidence,
                    kept_tokens: kept_count,
                    flops,
                    correct: None,
                },
                InferDetail {
                    decision,
                    saliency: Some(saliency),
                    selection: Some(selection),
                    target_logits: Some(trace.logits),
                },
            )
        }
    };
    let mut result = result;
    result.correct = label.map(|l| l == result.prediction);
    Ok((result, detail))
}

/// Run a closure over `0..n` on `workers` threads with strided assignment,
/// reassembling results in index order so the outcome does not depend on
/// the worker count.
fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers == 0 {
        return Err(Error::Argument("worker count must be >= 1".into()));
    }
    if workers == 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let mut buckets: Vec<Vec<(usize, T)>> = Vec::new();
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for w in 0..workers.min(n) {
            let f = &f;
            handles.push(scope.spawn(move || -> Result<Vec<(usize, T)>> {
                let mut out = Vec::new();
                let mut i = w;
                while i < n {
                    out.push((i, f(i)?));
                    i += workers;
                }
                Ok(out)
            }));
        }
        for h in handles {
            buckets.push(h.join().expect("worker panicked")?);
        }
        Ok(())
    })?;
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    for bucket in buckets {
        for (i, v) in bucket {
            slots[i] = Some(v);
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("missing slot")).collect())
}

/// Evaluate the full pipeline over a dataset. Results are in dataset order
/// and independent of the worker count.
pub fn evaluate(
    dataset: &[Sample],
    guidance: &Model,
    target: &Model,
    params: &PolicyParams,
    workers: usize,
) -> Result<(EvalSummary, Vec<SampleResult>)> {
    if dataset.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    let results = parallel_map(dataset.len(), workers, |i| {
        let s = &dataset[i];
        infer_one(&s.image, s.label, guidance, target, params)
            .map_err(|e| e.for_sample(s.id.clone()))
    })?;
    let summary = summarize(&results, params, target.config.num_patches());
    Ok((summary, results))
}

fn summarize(results: &[SampleResult], params: &PolicyParams, total_patches: usize) -> EvalSummary {
    let n = results.len() as f64;
    let accuracy = if results.iter().all(|r| r.correct.is_some()) {
        Some(results.iter().filter(|r| r.correct == Some(true)).count() as f64 / n)
    } else {
        None
    };
    let mean_flops = results.iter().map(|r| r.flops.total as f64).sum::<f64>() / n;
    let exit_rate = results.iter().filter(|r| r.exited_early).count() as f64 / n;
    let mean_keep_ratio = results
        .iter()
        .map(|r| r.kept_tokens as f64 / total_patches as f64)
        .sum::<f64>()
        / n;
    EvalSummary {
        tau: params.tau,
        gamma: params.gamma,
        r_max: params.r_max,
        accuracy,
        mean_flops,
        exit_rate,
        mean_keep_ratio,
    }
}

/// Reference evaluation: the target model alone on full token sequences.
pub fn evaluate_baseline(
    dataset: &[Sample],
    target: &Model,
    workers: usize,
) -> Result<BaselineSummary> {
    if dataset.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    let outcomes = parallel_map(dataset.len(), workers, |i| {
        let s = &dataset[i];
        let trace = target
            .forward_image(&s.image)
            .map_err(|e| e.for_sample(s.id.clone()))?;
        Ok(s.label.map(|l| argmax(trace.logits.data()) == l))
    })?;
    let accuracy = if outcomes.iter().all(|o| o.is_some()) {
        Some(
            outcomes.iter().filter(|o| **o == Some(true)).count() as f64 / outcomes.len() as f64,
        )
    } else {
        None
    };
    Ok(BaselineSummary {
        accuracy,
        flops_per_sample: vit_forward_flops(&target.config, target.config.seq_len()),
    })
}

/// One evaluation per (τ, γ) grid point, τ-major order.
pub fn sweep(
    dataset: &[Sample],
    guidance: &Model,
    target: &Model,
    taus: &[f64],
    gammas: &[f64],
    r_max: f64,
    workers: usize,
) -> Result<Vec<EvalSummary>> {
    if taus.is_empty() || gammas.is_empty() {
        return Err(Error::Argument("sweep grid is empty".into()));
    }
    let mut out = Vec::with_capacity(taus.len() * gammas.len());
    for &tau in taus {
        for &gamma in gammas {
            let params = PolicyParams::new(tau, gamma, r_max)?;
            let (summary, _) = evaluate(dataset, guidance, target, &params, workers)?;
            out.push(summary);
        }
    }
    Ok(out)
}
