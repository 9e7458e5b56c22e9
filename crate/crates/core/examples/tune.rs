// Scratch probe for desk-scale hyperparameters. Not part of the test suite.

use std::time::Instant;

use tinydrop_core::dataset::{self, Sample};
use tinydrop_core::model::train::{train_toy, TrainExample};
use tinydrop_core::model::Model;
use tinydrop_core::pipeline;
use tinydrop_core::policy::PolicyParams;
use tinydrop_core::saliency;
use tinydrop_core::tensor::arg_top_k;

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let n_train = env_usize("N_TRAIN", 1600);
    let n_test = env_usize("N_TEST", 2000);
    let g_epochs = env_usize("G_EPOCHS", 12);
    let t_epochs = env_usize("T_EPOCHS", 12);
    let g_lr = env_f64("G_LR", 0.05);
    let t_lr = env_f64("T_LR", 0.05);
    let probe_k = env_usize("PROBE_K", 4);
    let saliency_only = std::env::var("SALIENCY_ONLY").is_ok();

    let train_set = dataset::generate_toy_dataset(n_train, 1);
    let test_set = dataset::generate_toy_dataset(n_test, 2);
    let train_ex: Vec<TrainExample> = train_set
        .iter()
        .map(|s| TrainExample { image: s.image.clone(), label: s.label })
        .collect();
    let test_samples: Vec<Sample> = test_set.iter().map(Sample::from).collect();

    let mut g_cfg = dataset::toy_guidance_config();
    g_cfg.dim = env_usize("G_DIM", g_cfg.dim);
    g_cfg.depth = env_usize("G_DEPTH", g_cfg.depth);
    g_cfg.heads = env_usize("G_HEADS", g_cfg.heads);
    g_cfg.mlp_ratio = env_f64("G_MLP", g_cfg.mlp_ratio);
    let t0 = Instant::now();
    let guidance = train_toy(
        Model::init(g_cfg, 11).unwrap(),
        &train_ex,
        g_epochs,
        g_lr,
        12,
    )
    .unwrap();
    println!(
        "guidance: {:>6.1}s train_acc={:.4} loss={:.4}",
        t0.elapsed().as_secs_f64(),
        guidance.train_accuracy,
        guidance.final_loss
    );
    let mut guidance = guidance.model;
    if std::env::var("RECENTER").is_ok() {
        use tinydrop_core::tensor::Tensor;
        let c = guidance.config.dim;
        let nc = guidance.config.num_classes;
        let w = &guidance.weights.head_weight;
        let mut data = w.data().to_vec();
        for j in 0..c {
            let mean: f64 = (0..nc).map(|k| data[j * nc + k]).sum::<f64>() / nc as f64;
            for k in 0..nc {
                data[j * nc + k] -= mean;
            }
        }
        guidance.weights.head_weight = Tensor::new(vec![c, nc], data).unwrap();
        println!("(head recentered)");
    }

    // Guidance test accuracy + confidence quantiles.
    let mut g_correct = 0;
    let mut confidences: Vec<f64> = Vec::new();
    for s in &test_set {
        let probs = guidance.predict_probs(&s.image).unwrap();
        let (am, c) = probs
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, &p)| (i, p))
            .unwrap();
        if am == s.label {
            g_correct += 1;
        }
        confidences.push(c);
    }
    println!("guidance test acc: {:.4}", g_correct as f64 / n_test as f64);
    let mut sorted = confidences.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p) as usize];
    println!(
        "confidence quantiles: p05={:.5} p25={:.5} p50={:.5} p75={:.5} p95={:.5}",
        q(0.05), q(0.25), q(0.50), q(0.75), q(0.95)
    );

    // Saliency probe at fixed K (independent of the target model): does the
    // pattern cell land in the top-K saliency scores? Also replay the
    // policy's own per-sample K at a τ that never exits.
    let mut per_class_hits = [0usize; 4];
    let mut per_class_total = [0usize; 4];
    let mut rank_hist = [0usize; 16];
    let mut policy_hits = 0usize;
    let mut contrast_bucket_hits = [0usize; 4];
    let mut contrast_bucket_total = [0usize; 4];
    let tau = 0.999_999;
    for s in &test_set {
        let probs = guidance.predict_probs(&s.image).unwrap();
        let (pred, conf) = probs
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, &p)| (i, p))
            .unwrap();
        let map = saliency::saliency_for_target(&s.image, &guidance, pred, 16).unwrap();
        let keep = arg_top_k(map.scores(), probe_k).unwrap();
        per_class_total[s.label] += 1;
        let bucket = (((s.contrast - 0.12) / (1.0 - 0.12) * 4.0) as usize).min(3);
        contrast_bucket_total[bucket] += 1;
        if keep.contains(&s.pattern_cell) {
            per_class_hits[s.label] += 1;
        }
        // Policy-shaped K.
        let params = PolicyParams::new(tau, 0.5, 0.7).unwrap();
        let r = tinydrop_core::policy::drop_ratio(conf, &params);
        let k = tinydrop_core::policy::kept_count(r, 16);
        if arg_top_k(map.scores(), k).unwrap().contains(&s.pattern_cell) {
            policy_hits += 1;
            contrast_bucket_hits[bucket] += 1;
        }
        let mut order: Vec<usize> = (0..16).collect();
        order.sort_by(|&a, &b| map.scores()[b].partial_cmp(&map.scores()[a]).unwrap().then(a.cmp(&b)));
        let rank = order.iter().position(|&i| i == s.pattern_cell).unwrap();
        rank_hist[rank] += 1;
    }
    let hits: usize = per_class_hits.iter().sum();
    println!(
        "saliency top-{probe_k} hit rate: {:.4}  per-class {:?} / {:?}",
        hits as f64 / n_test as f64,
        per_class_hits,
        per_class_total
    );
    println!(
        "policy-K hit rate: {:.4}  by contrast quartile {:?} / {:?}",
        policy_hits as f64 / n_test as f64,
        contrast_bucket_hits,
        contrast_bucket_total
    );
    println!("pattern-cell rank histogram: {rank_hist:?}");

    if saliency_only {
        return;
    }

    let t0 = Instant::now();
    let target = train_toy(
        Model::init(dataset::toy_target_config(), 21).unwrap(),
        &train_ex,
        t_epochs,
        t_lr,
        22,
    )
    .unwrap();
    println!(
        "target:   {:>6.1}s train_acc={:.4} loss={:.4}",
        t0.elapsed().as_secs_f64(),
        target.train_accuracy,
        target.final_loss
    );
    let target = target.model;

    let baseline = pipeline::evaluate_baseline(&test_samples, &target, 4).unwrap();
    println!("target test acc: {:.4}", baseline.accuracy.unwrap());

    let t0 = Instant::now();
    let taus = [0.5, 0.7, 0.9, 0.99, 0.999, 0.9999];
    let sums = pipeline::sweep(&test_samples, &guidance, &target, &taus, &[0.5], 0.7, 4).unwrap();
    let base_acc = baseline.accuracy.unwrap();
    let base_flops = baseline.flops_per_sample as f64;
    println!("baseline flops/sample: {:.3}M", base_flops / 1e6);
    for s in &sums {
        println!(
            "tau={:<7} acc={:.4} (drop {:+.4}) mean_flops={:.3}M (reduction {:.1}%) exit={:.3} keep={:.3}",
            s.tau,
            s.accuracy.unwrap(),
            s.accuracy.unwrap() - base_acc,
            s.mean_flops / 1e6,
            100.0 * (1.0 - s.mean_flops / base_flops),
            s.exit_rate,
            s.mean_keep_ratio
        );
    }
    println!("sweep time: {:.1}s", t0.elapsed().as_secs_f64());

    for tau in [0.9, 0.99, 0.999] {
        let sums =
            pipeline::sweep(&test_samples, &guidance, &target, &[tau], &[0.25, 0.5, 1.0], 0.7, 4)
                .unwrap();
        println!(
            "tau={tau}: keep {:.5} / {:.5} / {:.5}  flops {:.4}M / {:.4}M / {:.4}M",
            sums[0].mean_keep_ratio,
            sums[1].mean_keep_ratio,
            sums[2].mean_keep_ratio,
            sums[0].mean_flops / 1e6,
            sums[1].mean_flops / 1e6,
            sums[2].mean_flops / 1e6
        );
    }

    // Criterion-7 shape: proceed samples at a high tau.
    let params = PolicyParams::new(0.9999, 0.5, 0.7).unwrap();
    let mut hits = 0;
    let mut proceeds = 0;
    for s in &test_set {
        let (res, detail) =
            pipeline::infer_one_detailed(&s.image, Some(s.label), &guidance, &target, &params)
                .unwrap();
        if !res.exited_early {
            proceeds += 1;
            if detail.selection.unwrap().indices().contains(&s.pattern_cell) {
                hits += 1;
            }
        }
    }
    println!(
        "proceed saliency hit rate at tau=0.9999: {}/{} = {:.4}",
        hits,
        proceeds,
        hits as f64 / proceeds.max(1) as f64
    );
}
