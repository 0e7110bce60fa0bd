//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Every reference value is computed here independently of
//! the library code under test.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use rine::data::{load_dataset, synth_toy_dataset, PerturbConfig, PerturbKind};
use rine::head::{self, param_count, HeadConfig, HeadParams, Mode};
use rine::losses::{bce_with_logits, evaluate as loss_evaluate, supcontrast, LossConfig};
use rine::metrics::{average_precision, evaluate, importance_frequency, EvalReport, Perturbation};
use rine::trainer::{encode_training_set, train_encoded, TrainOutcome};
use rine::{toy, Rng, Tensor};

type Outcome = Result<String, String>;

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = f();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------

fn parameter_counts() -> Outcome {
    let cases = [((4, 1024), 10_521_601usize), ((4, 128), 283_009), ((2, 1024), 6_323_201)];
    for ((q, dp), expect) in cases {
        let got = param_count(&HeadConfig::new(24, 1024, dp, q));
        ensure(got == expect, || format!("q={q} d′={dp}: {got} ≠ {expect}"))?;
    }
    Ok("10,521,601 / 283,009 / 6,323,201 exact".into())
}

/// `L = CE(logits) + ξ·SupCon(features)` through the head in train mode with
/// a fixed dropout draw.
fn combined_loss(k: &Tensor<f64>, p: &HeadParams<f64>, cfg: &HeadConfig, labels: &[u8], loss: &LossConfig) -> f64 {
    let out = head::forward(k, p, cfg, Mode::Train, Some(&mut Rng::new(99))).unwrap();
    loss_evaluate(loss, &out.logits, &out.features, labels).unwrap().losses.total
}

fn gradient_check() -> Outcome {
    let cfg = HeadConfig::new(4, 16, 8, 2);
    let loss = LossConfig {
        xi: 0.2,
        ..LossConfig::default()
    };
    let mut r = Rng::new(2024);
    let mut p = HeadParams::<f64>::init(&cfg, &mut Rng::new(1)).map_err(e2s)?;
    // perturb biases and importance away from their special initial values
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += (r.random::<f64>() - 0.5) * 0.2;
        }
    }
    let k = Tensor::from_fn(&[6, 4, 16], |_| r.random::<f64>() * 2.0 - 1.0);
    let labels = [0u8, 1, 1, 0, 1, 0];

    let out = head::forward(&k, &p, &cfg, Mode::Train, Some(&mut Rng::new(99))).map_err(e2s)?;
    let l = loss_evaluate(&loss, &out.logits, &out.features, &labels).map_err(e2s)?;
    let grads = head::backward(&out.trace, &p, &l.grad_logits, l.grad_features.as_ref()).map_err(e2s)?;
    let analytic: Vec<(String, Vec<f64>)> = grads.named().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();

    let h = 1e-5;
    let floor = 1e-6;
    let (mut worst, mut worst_at, mut checked) = (0.0f64, String::new(), 0usize);
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let mut plus = p.clone();
            plus.tensors_mut()[ti].data_mut()[j] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[ti].data_mut()[j] -= h;
            let fd = (combined_loss(&k, &plus, &cfg, &labels, &loss) - combined_loss(&k, &minus, &cfg, &labels, &loss))
                / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{j}] analytic {a:.3e} fd {fd:.3e}");
            }
            checked += 1;
        }
    }
    ensure(checked == param_count(&cfg), || format!("checked {checked} scalars"))?;
    ensure(worst <= 1e-5, || format!("max rel err {worst:.2e} at {worst_at}"))?;
    Ok(format!("{checked} scalars, max rel err {worst:.2e}"))
}

fn tie_collapse() -> Outcome {
    let vit = toy::vit_config();
    let mut cfg = HeadConfig::new(vit.n, vit.d, 64, 2);
    cfg.dropout_rate = 0.0;
    let mut p = HeadParams::<f32>::init(&cfg, &mut Rng::new(5)).map_err(e2s)?;
    let mut r = Rng::new(6);
    let k = Tensor::from_fn(&[8, vit.n, vit.d], |_| r.random::<f32>() * 2.0 - 1.0);
    let mut worst = 0.0f32;
    for chosen in 0..vit.n {
        p.importance = Tensor::from_fn(&[vit.n, 64], |i| if i / 64 == chosen { 40.0 } else { 0.0 });
        let full = head::forward(&k, &p, &cfg, Mode::Eval, None).map_err(e2s)?;
        let single_cfg = HeadConfig { n: 1, ..cfg.clone() };
        let mut single = p.clone();
        single.importance = Tensor::zeros(&[1, 64]);
        let k1 = Tensor::from_fn(&[8, 1, vit.d], |i| k.data()[((i / vit.d) * vit.n + chosen) * vit.d + i % vit.d]);
        let one = head::forward(&k1, &single, &single_cfg, Mode::Eval, None).map_err(e2s)?;
        worst = worst.max(full.logits.max_abs_diff(&one.logits).map_err(e2s)?);
    }
    ensure(worst <= 1e-5, || format!("max |Δlogit| {worst:.2e}"))?;
    Ok(format!("all {} blocks, max |Δlogit| {worst:.2e}", vit.n))
}

/// Direct enumeration of every (anchor, positive, candidate) term.
fn supcon_oracle(f: &Tensor<f64>, labels: &[u8], tau: f64) -> f64 {
    let b = f.shape()[0];
    let d = f.shape()[1];
    let z: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            let row = &f.data()[i * d..(i + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / n).collect()
        })
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let (mut total, mut anchors) = (0.0, 0usize);
    for i in 0..b {
        let mut term = 0.0;
        let mut positives = 0usize;
        for p in 0..b {
            if p == i || labels[p] != labels[i] {
                continue;
            }
            let mut denom = 0.0;
            for a in 0..b {
                if a != i {
                    denom += (dot(&z[i], &z[a]) / tau).exp();
                }
            }
            term += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
            positives += 1;
        }
        if positives > 0 {
            total += -term / positives as f64;
            anchors += 1;
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

fn loss_oracles() -> Outcome {
    let mut r = Rng::new(77);
    let mut worst = 0.0f64;
    let mut batches = 0;
    for b in 4..=8 {
        for _ in 0..20 {
            let f = Tensor::from_fn(&[b, 5], |_| r.random::<f64>() * 2.0 - 1.0);
            let labels: Vec<u8> = (0..b).map(|_| r.random_range(0..2)).collect();
            let (got, _) = supcontrast(&f, &labels, 0.1, true).map_err(e2s)?;
            worst = worst.max((got - supcon_oracle(&f, &labels, 0.1)).abs());
            batches += 1;
        }
    }
    ensure(worst <= 1e-6, || format!("supcon max |Δ| {worst:.2e}"))?;

    let z = Tensor::<f64>::new(vec![5], vec![1.0, -2.0, 0.0, 30.0, -7.5]).map_err(e2s)?;
    let y = [1u8, 0, 1, 0, 0];
    let (bce, _) = bce_with_logits(&z, &y).map_err(e2s)?;
    let closed: f64 = z
        .data()
        .iter()
        .zip(y)
        .map(|(&zi, yi): (&f64, u8)| {
            // 1 − σ(z) evaluated as σ(−z) so the log keeps full precision
            let (s, not_s) = (1.0 / (1.0 + (-zi).exp()), 1.0 / (1.0 + zi.exp()));
            -(f64::from(yi) * s.ln() + (1.0 - f64::from(yi)) * not_s.ln())
        })
        .sum::<f64>()
        / 5.0;
    ensure((bce - closed).abs() <= 1e-9, || format!("bce {bce} vs closed form {closed}"))?;

    let feats = Tensor::from_fn(&[5, 3], |_| r.random::<f64>());
    let zero = LossConfig {
        xi: 0.0,
        ..LossConfig::default()
    };
    let out = loss_evaluate(&zero, &z, &feats, &y).map_err(e2s)?;
    let (ce, grad) = bce_with_logits(&z, &y).map_err(e2s)?;
    ensure(
        out.losses.total.to_bits() == ce.to_bits() && out.grad_logits == grad && out.grad_features.is_none(),
        || "ξ=0 combined differs from CE".into(),
    )?;
    Ok(format!("{batches} supcon batches max |Δ| {worst:.1e}; bce closed form; ξ=0 bit-exact"))
}

/// Sweeps every distinct score as a threshold, highest first.
fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut prev_tp, mut sum) = (0usize, 0.0);
    for t in thresholds {
        let predicted = scores.iter().filter(|&&s| s >= t).count();
        let tp = scores.iter().zip(labels).filter(|(&s, &y)| s >= t && y == 1).count();
        if tp > prev_tp {
            sum += (tp - prev_tp) as f64 * (tp as f64 / predicted as f64);
        }
        prev_tp = tp;
    }
    sum / positives as f64
}

fn argmax_oracle(a: &Tensor<f32>) -> Vec<f64> {
    let (n, dp) = (a.shape()[0], a.shape()[1]);
    let mut counts = vec![0usize; n];
    for k in 0..dp {
        let column: Vec<f32> = (0..n).map(|l| a.data()[l * dp + k]).collect();
        let max = column.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let first = column.iter().position(|&v| v == max).unwrap();
        counts[first] += 1;
    }
    counts.iter().map(|&c| c as f64 / dp as f64).collect()
}

fn metric_oracles() -> Outcome {
    let mut r = Rng::new(8);
    let mut checked = 0;
    for size in 2..=8usize {
        for pattern in 0u32..(1 << size) {
            let labels: Vec<u8> = (0..size).map(|i| ((pattern >> i) & 1) as u8).collect();
            let scores: Vec<f64> = (0..size).map(|_| r.random()).collect();
            let single_class = labels.iter().all(|&y| y == labels[0]);
            match average_precision(&scores, &labels) {
                Err(_) if single_class => {}
                Ok(ap) if !single_class => {
                    let oracle = ap_oracle(&scores, &labels);
                    ensure(ap.to_bits() == oracle.to_bits(), || {
                        format!("labels {labels:?} scores {scores:?}: {ap} vs {oracle}")
                    })?;
                    checked += 1;
                }
                other => return Err(format!("labels {labels:?}: unexpected {other:?}")),
            }
        }
    }
    let mut imp_checked = 0;
    for seed in 0..5 {
        let mut r = Rng::new(100 + seed);
        let a = Tensor::from_fn(&[24, 1024], |_| r.random::<f32>() - 0.5);
        let f = importance_frequency(&a).map_err(e2s)?;
        ensure(f == argmax_oracle(&a), || "importance frequency differs from scan oracle".into())?;
        imp_checked += 1;
    }
    let ties = importance_frequency(&Tensor::<f32>::zeros(&[24, 1024])).map_err(e2s)?;
    ensure(ties[0] == 1.0 && ties[1..].iter().all(|&v| v == 0.0), || "tie rule".into())?;
    Ok(format!("{checked} AP cases exact; {imp_checked} random 24×1024 importance matrices exact"))
}

fn residual_property() -> Outcome {
    let mut bb = toy::backbone(3).map_err(e2s)?;
    for block in &mut bb.weights.blocks {
        for lin in [&mut block.out, &mut block.fc2] {
            lin.weight = Tensor::zeros(lin.weight.shape());
            if let Some(b) = &mut lin.bias {
                *b = Tensor::zeros(b.shape());
            }
        }
    }
    let mut r = Rng::new(4);
    let side = bb.config.image_side;
    let images = Tensor::from_fn(&[3, 3, side, side], |_| r.random::<f32>());
    let k = bb.encode_pixels(&images).map_err(e2s)?;
    // the CLS row after embedding is cls_token + positional[0]
    let d = bb.config.d;
    let embedded: Vec<f32> = (0..d)
        .map(|c| bb.weights.cls_token.data()[c] + bb.weights.positional.data()[c])
        .collect();
    ensure(bb.weights.pre_ln.is_none(), || "toy backbone unexpectedly has a pre-LN".into())?;
    for b in 0..3 {
        for l in 0..bb.config.n {
            let row = &k.values.data()[(b * bb.config.n + l) * d..(b * bb.config.n + l + 1) * d];
            ensure(row == embedded.as_slice(), || format!("image {b} block {}", l + 1))?;
        }
    }
    Ok(format!("all {} rows equal the embedded CLS token bit-exactly", bb.config.n))
}

// ---------------------------------------------------------------------------
// Toy end-to-end runs

struct ToyRun {
    outcome: TrainOutcome,
    report: EvalReport,
    test_dir: PathBuf,
    seconds: f64,
}

fn toy_run(root: &Path, amplitude: f64) -> Result<ToyRun, String> {
    let start = Instant::now();
    let (train_dir, test_dir) = (root.join("train"), root.join("test"));
    synth_toy_dataset(&train_dir, toy::TRAIN_PER_CLASS, toy::SIDE, amplitude, 1).map_err(e2s)?;
    synth_toy_dataset(&test_dir, toy::TEST_PER_CLASS, toy::SIDE, amplitude, 2).map_err(e2s)?;
    let backbone = toy::backbone(7).map_err(e2s)?;
    let frozen = backbone.to_container().to_bytes().map_err(e2s)?;
    let encoded = encode_training_set(&load_dataset(&train_dir).map_err(e2s)?, &backbone).map_err(e2s)?;
    let outcome = train_encoded(&encoded, &toy::train_config(11)).map_err(e2s)?;
    let report = evaluate(
        &outcome.params,
        &outcome.head,
        &backbone,
        &[("toy".to_string(), test_dir.clone())],
        None,
    );
    ensure(backbone.to_container().to_bytes().map_err(e2s)? == frozen, || {
        "backbone changed during training".into()
    })?;
    Ok(ToyRun {
        outcome,
        report,
        test_dir,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn toy_end_to_end(run: &Result<ToyRun, String>, control: &Result<ToyRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let control = control.as_ref().map_err(Clone::clone)?;
    let (acc, ap) = (run.report.avg_acc.unwrap_or(0.0), run.report.avg_ap.unwrap_or(0.0));
    let control_ap = control.report.avg_ap.unwrap_or(1.0);
    let detail = format!(
        "ACC {acc:.4} AP {ap:.4}; amplitude-0 AP {control_ap:.4}; {:.0}s + {:.0}s",
        run.seconds, control.seconds
    );
    ensure(acc >= 0.90 && ap >= 0.95, || format!("below target: {detail}"))?;
    ensure(control_ap <= 0.55, || format!("control separable: {detail}"))?;
    ensure(run.seconds < 600.0, || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn determinism(run: &Result<ToyRun, String>, again: &Result<ToyRun, String>) -> Outcome {
    let (a, b) = (run.as_ref().map_err(Clone::clone)?, again.as_ref().map_err(Clone::clone)?);
    let (ha, hb) = (a.outcome.history.to_csv().map_err(e2s)?, b.outcome.history.to_csv().map_err(e2s)?);
    let (ra, rb) = (a.report.to_json().map_err(e2s)?, b.report.to_json().map_err(e2s)?);
    ensure(ha == hb, || "history CSV differs".into())?;
    ensure(ra == rb, || "EvalReport JSON differs".into())?;
    Ok(format!("{} history rows and report JSON byte-identical", a.outcome.history.steps.len()))
}

fn robustness(run: &Result<ToyRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let backbone = toy::backbone(7).map_err(e2s)?;
    let clean = run.report.avg_acc.ok_or("no clean accuracy")?;
    let dirs = [("toy".to_string(), run.test_dir.clone())];
    let acc_with = |kind: PerturbKind, config: &PerturbConfig, seed: u64| -> Result<f64, String> {
        let p = Perturbation {
            kind,
            config: config.clone(),
            seed,
        };
        let report = evaluate(&run.outcome.params, &run.outcome.head, &backbone, &dirs, Some(&p));
        report.avg_acc.ok_or_else(|| format!("{kind} evaluation failed: {:?}", report.failures))
    };
    let seeds = 0..5u64;
    let default = PerturbConfig::default();
    let mut drops = Vec::new();
    for kind in PerturbKind::ALL {
        let mean = seeds
            .clone()
            .map(|s| acc_with(kind, &default, s).map(|a| clean - a))
            .collect::<Result<Vec<f64>, String>>()?
            .iter()
            .sum::<f64>()
            / 5.0;
        drops.push((kind, mean));
    }
    let max_noise = PerturbConfig {
        noise_sigma: (0.05, 0.05),
        ..PerturbConfig::default()
    };
    let noise_drop = clean - acc_with(PerturbKind::Noise, &max_noise, 0)?;
    let summary = drops
        .iter()
        .map(|(k, d)| format!("{k} {d:+.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    let combined = drops.iter().find(|(k, _)| *k == PerturbKind::Combined).unwrap().1;
    let worst_single = drops
        .iter()
        .filter(|(k, _)| *k != PerturbKind::Combined)
        .map(|(_, d)| *d)
        .fold(f64::NEG_INFINITY, f64::max);
    ensure(noise_drop.is_finite() && noise_drop >= -0.01, || {
        format!("noise σ=0.05 drop {noise_drop}")
    })?;
    ensure(combined >= worst_single, || format!("combined below a single kind: {summary}"))?;
    Ok(format!("mean ACC drop over 5 seeds: {summary}; noise σ=0.05 {noise_drop:+.3}"))
}

fn main() {
    let mut suite = Suite { failures: 0 };
    suite.run("parameter counts", parameter_counts);
    suite.run("gradient check", gradient_check);
    suite.run("importance collapse", tie_collapse);
    suite.run("loss oracles", loss_oracles);
    suite.run("metric oracles", metric_oracles);
    suite.run("residual property", residual_property);

    let scratch = tempfile::tempdir().expect("temporary directory");
    let run = toy_run(&scratch.path().join("a"), toy::AMPLITUDE);
    let control = toy_run(&scratch.path().join("control"), 0.0);
    suite.run("toy end-to-end", || toy_end_to_end(&run, &control));
    suite.run("determinism", || determinism(&run, &toy_run(&scratch.path().join("b"), toy::AMPLITUDE)));
    suite.run("robustness harness", || robustness(&run));

    println!("acceptance: {} of 9 criteria failed", suite.failures);
    if suite.failures > 0 {
        std::process::exit(1);
    }
}
