//! Subcommand implementations: thin wrappers over the library.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rine::data::{load_dataset, synth_toy_dataset, PerturbKind};
use rine::head::{load_head, param_count as head_param_count, save_head, HeadConfig};
use rine::metrics::{evaluate, importance_frequency, write_importance_csv, EvalReport, Perturbation};
use rine::pipeline::{features, ENCODE_CHUNK};
use rine::trainer::{encode_training_set, grid_search, validate, Checkpoint, Grid, Trainer};
use rine::{toy, Backbone};
use serde_json::{json, Value};

use crate::settings::Settings;
use crate::Status;

fn status(clean: bool) -> Status {
    if clean {
        Status::Clean
    } else {
        Status::Incomplete
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Records the command, its inputs and the fully resolved settings.
fn write_resolved(out: &Path, command: &str, inputs: Value, settings: Option<&Settings>) -> Result<()> {
    let doc = json!({ "command": command, "inputs": inputs, "settings": settings });
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

fn load_backbone(path: &Path) -> Result<Backbone> {
    Backbone::load(path).with_context(|| format!("loading backbone {}", path.display()))
}

fn load_head_file(path: &Path) -> Result<(HeadConfig, rine::HeadParams)> {
    load_head(path).with_context(|| format!("loading head {}", path.display()))
}

pub fn train(
    data: &Path,
    val: Option<&Path>,
    backbone: &Path,
    out: &Path,
    resume: Option<&Path>,
    checkpoint_every: Option<u64>,
    settings: &Settings,
) -> Result<Status> {
    create_dir(out)?;
    let inputs = json!({ "data": data, "val": val, "backbone": backbone, "resume": resume });
    write_resolved(out, "train", inputs, Some(settings))?;
    let backbone = load_backbone(backbone)?;
    let config = settings.train_config(backbone.config.n, backbone.config.d);
    let dataset = load_dataset(data)?;

    let encoded = match config.augment {
        None => Some(encode_training_set(&dataset, &backbone)?),
        Some(_) => None,
    };
    let mut skipped = encoded.as_ref().map_or(0, |e| e.skipped);
    let mut trainer = match &encoded {
        Some(e) => Trainer::from_encoded(config, e)?,
        None => Trainer::from_images(config, &dataset, &backbone)?,
    };
    if let Some(path) = resume {
        let checkpoint = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        trainer.restore(checkpoint)?;
        log::info!("resuming at step {}/{}", trainer.step(), trainer.total_steps());
    }
    let checkpoint_path = out.join("checkpoint.rwt");
    let every = checkpoint_every.unwrap_or(u64::MAX).max(1);
    while !trainer.is_done() {
        trainer.run_until(trainer.step().saturating_add(every))?;
        trainer.checkpoint().save(&checkpoint_path)?;
    }
    trainer.checkpoint().save(&checkpoint_path)?;
    let outcome = trainer.finish();
    save_head(&outcome.params, &outcome.head, out.join("head.rwt"))?;
    outcome.history.write_csv(out.join("history.csv"))?;

    if let Some(val) = val {
        let val_set = encode_training_set(&load_dataset(val)?, &backbone)?;
        skipped += val_set.skipped;
        let (acc, ap) = validate(&outcome.params, &outcome.head, &val_set)?;
        let doc = json!({ "n": val_set.len(), "acc": acc, "ap": ap, "skipped": val_set.skipped });
        fs::write(out.join("validation.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
        println!("validation: acc {acc:.4} ap {ap:.4} (n={})", val_set.len());
    }
    println!("trained {} steps; outputs in {}", outcome.history.steps.len(), out.display());
    Ok(status(skipped == 0))
}

pub fn grid(
    data: &Path,
    val: &Path,
    backbone: &Path,
    out: &Path,
    grid: Option<&Path>,
    settings: &Settings,
) -> Result<Status> {
    create_dir(out)?;
    let grid = match grid {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)
            .with_context(|| format!("parsing grid {}", path.display()))?,
        None => Grid::published(),
    };
    let inputs = json!({ "data": data, "val": val, "backbone": backbone, "grid": grid });
    write_resolved(out, "grid", inputs, Some(settings))?;
    let backbone = load_backbone(backbone)?;
    let base = settings.train_config(backbone.config.n, backbone.config.d);
    let val_set = encode_training_set(&load_dataset(val)?, &backbone)?;
    let results = grid_search(&load_dataset(data)?, &val_set, &backbone, &base, &grid)?;

    let mut w = csv::Writer::from_path(out.join("grid.csv"))?;
    w.write_record(["rank", "xi", "q", "d_prime", "acc", "ap", "error"])?;
    for (rank, r) in results.iter().enumerate() {
        let num = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            (rank + 1).to_string(),
            r.xi.to_string(),
            r.q.to_string(),
            r.d_prime.to_string(),
            num(r.acc),
            num(r.ap),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    fs::write(out.join("grid.json"), serde_json::to_string_pretty(&results)? + "\n")?;
    if let Some(best) = results.first().filter(|r| r.error.is_none()) {
        println!("best: xi={} q={} d_prime={}", best.xi, best.q, best.d_prime);
    }
    Ok(status(val_set.skipped == 0 && results.iter().all(|r| r.error.is_none())))
}

fn dataset_names(dirs: &[PathBuf]) -> Vec<(String, PathBuf)> {
    dirs.iter()
        .map(|d| {
            let name = d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
            (name, d.clone())
        })
        .collect()
}

fn print_report(title: &str, report: &EvalReport) {
    println!("{title}");
    for d in &report.datasets {
        println!("  {:<24} n={:<6} acc {:.4} ap {:.4}", d.name, d.n, d.acc, d.ap);
    }
    for f in &report.failures {
        println!("  {:<24} FAILED: {}", f.name, f.error);
    }
    if let (Some(acc), Some(ap)) = (report.avg_acc, report.avg_ap) {
        println!("  {:<24}          acc {acc:.4} ap {ap:.4}", "AVG");
    }
}

/// Clean evaluation, or one perturbed evaluation per requested kind.
pub fn eval(
    head: &Path,
    backbone: &Path,
    dirs: &[PathBuf],
    out: &Path,
    kind: Option<&str>,
    settings: &Settings,
) -> Result<Status> {
    let kinds = match kind {
        None => vec![],
        Some("all") => PerturbKind::ALL.to_vec(),
        Some(k) => vec![k.parse::<PerturbKind>()?],
    };
    create_dir(out)?;
    let command = if kind.is_some() { "perturb-eval" } else { "eval" };
    let inputs = json!({ "head": head, "backbone": backbone, "data_dirs": dirs, "kind": kind });
    write_resolved(out, command, inputs, Some(settings))?;
    let (config, params) = load_head_file(head)?;
    let backbone = load_backbone(backbone)?;
    let names = dataset_names(dirs);

    if kinds.is_empty() {
        let report = evaluate(&params, &config, &backbone, &names, None);
        report.write(out, "report")?;
        print_report("clean", &report);
        return Ok(status(report.is_clean()));
    }
    let mut clean = true;
    for kind in kinds {
        let perturbation = Perturbation {
            kind,
            config: settings.perturb_config(),
            seed: settings.seed,
        };
        let report = evaluate(&params, &config, &backbone, &names, Some(&perturbation));
        report.write(out, &format!("perturb_{kind}"))?;
        print_report(&kind.to_string(), &report);
        clean &= report.is_clean();
    }
    Ok(status(clean))
}

pub fn analyze_importance(head: &Path, out: &Path) -> Result<Status> {
    let (config, params) = load_head_file(head)?;
    if !config.use_tie {
        bail!("head {} fuses blocks uniformly; it has no learned importance", head.display());
    }
    create_dir(out)?;
    write_resolved(out, "analyze-importance", json!({ "head": head }), None)?;
    let freq = importance_frequency(&params.importance)?;
    write_importance_csv(&freq, out.join("importance.csv"))?;
    println!("block,frequency");
    for (l, f) in freq.iter().enumerate() {
        println!("{},{f}", l + 1);
    }
    Ok(Status::Clean)
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn param_count(table: bool, n: usize, d: usize, settings: &Settings) -> Result<Status> {
    let configs = if table {
        vec![(4, 1024), (4, 128), (2, 1024)]
            .into_iter()
            .map(|(q, dp)| HeadConfig::new(24, 1024, dp, q))
            .collect()
    } else {
        let mut head = settings.head(n, d);
        head.last_block_only = settings.last_block_only;
        head.validate()?;
        vec![head]
    };
    for c in configs {
        println!(
            "n={} d={} q={} d_prime={}{}: {}",
            c.n,
            c.d,
            c.q,
            c.d_prime,
            if c.last_block_only { " last-block-only" } else { "" },
            thousands(head_param_count(&c))
        );
    }
    Ok(Status::Clean)
}

pub fn export_features(head: &Path, backbone: &Path, data: &Path, out: &Path) -> Result<Status> {
    create_dir(out)?;
    let inputs = json!({ "head": head, "backbone": backbone, "data": data });
    write_resolved(out, "export-features", inputs, None)?;
    let (config, params) = load_head_file(head)?;
    let backbone = load_backbone(backbone)?;
    let encoded = encode_training_set(&load_dataset(data)?, &backbone)?;

    let mut w = csv::Writer::from_path(out.join("features.csv"))?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..config.d_prime).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for start in (0..encoded.len()).step_by(ENCODE_CHUNK) {
        let idx: Vec<usize> = (start..(start + ENCODE_CHUNK).min(encoded.len())).collect();
        let (k, labels) = encoded.select(&idx)?;
        let f = features(&params, &config, &k)?;
        for (row, &i) in idx.iter().enumerate() {
            let mut record = vec![encoded.ids[i].clone(), labels[row].to_string()];
            let values = &f.data()[row * config.d_prime..(row + 1) * config.d_prime];
            record.extend(values.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    println!("wrote {} feature rows to {}", encoded.len(), out.join("features.csv").display());
    Ok(status(encoded.skipped == 0))
}

pub fn synth_toy(out: &Path, n_per_class: usize, side: usize, amplitude: f64, seed: u64) -> Result<Status> {
    synth_toy_dataset(out, n_per_class, side, amplitude, seed)?;
    println!("wrote {} images per class to {}", n_per_class, out.display());
    Ok(Status::Clean)
}

pub fn toy_backbone(out: &Path, seed: u64) -> Result<Status> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    toy::backbone(seed)?.save(out)?;
    let c = toy::vit_config();
    println!("wrote toy backbone (n={} d={} side={}) to {}", c.n, c.d, c.image_side, out.display());
    Ok(Status::Clean)
}
