//! Cross-validated accuracy of the default synthetic setup, with overrides:
//! `cargo run --release --example calibrate -- train.phase1_epochs=10 folds=1`
use std::time::Instant;

use patchloc::config::RunConfig;
use patchloc::metrics::{summarize_folds, Criterion};
use patchloc::runner::{fold_plan, training_ids, untrained_baseline};
use patchloc::synth::generate_samples;
use patchloc::train::{evaluate, train_model};

fn main() -> patchloc::Result<()> {
    let mut cfg = RunConfig::default();
    let mut folds_to_run = usize::MAX;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        if k == "folds" {
            folds_to_run = v.parse().unwrap();
        } else {
            cfg.set(k, v)?;
        }
    }
    let t0 = Instant::now();
    let (samples, _) = generate_samples(&cfg.synth)?;
    println!("generated {} samples in {:?}", samples.len(), t0.elapsed());
    let base = untrained_baseline(&cfg, &samples)?;
    println!("untrained IoU {:?} IoR {:?}", base.mean(Criterion::IoU), base.mean(Criterion::IoR));
    let plan = fold_plan(&cfg, &samples)?;
    let mut tables = Vec::new();
    for f in 0..plan.k.min(folds_to_run) {
        let t = Instant::now();
        let ids = training_ids(&cfg, &samples, &plan.train(f));
        let (model, report) = train_model(&cfg, &samples, &ids, cfg.seed + f as u64, None)?;
        let table = evaluate(&model, &samples, plan.test(f), cfg.eval.t)?;
        for r in &report.log {
            println!("  epoch {} phase {} loss {:.4} {:?}", r.epoch, r.phase, r.loss, r.per_class.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
        }
        println!("  thresholds {:?}", model.thresholds);
        println!(
            "fold {f}: n_train {} IoU {:?} IoR {:?} counts {:?} in {:?}",
            ids.len(),
            table.iou,
            table.ior,
            table.counts,
            t.elapsed()
        );
        tables.push(table);
    }
    let s = summarize_folds(&tables, cfg.backbone.classes, cfg.eval.t);
    println!("mean IoU {:?} IoR {:?} total {:?}", s.mean(Criterion::IoU), s.mean(Criterion::IoR), t0.elapsed());
    Ok(())
}
