//! Scores classifier-region poses around held-out objects with a trained
//! checkpoint: ROC-AUC of σ and its calibration bins.
//!
//! cargo run --release --example classifier_quality -- --checkpoint crates/core/assets/desk.ckpt

use std::path::PathBuf;

use clap::Parser;
use jointalign::align_net::AlignNet;
use jointalign::cli::{calib_report, classifier_scores, RunConfig};
use jointalign::training::SyntheticSource;

#[derive(Parser)]
struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    #[arg(long, default_value_t = 4)]
    per_detection: usize,
    #[arg(long, default_value_t = 515_151)]
    seed: u64,
}

fn main() -> jointalign::Result<()> {
    let args = Args::parse();
    let cfg = RunConfig::default();
    let (net, _) = AlignNet::<f32>::load(&args.checkpoint)?;
    let src = SyntheticSource::new(cfg.scene.clone(), cfg.noise, cfg.eval_jitter, args.seed, args.scenes)?;
    let samples = classifier_scores(&net, &src, &cfg.train, args.per_detection, args.seed)?;
    let r = calib_report(&samples, cfg.eval.calibration_bins);
    println!("{} samples, {} positive, ROC-AUC {:?}", r.samples, r.positives, r.auc);
    for b in &r.calibration.bins {
        println!("  σ {:.3}  accuracy {:.3}  n {}", b.mean_confidence, b.accuracy, b.count);
    }
    println!("spearman {:?}", r.calibration.spearman);
    Ok(())
}
