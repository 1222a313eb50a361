//! Trains the desk preset on freshly generated scenes, one checkpoint per epoch.
//!
//! cargo run --release --example train_desk -- --out runs/desk --epochs 40 --scenes 5000

use std::path::PathBuf;

use clap::Parser;
use jointalign::cli::{cmd_train, RunConfig, TrainData};
use jointalign::training::LossMode;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "runs/desk")]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Fresh scenes per epoch.
    #[arg(long, default_value_t = 5000)]
    scenes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    mean_loss: bool,
    #[arg(long)]
    resume: bool,
}

fn main() -> jointalign::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut cfg = RunConfig { seed: args.seed, scenes_per_epoch: args.scenes, ..RunConfig::default() };
    cfg.train.epochs = args.epochs;
    if args.mean_loss {
        cfg.train.loss_mode = LossMode::Mean;
    }
    cfg.validate()?;
    let net = cmd_train(&cfg, TrainData::Stream, &args.out, args.resume, &mut |m| {
        log::info!(
            "epoch {}: L_align {:.3} L_cls {:.4} steps {} skipped {} {:.1} img/s",
            m.epoch,
            m.mean_align,
            m.mean_cls,
            m.steps,
            m.skipped_steps,
            m.images_per_sec
        )
    })?;
    log::info!("{} parameters saved to {}", net.param_count(), args.out.display());
    Ok(())
}
