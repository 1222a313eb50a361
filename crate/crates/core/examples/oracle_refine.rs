//! Runs the refinement controller with a ground-truth oracle in place of the
//! network: every object reaches its ground truth after one update.
//!
//! cargo run --release --example oracle_refine -- --scenes 20

use clap::Parser;
use jointalign::cli::{refine_view, PredictorChoice, RunConfig};
use jointalign::geometry::pose_errors;
use jointalign::training::{SyntheticSource, ViewSource};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 11)]
    seed: u64,
}

fn main() -> jointalign::Result<()> {
    let args = Args::parse();
    let cfg = RunConfig::default();
    let src = SyntheticSource::new(cfg.scene.clone(), cfg.noise, cfg.eval_jitter, args.seed, args.scenes)?;
    let oracle = PredictorChoice::Oracle { n_mul: cfg.net.n_mul };
    let (mut worst_t, mut worst_r, mut worst_s, mut objects, mut passes) = (0.0f64, 0.0f64, 0.0f64, 0, 0);
    for i in 0..src.len() {
        let r = refine_view(&oracle, &src, i, &cfg.refine, args.seed)?;
        passes += r.trace.forward_passes;
        for d in &r.trace.detections {
            let o = &r.view.scene.objects[r.view.detections[d.detection].object_id];
            for t in &d.tracks {
                let e = pose_errors(&t.poses[1], &o.pose, o.symmetry);
                worst_t = worst_t.max(e.translation);
                worst_r = worst_r.max(e.rotation_deg);
                worst_s = worst_s.max(e.scale);
            }
            objects += 1;
        }
    }
    println!("{objects} objects in {} scenes, {passes} forward passes", src.len());
    println!("worst error after one update: {worst_t:.2e} m, {worst_r:.2e}°, scale {worst_s:.2e}");
    Ok(())
}
