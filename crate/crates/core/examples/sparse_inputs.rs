//! Builds the network input of one scene at the ground-truth poses, reports
//! image/CAD depth agreement and dumps the batch as raw f32 with a sidecar.
//!
//! cargo run --release --example sparse_inputs -- --seed 3 --out /tmp/batch.f32

use std::path::PathBuf;

use clap::Parser;
use jointalign::sparse_input::{assemble_batch, build_block, dump_batch, gt_depth_agreement, InputConfig, CHANNEL_NAMES};
use jointalign::synthscene::{render_view, sample_scene, JitterConfig, ModelLibrary, NoiseConfig, SceneConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[arg(long, default_value = "batch.f32")]
    out: PathBuf,
}

fn main() -> jointalign::Result<()> {
    let args = Args::parse();
    let cfg = SceneConfig::default();
    let lib = ModelLibrary::build(&cfg)?;
    let scene = sample_scene(&cfg, &lib, args.seed)?;
    let view = render_view(scene, &lib, &NoiseConfig::default(), &JitterConfig::default(), args.seed);
    let input = InputConfig::desk();
    let blocks = view
        .detections
        .iter()
        .map(|d| {
            let o = &view.scene.objects[d.object_id];
            build_block(&view.maps, d, lib.model(o.model_id), &o.pose, &view.scene.camera, &input, args.seed)
        })
        .collect::<jointalign::Result<Vec<_>>>()?;
    println!("{} detections, {} rows each, channels {:?}", blocks.len(), input.rows(), CHANNEL_NAMES);
    let a = gt_depth_agreement(&view.scene, &lib, &view.clean, 1000, 1e-2, args.seed);
    println!("ground-truth depth agreement: {}/{} visible rows ({:.3})", a.agreeing, a.visible, a.fraction());
    if let Some(batch) = assemble_batch(blocks, 3).into_iter().next() {
        dump_batch(&args.out, &batch)?;
        println!("wrote {} ({} active slots)", args.out.display(), batch.active_count);
    }
    Ok(())
}
