//! Counts network forward passes per scene and times them: four rotation
//! initializations times (updates + scoring pass) times ceil(detections / N_mul).
//!
//! cargo run --release --example forward_bench -- --detections 5

use clap::Parser;
use jointalign::align_net::{AlignNet, NetConfig};
use jointalign::refine::{refine_scene, CategoryPrior, RefineConfig, SceneInput};
use jointalign::synthscene::{render_view, sample_scene, CadModel, JitterConfig, ModelLibrary, NoiseConfig, SceneConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 5)]
    detections: usize,
    #[arg(long, default_value_t = 5)]
    n_mul: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

fn main() -> jointalign::Result<()> {
    let args = Args::parse();
    let scene_cfg = SceneConfig { object_count: [args.detections, args.detections], ..SceneConfig::default() };
    let lib = ModelLibrary::build(&scene_cfg)?;
    let net = AlignNet::<f32>::new(NetConfig { n_mul: args.n_mul, ..NetConfig::desk() }, 1)?;
    let cfg = RefineConfig::default();
    for seed in 0..args.repeats as u64 {
        let view = render_view(sample_scene(&scene_cfg, &lib, seed)?, &lib, &NoiseConfig::mild(), &JitterConfig::default(), seed);
        let models: Vec<&CadModel> =
            view.detections.iter().map(|d| lib.model(view.scene.objects[d.object_id].model_id)).collect();
        let priors: Vec<CategoryPrior> = view
            .detections
            .iter()
            .zip(&models)
            .map(|(d, m)| CategoryPrior::from_config(&scene_cfg, d.category, m, &cfg))
            .collect();
        let input = SceneInput {
            scene: seed,
            camera: view.scene.camera,
            maps: &view.maps,
            detections: &view.detections,
            models: &models,
            priors: &priors,
        };
        let start = std::time::Instant::now();
        let before = net.forward_count();
        let (_, trace) = refine_scene(&net, &input, &cfg, seed)?;
        let secs = start.elapsed().as_secs_f64();
        println!(
            "scene {seed}: {} detections, {} forward passes ({} counted by the network), {:.2} ms per pass",
            view.detections.len(),
            trace.forward_passes,
            net.forward_count() - before,
            1e3 * secs / trace.forward_passes.max(1) as f64
        );
    }
    Ok(())
}
