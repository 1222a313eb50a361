//! Samples a synthetic scene, renders its channels and detections, and writes
//! the channel blob, a depth PGM and the scene JSON.
//!
//! cargo run --release --example render_scene -- --seed 7 --out /tmp/scene7

use std::io::Write;
use std::path::PathBuf;

use clap::Parser;
use jointalign::synthscene::io::{write_channels, write_scene};
use jointalign::synthscene::{render_view, sample_scene, JitterConfig, ModelLibrary, NoiseConfig, SceneConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "scene_out")]
    out: PathBuf,
}

fn main() -> jointalign::Result<()> {
    let args = Args::parse();
    let cfg = SceneConfig::default();
    let lib = ModelLibrary::build(&cfg)?;
    let scene = sample_scene(&cfg, &lib, args.seed)?;
    let view = render_view(scene, &lib, &NoiseConfig::mild(), &JitterConfig::default(), args.seed);
    println!("pitch {:.1}°, {} objects", view.scene.pitch.to_degrees(), view.scene.objects.len());
    for (i, o) in view.scene.objects.iter().enumerate() {
        let t = o.pose.translation();
        println!(
            "  {i}: {} model {} at ({:.2}, {:.2}, {:.2}) scale {:?}",
            o.category.name(),
            o.model_id,
            t.x,
            t.y,
            t.z,
            o.pose.s.as_slice()
        );
    }
    for d in &view.detections {
        println!(
            "  detection of {} ({}): box [{:.1}, {:.1}, {:.1}, {:.1}] visible {:.2}",
            d.object_id,
            d.category.name(),
            d.bbox.x0,
            d.bbox.y0,
            d.bbox.x1,
            d.bbox.y1,
            d.gt_visible_fraction
        );
    }
    std::fs::create_dir_all(&args.out)?;
    write_scene(&args.out.join("scene.json"), &view.scene)?;
    write_channels(&args.out.join("channels.bin"), &view.maps)?;
    let far = view.maps.depth.iter().copied().fold(0.0f32, f32::max).max(1e-6);
    let mut pgm = std::fs::File::create(args.out.join("depth.pgm"))?;
    write!(pgm, "P5\n{} {}\n255\n", view.maps.width, view.maps.height)?;
    pgm.write_all(
        &view.maps.depth.iter().map(|&d| if d > 0.0 { (255.0 * (1.0 - d / far)) as u8 } else { 0 }).collect::<Vec<_>>(),
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}
