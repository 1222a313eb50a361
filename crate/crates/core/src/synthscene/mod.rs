//! Procedural scenes and the channels a perception stack would otherwise predict.

mod detect;
pub mod io;
mod model;
mod noise;
mod raster;
mod scene;
mod visibility;

pub use detect::{detect_objects, BBox, Detection, JitterConfig};
pub use model::{make_primitive_model, sample_mesh, CadModel, Category, ShapeParams, SurfacePoint, CANONICAL_SAMPLES};
pub use noise::{perturb_channels, NoiseConfig};
pub use raster::{albedo, rasterize, rasterize_objects, ChannelMaps};
pub use scene::{
    camera_from_world, default_scale_bounds, sample_scene, ModelLibrary, ScaleBounds, Scene, SceneConfig, SceneObject,
};
pub use visibility::{point_visible, ray_hit};

/// One rendered view with its (possibly degraded) channels and detections.
#[derive(Clone, Debug)]
pub struct View {
    pub scene: Scene,
    pub clean: ChannelMaps,
    pub maps: ChannelMaps,
    pub detections: Vec<Detection>,
}

/// Renders a scene, degrades its channels and runs the simulated detector.
/// Sub-seeds are derived from `seed` so every stage is reproducible.
pub fn render_view(scene: Scene, library: &ModelLibrary, noise: &NoiseConfig, jitter: &JitterConfig, seed: u64) -> View {
    let clean = rasterize(&scene, library);
    let maps = perturb_channels(&clean, noise, seed ^ 0x5eed_0001);
    let detections = detect_objects(&scene, library, &clean, jitter, seed ^ 0x5eed_0002);
    View { scene, clean, maps, detections }
}

/// Mixes a base seed with a stream tag (splitmix64 finalizer) so nearby
/// indices give unrelated sub-seeds.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
