//! Random scene layout: objects standing on a floor in front of a pitched camera.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{make_primitive_model, CadModel, Category, ShapeParams};
use crate::error::{Error, Result};
use crate::geometry::{vertical_rotation, Camera, Pose, Quat, SymmetryTag, Vec3};

const MAX_PLACEMENT_ATTEMPTS: usize = 2000;

/// Per-category scale bounds, applied to the unit-normalized model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl ScaleBounds {
    pub fn uniform(lo: f64, hi: f64) -> ScaleBounds {
        ScaleBounds { min: [lo; 3], max: [hi; 3] }
    }

    /// Per-axis midpoint, used as the test-time scale prior.
    pub fn median(&self) -> Vec3 {
        Vec3::new(0.5 * (self.min[0] + self.max[0]), 0.5 * (self.min[1] + self.max[1]), 0.5 * (self.min[2] + self.max[2]))
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        let mut s = Vec3::zeros();
        for i in 0..3 {
            s[i] = if self.max[i] > self.min[i] { rng.random_range(self.min[i]..self.max[i]) } else { self.min[i] };
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.min[i] > 0.0 && self.max[i] >= self.min[i]) {
                return Err(Error::Config(format!("invalid scale bounds {self:?}")));
            }
        }
        Ok(())
    }
}

pub fn default_scale_bounds(category: Category) -> ScaleBounds {
    match category {
        Category::Cube => ScaleBounds::uniform(0.4, 0.8),
        Category::BoxChair => ScaleBounds::uniform(0.8, 1.05),
        Category::CylinderTable => ScaleBounds::uniform(0.8, 1.2),
        Category::LSofa => ScaleBounds::uniform(1.7, 2.2),
        Category::SlabDisplay => ScaleBounds::uniform(0.55, 0.8),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels (fx = fy).
    pub focal: f64,
    pub camera_height: f64,
    /// Downward camera pitch range, degrees.
    pub pitch_deg: [f64; 2],
    pub object_count: [usize; 2],
    pub categories: Vec<Category>,
    /// Horizontal distance range of object centers from the camera, meters.
    pub distance: [f64; 2],
    /// Fraction of the horizontal field of view objects may be placed in.
    pub lateral_fraction: f64,
    pub scale_bounds: BTreeMap<Category, ScaleBounds>,
    pub models_per_category: usize,
    pub library_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let categories = Category::FURNITURE.to_vec();
        let scale_bounds = Category::ALL.iter().map(|&c| (c, default_scale_bounds(c))).collect();
        SceneConfig {
            width: 128,
            height: 96,
            focal: 110.0,
            camera_height: 1.4,
            pitch_deg: [15.0, 30.0],
            object_count: [1, 3],
            categories,
            distance: [1.8, 4.5],
            lateral_fraction: 0.8,
            scale_bounds,
            models_per_category: 6,
            library_seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn camera(&self) -> Camera {
        Camera::centered(self.focal, self.width, self.height)
    }

    pub fn nominal_pitch(&self) -> f64 {
        (0.5 * (self.pitch_deg[0] + self.pitch_deg[1])).to_radians()
    }

    pub fn scale_bounds_for(&self, c: Category) -> ScaleBounds {
        self.scale_bounds.get(&c).copied().unwrap_or_else(|| default_scale_bounds(c))
    }

    pub fn validate(&self) -> Result<()> {
        self.camera().validate()?;
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.object_count[0] == 0 || self.object_count[0] > self.object_count[1] {
            return bad("object_count must satisfy 1 <= min <= max");
        }
        if self.categories.is_empty() {
            return bad("categories must not be empty");
        }
        if !(self.distance[0] > 0.0 && self.distance[1] >= self.distance[0]) {
            return bad("distance range invalid");
        }
        if self.pitch_deg[0] > self.pitch_deg[1] || self.pitch_deg[1] >= 89.0 {
            return bad("pitch range invalid");
        }
        if !(self.lateral_fraction > 0.0 && self.lateral_fraction <= 1.0) {
            return bad("lateral_fraction must be in (0, 1]");
        }
        if self.models_per_category == 0 {
            return bad("models_per_category must be positive");
        }
        for b in self.scale_bounds.values() {
            b.validate()?;
        }
        Ok(())
    }
}

/// Rotation taking world coordinates (x right, y up, z toward the viewer) into a
/// camera pitched down by `pitch` radians.
pub fn camera_from_world(pitch: f64) -> Quat {
    Quat::from_axis_angle(Vec3::x(), PI + pitch)
}

/// Deterministic set of model variants, indexed by model id.
#[derive(Clone, Debug)]
pub struct ModelLibrary {
    models: Vec<CadModel>,
}

impl ModelLibrary {
    pub fn build(cfg: &SceneConfig) -> Result<ModelLibrary> {
        let mut models = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.library_seed);
        for &category in &Category::ALL {
            for k in 0..cfg.models_per_category {
                let params =
                    if k == 0 { ShapeParams::default_for(category) } else { ShapeParams::random_for(category, &mut rng) };
                let id = models.len() as u32;
                let seed = cfg.library_seed.wrapping_mul(1_000_003).wrapping_add(id as u64);
                let mut m = make_primitive_model(category, params, seed)?;
                m.id = id;
                models.push(m);
            }
        }
        Ok(ModelLibrary { models })
    }

    pub fn from_models(models: Vec<CadModel>) -> ModelLibrary {
        ModelLibrary { models }
    }

    pub fn get(&self, id: u32) -> Option<&CadModel> {
        self.models.get(id as usize)
    }

    pub fn model(&self, id: u32) -> &CadModel {
        &self.models[id as usize]
    }

    pub fn of_category(&self, c: Category) -> impl Iterator<Item = &CadModel> {
        self.models.iter().filter(move |m| m.category == c)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub model_id: u32,
    pub category: Category,
    pub pose: Pose,
    pub symmetry: SymmetryTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub camera: Camera,
    /// Downward camera pitch, radians.
    pub pitch: f64,
    pub objects: Vec<SceneObject>,
}

struct Placed {
    x: f64,
    z: f64,
    radius: f64,
}

/// Samples a deterministic scene: count uniform in the configured range, then
/// per-object category, variant, floor position, heading and scale.
pub fn sample_scene(cfg: &SceneConfig, library: &ModelLibrary, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = cfg.camera();
    let count = rng.random_range(cfg.object_count[0]..=cfg.object_count[1]);
    let pitch = rng.random_range(cfg.pitch_deg[0]..=cfg.pitch_deg[1]).to_radians();
    let q_cw = camera_from_world(pitch);
    let r_cw = q_cw.to_matrix()?;
    let cam_pos = Vec3::new(0.0, cfg.camera_height, 0.0);
    let half_fov = ((cfg.width as f64 / 2.0) / cfg.focal).atan();

    let mut placed: Vec<Placed> = Vec::new();
    let mut objects = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::SceneGeneration(format!(
                "could not place {count} objects after {MAX_PLACEMENT_ATTEMPTS} attempts (seed {seed})"
            )));
        }
        let category = cfg.categories[rng.random_range(0..cfg.categories.len())];
        let variants: Vec<&CadModel> = library.of_category(category).collect();
        if variants.is_empty() {
            return Err(Error::SceneGeneration(format!("no models for category {category}")));
        }
        let model = variants[rng.random_range(0..variants.len())];
        let scale = cfg.scale_bounds_for(category).sample(&mut rng);
        let dist = rng.random_range(cfg.distance[0]..=cfg.distance[1]);
        let lateral = dist * (half_fov * cfg.lateral_fraction).tan();
        let x = rng.random_range(-lateral..=lateral);
        let heading = rng.random_range(0.0..2.0 * PI);

        let extent = model.extent().component_mul(&scale);
        let radius = 0.5 * (extent.x * extent.x + extent.z * extent.z).sqrt();
        let world = Vec3::new(x, 0.5 * extent.y, -dist);
        if placed.iter().any(|p| ((p.x - x).powi(2) + (p.z + dist).powi(2)).sqrt() < p.radius + radius) {
            continue;
        }
        let q = q_cw.mul(&vertical_rotation(heading));
        let t = r_cw * (world - cam_pos);
        let pose = Pose::from_translation(t, q, scale)?;
        // the whole model must be in front of the camera and its center in view
        let rot = pose.rotation();
        let min_z = model.vertices.iter().map(|v| (rot * scale.component_mul(v) + t).z).fold(f64::INFINITY, f64::min);
        if min_z < 0.3 {
            continue;
        }
        let Ok((u, v, _)) = camera.project(&t) else { continue };
        if camera.pixel_at(u, v).is_none() {
            continue;
        }
        placed.push(Placed { x, z: -dist, radius });
        objects.push(SceneObject { model_id: model.id, category, pose, symmetry: model.symmetry });
    }
    Ok(Scene { seed, camera, pitch, objects })
}
