use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Category;
use super::raster::{rasterize_objects, ChannelMaps};
use super::scene::{ModelLibrary, Scene};
use crate::geometry::Camera;

/// Axis-aligned pixel rectangle in continuous image coordinates, `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        (self.x1 - self.x0).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// Moves every side outwards by `fraction` of the box size.
    pub fn extended(&self, fraction: f64) -> BBox {
        let (dx, dy) = (fraction * self.width(), fraction * self.height());
        BBox { x0: self.x0 - dx, y0: self.y0 - dy, x1: self.x1 + dx, y1: self.y1 + dy }
    }

    pub fn clipped(&self, camera: &Camera) -> BBox {
        BBox {
            x0: self.x0.clamp(0.0, camera.width as f64),
            y0: self.y0.clamp(0.0, camera.height as f64),
            x1: self.x1.clamp(0.0, camera.width as f64),
            y1: self.y1.clamp(0.0, camera.height as f64),
        }
    }

    pub fn intersects_image(&self, camera: &Camera) -> bool {
        self.clipped(camera).area() > 0.0
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let ix = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0.0);
        let iy = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Tight bounds of all pixels carrying `id`, if any.
    pub fn of_instance(maps: &ChannelMaps, id: i32) -> Option<BBox> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for row in 0..maps.height {
            for col in 0..maps.width {
                if maps.instance[row * maps.width + col] == id {
                    b = Some(match b {
                        None => (col, row, col, row),
                        Some((c0, r0, c1, r1)) => (c0.min(col), r0.min(row), c1.max(col), r1.max(row)),
                    });
                }
            }
        }
        b.map(|(c0, r0, c1, r1)| BBox { x0: c0 as f64, y0: r0 as f64, x1: (c1 + 1) as f64, y1: (r1 + 1) as f64 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Jittered and extended box.
    pub bbox: BBox,
    pub category: Category,
    pub object_id: usize,
    pub gt_visible_fraction: f64,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    /// Max per-side jitter as a fraction of the tight box size.
    pub bbox_jitter: f64,
    /// Outward extension per side as a fraction of the box size.
    pub extend: f64,
    /// Detections with a smaller visible fraction are dropped.
    pub min_visibility: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig { bbox_jitter: 0.0, extend: 0.10, min_visibility: 0.15 }
    }
}

/// Simulated detector: tight instance-mask boxes, jittered, then extended.
pub fn detect_objects(
    scene: &Scene,
    library: &ModelLibrary,
    maps: &ChannelMaps,
    cfg: &JitterConfig,
    seed: u64,
) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, obj) in scene.objects.iter().enumerate() {
        let id = i as i32;
        let visible = maps.count_instance(id);
        let alone = rasterize_objects(scene, library, &[i]).count_instance(id);
        // keep the RNG stream aligned per object whether or not it is dropped
        let jitter: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        if visible == 0 || alone == 0 {
            continue;
        }
        let fraction = (visible as f64 / alone as f64).min(1.0);
        if fraction < cfg.min_visibility {
            continue;
        }
        let Some(tight) = BBox::of_instance(maps, id) else { continue };
        let (w, h) = (tight.width(), tight.height());
        let j = cfg.bbox_jitter;
        let jittered = BBox {
            x0: tight.x0 + jitter[0] * j * w,
            y0: tight.y0 + jitter[1] * j * h,
            x1: tight.x1 + jitter[2] * j * w,
            y1: tight.y1 + jitter[3] * j * h,
        };
        let bbox = jittered.extended(cfg.extend);
        if !bbox.intersects_image(&scene.camera) {
            continue;
        }
        out.push(Detection {
            bbox,
            category: obj.category,
            object_id: i,
            gt_visible_fraction: fraction,
            confidence: 0.5 + 0.5 * fraction,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Quat, SymmetryTag, Vec3};
    use crate::synthscene::model::{make_primitive_model, ShapeParams};
    use crate::synthscene::raster::rasterize;
    use crate::synthscene::scene::SceneObject;

    fn scene(objs: &[(Vec3, f64)]) -> (Scene, ModelLibrary) {
        let cube = make_primitive_model(Category::Cube, ShapeParams::Cube, 0).unwrap();
        let lib = ModelLibrary::from_models(vec![cube]);
        let objects = objs
            .iter()
            .map(|&(t, s)| SceneObject {
                model_id: 0,
                category: Category::Cube,
                pose: Pose::from_translation(t, Quat::IDENTITY, Vec3::repeat(s)).unwrap(),
                symmetry: SymmetryTag::FourFold,
            })
            .collect();
        (Scene { seed: 0, camera: Camera::centered(100.0, 96, 64), pitch: 0.0, objects }, lib)
    }

    #[test]
    fn zero_jitter_gives_extended_tight_box() {
        let (s, lib) = scene(&[(Vec3::new(0.0, 0.0, 4.0), 1.0)]);
        let maps = rasterize(&s, &lib);
        let dets = detect_objects(&s, &lib, &maps, &JitterConfig::default(), 1);
        assert_eq!(dets.len(), 1);
        let tight = BBox::of_instance(&maps, 0).unwrap();
        assert_eq!(dets[0].bbox, tight.extended(0.10));
        assert_eq!(dets[0].gt_visible_fraction, 1.0);
    }

    #[test]
    fn fully_occluded_object_is_dropped() {
        let (s, lib) = scene(&[(Vec3::new(0.0, 0.0, 6.0), 0.5), (Vec3::new(0.0, 0.0, 2.0), 1.0)]);
        let maps = rasterize(&s, &lib);
        let dets = detect_objects(&s, &lib, &maps, &JitterConfig::default(), 1);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].object_id, 1);
    }

    #[test]
    fn half_occluded_visibility() {
        // occluder covers the left half of the far cube's silhouette
        let (s, lib) = scene(&[(Vec3::new(0.0, 0.0, 6.0), 1.0), (Vec3::new(-0.25, 0.0, 2.0), 0.5)]);
        let maps = rasterize(&s, &lib);
        let alone = rasterize_objects(&s, &lib, &[0]).count_instance(0) as f64;
        let visible = maps.count_instance(0) as f64;
        let dets = detect_objects(&s, &lib, &maps, &JitterConfig { min_visibility: 0.0, ..Default::default() }, 1);
        let far = dets.iter().find(|d| d.object_id == 0).unwrap();
        assert_eq!(far.gt_visible_fraction, visible / alone);
        assert!((far.gt_visible_fraction - 0.5).abs() < 0.1, "{}", far.gt_visible_fraction);
    }

    #[test]
    fn iou_basics() {
        let a = BBox { x0: 0.0, y0: 0.0, x1: 2.0, y1: 2.0 };
        let b = BBox { x0: 1.0, y0: 0.0, x1: 3.0, y1: 2.0 };
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(a.iou(&BBox { x0: 5.0, y0: 5.0, x1: 6.0, y1: 6.0 }), 0.0);
        assert_eq!(a.iou(&a), 1.0);
    }
}
