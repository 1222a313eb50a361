//! Exact ray casting against scene meshes, independent of the rasterizer.

use super::scene::{ModelLibrary, Scene};
use crate::geometry::Vec3;

/// Distance along the unit ray from the camera center to the nearest surface,
/// or `None` if the ray misses every object.
pub fn ray_hit(scene: &Scene, library: &ModelLibrary, dir: &Vec3) -> Option<f64> {
    let mut best: Option<f64> = None;
    for obj in &scene.objects {
        let Some(model) = library.get(obj.model_id) else { continue };
        let verts: Vec<Vec3> = model.vertices.iter().map(|v| obj.pose.transform_point(v)).collect();
        for f in &model.faces {
            let (a, b, c) = (verts[f[0] as usize], verts[f[1] as usize], verts[f[2] as usize]);
            if let Some(t) = intersect(dir, &a, &b, &c) {
                if best.is_none_or(|b| t < b) {
                    best = Some(t);
                }
            }
        }
    }
    best
}

/// True when nothing in the scene lies between the camera and `p`
/// (up to a relative slack `eps`).
pub fn point_visible(scene: &Scene, library: &ModelLibrary, p: &Vec3, eps: f64) -> bool {
    let dist = p.norm();
    if p.z <= 0.0 || dist == 0.0 {
        return false;
    }
    match ray_hit(scene, library, &(p / dist)) {
        Some(t) => t >= dist * (1.0 - eps),
        None => true,
    }
}

/// Möller–Trumbore, double-sided, rays from the origin.
fn intersect(dir: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let h = dir.cross(&e2);
    let det = e1.dot(&h);
    if det.abs() < 1e-14 {
        return None;
    }
    let s = -a;
    let u = s.dot(&h) / det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) / det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&q) / det;
    (t > 0.0).then_some(t)
}
