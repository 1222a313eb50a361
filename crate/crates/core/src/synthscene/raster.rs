//! Z-buffered software rasterizer producing depth, normal, instance and color channels.

use serde::{Deserialize, Serialize};

use super::scene::{ModelLibrary, Scene};
use crate::geometry::{Camera, Vec3};

/// Corner normals deviating more than this from the face normal fall back to
/// the face normal, keeping sharp box edges flat-shaded.
const CREASE_COS: f64 = 0.866_025_403_784_438_6; // cos 30°

const NEAR: f64 = 1e-6;

/// Rendered per-pixel channels for one view, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMaps {
    pub width: usize,
    pub height: usize,
    /// Camera-frame z in meters; 0 marks background.
    pub depth: Vec<f32>,
    /// Camera-frame unit normals; zero where undefined.
    pub normal: Vec<[f32; 3]>,
    /// Scene object index, -1 for background.
    pub instance: Vec<i32>,
    pub color: Vec<[f32; 3]>,
}

impl ChannelMaps {
    pub fn empty(width: usize, height: usize) -> ChannelMaps {
        let n = width * height;
        ChannelMaps {
            width,
            height,
            depth: vec![0.0; n],
            normal: vec![[0.0; 3]; n],
            instance: vec![-1; n],
            color: vec![[0.0; 3]; n],
        }
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn count_instance(&self, id: i32) -> usize {
        self.instance.iter().filter(|&&v| v == id).count()
    }
}

/// Deterministic per-model albedo.
pub fn albedo(model_id: u32) -> [f64; 3] {
    let h = (model_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let c = |shift: u32| 0.35 + 0.6 * (((h >> shift) & 0xff) as f64 / 255.0);
    [c(8), c(24), c(40)]
}

/// Renders every object of the scene.
pub fn rasterize(scene: &Scene, library: &ModelLibrary) -> ChannelMaps {
    let all: Vec<usize> = (0..scene.objects.len()).collect();
    rasterize_objects(scene, library, &all)
}

/// Renders only the listed object indices (instance ids keep their scene index).
pub fn rasterize_objects(scene: &Scene, library: &ModelLibrary, indices: &[usize]) -> ChannelMaps {
    let cam = &scene.camera;
    let mut maps = ChannelMaps::empty(cam.width, cam.height);
    let mut zbuf = vec![f64::INFINITY; cam.width * cam.height];
    for &oi in indices {
        let obj = &scene.objects[oi];
        let Some(model) = library.get(obj.model_id) else { continue };
        let pose = &obj.pose;
        let verts: Vec<Vec3> = model.vertices.iter().map(|v| pose.transform_point(v)).collect();
        let vnormals: Vec<Vec3> = model.vertex_normals.iter().map(|n| pose.transform_normal(n)).collect();
        let alb = albedo(obj.model_id);
        for (fi, f) in model.faces.iter().enumerate() {
            let idx = [f[0] as usize, f[1] as usize, f[2] as usize];
            let p = [verts[idx[0]], verts[idx[1]], verts[idx[2]]];
            let face_n = pose.transform_normal(&model.face_normal(fi));
            let corner_n = idx.map(|i| if vnormals[i].dot(&face_n) >= CREASE_COS { vnormals[i] } else { face_n });
            draw_triangle(cam, &mut maps, &mut zbuf, oi as i32, &p, &corner_n, alb);
        }
    }
    maps
}

#[allow(clippy::too_many_arguments)]
fn draw_triangle(cam: &Camera, maps: &mut ChannelMaps, zbuf: &mut [f64], id: i32, p: &[Vec3; 3], n: &[Vec3; 3], alb: [f64; 3]) {
    if p.iter().any(|v| v.z <= NEAR) {
        return;
    }
    let s: [(f64, f64); 3] = p.map(|v| (cam.fx * v.x / v.z + cam.cx, cam.fy * v.y / v.z + cam.cy));
    let area = edge(s[0], s[1], s[2]);
    if area.abs() < 1e-12 {
        return;
    }
    let min_u = s.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
    let max_u = s.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    let min_v = s.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let max_v = s.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let c0 = ((min_u - 0.5).floor().max(0.0)) as usize;
    let r0 = ((min_v - 0.5).floor().max(0.0)) as usize;
    let c1 = ((max_u - 0.5).ceil()).min(cam.width as f64 - 1.0);
    let r1 = ((max_v - 0.5).ceil()).min(cam.height as f64 - 1.0);
    if c1 < 0.0 || r1 < 0.0 {
        return;
    }
    let (c1, r1) = (c1 as usize, r1 as usize);
    let inv_z = p.map(|v| 1.0 / v.z);
    for row in r0..=r1 {
        for col in c0..=c1 {
            let (u, v) = Camera::pixel_center(col, row);
            let w0 = edge(s[1], s[2], (u, v)) / area;
            let w1 = edge(s[2], s[0], (u, v)) / area;
            let w2 = edge(s[0], s[1], (u, v)) / area;
            if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                continue;
            }
            let iz = w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2];
            let z = 1.0 / iz;
            let k = row * cam.width + col;
            if z >= zbuf[k] {
                continue;
            }
            zbuf[k] = z;
            let nn = (n[0] * (w0 * inv_z[0]) + n[1] * (w1 * inv_z[1]) + n[2] * (w2 * inv_z[2])) * z;
            let nn = nn.normalize();
            let view = -cam.bearing(u, v);
            let shade = 0.25 + 0.75 * nn.dot(&view).max(0.0);
            maps.depth[k] = z as f32;
            maps.normal[k] = [nn.x as f32, nn.y as f32, nn.z as f32];
            maps.instance[k] = id;
            maps.color[k] = [(alb[0] * shade) as f32, (alb[1] * shade) as f32, (alb[2] * shade) as f32];
        }
    }
}

#[inline]
fn edge(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pose, Quat, SymmetryTag};
    use crate::synthscene::model::{make_primitive_model, Category, ShapeParams};
    use crate::synthscene::scene::SceneObject;

    fn cube_scene(objects: &[(Vec3, f64)]) -> (Scene, ModelLibrary) {
        let cube = make_primitive_model(Category::Cube, ShapeParams::Cube, 0).unwrap();
        let lib = ModelLibrary::from_models(vec![cube]);
        let objects = objects
            .iter()
            .map(|&(t, s)| SceneObject {
                model_id: 0,
                category: Category::Cube,
                pose: Pose::from_translation(t, Quat::IDENTITY, Vec3::repeat(s)).unwrap(),
                symmetry: SymmetryTag::FourFold,
            })
            .collect();
        let camera = Camera::centered(100.0, 64, 48);
        (Scene { seed: 0, camera, pitch: 0.0, objects }, lib)
    }

    #[test]
    fn front_face_depth_and_normal() {
        // unit cube centered at z = 2.5 has its front face on the plane z = 2
        let (scene, lib) = cube_scene(&[(Vec3::new(0.0, 0.0, 2.5), 1.0)]);
        let maps = rasterize(&scene, &lib);
        let k = maps.index(32, 24);
        assert_eq!(maps.depth[k], 2.0);
        assert_eq!(maps.instance[k], 0);
        let n = maps.normal[k];
        assert!((n[2] + 1.0).abs() < 1e-6 && n[0].abs() < 1e-6 && n[1].abs() < 1e-6);
        // every interior pixel of the front face
        for row in 6..42 {
            for col in 8..56 {
                let k = maps.index(col, row);
                assert!((maps.depth[k] - 2.0).abs() < 1e-6, "({col},{row})");
            }
        }
        assert_eq!(maps.instance[maps.index(0, 0)], -1);
        assert_eq!(maps.depth[maps.index(0, 0)], 0.0);
    }

    #[test]
    fn nearer_object_wins() {
        let (scene, lib) = cube_scene(&[(Vec3::new(0.0, 0.0, 4.0), 1.0), (Vec3::new(0.3, 0.0, 2.5), 0.6)]);
        let joint = rasterize(&scene, &lib);
        let far = rasterize_objects(&scene, &lib, &[0]);
        let near = rasterize_objects(&scene, &lib, &[1]);
        let mut overlap = 0;
        for k in 0..joint.depth.len() {
            if far.instance[k] == 0 && near.instance[k] == 1 {
                overlap += 1;
                assert_eq!(joint.instance[k], 1);
            }
        }
        assert!(overlap > 0);
    }

    #[test]
    fn empty_scene_renders_background() {
        let (mut scene, lib) = cube_scene(&[]);
        scene.objects.clear();
        let maps = rasterize(&scene, &lib);
        assert!(maps.instance.iter().all(|&i| i == -1));
        assert!(maps.depth.iter().all(|&d| d == 0.0));
    }
}
