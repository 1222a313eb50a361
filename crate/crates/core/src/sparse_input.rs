//! Sparse per-detection network inputs.
//!
//! Every input row has `C_INPUT = 13` channels in the fixed order
//! `[r, g, b, nx, ny, nz, depth, mask, px, py, pz, tau, det_id]`.
//! A block stacks `n_bbox` rows sampled inside the detection box (`tau = 0`),
//! `n_cad` image rows read where CAD points reproject (`tau = 1`) and `n_cad`
//! rows describing those CAD points themselves (`tau = 2`).

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose, Vec3};
use crate::synthscene::{point_visible, CadModel, ChannelMaps, Detection, ModelLibrary, Scene};

pub const C_INPUT: usize = 13;

pub const CHANNEL_NAMES: [&str; C_INPUT] = ["r", "g", "b", "nx", "ny", "nz", "depth", "mask", "px", "py", "pz", "tau", "det_id"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InputVector {
    pub rgb: [f32; 3],
    pub normal: [f32; 3],
    pub depth: f32,
    pub mask: f32,
    pub bearing: [f32; 3],
    pub tau: u8,
    /// 1-based slot index inside a batch; 0 only for padding.
    pub det_id: u32,
}

impl InputVector {
    /// Camera-frame point of a CAD-side row, recovered from bearing and depth.
    pub fn cad_point(&self) -> Option<Vec3> {
        let [x, y, z] = self.bearing.map(|c| c as f64);
        (z > 0.0 && self.depth > 0.0).then(|| Vec3::new(x, y, z) * (self.depth as f64 / z))
    }

    fn region(tau: u8) -> InputVector {
        InputVector { tau, ..Default::default() }
    }

    /// True when all data channels are zero (out-of-view reprojection).
    pub fn is_void(&self) -> bool {
        self.rgb == [0.0; 3] && self.normal == [0.0; 3] && self.depth == 0.0 && self.mask == 0.0 && self.bearing == [0.0; 3]
    }

    /// Network encoding; `det_id` is divided by `n_mul`.
    pub fn to_row(&self, n_mul: usize) -> [f32; C_INPUT] {
        let [r, g, b] = self.rgb;
        let [nx, ny, nz] = self.normal;
        let [px, py, pz] = self.bearing;
        [r, g, b, nx, ny, nz, self.depth, self.mask, px, py, pz, self.tau as f32, self.det_id as f32 / n_mul as f32]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub n_bbox: usize,
    pub n_cad: usize,
}

impl InputConfig {
    pub fn paper() -> InputConfig {
        InputConfig { n_bbox: 2000, n_cad: 500 }
    }

    pub fn desk() -> InputConfig {
        InputConfig { n_bbox: 200, n_cad: 100 }
    }

    pub fn rows(&self) -> usize {
        self.n_bbox + 2 * self.n_cad
    }
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig::desk()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputBlock {
    pub rows: Vec<InputVector>,
    pub detection: Detection,
    pub current_pose: Pose,
}

impl InputBlock {
    pub fn stamp(&mut self, det_id: u32) {
        for r in &mut self.rows {
            r.det_id = det_id;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `n_mul` slots; `None` is zero padding.
    pub slots: Vec<Option<InputBlock>>,
    pub active_count: usize,
}

impl Batch {
    pub fn n_mul(&self) -> usize {
        self.slots.len()
    }

    pub fn rows_per_slot(&self) -> usize {
        self.slots.iter().flatten().map(|b| b.rows.len()).next().unwrap_or(0)
    }

    pub fn active(&self) -> impl Iterator<Item = &InputBlock> {
        self.slots.iter().flatten()
    }

    /// Flattens to `[n_mul * rows_per_slot, C_INPUT]`, slot-major.
    pub fn flatten(&self) -> Vec<f32> {
        let n_mul = self.n_mul();
        let rows = self.rows_per_slot();
        let mut out = vec![0.0f32; n_mul * rows * C_INPUT];
        for (s, slot) in self.slots.iter().enumerate() {
            if let Some(b) = slot {
                for (i, r) in b.rows.iter().enumerate() {
                    let at = (s * rows + i) * C_INPUT;
                    out[at..at + C_INPUT].copy_from_slice(&r.to_row(n_mul));
                }
            }
        }
        out
    }
}

fn read_pixel(maps: &ChannelMaps, col: usize, row: usize, object_id: usize) -> InputVector {
    let k = maps.index(col, row);
    InputVector {
        rgb: maps.color[k],
        normal: maps.normal[k],
        depth: maps.depth[k],
        mask: if maps.instance[k] == object_id as i32 { 1.0 } else { 0.0 },
        ..Default::default()
    }
}

/// Depth at continuous `(u, v)` inside pixel `(col, row)`: the surface seen at
/// the pixel center is extended along its normal to the ray through `(u, v)`,
/// which is exact on planar patches. Grazing or implausible intersections keep
/// the pixel's own depth.
fn subpixel_depth(maps: &ChannelMaps, camera: &Camera, u: f64, v: f64, col: usize, row: usize) -> f32 {
    let own = maps.depth[maps.index(col, row)];
    if own <= 0.0 {
        return own;
    }
    plane_extrapolate(maps, camera, u, v, col, row).unwrap_or(own)
}

fn plane_extrapolate(maps: &ChannelMaps, camera: &Camera, u: f64, v: f64, col: usize, row: usize) -> Option<f32> {
    let k = maps.index(col, row);
    let own = maps.depth[k] as f64;
    let n = maps.normal[k];
    let n = Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64);
    if own <= 0.0 || n.norm_squared() == 0.0 {
        return None;
    }
    let ray = |u: f64, v: f64| Vec3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
    let (cu, cv) = Camera::pixel_center(col, row);
    let x = ray(cu, cv) * own;
    let r = ray(u, v);
    let denom = n.dot(&r);
    if denom.abs() < 1e-3 * r.norm() {
        return None;
    }
    let t = n.dot(&x) / denom;
    (t > 0.5 * own && t < 2.0 * own).then_some(t as f32)
}

fn to_f32(v: &Vec3) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

/// Uniform pixel samples from the detection box clipped to the image; with
/// replacement only when the box holds fewer than `n` pixels.
pub fn sample_bbox_pixels(
    maps: &ChannelMaps,
    detection: &Detection,
    camera: &Camera,
    n: usize,
    seed: u64,
) -> Result<Vec<InputVector>> {
    let b = detection.bbox.clipped(camera);
    let c0 = b.x0.floor() as usize;
    let r0 = b.y0.floor() as usize;
    let c1 = (b.x1.ceil() as usize).min(camera.width);
    let r1 = (b.y1.ceil() as usize).min(camera.height);
    if b.area() <= 0.0 || c1 <= c0 || r1 <= r0 {
        return Err(Error::EmptyRegion);
    }
    let (w, h) = (c1 - c0, r1 - r0);
    let area = w * h;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> =
        if area < n { (0..n).map(|_| rng.random_range(0..area)).collect() } else { index::sample(&mut rng, area, n).into_vec() };
    Ok(picks
        .into_iter()
        .map(|p| {
            let (col, row) = (c0 + p % w, r0 + p / w);
            let (u, v) = Camera::pixel_center(col, row);
            InputVector { bearing: to_f32(&camera.bearing(u, v)), tau: 0, ..read_pixel(maps, col, row, detection.object_id) }
        })
        .collect())
}

/// Reprojects `n` canonical CAD samples under `pose`, returning the image rows
/// read at the landing pixels and the CAD rows carrying the points' own depth
/// and camera-frame normals. Points off-image or behind the camera keep their
/// slot as void rows.
pub fn encode_cad(
    model: &CadModel,
    pose: &Pose,
    camera: &Camera,
    maps: &ChannelMaps,
    object_id: usize,
    n: usize,
    seed: u64,
) -> (Vec<InputVector>, Vec<InputVector>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let avail = model.canonical_samples.len();
    let picks: Vec<usize> = if avail == 0 {
        Vec::new()
    } else if n <= avail {
        index::sample(&mut rng, avail, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..avail)).collect()
    };
    let rot = pose.rotation();
    let t = pose.translation();
    let mut image_side = Vec::with_capacity(n);
    let mut cad_side = Vec::with_capacity(n);
    for i in 0..n {
        let Some(&pi) = picks.get(i) else {
            image_side.push(InputVector::region(1));
            cad_side.push(InputVector::region(2));
            continue;
        };
        let sp = &model.canonical_samples[pi];
        let p = rot * pose.s.component_mul(&sp.point) + t;
        let landed = camera.project(&p).ok().and_then(|(u, v, _)| Some(((u, v), camera.pixel_at(u, v)?)));
        let Some((col, row)) = landed.map(|(_, c)| c) else {
            image_side.push(InputVector::region(1));
            cad_side.push(InputVector::region(2));
            continue;
        };
        let nrm = rot * sp.normal.component_div(&pose.s);
        let nrm = nrm / nrm.norm();
        let (u, v) = landed.map(|(uv, _)| uv).unwrap_or_default();
        let (cu, cv) = Camera::pixel_center(col, row);
        image_side.push(InputVector {
            bearing: to_f32(&camera.bearing(cu, cv)),
            depth: subpixel_depth(maps, camera, u, v, col, row),
            tau: 1,
            ..read_pixel(maps, col, row, object_id)
        });
        cad_side.push(InputVector {
            normal: to_f32(&nrm),
            depth: p.z as f32,
            bearing: to_f32(&p.normalize()),
            tau: 2,
            ..Default::default()
        });
    }
    (image_side, cad_side)
}

/// Concatenates bbox, reprojection and CAD rows for one detection (`det_id = 1`).
pub fn build_block(
    maps: &ChannelMaps,
    detection: &Detection,
    model: &CadModel,
    pose: &Pose,
    camera: &Camera,
    cfg: &InputConfig,
    seed: u64,
) -> Result<InputBlock> {
    let mut rows = sample_bbox_pixels(maps, detection, camera, cfg.n_bbox, seed)?;
    let (img, cad) = encode_cad(model, pose, camera, maps, detection.object_id, cfg.n_cad, seed ^ 0xcad0_cad0);
    rows.extend(img);
    rows.extend(cad);
    let mut block = InputBlock { rows, detection: detection.clone(), current_pose: *pose };
    block.stamp(1);
    Ok(block)
}

/// Greedy fill in input order into batches of at most `n_mul` slots.
pub fn assemble_batch(blocks: Vec<InputBlock>, n_mul: usize) -> Vec<Batch> {
    let n_mul = n_mul.max(1);
    let mut out = Vec::new();
    let mut iter = blocks.into_iter().peekable();
    while iter.peek().is_some() {
        let mut slots: Vec<Option<InputBlock>> = Vec::with_capacity(n_mul);
        for s in 0..n_mul {
            match iter.next() {
                Some(mut b) => {
                    b.stamp(s as u32 + 1);
                    slots.push(Some(b));
                }
                None => slots.push(None),
            }
        }
        let active_count = slots.iter().filter(|s| s.is_some()).count();
        out.push(Batch { slots, active_count });
    }
    out
}

/// Agreement between image-side and CAD-side depth over the rows flagged in
/// `visible` (typically CAD points with an unobstructed line of sight).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthAgreement {
    pub visible: usize,
    pub agreeing: usize,
}

impl DepthAgreement {
    pub fn fraction(&self) -> f64 {
        if self.visible == 0 {
            1.0
        } else {
            self.agreeing as f64 / self.visible as f64
        }
    }
}

pub fn depth_agreement(image_side: &[InputVector], cad_side: &[InputVector], visible: &[bool], tol: f32) -> DepthAgreement {
    let mut out = DepthAgreement::default();
    for ((a, b), &vis) in image_side.iter().zip(cad_side).zip(visible) {
        if b.is_void() || !vis {
            continue;
        }
        out.visible += 1;
        if (a.depth - b.depth).abs() <= tol {
            out.agreeing += 1;
        }
    }
    out
}

/// Encodes every object at its ground-truth pose and measures image/CAD depth
/// agreement over rows that are visible: the landing pixel shows the object
/// and an exact ray cast finds nothing in front of the CAD point.
pub fn gt_depth_agreement(
    scene: &Scene,
    library: &ModelLibrary,
    maps: &ChannelMaps,
    n_cad: usize,
    tol: f32,
    seed: u64,
) -> DepthAgreement {
    let mut total = DepthAgreement::default();
    for (i, o) in scene.objects.iter().enumerate() {
        let (img, cad) = encode_cad(library.model(o.model_id), &o.pose, &scene.camera, maps, i, n_cad, seed ^ i as u64);
        let visible: Vec<bool> = cad
            .iter()
            .zip(&img)
            .map(|(r, x)| x.mask == 1.0 && r.cad_point().is_some_and(|p| point_visible(scene, library, &p, 1e-4)))
            .collect();
        let a = depth_agreement(&img, &cad, &visible, tol);
        total.visible += a.visible;
        total.agreeing += a.agreeing;
    }
    total
}

#[derive(Serialize)]
struct DumpSidecar<'a> {
    shape: [usize; 3],
    dtype: &'a str,
    channels: &'a [&'a str],
    active_count: usize,
}

/// Writes the flattened batch as raw little-endian f32 plus a JSON sidecar
/// (`<path>.json`) describing shape and channel names.
pub fn dump_batch(path: &Path, batch: &Batch) -> Result<()> {
    let flat = batch.flatten();
    let mut bytes = Vec::with_capacity(flat.len() * 4);
    for v in &flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    let sidecar = DumpSidecar {
        shape: [batch.n_mul(), batch.rows_per_slot(), C_INPUT],
        dtype: "f32le",
        channels: &CHANNEL_NAMES,
        active_count: batch.active_count,
    };
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    std::fs::write(side, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quat;
    use crate::synthscene::{
        detect_objects, make_primitive_model, rasterize, BBox, Category, JitterConfig, ModelLibrary, Scene, SceneObject,
        ShapeParams,
    };

    fn fixture() -> (Scene, ModelLibrary, ChannelMaps, Vec<Detection>) {
        let cube = make_primitive_model(Category::Cube, ShapeParams::Cube, 0).unwrap();
        let lib = ModelLibrary::from_models(vec![cube]);
        let pose = Pose::from_translation(
            Vec3::new(0.1, 0.0, 3.0),
            Quat::from_axis_angle(Vec3::new(0.3, 1.0, 0.1), 0.6),
            Vec3::new(0.8, 0.6, 0.7),
        )
        .unwrap();
        let scene = Scene {
            seed: 0,
            camera: Camera::centered(110.0, 128, 96),
            pitch: 0.0,
            objects: vec![SceneObject { model_id: 0, category: Category::Cube, pose, symmetry: Category::Cube.symmetry() }],
        };
        let maps = rasterize(&scene, &lib);
        let dets = detect_objects(&scene, &lib, &maps, &JitterConfig::default(), 0);
        (scene, lib, maps, dets)
    }

    fn det_with_box(b: BBox) -> Detection {
        Detection { bbox: b, category: Category::Cube, object_id: 0, gt_visible_fraction: 1.0, confidence: 1.0 }
    }

    #[test]
    fn degenerate_box_repeats_pixel() {
        let (scene, _, maps, _) = fixture();
        let d = det_with_box(BBox { x0: 64.0, y0: 48.0, x1: 65.0, y1: 49.0 });
        let rows = sample_bbox_pixels(&maps, &d, &scene.camera, 4, 1).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| *r == rows[0]));
        assert_eq!(rows[0].tau, 0);
    }

    #[test]
    fn background_pixels_read_zero() {
        let (scene, _, maps, _) = fixture();
        let d = det_with_box(BBox { x0: 0.0, y0: 0.0, x1: 2.0, y1: 2.0 });
        let rows = sample_bbox_pixels(&maps, &d, &scene.camera, 4, 1).unwrap();
        assert!(rows.iter().all(|r| r.mask == 0.0 && r.depth == 0.0));
    }

    #[test]
    fn box_outside_image_is_an_error() {
        let (scene, _, maps, _) = fixture();
        let d = det_with_box(BBox { x0: 200.0, y0: 10.0, x1: 220.0, y1: 20.0 });
        assert!(matches!(sample_bbox_pixels(&maps, &d, &scene.camera, 4, 1), Err(Error::EmptyRegion)));
    }

    #[test]
    fn sampling_is_reproducible() {
        let (scene, lib, maps, dets) = fixture();
        let pose = scene.objects[0].pose;
        let cfg = InputConfig::desk();
        let a = build_block(&maps, &dets[0], lib.model(0), &pose, &scene.camera, &cfg, 5).unwrap();
        let b = build_block(&maps, &dets[0], lib.model(0), &pose, &scene.camera, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn block_layout() {
        let (scene, lib, maps, dets) = fixture();
        let pose = scene.objects[0].pose;
        for (cfg, expect) in [(InputConfig::paper(), 3000), (InputConfig { n_bbox: 200, n_cad: 200 }, 600)] {
            let block = build_block(&maps, &dets[0], lib.model(0), &pose, &scene.camera, &cfg, 3).unwrap();
            assert_eq!(block.rows.len(), expect);
            for (i, r) in block.rows.iter().enumerate() {
                let tau = if i < cfg.n_bbox {
                    0
                } else if i < cfg.n_bbox + cfg.n_cad {
                    1
                } else {
                    2
                };
                assert_eq!(r.tau, tau);
                if tau == 2 {
                    assert_eq!(r.rgb, [0.0; 3]);
                    assert_eq!(r.mask, 0.0);
                }
            }
            let batch = assemble_batch(vec![block], 1);
            assert_eq!(batch[0].flatten().len(), expect * C_INPUT);
        }
    }

    #[test]
    fn ground_truth_depths_agree() {
        let (scene, lib, maps, _) = fixture();
        let obj = &scene.objects[0];
        let (img, cad) = encode_cad(lib.model(0), &obj.pose, &scene.camera, &maps, 0, 1000, 4);
        let visible: Vec<bool> = cad
            .iter()
            .zip(&img)
            .map(|(r, x)| {
                x.mask == 1.0 && r.cad_point().is_some_and(|p| crate::synthscene::point_visible(&scene, &lib, &p, 1e-4))
            })
            .collect();
        let a = depth_agreement(&img, &cad, &visible, 1e-2);
        assert!(a.visible > 300, "{a:?}");
        // rows near silhouettes and creases land on pixels showing another surface
        assert!(a.fraction() >= 0.6, "{a:?}");
        let mut errs: Vec<f32> =
            img.iter().zip(&cad).zip(&visible).filter(|(_, v)| **v).map(|((x, y), _)| (x.depth - y.depth).abs()).collect();
        errs.sort_by(f32::total_cmp);
        assert!(errs[errs.len() / 2] < 1e-3, "median {}", errs[errs.len() / 2]);
    }

    #[test]
    fn points_behind_camera_are_void() {
        let (scene, lib, maps, _) = fixture();
        let behind = Pose::from_translation(Vec3::new(0.0, 0.0, -3.0), Quat::IDENTITY, Vec3::repeat(1.0)).unwrap();
        let (img, cad) = encode_cad(lib.model(0), &behind, &scene.camera, &maps, 0, 50, 1);
        assert_eq!(img.len(), 50);
        assert!(img.iter().chain(&cad).all(|r| r.is_void()));
        assert!(img.iter().all(|r| r.tau == 1) && cad.iter().all(|r| r.tau == 2));
    }

    #[test]
    fn batches_are_padded_and_renumbered() {
        let (scene, lib, maps, dets) = fixture();
        let pose = scene.objects[0].pose;
        let cfg = InputConfig { n_bbox: 8, n_cad: 4 };
        let block = build_block(&maps, &dets[0], lib.model(0), &pose, &scene.camera, &cfg, 3).unwrap();
        let blocks = |k: usize| vec![block.clone(); k];

        let b = assemble_batch(blocks(5), 5);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].active_count, 5);

        let b = assemble_batch(blocks(7), 5);
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].active_count, b[1].active_count), (5, 2));
        assert!(b[1].slots[2..].iter().all(|s| s.is_none()));
        let ids: Vec<u32> = b[1].active().map(|s| s.rows[0].det_id).collect();
        assert_eq!(ids, vec![1, 2]);
        let flat = b[1].flatten();
        assert!(flat[2 * 16 * C_INPUT..].iter().all(|&v| v == 0.0));

        assert!(assemble_batch(Vec::new(), 5).is_empty());
    }

    #[test]
    fn dump_writes_sidecar() {
        let (scene, lib, maps, dets) = fixture();
        let cfg = InputConfig { n_bbox: 8, n_cad: 4 };
        let block = build_block(&maps, &dets[0], lib.model(0), &scene.objects[0].pose, &scene.camera, &cfg, 3).unwrap();
        let batch = assemble_batch(vec![block], 2).remove(0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("block.bin");
        dump_batch(&path, &batch).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, 2 * 16 * C_INPUT * 4);
        let side: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("block.bin.json")).unwrap()).unwrap();
        assert_eq!(side["shape"], serde_json::json!([2, 16, 13]));
    }
}
