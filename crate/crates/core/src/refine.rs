//! Test-time controller: four azimuthal initializations per detection, three
//! predicted updates and a scoring pass per track, best-σ selection.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align_net::AlignNet;
use crate::diff_engine::Scalar;
use crate::error::{Error, Result};
use crate::geometry::{update_pose, vertical_rotation, Camera, Pose, PoseDelta, Vec3};
use crate::sparse_input::{assemble_batch, build_block, Batch, InputConfig};
use crate::synthscene::{camera_from_world, derive_seed, CadModel, Category, ChannelMaps, Detection, SceneConfig};

pub const N_TRACKS: usize = 4;

/// Anything that maps a batch to one pose update per active slot.
pub trait Predictor: Sync {
    fn n_mul(&self) -> usize;

    fn predict(&self, batch: &Batch) -> Result<Vec<PoseDelta>>;

    /// Forward passes served so far.
    fn forward_count(&self) -> u64;
}

impl<T: Scalar> Predictor for AlignNet<T> {
    fn n_mul(&self) -> usize {
        self.config.n_mul
    }

    fn predict(&self, batch: &Batch) -> Result<Vec<PoseDelta>> {
        Ok(AlignNet::predict(self, batch)?.deltas)
    }

    fn forward_count(&self) -> u64 {
        AlignNet::forward_count(self)
    }
}

/// Emits the exact update that lands each slot on its ground-truth pose.
pub struct OraclePredictor {
    /// Ground-truth poses indexed by scene object id.
    pub gts: Vec<Pose>,
    pub n_mul: usize,
    pub sigma: f64,
    count: AtomicU64,
}

impl OraclePredictor {
    pub fn new(gts: Vec<Pose>, n_mul: usize) -> OraclePredictor {
        OraclePredictor { gts, n_mul, sigma: 1.0, count: AtomicU64::new(0) }
    }
}

impl Predictor for OraclePredictor {
    fn n_mul(&self) -> usize {
        self.n_mul
    }

    fn predict(&self, batch: &Batch) -> Result<Vec<PoseDelta>> {
        self.count.fetch_add(1, Ordering::Relaxed);
        batch
            .active()
            .map(|b| {
                let gt = self
                    .gts
                    .get(b.detection.object_id)
                    .ok_or_else(|| Error::Evaluation(format!("no ground truth for object {}", b.detection.object_id)))?;
                Ok(PoseDelta { sigma: self.sigma, ..PoseDelta::between(&b.current_pose, gt) })
            })
            .collect()
    }

    fn forward_count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

/// Always predicts the identity update.
pub struct IdentityPredictor {
    pub n_mul: usize,
    pub sigma: f64,
    count: AtomicU64,
}

impl IdentityPredictor {
    pub fn new(n_mul: usize) -> IdentityPredictor {
        IdentityPredictor { n_mul, sigma: 0.5, count: AtomicU64::new(0) }
    }
}

impl Predictor for IdentityPredictor {
    fn n_mul(&self) -> usize {
        self.n_mul
    }

    fn predict(&self, batch: &Batch) -> Result<Vec<PoseDelta>> {
        self.count.fetch_add(1, Ordering::Relaxed);
        Ok(batch.active().map(|_| PoseDelta { sigma: self.sigma, ..PoseDelta::identity() }).collect())
    }

    fn forward_count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub iterations: usize,
    /// Depth used when the bbox heuristic is off, meters.
    pub depth_prior: f64,
    /// Estimate depth from the bbox size and the category's median extent.
    pub depth_from_bbox: bool,
    pub depth_clamp: [f64; 2],
    /// Camera pitch assumed for the upright orientation, degrees; `None`
    /// uses the middle of the scene configuration's pitch range.
    pub pitch_prior_deg: Option<f64>,
    pub input: InputConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iterations: 3,
            depth_prior: 2.5,
            depth_from_bbox: true,
            depth_clamp: [1.0, 5.0],
            pitch_prior_deg: None,
            input: InputConfig::desk(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_prior > 0.0 && self.depth_clamp[0] > 0.0 && self.depth_clamp[1] >= self.depth_clamp[0]) {
            return Err(Error::Config("refine depth prior and clamp must be positive".into()));
        }
        if self.input.n_bbox + self.input.n_cad == 0 {
            return Err(Error::Config("refine input rows must be positive".into()));
        }
        Ok(())
    }
}

/// Category priors consumed by [`init_candidates`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryPrior {
    pub scale: Vec3,
    /// Extent of the category's canonical model at unit scale.
    pub extent: Vec3,
    pub pitch: f64,
}

impl CategoryPrior {
    pub fn from_config(scene: &SceneConfig, category: Category, model: &CadModel, cfg: &RefineConfig) -> CategoryPrior {
        let pitch = cfg.pitch_prior_deg.map(f64::to_radians).unwrap_or_else(|| scene.nominal_pitch());
        CategoryPrior { scale: scene.scale_bounds_for(category).median(), extent: model.extent(), pitch }
    }
}

/// Four initial poses sharing translation and scale: the bbox-center bearing
/// at the prior depth, the category's median scale, and the upright
/// orientation turned by 0°, 90°, 180° and 270° about the vertical.
pub fn init_candidates(
    detection: &Detection,
    camera: &Camera,
    prior: &CategoryPrior,
    cfg: &RefineConfig,
) -> Result<[Pose; N_TRACKS]> {
    let b = detection.bbox.clipped(camera);
    if !(b.x1 > b.x0 && b.y1 > b.y0) {
        return Err(Error::EmptyRegion);
    }
    let (u, v) = detection.bbox.center();
    let depth = if cfg.depth_from_bbox {
        // the extended box spans 1.2 times the object
        let size = prior.extent.component_mul(&prior.scale);
        let world = size.x.max(size.z).max(size.y);
        let px = detection.bbox.width().max(detection.bbox.height()) / 1.2;
        (camera.fx * world / px.max(1.0)).clamp(cfg.depth_clamp[0], cfg.depth_clamp[1])
    } else {
        cfg.depth_prior
    };
    let ray = Vec3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0);
    let t = ray * depth;
    let upright = camera_from_world(prior.pitch);
    let mut out = [Pose::from_translation(t, upright, prior.scale)?; N_TRACKS];
    for (k, p) in out.iter_mut().enumerate() {
        *p = Pose::from_translation(t, upright.mul(&vertical_rotation(k as f64 * FRAC_PI_2)), prior.scale)?;
    }
    Ok(out)
}

/// Poses and scores of one initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    /// Initial pose followed by one pose per update.
    pub poses: Vec<Pose>,
    /// `sigmas[i]` scores `poses[i]`.
    pub sigmas: Vec<f64>,
}

impl Track {
    pub fn final_sigma(&self) -> f64 {
        self.sigmas.last().copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionTrace {
    /// Index into the scene's detection list.
    pub detection: usize,
    pub tracks: Vec<Track>,
    pub chosen: usize,
}

impl DetectionTrace {
    /// Track with the highest σ at `iteration` (ties to the lowest index).
    pub fn best_at(&self, iteration: usize) -> usize {
        let mut best = 0;
        for (k, t) in self.tracks.iter().enumerate() {
            if t.sigmas[iteration] > self.tracks[best].sigmas[iteration] {
                best = k;
            }
        }
        best
    }

    /// Selected pose and σ after `iteration` updates.
    pub fn pose_at(&self, iteration: usize) -> (Pose, f64) {
        let k = self.best_at(iteration);
        (self.tracks[k].poses[iteration], self.tracks[k].sigmas[iteration])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub detections: Vec<DetectionTrace>,
    /// Detections that could not be refined, with the reason.
    pub skipped: Vec<(usize, String)>,
    pub forward_passes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPrediction {
    pub scene: u64,
    pub detection: usize,
    /// Scene object the detection was produced from.
    pub object_id: usize,
    pub category: Category,
    pub model_id: u32,
    pub pose: Pose,
    pub sigma: f64,
    pub detector_confidence: f64,
}

/// Inputs for one scene.
pub struct SceneInput<'a> {
    pub scene: u64,
    pub camera: Camera,
    pub maps: &'a ChannelMaps,
    pub detections: &'a [Detection],
    /// CAD model per detection.
    pub models: &'a [&'a CadModel],
    pub priors: &'a [CategoryPrior],
}

/// Refines every detection of a scene jointly. Each initialization index
/// forms its own track set; within a track set detections are packed in
/// order into batches of at most `n_mul` slots.
pub fn refine_scene(
    predictor: &dyn Predictor,
    input: &SceneInput,
    cfg: &RefineConfig,
    seed: u64,
) -> Result<(Vec<AlignmentPrediction>, RefinementTrace)> {
    cfg.validate()?;
    if input.detections.len() != input.models.len() || input.detections.len() != input.priors.len() {
        return Err(Error::Shape("detections, models and priors must align".into()));
    }
    let start = predictor.forward_count();
    let mut trace = RefinementTrace::default();
    let mut live = Vec::new();
    let mut inits = Vec::new();
    for (i, det) in input.detections.iter().enumerate() {
        match init_candidates(det, &input.camera, &input.priors[i], cfg) {
            Ok(c) => {
                live.push(i);
                inits.push(c);
            }
            Err(e) => trace.skipped.push((i, e.to_string())),
        }
    }
    if live.is_empty() {
        return Ok((Vec::new(), trace));
    }
    let tracks: Vec<Vec<Track>> = (0..N_TRACKS)
        .into_par_iter()
        .map(|k| run_track(predictor, input, cfg, &live, inits.iter().map(|c| c[k]).collect(), derive_seed(seed, k as u64)))
        .collect::<Result<_>>()?;

    let mut preds = Vec::with_capacity(live.len());
    for (j, &i) in live.iter().enumerate() {
        let dt = DetectionTrace { detection: i, tracks: tracks.iter().map(|t| t[j].clone()).collect(), chosen: 0 };
        let chosen = dt.best_at(cfg.iterations);
        let det = &input.detections[i];
        let track = &dt.tracks[chosen];
        preds.push(AlignmentPrediction {
            scene: input.scene,
            detection: i,
            object_id: det.object_id,
            category: det.category,
            model_id: input.models[i].id,
            pose: *track.poses.last().expect("track has poses"),
            sigma: track.final_sigma(),
            detector_confidence: det.confidence,
        });
        trace.detections.push(DetectionTrace { chosen, ..dt });
    }
    trace.forward_passes = predictor.forward_count() - start;
    Ok((preds, trace))
}

fn run_track(
    predictor: &dyn Predictor,
    input: &SceneInput,
    cfg: &RefineConfig,
    live: &[usize],
    init: Vec<Pose>,
    seed: u64,
) -> Result<Vec<Track>> {
    let n_mul = predictor.n_mul();
    let mut tracks: Vec<Track> = init.iter().map(|&p| Track { poses: vec![p], sigmas: Vec::new() }).collect();
    for iter in 0..=cfg.iterations {
        let iter_seed = derive_seed(seed, iter as u64);
        let blocks = live
            .iter()
            .zip(&tracks)
            .map(|(&i, t)| {
                build_block(
                    input.maps,
                    &input.detections[i],
                    input.models[i],
                    t.poses.last().expect("track has poses"),
                    &input.camera,
                    &cfg.input,
                    derive_seed(iter_seed, i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut slot = 0;
        for batch in assemble_batch(blocks, n_mul) {
            let deltas = predictor.predict(&batch)?;
            if deltas.len() != batch.active_count {
                return Err(Error::Shape(format!("{} deltas for {} active slots", deltas.len(), batch.active_count)));
            }
            for d in deltas {
                let t = &mut tracks[slot];
                t.sigmas.push(d.sigma);
                // the last pass only scores the final pose
                if iter < cfg.iterations {
                    let next = update_pose(t.poses.last().expect("track has poses"), &d);
                    t.poses.push(next);
                }
                slot += 1;
            }
        }
    }
    Ok(tracks)
}

/// One JSON object per line: scene, detection, category, pose, sigma, detector_confidence.
pub fn write_predictions_jsonl(path: &Path, preds: &[AlignmentPrediction]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_predictions_jsonl(path: &Path) -> Result<Vec<AlignmentPrediction>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
