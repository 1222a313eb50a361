//! Losses, training-pose samplers and the rollout training loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align_net::{decode_raw, AlignNet, OptimizerConfig, OptimizerState, StepOutcome, N_OUT};
use crate::diff_engine::{kernels, Dual, Graph, NodeId, Real, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{
    euler_perturbation, pose_is_correct_with, update_pose, vertical_rotation, Camera, Pose, SymmetryTag, Thresholds, Vec3,
};
use crate::sparse_input::{assemble_batch, build_block, InputBlock, InputConfig};
use crate::synthscene::{
    derive_seed, render_view, sample_scene, CadModel, Detection, JitterConfig, ModelLibrary, NoiseConfig, ScaleBounds,
    SceneConfig, View,
};

/// Canonical CAD points used by the alignment loss, drawn without
/// replacement when enough samples exist.
pub fn loss_points(model: &CadModel, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let avail = model.canonical_samples.len();
    if avail == 0 {
        return Vec::new();
    }
    let idx: Vec<usize> = if n <= avail {
        rand::seq::index::sample(&mut rng, avail, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..avail)).collect()
    };
    idx.into_iter().map(|i| model.canonical_samples[i].point).collect()
}

/// `Σ_i |F_pred(P_i) − F_gt(P_i)|₁` over the given canonical points.
pub fn align_loss_points(pred: &Pose, gt: &Pose, points: &[Vec3]) -> f64 {
    points.iter().map(|p| (pred.transform_point(p) - gt.transform_point(p)).abs().sum()).sum()
}

pub fn align_loss(pred: &Pose, gt: &Pose, model: &CadModel, n: usize, seed: u64) -> f64 {
    align_loss_points(pred, gt, &loss_points(model, n, seed))
}

/// Alignment loss of the pose reached by applying the decoded `raw` update to
/// `current`, written over [`Real`] so dual numbers give its gradient.
pub fn align_loss_raw<R: Real>(current: &Pose, raw: &[R; N_OUT], gt_points: &[Vec3], points: &[Vec3]) -> R {
    let c = R::cst;
    let p = decode_raw(raw);
    let d = c(current.d) * p.dd;
    let phi = c(current.phi) + p.dphi;
    let theta = c(current.theta) + p.dtheta;
    let q0 = current.q;
    let [bw, bx, by, bz] = p.dq;
    let (aw, ax, ay, az) = (c(q0.w), c(q0.x), c(q0.y), c(q0.z));
    let w = aw * bw - ax * bx - ay * by - az * bz;
    let x = aw * bx + ax * bw + ay * bz - az * by;
    let y = aw * by - ax * bz + ay * bw + az * bx;
    let z = aw * bz + ax * by - ay * bx + az * bw;
    let one = c(1.0);
    let two = c(2.0);
    let r = [
        [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
        [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
        [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
    ];
    let s = [c(current.s.x) * p.ds[0], c(current.s.y) * p.ds[1], c(current.s.z) * p.ds[2]];
    let st = theta.sin();
    let t = [d * st * phi.cos(), d * st * phi.sin(), d * theta.cos()];
    let mut acc = c(0.0);
    for (pt, g) in points.iter().zip(gt_points) {
        let sp = [s[0] * c(pt.x), s[1] * c(pt.y), s[2] * c(pt.z)];
        for i in 0..3 {
            let v = r[i][0] * sp[0] + r[i][1] * sp[1] + r[i][2] * sp[2] + t[i];
            acc = acc + (v - c(g[i])).abs();
        }
    }
    acc
}

/// Value and gradient of [`align_loss_raw`] with respect to the 11 raw outputs.
pub fn align_loss_grad(current: &Pose, raw: &[f64; N_OUT], gt: &Pose, points: &[Vec3]) -> (f64, [f64; N_OUT]) {
    let gt_points: Vec<Vec3> = points.iter().map(|p| gt.transform_point(p)).collect();
    let duals: [Dual<N_OUT>; N_OUT] = std::array::from_fn(|i| Dual::var(raw[i], i));
    let l = align_loss_raw(current, &duals, &gt_points, points);
    (l.v, l.d)
}

/// `−(y ln σ + (1 − y) ln(1 − σ))` with σ clamped to `[1e-7, 1 − 1e-7]`.
pub fn classifier_loss(sigma: f64, label: u8) -> f64 {
    kernels::bce(sigma, label as f64)
}

/// 1 iff the pose is within the correctness thresholds of `gt`.
pub fn label_pose(pose: &Pose, gt: &Pose, sym: SymmetryTag) -> u8 {
    label_pose_with(pose, gt, sym, &Thresholds::default())
}

pub fn label_pose_with(pose: &Pose, gt: &Pose, sym: SymmetryTag, th: &Thresholds) -> u8 {
    pose_is_correct_with(pose, gt, sym, th) as u8
}

/// Bounds for update-regime initial poses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateInit {
    pub tilt_deg: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    /// Camera-frame depth range of the lifted bbox point, meters.
    pub depth: [f64; 2],
}

impl Default for UpdateInit {
    fn default() -> Self {
        UpdateInit { tilt_deg: 10.0, azimuth_deg: 45.0, elevation_deg: 20.0, depth: [1.0, 5.0] }
    }
}

/// Update-regime initialization: a random bbox point lifted to a random
/// depth, scale drawn from the category bounds, and the ground-truth
/// rotation composed with a bounded Euler perturbation.
pub fn sample_update_pose(
    gt: &Pose,
    detection: &Detection,
    camera: &Camera,
    scale: &ScaleBounds,
    init: &UpdateInit,
    seed: u64,
) -> Result<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = detection.bbox.clipped(camera);
    if !(b.x1 >= b.x0 && b.y1 >= b.y0) {
        return Err(Error::EmptyRegion);
    }
    let u = if b.x1 > b.x0 { rng.random_range(b.x0..b.x1) } else { b.x0 };
    let v = if b.y1 > b.y0 { rng.random_range(b.y0..b.y1) } else { b.y0 };
    let z = rng.random_range(init.depth[0]..=init.depth[1]);
    let t = Vec3::new((u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0) * z;
    let s = scale.sample(&mut rng);
    let mut angle = |bound: f64| rng.random_range(-bound..=bound).to_radians();
    let tilt = angle(init.tilt_deg);
    let azim = angle(init.azimuth_deg);
    let elev = angle(init.elevation_deg);
    Pose::from_translation(t, gt.q.mul(&euler_perturbation(tilt, azim, elev)), s)
}

/// One classifier sampling region around the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingRegion {
    /// `(tilt, azimuth, elevation)` bounds, degrees.
    pub rot_deg: [f64; 3],
    pub trans_cm: f64,
    pub scale_pct: f64,
    pub discrete_rotation: bool,
    pub frequency: f64,
}

pub fn default_regions() -> Vec<SamplingRegion> {
    let r = |rot_deg: [f64; 3], t: f64, discrete_rotation: bool, frequency: f64| SamplingRegion {
        rot_deg,
        trans_cm: t,
        scale_pct: t,
        discrete_rotation,
        frequency,
    };
    vec![
        r([7.0, 10.0, 10.0], 13.0, false, 0.4),
        r([7.0, 10.0, 10.0], 13.0, true, 0.2),
        r([7.0, 45.0, 20.0], 30.0, false, 0.2),
        r([7.0, 45.0, 20.0], 30.0, true, 0.1),
        r([20.0, 45.0, 20.0], 60.0, true, 0.1),
    ]
}

pub fn validate_regions(regions: &[SamplingRegion]) -> Result<()> {
    let total: f64 = regions.iter().map(|r| r.frequency).sum();
    if regions.is_empty() || (total - 1.0).abs() > 1e-9 || regions.iter().any(|r| r.frequency < 0.0) {
        return Err(Error::Config(format!("region frequencies must be nonnegative and sum to 1, got {total}")));
    }
    Ok(())
}

/// A classifier-regime pose with its label and the region it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierSample {
    pub pose: Pose,
    pub label: u8,
    pub region: usize,
    /// Quarter turns about the vertical axis, 0 when the region has none.
    pub quarter_turns: u8,
}

pub fn sample_classifier_pose(gt: &Pose, sym: SymmetryTag, seed: u64) -> (Pose, u8) {
    let s = sample_classifier_pose_with(gt, sym, &default_regions(), &Thresholds::default(), seed);
    (s.pose, s.label)
}

/// Draws a region by frequency, then a pose uniformly inside its bounds
/// (per-axis translation and scale offsets, Euler angles); discrete regions
/// add a uniform quarter turn about the vertical axis. The label always
/// comes from the thresholds, never from the region.
pub fn sample_classifier_pose_with(
    gt: &Pose,
    sym: SymmetryTag,
    regions: &[SamplingRegion],
    th: &Thresholds,
    seed: u64,
) -> ClassifierSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: f64 = rng.random();
    let mut acc = 0.0;
    let mut region = regions.len() - 1;
    for (i, r) in regions.iter().enumerate() {
        acc += r.frequency;
        if x < acc {
            region = i;
            break;
        }
    }
    let r = &regions[region];
    let mut sym_range = |b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
    let tilt = sym_range(r.rot_deg[0]).to_radians();
    let azim = sym_range(r.rot_deg[1]).to_radians();
    let elev = sym_range(r.rot_deg[2]).to_radians();
    let dt = Vec3::new(sym_range(r.trans_cm), sym_range(r.trans_cm), sym_range(r.trans_cm)) / 100.0;
    let ds = Vec3::new(sym_range(r.scale_pct), sym_range(r.scale_pct), sym_range(r.scale_pct)) / 100.0;
    let quarter_turns = if r.discrete_rotation { rng.random_range(0..4u8) } else { 0 };
    let mut q = gt.q.mul(&euler_perturbation(tilt, azim, elev));
    if quarter_turns > 0 {
        q = q.mul(&vertical_rotation(quarter_turns as f64 * std::f64::consts::FRAC_PI_2));
    }
    let s = gt.s.component_mul(&(Vec3::repeat(1.0) + ds));
    let t = gt.translation() + dt;
    // a translation at the origin cannot be expressed in polar form
    let pose = Pose::from_translation(t, q, s).unwrap_or(Pose { q: q.normalized().unwrap_or(gt.q).canonical(), s, ..*gt });
    ClassifierSample { pose, label: label_pose_with(&pose, gt, sym, th), region, quarter_turns }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Sum over the loss points.
    Sum,
    /// Mean over the loss points.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_images: usize,
    pub rollout_steps: usize,
    /// Update examples per classifier example; every `(n + 1)`-th example is
    /// a classifier example.
    pub updates_per_classifier: usize,
    pub n_loss: usize,
    pub loss_mode: LossMode,
    /// Weight of the classification term relative to the alignment term.
    pub cls_weight: f64,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub input: InputConfig,
    pub update_init: UpdateInit,
    pub regions: Vec<SamplingRegion>,
    pub thresholds: Thresholds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_images: 20,
            rollout_steps: 3,
            updates_per_classifier: 3,
            n_loss: 256,
            loss_mode: LossMode::Sum,
            cls_weight: 1.0,
            epochs: 1,
            optimizer: OptimizerConfig::default(),
            input: InputConfig::desk(),
            update_init: UpdateInit::default(),
            regions: default_regions(),
            thresholds: Thresholds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_images == 0 || self.rollout_steps == 0 || self.n_loss == 0 || self.epochs == 0 {
            return Err(Error::Config("training counts must be positive".into()));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 || self.cls_weight.is_nan() || self.cls_weight < 0.0 {
            return Err(Error::Config("lr must be positive and cls_weight nonnegative".into()));
        }
        validate_regions(&self.regions)
    }

    /// Whether the `k`-th example of a run is a classifier example.
    pub fn is_classifier(&self, k: u64) -> bool {
        let period = self.updates_per_classifier as u64 + 1;
        k % period == period - 1
    }
}

/// Indexed supply of rendered training or evaluation views.
pub trait ViewSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn view(&self, index: usize) -> Result<View>;

    fn library(&self) -> &ModelLibrary;

    fn scene_config(&self) -> &SceneConfig;
}

/// Views generated on demand from seeds; nothing is stored.
pub struct SyntheticSource {
    pub scene: SceneConfig,
    pub library: ModelLibrary,
    pub noise: NoiseConfig,
    pub jitter: JitterConfig,
    pub base_seed: u64,
    pub count: usize,
}

const SCENE_RETRIES: u64 = 8;

impl SyntheticSource {
    pub fn new(scene: SceneConfig, noise: NoiseConfig, jitter: JitterConfig, base_seed: u64, count: usize) -> Result<Self> {
        scene.validate()?;
        let library = ModelLibrary::build(&scene)?;
        Ok(SyntheticSource { scene, library, noise, jitter, base_seed, count })
    }

    /// Seed actually used for view `index` (retries past placement failures).
    pub fn scene_seed(&self, index: usize) -> Result<u64> {
        for attempt in 0..SCENE_RETRIES {
            let seed = derive_seed(self.base_seed, (index as u64) << 8 | attempt);
            if sample_scene(&self.scene, &self.library, seed).is_ok() {
                return Ok(seed);
            }
        }
        Err(Error::SceneGeneration(format!("no placeable scene for index {index}")))
    }
}

impl ViewSource for SyntheticSource {
    fn len(&self) -> usize {
        self.count
    }

    fn view(&self, index: usize) -> Result<View> {
        let seed = self.scene_seed(index)?;
        let scene = sample_scene(&self.scene, &self.library, seed)?;
        Ok(render_view(scene, &self.library, &self.noise, &self.jitter, seed))
    }

    fn library(&self) -> &ModelLibrary {
        &self.library
    }

    fn scene_config(&self) -> &SceneConfig {
        &self.scene
    }
}

/// What a batch slot is trained on.
#[derive(Clone, Debug)]
pub enum SlotTarget {
    /// Alignment loss of the updated pose against `gt` on `points`.
    Update { gt: Pose, points: Vec<Vec3> },
    /// Cross entropy of σ against `label`.
    Classifier { label: u8 },
}

/// Loss terms recorded on a graph for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct RecordedLoss {
    pub total: NodeId,
    pub align: f64,
    pub cls: f64,
}

/// Adds `L_align` (external node, dual-number gradient) and weighted
/// `L_BCE` on σ for the slots of `raw` (`[active, 11]`). `current` holds the
/// pose each slot was encoded at.
pub fn record_loss<T: Scalar>(
    g: &mut Graph<T>,
    raw: NodeId,
    current: &[Pose],
    targets: &[SlotTarget],
    mode: LossMode,
    cls_weight: f64,
) -> Result<RecordedLoss> {
    let [rows, cols] = g.shape(raw);
    if rows != targets.len() || rows != current.len() || cols != N_OUT {
        return Err(Error::Shape(format!("loss over {rows}x{cols} outputs with {} targets", targets.len())));
    }
    let mut grad = Tensor::<T>::zeros(rows, cols);
    let mut align = 0.0;
    let mut labels = vec![0.0; rows];
    let mut weights = vec![0.0; rows];
    for (r, target) in targets.iter().enumerate() {
        match target {
            SlotTarget::Update { gt, points } => {
                let v = g.value(raw);
                let x: [f64; N_OUT] = std::array::from_fn(|c| v.at(r, c).f64());
                let (l, d) = align_loss_grad(&current[r], &x, gt, points);
                let norm = match mode {
                    LossMode::Sum => 1.0,
                    LossMode::Mean => 1.0 / points.len().max(1) as f64,
                };
                align += l * norm;
                for (g, dc) in grad.data[r * N_OUT..(r + 1) * N_OUT].iter_mut().zip(d) {
                    *g = T::of(dc * norm);
                }
            }
            SlotTarget::Classifier { label } => {
                labels[r] = *label as f64;
                weights[r] = cls_weight;
            }
        }
    }
    let ext = g.external(raw, align, grad)?;
    let logit = g.slice_cols(raw, N_OUT - 1, N_OUT)?;
    let sigma = g.sigmoid(logit)?;
    let bce = g.bce(sigma, &labels, &weights)?;
    let cls = g.value(bce).item().f64();
    let total = g.add(ext, bce)?;
    Ok(RecordedLoss { total, align, cls })
}

/// One CSV row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    #[serde(rename = "L_align")]
    pub l_align: f64,
    #[serde(rename = "L_cls")]
    pub l_cls: f64,
    pub lr: f64,
    pub wallclock: f64,
}

/// CSV writer for [`StepLog`] rows.
pub struct CsvLog {
    w: csv::Writer<std::fs::File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<CsvLog> {
        Ok(CsvLog { w: csv::Writer::from_path(path)? })
    }

    /// Appends to an existing log without repeating the header.
    pub fn append(path: &Path) -> Result<CsvLog> {
        let exists = path.exists() && std::fs::metadata(path)?.len() > 0;
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(CsvLog { w: csv::WriterBuilder::new().has_headers(!exists).from_writer(file) })
    }

    pub fn write(&mut self, row: &StepLog) -> Result<()> {
        self.w.serialize(row)?;
        self.w.flush()?;
        Ok(())
    }
}

/// Counters that persist across epochs of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Optimizer steps taken (including skipped ones).
    pub step: u64,
    /// Examples assigned a role so far; drives the classifier interleaving.
    pub examples: u64,
    pub images: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub batches: usize,
    pub steps: usize,
    pub skipped_steps: usize,
    pub forwards: usize,
    pub update_examples: usize,
    pub classifier_examples: usize,
    /// Mean alignment loss per update example and rollout step.
    pub mean_align: f64,
    /// Mean cross entropy per classifier example and rollout step.
    pub mean_cls: f64,
    pub wallclock: f64,
    pub images_per_sec: f64,
}

#[derive(Clone, Debug)]
struct Example {
    image: usize,
    detection: Detection,
    model_id: u32,
    gt: Pose,
    sym: SymmetryTag,
    classifier: bool,
    pose: Pose,
    seed: u64,
}

fn make_examples(
    views: &[View],
    source: &dyn ViewSource,
    cfg: &TrainConfig,
    progress: &mut TrainProgress,
    seed: u64,
) -> Vec<Example> {
    let mut out = Vec::new();
    for (image, view) in views.iter().enumerate() {
        for det in &view.detections {
            let Some(obj) = view.scene.objects.get(det.object_id) else { continue };
            let k = progress.examples;
            let ex_seed = derive_seed(seed, k);
            let bounds = source.scene_config().scale_bounds_for(obj.category);
            let pose = match sample_update_pose(&obj.pose, det, &view.scene.camera, &bounds, &cfg.update_init, ex_seed) {
                Ok(p) => p,
                Err(_) => continue,
            };
            progress.examples += 1;
            out.push(Example {
                image,
                detection: det.clone(),
                model_id: obj.model_id,
                gt: obj.pose,
                sym: obj.symmetry,
                classifier: cfg.is_classifier(k),
                pose,
                seed: ex_seed,
            });
        }
    }
    out
}

/// Runs one pass over `source`: per batch of images, initialize update
/// poses, then `rollout_steps` rounds of forward, loss, backward and
/// optimizer step, each round starting from the previous round's predicted
/// poses. Gradients do not flow between rounds. `log` receives one row per
/// optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    net: &mut AlignNet<f32>,
    opt: &mut OptimizerState<f32>,
    source: &dyn ViewSource,
    cfg: &TrainConfig,
    epoch: usize,
    seed: u64,
    progress: &mut TrainProgress,
    log: &mut dyn FnMut(&StepLog) -> Result<()>,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Dataset("training source is empty".into()));
    }
    let start = Instant::now();
    let epoch_seed = derive_seed(seed, epoch as u64);
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    let n_mul = net.config.n_mul;
    let mut m = EpochMetrics { epoch, ..Default::default() };
    let (mut align_sum, mut align_n, mut cls_sum, mut cls_n) = (0.0, 0usize, 0.0, 0usize);

    for (b, chunk) in order.chunks(cfg.batch_images).enumerate() {
        let views: Vec<View> = chunk.par_iter().map(|&i| source.view(i)).collect::<Result<_>>()?;
        progress.images += views.len() as u64;
        let batch_seed = derive_seed(epoch_seed, b as u64);
        let mut examples = make_examples(&views, source, cfg, progress, batch_seed);
        m.batches += 1;
        m.update_examples += examples.iter().filter(|e| !e.classifier).count();
        m.classifier_examples += examples.iter().filter(|e| e.classifier).count();

        for step in 0..cfg.rollout_steps {
            let step_seed = derive_seed(batch_seed, 1000 + step as u64);
            let labels: Vec<u8> = examples
                .iter_mut()
                .map(|e| {
                    if !e.classifier {
                        return 0;
                    }
                    let s =
                        sample_classifier_pose_with(&e.gt, e.sym, &cfg.regions, &cfg.thresholds, derive_seed(e.seed, step_seed));
                    e.pose = s.pose;
                    s.label
                })
                .collect();
            let lib = source.library();
            let blocks: Vec<InputBlock> = examples
                .par_iter()
                .map(|e| {
                    let view = &views[e.image];
                    build_block(
                        &view.maps,
                        &e.detection,
                        lib.model(e.model_id),
                        &e.pose,
                        &view.scene.camera,
                        &cfg.input,
                        derive_seed(e.seed, step_seed),
                    )
                })
                .collect::<Result<_>>()?;

            net.params.zero_grad();
            let (mut step_align, mut step_cls) = (0.0, 0.0);
            let mut next = 0;
            while next < examples.len() {
                let image = examples[next].image;
                let mut end = next;
                while end < examples.len() && examples[end].image == image && end - next < n_mul {
                    end += 1;
                }
                let batch = assemble_batch(blocks[next..end].to_vec(), n_mul).remove(0);
                let targets: Vec<SlotTarget> = examples[next..end]
                    .iter()
                    .zip(&labels[next..end])
                    .map(|(e, &label)| {
                        if e.classifier {
                            SlotTarget::Classifier { label }
                        } else {
                            let model = lib.model(e.model_id);
                            SlotTarget::Update { gt: e.gt, points: loss_points(model, cfg.n_loss, derive_seed(e.seed, 7)) }
                        }
                    })
                    .collect();
                let current: Vec<Pose> = examples[next..end].iter().map(|e| e.pose).collect();
                let mut g = Graph::new();
                let raw = net.forward_batch(&mut g, &batch)?;
                let loss = record_loss(&mut g, raw, &current, &targets, cfg.loss_mode, cfg.cls_weight)?;
                if !(loss.align.is_finite() && loss.cls.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {b}, rollout step {step}: L_align {}, L_cls {}",
                        loss.align, loss.cls
                    )));
                }
                g.backward(loss.total)?;
                net.params.accumulate(&g);
                m.forwards += 1;
                step_align += loss.align;
                step_cls += loss.cls;
                let out = g.value(raw);
                for (r, e) in examples[next..end].iter_mut().enumerate() {
                    if !e.classifier {
                        let x: [f64; N_OUT] = std::array::from_fn(|c| out.at(r, c).f64());
                        e.pose = update_pose(&e.pose, &crate::align_net::raw_to_delta(&x));
                    }
                }
                next = end;
            }
            let n_upd = examples.iter().filter(|e| !e.classifier).count();
            let n_cls = examples.len() - n_upd;
            align_sum += step_align;
            align_n += n_upd;
            cls_sum += step_cls;
            cls_n += n_cls;
            if crate::align_net::optimizer_step(&mut net.params, opt, &cfg.optimizer)? == StepOutcome::SkippedNonFinite {
                m.skipped_steps += 1;
                log::warn!("epoch {epoch} batch {b} step {step}: non-finite gradient, step skipped");
            }
            m.steps += 1;
            progress.step += 1;
            log(&StepLog {
                epoch,
                step: progress.step,
                l_align: step_align / n_upd.max(1) as f64,
                l_cls: step_cls / n_cls.max(1) as f64,
                lr: cfg.optimizer.lr,
                wallclock: start.elapsed().as_secs_f64(),
            })?;
        }
    }
    m.mean_align = align_sum / align_n.max(1) as f64;
    m.mean_cls = cls_sum / cls_n.max(1) as f64;
    m.wallclock = start.elapsed().as_secs_f64();
    m.images_per_sec = source.len() as f64 / m.wallclock.max(1e-9);
    Ok(m)
}

/// Finite-difference check of the full tiny network plus `L_total` (one
/// update slot, one classifier slot) over every parameter. Parameters are
/// moved to a generic point first: at init attention is nearly uniform and
/// query/key gradients sink below finite-difference resolution.
pub fn network_loss_grad_check(seed: u64, eps: f64) -> Result<f64> {
    use crate::diff_engine::grad_check_params;
    use crate::geometry::Quat;
    use crate::sparse_input::InputVector;
    use crate::synthscene::{make_primitive_model, BBox, Category, ShapeParams};
    let mut net = AlignNet::<f64>::new(crate::align_net::NetConfig::tiny(), seed)?;
    let mut prng = ChaCha8Rng::seed_from_u64(seed + 1);
    for id in net.params.ids().collect::<Vec<_>>() {
        net.params.value_mut(id).data.iter_mut().for_each(|v| *v += prng.random_range(-0.3..0.3));
    }
    let m = make_primitive_model(Category::Cube, ShapeParams::Cube, 0)?;
    let g = Pose::from_translation(Vec3::new(0.2, 0.1, 3.0), Quat::from_axis_angle(Vec3::y(), 0.4), Vec3::new(0.8, 0.6, 0.7))?;
    // far enough from gt that no coordinate difference changes sign (no L1 kinks)
    let cur = Pose::from_translation(Vec3::new(1.5, -1.0, 5.0), Quat::IDENTITY, Vec3::new(0.5, 0.5, 0.5))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mk = |rng: &mut ChaCha8Rng| InputBlock {
        rows: (0..20)
            .map(|i| InputVector {
                rgb: [rng.random(), rng.random(), rng.random()],
                normal: [rng.random(), rng.random(), rng.random()],
                depth: rng.random_range(1.0..4.0),
                mask: 1.0,
                bearing: [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 1.0],
                tau: (i % 3) as u8,
                det_id: 0,
            })
            .collect(),
        detection: Detection {
            bbox: BBox { x0: 0.0, y0: 0.0, x1: 5.0, y1: 5.0 },
            category: Category::Cube,
            object_id: 0,
            gt_visible_fraction: 1.0,
            confidence: 1.0,
        },
        current_pose: cur,
    };
    let batch = assemble_batch(vec![mk(&mut rng), mk(&mut rng)], 2).remove(0);
    let targets = vec![SlotTarget::Update { gt: g, points: loss_points(&m, 32, 4) }, SlotTarget::Classifier { label: 1 }];
    grad_check_params(
        &net.params,
        |graph, store| {
            let mut n = net.clone();
            n.params = store.clone();
            let raw = n.forward_batch(graph, &batch)?;
            Ok(record_loss(graph, raw, &[cur, cur], &targets, LossMode::Sum, 1.0)?.total)
        },
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align_net::NetConfig;
    use crate::geometry::Quat;
    use crate::synthscene::{make_primitive_model, Category, ShapeParams};
    use approx::assert_abs_diff_eq;

    fn cube() -> CadModel {
        make_primitive_model(Category::Cube, ShapeParams::Cube, 0).unwrap()
    }

    fn gt() -> Pose {
        Pose::from_translation(Vec3::new(0.2, 0.1, 3.0), Quat::from_axis_angle(Vec3::y(), 0.4), Vec3::new(0.8, 0.6, 0.7)).unwrap()
    }

    #[test]
    fn align_loss_examples() {
        let m = cube();
        let g = gt();
        assert_eq!(align_loss(&g, &g, &m, 1000, 1), 0.0);
        let shifted = Pose::from_translation(g.translation() + Vec3::new(0.1, 0.0, 0.0), g.q, g.s).unwrap();
        assert_abs_diff_eq!(align_loss(&shifted, &g, &m, 1000, 1), 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(align_loss(&shifted, &g, &m, 1000, 1), align_loss(&g, &shifted, &m, 1000, 1), epsilon = 1e-12);

        // scale doubled on x, unit cube at the origin, identity rotation
        let base = Pose::new(1.0, 0.0, 0.0, Quat::IDENTITY, Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let mut wide = base;
        wide.s.x = 2.0;
        let pts = loss_points(&m, 500, 3);
        let oracle: f64 = pts.iter().map(|p| p.x.abs()).sum();
        assert_abs_diff_eq!(align_loss_points(&wide, &base, &pts), oracle, epsilon = 1e-9);
    }

    #[test]
    fn raw_path_matches_direct_loss() {
        let m = cube();
        let pts = loss_points(&m, 64, 2);
        let g = gt();
        let cur = Pose::from_translation(Vec3::new(0.3, 0.0, 2.5), Quat::IDENTITY, Vec3::new(0.5, 0.5, 0.5)).unwrap();
        let raw = [0.3, -0.2, 0.1, 0.05, 0.2, -0.1, 0.0, 0.4, -0.3, 0.2, 1.0];
        let pred = update_pose(&cur, &crate::align_net::raw_to_delta(&raw));
        let (l, d) = align_loss_grad(&cur, &raw, &g, &pts);
        assert_abs_diff_eq!(l, align_loss_points(&pred, &g, &pts), epsilon = 1e-9);
        // finite differences on the raw outputs
        let gp: Vec<Vec3> = pts.iter().map(|p| g.transform_point(p)).collect();
        for i in 0..N_OUT {
            let h = 1e-6;
            let mut a = raw;
            let mut b = raw;
            a[i] += h;
            b[i] -= h;
            let num = (align_loss_raw(&cur, &a, &gp, &pts) - align_loss_raw(&cur, &b, &gp, &pts)) / (2.0 * h);
            assert!((num - d[i]).abs() < 1e-5 * (1.0 + num.abs()), "{i}: {num} vs {}", d[i]);
        }
    }

    #[test]
    fn classifier_loss_examples() {
        assert_abs_diff_eq!(classifier_loss(0.5, 1), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(classifier_loss(1.0, 1) < 1e-6);
        assert_abs_diff_eq!(classifier_loss(0.9, 0), std::f64::consts::LN_10, epsilon = 1e-9);
    }

    #[test]
    fn labels_respect_symmetry() {
        let g = gt();
        assert_eq!(label_pose(&g, &g, SymmetryTag::None), 1);
        let off = Pose { q: g.q.mul(&Quat::from_axis_angle(Vec3::x(), 25f64.to_radians())), ..g };
        assert_eq!(label_pose(&off, &g, SymmetryTag::None), 0);
        let quarter = Pose { q: g.q.mul(&vertical_rotation(std::f64::consts::FRAC_PI_2)).canonical(), ..g };
        assert_eq!(label_pose(&quarter, &g, SymmetryTag::FourFold), 1);
        assert_eq!(label_pose(&quarter, &g, SymmetryTag::None), 0);
    }

    #[test]
    fn region_frequencies_sum_to_one() {
        validate_regions(&default_regions()).unwrap();
        let mut bad = default_regions();
        bad[0].frequency = 0.5;
        assert!(validate_regions(&bad).is_err());
    }

    #[test]
    fn interleaving_is_one_in_four() {
        let cfg = TrainConfig::default();
        let cls = (0..400).filter(|&k| cfg.is_classifier(k)).count();
        assert_eq!(cls, 100);
        assert!(cfg.is_classifier(3) && !cfg.is_classifier(0));
    }

    #[test]
    fn full_tiny_network_loss_gradients() {
        let err = network_loss_grad_check(21, 1e-4).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    fn det(b: crate::synthscene::BBox) -> Detection {
        Detection { bbox: b, category: Category::BoxChair, object_id: 0, gt_visible_fraction: 1.0, confidence: 1.0 }
    }

    #[test]
    fn update_pose_sampler_statistics() {
        use crate::synthscene::{default_scale_bounds, BBox};
        let cam = Camera::centered(110.0, 128, 96);
        let g = gt();
        let bounds = default_scale_bounds(Category::BoxChair);
        let init = UpdateInit::default();
        let d = det(BBox { x0: 30.0, y0: 20.0, x1: 70.0, y1: 60.0 });
        assert_eq!(
            sample_update_pose(&g, &d, &cam, &bounds, &init, 5).unwrap(),
            sample_update_pose(&g, &d, &cam, &bounds, &init, 5).unwrap()
        );
        let n = 10_000;
        let bins = 9;
        let mut hist = vec![0usize; bins];
        for seed in 0..n {
            let p = sample_update_pose(&g, &d, &cam, &bounds, &init, seed).unwrap();
            let t = p.translation();
            assert!(t.z >= 1.0 - 1e-9 && t.z <= 5.0 + 1e-9);
            let (u, v, _) = cam.project(&t).unwrap();
            assert!((30.0..=70.0).contains(&u) && (20.0..=60.0).contains(&v));
            // perturbation Ry(a) Rx(e) Rz(t) maps +z to (cos e sin a, −sin e, cos e cos a)
            let z = g.q.conjugate().mul(&p.q).rotate(&Vec3::z());
            let a = z.x.atan2(z.z).to_degrees();
            assert!(a.abs() <= 45.0 + 1e-6);
            hist[(((a + 45.0) / 90.0 * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let expect = n as f64 / bins as f64;
        let sd = (expect * (1.0 - 1.0 / bins as f64)).sqrt();
        for h in hist {
            assert!((h as f64 - expect).abs() < 3.0 * sd, "bin count {h} vs {expect}");
        }
        // a one-pixel box fixes the bearing, depth still varies
        let d1 = det(BBox { x0: 50.5, y0: 40.5, x1: 50.5, y1: 40.5 });
        let a = sample_update_pose(&g, &d1, &cam, &bounds, &init, 1).unwrap().translation();
        let b = sample_update_pose(&g, &d1, &cam, &bounds, &init, 2).unwrap().translation();
        assert!((a.normalize() - b.normalize()).norm() < 1e-12);
        assert!((a.z - b.z).abs() > 1e-6);
    }

    #[test]
    fn classifier_labels_are_balanced() {
        let g = gt();
        let n = 100_000;
        for sym in [SymmetryTag::None, SymmetryTag::TwoFold, SymmetryTag::FourFold, SymmetryTag::Infinite] {
            let pos = (0..n).filter(|&s| sample_classifier_pose(&g, sym, s).1 == 1).count() as f64 / n as f64;
            assert!((0.2..=0.8).contains(&pos), "{sym:?}: positive share {pos}");
        }
        let regions = default_regions();
        let th = Thresholds::default();
        let (mut r1_pos, mut r1_neg) = (0, 0);
        for s in 0..10_000 {
            let c = sample_classifier_pose_with(&g, SymmetryTag::None, &regions, &th, s);
            if c.region == 0 {
                if c.label == 1 {
                    r1_pos += 1
                } else {
                    r1_neg += 1
                }
            }
            if c.region == 1 && c.quarter_turns == 2 {
                assert_eq!(c.label, 0);
            }
        }
        assert!(r1_pos > 0 && r1_neg > 0);
        // a quarter turn vanishes under four-fold symmetry
        let mut seen = 0;
        for s in 0..10_000 {
            let c = sample_classifier_pose_with(&g, SymmetryTag::FourFold, &regions, &th, s);
            let plain = sample_classifier_pose_with(&g, SymmetryTag::None, &regions, &th, s);
            if c.region == 1
                && c.quarter_turns == 1
                && crate::geometry::pose_errors(&c.pose, &g, SymmetryTag::FourFold).within(&th)
            {
                assert_eq!(c.label, 1);
                assert_eq!(plain.label, 0);
                seen += 1;
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn zero_update_at_gt_has_zero_loss() {
        let g = gt();
        let mut graph = Graph::<f64>::new();
        let raw = graph.input(Tensor::zeros(1, N_OUT));
        let t = vec![SlotTarget::Update { gt: g, points: loss_points(&cube(), 100, 1) }];
        let l = record_loss(&mut graph, raw, &[g], &t, LossMode::Sum, 1.0).unwrap();
        assert!(l.align < 1e-9 && l.cls == 0.0);
    }

    #[test]
    fn epoch_runs_three_steps_per_batch() {
        let scene = SceneConfig { width: 64, height: 48, focal: 55.0, ..SceneConfig::default() };
        let src = SyntheticSource::new(scene, NoiseConfig::default(), JitterConfig::default(), 3, 6).unwrap();
        let cfg =
            TrainConfig { batch_images: 4, input: InputConfig { n_bbox: 16, n_cad: 8 }, n_loss: 32, ..TrainConfig::default() };
        let mut net = AlignNet::<f32>::new(NetConfig::tiny(), 1).unwrap();
        let mut opt = OptimizerState::new(&net.params);
        let mut progress = TrainProgress::default();
        let mut rows = Vec::new();
        let m = train_epoch(&mut net, &mut opt, &src, &cfg, 0, 9, &mut progress, &mut |r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(m.batches, 2);
        assert_eq!(m.steps, 3 * m.batches);
        assert_eq!(rows.len(), m.steps);
        assert_eq!(opt.step, m.steps as u64);
        let total = m.update_examples + m.classifier_examples;
        assert_eq!(m.classifier_examples, total / 4);
        assert!(rows.iter().all(|r| r.l_align.is_finite() && r.l_cls.is_finite()));
    }
}
