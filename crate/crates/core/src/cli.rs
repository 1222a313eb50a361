//! Command-line front end: layered run configuration, datasets on disk,
//! training, evaluation reports and plot-ready exports.
//!
//! Configuration is resolved as preset defaults, then a JSON file
//! (`--config`), then flags. Flags also read `JOINTALIGN_CONFIG`,
//! `JOINTALIGN_SEED`, `JOINTALIGN_WORKERS` and `JOINTALIGN_PRESET`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::align_net::{AlignNet, NetConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::geometry::{pose_is_correct_with, Pose};
use crate::metrics::{
    ap_mesh, calibration_curve, mesh_f_score, nms_3d, per_image_accuracy, per_image_associate, per_scene_accuracy, roc_auc,
    Accuracy, ApEntry, ApReport, Calibration, CategoryTable, EvalConfig, GtInstance,
};
use crate::refine::{
    refine_scene, AlignmentPrediction, CategoryPrior, IdentityPredictor, OraclePredictor, Predictor, RefineConfig,
    RefinementTrace, SceneInput, N_TRACKS,
};
use crate::sparse_input::{assemble_batch, build_block, InputConfig};
use crate::synthscene::io::{decode_channels, encode_channels};
use crate::synthscene::{
    derive_seed, CadModel, Category, Detection, JitterConfig, ModelLibrary, NoiseConfig, Scene, SceneConfig, View,
};
use crate::training::{
    sample_classifier_pose_with, train_epoch, CsvLog, EpochMetrics, LossMode, StepLog, SyntheticSource, TrainConfig,
    TrainProgress, ViewSource,
};

pub const ENV_PREFIX: &str = "JOINTALIGN_";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    #[default]
    Desk,
}

/// Every tunable of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Thread cap; 0 uses every core.
    pub workers: usize,
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
    pub train_jitter: JitterConfig,
    pub eval_jitter: JitterConfig,
    /// Fresh scenes per epoch when training streams.
    pub scenes_per_epoch: usize,
    pub eval_scenes: usize,
    pub eval_seed: u64,
    /// Sampling sizes shared by training and refinement.
    pub input: InputConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> RunConfig {
        let (net, input, n_loss) = match p {
            Preset::Paper => (NetConfig::paper(), InputConfig::paper(), 1000),
            Preset::Desk => (NetConfig::desk(), InputConfig::desk(), 256),
        };
        RunConfig {
            preset: p,
            seed: 1,
            workers: 0,
            scene: SceneConfig::default(),
            noise: NoiseConfig::mild(),
            train_jitter: JitterConfig { bbox_jitter: 0.05, ..JitterConfig::default() },
            eval_jitter: JitterConfig::default(),
            scenes_per_epoch: 5000,
            eval_scenes: 200,
            eval_seed: 424_242,
            input,
            net,
            train: TrainConfig { n_loss, input, ..TrainConfig::default() },
            refine: RefineConfig { input, ..RefineConfig::default() },
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.refine.validate()?;
        self.eval.validate()?;
        if self.input.n_bbox == 0 || self.input.n_cad == 0 {
            return Err(Error::Config("input sizes must be positive".into()));
        }
        if self.train.input != self.input || self.refine.input != self.input {
            return Err(Error::Config("set sampling sizes in the top-level `input` section only".into()));
        }
        if self.scenes_per_epoch == 0 {
            return Err(Error::Config("scenes_per_epoch must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the whole configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Desk)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

/// Overrides given on the command line (or their environment variables).
#[derive(Clone, Debug, Default)]
pub struct FlagOverrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

/// A validated configuration with the layer every leaf came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

fn leaves(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(x, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Layers preset defaults, an optional JSON file and flags. Unknown keys and
/// invalid values are rejected.
pub fn resolve_config(file: Option<&Value>, flags: &FlagOverrides) -> Result<ResolvedConfig> {
    let file_preset = match file.and_then(|f| f.get("preset")) {
        Some(p) => Some(serde_json::from_value::<Preset>(p.clone())?),
        None => None,
    };
    let preset = flags.preset.or(file_preset).unwrap_or_default();
    let mut value = serde_json::to_value(RunConfig::preset(preset))?;
    let mut all = Vec::new();
    leaves(&value, "", &mut all);
    let mut provenance: BTreeMap<String, Source> = all.into_iter().map(|k| (k, Source::Default)).collect();
    if let Some(f) = file {
        if !f.is_object() {
            return Err(Error::Config("configuration file must hold a JSON object".into()));
        }
        for nested in ["train", "refine"] {
            if f.get(nested).and_then(|s| s.get("input")).is_some() {
                return Err(Error::Config(format!("`{nested}.input` is derived; set the top-level `input` section")));
            }
        }
        merge(&mut value, f);
        if let Some(input) = f.get("input") {
            merge(&mut value["train"]["input"], input);
            merge(&mut value["refine"]["input"], input);
        }
        let mut from_file = Vec::new();
        leaves(f, "", &mut from_file);
        for k in from_file {
            provenance.insert(k, Source::File);
        }
    }
    if flags.preset.is_some() {
        value["preset"] = serde_json::to_value(preset)?;
        provenance.insert("preset".into(), Source::Flag);
    }
    if let Some(s) = flags.seed {
        value["seed"] = s.into();
        provenance.insert("seed".into(), Source::Flag);
    }
    if let Some(w) = flags.workers {
        value["workers"] = w.into();
        provenance.insert("workers".into(), Source::Flag);
    }
    let config: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(ResolvedConfig { config, provenance })
}

pub fn load_config(path: Option<&Path>, flags: &FlagOverrides) -> Result<ResolvedConfig> {
    let file = match path {
        Some(p) => Some(serde_json::from_str::<Value>(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    resolve_config(file.as_ref(), flags)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub record: String,
    pub channels: String,
    pub clean: String,
}

/// Index of a materialized dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: u32,
    pub split: Split,
    pub count: usize,
    pub seed: u64,
    pub config_hash: String,
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
    pub jitter: JitterConfig,
    pub entries: Vec<ManifestEntry>,
}

/// Scene ground truth and detections of one dataset entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: Scene,
    pub detections: Vec<Detection>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `count` scenes, their noisy and clean channel blobs and a manifest.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, count: usize, split: Split) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out)?;
    if count == 0 {
        log::warn!("count is 0; writing an empty manifest");
    }
    let jitter = match split {
        Split::Train => cfg.train_jitter,
        Split::Eval => cfg.eval_jitter,
    };
    let seed = match split {
        Split::Train => cfg.seed,
        Split::Eval => cfg.eval_seed,
    };
    let src = SyntheticSource::new(cfg.scene.clone(), cfg.noise, jitter, seed, count)?;
    let entries = (0..count)
        .into_par_iter()
        .map(|i| {
            let v = src.view(i)?;
            let stem = format!("scene_{i:05}");
            let e = ManifestEntry {
                index: i,
                seed: v.scene.seed,
                record: format!("{stem}.json"),
                channels: format!("{stem}.maps"),
                clean: format!("{stem}.clean"),
            };
            let rec = SceneRecord { scene: v.scene, detections: v.detections };
            std::fs::write(out.join(&e.record), serde_json::to_vec(&rec)?)?;
            std::fs::write(out.join(&e.channels), encode_channels(&v.maps))?;
            std::fs::write(out.join(&e.clean), encode_channels(&v.clean))?;
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        format: 1,
        split,
        count,
        seed,
        config_hash: cfg.hash()?,
        scene: cfg.scene.clone(),
        noise: cfg.noise,
        jitter,
        entries,
    };
    std::fs::write(out.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Views read back from a dataset written by [`cmd_gen_data`].
pub struct DatasetSource {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    library: ModelLibrary,
}

impl DatasetSource {
    pub fn open(root: &Path) -> Result<DatasetSource> {
        let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(root.join(MANIFEST))?)
            .map_err(|e| Error::Dataset(format!("bad manifest in {}: {e}", root.display())))?;
        if manifest.entries.len() != manifest.count {
            return Err(Error::Dataset(format!(
                "manifest lists {} entries for count {}",
                manifest.entries.len(),
                manifest.count
            )));
        }
        manifest.scene.validate()?;
        let library = ModelLibrary::build(&manifest.scene)?;
        Ok(DatasetSource { root: root.to_path_buf(), manifest, library })
    }
}

impl ViewSource for DatasetSource {
    fn len(&self) -> usize {
        self.manifest.count
    }

    fn view(&self, index: usize) -> Result<View> {
        let e = self.manifest.entries.get(index).ok_or_else(|| Error::Dataset(format!("no entry {index}")))?;
        let rec: SceneRecord = serde_json::from_slice(&std::fs::read(self.root.join(&e.record))?)?;
        let maps = decode_channels(&std::fs::read(self.root.join(&e.channels))?)?;
        let clean = decode_channels(&std::fs::read(self.root.join(&e.clean))?)?;
        Ok(View { scene: rec.scene, clean, maps, detections: rec.detections })
    }

    fn library(&self) -> &ModelLibrary {
        &self.library
    }

    fn scene_config(&self) -> &SceneConfig {
        &self.manifest.scene
    }
}

/// Where training views come from.
pub enum TrainData<'a> {
    /// Fresh scenes every epoch, regenerated from the run seed.
    Stream,
    Dataset(&'a DatasetSource),
}

/// Persisted between runs next to the checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunProgress {
    pub epochs_done: usize,
    pub progress: TrainProgress,
}

pub const CHECKPOINT: &str = "model.ckpt";
pub const PROGRESS: &str = "progress.json";
pub const TRAIN_LOG: &str = "train_log.csv";
/// Present while a run is in flight or after it failed.
pub const INCOMPLETE: &str = "INCOMPLETE";

/// Trains for `cfg.train.epochs` epochs, checkpointing after each one. A
/// failing epoch leaves the previous checkpoint untouched and the
/// `INCOMPLETE` marker in place.
pub fn cmd_train(
    cfg: &RunConfig,
    data: TrainData,
    out: &Path,
    resume: bool,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<AlignNet<f32>> {
    std::fs::create_dir_all(out)?;
    let ckpt = out.join(CHECKPOINT);
    std::fs::write(out.join(INCOMPLETE), b"training did not finish\n")?;
    let (mut net, mut opt, mut run) = if resume && ckpt.exists() {
        let (net, opt) = AlignNet::<f32>::load(&ckpt)?;
        if net.config != cfg.net {
            return Err(Error::Config("checkpoint network differs from the configured one".into()));
        }
        let run: RunProgress = serde_json::from_str(&std::fs::read_to_string(out.join(PROGRESS))?)?;
        let opt = opt.unwrap_or_else(|| OptimizerState::new(&net.params));
        (net, opt, run)
    } else {
        let net = AlignNet::<f32>::new(cfg.net.clone(), cfg.seed)?;
        let opt = OptimizerState::new(&net.params);
        (net, opt, RunProgress::default())
    };
    let mut csv = if resume { CsvLog::append(&out.join(TRAIN_LOG))? } else { CsvLog::create(&out.join(TRAIN_LOG))? };
    for epoch in run.epochs_done..cfg.train.epochs {
        let streamed;
        let src: &dyn ViewSource = match data {
            TrainData::Stream => {
                let seed = derive_seed(cfg.seed, 1_000_000 + epoch as u64);
                streamed = SyntheticSource::new(cfg.scene.clone(), cfg.noise, cfg.train_jitter, seed, cfg.scenes_per_epoch)?;
                &streamed
            }
            TrainData::Dataset(d) => d,
        };
        let m = train_epoch(&mut net, &mut opt, src, &cfg.train, epoch, cfg.seed, &mut run.progress, &mut |row: &StepLog| {
            csv.write(row)
        })?;
        on_epoch(&m);
        run.epochs_done = epoch + 1;
        net.save(&ckpt, Some(&opt))?;
        std::fs::write(out.join(PROGRESS), serde_json::to_string_pretty(&run)?)?;
    }
    std::fs::remove_file(out.join(INCOMPLETE))?;
    Ok(net)
}

/// What produces pose updates during refinement.
#[allow(clippy::large_enum_variant)]
pub enum PredictorChoice {
    Network(AlignNet<f32>),
    /// Jumps to the ground truth of each detection's object.
    Oracle {
        n_mul: usize,
    },
    Identity {
        n_mul: usize,
    },
}

impl PredictorChoice {
    pub fn name(&self) -> &'static str {
        match self {
            PredictorChoice::Network(_) => "network",
            PredictorChoice::Oracle { .. } => "oracle",
            PredictorChoice::Identity { .. } => "identity",
        }
    }

    pub fn with_scene<R>(&self, scene: &Scene, f: impl FnOnce(&dyn Predictor) -> R) -> R {
        match self {
            PredictorChoice::Network(net) => f(net),
            PredictorChoice::Oracle { n_mul } => f(&OraclePredictor::new(scene.objects.iter().map(|o| o.pose).collect(), *n_mul)),
            PredictorChoice::Identity { n_mul } => f(&IdentityPredictor::new(*n_mul)),
        }
    }
}

/// Refinement of one view together with what evaluation needs from it.
pub struct RefinedView {
    pub index: usize,
    pub view: View,
    pub predictions: Vec<AlignmentPrediction>,
    pub trace: RefinementTrace,
    pub seconds: f64,
}

pub fn refine_view(
    predictor: &PredictorChoice,
    src: &dyn ViewSource,
    index: usize,
    refine: &RefineConfig,
    seed: u64,
) -> Result<RefinedView> {
    let view = src.view(index)?;
    let lib = src.library();
    let models = view
        .detections
        .iter()
        .map(|d| {
            let id = view.scene.objects.get(d.object_id).map(|o| o.model_id);
            id.and_then(|id| lib.get(id))
                .ok_or_else(|| Error::Evaluation(format!("no model for detection of object {}", d.object_id)))
        })
        .collect::<Result<Vec<&CadModel>>>()?;
    let priors: Vec<CategoryPrior> = view
        .detections
        .iter()
        .zip(&models)
        .map(|(d, m)| CategoryPrior::from_config(src.scene_config(), d.category, m, refine))
        .collect();
    let input = SceneInput {
        scene: index as u64,
        camera: view.scene.camera,
        maps: &view.maps,
        detections: &view.detections,
        models: &models,
        priors: &priors,
    };
    let start = Instant::now();
    let (predictions, trace) =
        predictor.with_scene(&view.scene, |p| refine_scene(p, &input, refine, derive_seed(seed, index as u64)))?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(RefinedView { index, view, predictions, trace, seconds })
}

/// Evaluation summary in the layout of a per-category results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    pub scenes: usize,
    pub detections: usize,
    pub skipped_detections: usize,
    /// Per-image accuracy of the σ-selected pose after 0..=iterations updates.
    pub per_image_by_iteration: Vec<CategoryTable>,
    /// Per-image accuracy of each fixed rotation initialization after all updates.
    pub per_image_fixed_init: Vec<CategoryTable>,
    /// Accuracy against all scene objects after 3D NMS.
    pub per_scene: CategoryTable,
    pub ap: ApReport,
    /// σ against correctness over every track's final pose.
    pub calibration: Calibration,
    pub selection_auc: Option<f64>,
    pub forward_passes: u64,
    pub refine_seconds: f64,
    pub per_pass_ms: f64,
}

impl EvalReport {
    pub fn final_accuracy(&self) -> f64 {
        self.per_image_by_iteration.last().map_or(0.0, |t| t.instance_avg)
    }
}

fn with_pose(p: &AlignmentPrediction, pose: Pose, sigma: f64) -> AlignmentPrediction {
    AlignmentPrediction { pose, sigma, ..p.clone() }
}

/// Refines every view of `src` and computes all metrics.
pub fn evaluate(
    predictor: &PredictorChoice,
    src: &dyn ViewSource,
    refine: &RefineConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let refined =
        (0..src.len()).into_par_iter().map(|i| refine_view(predictor, src, i, refine, seed)).collect::<Result<Vec<_>>>()?;
    let iters = refine.iterations;
    let mut by_iter = vec![Accuracy::default(); iters + 1];
    let mut fixed = vec![Accuracy::default(); N_TRACKS];
    let mut per_scene = Accuracy::default();
    let mut ap_entries = Vec::new();
    let mut gt_counts: BTreeMap<Category, usize> = BTreeMap::new();
    let mut calib = Vec::new();
    let (mut detections, mut skipped, mut passes, mut seconds) = (0, 0, 0u64, 0.0);
    let lib = src.library();
    for r in &refined {
        let scene = &r.view.scene;
        detections += r.view.detections.len();
        skipped += r.trace.skipped.len();
        passes += r.trace.forward_passes;
        seconds += r.seconds;
        for (k, acc) in by_iter.iter_mut().enumerate() {
            let preds: Vec<AlignmentPrediction> = r
                .predictions
                .iter()
                .zip(&r.trace.detections)
                .map(|(p, d)| {
                    let (pose, s) = d.pose_at(k);
                    with_pose(p, pose, s)
                })
                .collect();
            let assoc = per_image_associate(&preds, scene, lib, &r.view.maps, eval)?;
            acc.merge(&per_image_accuracy(&preds, scene, &assoc, eval));
            if k == iters {
                for &(i, j, _) in &assoc.matches {
                    let g = &scene.objects[j];
                    let f = mesh_f_score(lib.model(preds[i].model_id), &preds[i].pose, lib.model(g.model_id), &g.pose, eval)?;
                    ap_entries.push(ApEntry { category: preds[i].category, confidence: preds[i].sigma, f: Some(f) });
                }
                for &i in &assoc.unmatched_preds {
                    ap_entries.push(ApEntry { category: preds[i].category, confidence: preds[i].sigma, f: None });
                }
                for j in assoc.matches.iter().map(|m| m.1).chain(assoc.unmatched_gts.iter().copied()) {
                    *gt_counts.entry(scene.objects[j].category).or_default() += 1;
                }
            }
        }
        for (t, acc) in fixed.iter_mut().enumerate() {
            let preds: Vec<AlignmentPrediction> = r
                .predictions
                .iter()
                .zip(&r.trace.detections)
                .map(|(p, d)| with_pose(p, d.tracks[t].poses[iters], d.tracks[t].sigmas[iters]))
                .collect();
            let assoc = per_image_associate(&preds, scene, lib, &r.view.maps, eval)?;
            acc.merge(&per_image_accuracy(&preds, scene, &assoc, eval));
        }
        for (p, d) in r.predictions.iter().zip(&r.trace.detections) {
            if let Some(o) = scene.objects.get(p.object_id) {
                for t in &d.tracks {
                    let ok = pose_is_correct_with(&t.poses[iters], &o.pose, o.symmetry, &eval.thresholds);
                    calib.push((t.sigmas[iters], ok));
                }
            }
        }
        let kept = nms_3d(&r.predictions, eval.nms_radius, eval.nms_rank);
        per_scene.merge(&per_scene_accuracy(&kept, &GtInstance::from_scene(scene), eval));
    }
    let (scores, labels): (Vec<f64>, Vec<bool>) = calib.iter().copied().unzip();
    Ok(EvalReport {
        predictor: predictor.name().into(),
        scenes: refined.len(),
        detections,
        skipped_detections: skipped,
        per_image_by_iteration: by_iter.iter().map(Accuracy::table).collect(),
        per_image_fixed_init: fixed.iter().map(Accuracy::table).collect(),
        per_scene: per_scene.table(),
        ap: ap_mesh(&ap_entries, &gt_counts),
        calibration: calibration_curve(&calib, eval.calibration_bins),
        selection_auc: roc_auc(&scores, &labels),
        forward_passes: passes,
        refine_seconds: seconds,
        per_pass_ms: if passes == 0 { 0.0 } else { 1e3 * seconds / passes as f64 },
    })
}

/// σ and correctness label for classifier-region poses drawn around every
/// detected object, `per_detection` draws each.
pub fn classifier_scores(
    net: &AlignNet<f32>,
    src: &dyn ViewSource,
    train: &TrainConfig,
    per_detection: usize,
    seed: u64,
) -> Result<Vec<(f64, bool)>> {
    let per_view = (0..src.len())
        .into_par_iter()
        .map(|i| {
            let v = src.view(i)?;
            let mut blocks = Vec::new();
            let mut labels = Vec::new();
            for (k, d) in v.detections.iter().enumerate() {
                let o = &v.scene.objects[d.object_id];
                let model = src.library().model(o.model_id);
                for r in 0..per_detection {
                    let s = derive_seed(seed, ((i as u64) << 24) | ((k as u64) << 12) | r as u64);
                    let c = sample_classifier_pose_with(&o.pose, o.symmetry, &train.regions, &train.thresholds, s);
                    blocks.push(build_block(&v.maps, d, model, &c.pose, &v.scene.camera, &train.input, s)?);
                    labels.push(c.label == 1);
                }
            }
            let mut out = Vec::with_capacity(labels.len());
            for b in assemble_batch(blocks, net.config.n_mul) {
                for d in Predictor::predict(net, &b)? {
                    out.push(d.sigma);
                }
            }
            Ok(out.into_iter().zip(labels).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_view.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub samples: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub calibration: Calibration,
}

pub fn calib_report(samples: &[(f64, bool)], bins: usize) -> CalibReport {
    let (s, l): (Vec<f64>, Vec<bool>) = samples.iter().copied().unzip();
    CalibReport {
        samples: samples.len(),
        positives: l.iter().filter(|&&x| x).count(),
        auc: roc_auc(&s, &l),
        calibration: calibration_curve(samples, bins),
    }
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per category plus the class and instance averages.
pub fn write_table_csv(path: &Path, table: &CategoryTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["category", "accuracy"])?;
    for (c, a) in table.categories.iter().zip(&table.accuracy) {
        w.write_record([c.as_str(), &format!("{a:.6}")])?;
    }
    w.write_record(["class_avg", &format!("{:.6}", table.class_avg)])?;
    w.write_record(["instance_avg", &format!("{:.6}", table.instance_avg)])?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct IterationRow {
    iteration: usize,
    class_avg: f64,
    instance_avg: f64,
}

#[derive(Serialize)]
struct CalibrationRow {
    bin: usize,
    mean_confidence: f64,
    accuracy: f64,
    count: usize,
}

fn calibration_rows(c: &Calibration) -> Vec<CalibrationRow> {
    c.bins
        .iter()
        .enumerate()
        .map(|(bin, b)| CalibrationRow { bin, mean_confidence: b.mean_confidence, accuracy: b.accuracy, count: b.count })
        .collect()
}

pub const REPORT: &str = "report.json";

pub fn write_eval_report(out: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(REPORT), serde_json::to_string_pretty(report)?)?;
    if let Some(last) = report.per_image_by_iteration.last() {
        write_table_csv(&out.join("per_image.csv"), last)?;
    }
    write_table_csv(&out.join("per_scene.csv"), &report.per_scene)?;
    Ok(())
}

#[derive(Clone, Debug, Deserialize)]
struct LogRow {
    step: u64,
    #[serde(rename = "L_align")]
    l_align: f64,
    #[serde(rename = "L_cls")]
    l_cls: f64,
}

#[derive(Serialize)]
struct LossRow {
    step: u64,
    l_align: f64,
    l_cls: f64,
    l_align_avg: f64,
    l_cls_avg: f64,
}

/// Trailing moving-average window of the exported loss curves.
pub const LOSS_WINDOW: usize = 50;

/// Writes plot-ready CSVs from an evaluation report and, when given, a
/// training log: accuracy per iteration, calibration bins, loss curves.
pub fn cmd_plots(report: &Path, train_log: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(report)
        .map_err(|e| Error::Evaluation(format!("cannot read report {}: {e}", report.display())))?;
    let r: EvalReport = serde_json::from_str(&text)?;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let rows: Vec<IterationRow> = r
        .per_image_by_iteration
        .iter()
        .enumerate()
        .map(|(iteration, t)| IterationRow { iteration, class_avg: t.class_avg, instance_avg: t.instance_avg })
        .collect();
    let p = out.join("accuracy_vs_iteration.csv");
    write_csv(&p, &rows)?;
    written.push(p);
    let p = out.join("calibration.csv");
    write_csv(&p, &calibration_rows(&r.calibration))?;
    written.push(p);
    if let Some(log) = train_log {
        let mut rdr = csv::Reader::from_path(log)?;
        let rows: Vec<LogRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        let mut out_rows = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let w = &rows[i.saturating_sub(LOSS_WINDOW - 1)..=i];
            out_rows.push(LossRow {
                step: row.step,
                l_align: row.l_align,
                l_cls: row.l_cls,
                l_align_avg: w.iter().map(|x| x.l_align).sum::<f64>() / w.len() as f64,
                l_cls_avg: w.iter().map(|x| x.l_cls).sum::<f64>() / w.len() as f64,
            });
        }
        let p = out.join("loss_curve.csv");
        write_csv(&p, &out_rows)?;
        written.push(p);
    }
    Ok(written)
}

/// Forward-pass accounting and wallclock of refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub predictor: String,
    pub scenes: usize,
    pub detections: usize,
    pub forward_passes: u64,
    pub passes_per_scene: Vec<u64>,
    pub seconds: f64,
    pub per_pass_ms: f64,
}

pub fn cmd_bench(predictor: &PredictorChoice, src: &dyn ViewSource, refine: &RefineConfig, seed: u64) -> Result<BenchReport> {
    let mut r = BenchReport {
        predictor: predictor.name().into(),
        scenes: src.len(),
        detections: 0,
        forward_passes: 0,
        passes_per_scene: Vec::new(),
        seconds: 0.0,
        per_pass_ms: 0.0,
    };
    for i in 0..src.len() {
        let v = refine_view(predictor, src, i, refine, seed)?;
        r.detections += v.view.detections.len();
        r.forward_passes += v.trace.forward_passes;
        r.passes_per_scene.push(v.trace.forward_passes);
        r.seconds += v.seconds;
    }
    r.per_pass_ms = if r.forward_passes == 0 { 0.0 } else { 1e3 * r.seconds / r.forward_passes as f64 };
    Ok(r)
}

#[derive(Parser, Debug)]
#[command(name = "jointalign", version, about = "Joint multi-object CAD alignment: data, training, refinement, evaluation")]
pub struct Cli {
    /// JSON configuration layered over the preset.
    #[arg(long, global = true, env = "JOINTALIGN_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "JOINTALIGN_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "JOINTALIGN_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_enum, env = "JOINTALIGN_PRESET")]
    pub preset: Option<Preset>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct PredictorArgs {
    /// Trained checkpoint; required unless an oracle or identity predictor is chosen.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Replace the network by ground-truth updates.
    #[arg(long, conflicts_with = "identity_predictor")]
    pub oracle: bool,
    /// Replace the network by zero updates.
    #[arg(long)]
    pub identity_predictor: bool,
}

#[derive(clap::Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset written by `gen-data`; otherwise held-out scenes are generated from `eval_seed`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of generated scenes (overrides `eval_scenes`).
    #[arg(long)]
    pub scenes: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render scenes to disk with a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, value_enum, default_value = "eval")]
        split: Split,
    },
    /// Train the alignment network.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Dataset written by `gen-data`.
        #[arg(long, conflicts_with = "stream")]
        data: Option<PathBuf>,
        /// Generate fresh scenes for every epoch instead of reading a dataset.
        #[arg(long)]
        stream: bool,
        #[arg(long)]
        resume: bool,
    },
    /// Refine and score held-out scenes; writes report.json and CSV tables.
    Eval {
        #[command(flatten)]
        predictor: PredictorArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine scenes and write predictions as JSON lines.
    Refine {
        #[command(flatten)]
        predictor: PredictorArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classification-score quality on classifier-region samples.
    Calib {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 4)]
        per_detection: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot-ready CSVs from an evaluation report and a training log.
    Plots {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward passes per scene and wallclock per pass.
    Bench {
        #[command(flatten)]
        predictor: PredictorArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Print the resolved configuration with the source of every value.
    Config,
}

fn predictor_from(args: &PredictorArgs, cfg: &RunConfig) -> Result<PredictorChoice> {
    if args.oracle {
        return Ok(PredictorChoice::Oracle { n_mul: cfg.net.n_mul });
    }
    if args.identity_predictor {
        return Ok(PredictorChoice::Identity { n_mul: cfg.net.n_mul });
    }
    let path = args.checkpoint.as_ref().ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let (net, _) = AlignNet::<f32>::load(path)?;
    if net.config != cfg.net {
        return Err(Error::Config(format!("checkpoint {} does not match the configured network", path.display())));
    }
    Ok(PredictorChoice::Network(net))
}

fn source_from(args: &DataArgs, cfg: &RunConfig) -> Result<Box<dyn ViewSource>> {
    match &args.data {
        Some(d) => Ok(Box::new(DatasetSource::open(d)?)),
        None => Ok(Box::new(SyntheticSource::new(
            cfg.scene.clone(),
            cfg.noise,
            cfg.eval_jitter,
            cfg.eval_seed,
            args.scenes.unwrap_or(cfg.eval_scenes),
        )?)),
    }
}

fn print_json<S: Serialize>(v: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Entry point of the `jointalign` binary.
pub fn run(cli: Cli) -> Result<()> {
    let flags = FlagOverrides { preset: cli.preset, seed: cli.seed, workers: cli.workers };
    let resolved = load_config(cli.config.as_deref(), &flags)?;
    let cfg = &resolved.config;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global().map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::GenData { out, count, split } => {
            let m = cmd_gen_data(cfg, &out, count, split)?;
            log::info!("wrote {} scenes to {} (config {})", m.count, out.display(), m.config_hash);
        }
        Command::Train { out, data, stream, resume } => {
            let dataset = match (&data, stream) {
                (Some(d), _) => Some(DatasetSource::open(d)?),
                (None, true) => None,
                (None, false) => return Err(Error::Config("train needs --data DIR or --stream".into())),
            };
            let data = dataset.as_ref().map_or(TrainData::Stream, TrainData::Dataset);
            if cfg.train.loss_mode == LossMode::Mean {
                log::info!("alignment loss averaged over points");
            }
            cmd_train(cfg, data, &out, resume, &mut |m| {
                log::info!(
                    "epoch {}: L_align {:.3} L_cls {:.4} steps {} skipped {} {:.1} img/s",
                    m.epoch,
                    m.mean_align,
                    m.mean_cls,
                    m.steps,
                    m.skipped_steps,
                    m.images_per_sec
                )
            })?;
        }
        Command::Eval { predictor, data, out } => {
            let p = predictor_from(&predictor, cfg)?;
            let src = source_from(&data, cfg)?;
            let report = evaluate(&p, src.as_ref(), &cfg.refine, &cfg.eval, cfg.seed)?;
            write_eval_report(&out, &report)?;
            for (k, t) in report.per_image_by_iteration.iter().enumerate() {
                log::info!("iteration {k}: instance {:.3} class {:.3}", t.instance_avg, t.class_avg);
            }
        }
        Command::Refine { predictor, data, out } => {
            let p = predictor_from(&predictor, cfg)?;
            let src = source_from(&data, cfg)?;
            let mut preds = Vec::new();
            for i in 0..src.len() {
                preds.extend(refine_view(&p, src.as_ref(), i, &cfg.refine, cfg.seed)?.predictions);
            }
            crate::refine::write_predictions_jsonl(&out, &preds)?;
        }
        Command::Calib { checkpoint, data, per_detection, out } => {
            let (net, _) = AlignNet::<f32>::load(&checkpoint)?;
            let src = source_from(&data, cfg)?;
            let samples = classifier_scores(&net, src.as_ref(), &cfg.train, per_detection, cfg.seed)?;
            let r = calib_report(&samples, cfg.eval.calibration_bins);
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("calib.json"), serde_json::to_string_pretty(&r)?)?;
            write_csv(&out.join("calibration_classifier.csv"), &calibration_rows(&r.calibration))?;
            print_json(&r)?;
        }
        Command::Plots { report, log, out } => {
            for p in cmd_plots(&report, log.as_deref(), &out)? {
                println!("{}", p.display());
            }
        }
        Command::Bench { predictor, data } => {
            let p = predictor_from(&predictor, cfg)?;
            let src = source_from(&data, cfg)?;
            print_json(&cmd_bench(&p, src.as_ref(), &cfg.refine, cfg.seed)?)?;
        }
        Command::Config => {
            print_json(&resolved)?;
            eprintln!("config hash {}", resolved.config.hash()?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn provenance_layers() {
        let file = json!({"train": {"epochs": 2}, "input": {"n_bbox": 50, "n_cad": 20}});
        let r = resolve_config(Some(&file), &FlagOverrides { seed: Some(9), ..Default::default() }).unwrap();
        assert_eq!(r.config.train.epochs, 2);
        assert_eq!(r.config.seed, 9);
        assert_eq!(r.config.refine.input.n_bbox, 50);
        assert_eq!(r.provenance["train.epochs"], Source::File);
        assert_eq!(r.provenance["seed"], Source::Flag);
        assert_eq!(r.provenance["net.n_mul"], Source::Default);
    }

    #[test]
    fn unknown_keys_rejected() {
        let file = json!({"train": {"epochz": 2}});
        assert!(resolve_config(Some(&file), &FlagOverrides::default()).is_err());
        let nested = json!({"train": {"input": {"n_bbox": 5, "n_cad": 5}}});
        assert!(resolve_config(Some(&nested), &FlagOverrides::default()).is_err());
    }

    #[test]
    fn paper_preset() {
        let r = resolve_config(None, &FlagOverrides { preset: Some(Preset::Paper), ..Default::default() }).unwrap();
        assert_eq!((r.config.net.n_mul, r.config.net.n_latent, r.config.net.c_latent), (5, 80, 256));
        assert_eq!(r.config.train.n_loss, 1000);
    }

    #[test]
    fn hash_tracks_every_leaf() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.eval.rho = 0.25;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
