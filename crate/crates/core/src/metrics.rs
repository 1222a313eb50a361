//! Per-scene and per-image alignment accuracy, AP over mesh F-scores,
//! calibration and ranking quality of the classification score.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_errors, Camera, Pose, SymmetryTag, Thresholds, Vec3};
use crate::refine::AlignmentPrediction;
use crate::synthscene::{rasterize_objects, BBox, CadModel, Category, ChannelMaps, ModelLibrary, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankBy {
    Sigma,
    Detector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds: Thresholds,
    pub nms_radius: f64,
    pub nms_rank: RankBy,
    /// Matches need an IoU strictly above this value.
    pub iou_match_min: f64,
    pub visibility_min_fraction: f64,
    pub visibility_depth_tol: f64,
    /// F-score distance threshold in the rescaled frame (GT longest side 10).
    pub rho: f64,
    pub n_surface_samples: usize,
    pub surface_seed: u64,
    pub calibration_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: Thresholds::default(),
            nms_radius: 0.3,
            nms_rank: RankBy::Sigma,
            iou_match_min: 0.0,
            visibility_min_fraction: 0.5,
            visibility_depth_tol: 0.30,
            rho: 0.5,
            n_surface_samples: 2048,
            surface_seed: 17,
            calibration_bins: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.nms_radius,
            self.visibility_depth_tol,
            self.rho,
            self.thresholds.t_max,
            self.thresholds.r_max,
            self.thresholds.s_max,
        ];
        if positive.iter().any(|v| v.is_nan() || *v <= 0.0)
            || !(0.0..=1.0).contains(&self.visibility_min_fraction)
            || self.n_surface_samples == 0
            || self.calibration_bins == 0
        {
            return Err(Error::Config(format!("invalid evaluation config: {self:?}")));
        }
        Ok(())
    }
}

fn rank_key(p: &AlignmentPrediction, by: RankBy) -> f64 {
    match by {
        RankBy::Sigma => p.sigma,
        RankBy::Detector => p.detector_confidence,
    }
}

/// Indices sorted by descending key; equal keys keep input order.
fn ranked(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
    idx
}

/// Greedy 3D non-maximum suppression: in descending score order, keep a
/// prediction unless a kept one of the same category has its center within
/// `radius`.
pub fn nms_3d(preds: &[AlignmentPrediction], radius: f64, by: RankBy) -> Vec<AlignmentPrediction> {
    let keys: Vec<f64> = preds.iter().map(|p| rank_key(p, by)).collect();
    let mut kept: Vec<&AlignmentPrediction> = Vec::new();
    for i in ranked(&keys) {
        let p = &preds[i];
        let t = p.pose.translation();
        if kept.iter().all(|k| k.category != p.category || (k.pose.translation() - t).norm() >= radius) {
            kept.push(p);
        }
    }
    kept.into_iter().cloned().collect()
}

/// A ground-truth object as seen by the metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub object_id: usize,
    pub category: Category,
    pub model_id: u32,
    pub pose: Pose,
    pub symmetry: SymmetryTag,
}

impl GtInstance {
    pub fn from_scene(scene: &Scene) -> Vec<GtInstance> {
        scene
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| GtInstance {
                object_id: i,
                category: o.category,
                model_id: o.model_id,
                pose: o.pose,
                symmetry: o.symmetry,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Count {
    pub correct: usize,
    pub total: usize,
}

impl Count {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn add(&mut self, o: Count) {
        self.correct += o.correct;
        self.total += o.total;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub per_category: BTreeMap<Category, Count>,
    pub instances: Count,
}

impl Accuracy {
    pub fn merge(&mut self, o: &Accuracy) {
        for (c, n) in &o.per_category {
            self.per_category.entry(*c).or_default().add(*n);
        }
        self.instances.add(o.instances);
    }

    /// Mean of the per-category accuracies.
    pub fn class_average(&self) -> f64 {
        if self.per_category.is_empty() {
            return 0.0;
        }
        self.per_category.values().map(Count::rate).sum::<f64>() / self.per_category.len() as f64
    }

    pub fn table(&self) -> CategoryTable {
        CategoryTable {
            categories: self.per_category.keys().map(|c| c.name().to_string()).collect(),
            accuracy: self.per_category.values().map(Count::rate).collect(),
            class_avg: self.class_average(),
            instance_avg: self.instances.rate(),
        }
    }
}

/// Per-category accuracies with class and instance averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryTable {
    pub categories: Vec<String>,
    pub accuracy: Vec<f64>,
    pub class_avg: f64,
    pub instance_avg: f64,
}

fn valid_match(p: &AlignmentPrediction, g: &GtInstance, th: &Thresholds) -> bool {
    p.category == g.category && pose_errors(&p.pose, &g.pose, g.symmetry).within(th)
}

/// Greedy matching in descending confidence: each prediction takes the
/// closest (by center distance, ties to the lowest index) unmatched GT of its
/// category within all thresholds. Accuracy = matched GTs / all GTs.
pub fn per_scene_accuracy(preds: &[AlignmentPrediction], gts: &[GtInstance], cfg: &EvalConfig) -> Accuracy {
    let keys: Vec<f64> = preds.iter().map(|p| rank_key(p, cfg.nms_rank)).collect();
    let mut taken = vec![false; gts.len()];
    for i in ranked(&keys) {
        let p = &preds[i];
        let t = p.pose.translation();
        let best = (0..gts.len()).filter(|&j| !taken[j] && valid_match(p, &gts[j], &cfg.thresholds)).min_by(|&a, &b| {
            let da = (gts[a].pose.translation() - t).norm();
            let db = (gts[b].pose.translation() - t).norm();
            da.total_cmp(&db).then(a.cmp(&b))
        });
        if let Some(j) = best {
            taken[j] = true;
        }
    }
    let mut acc = Accuracy::default();
    for (g, &hit) in gts.iter().zip(&taken) {
        let c = acc.per_category.entry(g.category).or_default();
        c.total += 1;
        c.correct += hit as usize;
        acc.instances.total += 1;
        acc.instances.correct += hit as usize;
    }
    acc
}

/// Exhaustive reference for [`per_scene_accuracy`]: enumerates every
/// injective assignment of predictions to valid GTs and keeps the one that is
/// lexicographically best when predictions are visited by confidence and each
/// prefers nearer GTs. Exponential; fixtures only.
pub fn per_scene_accuracy_reference(preds: &[AlignmentPrediction], gts: &[GtInstance], cfg: &EvalConfig) -> Accuracy {
    let keys: Vec<f64> = preds.iter().map(|p| rank_key(p, cfg.nms_rank)).collect();
    let order = ranked(&keys);
    // preference rank of every valid GT for each prediction, in visiting order
    let prefs: Vec<Vec<usize>> = order
        .iter()
        .map(|&i| {
            let p = &preds[i];
            let t = p.pose.translation();
            let mut c: Vec<usize> = (0..gts.len()).filter(|&j| valid_match(p, &gts[j], &cfg.thresholds)).collect();
            c.sort_by(|&a, &b| {
                (gts[a].pose.translation() - t).norm().total_cmp(&(gts[b].pose.translation() - t).norm()).then(a.cmp(&b))
            });
            c
        })
        .collect();
    fn search(
        k: usize,
        prefs: &[Vec<usize>],
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        best: &mut Option<(Vec<usize>, Vec<bool>)>,
    ) {
        if k == prefs.len() {
            if best.as_ref().is_none_or(|(b, _)| *cur < *b) {
                *best = Some((cur.clone(), used.clone()));
            }
            return;
        }
        for (rank, &j) in prefs[k].iter().enumerate() {
            if !used[j] {
                used[j] = true;
                cur.push(rank);
                search(k + 1, prefs, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
        cur.push(usize::MAX);
        search(k + 1, prefs, used, cur, best);
        cur.pop();
    }
    let mut best = None;
    search(0, &prefs, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);
    let used = best.map(|(_, u)| u).unwrap_or_else(|| vec![false; gts.len()]);
    let mut acc = Accuracy::default();
    for (g, &hit) in gts.iter().zip(&used) {
        let c = acc.per_category.entry(g.category).or_default();
        c.total += 1;
        c.correct += hit as usize;
        acc.instances.total += 1;
        acc.instances.correct += hit as usize;
    }
    acc
}

/// Image-space box of a posed model's projected vertices, clipped to the
/// image; `None` when any vertex is behind the camera or nothing is in view.
pub fn projected_bbox(model: &CadModel, pose: &Pose, camera: &Camera) -> Option<BBox> {
    let mut b = BBox { x0: f64::INFINITY, y0: f64::INFINITY, x1: f64::NEG_INFINITY, y1: f64::NEG_INFINITY };
    for v in &model.vertices {
        let (u, w, _) = camera.project(&pose.transform_point(v)).ok()?;
        b.x0 = b.x0.min(u);
        b.y0 = b.y0.min(w);
        b.x1 = b.x1.max(u);
        b.y1 = b.y1.max(w);
    }
    let c = b.clipped(camera);
    (c.x1 > c.x0 && c.y1 > c.y0).then_some(c)
}

/// Why a GT is left out of the per-image denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    CenterOutOfView,
    Occluded,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Association {
    /// `(prediction index, GT index, IoU)`
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    /// Visible GTs no prediction was matched to.
    pub unmatched_gts: Vec<usize>,
    pub excluded_gts: Vec<(usize, Exclusion)>,
}

impl Association {
    pub fn visible_count(&self) -> usize {
        self.matches.len() + self.unmatched_gts.len()
    }
}

/// Share of an object's own rendered pixels whose depth agrees with the
/// scene depth map within `tol`.
pub fn visible_fraction(scene: &Scene, library: &ModelLibrary, depth: &[f32], object: usize, tol: f64) -> f64 {
    let alone = rasterize_objects(scene, library, &[object]);
    let (mut own, mut agree) = (0usize, 0usize);
    for (k, &id) in alone.instance.iter().enumerate() {
        if id == object as i32 {
            own += 1;
            if ((alone.depth[k] - depth[k]) as f64).abs() <= tol {
                agree += 1;
            }
        }
    }
    if own == 0 {
        0.0
    } else {
        agree as f64 / own as f64
    }
}

/// Associates predictions with visible GTs of the same category by maximum
/// 2D box IoU; higher-confidence predictions claim GTs first.
pub fn per_image_associate(
    preds: &[AlignmentPrediction],
    scene: &Scene,
    library: &ModelLibrary,
    maps: &ChannelMaps,
    cfg: &EvalConfig,
) -> Result<Association> {
    let cam = &scene.camera;
    let gts = GtInstance::from_scene(scene);
    let mut out = Association::default();
    let mut gt_boxes: Vec<Option<BBox>> = vec![None; gts.len()];
    for (j, g) in gts.iter().enumerate() {
        let center_in = cam.project(&g.pose.translation()).ok().and_then(|(u, v, _)| cam.pixel_at(u, v)).is_some();
        if !center_in {
            out.excluded_gts.push((j, Exclusion::CenterOutOfView));
            continue;
        }
        if visible_fraction(scene, library, &maps.depth, j, cfg.visibility_depth_tol) < cfg.visibility_min_fraction {
            out.excluded_gts.push((j, Exclusion::Occluded));
            continue;
        }
        let model = library.get(g.model_id).ok_or_else(|| Error::Evaluation(format!("unknown model {}", g.model_id)))?;
        gt_boxes[j] = projected_bbox(model, &g.pose, cam);
    }
    let keys: Vec<f64> = preds.iter().map(|p| rank_key(p, cfg.nms_rank)).collect();
    let mut taken = vec![false; gts.len()];
    for i in ranked(&keys) {
        let p = &preds[i];
        let model = library.get(p.model_id).ok_or_else(|| Error::Evaluation(format!("unknown model {}", p.model_id)))?;
        let pb = projected_bbox(model, &p.pose, cam);
        let mut best: Option<(usize, f64)> = None;
        if let Some(pb) = pb {
            for (j, g) in gts.iter().enumerate() {
                let Some(gb) = gt_boxes[j] else { continue };
                if taken[j] || g.category != p.category {
                    continue;
                }
                let iou = pb.iou(&gb);
                if iou > cfg.iou_match_min && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
        }
        match best {
            Some((j, iou)) => {
                taken[j] = true;
                out.matches.push((i, j, iou));
            }
            None => out.unmatched_preds.push(i),
        }
    }
    out.unmatched_gts = (0..gts.len()).filter(|&j| gt_boxes[j].is_some() && !taken[j]).collect();
    // visible GTs whose box fell outside the image count as visible misses
    for (j, g) in gts.iter().enumerate() {
        let excluded = out.excluded_gts.iter().any(|(e, _)| *e == j);
        if !excluded && gt_boxes[j].is_none() && !taken[j] {
            let _ = g;
            out.unmatched_gts.push(j);
        }
    }
    out.unmatched_gts.sort_unstable();
    Ok(out)
}

/// Per-image accuracy: associated pairs within the thresholds over visible GTs.
pub fn per_image_accuracy(preds: &[AlignmentPrediction], scene: &Scene, assoc: &Association, cfg: &EvalConfig) -> Accuracy {
    let mut acc = Accuracy::default();
    for &(i, j, _) in &assoc.matches {
        let g = &scene.objects[j];
        let ok = pose_errors(&preds[i].pose, &g.pose, g.symmetry).within(&cfg.thresholds);
        let c = acc.per_category.entry(g.category).or_default();
        c.total += 1;
        c.correct += ok as usize;
    }
    for &j in &assoc.unmatched_gts {
        acc.per_category.entry(scene.objects[j].category).or_default().total += 1;
    }
    acc.instances = Count {
        correct: acc.per_category.values().map(|c| c.correct).sum(),
        total: acc.per_category.values().map(|c| c.total).sum(),
    };
    acc
}

/// Grid hash over 3D points with cell size equal to the query radius.
struct PointGrid<'a> {
    cell: f64,
    pts: &'a [Vec3],
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> PointGrid<'a> {
    fn new(pts: &'a [Vec3], cell: f64) -> PointGrid<'a> {
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in pts.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        PointGrid { cell, pts, cells }
    }

    fn key(p: &Vec3, cell: f64) -> (i64, i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
    }

    fn any_within(&self, q: &Vec3, r: f64) -> bool {
        let (kx, ky, kz) = Self::key(q, self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                        if ids.iter().any(|&i| (self.pts[i] - q).norm() <= r) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }
}

fn share_within(a: &[Vec3], b: &[Vec3], rho: f64) -> f64 {
    let grid = PointGrid::new(b, rho);
    a.iter().filter(|p| grid.any_within(p, rho)).count() as f64 / a.len() as f64
}

/// F-score at distance `rho`: harmonic mean of the share of `a` within `rho`
/// of `b` (precision) and the share of `b` within `rho` of `a` (recall).
pub fn f_score(a: &[Vec3], b: &[Vec3], rho: f64) -> f64 {
    if a.is_empty() || b.is_empty() || rho.is_nan() || rho <= 0.0 {
        return 0.0;
    }
    let p = share_within(a, b, rho);
    let r = share_within(b, a, rho);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// F-score between a predicted and a GT placement, with both point clouds
/// rescaled so the GT's longest posed bounding-box side is 10.
pub fn mesh_f_score(
    pred_model: &CadModel,
    pred_pose: &Pose,
    gt_model: &CadModel,
    gt_pose: &Pose,
    cfg: &EvalConfig,
) -> Result<f64> {
    let side = gt_model.extent().component_mul(&gt_pose.s).max();
    if side.is_nan() || side <= 0.0 {
        return Err(Error::Evaluation(format!("degenerate ground-truth extent for model {}", gt_model.id)));
    }
    let k = 10.0 / side;
    let sample = |m: &CadModel, pose: &Pose| -> Vec<Vec3> {
        m.sample_surface(cfg.n_surface_samples, cfg.surface_seed).iter().map(|s| pose.transform_point(&s.point) * k).collect()
    };
    Ok(f_score(&sample(pred_model, pred_pose), &sample(gt_model, gt_pose), cfg.rho))
}

/// AP thresholds on F: 0.50, 0.55, …, 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// One ranked prediction entering the AP computation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub category: Category,
    pub confidence: f64,
    /// F-score against the associated GT; `None` when unmatched.
    pub f: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub area: f64,
}

/// Precision/recall along the ranking and the all-point interpolated area.
pub fn pr_curve(tp: &[bool], n_gt: usize) -> PrCurve {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { hits as f64 / n_gt as f64 });
    }
    let mut area = 0.0;
    if n_gt > 0 {
        // precision envelope from the right, summed at every recall step
        let mut env = precision.clone();
        for k in (0..env.len().saturating_sub(1)).rev() {
            env[k] = env[k].max(env[k + 1]);
        }
        area = tp.iter().zip(&env).filter(|(t, _)| **t).map(|(_, p)| p).sum::<f64>() / n_gt as f64;
    }
    PrCurve { precision, recall, area }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Per category: AP at each threshold of [`ap_thresholds`].
    pub per_category: BTreeMap<Category, Vec<f64>>,
    pub ap50: f64,
    pub ap_mean: f64,
}

fn ap_per_category(entries: &[ApEntry], gt_counts: &BTreeMap<Category, usize>, area: impl Fn(&[bool], usize) -> f64) -> ApReport {
    let mut report = ApReport::default();
    for (&cat, &n_gt) in gt_counts {
        let mine: Vec<&ApEntry> = entries.iter().filter(|e| e.category == cat).collect();
        let keys: Vec<f64> = mine.iter().map(|e| e.confidence).collect();
        let order = ranked(&keys);
        let aps = ap_thresholds()
            .iter()
            .map(|&t| {
                let tp: Vec<bool> = order.iter().map(|&i| mine[i].f.is_some_and(|f| f > t)).collect();
                area(&tp, n_gt)
            })
            .collect();
        report.per_category.insert(cat, aps);
    }
    let n = report.per_category.len().max(1) as f64;
    report.ap50 = report.per_category.values().map(|v| v[0]).sum::<f64>() / n;
    report.ap_mean = report.per_category.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).sum::<f64>() / n;
    report
}

/// AP50 and mean AP over F thresholds 0.50…0.95, per category (categories
/// with GT instances) and averaged over categories.
pub fn ap_mesh(entries: &[ApEntry], gt_counts: &BTreeMap<Category, usize>) -> ApReport {
    ap_per_category(entries, gt_counts, |tp, n| pr_curve(tp, n).area)
}

/// Brute-force reference for [`ap_mesh`]: for every recall level m / n_gt,
/// the interpolated precision is the best precision over all ranking cutoffs
/// reaching that recall; AP is their mean.
pub fn ap_mesh_reference(entries: &[ApEntry], gt_counts: &BTreeMap<Category, usize>) -> ApReport {
    ap_per_category(entries, gt_counts, |tp, n_gt| {
        if n_gt == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for m in 1..=n_gt {
            let mut best = 0.0f64;
            for cut in 1..=tp.len() {
                let hits = tp[..cut].iter().filter(|&&t| t).count();
                if hits >= m {
                    best = best.max(hits as f64 / cut as f64);
                }
            }
            total += best;
        }
        total / n_gt as f64
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bins: Vec<CalibrationBin>,
    /// Rank correlation between bin confidence and bin accuracy; `None` with
    /// fewer than two bins or a constant column.
    pub spearman: Option<f64>,
}

/// Sorts by confidence and cuts into (about) `n_bins` equal-count bins.
/// Cuts never separate equal confidences, so tied values share a bin.
pub fn calibration_curve(samples: &[(f64, bool)], n_bins: usize) -> Calibration {
    let mut s: Vec<(f64, bool)> = samples.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = s.len();
    let nb = n_bins.min(n).max(1);
    let mut bins = Vec::new();
    let mut start = 0;
    for b in 1..=nb {
        if start >= n {
            break;
        }
        let mut end = if b == nb { n } else { (b * n / nb).max(start + 1) };
        while end < n && end > start && s[end].0 == s[end - 1].0 {
            end += 1;
        }
        let chunk = &s[start..end];
        bins.push(CalibrationBin {
            mean_confidence: chunk.iter().map(|c| c.0).sum::<f64>() / chunk.len() as f64,
            accuracy: chunk.iter().filter(|c| c.1).count() as f64 / chunk.len() as f64,
            count: chunk.len(),
        });
        start = end;
    }
    let xs: Vec<f64> = bins.iter().map(|b| b.mean_confidence).collect();
    let ys: Vec<f64> = bins.iter().map(|b| b.accuracy).collect();
    Calibration { spearman: spearman(&xs, &ys), bins }
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// Area under the ROC curve (Mann–Whitney statistic, ties count one half).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if scores.len() != labels.len() || pos == 0 || neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Some((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}
