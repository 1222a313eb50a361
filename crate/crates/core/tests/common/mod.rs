#![allow(dead_code)]

use std::collections::BTreeMap;

use jointalign::geometry::{quat_to_matrix, update_pose, Camera, Pose, PoseDelta, Quat, SymmetryTag, Vec3};
use jointalign::metrics::{ApEntry, GtInstance};
use jointalign::refine::AlignmentPrediction;
use jointalign::synthscene::Category;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_quat(rng: &mut impl Rng) -> Quat {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vec3::z() } else { axis };
    Quat::from_axis_angle(axis, rng.random_range(-3.1..3.1))
}

pub fn random_pose(rng: &mut impl Rng) -> Pose {
    let s = Vec3::new(rng.random_range(0.2..3.0), rng.random_range(0.2..3.0), rng.random_range(0.2..3.0));
    Pose::new(rng.random_range(0.5..10.0), rng.random_range(-3.1..3.1), rng.random_range(0.3..1.3), random_quat(rng), s)
        .expect("valid pose")
}

/// A delta that keeps the polar angle inside (0, π) for poses from [`random_pose`].
pub fn random_delta(rng: &mut impl Rng) -> PoseDelta {
    PoseDelta {
        dd: rng.random_range(0.5..2.0),
        dphi: rng.random_range(-0.7..0.7),
        dtheta: rng.random_range(-0.25..0.25),
        dq: random_quat(rng),
        ds: Vec3::new(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)),
        sigma: rng.random(),
    }
}

/// Component distance between quaternions up to sign.
pub fn quat_gap(a: &Quat, b: &Quat) -> f64 {
    let d = |s: f64| ((a.w - s * b.w).abs()).max((a.x - s * b.x).abs()).max((a.y - s * b.y).abs()).max((a.z - s * b.z).abs());
    d(1.0).min(d(-1.0))
}

pub fn pose_gap(a: &Pose, b: &Pose) -> f64 {
    (a.translation() - b.translation()).norm().max(quat_gap(&a.q, &b.q)).max((a.s - b.s).norm())
}

/// Worst errors of one random case: identity fixpoint, delta then inverse,
/// rotation-matrix orthonormality, projection/bearing round trips.
#[derive(Clone, Copy, Debug, Default)]
pub struct AlgebraErrors {
    pub identity: f64,
    pub inverse: f64,
    pub orthonormal: f64,
    pub projection: f64,
}

impl AlgebraErrors {
    pub fn max(&self, o: &AlgebraErrors) -> AlgebraErrors {
        AlgebraErrors {
            identity: self.identity.max(o.identity),
            inverse: self.inverse.max(o.inverse),
            orthonormal: self.orthonormal.max(o.orthonormal),
            projection: self.projection.max(o.projection),
        }
    }

    pub fn worst(&self) -> f64 {
        self.identity.max(self.inverse).max(self.orthonormal).max(self.projection)
    }
}

pub fn algebra_case(seed: u64) -> AlgebraErrors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_pose(&mut rng);
    let d = random_delta(&mut rng);
    let identity = pose_gap(&update_pose(&p, &PoseDelta::identity()), &p);
    let inverse = pose_gap(&update_pose(&update_pose(&p, &d), &d.inverse()), &p);
    let r = quat_to_matrix(&random_quat(&mut rng)).expect("unit quaternion");
    let orthonormal = (r.transpose() * r - jointalign::geometry::Mat3::identity()).abs().max().max((r.determinant() - 1.0).abs());
    let cam = Camera::centered(rng.random_range(50.0..500.0), 128, 96);
    let x = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.2..10.0));
    let (u, v, z) = cam.project(&x).expect("in front");
    let b = cam.bearing(u, v);
    let back = b * (z / b.z);
    let (u2, v2, _) = cam.project(&(b * 3.0)).expect("in front");
    let projection = ((back - x).norm() / x.norm()).max((u2 - u).abs()).max((v2 - v).abs());
    AlgebraErrors { identity, inverse, orthonormal, projection }
}

pub fn pred(category: Category, pose: Pose, sigma: f64) -> AlignmentPrediction {
    AlignmentPrediction { scene: 0, detection: 0, object_id: 0, category, model_id: 0, pose, sigma, detector_confidence: sigma }
}

/// Hand-shaped matching and AP fixtures: GTs on a loose grid in two
/// categories, predictions that are exact, slightly off, far off, duplicated
/// or of the wrong category, with tied confidences.
pub struct MetricFixture {
    pub preds: Vec<AlignmentPrediction>,
    pub gts: Vec<GtInstance>,
    pub ap_entries: Vec<ApEntry>,
    pub gt_counts: BTreeMap<Category, usize>,
}

pub fn metric_fixture(k: u64) -> MetricFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + k);
    let cats = [Category::BoxChair, Category::LSofa];
    let n_gt = 1 + (k as usize % 6);
    let gts: Vec<GtInstance> = (0..n_gt)
        .map(|i| {
            // neighbours 0.15 m apart in some sets make several GTs valid for one prediction
            let spacing = if k.is_multiple_of(3) { 0.15 } else { 0.6 };
            let t = Vec3::new(-1.0 + spacing * i as f64, 0.3, 3.0 + 0.1 * (i % 2) as f64);
            GtInstance {
                object_id: i,
                category: cats[(i + k as usize) % 2],
                model_id: 0,
                pose: Pose::from_translation(t, Quat::IDENTITY, Vec3::repeat(1.0)).expect("pose"),
                symmetry: SymmetryTag::None,
            }
        })
        .collect();
    let confidences = [0.2, 0.5, 0.5, 0.9, 0.7];
    let mut preds = Vec::new();
    while preds.len() < 10.min(n_gt + 3) {
        let g = &gts[rng.random_range(0..gts.len())];
        let kind = rng.random_range(0..5);
        let shift = match kind {
            0 | 1 => Vec3::new(rng.random_range(-0.05..0.05), 0.0, rng.random_range(-0.05..0.05)),
            2 => Vec3::new(0.5, 0.0, 0.0),
            _ => Vec3::new(rng.random_range(-0.12..0.12), 0.0, 0.0),
        };
        let category = if kind == 4 && rng.random_bool(0.5) { cats[0] } else { g.category };
        let pose = Pose::from_translation(g.pose.translation() + shift, g.pose.q, g.pose.s).expect("pose");
        preds.push(pred(category, pose, confidences[rng.random_range(0..confidences.len())]));
    }
    let f_values = [None, Some(0.4), Some(0.5), Some(0.52), Some(0.75), Some(0.9), Some(0.97), Some(1.0)];
    let mut gt_counts: BTreeMap<Category, usize> = BTreeMap::new();
    for g in &gts {
        *gt_counts.entry(g.category).or_default() += 1;
    }
    let mut left = gt_counts.clone();
    let mut ap_entries = Vec::new();
    for _ in 0..rng.random_range(1..=10) {
        let category = cats[rng.random_range(0..2)];
        let mut f = f_values[rng.random_range(0..f_values.len())];
        // at most one true match per GT
        let slot = left.entry(category).or_default();
        if f.is_some() {
            if *slot == 0 {
                f = None;
            } else {
                *slot -= 1;
            }
        }
        ap_entries.push(ApEntry { category, confidence: confidences[rng.random_range(0..confidences.len())], f });
    }
    MetricFixture { preds, gts, ap_entries, gt_counts }
}
