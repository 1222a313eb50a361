//! Scores a hand-built set of predictions: 3D NMS, per-scene accuracy,
//! mesh F-scores, AP over F thresholds, calibration and ROC-AUC.
//!
//! cargo run --release --example metrics_fixtures

use std::collections::BTreeMap;

use jointalign::geometry::{vertical_rotation, Pose, SymmetryTag, Vec3};
use jointalign::metrics::{
    ap_mesh, calibration_curve, mesh_f_score, nms_3d, per_scene_accuracy, roc_auc, ApEntry, EvalConfig, GtInstance, RankBy,
};
use jointalign::refine::AlignmentPrediction;
use jointalign::synthscene::{make_primitive_model, Category, ShapeParams};

fn main() -> jointalign::Result<()> {
    let cfg = EvalConfig::default();
    let chair = make_primitive_model(Category::BoxChair, ShapeParams::default_for(Category::BoxChair), 0)?;
    let place =
        |x: f64, z: f64, yaw: f64| Pose::from_translation(Vec3::new(x, 0.3, z), vertical_rotation(yaw), Vec3::repeat(1.0));
    let gts: Vec<GtInstance> = [(-1.0, 3.0), (0.0, 3.5), (1.0, 3.0)]
        .iter()
        .enumerate()
        .map(|(i, &(x, z))| {
            Ok(GtInstance {
                object_id: i,
                category: Category::BoxChair,
                model_id: 0,
                pose: place(x, z, 0.0)?,
                symmetry: SymmetryTag::None,
            })
        })
        .collect::<jointalign::Result<_>>()?;
    let pred = |pose: Pose, sigma: f64| AlignmentPrediction {
        scene: 0,
        detection: 0,
        object_id: 0,
        category: Category::BoxChair,
        model_id: 0,
        pose,
        sigma,
        detector_confidence: sigma,
    };
    let preds = vec![
        pred(place(-1.0, 3.0, 0.05)?, 0.9),
        pred(place(-0.95, 3.05, 0.0)?, 0.6),
        pred(place(0.1, 3.5, 0.0)?, 0.8),
        pred(place(1.0, 3.0, 1.2)?, 0.3),
    ];
    let kept = nms_3d(&preds, cfg.nms_radius, RankBy::Sigma);
    println!("NMS keeps {} of {}", kept.len(), preds.len());
    let acc = per_scene_accuracy(&kept, &gts, &cfg);
    println!("per-scene instance accuracy {:.3}", acc.instances.rate());

    let mut entries = Vec::new();
    for p in &kept {
        let g = gts.iter().min_by(|a, b| {
            let da = (a.pose.translation() - p.pose.translation()).norm();
            da.total_cmp(&(b.pose.translation() - p.pose.translation()).norm())
        });
        let f = g.map(|g| mesh_f_score(&chair, &p.pose, &chair, &g.pose, &cfg)).transpose()?;
        println!("σ {:.1}: F {:.3}", p.sigma, f.unwrap_or(0.0));
        entries.push(ApEntry { category: p.category, confidence: p.sigma, f });
    }
    let counts: BTreeMap<Category, usize> = [(Category::BoxChair, gts.len())].into_iter().collect();
    let ap = ap_mesh(&entries, &counts);
    println!("AP50 {:.3} APmean {:.3}", ap.ap50, ap.ap_mean);

    let samples: Vec<(f64, bool)> = (0..200).map(|i| (i as f64 / 200.0, (i * 7919) % 200 < i)).collect();
    let c = calibration_curve(&samples, 10);
    let (s, l): (Vec<f64>, Vec<bool>) = samples.iter().copied().unzip();
    println!("calibration spearman {:?}, ROC-AUC {:?}", c.spearman, roc_auc(&s, &l));
    Ok(())
}
