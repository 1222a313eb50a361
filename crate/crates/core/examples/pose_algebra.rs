//! Pose parameterization, updates and error measures.
//!
//! cargo run --example pose_algebra

use std::f64::consts::FRAC_PI_2;

use jointalign::geometry::{pose_errors, update_pose, vertical_rotation, Camera, Pose, PoseDelta, Quat, SymmetryTag, Vec3};

fn main() -> jointalign::Result<()> {
    let cam = Camera::centered(110.0, 128, 96);
    let gt = Pose::from_translation(Vec3::new(0.3, 0.2, 3.0), vertical_rotation(0.4), Vec3::new(0.8, 0.6, 0.7))?;
    println!("polar translation: d {:.3} φ {:.3} θ {:.3}", gt.d, gt.phi, gt.theta);

    let start = Pose::from_translation(Vec3::new(0.0, 0.0, 2.5), Quat::IDENTITY, Vec3::new(1.0, 1.0, 1.0))?;
    let delta = PoseDelta::between(&start, &gt);
    let reached = update_pose(&start, &delta);
    let e = pose_errors(&reached, &gt, SymmetryTag::None);
    println!("delta {:?}", delta.to_array());
    println!("after one update: {:.2e} m, {:.2e}°, scale {:.2e}", e.translation, e.rotation_deg, e.scale);

    let turned = Pose { q: gt.q.mul(&vertical_rotation(FRAC_PI_2)), ..gt };
    for sym in [SymmetryTag::None, SymmetryTag::TwoFold, SymmetryTag::FourFold, SymmetryTag::Infinite] {
        println!("quarter turn under {sym:?}: {:.1}°", pose_errors(&turned, &gt, sym).rotation_deg);
    }

    let (u, v, z) = cam.project(&gt.translation())?;
    let back = cam.bearing(u, v) * (z / cam.bearing(u, v).z);
    println!("projected to ({u:.2}, {v:.2}); bearing round trip error {:.2e}", (back - gt.translation()).norm());
    Ok(())
}
