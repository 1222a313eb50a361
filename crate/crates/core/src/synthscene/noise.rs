use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::raster::ChannelMaps;
use crate::geometry::Vec3;

/// Synthetic degradation standing in for imperfect depth/normal/mask predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation of the multiplicative depth noise.
    pub depth_sigma: f64,
    /// Mean angular deviation of the normal jitter, degrees.
    pub normal_jitter_deg: f64,
    /// Positive values dilate instance masks into background, negative values erode them.
    pub mask_offset_px: i32,
}

impl NoiseConfig {
    pub fn is_zero(&self) -> bool {
        self.depth_sigma == 0.0 && self.normal_jitter_deg == 0.0 && self.mask_offset_px == 0
    }

    /// Mild noise used by the desk-scale experiments.
    pub fn mild() -> NoiseConfig {
        NoiseConfig { depth_sigma: 0.01, normal_jitter_deg: 3.0, mask_offset_px: 0 }
    }
}

pub fn perturb_channels(maps: &ChannelMaps, cfg: &NoiseConfig, seed: u64) -> ChannelMaps {
    let mut out = maps.clone();
    if cfg.is_zero() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // half-normal angle scaled so its mean equals the configured jitter
    let angle_scale = cfg.normal_jitter_deg.to_radians() * (std::f64::consts::PI / 2.0).sqrt();
    for k in 0..out.depth.len() {
        if out.depth[k] <= 0.0 {
            continue;
        }
        if cfg.depth_sigma > 0.0 {
            let e: f64 = StandardNormal.sample(&mut rng);
            let d = out.depth[k] as f64 * (1.0 + cfg.depth_sigma * e);
            out.depth[k] = d.max(1e-3 * out.depth[k] as f64) as f32;
        }
        if angle_scale > 0.0 {
            let n = out.normal[k];
            let n = Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64);
            if n.norm() > 0.0 {
                let a: f64 = StandardNormal.sample(&mut rng);
                let angle = a.abs() * angle_scale;
                let dir = random_perpendicular(&n, &mut rng);
                let j = (n * angle.cos() + dir * angle.sin()).normalize();
                out.normal[k] = [j.x as f32, j.y as f32, j.z as f32];
            }
        }
    }
    match cfg.mask_offset_px {
        0 => {}
        k if k < 0 => erode(&mut out, (-k) as usize),
        k => dilate(&mut out, k as usize),
    }
    out
}

fn random_perpendicular<R: Rng>(n: &Vec3, rng: &mut R) -> Vec3 {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let a = n.cross(&helper).normalize();
    let b = n.cross(&a);
    let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    a * t.cos() + b * t.sin()
}

fn erode(maps: &mut ChannelMaps, r: usize) {
    let src = maps.instance.clone();
    let (w, h) = (maps.width, maps.height);
    for row in 0..h {
        for col in 0..w {
            let id = src[row * w + col];
            if id < 0 {
                continue;
            }
            let boundary = neighbours(col, row, w, h, r).any(|(c, rr)| src[rr * w + c] != id);
            if boundary {
                maps.instance[row * w + col] = -1;
            }
        }
    }
}

/// Grows each mask into neighbouring background pixels, copying the donor's
/// depth, normal and color so instance pixels always carry depth.
fn dilate(maps: &mut ChannelMaps, r: usize) {
    let src = maps.clone();
    let (w, h) = (maps.width, maps.height);
    for row in 0..h {
        for col in 0..w {
            let k = row * w + col;
            if src.instance[k] >= 0 || src.depth[k] > 0.0 {
                continue;
            }
            let donor = neighbours(col, row, w, h, r)
                .map(|(c, rr)| rr * w + c)
                .filter(|&j| src.instance[j] >= 0)
                .min_by(|&a, &b| src.depth[a].total_cmp(&src.depth[b]));
            if let Some(j) = donor {
                maps.instance[k] = src.instance[j];
                maps.depth[k] = src.depth[j];
                maps.normal[k] = src.normal[j];
                maps.color[k] = src.color[j];
            }
        }
    }
}

fn neighbours(col: usize, row: usize, w: usize, h: usize, r: usize) -> impl Iterator<Item = (usize, usize)> {
    let c0 = col.saturating_sub(r);
    let c1 = (col + r).min(w - 1);
    let r0 = row.saturating_sub(r);
    let r1 = (row + r).min(h - 1);
    (r0..=r1).flat_map(move |rr| (c0..=c1).map(move |c| (c, rr)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_maps(w: usize, h: usize) -> ChannelMaps {
        let mut m = ChannelMaps::empty(w, h);
        for k in 0..w * h {
            m.depth[k] = 2.0;
            m.normal[k] = [0.0, 0.0, -1.0];
            m.instance[k] = 0;
            m.color[k] = [0.5, 0.5, 0.5];
        }
        m
    }

    #[test]
    fn zero_noise_is_identity() {
        let m = flat_maps(16, 8);
        assert_eq!(perturb_channels(&m, &NoiseConfig::default(), 3), m);
    }

    #[test]
    fn depth_noise_std() {
        let m = flat_maps(400, 300);
        let cfg = NoiseConfig { depth_sigma: 0.05, ..Default::default() };
        let out = perturb_channels(&m, &cfg, 11);
        let rel: Vec<f64> = out.depth.iter().map(|&d| d as f64 / 2.0 - 1.0).collect();
        let mean = rel.iter().sum::<f64>() / rel.len() as f64;
        let var = rel.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rel.len() - 1) as f64;
        let std = var.sqrt();
        assert!((0.045..=0.055).contains(&std), "std {std}");
    }

    #[test]
    fn normal_jitter_mean_angle() {
        let m = flat_maps(200, 100);
        let cfg = NoiseConfig { normal_jitter_deg: 5.0, ..Default::default() };
        let out = perturb_channels(&m, &cfg, 5);
        let mean = out
            .normal
            .iter()
            .map(|n| {
                let v = Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64).normalize();
                (-v.z).clamp(-1.0, 1.0).acos().to_degrees()
            })
            .sum::<f64>()
            / out.normal.len() as f64;
        assert!((mean - 5.0).abs() < 1.0, "mean {mean}");
        assert!(out.normal.iter().all(|n| {
            let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            (l - 1.0).abs() < 1e-5
        }));
    }

    #[test]
    fn mask_erosion_and_dilation() {
        let mut m = ChannelMaps::empty(9, 9);
        for row in 2..7 {
            for col in 2..7 {
                let k = m.index(col, row);
                m.instance[k] = 0;
                m.depth[k] = 1.0;
            }
        }
        let eroded = perturb_channels(&m, &NoiseConfig { mask_offset_px: -1, ..Default::default() }, 0);
        assert_eq!(eroded.count_instance(0), 9);
        let dilated = perturb_channels(&m, &NoiseConfig { mask_offset_px: 1, ..Default::default() }, 0);
        assert_eq!(dilated.count_instance(0), 49);
        for k in 0..81 {
            if dilated.instance[k] >= 0 {
                assert!(dilated.depth[k] > 0.0);
            }
        }
    }
}
