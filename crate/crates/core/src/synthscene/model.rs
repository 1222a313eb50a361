//! Procedural CAD-like models built from closed boxes and cylinders.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SymmetryTag, Vec3};

/// Number of precomputed canonical surface samples per model.
pub const CANONICAL_SAMPLES: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Cube,
    BoxChair,
    CylinderTable,
    LSofa,
    SlabDisplay,
}

impl Category {
    pub const ALL: [Category; 5] =
        [Category::Cube, Category::BoxChair, Category::CylinderTable, Category::LSofa, Category::SlabDisplay];

    /// Categories used by the desk-scale scenes.
    pub const FURNITURE: [Category; 4] = [Category::BoxChair, Category::CylinderTable, Category::LSofa, Category::SlabDisplay];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Cube => "cube",
            Category::BoxChair => "box-chair",
            Category::CylinderTable => "cylinder-table",
            Category::LSofa => "l-sofa",
            Category::SlabDisplay => "slab-display",
        }
    }

    pub fn symmetry(&self) -> SymmetryTag {
        match self {
            Category::Cube => SymmetryTag::FourFold,
            Category::BoxChair | Category::LSofa => SymmetryTag::None,
            Category::CylinderTable => SymmetryTag::Infinite,
            Category::SlabDisplay => SymmetryTag::TwoFold,
        }
    }

    pub fn index(&self) -> usize {
        Category::ALL.iter().position(|c| c == self).unwrap_or(0)
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-category construction parameters. All lengths are relative to the
/// model's footprint width before normalization.
///
/// Documented ranges:
/// - chair: `seat_height` 0.3..=0.6, `back_height` 0.3..=0.8, `leg_width` 0.04..=0.2
/// - table: `height` 0.4..=1.0, `top_thickness` 0.02..=0.2, `pedestal_radius` 0.05..=0.3, `segments` 8..=128
/// - sofa: `length` 1.5..=3.0, `chaise_depth` 0.5..=1.5, `back_height` 0.2..=0.6
/// - display: `aspect` 0.3..=1.0, `thickness` 0.02..=0.15, `stand_height` 0.0..=0.5
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeParams {
    Cube,
    Chair { seat_height: f64, back_height: f64, leg_width: f64 },
    Table { height: f64, top_thickness: f64, pedestal_radius: f64, segments: usize },
    Sofa { length: f64, chaise_depth: f64, back_height: f64 },
    Display { aspect: f64, thickness: f64, stand_height: f64 },
}

impl ShapeParams {
    pub fn default_for(category: Category) -> ShapeParams {
        match category {
            Category::Cube => ShapeParams::Cube,
            Category::BoxChair => ShapeParams::Chair { seat_height: 0.45, back_height: 0.5, leg_width: 0.08 },
            Category::CylinderTable => {
                ShapeParams::Table { height: 0.75, top_thickness: 0.05, pedestal_radius: 0.1, segments: 32 }
            }
            Category::LSofa => ShapeParams::Sofa { length: 2.0, chaise_depth: 0.8, back_height: 0.4 },
            Category::SlabDisplay => ShapeParams::Display { aspect: 0.6, thickness: 0.06, stand_height: 0.2 },
        }
    }

    /// Draws parameters uniformly from the documented ranges, narrowed so variants
    /// stay recognisable.
    pub fn random_for<R: Rng>(category: Category, rng: &mut R) -> ShapeParams {
        match category {
            Category::Cube => ShapeParams::Cube,
            Category::BoxChair => ShapeParams::Chair {
                seat_height: rng.random_range(0.4..0.5),
                back_height: rng.random_range(0.4..0.6),
                leg_width: rng.random_range(0.06..0.12),
            },
            Category::CylinderTable => ShapeParams::Table {
                height: rng.random_range(0.6..0.85),
                top_thickness: rng.random_range(0.04..0.08),
                pedestal_radius: rng.random_range(0.08..0.15),
                segments: 32,
            },
            Category::LSofa => ShapeParams::Sofa {
                length: rng.random_range(1.8..2.4),
                chaise_depth: rng.random_range(0.7..1.0),
                back_height: rng.random_range(0.35..0.45),
            },
            Category::SlabDisplay => ShapeParams::Display {
                aspect: rng.random_range(0.5..0.7),
                thickness: rng.random_range(0.04..0.08),
                stand_height: rng.random_range(0.15..0.25),
            },
        }
    }

    fn matches(&self, category: Category) -> bool {
        matches!(
            (self, category),
            (ShapeParams::Cube, Category::Cube)
                | (ShapeParams::Chair { .. }, Category::BoxChair)
                | (ShapeParams::Table { .. }, Category::CylinderTable)
                | (ShapeParams::Sofa { .. }, Category::LSofa)
                | (ShapeParams::Display { .. }, Category::SlabDisplay)
        )
    }

    fn validate(&self) -> Result<()> {
        fn check(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidShape(format!("{name} = {v} outside [{lo}, {hi}]")))
            }
        }
        match *self {
            ShapeParams::Cube => Ok(()),
            ShapeParams::Chair { seat_height, back_height, leg_width } => {
                check("seat_height", seat_height, 0.3, 0.6)?;
                check("back_height", back_height, 0.3, 0.8)?;
                check("leg_width", leg_width, 0.04, 0.2)
            }
            ShapeParams::Table { height, top_thickness, pedestal_radius, segments } => {
                check("height", height, 0.4, 1.0)?;
                check("top_thickness", top_thickness, 0.02, 0.2)?;
                check("pedestal_radius", pedestal_radius, 0.05, 0.3)?;
                if !(8..=128).contains(&segments) {
                    return Err(Error::InvalidShape(format!("segments = {segments} outside [8, 128]")));
                }
                Ok(())
            }
            ShapeParams::Sofa { length, chaise_depth, back_height } => {
                check("length", length, 1.5, 3.0)?;
                check("chaise_depth", chaise_depth, 0.5, 1.5)?;
                check("back_height", back_height, 0.2, 0.6)
            }
            ShapeParams::Display { aspect, thickness, stand_height } => {
                check("aspect", aspect, 0.3, 1.0)?;
                check("thickness", thickness, 0.02, 0.15)?;
                check("stand_height", stand_height, 0.0, 0.5)
            }
        }
    }
}

/// A surface sample: position and outward unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub point: Vec3,
    pub normal: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CadModel {
    pub id: u32,
    pub category: Category,
    pub params: ShapeParams,
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub vertex_normals: Vec<Vec3>,
    pub symmetry: SymmetryTag,
    pub canonical_samples: Vec<SurfacePoint>,
}

impl CadModel {
    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        let (a, b, c) = (self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        let (a, b, c) = (self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Axis-aligned extent of the canonical mesh.
    pub fn extent(&self) -> Vec3 {
        let (lo, hi) = bounds(&self.vertices);
        hi - lo
    }

    /// Draws `n` area-uniform surface samples with face normals.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Vec<SurfacePoint> {
        sample_mesh(&self.vertices, &self.faces, n, seed)
    }

    /// True when every directed edge has exactly one opposite partner.
    pub fn is_watertight(&self) -> bool {
        use std::collections::HashMap;
        let mut edges: HashMap<(u32, u32), i32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edges.entry((a, b)).or_default() += 1;
            }
        }
        edges.iter().all(|(&(a, b), &n)| n == 1 && edges.get(&(b, a)) == Some(&1))
    }
}

fn bounds(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

#[derive(Default)]
struct MeshBuilder {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
}

impl MeshBuilder {
    /// Closed axis-aligned box from `lo` to `hi`, outward winding.
    fn add_box(&mut self, lo: Vec3, hi: Vec3) {
        let base = self.vertices.len() as u32;
        for i in 0..8u32 {
            self.vertices.push(Vec3::new(
                if i & 1 == 0 { lo.x } else { hi.x },
                if i & 2 == 0 { lo.y } else { hi.y },
                if i & 4 == 0 { lo.z } else { hi.z },
            ));
        }
        const QUADS: [[u32; 4]; 6] = [
            [0, 4, 6, 2], // -x
            [1, 3, 7, 5], // +x
            [0, 1, 5, 4], // -y
            [2, 6, 7, 3], // +y
            [0, 2, 3, 1], // -z
            [4, 5, 7, 6], // +z
        ];
        for q in QUADS {
            self.faces.push([base + q[0], base + q[1], base + q[2]]);
            self.faces.push([base + q[0], base + q[2], base + q[3]]);
        }
    }

    /// Closed vertical cylinder (axis along `y`) centered at `(cx, cz)`.
    fn add_cylinder(&mut self, cx: f64, cz: f64, radius: f64, y0: f64, y1: f64, segments: usize) {
        let base = self.vertices.len() as u32;
        let n = segments as u32;
        for ring in [y0, y1] {
            for k in 0..segments {
                let a = 2.0 * PI * k as f64 / segments as f64;
                self.vertices.push(Vec3::new(cx + radius * a.cos(), ring, cz + radius * a.sin()));
            }
        }
        let bottom_c = base + 2 * n;
        let top_c = bottom_c + 1;
        self.vertices.push(Vec3::new(cx, y0, cz));
        self.vertices.push(Vec3::new(cx, y1, cz));
        for k in 0..n {
            let k1 = (k + 1) % n;
            let (b0, b1, t0, t1) = (base + k, base + k1, base + n + k, base + n + k1);
            // side, viewed from outside: b0 -> t0 -> t1 -> b1
            self.faces.push([b0, t0, t1]);
            self.faces.push([b0, t1, b1]);
            self.faces.push([bottom_c, b0, b1]);
            self.faces.push([top_c, t1, t0]);
        }
    }
}

fn build_mesh(params: &ShapeParams) -> MeshBuilder {
    let mut m = MeshBuilder::default();
    match *params {
        ShapeParams::Cube => m.add_box(Vec3::repeat(-0.5), Vec3::repeat(0.5)),
        ShapeParams::Chair { seat_height, back_height, leg_width } => {
            let seat_t = 0.08;
            let back_t = 0.08;
            let w = leg_width;
            for (x, z) in [(-0.5, -0.5), (0.5 - w, -0.5), (-0.5, 0.5 - w), (0.5 - w, 0.5 - w)] {
                m.add_box(Vec3::new(x, 0.0, z), Vec3::new(x + w, seat_height - seat_t, z + w));
            }
            m.add_box(Vec3::new(-0.5, seat_height - seat_t, -0.5), Vec3::new(0.5, seat_height, 0.5));
            m.add_box(Vec3::new(-0.5, seat_height, -0.5), Vec3::new(0.5, seat_height + back_height, -0.5 + back_t));
        }
        ShapeParams::Table { height, top_thickness, pedestal_radius, segments } => {
            let base_t = 0.03;
            m.add_cylinder(0.0, 0.0, 0.35, 0.0, base_t, segments);
            m.add_cylinder(0.0, 0.0, pedestal_radius, base_t, height - top_thickness, segments);
            m.add_cylinder(0.0, 0.0, 0.5, height - top_thickness, height, segments);
        }
        ShapeParams::Sofa { length, chaise_depth, back_height } => {
            let depth = 0.9;
            let seat_h = 0.42;
            let back_t = 0.2;
            let x0 = -0.5 * length;
            let x1 = 0.5 * length;
            // seat along the back, chaise extension on +x, backrest along -z
            m.add_box(Vec3::new(x0, 0.0, -0.5 * depth), Vec3::new(x1, seat_h, 0.5 * depth));
            m.add_box(Vec3::new(x1 - 0.8, 0.0, 0.5 * depth), Vec3::new(x1, seat_h, 0.5 * depth + chaise_depth));
            m.add_box(Vec3::new(x0, seat_h, -0.5 * depth), Vec3::new(x1, seat_h + back_height, -0.5 * depth + back_t));
            m.add_box(Vec3::new(x0, seat_h, -0.5 * depth + back_t), Vec3::new(x0 + 0.18, seat_h + 0.18, 0.5 * depth));
        }
        ShapeParams::Display { aspect, thickness, stand_height } => {
            let base_d = 0.25;
            let base_h = 0.02;
            let neck = 0.06;
            m.add_box(Vec3::new(-0.15, 0.0, -0.5 * base_d), Vec3::new(0.15, base_h, 0.5 * base_d));
            m.add_box(Vec3::new(-0.5 * neck, base_h, -0.5 * neck), Vec3::new(0.5 * neck, base_h + stand_height, 0.5 * neck));
            let y0 = base_h + stand_height;
            m.add_box(Vec3::new(-0.5, y0, -0.5 * thickness), Vec3::new(0.5, y0 + aspect, 0.5 * thickness));
        }
    }
    m
}

/// Builds a procedural model, centered on its bounding box and scaled so its
/// longest side is 1.
pub fn make_primitive_model(category: Category, params: ShapeParams, seed: u64) -> Result<CadModel> {
    if !params.matches(category) {
        return Err(Error::InvalidShape(format!("{params:?} does not build a {category}")));
    }
    params.validate()?;
    let mesh = build_mesh(&params);
    let (lo, hi) = bounds(&mesh.vertices);
    let center = 0.5 * (lo + hi);
    let longest = (hi - lo).max();
    let vertices: Vec<Vec3> = mesh.vertices.iter().map(|v| (v - center) / longest).collect();
    let faces = mesh.faces;

    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for f in &faces {
        let (a, b, c) = (vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]);
        // area-weighted
        let n = (b - a).cross(&(c - a));
        for &i in f {
            acc[i as usize] += n;
        }
    }
    let vertex_normals = acc.into_iter().map(|n| n.normalize()).collect();
    let canonical_samples = sample_mesh(&vertices, &faces, CANONICAL_SAMPLES, seed);
    Ok(CadModel {
        id: seed as u32,
        category,
        params,
        vertices,
        faces,
        vertex_normals,
        symmetry: category.symmetry(),
        canonical_samples,
    })
}

/// Area-weighted uniform sampling of a triangle mesh.
pub fn sample_mesh(vertices: &[Vec3], faces: &[[u32; 3]], n: usize, seed: u64) -> Vec<SurfacePoint> {
    let mut cdf = Vec::with_capacity(faces.len());
    let mut total = 0.0;
    for f in faces {
        let (a, b, c) = (vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]);
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cdf.push(total);
    }
    if faces.is_empty() || total <= 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let r = rng.random::<f64>() * total;
            let fi = cdf.partition_point(|&c| c < r).min(faces.len() - 1);
            let f = faces[fi];
            let (a, b, c) = (vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]);
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            let s = r1.sqrt();
            let point = a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2);
            let normal = (b - a).cross(&(c - a)).normalize();
            SurfacePoint { point, normal }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_cube() {
        let m = make_primitive_model(Category::Cube, ShapeParams::Cube, 1).unwrap();
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.faces.len(), 12);
        for f in 0..m.faces.len() {
            let n = m.face_normal(f);
            let axis_aligned = n.iter().filter(|c| c.abs() > 1e-12).count() == 1;
            assert!(axis_aligned, "face {f} normal {n:?}");
            // outward: normal points away from the center
            let c = m.vertices[m.faces[f][0] as usize];
            assert!(n.dot(&c) > 0.0);
        }
        assert!(m.is_watertight());
        assert!((m.extent().max() - 1.0).abs() < 1e-12);
        assert_eq!(m.symmetry, SymmetryTag::FourFold);
    }

    #[test]
    fn table_is_round_and_infinite() {
        let m = make_primitive_model(Category::CylinderTable, ShapeParams::default_for(Category::CylinderTable), 3).unwrap();
        assert_eq!(m.symmetry, SymmetryTag::Infinite);
        // top rim vertices are equidistant from the vertical axis
        let top = m.vertices.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max);
        let radii: Vec<f64> = m
            .vertices
            .iter()
            .filter(|v| (v.y - top).abs() < 1e-12 && (v.x.abs() + v.z.abs()) > 1e-9)
            .map(|v| (v.x * v.x + v.z * v.z).sqrt())
            .collect();
        assert_eq!(radii.len(), 32);
        assert!(radii.iter().all(|r| (r - radii[0]).abs() < 1e-12));
    }

    #[test]
    fn all_categories_are_valid_meshes() {
        for c in Category::ALL {
            let m = make_primitive_model(c, ShapeParams::default_for(c), 11).unwrap();
            assert!(m.is_watertight(), "{c}");
            assert!((m.extent().max() - 1.0).abs() < 1e-9, "{c}");
            assert!(m.vertex_normals.iter().all(|n| (n.norm() - 1.0).abs() < 1e-12));
            assert_eq!(m.canonical_samples.len(), CANONICAL_SAMPLES);
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let p = ShapeParams::default_for(Category::LSofa);
        let a = make_primitive_model(Category::LSofa, p, 42).unwrap();
        let b = make_primitive_model(Category::LSofa, p, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let bad = ShapeParams::Table { height: 3.0, top_thickness: 0.05, pedestal_radius: 0.1, segments: 32 };
        assert!(matches!(make_primitive_model(Category::CylinderTable, bad, 0), Err(Error::InvalidShape(_))));
        assert!(make_primitive_model(Category::Cube, ShapeParams::default_for(Category::LSofa), 0).is_err());
    }
}
