//! Synthetic semantic occupancy scenes with analytically known ground truth.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::{superquadric_value, ImplicitForm, UnitQuaternion};
use crate::rasterizer::{GridSpec, OccupancyGrid, DEFAULT_CLASSES};

/// Semantic class ids used by the presets (1-based; 0 is empty).
pub mod class {
    pub const BARRIER: u8 = 1;
    pub const BICYCLE: u8 = 2;
    pub const BUS: u8 = 3;
    pub const CAR: u8 = 4;
    pub const CONSTRUCTION_VEHICLE: u8 = 5;
    pub const MOTORCYCLE: u8 = 6;
    pub const PEDESTRIAN: u8 = 7;
    pub const TRAFFIC_CONE: u8 = 8;
    pub const TRAILER: u8 = 9;
    pub const TRUCK: u8 = 10;
    pub const DRIVEABLE_SURFACE: u8 = 11;
    pub const OTHER_FLAT: u8 = 12;
    pub const SIDEWALK: u8 = 13;
    pub const TERRAIN: u8 = 14;
    pub const MANMADE: u8 = 15;
    pub const VEGETATION: u8 = 16;

    pub const NAMES: [&str; 16] = [
        "barrier",
        "bicycle",
        "bus",
        "car",
        "construction_vehicle",
        "motorcycle",
        "pedestrian",
        "traffic_cone",
        "trailer",
        "truck",
        "driveable_surface",
        "other_flat",
        "sidewalk",
        "terrain",
        "manmade",
        "vegetation",
    ];
}

/// Geometry of one shape in its local frame (local = R (x - position)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ShapeKind {
    Box { half_extents: [f64; 3] },
    /// Axis along local z.
    Cylinder { radius: f64, half_height: f64 },
    Ellipsoid { semi_axes: [f64; 3] },
    Superquadric { scale: [f64; 3], eps1: f64, eps2: f64 },
    /// Slab `-thickness <= z_local <= 0`, unbounded in local x and y.
    GroundPlane { thickness: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub kind: ShapeKind,
    pub position: [f64; 3],
    #[serde(default)]
    pub rotation: UnitQuaternion,
    pub class: u8,
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, position: [f64; 3], rotation: UnitQuaternion, class: u8) -> Self {
        Self { kind, position, rotation, class }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let ok = match &self.kind {
            ShapeKind::Box { half_extents } => half_extents.iter().all(|v| pos(*v)),
            ShapeKind::Cylinder { radius, half_height } => pos(*radius) && pos(*half_height),
            ShapeKind::Ellipsoid { semi_axes } => semi_axes.iter().all(|v| pos(*v)),
            ShapeKind::Superquadric { scale, eps1, eps2 } => scale.iter().all(|v| pos(*v)) && pos(*eps1) && pos(*eps2),
            ShapeKind::GroundPlane { thickness } => pos(*thickness),
        };
        if !ok {
            return Err(Error::validation("shape", format!("sizes must be positive: {:?}", self.kind)));
        }
        if self.class == 0 || self.class as usize > classes {
            return Err(Error::validation("class", format!("{} not in 1..={classes}", self.class)));
        }
        self.rotation.normalized().map_err(|e| Error::validation("rotation", e.to_string()))?;
        Ok(())
    }

    /// Radius of a ball around `position` containing the shape (infinite for planes).
    pub fn bounding_radius(&self) -> f64 {
        match &self.kind {
            ShapeKind::Box { half_extents: h } => Vector3::from(*h).norm(),
            ShapeKind::Cylinder { radius, half_height } => radius.hypot(*half_height),
            ShapeKind::Ellipsoid { semi_axes: a } => a.iter().cloned().fold(0.0, f64::max),
            ShapeKind::Superquadric { scale, .. } => Vector3::from(*scale).norm(),
            ShapeKind::GroundPlane { .. } => f64::INFINITY,
        }
    }

    /// Exact volume, when finite.
    pub fn volume(&self) -> Option<f64> {
        use std::f64::consts::PI;
        match &self.kind {
            ShapeKind::Box { half_extents: h } => Some(8.0 * h[0] * h[1] * h[2]),
            ShapeKind::Cylinder { radius, half_height } => Some(PI * radius * radius * 2.0 * half_height),
            ShapeKind::Ellipsoid { semi_axes: a } => Some(4.0 / 3.0 * PI * a[0] * a[1] * a[2]),
            _ => None,
        }
    }
}

/// Exact containment test in the shape's local frame.
pub fn analytic_inside(shape: &ShapeSpec, point: &Vector3<f64>) -> bool {
    let Ok(r) = shape.rotation.to_rotation_matrix() else { return false };
    let u = r * (point - Vector3::from(shape.position));
    match &shape.kind {
        ShapeKind::Box { half_extents: h } => (0..3).all(|k| u[k].abs() <= h[k]),
        ShapeKind::Cylinder { radius, half_height } => u.x * u.x + u.y * u.y <= radius * radius && u.z.abs() <= *half_height,
        ShapeKind::Ellipsoid { semi_axes: a } => (0..3).map(|k| (u[k] / a[k]).powi(2)).sum::<f64>() <= 1.0,
        ShapeKind::Superquadric { scale, eps1, eps2 } => {
            superquadric_value(&u, &Vector3::from(*scale), *eps1, *eps2, ImplicitForm::Standard) <= 1.0
        }
        ShapeKind::GroundPlane { thickness } => u.z <= 0.0 && u.z >= -thickness,
    }
}

/// How overlapping shapes label a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapRule {
    /// The last shape in list order containing the voxel center wins.
    #[default]
    LastWriterWins,
    FirstWriterWins,
}

pub fn generate_scene(shapes: &[ShapeSpec], spec: &GridSpec, overlap: OverlapRule) -> Result<OccupancyGrid> {
    generate_scene_with_classes(shapes, spec, overlap, DEFAULT_CLASSES)
}

pub fn generate_scene_with_classes(shapes: &[ShapeSpec], spec: &GridSpec, overlap: OverlapRule, classes: usize) -> Result<OccupancyGrid> {
    if shapes.is_empty() {
        return Err(Error::invalid("scene needs at least one shape"));
    }
    spec.validate()?;
    for s in shapes {
        s.validate(classes)?;
    }
    let mut grid = OccupancyGrid::empty(*spec, classes);
    let order: Vec<&ShapeSpec> = match overlap {
        OverlapRule::LastWriterWins => shapes.iter().collect(),
        OverlapRule::FirstWriterWins => shapes.iter().rev().collect(),
    };
    let lo = spec.origin;
    for shape in order {
        // Voxel ranges covered by the shape's bounding ball.
        let rad = shape.bounding_radius();
        let c = Vector3::from(shape.position);
        let range = |k: usize| -> (usize, usize) {
            if !rad.is_finite() {
                return (0, spec.dims[k] - 1);
            }
            let a = ((c[k] - rad - lo[k]) / spec.voxel_size[k] - 0.5).ceil().max(0.0);
            let b = ((c[k] + rad - lo[k]) / spec.voxel_size[k] - 0.5).floor().min(spec.dims[k] as f64 - 1.0);
            if a > b {
                (1, 0)
            } else {
                (a as usize, b as usize)
            }
        };
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if analytic_inside(shape, &spec.center(x, y, z)) {
                        grid.labels[spec.index(x, y, z)] = shape.class;
                    }
                }
            }
        }
    }
    Ok(grid)
}

pub const PRESETS: [&str; 4] = ["single-box", "box-grid", "street", "random-k"];

fn yaw(angle: f64) -> UnitQuaternion {
    UnitQuaternion::from_axis_angle(Vector3::z(), angle)
}

fn single_box() -> (Vec<ShapeSpec>, GridSpec) {
    let spec = GridSpec::new([24, 24, 16], Vector3::new(-6.0, -6.0, -4.0), Vector3::repeat(0.5)).expect("valid preset grid");
    let shape = ShapeSpec::new(
        ShapeKind::Box {
            half_extents: [3.0, 2.0, 1.5],
        },
        [0.0, 0.0, 0.0],
        UnitQuaternion::identity(),
        class::CAR,
    );
    (vec![shape], spec)
}

fn box_grid(rng: &mut ChaCha8Rng) -> (Vec<ShapeSpec>, GridSpec) {
    let spec = GridSpec::new([48, 48, 16], Vector3::new(-12.0, -12.0, -4.0), Vector3::repeat(0.5)).expect("valid preset grid");
    let classes = [
        class::CAR,
        class::TRUCK,
        class::BUS,
        class::BARRIER,
        class::MANMADE,
        class::TRAILER,
        class::CONSTRUCTION_VEHICLE,
        class::VEGETATION,
        class::PEDESTRIAN,
    ];
    let mut shapes = Vec::new();
    for (i, cls) in classes.iter().enumerate() {
        let gx = (i % 3) as f64 - 1.0;
        let gy = (i / 3) as f64 - 1.0;
        let h = [rng.gen_range(1.0..2.6), rng.gen_range(0.8..2.0), rng.gen_range(0.8..2.5)];
        shapes.push(ShapeSpec::new(
            ShapeKind::Box { half_extents: h },
            [gx * 7.5, gy * 7.5, -4.0 + h[2]],
            yaw(rng.gen_range(0.0..std::f64::consts::PI)),
            *cls,
        ));
    }
    (shapes, spec)
}

fn street(rng: &mut ChaCha8Rng) -> (Vec<ShapeSpec>, GridSpec) {
    use std::f64::consts::PI;
    let spec = GridSpec::default();
    let ground_top = -4.0;
    let mut shapes = vec![ShapeSpec::new(
        ShapeKind::GroundPlane { thickness: 1.0 },
        [0.0, 0.0, ground_top],
        UnitQuaternion::identity(),
        class::DRIVEABLE_SURFACE,
    )];
    // Sidewalks on both sides of a road running along x, one voxel above the road.
    for side in [-1.0, 1.0] {
        shapes.push(ShapeSpec::new(
            ShapeKind::Box {
                half_extents: [50.0, 1.5, 0.75],
            },
            [0.0, side * 9.5, ground_top - 0.25],
            UnitQuaternion::identity(),
            class::SIDEWALK,
        ));
        // Terrain strips beyond the sidewalks.
        shapes.push(ShapeSpec::new(
            ShapeKind::Box {
                half_extents: [50.0, 5.0, 0.5],
            },
            [0.0, side * 16.0, ground_top - 0.5],
            UnitQuaternion::identity(),
            class::TERRAIN,
        ));
    }
    // Buildings along the outer band.
    let mut x = -48.0;
    while x < 46.0 {
        for side in [-1.0, 1.0] {
            let hx = rng.gen_range(3.0..7.0);
            let hy = rng.gen_range(4.0..9.0);
            let hz = rng.gen_range(2.0..3.5);
            let cy: f64 = side * (22.0 + hy + rng.gen_range(0.0..4.0));
            if cy.abs() + hy > 50.0 {
                continue;
            }
            shapes.push(ShapeSpec::new(
                ShapeKind::Box {
                    half_extents: [hx, hy, hz],
                },
                [x + hx, cy, ground_top + hz],
                UnitQuaternion::identity(),
                class::MANMADE,
            ));
        }
        x += rng.gen_range(12.0..18.0);
    }
    // Vehicles on the road.
    for _ in 0..14 {
        let (cls, h) = match rng.gen_range(0..10) {
            0 => (class::TRUCK, [4.0, 1.25, 1.5]),
            1 => (class::BUS, [5.5, 1.4, 1.6]),
            _ => (class::CAR, [2.3, 1.0, 0.8]),
        };
        let lane = if rng.gen_bool(0.5) { -3.5 } else { 3.5 };
        let heading = if lane > 0.0 { 0.0 } else { PI } + rng.gen_range(-0.15..0.15);
        shapes.push(ShapeSpec::new(
            ShapeKind::Box { half_extents: h },
            [rng.gen_range(-44.0..44.0), lane + rng.gen_range(-0.6..0.6), ground_top + h[2]],
            yaw(heading),
            cls,
        ));
    }
    // Poles on the sidewalks.
    let mut x = -45.0;
    while x < 45.0 {
        for side in [-1.0, 1.0] {
            shapes.push(ShapeSpec::new(
                ShapeKind::Cylinder {
                    radius: 0.4,
                    half_height: 3.0,
                },
                [x + rng.gen_range(-1.0..1.0), side * 9.75, ground_top + 3.0],
                UnitQuaternion::identity(),
                class::MANMADE,
            ));
        }
        x += 15.0;
    }
    // Vegetation blobs on the terrain.
    for _ in 0..16 {
        let a = [rng.gen_range(1.5..3.0), rng.gen_range(1.5..3.0), rng.gen_range(1.5..2.5)];
        let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        shapes.push(ShapeSpec::new(
            ShapeKind::Ellipsoid { semi_axes: a },
            [rng.gen_range(-46.0..46.0), side * rng.gen_range(14.0..18.0), ground_top + a[2] * 0.8],
            yaw(rng.gen_range(0.0..PI)),
            class::VEGETATION,
        ));
    }
    (shapes, spec)
}

fn random_k(k: usize, rng: &mut ChaCha8Rng) -> (Vec<ShapeSpec>, GridSpec) {
    let spec = GridSpec::new([48, 48, 16], Vector3::new(-12.0, -12.0, -4.0), Vector3::repeat(0.5)).expect("valid preset grid");
    let lo = spec.origin;
    let hi = spec.max_corner();
    let mut shapes = Vec::with_capacity(k);
    for _ in 0..k {
        let cls = rng.gen_range(1..=DEFAULT_CLASSES as u8);
        let kind = match rng.gen_range(0..4) {
            0 => ShapeKind::Box {
                half_extents: [rng.gen_range(0.6..2.5), rng.gen_range(0.6..2.5), rng.gen_range(0.6..1.8)],
            },
            1 => ShapeKind::Cylinder {
                radius: rng.gen_range(0.5..1.8),
                half_height: rng.gen_range(0.6..1.8),
            },
            2 => ShapeKind::Ellipsoid {
                semi_axes: [rng.gen_range(0.8..2.5), rng.gen_range(0.8..2.5), rng.gen_range(0.6..1.8)],
            },
            _ => ShapeKind::Superquadric {
                scale: [rng.gen_range(0.8..2.2), rng.gen_range(0.8..2.2), rng.gen_range(0.6..1.6)],
                eps1: rng.gen_range(0.1..2.0),
                eps2: rng.gen_range(0.1..2.0),
            },
        };
        let mut shape = ShapeSpec::new(kind, [0.0; 3], yaw(rng.gen_range(0.0..std::f64::consts::PI)), cls);
        let r = shape.bounding_radius();
        shape.position = [
            rng.gen_range(lo.x + r..hi.x - r),
            rng.gen_range(lo.y + r..hi.y - r),
            rng.gen_range(lo.z + r..hi.z - r),
        ];
        shapes.push(shape);
    }
    (shapes, spec)
}

/// Named scene corpora, deterministic per seed. `random-<k>` generates `k`
/// random shapes fully inside the volume.
pub fn preset_scenes(name: &str, seed: u64) -> Result<(Vec<ShapeSpec>, GridSpec)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "single-box" => Ok(single_box()),
        "box-grid" => Ok(box_grid(&mut rng)),
        "street" => Ok(street(&mut rng)),
        _ => {
            if let Some(k) = name.strip_prefix("random-") {
                let k: usize = k
                    .parse()
                    .ok()
                    .filter(|k| *k > 0)
                    .ok_or_else(|| Error::invalid(format!("bad shape count in preset `{name}`")))?;
                return Ok(random_k(k, &mut rng));
            }
            Err(Error::invalid(format!("unknown preset `{name}` (known: single-box, box-grid, street, random-<k>)")))
        }
    }
}

/// Scene description accepted from a manifest file: either a preset or an
/// explicit grid and shape list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneManifest {
    Preset {
        preset: String,
        #[serde(default)]
        seed: u64,
    },
    Shapes {
        grid: GridSpec,
        shapes: Vec<ShapeSpec>,
        #[serde(default)]
        overlap: OverlapRule,
        #[serde(default = "default_classes")]
        classes: usize,
    },
}

fn default_classes() -> usize {
    DEFAULT_CLASSES
}

impl SceneManifest {
    pub fn build(&self) -> Result<OccupancyGrid> {
        match self {
            SceneManifest::Preset { preset, seed } => {
                let (shapes, spec) = preset_scenes(preset, *seed)?;
                generate_scene(&shapes, &spec, OverlapRule::LastWriterWins)
            }
            SceneManifest::Shapes {
                grid,
                shapes,
                overlap,
                classes,
            } => generate_scene_with_classes(shapes, grid, *overlap, *classes),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::canonical_implicit;

    fn unit_box() -> ShapeSpec {
        ShapeSpec::new(ShapeKind::Box { half_extents: [1.0; 3] }, [0.0; 3], UnitQuaternion::identity(), 1)
    }

    #[test]
    fn box_containment() {
        assert!(analytic_inside(&unit_box(), &Vector3::zeros()));
        assert!(!analytic_inside(&unit_box(), &Vector3::new(1.01, 0.0, 0.0)));
        let rotated = ShapeSpec {
            rotation: yaw(std::f64::consts::FRAC_PI_4),
            ..unit_box()
        };
        assert!(analytic_inside(&rotated, &Vector3::new(1.3, 0.0, 0.0)));
        assert!(!analytic_inside(&unit_box(), &Vector3::new(1.3, 0.0, 0.0)));
    }

    #[test]
    fn cylinder_and_plane_containment() {
        let c = ShapeSpec::new(ShapeKind::Cylinder { radius: 1.0, half_height: 2.0 }, [0.0; 3], UnitQuaternion::identity(), 1);
        assert!(analytic_inside(&c, &Vector3::new(0.7, 0.7, 1.9)));
        assert!(!analytic_inside(&c, &Vector3::new(0.8, 0.8, 0.0)));
        assert!(!analytic_inside(&c, &Vector3::new(0.0, 0.0, 2.1)));
        let g = ShapeSpec::new(ShapeKind::GroundPlane { thickness: 1.0 }, [0.0, 0.0, -4.0], UnitQuaternion::identity(), 1);
        assert!(analytic_inside(&g, &Vector3::new(1e3, -1e3, -4.5)));
        assert!(!analytic_inside(&g, &Vector3::new(0.0, 0.0, -3.9)));
    }

    #[test]
    fn superquadric_shape_agrees_with_implicit() {
        let s = ShapeSpec::new(
            ShapeKind::Superquadric {
                scale: [1.5, 1.0, 0.8],
                eps1: 0.1,
                eps2: 0.1,
            },
            [0.0; 3],
            UnitQuaternion::identity(),
            3,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20_000 {
            let p = Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let f = canonical_implicit(&p, &Vector3::new(1.5, 1.0, 0.8), 0.1, 0.1).unwrap();
            assert_eq!(analytic_inside(&s, &p), f <= 1.0);
        }
    }

    #[test]
    fn aligned_box_voxel_count() {
        let spec = GridSpec::new([10, 10, 10], Vector3::zeros(), Vector3::repeat(1.0)).unwrap();
        // Box [2, 6] x [3, 5] x [1, 8] contains centers 2.5..5.5 (4), 3.5..4.5 (2), 1.5..7.5 (7).
        let b = ShapeSpec::new(ShapeKind::Box { half_extents: [2.0, 1.0, 3.5] }, [4.0, 4.0, 4.5], UnitQuaternion::identity(), 2);
        let g = generate_scene(&[b], &spec, OverlapRule::LastWriterWins).unwrap();
        assert_eq!(g.occupied_count(), 4 * 2 * 7);
    }

    #[test]
    fn disjoint_shapes_are_additive() {
        let spec = GridSpec::new([10, 10, 10], Vector3::zeros(), Vector3::repeat(1.0)).unwrap();
        let a = ShapeSpec::new(ShapeKind::Box { half_extents: [1.0; 3] }, [2.0; 3], UnitQuaternion::identity(), 2);
        let b = ShapeSpec::new(ShapeKind::Ellipsoid { semi_axes: [1.5; 3] }, [7.0; 3], UnitQuaternion::identity(), 5);
        let ga = generate_scene(std::slice::from_ref(&a), &spec, OverlapRule::LastWriterWins).unwrap();
        let gb = generate_scene(std::slice::from_ref(&b), &spec, OverlapRule::LastWriterWins).unwrap();
        let both = generate_scene(&[a, b], &spec, OverlapRule::LastWriterWins).unwrap();
        let counts = both.class_counts();
        assert!(counts[2] > 0 && counts[5] > 0);
        assert_eq!(both.occupied_count(), ga.occupied_count() + gb.occupied_count());
    }

    #[test]
    fn overlap_rules() {
        let spec = GridSpec::new([4, 4, 4], Vector3::zeros(), Vector3::repeat(1.0)).unwrap();
        let a = ShapeSpec::new(ShapeKind::Box { half_extents: [2.0; 3] }, [2.0; 3], UnitQuaternion::identity(), 1);
        let b = ShapeSpec { class: 2, ..a.clone() };
        let last = generate_scene(&[a.clone(), b.clone()], &spec, OverlapRule::LastWriterWins).unwrap();
        let first = generate_scene(&[a, b], &spec, OverlapRule::FirstWriterWins).unwrap();
        assert!(last.labels.iter().all(|l| *l == 2));
        assert!(first.labels.iter().all(|l| *l == 1));
    }

    #[test]
    fn empty_and_invalid_inputs_rejected() {
        let spec = GridSpec::new([4, 4, 4], Vector3::zeros(), Vector3::repeat(1.0)).unwrap();
        assert!(matches!(generate_scene(&[], &spec, OverlapRule::LastWriterWins), Err(Error::InvalidArgument(_))));
        let bad = ShapeSpec { class: 0, ..unit_box() };
        assert!(generate_scene(&[bad], &spec, OverlapRule::LastWriterWins).is_err());
        assert!(preset_scenes("nope", 0).is_err());
        assert!(preset_scenes("random-0", 0).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(preset_scenes("single-box", 0).unwrap().0.len(), 1);
        let (shapes, spec) = preset_scenes("random-8", 3).unwrap();
        assert_eq!(shapes.len(), 8);
        let (lo, hi) = (spec.origin, spec.max_corner());
        for s in &shapes {
            let r = s.bounding_radius();
            for k in 0..3 {
                assert!(s.position[k] - r >= lo[k] && s.position[k] + r <= hi[k]);
            }
        }
        let (a, sa) = preset_scenes("street", 7).unwrap();
        let (b, sb) = preset_scenes("street", 7).unwrap();
        assert_eq!(sa, GridSpec::default());
        let ga = generate_scene(&a, &sa, OverlapRule::LastWriterWins).unwrap();
        let gb = generate_scene(&b, &sb, OverlapRule::LastWriterWins).unwrap();
        assert_eq!(ga, gb);
        let counts = ga.class_counts();
        for c in [class::DRIVEABLE_SURFACE, class::SIDEWALK, class::CAR, class::MANMADE, class::VEGETATION, class::TERRAIN] {
            assert!(counts[c as usize] > 0, "class {c} missing");
        }
    }

    #[test]
    fn voxelization_converges() {
        let shapes = [
            ShapeSpec::new(ShapeKind::Ellipsoid { semi_axes: [2.1, 1.3, 1.7] }, [0.13, -0.21, 0.07], yaw(0.4), 1),
            ShapeSpec::new(ShapeKind::Box { half_extents: [1.9, 1.2, 0.9] }, [0.11, 0.05, -0.17], yaw(0.7), 1),
            ShapeSpec::new(ShapeKind::Cylinder { radius: 1.4, half_height: 1.1 }, [0.03, 0.09, 0.02], UnitQuaternion::identity(), 1),
        ];
        for s in &shapes {
            let exact = s.volume().unwrap();
            let mut errs = Vec::new();
            for level in 0..4 {
                let h = 0.4 / 2f64.powi(level);
                let n = (6.0 / h) as usize;
                let spec = GridSpec::new([n; 3], Vector3::repeat(-3.0), Vector3::repeat(h)).unwrap();
                let g = generate_scene(std::slice::from_ref(s), &spec, OverlapRule::LastWriterWins).unwrap();
                let vol = g.occupied_count() as f64 * h * h * h;
                errs.push((vol - exact).abs() / exact);
            }
            for w in errs.windows(2) {
                assert!(w[1] < w[0], "{:?}: errors {errs:?}", s.kind);
            }
        }
    }

    #[test]
    fn manifest_parses_both_forms() {
        let m: SceneManifest = serde_json::from_str(r#"{"preset": "single-box", "seed": 4}"#).unwrap();
        assert_eq!(m.build().unwrap().occupied_count(), 12 * 8 * 6);
        let m: SceneManifest = serde_json::from_str(
            r#"{"grid": {"dims": [4,4,4], "origin": [0,0,0], "voxel_size": [1,1,1]},
                "shapes": [{"kind": "box", "half_extents": [1,1,1], "position": [2,2,2], "class": 3}]}"#,
        )
        .unwrap();
        let g = m.build().unwrap();
        assert_eq!(g.class_counts()[3], 8);
    }
}
