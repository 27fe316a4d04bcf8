//! Dense probability and label grids from primitive sets.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{accumulate, finish_occupancy, finish_semantics, FieldOptions, PreparedSet};
use crate::primitives::Primitive;

/// Default culling cutoff on the implicit value (`exp(-12) ~ 6e-6`).
pub const DEFAULT_CUTOFF_F: f64 = 12.0;

/// Default occupancy threshold used by [`discretize`].
pub const DEFAULT_TAU: f64 = 0.5;

/// Number of semantic (non-empty) classes in generated scenes.
pub const DEFAULT_CLASSES: usize = 16;

/// Axis-aligned voxel volume. Voxels are stored x-fastest:
/// `index = x + X * (y + Y * z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    /// Minimum corner, meters.
    pub origin: Vector3<f64>,
    pub voxel_size: Vector3<f64>,
}

impl Default for GridSpec {
    /// x, y in [-50, 50] m and z in [-5, 3] m at 200 x 200 x 16.
    fn default() -> Self {
        Self {
            dims: [200, 200, 16],
            origin: Vector3::new(-50.0, -50.0, -5.0),
            voxel_size: Vector3::new(0.5, 0.5, 0.5),
        }
    }
}

impl GridSpec {
    pub fn new(dims: [usize; 3], origin: Vector3<f64>, voxel_size: Vector3<f64>) -> Result<Self> {
        let s = Self { dims, origin, voxel_size };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid(format!("grid dims must be >= 1, got {:?}", self.dims)));
        }
        if self.voxel_size.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("voxel size must be finite and > 0"));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let yz = index / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    #[inline]
    pub fn center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin.x + (x as f64 + 0.5) * self.voxel_size.x,
            self.origin.y + (y as f64 + 0.5) * self.voxel_size.y,
            self.origin.z + (z as f64 + 0.5) * self.voxel_size.z,
        )
    }

    pub fn center_of(&self, index: usize) -> Vector3<f64> {
        let [x, y, z] = self.coords(index);
        self.center(x, y, z)
    }

    /// Maximum corner of the volume.
    pub fn max_corner(&self) -> Vector3<f64> {
        self.origin + Vector3::from_fn(|k, _| self.dims[k] as f64 * self.voxel_size[k])
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max_corner() - self.origin
    }

    pub fn voxel_diagonal(&self) -> f64 {
        self.voxel_size.norm()
    }

    /// Inclusive index range of voxel centers inside `[lo, hi]` along axis `k`.
    fn center_range(&self, lo: f64, hi: f64, k: usize) -> Option<(usize, usize)> {
        let n = self.dims[k] as f64;
        let a = ((lo - self.origin[k]) / self.voxel_size[k] - 0.5).ceil().max(0.0);
        let b = ((hi - self.origin[k]) / self.voxel_size[k] - 0.5).floor().min(n - 1.0);
        if !(a <= b) {
            return None;
        }
        Some((a as usize, b as usize))
    }
}

/// Voxel centers in storage order.
pub fn voxel_centers(spec: &GridSpec) -> impl Iterator<Item = Vector3<f64>> + '_ {
    (0..spec.voxel_count()).map(move |i| spec.center_of(i))
}

/// Occupancy probability and semantic distribution at every voxel center.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityGrid {
    pub spec: GridSpec,
    pub classes: usize,
    pub p_occ: Vec<f64>,
    /// `classes` entries per voxel.
    pub p_sem: Vec<f64>,
}

impl ProbabilityGrid {
    pub fn sem(&self, index: usize) -> &[f64] {
        &self.p_sem[index * self.classes..(index + 1) * self.classes]
    }
}

/// Dense label grid: 0 is empty, `1..=classes` are semantic classes.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub classes: usize,
    pub labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn empty(spec: GridSpec, classes: usize) -> Self {
        Self {
            spec,
            classes,
            labels: vec![0; spec.voxel_count()],
        }
    }

    pub fn new(spec: GridSpec, classes: usize, labels: Vec<u8>) -> Result<Self> {
        let g = Self { spec, classes, labels };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.classes == 0 || self.classes > u8::MAX as usize {
            return Err(Error::invalid(format!("class count {} not in 1..=255", self.classes)));
        }
        if self.labels.len() != self.spec.voxel_count() {
            return Err(Error::invalid(format!(
                "label count {} does not match grid size {}",
                self.labels.len(),
                self.spec.voxel_count()
            )));
        }
        if let Some((i, l)) = self.labels.iter().enumerate().find(|(_, l)| **l as usize > self.classes) {
            return Err(Error::invalid(format!("label {l} at voxel {i} exceeds class count {}", self.classes)));
        }
        Ok(())
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|l| **l != 0).count()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes + 1];
        for l in &self.labels {
            c[*l as usize] += 1;
        }
        c
    }
}

/// Work counters collected while rasterizing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RasterStats {
    /// Voxel centers inside some primitive's world support box.
    pub box_voxels: u64,
    /// Implicit-function evaluations performed.
    pub evaluations: u64,
}

/// Rasterizes with default field options and the given culling cutoff.
pub fn rasterize<P: Primitive>(prims: &[P], spec: &GridSpec, cutoff_f: f64) -> Result<ProbabilityGrid> {
    let opts = FieldOptions {
        cutoff_f,
        ..FieldOptions::default()
    };
    Ok(rasterize_with(prims, spec, opts)?.0)
}

/// Accumulates each primitive only over the voxels inside its support box,
/// then finalizes occupancy and semantics per voxel.
pub fn rasterize_with<P: Primitive>(prims: &[P], spec: &GridSpec, opts: FieldOptions) -> Result<(ProbabilityGrid, RasterStats)> {
    spec.validate()?;
    let set = PreparedSet::new(prims, opts)?;
    let classes = set.classes();
    let n = spec.voxel_count();
    let mut log_empty = vec![0.0f64; n];
    let mut den = vec![0.0f64; n];
    let mut num = vec![0.0f64; n * classes];
    let mut stats = RasterStats::default();
    for (i, prim) in prims.iter().enumerate() {
        let (lo, hi) = set.world_bounds(i);
        let Some((x0, x1)) = spec.center_range(lo.x, hi.x, 0) else { continue };
        let Some((y0, y1)) = spec.center_range(lo.y, hi.y, 1) else { continue };
        let Some((z0, z1)) = spec.center_range(lo.z, hi.z, 2) else { continue };
        let sem = prim.semantics();
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    stats.box_voxels += 1;
                    let c = spec.center(x, y, z);
                    let Some(contrib) = set.contribution(i, &c) else { continue };
                    stats.evaluations += 1;
                    let v = spec.index(x, y, z);
                    accumulate(
                        &mut log_empty[v],
                        &mut den[v],
                        &mut num[v * classes..(v + 1) * classes],
                        contrib.alpha,
                        contrib.weight,
                        sem,
                    );
                }
            }
        }
    }
    let p_occ = log_empty.iter().map(|l| finish_occupancy(*l)).collect();
    let mut p_sem = Vec::with_capacity(n * classes);
    for v in 0..n {
        p_sem.extend(finish_semantics(den[v], &num[v * classes..(v + 1) * classes]));
    }
    Ok((
        ProbabilityGrid {
            spec: *spec,
            classes,
            p_occ,
            p_sem,
        },
        stats,
    ))
}

/// Labels voxels with `p_occ >= tau` by their most probable class (lowest
/// index on ties); the rest are empty.
pub fn discretize(grid: &ProbabilityGrid, tau: f64) -> Result<OccupancyGrid> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
    }
    let labels = (0..grid.spec.voxel_count())
        .map(|v| {
            if grid.p_occ[v] < tau {
                return 0u8;
            }
            let sem = grid.sem(v);
            let mut best = 0;
            for k in 1..sem.len() {
                if sem[k] > sem[best] {
                    best = k;
                }
            }
            (best + 1) as u8
        })
        .collect();
    Ok(OccupancyGrid {
        spec: grid.spec,
        classes: grid.classes,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::{Superquadric, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64, n: usize, spec: &GridSpec) -> Vec<Superquadric> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = spec.origin;
        let hi = spec.max_corner();
        (0..n)
            .map(|_| {
                let k = rng.gen_range(0..3);
                let mut sem = vec![0.1; 3];
                sem[k] = 0.8;
                Superquadric {
                    position: Vector3::from_fn(|i, _| rng.gen_range(lo[i]..hi[i])),
                    scale: Vector3::from_fn(|_, _| rng.gen_range(0.3..2.0)),
                    rotation: UnitQuaternion::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ),
                    opacity: rng.gen_range(0.2..1.0),
                    eps1: rng.gen_range(0.1..2.0),
                    eps2: rng.gen_range(0.1..2.0),
                    semantics: sem,
                }
            })
            .collect()
    }

    fn cube(n: usize) -> GridSpec {
        GridSpec::new([n, n, n], Vector3::repeat(-(n as f64) / 4.0), Vector3::repeat(0.5)).unwrap()
    }

    #[test]
    fn voxel_center_examples() {
        let one = GridSpec::new([1, 1, 1], Vector3::zeros(), Vector3::repeat(1.0)).unwrap();
        assert_eq!(voxel_centers(&one).collect::<Vec<_>>(), vec![Vector3::repeat(0.5)]);
        let paper = GridSpec::default();
        assert_eq!(voxel_centers(&paper).next().unwrap(), Vector3::new(-49.75, -49.75, -4.75));
        assert_eq!(voxel_centers(&paper).count(), 200 * 200 * 16);
        let s = cube(3);
        for (i, c) in voxel_centers(&s).enumerate() {
            let [x, y, z] = s.coords(i);
            assert_eq!(s.index(x, y, z), i);
            assert_eq!(c, s.center(x, y, z));
        }
        assert!(GridSpec::new([0, 1, 1], Vector3::zeros(), Vector3::repeat(1.0)).is_err());
    }

    #[test]
    fn center_voxel_is_fully_occupied() {
        let spec = cube(8);
        let c = spec.center(3, 4, 5);
        let q = Superquadric {
            position: c,
            scale: Vector3::repeat(1.0),
            rotation: UnitQuaternion::identity(),
            opacity: 1.0,
            eps1: 1.0,
            eps2: 1.0,
            semantics: vec![1.0],
        };
        let g = rasterize(&[q], &spec, DEFAULT_CUTOFF_F).unwrap();
        // Per-primitive occupancy is clamped at 1 - 1e-12.
        assert!((g.p_occ[spec.index(3, 4, 5)] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn far_region_is_empty_and_untouched_voxels_uniform() {
        let spec = GridSpec::new([40, 4, 4], Vector3::zeros(), Vector3::repeat(0.5)).unwrap();
        let q = Superquadric {
            position: Vector3::new(1.0, 1.0, 1.0),
            scale: Vector3::repeat(0.5),
            rotation: UnitQuaternion::identity(),
            opacity: 1.0,
            eps1: 0.5,
            eps2: 0.5,
            semantics: vec![0.9, 0.1],
        };
        let g = rasterize(&[q], &spec, DEFAULT_CUTOFF_F).unwrap();
        let far = spec.index(39, 2, 2);
        assert!(g.p_occ[far] < 1e-6);
        assert_eq!(g.p_occ[far], 0.0);
        assert_eq!(g.sem(far), &[0.5, 0.5]);
        let e: Vec<Superquadric> = vec![];
        assert!(matches!(rasterize(&e, &spec, 12.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn uncull_matches_field_bitwise() {
        let spec = cube(12);
        let prims = random_set(11, 20, &spec);
        let g = rasterize(&prims, &spec, f64::INFINITY).unwrap();
        let set = PreparedSet::new(&prims, FieldOptions::default()).unwrap();
        for (v, c) in voxel_centers(&spec).enumerate() {
            let s = set.sample(&c);
            assert_eq!(s.p_occ.to_bits(), g.p_occ[v].to_bits());
            assert_eq!(s.p_sem.as_slice(), g.sem(v));
        }
    }

    #[test]
    fn culling_error_is_bounded() {
        let spec = cube(16);
        let prims = random_set(5, 30, &spec);
        let full = rasterize(&prims, &spec, f64::INFINITY).unwrap();
        for cutoff in [4.0, 8.0, 12.0, 20.0] {
            let culled = rasterize(&prims, &spec, cutoff).unwrap();
            let bound = (-cutoff).exp() * prims.len() as f64;
            let max = full.p_occ.iter().zip(&culled.p_occ).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(max <= bound, "cutoff {cutoff}: {max} > {bound}");
        }
    }

    #[test]
    fn work_scales_with_support_volume() {
        let spec = cube(24);
        let mut prims = random_set(9, 40, &spec);
        for p in &mut prims {
            p.scale *= 0.3;
        }
        let (_, stats) = rasterize_with(&prims, &spec, FieldOptions { cutoff_f: 6.0, ..Default::default() }).unwrap();
        assert!(stats.evaluations <= stats.box_voxels);
        assert!(stats.box_voxels < (prims.len() * spec.voxel_count()) as u64 / 4);
        let (_, full) = rasterize_with(&prims, &spec, FieldOptions::default()).unwrap();
        assert_eq!(full.evaluations, (prims.len() * spec.voxel_count()) as u64);
    }

    #[test]
    fn discretize_examples() {
        let spec = GridSpec::new([3, 1, 1], Vector3::zeros(), Vector3::repeat(1.0)).unwrap();
        let g = ProbabilityGrid {
            spec,
            classes: 2,
            p_occ: vec![0.9, 0.4, 0.8],
            p_sem: vec![0.7, 0.3, 0.7, 0.3, 0.5, 0.5],
        };
        let o = discretize(&g, 0.5).unwrap();
        assert_eq!(o.labels, vec![1, 0, 1]);
        assert!(discretize(&g, 1.0).is_err());
        assert!(discretize(&g, 0.0).is_err());
    }

    #[test]
    fn discretize_is_idempotent() {
        let spec = cube(6);
        let prims = random_set(2, 6, &spec);
        let g = rasterize(&prims, &spec, 12.0).unwrap();
        let once = discretize(&g, 0.5).unwrap();
        // Re-threshold a grid rebuilt from the labels.
        let mut back = g.clone();
        for v in 0..spec.voxel_count() {
            back.p_occ[v] = if once.labels[v] == 0 { 0.0 } else { 1.0 };
            for k in 0..back.classes {
                back.p_sem[v * back.classes + k] = if once.labels[v] as usize == k + 1 { 1.0 } else { 0.0 };
            }
        }
        assert_eq!(discretize(&back, 0.5).unwrap(), once);
    }
}
