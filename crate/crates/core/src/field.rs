//! Occupancy and semantic probability fields of primitive mixtures, with
//! analytic parameter gradients.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::primitives::{rotmat_with_jacobian, GaussianPrimitive, ImplicitForm, Primitive, Superquadric, UnitQuaternion};

/// Per-primitive occupancy is clamped below this before entering the product.
pub const ALPHA_MAX: f64 = 1.0 - 1e-12;

/// Below this semantic denominator the aggregated distribution is uniform.
pub const SEM_DENOM_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOptions {
    /// Use `a_i * p_i` instead of `p_i` inside the occupancy product.
    pub opacity_scaled: bool,
    pub form: ImplicitForm,
    /// Primitives contribute only where their implicit value is inside the
    /// support box for this cutoff; `INFINITY` disables culling.
    pub cutoff_f: f64,
}

impl Default for FieldOptions {
    fn default() -> Self {
        Self {
            opacity_scaled: false,
            form: ImplicitForm::Standard,
            cutoff_f: f64::INFINITY,
        }
    }
}

/// Occupancy probability and semantic distribution at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub p_occ: f64,
    pub p_sem: Vec<f64>,
}

/// `R (x - m)` with `R` built from `r`.
pub fn local_coords(x: &Vector3<f64>, m: &Vector3<f64>, r: &UnitQuaternion) -> Result<Vector3<f64>> {
    Ok(r.to_rotation_matrix()? * (x - m))
}

pub fn quadric_occupancy(x: &Vector3<f64>, q: &Superquadric) -> Result<f64> {
    quadric_occupancy_with(x, q, ImplicitForm::Standard)
}

pub fn quadric_occupancy_with(x: &Vector3<f64>, q: &Superquadric, form: ImplicitForm) -> Result<f64> {
    let u = local_coords(x, &q.position, &q.rotation)?;
    Ok((-q.implicit(&u, form)).exp())
}

pub fn gaussian_occupancy(x: &Vector3<f64>, g: &GaussianPrimitive) -> Result<f64> {
    let u = local_coords(x, &g.position, &g.rotation)?;
    Ok((-g.implicit(&u, ImplicitForm::Standard)).exp())
}

pub fn mixture_occupancy<P: Primitive>(x: &Vector3<f64>, prims: &[P], opts: FieldOptions) -> Result<f64> {
    Ok(PreparedSet::new(prims, opts)?.sample(x).p_occ)
}

pub fn mixture_semantics<P: Primitive>(x: &Vector3<f64>, prims: &[P], opts: FieldOptions) -> Result<Vec<f64>> {
    Ok(PreparedSet::new(prims, opts)?.sample(x).p_sem)
}

/// Running sums of the mixture at one location. Accumulation order is the
/// primitive order, which the rasterizer reproduces exactly.
#[derive(Debug, Clone)]
pub(crate) struct Accum {
    pub log_empty: f64,
    pub den: f64,
    pub num: Vec<f64>,
}

impl Accum {
    pub fn new(classes: usize) -> Self {
        Self {
            log_empty: 0.0,
            den: 0.0,
            num: vec![0.0; classes],
        }
    }

    #[inline]
    pub fn add(&mut self, alpha: f64, weight: f64, sem: &[f64]) {
        accumulate(&mut self.log_empty, &mut self.den, &mut self.num, alpha, weight, sem);
    }

    pub fn finish(&self) -> FieldSample {
        FieldSample {
            p_occ: finish_occupancy(self.log_empty),
            p_sem: finish_semantics(self.den, &self.num),
        }
    }
}

#[inline]
pub(crate) fn accumulate(log_empty: &mut f64, den: &mut f64, num: &mut [f64], alpha: f64, weight: f64, sem: &[f64]) {
    *log_empty += (-alpha).ln_1p();
    *den += weight;
    for (n, c) in num.iter_mut().zip(sem) {
        *n += weight * c;
    }
}

#[inline]
pub(crate) fn finish_occupancy(log_empty: f64) -> f64 {
    -log_empty.exp_m1()
}

pub(crate) fn finish_semantics(den: f64, num: &[f64]) -> Vec<f64> {
    if den < SEM_DENOM_MIN {
        let c = num.len();
        return vec![1.0 / c as f64; c];
    }
    num.iter().map(|n| n / den).collect()
}

/// One primitive's contribution at a point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    pub p: f64,
    pub alpha: f64,
    pub alpha_clamped: bool,
    pub weight: f64,
}

/// Uniform bins over a region listing, per cell, the primitives whose world
/// support box overlaps it (ascending index order).
#[derive(Debug, Clone)]
struct BinIndex {
    lo: Vector3<f64>,
    cell: Vector3<f64>,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl BinIndex {
    fn cell_of(&self, x: &Vector3<f64>) -> Option<usize> {
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let t = (x[k] - self.lo[k]) / self.cell[k];
            if !(t >= 0.0) || t >= self.dims[k] as f64 {
                return None;
            }
            idx[k] = t as usize;
        }
        Some(idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2]))
    }
}

/// A primitive list with rotations and support boxes precomputed, ready for
/// repeated evaluation.
#[derive(Debug, Clone)]
pub struct PreparedSet<'a, P: Primitive> {
    prims: &'a [P],
    opts: FieldOptions,
    classes: usize,
    rot: Vec<Matrix3<f64>>,
    jac: Vec<[Matrix3<f64>; 4]>,
    support: Vec<Vector3<f64>>,
    aabb: Vec<(Vector3<f64>, Vector3<f64>)>,
    index: Option<BinIndex>,
}

impl<'a, P: Primitive> PreparedSet<'a, P> {
    pub fn new(prims: &'a [P], opts: FieldOptions) -> Result<Self> {
        let first = prims.first().ok_or_else(|| Error::invalid("empty primitive list"))?;
        let classes = first.semantics().len();
        let mut rot = Vec::with_capacity(prims.len());
        let mut jac = Vec::with_capacity(prims.len());
        let mut support = Vec::with_capacity(prims.len());
        let mut aabb = Vec::with_capacity(prims.len());
        for (i, p) in prims.iter().enumerate() {
            if p.semantics().len() != classes {
                return Err(Error::invalid(format!("primitive {i} has {} classes, expected {classes}", p.semantics().len())));
            }
            let (r, dr) = rotmat_with_jacobian(&p.rotation())?;
            jac.push(dr);
            let h = p.support(opts.cutoff_f, opts.form);
            // World half-extents of the rotated local box: x - m = R^T u.
            let half = Vector3::from_fn(|j, _| (0..3).map(|k| r[(k, j)].abs() * h[k]).sum::<f64>());
            let half = half.map(|v| if v.is_nan() { f64::INFINITY } else { v });
            aabb.push((p.position() - half, p.position() + half));
            rot.push(r);
            support.push(h);
        }
        Ok(Self {
            prims,
            opts,
            classes,
            rot,
            jac,
            support,
            aabb,
            index: None,
        })
    }

    /// Builds a bin index over `[lo, hi]`; lookups outside fall back to a full scan.
    pub fn with_index(mut self, lo: Vector3<f64>, hi: Vector3<f64>, dims: [usize; 3]) -> Self {
        if self.opts.cutoff_f.is_infinite() {
            return self;
        }
        let cell = Vector3::from_fn(|k, _| (hi[k] - lo[k]) / dims[k] as f64);
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let range = |a: f64, b: f64, k: usize| -> (usize, usize) {
            let n = dims[k] as f64;
            let i0 = ((a - lo[k]) / cell[k]).floor().clamp(0.0, n - 1.0) as usize;
            let i1 = ((b - lo[k]) / cell[k]).floor().clamp(0.0, n - 1.0) as usize;
            (i0, i1)
        };
        for (i, (a, b)) in self.aabb.iter().enumerate() {
            if (0..3).any(|k| b[k] < lo[k] || a[k] > hi[k]) {
                continue;
            }
            let (x0, x1) = range(a.x, b.x, 0);
            let (y0, y1) = range(a.y, b.y, 1);
            let (z0, z1) = range(a.z, b.z, 2);
            for z in z0..=z1 {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        cells[x + dims[0] * (y + dims[1] * z)].push(i as u32);
                    }
                }
            }
        }
        self.index = Some(BinIndex { lo, cell, dims, cells });
        self
    }

    pub fn primitives(&self) -> &'a [P] {
        self.prims
    }

    pub fn options(&self) -> FieldOptions {
        self.opts
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[cfg(test)]
    pub(crate) fn rotation(&self, i: usize) -> &Matrix3<f64> {
        &self.rot[i]
    }

    /// World-space bounding box of primitive `i`'s support.
    pub fn world_bounds(&self, i: usize) -> (Vector3<f64>, Vector3<f64>) {
        self.aabb[i]
    }

    /// Visits candidate primitive indices for `x` in ascending order.
    #[inline]
    pub(crate) fn for_candidates(&self, x: &Vector3<f64>, mut f: impl FnMut(usize)) {
        if let Some(ix) = &self.index {
            if let Some(c) = ix.cell_of(x) {
                for &i in &ix.cells[c] {
                    f(i as usize);
                }
                return;
            }
        }
        for i in 0..self.prims.len() {
            f(i);
        }
    }

    /// Contribution of primitive `i` at `x`, or `None` when `x` lies outside
    /// its support box.
    #[inline]
    pub(crate) fn contribution(&self, i: usize, x: &Vector3<f64>) -> Option<Contribution> {
        let (lo, hi) = &self.aabb[i];
        if (0..3).any(|k| x[k] < lo[k] || x[k] > hi[k]) {
            return None;
        }
        let prim = &self.prims[i];
        let local = self.rot[i] * (x - prim.position());
        let h = &self.support[i];
        if (0..3).any(|k| local[k].abs() > h[k]) {
            return None;
        }
        let p = (-prim.implicit(&local, self.opts.form)).exp();
        Some(self.finish_contribution(prim, p))
    }

    #[inline]
    fn finish_contribution(&self, prim: &P, p: f64) -> Contribution {
        let raw = if self.opts.opacity_scaled { prim.opacity() * p } else { p };
        let alpha_clamped = raw > ALPHA_MAX;
        Contribution {
            p,
            alpha: if alpha_clamped { ALPHA_MAX } else { raw },
            alpha_clamped,
            weight: p * prim.opacity(),
        }
    }

    pub fn sample(&self, x: &Vector3<f64>) -> FieldSample {
        let mut acc = Accum::new(self.classes);
        self.for_candidates(x, |i| {
            if let Some(c) = self.contribution(i, x) {
                acc.add(c.alpha, c.weight, self.prims[i].semantics());
            }
        });
        acc.finish()
    }

    /// Adds the gradient of a scalar objective at `x` into `out`, given the
    /// objective's derivatives with respect to `p_occ` and `p_sem`.
    pub fn accumulate_point_gradient(&self, x: &Vector3<f64>, d_occ: f64, d_sem: &[f64], out: &mut ParamGradient) -> Result<()> {
        let form = self.opts.form;
        // Forward pass over contributing primitives with implicit gradients.
        let mut terms: Vec<(usize, Contribution, crate::primitives::ImplicitGrad)> = Vec::new();
        let mut acc = Accum::new(self.classes);
        self.for_candidates(x, |i| {
            let (lo, hi) = &self.aabb[i];
            if (0..3).any(|k| x[k] < lo[k] || x[k] > hi[k]) {
                return;
            }
            let prim = &self.prims[i];
            let local = self.rot[i] * (x - prim.position());
            let h = &self.support[i];
            if (0..3).any(|k| local[k].abs() > h[k]) {
                return;
            }
            let g = prim.implicit_grad(&local, form);
            let c = self.finish_contribution(prim, (-g.f).exp());
            acc.add(c.alpha, c.weight, prim.semantics());
            terms.push((i, c, g));
        });
        if terms.is_empty() {
            return Ok(());
        }
        let p_sem = finish_semantics(acc.den, &acc.num);
        let sem_active = acc.den >= SEM_DENOM_MIN;
        let mut d_c = vec![0.0; self.classes];
        for (i, c, g) in terms {
            let prim = &self.prims[i];
            let a = prim.opacity();
            let sem = prim.semantics();
            let mut d_p = 0.0;
            let mut d_a = 0.0;
            if !c.alpha_clamped {
                // Product of (1 - alpha_j) over j != i.
                let others = (acc.log_empty - (-c.alpha).ln_1p()).exp();
                let d_alpha = d_occ * others;
                if self.opts.opacity_scaled {
                    d_p += d_alpha * a;
                    d_a += d_alpha * c.p;
                } else {
                    d_p += d_alpha;
                }
            }
            let row = out.row_mut(i);
            if sem_active {
                let dot: f64 = d_sem.iter().zip(sem).zip(&p_sem).map(|((g, ci), ps)| g * (ci - ps)).sum::<f64>() / acc.den;
                d_p += a * dot;
                d_a += c.p * dot;
                // Softmax Jacobian maps d/dc into logit space.
                let scale = c.weight / acc.den;
                for (k, dk) in d_c.iter_mut().enumerate() {
                    *dk = d_sem[k] * scale;
                }
                let mean: f64 = d_c.iter().zip(sem).map(|(d, s)| d * s).sum();
                for k in 0..self.classes {
                    row[LOGITS + k] += sem[k] * (d_c[k] - mean);
                }
            }
            row[OPACITY] += d_a;
            if g.clamped {
                continue;
            }
            let d_f = -c.p * d_p;
            if d_f == 0.0 {
                continue;
            }
            let d_local = g.d_local * d_f;
            for k in 0..3 {
                row[SCALE + k] += g.d_scale[k] * d_f;
            }
            row[EPS] += g.d_eps[0] * d_f;
            row[EPS + 1] += g.d_eps[1] * d_f;
            let r = &self.rot[i];
            let d_m = -(r.transpose() * d_local);
            for k in 0..3 {
                row[POSITION + k] += d_m[k];
            }
            let delta = x - prim.position();
            let jac = &self.jac[i];
            for k in 0..4 {
                row[QUATERNION + k] += d_local.dot(&(jac[k] * delta));
            }
        }
        Ok(())
    }
}

pub const POSITION: usize = 0;
pub const SCALE: usize = 3;
pub const QUATERNION: usize = 6;
pub const OPACITY: usize = 10;
pub const EPS: usize = 11;
pub const LOGITS: usize = 13;

/// Per-primitive partial derivatives laid out as
/// `[position 3 | scale 3 | quaternion 4 | opacity | eps1, eps2 | logits C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    classes: usize,
    data: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros(primitives: usize, classes: usize) -> Self {
        Self {
            classes,
            data: vec![0.0; primitives * (LOGITS + classes)],
        }
    }

    pub fn stride(&self) -> usize {
        LOGITS + self.classes
    }

    pub fn primitive_count(&self) -> usize {
        self.data.len() / self.stride()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.row(i)[POSITION..POSITION + 3])
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.row(i)[SCALE..SCALE + 3])
    }

    pub fn quaternion(&self, i: usize) -> [f64; 4] {
        let r = self.row(i);
        [r[QUATERNION], r[QUATERNION + 1], r[QUATERNION + 2], r[QUATERNION + 3]]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        self.row(i)[OPACITY]
    }

    pub fn eps(&self, i: usize) -> [f64; 2] {
        let r = self.row(i);
        [r[EPS], r[EPS + 1]]
    }

    pub fn logits(&self, i: usize) -> &[f64] {
        &self.row(i)[LOGITS..]
    }

    pub fn add_assign(&mut self, other: &ParamGradient) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Upstream derivatives of a scalar objective at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTarget {
    pub d_occ: f64,
    pub d_sem: Vec<f64>,
}

/// Points per fixed reduction chunk; partial gradients are summed in chunk
/// order, so results do not depend on the thread count.
const CHUNK: usize = 256;

/// Gradient of `sum_j L_j(p_occ(x_j), p_sem(x_j))` with respect to every
/// primitive parameter, given the per-point derivatives of `L_j`.
pub fn field_gradients<P: Primitive>(
    points: &[Vector3<f64>],
    targets: &[PointTarget],
    prims: &[P],
    opts: FieldOptions,
) -> Result<ParamGradient> {
    let set = PreparedSet::new(prims, opts)?;
    set_gradients(&set, points, targets)
}

pub fn set_gradients<P: Primitive>(set: &PreparedSet<'_, P>, points: &[Vector3<f64>], targets: &[PointTarget]) -> Result<ParamGradient> {
    if points.len() != targets.len() {
        return Err(Error::invalid(format!("{} points but {} targets", points.len(), targets.len())));
    }
    for (j, t) in targets.iter().enumerate() {
        if !t.d_occ.is_finite() || t.d_sem.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite target gradient at point {j}")));
        }
        if t.d_sem.len() != set.classes() {
            return Err(Error::invalid(format!("target {j} has {} classes, expected {}", t.d_sem.len(), set.classes())));
        }
    }
    let n = set.primitives().len();
    let c = set.classes();
    let chunk_grad = |start: usize| -> Result<ParamGradient> {
        let mut g = ParamGradient::zeros(n, c);
        let end = (start + CHUNK).min(points.len());
        for j in start..end {
            set.accumulate_point_gradient(&points[j], targets[j].d_occ, &targets[j].d_sem, &mut g)?;
        }
        Ok(g)
    };
    let starts: Vec<usize> = (0..points.len()).step_by(CHUNK).collect();
    let partials: Vec<Result<ParamGradient>> = crate::parallel::map(&starts, |s| chunk_grad(*s));
    let mut total = ParamGradient::zeros(n, c);
    for p in partials {
        total.add_assign(&p?);
    }
    Ok(total)
}
