//! Per-scene fitting of a fixed-size primitive set to an occupancy grid.
//!
//! Parameters live in an unconstrained flat vector (see [`ParamVector`]) and
//! are decoded into valid primitives before every evaluation. Updates use
//! adaptive moments with decoupled weight decay and a cosine learning-rate
//! schedule; a single prune-and-split event reallocates the smallest
//! primitives onto the largest ones part-way through.

use nalgebra::Vector3;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{set_gradients, FieldOptions, ParamGradient, PointTarget, PreparedSet, EPS, LOGITS, OPACITY, POSITION, QUATERNION, SCALE};
use crate::losses::{evaluate_losses, inverse_frequency_weights, LossReport, LossWeights};
use crate::metrics::{evaluate, Evaluation};
use crate::primitives::{
    ExponentBounds, GaussianPrimitive, ImplicitForm, Primitive, PrimitiveKind, PrimitiveSet, Superquadric, UnitQuaternion,
};
use crate::rasterizer::{discretize, rasterize_with, GridSpec, OccupancyGrid, DEFAULT_CUTOFF_F, DEFAULT_TAU};

/// Smallest scale any primitive may take, meters.
pub const SCALE_MIN: f64 = 1e-3;

/// Learning-rate multipliers per parameter group. The position multiplier is
/// applied on top of the grid's mean voxel edge, so positions move in voxel
/// units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrScales {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub eps: f64,
    pub semantics: f64,
}

impl Default for LrScales {
    fn default() -> Self {
        Self {
            position: 1.0,
            scale: 1.0,
            rotation: 1.0,
            opacity: 1.0,
            eps: 1.0,
            semantics: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub primitive_count: usize,
    pub kind: PrimitiveKind,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub eps_bounds: ExponentBounds,
    /// Primitives pruned (and as many split); `None` means half the count.
    pub prune_split_count: Option<usize>,
    /// Iteration of the prune-and-split event; `None` means 60% of the run.
    pub prune_split_at: Option<usize>,
    pub loss_weights: LossWeights,
    pub rng_seed: u64,
    pub batch_points: usize,
    pub cutoff_f: f64,
    pub tau: f64,
    pub opacity_scaled: bool,
    pub form: ImplicitForm,
    pub cosine_schedule: bool,
    /// Evaluate IoU/mIoU every this many iterations (0: only at the end).
    pub eval_every: usize,
    pub inverse_frequency_weights: bool,
    pub lr_scales: LrScales,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            primitive_count: 1600,
            kind: PrimitiveKind::Superquadric,
            iterations: 2000,
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.01,
            eps_bounds: ExponentBounds::default(),
            prune_split_count: None,
            prune_split_at: None,
            loss_weights: LossWeights::default(),
            rng_seed: 0,
            batch_points: 8192,
            cutoff_f: DEFAULT_CUTOFF_F,
            tau: DEFAULT_TAU,
            opacity_scaled: false,
            form: ImplicitForm::Standard,
            cosine_schedule: true,
            eval_every: 0,
            inverse_frequency_weights: false,
            lr_scales: LrScales::default(),
        }
    }
}

impl FitConfig {
    pub fn prune_split_count(&self) -> usize {
        self.prune_split_count.unwrap_or(self.primitive_count / 2)
    }

    pub fn prune_split_at(&self) -> usize {
        self.prune_split_at.unwrap_or(self.iterations * 3 / 5)
    }

    pub fn field_options(&self) -> FieldOptions {
        FieldOptions {
            opacity_scaled: self.opacity_scaled,
            form: self.form,
            cutoff_f: self.cutoff_f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.primitive_count == 0 {
            return bad("primitive_count must be positive".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{n} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        self.eps_bounds.validate()?;
        if 2 * self.prune_split_count() > self.primitive_count {
            return bad(format!(
                "prune_split_count {} exceeds half of primitive_count {}",
                self.prune_split_count(),
                self.primitive_count
            ));
        }
        if self.batch_points == 0 {
            return bad("batch_points must be positive".into());
        }
        if !(self.cutoff_f > 0.0) {
            return bad("cutoff_f must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Flat unconstrained parameters, one row per primitive:
/// `[position 3 | log-scale 3 | raw quaternion 4 | opacity logit | eps raw 2 | semantic logits C]`.
/// Gaussian rows carry inert eps slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub kind: PrimitiveKind,
    pub classes: usize,
    pub bounds: ExponentBounds,
    pub scale_max: f64,
    pub data: Vec<f64>,
}

struct Decoded {
    position: Vector3<f64>,
    scale: Vector3<f64>,
    rotation: UnitQuaternion,
    opacity: f64,
    eps: [f64; 2],
    semantics: Vec<f64>,
}

impl ParamVector {
    pub fn stride(&self) -> usize {
        LOGITS + self.classes
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let s = self.stride();
        &self.data[i * s..(i + 1) * s]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.stride();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn from_set(set: &PrimitiveSet, bounds: ExponentBounds, scale_max: f64) -> Result<Self> {
        bounds.validate()?;
        let classes = set.classes();
        if set.is_empty() || classes == 0 {
            return Err(Error::invalid("cannot parameterize an empty primitive set"));
        }
        let mut pv = Self {
            kind: set.kind(),
            classes,
            bounds,
            scale_max,
            data: vec![0.0; set.len() * (LOGITS + classes)],
        };
        for i in 0..set.len() {
            pv.encode_from(set, i);
        }
        Ok(pv)
    }

    fn encode_from(&mut self, set: &PrimitiveSet, i: usize) {
        match set {
            PrimitiveSet::Superquadric(v) => {
                let p = &v[i];
                self.encode(i, &p.position, &p.scale, &p.rotation, p.opacity, [p.eps1, p.eps2], &p.semantics);
            }
            PrimitiveSet::Gaussian(v) => {
                let p = &v[i];
                self.encode(i, &p.position, &p.scale, &p.rotation, p.opacity, [1.0, 1.0], &p.semantics);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn encode(&mut self, i: usize, pos: &Vector3<f64>, scale: &Vector3<f64>, rot: &UnitQuaternion, opacity: f64, eps: [f64; 2], sem: &[f64]) {
        let (lo, hi) = (self.bounds.lo, self.bounds.hi);
        let row = self.row_mut(i);
        for k in 0..3 {
            row[POSITION + k] = pos[k];
            row[SCALE + k] = scale[k].max(SCALE_MIN).ln();
        }
        row[QUATERNION..QUATERNION + 4].copy_from_slice(&rot.as_array());
        row[OPACITY] = logit(opacity);
        for k in 0..2 {
            row[EPS + k] = logit((eps[k] - lo) / (hi - lo));
        }
        for (k, c) in sem.iter().enumerate() {
            row[LOGITS + k] = c.max(1e-12).ln();
        }
    }

    fn decode(&self, i: usize) -> Decoded {
        let row = self.row(i);
        let (lo, hi) = (self.bounds.lo, self.bounds.hi);
        Decoded {
            position: Vector3::new(row[POSITION], row[POSITION + 1], row[POSITION + 2]),
            scale: Vector3::from_fn(|k, _| row[SCALE + k].exp().clamp(SCALE_MIN, self.scale_max)),
            rotation: UnitQuaternion::new(row[QUATERNION], row[QUATERNION + 1], row[QUATERNION + 2], row[QUATERNION + 3]),
            opacity: sigmoid(row[OPACITY]),
            eps: [lo + (hi - lo) * sigmoid(row[EPS]), lo + (hi - lo) * sigmoid(row[EPS + 1])],
            semantics: softmax(&row[LOGITS..]),
        }
    }

    pub fn to_set(&self) -> PrimitiveSet {
        match self.kind {
            PrimitiveKind::Superquadric => PrimitiveSet::Superquadric(
                (0..self.len())
                    .map(|i| {
                        let d = self.decode(i);
                        Superquadric {
                            position: d.position,
                            scale: d.scale,
                            rotation: d.rotation,
                            opacity: d.opacity,
                            eps1: d.eps[0],
                            eps2: d.eps[1],
                            semantics: d.semantics,
                        }
                    })
                    .collect(),
            ),
            PrimitiveKind::Gaussian => PrimitiveSet::Gaussian(
                (0..self.len())
                    .map(|i| {
                        let d = self.decode(i);
                        GaussianPrimitive {
                            position: d.position,
                            scale: d.scale,
                            rotation: d.rotation,
                            opacity: d.opacity,
                            semantics: d.semantics,
                        }
                    })
                    .collect(),
            ),
        }
    }

    /// Chains attribute-space gradients through the decoding map.
    pub fn chain(&self, g: &ParamGradient) -> Vec<f64> {
        let mut out = g.as_slice().to_vec();
        let stride = self.stride();
        let span = self.bounds.hi - self.bounds.lo;
        for i in 0..self.len() {
            let row = self.row(i);
            let o = &mut out[i * stride..(i + 1) * stride];
            for k in 0..3 {
                let s = row[SCALE + k].exp();
                o[SCALE + k] *= if (SCALE_MIN..=self.scale_max).contains(&s) { s } else { 0.0 };
            }
            let a = sigmoid(row[OPACITY]);
            o[OPACITY] *= a * (1.0 - a);
            for k in 0..2 {
                if self.kind == PrimitiveKind::Gaussian {
                    o[EPS + k] = 0.0;
                } else {
                    let t = sigmoid(row[EPS + k]);
                    o[EPS + k] *= span * t * (1.0 - t);
                }
            }
        }
        out
    }
}

/// Adaptive-moment optimizer with decoupled weight decay and per-row step
/// counters, so rows whose moments are reset restart their bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    stride: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(len: usize, stride: usize, beta1: f64, beta2: f64, epsilon: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            weight_decay,
            stride,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: vec![0; len / stride],
        }
    }

    /// One update. `lr_of(slot)` gives the learning rate and whether decay
    /// applies for a slot within a row.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr_of: impl Fn(usize) -> (f64, bool)) {
        let lrs: Vec<(f64, bool)> = (0..self.stride).map(lr_of).collect();
        for (r, t) in self.steps.iter_mut().enumerate() {
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t as i32);
            let c2 = 1.0 - self.beta2.powi(*t as i32);
            for (k, &(lr, decay)) in lrs.iter().enumerate() {
                let j = r * self.stride + k;
                let g = grads[j];
                self.m[j] = self.beta1 * self.m[j] + (1.0 - self.beta1) * g;
                self.v[j] = self.beta2 * self.v[j] + (1.0 - self.beta2) * g * g;
                if decay {
                    params[j] -= lr * self.weight_decay * params[j];
                }
                params[j] -= lr * (self.m[j] / c1) / ((self.v[j] / c2).sqrt() + self.epsilon);
            }
        }
    }

    pub fn reset_row(&mut self, row: usize) {
        let s = row * self.stride;
        self.m[s..s + self.stride].fill(0.0);
        self.v[s..s + self.stride].fill(0.0);
        self.steps[row] = 0;
    }
}

fn uniform_semantics(classes: usize) -> Vec<f64> {
    vec![1.0 / classes as f64; classes]
}

/// Random initial set: positions uniform over the volume, per-axis scales
/// uniform in `[0.5, 2]` voxel diagonals, identity rotations, opacity 0.5,
/// `eps = 1` and uniform semantics.
pub fn init_primitives(config: &FitConfig, spec: &GridSpec, classes: usize) -> Result<PrimitiveSet> {
    config.validate()?;
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    Ok(init_with_rng(config, spec, classes, &mut rng))
}

fn init_with_rng(config: &FitConfig, spec: &GridSpec, classes: usize, rng: &mut ChaCha8Rng) -> PrimitiveSet {
    let lo = spec.origin;
    let hi = spec.max_corner();
    let d = spec.voxel_diagonal();
    let mut draws = Vec::with_capacity(config.primitive_count);
    for _ in 0..config.primitive_count {
        let pos = Vector3::from_fn(|k, _| rng.gen_range(lo[k]..hi[k]));
        let scale = Vector3::from_fn(|_, _| rng.gen_range(0.5 * d..=2.0 * d));
        draws.push((pos, scale));
    }
    let sem = uniform_semantics(classes);
    match config.kind {
        PrimitiveKind::Superquadric => PrimitiveSet::Superquadric(
            draws
                .into_iter()
                .map(|(position, scale)| Superquadric {
                    position,
                    scale,
                    rotation: UnitQuaternion::identity(),
                    opacity: 0.5,
                    eps1: 1.0,
                    eps2: 1.0,
                    semantics: sem.clone(),
                })
                .collect(),
        ),
        PrimitiveKind::Gaussian => PrimitiveSet::Gaussian(
            draws
                .into_iter()
                .map(|(position, scale)| GaussianPrimitive {
                    position,
                    scale,
                    rotation: UnitQuaternion::identity(),
                    opacity: 0.5,
                    semantics: sem.clone(),
                })
                .collect(),
        ),
    }
}

/// Removes the `n` primitives of smallest effective volume `a * sx * sy * sz`
/// and splits each of the `n` largest in two along its longest local axis.
/// Returns the new list (same length) and the slots whose contents changed.
pub fn prune_and_split<P: Primitive>(prims: &[P], n: usize, spec: &GridSpec) -> Result<(Vec<P>, Vec<usize>)> {
    if 2 * n > prims.len() {
        return Err(Error::invalid(format!("cannot prune and split {n} of {} primitives", prims.len())));
    }
    spec.validate()?;
    if n == 0 {
        return Ok((prims.to_vec(), Vec::new()));
    }
    let volume = |p: &P| {
        let s = p.scale();
        p.opacity() * s.x * s.y * s.z
    };
    let mut order: Vec<usize> = (0..prims.len()).collect();
    order.sort_by(|a, b| volume(&prims[*a]).total_cmp(&volume(&prims[*b])).then(a.cmp(b)));
    let pruned = &order[..n];
    let largest = &order[order.len() - n..];
    let mut out = prims.to_vec();
    let mut changed = Vec::with_capacity(2 * n);
    for (&parent, &free) in largest.iter().zip(pruned) {
        let p = &prims[parent];
        let s = p.scale();
        let k = s.imax();
        let r = p.rotation().to_rotation_matrix()?;
        // Local axis k expressed in world coordinates: row k of R.
        let axis = Vector3::new(r[(k, 0)], r[(k, 1)], r[(k, 2)]);
        let offset = axis * (0.5 * s[k]);
        let mut child_scale = s;
        child_scale[k] = (0.5 * s[k]).max(SCALE_MIN);
        let mut a = p.clone();
        a.set_position(p.position() + offset);
        a.set_scale(child_scale);
        let mut b = p.clone();
        b.set_position(p.position() - offset);
        b.set_scale(child_scale);
        out[parent] = a;
        out[free] = b;
        changed.push(parent);
        changed.push(free);
    }
    changed.sort_unstable();
    Ok((out, changed))
}

/// Mutable fitting state carried across [`fit_step`] calls.
#[derive(Debug, Clone)]
pub struct FitState {
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
    class_weights: Option<Vec<f64>>,
}

impl FitState {
    pub fn new(params: &ParamVector, scene: &OccupancyGrid, config: &FitConfig, rng: ChaCha8Rng) -> Self {
        Self {
            optimizer: AdamW::new(
                params.data.len(),
                params.stride(),
                config.beta1,
                config.beta2,
                config.adam_epsilon,
                config.weight_decay,
            ),
            rng,
            iteration: 0,
            loss_history: Vec::new(),
            class_weights: config
                .inverse_frequency_weights
                .then(|| inverse_frequency_weights(&scene.labels, scene.classes)),
        }
    }
}

fn learning_rate_at(config: &FitConfig, iteration: usize) -> f64 {
    if !config.cosine_schedule {
        return config.learning_rate;
    }
    let t = (iteration as f64 / config.iterations as f64).min(1.0);
    config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Loss and attribute-space gradient on a set of voxels.
fn loss_and_gradient<P: Primitive>(
    prims: &[P],
    scene: &OccupancyGrid,
    voxels: &[usize],
    config: &FitConfig,
    class_weights: Option<&[f64]>,
) -> Result<(LossReport, ParamGradient)> {
    let spec = &scene.spec;
    let set = PreparedSet::new(prims, config.field_options())?.with_index(spec.origin, spec.max_corner(), bin_dims(spec));
    let classes = set.classes();
    if classes != scene.classes {
        return Err(Error::invalid(format!("primitives have {classes} classes, scene has {}", scene.classes)));
    }
    let points: Vec<Vector3<f64>> = voxels.iter().map(|v| spec.center_of(*v)).collect();
    let samples = crate::parallel::map(&points, |x| set.sample(x));
    let p_occ: Vec<f64> = samples.iter().map(|s| s.p_occ).collect();
    let p_sem: Vec<f64> = samples.iter().flat_map(|s| s.p_sem.iter().copied()).collect();
    let labels: Vec<u8> = voxels.iter().map(|v| scene.labels[*v]).collect();
    let report = evaluate_losses(&p_occ, &p_sem, classes, &labels, config.loss_weights, class_weights)?;
    let targets: Vec<PointTarget> = (0..voxels.len())
        .map(|j| PointTarget {
            d_occ: report.d_occ[j],
            d_sem: report.d_sem[j * classes..(j + 1) * classes].to_vec(),
        })
        .collect();
    let grad = set_gradients(&set, &points, &targets)?;
    Ok((report, grad))
}

fn bin_dims(spec: &GridSpec) -> [usize; 3] {
    let d = |k: usize| spec.dims[k].div_ceil(4).clamp(1, 64);
    [d(0), d(1), d(2)]
}

fn diagnose(params: &ParamVector, grad: Option<&[f64]>) -> Vec<usize> {
    (0..params.len())
        .filter(|i| {
            let s = params.stride();
            let bad_param = params.row(*i).iter().any(|v| !v.is_finite());
            let bad_grad = grad.is_some_and(|g| g[i * s..(i + 1) * s].iter().any(|v| !v.is_finite()));
            bad_param || bad_grad
        })
        .collect()
}

/// Samples a voxel batch, evaluates the losses, backpropagates through the
/// field and the parameter decoding, and applies one optimizer update.
pub fn fit_step(params: &mut ParamVector, scene: &OccupancyGrid, config: &FitConfig, state: &mut FitState) -> Result<LossReport> {
    let total = scene.spec.voxel_count();
    let voxels: Vec<usize> = if config.batch_points >= total {
        (0..total).collect()
    } else {
        let mut v = sample_indices(&mut state.rng, total, config.batch_points).into_vec();
        v.sort_unstable();
        v
    };
    let set = params.to_set();
    let cw = state.class_weights.as_deref();
    let result = match &set {
        PrimitiveSet::Superquadric(p) => loss_and_gradient(p, scene, &voxels, config, cw),
        PrimitiveSet::Gaussian(p) => loss_and_gradient(p, scene, &voxels, config, cw),
    };
    let (report, grad) = match result {
        Ok(r) => r,
        Err(Error::Numerical(msg)) => {
            return Err(Error::Numerical(format!(
                "{msg} at iteration {}; suspect primitives {:?}",
                state.iteration,
                diagnose(params, None)
            )))
        }
        Err(e) => return Err(e),
    };
    let g = params.chain(&grad);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient at iteration {}; offending primitives {:?}",
            state.iteration,
            diagnose(params, Some(&g))
        )));
    }
    let lr = learning_rate_at(config, state.iteration);
    let voxel_edge = scene.spec.voxel_size.mean();
    let sc = config.lr_scales;
    state.optimizer.step(&mut params.data, &g, |slot| match slot {
        s if s < SCALE => (lr * sc.position * voxel_edge, false),
        s if s < QUATERNION => (lr * sc.scale, true),
        s if s < OPACITY => (lr * sc.rotation, false),
        OPACITY => (lr * sc.opacity, true),
        s if s < LOGITS => (lr * sc.eps, true),
        _ => (lr * sc.semantics, true),
    });
    state.iteration += 1;
    state.loss_history.push(report.total);
    Ok(report)
}

/// Metrics recorded at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub loss: f64,
    pub iou: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub primitives: PrimitiveSet,
    pub checkpoints: Vec<Checkpoint>,
    pub loss_history: Vec<f64>,
    /// Primitive count observed after every iteration.
    pub count_history: Vec<usize>,
}

/// Rasterizes `set` onto `spec`, thresholds at `tau` and scores against `gt`.
pub fn evaluate_set(set: &PrimitiveSet, gt: &OccupancyGrid, opts: FieldOptions, tau: f64) -> Result<Evaluation> {
    let pred = predict(set, &gt.spec, opts, tau)?;
    evaluate(&pred, gt)
}

pub fn predict(set: &PrimitiveSet, spec: &GridSpec, opts: FieldOptions, tau: f64) -> Result<OccupancyGrid> {
    let grid = match set {
        PrimitiveSet::Superquadric(p) => rasterize_with(p, spec, opts)?.0,
        PrimitiveSet::Gaussian(p) => rasterize_with(p, spec, opts)?.0,
    };
    discretize(&grid, tau)
}

/// Applies prune-and-split to the decoded set and re-encodes the changed rows,
/// resetting their optimizer moments.
fn reallocate(params: &mut ParamVector, state: &mut FitState, n: usize, spec: &GridSpec) -> Result<()> {
    let set = params.to_set();
    let (new_set, changed) = match &set {
        PrimitiveSet::Superquadric(p) => {
            let (v, c) = prune_and_split(p, n, spec)?;
            (PrimitiveSet::Superquadric(v), c)
        }
        PrimitiveSet::Gaussian(p) => {
            let (v, c) = prune_and_split(p, n, spec)?;
            (PrimitiveSet::Gaussian(v), c)
        }
    };
    for i in changed {
        // Copy the parent row so unconstrained values round-trip exactly, then
        // overwrite only position and log-scale.
        let source = find_source_row(&set, &new_set, i);
        let src: Vec<f64> = params.row(source).to_vec();
        let (pos, scale) = match &new_set {
            PrimitiveSet::Superquadric(v) => (v[i].position, v[i].scale),
            PrimitiveSet::Gaussian(v) => (v[i].position, v[i].scale),
        };
        let row = params.row_mut(i);
        row.copy_from_slice(&src);
        for k in 0..3 {
            row[POSITION + k] = pos[k];
            row[SCALE + k] = scale[k].max(SCALE_MIN).ln();
        }
        state.optimizer.reset_row(i);
    }
    Ok(())
}

/// Index of the parent a split child came from (matched on everything but
/// position and scale).
fn find_source_row(old: &PrimitiveSet, new: &PrimitiveSet, i: usize) -> usize {
    fn same<P: Primitive>(a: &P, b: &P) -> bool {
        a.rotation() == b.rotation() && a.opacity() == b.opacity() && a.semantics() == b.semantics()
    }
    match (old, new) {
        (PrimitiveSet::Superquadric(o), PrimitiveSet::Superquadric(n)) => (0..o.len())
            .find(|j| same(&o[*j], &n[i]) && o[*j].eps1 == n[i].eps1 && o[*j].eps2 == n[i].eps2 && split_of(&o[*j], &n[i]))
            .unwrap_or(i),
        (PrimitiveSet::Gaussian(o), PrimitiveSet::Gaussian(n)) => {
            (0..o.len()).find(|j| same(&o[*j], &n[i]) && split_of(&o[*j], &n[i])).unwrap_or(i)
        }
        _ => i,
    }
}

fn split_of<P: Primitive>(parent: &P, child: &P) -> bool {
    let (ps, cs) = (parent.scale(), child.scale());
    let halved = (0..3).filter(|k| cs[*k] != ps[*k]).count();
    halved == 1 && (parent.position() - child.position()).norm() <= 0.5 * ps.max() * (1.0 + 1e-9)
}

/// Progress information passed to observers during [`fit_with`].
pub struct FitProgress<'a> {
    pub iteration: usize,
    pub params: &'a ParamVector,
    pub checkpoint: Option<&'a Checkpoint>,
}

pub fn fit(scene: &OccupancyGrid, config: &FitConfig) -> Result<FitResult> {
    fit_with(scene, config, |_| Ok(()))
}

/// Full fitting loop: initialization, `iterations` steps, one prune-and-split
/// event, and checkpoint evaluation. `observer` runs after every iteration.
pub fn fit_with(scene: &OccupancyGrid, config: &FitConfig, mut observer: impl FnMut(&FitProgress<'_>) -> Result<()>) -> Result<FitResult> {
    config.validate()?;
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let init = init_with_rng(config, &scene.spec, scene.classes, &mut rng);
    let scale_max = scene.spec.extent().norm();
    let mut params = ParamVector::from_set(&init, config.eps_bounds, scale_max)?;
    let mut state = FitState::new(&params, scene, config, rng);
    let opts = config.field_options();
    let prune_at = config.prune_split_at();
    let n_split = config.prune_split_count();
    let mut checkpoints = Vec::new();
    let mut count_history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        if it == prune_at && n_split > 0 {
            reallocate(&mut params, &mut state, n_split, &scene.spec)?;
        }
        let report = fit_step(&mut params, scene, config, &mut state)?;
        count_history.push(params.len());
        let last = it + 1 == config.iterations;
        let cp = if last || (config.eval_every > 0 && (it + 1) % config.eval_every == 0) {
            let e = evaluate_set(&params.to_set(), scene, opts, config.tau)?;
            checkpoints.push(Checkpoint {
                iteration: it + 1,
                loss: report.total,
                iou: e.iou,
                miou: e.miou,
            });
            checkpoints.last()
        } else {
            None
        };
        observer(&FitProgress {
            iteration: it + 1,
            params: &params,
            checkpoint: cp,
        })?;
    }
    Ok(FitResult {
        primitives: params.to_set(),
        checkpoints,
        loss_history: state.loss_history,
        count_history,
    })
}
