//! Primitive types, rotations and the superquadric implicit function.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clamp applied to every implicit value so that `exp(-f)` underflows to
/// a tiny positive number instead of producing denormals.
pub const F_CLAMP: f64 = 80.0;

/// Inflation applied to analytic support half-extents.
pub const SUPPORT_SAFETY: f64 = 1.05;

/// Quaternion `(w, x, y, z)`. Components may be stored unnormalized; every
/// conversion to a rotation normalizes first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuaternion {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() {
            return Err(Error::invalid("quaternion has non-finite components"));
        }
        if n == 0.0 {
            return Err(Error::invalid("all-zero quaternion"));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn to_rotation_matrix(&self) -> Result<Matrix3<f64>> {
        quat_to_rotmat(self)
    }
}

fn rotmat_from_unit(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Proper rotation matrix of `q`, normalizing it first.
pub fn quat_to_rotmat(q: &UnitQuaternion) -> Result<Matrix3<f64>> {
    let u = q.normalized()?;
    Ok(rotmat_from_unit(u.w, u.x, u.y, u.z))
}

/// Rotation matrix together with its partial derivatives with respect to the
/// four raw (unnormalized) quaternion components.
pub(crate) fn rotmat_with_jacobian(q: &UnitQuaternion) -> Result<(Matrix3<f64>, [Matrix3<f64>; 4])> {
    let n = q.norm();
    let u = q.normalized()?;
    let (w, x, y, z) = (u.w, u.x, u.y, u.z);
    let r = rotmat_from_unit(w, x, y, z);
    // Derivatives w.r.t. the unit components.
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let du = [dw, dx, dy, dz];
    let unit = [w, x, y, z];
    // Chain through the normalization map: d(u)/d(q) = (I - u u^T) / |q|.
    let mut out = [Matrix3::zeros(); 4];
    for (k, o) in out.iter_mut().enumerate() {
        for (j, dj) in du.iter().enumerate() {
            let delta = if j == k { 1.0 } else { 0.0 };
            let coef = (delta - unit[j] * unit[k]) / n;
            if coef != 0.0 {
                *o += dj * coef;
            }
        }
    }
    Ok((r, out))
}

/// Which exponent governs the z term of the implicit function.
///
/// `Standard` uses `2/eps1` (the usual superquadric family); `Literal` uses
/// `2/eps2` for every term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImplicitForm {
    #[default]
    Standard,
    Literal,
}

/// `|u|^p` evaluated as `exp(p ln|u|)` in log space; `None` encodes an exact zero.
#[inline]
fn ln_pow(u: f64, p: f64) -> Option<f64> {
    let a = u.abs();
    if a == 0.0 {
        None
    } else {
        Some(p * a.ln())
    }
}

#[inline]
fn log_add(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (None, None) => None,
        (Some(x), None) | (None, Some(x)) => Some(x),
        (Some(x), Some(y)) => {
            let (hi, lo) = if x > y { (x, y) } else { (y, x) };
            Some(hi + (lo - hi).exp().ln_1p())
        }
    }
}

fn validate_scale(s: &Vector3<f64>) -> Result<()> {
    if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!(
            "scale must be strictly positive, got ({}, {}, {})",
            s.x, s.y, s.z
        )));
    }
    Ok(())
}

/// Superquadric implicit value at a point given in the primitive's local frame.
///
/// Zero at the origin, one on the surface, clamped to `[0, F_CLAMP]`.
pub fn canonical_implicit(x_local: &Vector3<f64>, s: &Vector3<f64>, eps1: f64, eps2: f64) -> Result<f64> {
    canonical_implicit_with(x_local, s, eps1, eps2, ImplicitForm::Standard)
}

pub fn canonical_implicit_with(
    x_local: &Vector3<f64>,
    s: &Vector3<f64>,
    eps1: f64,
    eps2: f64,
    form: ImplicitForm,
) -> Result<f64> {
    validate_scale(s)?;
    if !(eps1 > 0.0 && eps2 > 0.0) {
        return Err(Error::invalid("shape exponents must be positive"));
    }
    Ok(superquadric_value(x_local, s, eps1, eps2, form))
}

#[inline]
pub(crate) fn superquadric_value(u: &Vector3<f64>, s: &Vector3<f64>, eps1: f64, eps2: f64, form: ImplicitForm) -> f64 {
    let ez = match form {
        ImplicitForm::Standard => eps1,
        ImplicitForm::Literal => eps2,
    };
    let px = 2.0 / eps2;
    let la = log_add(ln_pow(u.x / s.x, px), ln_pow(u.y / s.y, px));
    let lb = la.map(|l| (eps2 / eps1) * l);
    let lc = ln_pow(u.z / s.z, 2.0 / ez);
    let ln_clamp = F_CLAMP.ln();
    if lb.is_some_and(|l| l >= ln_clamp) || lc.is_some_and(|l| l >= ln_clamp) {
        return F_CLAMP;
    }
    let f = lb.map_or(0.0, f64::exp) + lc.map_or(0.0, f64::exp);
    f.min(F_CLAMP)
}

/// Implicit value and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitGrad {
    pub f: f64,
    /// True when `f` hit `F_CLAMP`; all derivatives are then zero.
    pub clamped: bool,
    pub d_local: Vector3<f64>,
    pub d_scale: Vector3<f64>,
    /// `(d/d eps1, d/d eps2)`; zero for Gaussians.
    pub d_eps: [f64; 2],
}

impl ImplicitGrad {
    fn clamped() -> Self {
        Self {
            f: F_CLAMP,
            clamped: true,
            d_local: Vector3::zeros(),
            d_scale: Vector3::zeros(),
            d_eps: [0.0; 2],
        }
    }
}

pub(crate) fn superquadric_grad(u: &Vector3<f64>, s: &Vector3<f64>, eps1: f64, eps2: f64, form: ImplicitForm) -> ImplicitGrad {
    let literal = form == ImplicitForm::Literal;
    let ez = if literal { eps2 } else { eps1 };
    let px = 2.0 / eps2;
    let lax = ln_pow(u.x / s.x, px);
    let lay = ln_pow(u.y / s.y, px);
    let la = log_add(lax, lay);
    let lb = la.map(|l| (eps2 / eps1) * l);
    let lc = ln_pow(u.z / s.z, 2.0 / ez);
    let ln_clamp = F_CLAMP.ln();
    if lb.is_some_and(|l| l >= ln_clamp) || lc.is_some_and(|l| l >= ln_clamp) {
        return ImplicitGrad::clamped();
    }
    let b = lb.map_or(0.0, f64::exp);
    let c = lc.map_or(0.0, f64::exp);
    let f = b + c;
    if f >= F_CLAMP {
        return ImplicitGrad::clamped();
    }

    let mut d_local = Vector3::zeros();
    let mut d_scale = Vector3::zeros();
    let mut d_eps = [0.0; 2];

    if let (Some(la), Some(lb)) = (la, lb) {
        // dB/du_k = (2/eps1) B w_k / u_k with w_k = a_k / A.
        let mut weighted_la = 0.0;
        for (k, lak) in [(0usize, lax), (1usize, lay)] {
            if let Some(lak) = lak {
                let w = (lak - la).exp();
                weighted_la += w * lak;
                let g = (2.0 / eps1) * b * w;
                d_local[k] = g / u[k];
                d_scale[k] = -g / s[k];
            }
        }
        d_eps[0] -= b * lb / eps1;
        d_eps[1] += b * (la - weighted_la) / eps1;
    }
    if let Some(lc) = lc {
        let g = (2.0 / ez) * c;
        d_local[2] = g / u.z;
        d_scale[2] = -g / s.z;
        let de = -c * lc / ez;
        if literal {
            d_eps[1] += de;
        } else {
            d_eps[0] += de;
        }
    }
    ImplicitGrad {
        f,
        clamped: false,
        d_local,
        d_scale,
        d_eps,
    }
}

pub(crate) fn gaussian_value(u: &Vector3<f64>, s: &Vector3<f64>) -> f64 {
    let q = (u.x / s.x).powi(2) + (u.y / s.y).powi(2) + (u.z / s.z).powi(2);
    (0.5 * q).min(F_CLAMP)
}

pub(crate) fn gaussian_grad(u: &Vector3<f64>, s: &Vector3<f64>) -> ImplicitGrad {
    let f = gaussian_value(u, s);
    if f >= F_CLAMP {
        return ImplicitGrad::clamped();
    }
    let d_local = Vector3::new(u.x / (s.x * s.x), u.y / (s.y * s.y), u.z / (s.z * s.z));
    let d_scale = Vector3::new(
        -u.x * u.x / s.x.powi(3),
        -u.y * u.y / s.y.powi(3),
        -u.z * u.z / s.z.powi(3),
    );
    ImplicitGrad {
        f,
        clamped: false,
        d_local,
        d_scale,
        d_eps: [0.0; 2],
    }
}

/// Local half-extents of the region `f <= f_max`, inflated by `SUPPORT_SAFETY`.
pub fn support_radii(s: &Vector3<f64>, eps1: f64, eps2: f64, f_max: f64) -> Vector3<f64> {
    support_radii_with(s, eps1, eps2, f_max, ImplicitForm::Standard)
}

pub fn support_radii_with(s: &Vector3<f64>, eps1: f64, eps2: f64, f_max: f64, form: ImplicitForm) -> Vector3<f64> {
    if f_max.is_infinite() {
        return Vector3::repeat(f64::INFINITY);
    }
    let f_max = f_max.max(0.0);
    // Each term of f is bounded by f itself: |x/s_x| <= f^(eps1/2), same for y;
    // the z term gives |z/s_z| <= f^(ez/2).
    let ez = match form {
        ImplicitForm::Standard => eps1,
        ImplicitForm::Literal => eps2,
    };
    let rxy = f_max.powf(0.5 * eps1);
    let rz = f_max.powf(0.5 * ez);
    Vector3::new(s.x * rxy, s.y * rxy, s.z * rz) * SUPPORT_SAFETY
}

/// Local half-extents of the Gaussian region `0.5 * |x/s|^2 <= f_max`.
pub fn gaussian_support_radii(s: &Vector3<f64>, f_max: f64) -> Vector3<f64> {
    if f_max.is_infinite() {
        return Vector3::repeat(f64::INFINITY);
    }
    s * (2.0 * f_max.max(0.0)).sqrt() * SUPPORT_SAFETY
}

/// Allowed range for the shape exponents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentBounds {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ExponentBounds {
    fn default() -> Self {
        Self { lo: 0.1, hi: 2.0 }
    }
}

impl ExponentBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo > 0.0 && self.hi > self.lo && self.hi.is_finite()) {
            return Err(Error::Config(format!(
                "exponent bounds must satisfy 0 < lo < hi, got ({}, {})",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, eps: f64) -> bool {
        eps >= self.lo && eps <= self.hi
    }
}

pub fn clamp_exponents(eps: f64, bounds: ExponentBounds) -> Result<f64> {
    bounds.validate()?;
    Ok(eps.clamp(bounds.lo, bounds.hi))
}

/// One superquadric scene primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Superquadric {
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion,
    pub opacity: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub semantics: Vec<f64>,
}

/// Ellipsoidal Gaussian baseline primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion,
    pub opacity: f64,
    pub semantics: Vec<f64>,
}

fn validate_common(scale: &Vector3<f64>, rotation: &UnitQuaternion, opacity: f64, semantics: &[f64]) -> Result<()> {
    if scale.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::validation("scale", "entries must be finite and > 0"));
    }
    rotation
        .normalized()
        .map_err(|e| Error::validation("rotation", e.to_string()))?;
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::validation("opacity", format!("{opacity} not in [0, 1]")));
    }
    if semantics.is_empty() {
        return Err(Error::validation("semantics", "must have at least one class"));
    }
    if semantics.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::validation("semantics", "entries must be >= 0"));
    }
    let sum: f64 = semantics.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::validation("semantics", format!("entries sum to {sum}, expected 1")));
    }
    Ok(())
}

impl Superquadric {
    pub fn validate(&self, bounds: &ExponentBounds) -> Result<()> {
        validate_common(&self.scale, &self.rotation, self.opacity, &self.semantics)?;
        if !bounds.contains(self.eps1) {
            return Err(Error::validation("eps1", format!("{} outside [{}, {}]", self.eps1, bounds.lo, bounds.hi)));
        }
        if !bounds.contains(self.eps2) {
            return Err(Error::validation("eps2", format!("{} outside [{}, {}]", self.eps2, bounds.lo, bounds.hi)));
        }
        Ok(())
    }
}

impl GaussianPrimitive {
    pub fn validate(&self) -> Result<()> {
        validate_common(&self.scale, &self.rotation, self.opacity, &self.semantics)
    }
}

/// Common view over primitives that define an occupancy via `exp(-f(local))`.
pub trait Primitive: Clone + Send + Sync {
    fn position(&self) -> Vector3<f64>;
    fn scale(&self) -> Vector3<f64>;
    fn rotation(&self) -> UnitQuaternion;
    fn opacity(&self) -> f64;
    fn semantics(&self) -> &[f64];
    /// Implicit value at a local point.
    fn implicit(&self, local: &Vector3<f64>, form: ImplicitForm) -> f64;
    fn implicit_grad(&self, local: &Vector3<f64>, form: ImplicitForm) -> ImplicitGrad;
    /// Local half-extents of the region `f <= f_max`.
    fn support(&self, f_max: f64, form: ImplicitForm) -> Vector3<f64>;
    fn set_position(&mut self, position: Vector3<f64>);
    fn set_scale(&mut self, scale: Vector3<f64>);
}

impl Primitive for Superquadric {
    fn position(&self) -> Vector3<f64> {
        self.position
    }
    fn scale(&self) -> Vector3<f64> {
        self.scale
    }
    fn rotation(&self) -> UnitQuaternion {
        self.rotation
    }
    fn opacity(&self) -> f64 {
        self.opacity
    }
    fn semantics(&self) -> &[f64] {
        &self.semantics
    }
    fn implicit(&self, local: &Vector3<f64>, form: ImplicitForm) -> f64 {
        superquadric_value(local, &self.scale, self.eps1, self.eps2, form)
    }
    fn implicit_grad(&self, local: &Vector3<f64>, form: ImplicitForm) -> ImplicitGrad {
        superquadric_grad(local, &self.scale, self.eps1, self.eps2, form)
    }
    fn support(&self, f_max: f64, form: ImplicitForm) -> Vector3<f64> {
        support_radii_with(&self.scale, self.eps1, self.eps2, f_max, form)
    }
    fn set_position(&mut self, position: Vector3<f64>) {
        self.position = position;
    }
    fn set_scale(&mut self, scale: Vector3<f64>) {
        self.scale = scale;
    }
}

impl Primitive for GaussianPrimitive {
    fn position(&self) -> Vector3<f64> {
        self.position
    }
    fn scale(&self) -> Vector3<f64> {
        self.scale
    }
    fn rotation(&self) -> UnitQuaternion {
        self.rotation
    }
    fn opacity(&self) -> f64 {
        self.opacity
    }
    fn semantics(&self) -> &[f64] {
        &self.semantics
    }
    fn implicit(&self, local: &Vector3<f64>, _form: ImplicitForm) -> f64 {
        gaussian_value(local, &self.scale)
    }
    fn implicit_grad(&self, local: &Vector3<f64>, _form: ImplicitForm) -> ImplicitGrad {
        gaussian_grad(local, &self.scale)
    }
    fn support(&self, f_max: f64, _form: ImplicitForm) -> Vector3<f64> {
        gaussian_support_radii(&self.scale, f_max)
    }
    fn set_position(&mut self, position: Vector3<f64>) {
        self.position = position;
    }
    fn set_scale(&mut self, scale: Vector3<f64>) {
        self.scale = scale;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveKind {
    #[default]
    Superquadric,
    Gaussian,
}

impl std::fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PrimitiveKind::Superquadric => "superquadric",
            PrimitiveKind::Gaussian => "gaussian",
        })
    }
}

impl std::str::FromStr for PrimitiveKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "superquadric" | "quadric" | "sq" => Ok(PrimitiveKind::Superquadric),
            "gaussian" | "gauss" => Ok(PrimitiveKind::Gaussian),
            _ => Err(Error::invalid(format!("unknown primitive kind `{s}`"))),
        }
    }
}

/// A homogeneous list of primitives of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveSet {
    Superquadric(Vec<Superquadric>),
    Gaussian(Vec<GaussianPrimitive>),
}

impl PrimitiveSet {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            PrimitiveSet::Superquadric(_) => PrimitiveKind::Superquadric,
            PrimitiveSet::Gaussian(_) => PrimitiveKind::Gaussian,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            PrimitiveSet::Superquadric(v) => v.len(),
            PrimitiveSet::Gaussian(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            PrimitiveSet::Superquadric(v) => v.first().map_or(0, |p| p.semantics.len()),
            PrimitiveSet::Gaussian(v) => v.first().map_or(0, |p| p.semantics.len()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let r = quat_to_rotmat(&UnitQuaternion::identity()).unwrap();
        assert_eq!(r, Matrix3::identity());
        let r2 = quat_to_rotmat(&UnitQuaternion::new(2.0, 0.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(r2, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = 0.5f64.sqrt();
        let r = quat_to_rotmat(&UnitQuaternion::new(h, 0.0, 0.0, h)).unwrap();
        let v = r * Vector3::x();
        assert_abs_diff_eq!(v, Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn zero_quaternion_rejected() {
        let e = quat_to_rotmat(&UnitQuaternion::new(0.0, 0.0, 0.0, 0.0)).unwrap_err();
        assert!(matches!(e, Error::InvalidArgument(_)));
    }

    #[test]
    fn implicit_examples() {
        let one = Vector3::repeat(1.0);
        assert_eq!(canonical_implicit(&Vector3::zeros(), &Vector3::new(2.0, 3.0, 4.0), 0.3, 1.7).unwrap(), 0.0);
        assert_abs_diff_eq!(canonical_implicit(&Vector3::x(), &one, 1.0, 1.0).unwrap(), 1.0, epsilon = 1e-14);
        // Oracle: (0.9^20 + 0.9^20)^1 + 0.9^20 evaluated with plain powi.
        let oracle = 3.0 * 0.9f64.powi(20);
        assert_abs_diff_eq!(oracle, 0.364_729_964, epsilon = 1e-9);
        let f = canonical_implicit(&Vector3::repeat(0.9), &one, 0.1, 0.1).unwrap();
        assert_abs_diff_eq!(f, oracle, epsilon = 1e-12);
    }

    #[test]
    fn implicit_rejects_bad_scale() {
        let e = canonical_implicit(&Vector3::x(), &Vector3::new(1.0, 0.0, 1.0), 1.0, 1.0);
        assert!(matches!(e, Err(Error::InvalidArgument(_))));
        let e = canonical_implicit(&Vector3::x(), &Vector3::new(1.0, -1.0, 1.0), 1.0, 1.0);
        assert!(e.is_err());
    }

    #[test]
    fn implicit_clamps() {
        let f = canonical_implicit(&Vector3::new(1e3, 0.0, 0.0), &Vector3::repeat(1.0), 0.1, 0.1).unwrap();
        assert_eq!(f, F_CLAMP);
    }

    #[test]
    fn literal_form_uses_eps2_on_z() {
        let u = Vector3::new(0.0, 0.0, 0.5);
        let s = Vector3::repeat(1.0);
        let std = canonical_implicit_with(&u, &s, 0.5, 1.0, ImplicitForm::Standard).unwrap();
        let lit = canonical_implicit_with(&u, &s, 0.5, 1.0, ImplicitForm::Literal).unwrap();
        assert_abs_diff_eq!(std, 0.5f64.powi(4), epsilon = 1e-14);
        assert_abs_diff_eq!(lit, 0.25, epsilon = 1e-14);
    }

    #[test]
    fn clamp_exponent_examples() {
        let b = ExponentBounds::default();
        assert_eq!((b.lo, b.hi), (0.1, 2.0));
        assert_eq!(clamp_exponents(0.05, b).unwrap(), 0.1);
        assert_eq!(clamp_exponents(1.0, b).unwrap(), 1.0);
        assert_eq!(clamp_exponents(5.0, b).unwrap(), 2.0);
        assert!(matches!(
            clamp_exponents(1.0, ExponentBounds { lo: 2.0, hi: 1.0 }),
            Err(Error::Config(_))
        ));
        assert!(ExponentBounds::new(0.0, 1.0).is_err());
    }

    /// Brute-force check that no sampled point with f <= f_max lies outside the box.
    fn support_oracle(s: Vector3<f64>, e1: f64, e2: f64, f_max: f64) {
        let h = support_radii(&s, e1, e2, f_max);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reach = s * (f_max.max(1.0) * 4.0);
        for _ in 0..100_000 {
            let p = Vector3::new(
                rng.gen_range(-reach.x..reach.x),
                rng.gen_range(-reach.y..reach.y),
                rng.gen_range(-reach.z..reach.z),
            );
            let outside = (0..3).any(|i| p[i].abs() > h[i]);
            if outside {
                let f = canonical_implicit(&p, &s, e1, e2).unwrap();
                assert!(f > f_max, "point {p:?} with f={f} outside box {h:?}");
            }
        }
    }

    #[test]
    fn support_radii_examples() {
        let h = support_radii(&Vector3::repeat(1.0), 1.0, 1.0, 9.0);
        assert!(h.iter().all(|v| *v >= 3.0));
        support_oracle(Vector3::repeat(1.0), 1.0, 1.0, 9.0);
        let h = support_radii(&Vector3::new(2.0, 1.0, 1.0), 1.0, 1.0, 9.0);
        assert!(h.x >= 6.0);
        support_oracle(Vector3::new(2.0, 1.0, 1.0), 1.0, 1.0, 9.0);
        for (e1, e2) in [(0.1, 0.1), (0.1, 2.0), (2.0, 0.1), (1.7, 0.4)] {
            support_oracle(Vector3::new(0.7, 1.3, 0.4), e1, e2, 12.0);
        }
        let h = support_radii(&Vector3::repeat(1.0), 1.0, 1.0, 1e-12);
        assert!(h.norm() < 1e-5);
    }

    proptest! {
        #[test]
        fn implicit_is_even(x in -3.0..3.0f64, y in -3.0..3.0f64, z in -3.0..3.0f64,
                            e1 in 0.1..2.0f64, e2 in 0.1..2.0f64) {
            let s = Vector3::new(1.1, 0.8, 1.5);
            let f = canonical_implicit(&Vector3::new(x, y, z), &s, e1, e2).unwrap();
            for sx in [-1.0, 1.0] { for sy in [-1.0, 1.0] { for sz in [-1.0, 1.0] {
                let g = canonical_implicit(&Vector3::new(sx * x, sy * y, sz * z), &s, e1, e2).unwrap();
                prop_assert_eq!(f, g);
            }}}
        }

        #[test]
        fn implicit_monotone_along_rays(dx in -1.0..1.0f64, dy in -1.0..1.0f64, dz in -1.0..1.0f64,
                                        t1 in 0.0..3.0f64, dt in 0.0..3.0f64,
                                        e1 in 0.1..2.0f64, e2 in 0.1..2.0f64) {
            let s = Vector3::new(0.6, 1.2, 0.9);
            let d = Vector3::new(dx, dy, dz);
            let a = canonical_implicit(&(d * t1), &s, e1, e2).unwrap();
            let b = canonical_implicit(&(d * (t1 + dt)), &s, e1, e2).unwrap();
            prop_assert!(b >= a * (1.0 - 1e-12));
        }

        #[test]
        fn ellipsoid_specialization(x in -3.0..3.0f64, y in -3.0..3.0f64, z in -3.0..3.0f64) {
            let s = Vector3::new(1.1, 0.8, 1.5);
            let f = canonical_implicit(&Vector3::new(x, y, z), &s, 1.0, 1.0).unwrap();
            let q = (x / s.x).powi(2) + (y / s.y).powi(2) + (z / s.z).powi(2);
            prop_assert!((f - q.min(F_CLAMP)).abs() <= 1e-12 * q.max(1.0));
        }

        #[test]
        fn rotation_is_proper(w in -1.0..1.0f64, x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64) {
            let q = UnitQuaternion::new(w, x, y, z);
            prop_assume!(q.norm() > 1e-3);
            let r = quat_to_rotmat(&q).unwrap();
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            let neg = quat_to_rotmat(&UnitQuaternion::new(-w, -x, -y, -z)).unwrap();
            prop_assert!((r - neg).abs().max() < 1e-12);
        }
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let q = UnitQuaternion::new(0.7, -0.3, 0.5, 1.2);
        let (_, jac) = rotmat_with_jacobian(&q).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let mut a = q.as_array();
            let mut b = q.as_array();
            a[k] += h;
            b[k] -= h;
            let fd = (quat_to_rotmat(&UnitQuaternion::from_array(a)).unwrap()
                - quat_to_rotmat(&UnitQuaternion::from_array(b)).unwrap())
                / (2.0 * h);
            assert_abs_diff_eq!(fd, jac[k], epsilon = 1e-8);
        }
    }

    #[test]
    fn implicit_gradient_matches_finite_differences() {
        let h = 1e-6;
        for form in [ImplicitForm::Standard, ImplicitForm::Literal] {
            for (e1, e2) in [(1.0, 1.0), (0.3, 1.6), (1.8, 0.25)] {
                let u = Vector3::new(0.4, -0.7, 0.3);
                let s = Vector3::new(0.9, 1.1, 0.6);
                let g = superquadric_grad(&u, &s, e1, e2, form);
                let f = |u: Vector3<f64>, s: Vector3<f64>, a: f64, b: f64| superquadric_value(&u, &s, a, b, form);
                for i in 0..3 {
                    let mut up = u;
                    let mut um = u;
                    up[i] += h;
                    um[i] -= h;
                    let fd = (f(up, s, e1, e2) - f(um, s, e1, e2)) / (2.0 * h);
                    assert_abs_diff_eq!(fd, g.d_local[i], epsilon = 1e-6);
                    let mut sp = s;
                    let mut sm = s;
                    sp[i] += h;
                    sm[i] -= h;
                    let fd = (f(u, sp, e1, e2) - f(u, sm, e1, e2)) / (2.0 * h);
                    assert_abs_diff_eq!(fd, g.d_scale[i], epsilon = 1e-6);
                }
                let fd1 = (f(u, s, e1 + h, e2) - f(u, s, e1 - h, e2)) / (2.0 * h);
                let fd2 = (f(u, s, e1, e2 + h) - f(u, s, e1, e2 - h)) / (2.0 * h);
                assert_abs_diff_eq!(fd1, g.d_eps[0], epsilon = 1e-6);
                assert_abs_diff_eq!(fd2, g.d_eps[1], epsilon = 1e-6);
            }
        }
    }
}
