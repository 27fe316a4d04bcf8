//! Browser demo: renders superquadric cross-sections, mixture occupancy
//! slices and ellipsoid vs Gaussian comparisons into RGBA buffers for a
//! canvas. The plain functions are testable natively; the `#[wasm_bindgen]`
//! wrappers only convert errors.

use nalgebra::Vector3;
use quadmix::field::{gaussian_occupancy, quadric_occupancy_with, FieldOptions, PreparedSet};
use quadmix::primitives::{GaussianPrimitive, ImplicitForm, Superquadric, UnitQuaternion};
use quadmix::Result;
use wasm_bindgen::prelude::*;

/// One color per semantic class in the mixture view.
const PALETTE: [[u8; 3]; 4] = [[230, 90, 70], [70, 150, 230], [90, 200, 110], [235, 190, 60]];

/// Square view of the plane `axis = offset` (axis 0: x, 1: y, 2: z), spanning
/// `[-half, half]` in both in-plane directions.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub size: usize,
    pub half: f64,
    pub axis: usize,
    pub offset: f64,
}

impl View {
    fn point(&self, px: usize, py: usize) -> Vector3<f64> {
        let t = |p: usize| -self.half + 2.0 * self.half * (p as f64 + 0.5) / self.size as f64;
        let (a, b) = (t(px), -t(py));
        match self.axis {
            0 => Vector3::new(self.offset, a, b),
            1 => Vector3::new(a, self.offset, b),
            _ => Vector3::new(a, b, self.offset),
        }
    }

    fn render(&self, mut shade: impl FnMut(Vector3<f64>) -> Result<[u8; 3]>) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.size * self.size * 4);
        for py in 0..self.size {
            for px in 0..self.size {
                let [r, g, b] = shade(self.point(px, py))?;
                out.extend_from_slice(&[r, g, b, 255]);
            }
        }
        Ok(out)
    }
}

fn gray(p: f64) -> [u8; 3] {
    let v = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
    [v, v, v]
}

fn yawed(yaw_deg: f64) -> UnitQuaternion {
    UnitQuaternion::from_axis_angle(Vector3::z(), yaw_deg.to_radians())
}

/// Occupancy `exp(-f)` of one superquadric on a plane, with the `f = 1`
/// contour highlighted.
#[allow(clippy::too_many_arguments)]
pub fn quadric_slice(eps1: f64, eps2: f64, scale: [f64; 3], yaw_deg: f64, literal: bool, view: View) -> Result<Vec<u8>> {
    let q = Superquadric {
        position: Vector3::zeros(),
        scale: Vector3::from(scale),
        rotation: yawed(yaw_deg),
        opacity: 1.0,
        eps1,
        eps2,
        semantics: vec![1.0],
    };
    q.validate(&quadmix::primitives::ExponentBounds::new(0.01, 10.0)?)?;
    let form = if literal { ImplicitForm::Literal } else { ImplicitForm::Standard };
    let edge = (-1.0f64).exp();
    let band = 0.02;
    view.render(|x| {
        let p = quadric_occupancy_with(&x, &q, form)?;
        Ok(if (p - edge).abs() < band * edge { [255, 160, 40] } else { gray(p) })
    })
}

/// A seeded random mixture sampled on a plane: hue from the argmax class,
/// brightness from the mixture occupancy.
pub fn mixture_slice(count: usize, seed: u64, eps_lo: f64, eps_hi: f64, opacity_scaled: bool, view: View) -> Result<Vec<u8>> {
    let prims = random_mixture(count, seed, eps_lo, eps_hi, view.half)?;
    let opts = FieldOptions {
        opacity_scaled,
        cutoff_f: 12.0,
        ..FieldOptions::default()
    };
    let set = PreparedSet::new(&prims, opts)?;
    view.render(|x| {
        let s = set.sample(&x);
        let k = s.p_sem.iter().enumerate().fold(0, |b, (i, v)| if *v > s.p_sem[b] { i } else { b });
        let c = PALETTE[k % PALETTE.len()];
        Ok(c.map(|v| (v as f64 * s.p_occ).round() as u8))
    })
}

fn random_mixture(count: usize, seed: u64, eps_lo: f64, eps_hi: f64, half: f64) -> Result<Vec<Superquadric>> {
    if count == 0 || count > 256 {
        return Err(quadmix::Error::InvalidArgument(format!("count {count} outside 1..=256")));
    }
    let bounds = quadmix::primitives::ExponentBounds::new(eps_lo, eps_hi)?;
    // Small LCG keeps the demo free of extra dependencies; quality is irrelevant here.
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut sem = vec![0.05; PALETTE.len()];
        sem[(next() * PALETTE.len() as f64) as usize % PALETTE.len()] = 0.85;
        out.push(Superquadric {
            position: Vector3::new((next() * 2.0 - 1.0) * half * 0.8, (next() * 2.0 - 1.0) * half * 0.8, (next() * 2.0 - 1.0) * 0.5),
            scale: Vector3::new(0.3 + next() * half * 0.3, 0.3 + next() * half * 0.3, 0.3 + next() * half * 0.3),
            rotation: yawed(next() * 360.0),
            opacity: 0.4 + 0.6 * next(),
            eps1: bounds.lo + (bounds.hi - bounds.lo) * next(),
            eps2: bounds.lo + (bounds.hi - bounds.lo) * next(),
            semantics: sem,
        });
    }
    Ok(out)
}

/// Side-by-side image (left: superquadric with eps = 1 and scale `s`, right:
/// Gaussian with scale `s / sqrt(2)`) and the largest absolute occupancy gap.
pub fn ellipsoid_comparison(scale: [f64; 3], yaw_deg: f64, view: View) -> Result<(Vec<u8>, f64)> {
    let rot = yawed(yaw_deg);
    let q = Superquadric {
        position: Vector3::zeros(),
        scale: Vector3::from(scale),
        rotation: rot,
        opacity: 1.0,
        eps1: 1.0,
        eps2: 1.0,
        semantics: vec![1.0],
    };
    let g = GaussianPrimitive {
        position: Vector3::zeros(),
        scale: Vector3::from(scale) / 2f64.sqrt(),
        rotation: rot,
        opacity: 1.0,
        semantics: vec![1.0],
    };
    q.validate(&Default::default())?;
    let mut gap: f64 = 0.0;
    let mut out = vec![0u8; view.size * 2 * view.size * 4];
    for py in 0..view.size {
        for px in 0..view.size {
            let x = view.point(px, py);
            let a = quadric_occupancy_with(&x, &q, ImplicitForm::Standard)?;
            let b = gaussian_occupancy(&x, &g)?;
            gap = gap.max((a - b).abs());
            for (col, p) in [(px, a), (px + view.size, b)] {
                let i = (py * view.size * 2 + col) * 4;
                let [r, gg, bb] = gray(p);
                out[i..i + 4].copy_from_slice(&[r, gg, bb, 255]);
            }
        }
    }
    Ok((out, gap))
}

fn js(e: quadmix::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn view(size: u32, half: f64, axis: u32, offset: f64) -> std::result::Result<View, JsValue> {
    if !(8..=1024).contains(&size) || axis > 2 || !(half > 0.0 && half.is_finite()) {
        return Err(JsValue::from_str("size must be in 8..=1024, axis in 0..=2, half > 0"));
    }
    Ok(View {
        size: size as usize,
        half,
        axis: axis as usize,
        offset,
    })
}

#[wasm_bindgen(js_name = quadricSlice)]
#[allow(clippy::too_many_arguments)]
pub fn quadric_slice_js(eps1: f64, eps2: f64, sx: f64, sy: f64, sz: f64, yaw_deg: f64, literal: bool, size: u32, half: f64, axis: u32, offset: f64) -> std::result::Result<Vec<u8>, JsValue> {
    quadric_slice(eps1, eps2, [sx, sy, sz], yaw_deg, literal, view(size, half, axis, offset)?).map_err(js)
}

#[wasm_bindgen(js_name = mixtureSlice)]
#[allow(clippy::too_many_arguments)]
pub fn mixture_slice_js(count: u32, seed: u32, eps_lo: f64, eps_hi: f64, opacity_scaled: bool, size: u32, half: f64, offset: f64) -> std::result::Result<Vec<u8>, JsValue> {
    mixture_slice(count as usize, seed as u64, eps_lo, eps_hi, opacity_scaled, view(size, half, 2, offset)?).map_err(js)
}

/// Returns the image followed by the gap as 8 little-endian bytes.
#[wasm_bindgen(js_name = ellipsoidComparison)]
pub fn ellipsoid_comparison_js(sx: f64, sy: f64, sz: f64, yaw_deg: f64, size: u32, half: f64, offset: f64) -> std::result::Result<Vec<u8>, JsValue> {
    let (mut img, gap) = ellipsoid_comparison([sx, sy, sz], yaw_deg, view(size, half, 2, offset)?).map_err(js)?;
    img.extend_from_slice(&gap.to_le_bytes());
    Ok(img)
}
