//! Training objective: per-voxel (C+1)-way class probabilities, cross-entropy
//! and Lovász-softmax, with gradients back to `(p_occ, p_sem)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor inside the logarithm of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// `[1 - p_occ, p_occ * p_sem[0], ..., p_occ * p_sem[C-1]]`.
pub fn full_class_probs(p_occ: f64, p_sem: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(p_sem.len() + 1);
    out.push(1.0 - p_occ);
    out.extend(p_sem.iter().map(|s| p_occ * s));
    out
}

/// A loss value and its gradient with respect to a flat row-major
/// `voxels x (C+1)` probability table.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_shapes(probs: &[f64], width: usize, labels: &[u8]) -> Result<()> {
    if width == 0 || probs.len() != width * labels.len() {
        return Err(Error::invalid(format!(
            "probability table of length {} does not match {} voxels x {} classes",
            probs.len(),
            labels.len(),
            width
        )));
    }
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, l)| **l as usize >= width) {
        return Err(Error::invalid(format!("label {l} at voxel {i} out of range for {width} classes")));
    }
    Ok(())
}

/// Weighted mean of `-ln P(label)`; without weights this is the plain mean.
pub fn cross_entropy(probs: &[f64], width: usize, labels: &[u8], class_weights: Option<&[f64]>) -> Result<LossValue> {
    check_shapes(probs, width, labels)?;
    if let Some(w) = class_weights {
        if w.len() != width {
            return Err(Error::invalid(format!("{} class weights for {width} classes", w.len())));
        }
    }
    let weight = |l: usize| class_weights.map_or(1.0, |w| w[l]);
    let total_w: f64 = labels.iter().map(|l| weight(*l as usize)).sum();
    let mut grad = vec![0.0; probs.len()];
    if labels.is_empty() || total_w <= 0.0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let mut value = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let l = *l as usize;
        let w = weight(l) / total_w;
        let p = probs[i * width + l];
        if p > PROB_FLOOR {
            value -= w * p.ln();
            grad[i * width + l] = -w / p;
        } else {
            value -= w * PROB_FLOOR.ln();
        }
    }
    Ok(LossValue { value, grad })
}

/// Discrete gradient of the Jaccard loss's Lovász extension for ground truth
/// sorted by decreasing error.
fn jaccard_weights(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|f| **f).count() as f64;
    let mut out = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for f in fg_sorted {
        if *f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let inter = gts - cum_fg;
        let union = gts + cum_bg;
        let jac = 1.0 - inter / union;
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovász-softmax averaged over classes. With `present_only`, classes that
/// never occur in `labels` are skipped. Ties in the error ordering are broken
/// by voxel index.
pub fn lovasz_softmax(probs: &[f64], width: usize, labels: &[u8], present_only: bool) -> Result<LossValue> {
    check_shapes(probs, width, labels)?;
    let n = labels.len();
    let mut grad = vec![0.0; probs.len()];
    let mut per_class: Vec<(usize, f64, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for c in 0..width {
        let fg: Vec<bool> = labels.iter().map(|l| *l as usize == c).collect();
        if present_only && !fg.iter().any(|f| *f) {
            continue;
        }
        let err: Vec<f64> = (0..n)
            .map(|i| {
                let p = probs[i * width + c];
                if fg[i] {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        order.sort_by(|a, b| err[*b].total_cmp(&err[*a]).then(a.cmp(b)));
        let fg_sorted: Vec<bool> = order.iter().map(|i| fg[*i]).collect();
        let w = jaccard_weights(&fg_sorted);
        let loss: f64 = order.iter().zip(&w).map(|(i, w)| err[*i] * w).sum();
        per_class.push((c, loss, order.clone(), w));
    }
    if per_class.is_empty() {
        return Ok(LossValue { value: 0.0, grad });
    }
    let scale = 1.0 / per_class.len() as f64;
    let mut value = 0.0;
    for (c, loss, order, w) in per_class {
        value += loss * scale;
        for (i, wi) in order.iter().zip(w) {
            let sign = if labels[*i] as usize == c { -1.0 } else { 1.0 };
            grad[i * width + c] += sign * wi * scale;
        }
    }
    Ok(LossValue { value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub lovasz: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, lovasz: 1.0 }
    }
}

/// Combined objective over a set of voxels with gradients per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub ce: f64,
    pub lovasz: f64,
    pub total: f64,
    /// d total / d p_occ, one per voxel.
    pub d_occ: Vec<f64>,
    /// d total / d p_sem, `classes` per voxel.
    pub d_sem: Vec<f64>,
}

/// Evaluates `w_ce * CE + w_lov * Lovasz` on voxels described by `p_occ`
/// and flat `p_sem` (`classes` per voxel) against `labels` in `0..=classes`.
pub fn evaluate_losses(
    p_occ: &[f64],
    p_sem: &[f64],
    classes: usize,
    labels: &[u8],
    weights: LossWeights,
    class_weights: Option<&[f64]>,
) -> Result<LossReport> {
    let n = labels.len();
    if p_occ.len() != n || p_sem.len() != n * classes {
        return Err(Error::invalid("probability and label lengths disagree"));
    }
    let width = classes + 1;
    let mut probs = Vec::with_capacity(n * width);
    for v in 0..n {
        probs.extend(full_class_probs(p_occ[v], &p_sem[v * classes..(v + 1) * classes]));
    }
    let ce = cross_entropy(&probs, width, labels, class_weights)?;
    let lov = lovasz_softmax(&probs, width, labels, true)?;
    let mut d_occ = vec![0.0; n];
    let mut d_sem = vec![0.0; n * classes];
    for v in 0..n {
        let g = |k: usize| weights.ce * ce.grad[v * width + k] + weights.lovasz * lov.grad[v * width + k];
        let sem = &p_sem[v * classes..(v + 1) * classes];
        let mut d = -g(0);
        for k in 0..classes {
            let gk = g(k + 1);
            d += gk * sem[k];
            d_sem[v * classes + k] = gk * p_occ[v];
        }
        d_occ[v] = d;
    }
    let total = weights.ce * ce.value + weights.lovasz * lov.value;
    if !total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss (ce {}, lovasz {})", ce.value, lov.value)));
    }
    Ok(LossReport {
        ce: ce.value,
        lovasz: lov.value,
        total,
        d_occ,
        d_sem,
    })
}

/// Inverse-frequency class weights over `0..=classes`, normalized to mean 1
/// across present classes; absent classes get weight 0.
pub fn inverse_frequency_weights(labels: &[u8], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes + 1];
    for l in labels {
        counts[*l as usize] += 1;
    }
    let mut w: Vec<f64> = counts.iter().map(|c| if *c == 0 { 0.0 } else { 1.0 / *c as f64 }).collect();
    let present = counts.iter().filter(|c| **c > 0).count().max(1) as f64;
    let sum: f64 = w.iter().sum();
    if sum > 0.0 {
        w.iter_mut().for_each(|v| *v *= present / sum);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_class_prob_examples() {
        assert_eq!(full_class_probs(0.0, &[0.3, 0.7]), vec![1.0, 0.0, 0.0]);
        assert_eq!(full_class_probs(1.0, &[0.0, 1.0]), vec![0.0, 0.0, 1.0]);
        let p = full_class_probs(0.5, &[0.6, 0.4]);
        assert_abs_diff_eq!(p.as_slice(), [0.5, 0.3, 0.2].as_slice(), epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let perfect = cross_entropy(&[0.0, 1.0, 1.0, 0.0], 2, &[1, 0], None).unwrap();
        assert_eq!(perfect.value, 0.0);
        let uniform = vec![1.0 / 17.0; 17 * 3];
        let u = cross_entropy(&uniform, 17, &[0, 5, 16], None).unwrap();
        assert_abs_diff_eq!(u.value, 17f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(u.value, 2.833_213, epsilon = 1e-6);
        // Hand evaluation: -(ln 0.5 + ln 0.25) / 2.
        let two = cross_entropy(&[0.5, 0.5, 0.75, 0.25], 2, &[0, 1], None).unwrap();
        assert_abs_diff_eq!(two.value, -(0.5f64.ln() + 0.25f64.ln()) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(two.value, 1.039_721, epsilon = 1e-6);
        assert!(matches!(cross_entropy(&[0.5, 0.5], 2, &[2], None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn lovasz_examples() {
        let perfect = lovasz_softmax(&[1.0, 0.0, 0.0, 1.0], 2, &[0, 1], true).unwrap();
        assert_eq!(perfect.value, 0.0);
        // Single voxel of class 1 predicted with zero probability: class 1 term is 1,
        // and class 0 (absent) is skipped.
        let miss = lovasz_softmax(&[1.0, 0.0], 2, &[1], true).unwrap();
        assert_abs_diff_eq!(miss.value, 1.0, epsilon = 1e-15);
        // With all classes averaged the absent class adds a term of 1 as well.
        let all = lovasz_softmax(&[1.0, 0.0], 2, &[1], false).unwrap();
        assert_abs_diff_eq!(all.value, 1.0, epsilon = 1e-15);
    }

    /// Lovász extension of the Jaccard set loss, evaluated by integrating the
    /// set function over level sets of the error vector.
    fn lovasz_by_levels(err: &[f64], fg: &[bool]) -> f64 {
        let set_loss = |m: &[bool]| -> f64 {
            let mis = m.iter().filter(|v| **v).count() as f64;
            let union = (0..m.len()).filter(|i| fg[*i] || m[*i]).count() as f64;
            if union == 0.0 {
                0.0
            } else {
                mis / union
            }
        };
        let mut levels: Vec<f64> = err.to_vec();
        levels.push(0.0);
        levels.sort_by(|a, b| a.total_cmp(b));
        levels.dedup();
        let mut total = 0.0;
        for w in levels.windows(2) {
            let m: Vec<bool> = err.iter().map(|e| *e >= w[1]).collect();
            total += (w[1] - w[0]) * set_loss(&m);
        }
        total
    }

    #[test]
    fn lovasz_crafted_four_voxel_case() {
        let probs = [0.9, 0.1, 0.4, 0.6, 0.3, 0.7, 0.8, 0.2];
        let labels = [0u8, 0, 1, 1];
        let got = lovasz_softmax(&probs, 2, &labels, true).unwrap();
        let mut expect = 0.0;
        for c in 0..2 {
            let fg: Vec<bool> = labels.iter().map(|l| *l as usize == c).collect();
            let err: Vec<f64> = (0..4).map(|i| if fg[i] { 1.0 - probs[i * 2 + c] } else { probs[i * 2 + c] }).collect();
            expect += lovasz_by_levels(&err, &fg) / 2.0;
        }
        assert_abs_diff_eq!(got.value, expect, epsilon = 1e-12);
    }

    fn random_instance(seed: u64, voxels: usize, classes: usize) -> (Vec<f64>, Vec<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p_occ: Vec<f64> = (0..voxels).map(|_| rng.gen_range(0.05..0.95)).collect();
        let mut p_sem = Vec::new();
        for _ in 0..voxels {
            let r: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = r.iter().sum();
            p_sem.extend(r.iter().map(|v| v / s));
        }
        let labels = (0..voxels).map(|_| rng.gen_range(0..=classes) as u8).collect();
        (p_occ, p_sem, labels)
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let classes = 3;
        let h = 1e-6;
        for seed in 0..20 {
            let (p_occ, p_sem, labels) = random_instance(seed, 8, classes);
            let w = LossWeights::default();
            let r = evaluate_losses(&p_occ, &p_sem, classes, &labels, w, None).unwrap();
            let f = |o: &[f64], s: &[f64]| evaluate_losses(o, s, classes, &labels, w, None).unwrap().total;
            for v in 0..8 {
                let mut up = p_occ.clone();
                let mut dn = p_occ.clone();
                up[v] += h;
                dn[v] -= h;
                let fd = (f(&up, &p_sem) - f(&dn, &p_sem)) / (2.0 * h);
                assert!((fd - r.d_occ[v]).abs() <= 1e-4 * fd.abs().max(r.d_occ[v].abs()).max(1e-3));
                for k in 0..classes {
                    let mut up = p_sem.clone();
                    let mut dn = p_sem.clone();
                    up[v * classes + k] += h;
                    dn[v * classes + k] -= h;
                    let fd = (f(&p_occ, &up) - f(&p_occ, &dn)) / (2.0 * h);
                    let a = r.d_sem[v * classes + k];
                    assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-3), "seed {seed} v {v} k {k}: {a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn class_weights_reweight_mean() {
        let probs = [0.5, 0.5, 0.75, 0.25];
        let w = [1.0, 3.0];
        let v = cross_entropy(&probs, 2, &[0, 1], Some(&w)).unwrap().value;
        assert_abs_diff_eq!(v, -(0.5f64.ln() + 3.0 * 0.25f64.ln()) / 4.0, epsilon = 1e-15);
        let iw = inverse_frequency_weights(&[0, 0, 0, 1], 2);
        assert_abs_diff_eq!(iw[1] / iw[0], 3.0, epsilon = 1e-12);
        assert_eq!(iw[2], 0.0);
    }

    proptest! {
        #[test]
        fn loss_ranges_and_permutation_invariance(seed in 0u64..10_000) {
            let (p_occ, p_sem, labels) = random_instance(seed, 10, 3);
            let mut probs = Vec::new();
            for v in 0..10 {
                let p = full_class_probs(p_occ[v], &p_sem[v * 3..v * 3 + 3]);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|x| *x >= 0.0));
                probs.extend(p);
            }
            let ce = cross_entropy(&probs, 4, &labels, None).unwrap().value;
            prop_assert!(ce >= 0.0);
            let l = lovasz_softmax(&probs, 4, &labels, true).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&l));
            let perm: Vec<usize> = (0..10).rev().collect();
            let probs2: Vec<f64> = perm.iter().flat_map(|i| probs[i * 4..i * 4 + 4].to_vec()).collect();
            let labels2: Vec<u8> = perm.iter().map(|i| labels[*i]).collect();
            let l2 = lovasz_softmax(&probs2, 4, &labels2, true).unwrap().value;
            prop_assert!((l - l2).abs() < 1e-12);
        }
    }
}
