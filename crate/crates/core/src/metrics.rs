//! Confusion matrices, per-class IoU / mIoU and binary occupancy IoU.

use crate::error::{Error, Result};
use crate::rasterizer::OccupancyGrid;

/// `(C+1) x (C+1)` counts; rows are ground truth, columns are predictions.
/// Class 0 is empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            counts: vec![0; size * size],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::invalid("confusion matrix rows must be square"));
        }
        Ok(Self {
            size,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.size + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.size + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.size != self.size {
            return Err(Error::invalid("confusion matrices differ in size"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<ConfusionMatrix> {
    if pred.spec != gt.spec {
        return Err(Error::invalid("prediction and ground truth grids have different specs"));
    }
    let size = pred.classes.max(gt.classes) + 1;
    let mut cm = ConfusionMatrix::zeros(size);
    for (p, g) in pred.labels.iter().zip(&gt.labels) {
        cm.add(*g as usize, *p as usize);
    }
    Ok(cm)
}

/// Per-class IoU over non-empty classes; `None` where TP + FP + FN = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    /// Index `k` holds class `k + 1`.
    pub per_class: Vec<Option<f64>>,
}

/// Mean IoU over non-empty classes, skipping classes absent from both grids.
pub fn miou(cm: &ConfusionMatrix) -> MiouReport {
    let n = cm.size();
    let mut per_class = Vec::with_capacity(n.saturating_sub(1));
    for c in 1..n {
        let tp = cm.get(c, c);
        let fn_: u64 = (0..n).filter(|p| *p != c).map(|p| cm.get(c, p)).sum();
        let fp: u64 = (0..n).filter(|g| *g != c).map(|g| cm.get(g, c)).sum();
        let denom = tp + fp + fn_;
        per_class.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    MiouReport { miou, per_class }
}

/// Occupied-vs-empty IoU: all non-empty classes collapse to "occupied".
pub fn iou_binary(cm: &ConfusionMatrix) -> f64 {
    let n = cm.size();
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for g in 0..n {
        for p in 0..n {
            let c = cm.get(g, p);
            match (g != 0, p != 0) {
                (true, true) => tp += c,
                (false, true) => fp += c,
                (true, false) => fn_ += c,
                _ => {}
            }
        }
    }
    let d = tp + fp + fn_;
    if d == 0 {
        1.0
    } else {
        tp as f64 / d as f64
    }
}

/// IoU, mIoU and per-class IoU for a prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub iou: f64,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn evaluate(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<Evaluation> {
    let cm = confusion(pred, gt)?;
    let m = miou(&cm);
    Ok(Evaluation {
        iou: iou_binary(&cm),
        miou: m.miou,
        per_class: m.per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasterizer::GridSpec;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(n: usize) -> GridSpec {
        GridSpec::new([n, n, n], Vector3::zeros(), Vector3::repeat(1.0)).unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> OccupancyGrid {
        let s = spec(n);
        let labels = (0..s.voxel_count()).map(|_| rng.gen_range(0..=classes) as u8).collect();
        OccupancyGrid::new(s, classes, labels).unwrap()
    }

    #[test]
    fn identical_grids_are_diagonal_and_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 4, 3);
        let cm = confusion(&g, &g).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    assert_eq!(cm.get(a, b), 0);
                }
            }
        }
        assert_eq!(miou(&cm).miou, 1.0);
        assert_eq!(iou_binary(&cm), 1.0);
    }

    #[test]
    fn all_empty_vs_all_class_one() {
        let s = spec(2);
        let pred = OccupancyGrid::empty(s, 2);
        let gt = OccupancyGrid::new(s, 2, vec![1; 8]).unwrap();
        let cm = confusion(&pred, &gt).unwrap();
        assert_eq!(cm.get(1, 0), 8);
        assert_eq!(cm.total(), 8);
        let m = miou(&cm);
        assert_eq!(m.per_class, vec![Some(0.0), None]);
        assert_eq!(m.miou, 0.0);
        assert_eq!(iou_binary(&cm), 0.0);
    }

    #[test]
    fn toy_matrix() {
        // Hand tally: TP 2, FP 1, FN 1 for both classes.
        let cm = ConfusionMatrix::from_rows(&[vec![0, 0, 0], vec![0, 2, 1], vec![0, 1, 2]]).unwrap();
        let m = miou(&cm);
        assert_eq!(m.per_class, vec![Some(0.5), Some(0.5)]);
        assert_eq!(m.miou, 0.5);
    }

    #[test]
    fn wrong_semantics_keep_binary_iou() {
        let s = spec(3);
        let gt = OccupancyGrid::new(s, 2, (0..27).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let pred = OccupancyGrid::new(s, 2, gt.labels.iter().map(|l| if *l == 1 { 2 } else { 0 }).collect()).unwrap();
        let cm = confusion(&pred, &gt).unwrap();
        assert_eq!(iou_binary(&cm), 1.0);
        assert_eq!(miou(&cm).miou, 0.0);
    }

    #[test]
    fn half_overlapping_cubes() {
        // Two 4x4x4 cubes offset by 2 voxels along x in a 8x4x4 grid:
        // intersection 2*4*4 = 32, union 6*4*4 = 96.
        let s = GridSpec::new([8, 4, 4], Vector3::zeros(), Vector3::repeat(1.0)).unwrap();
        let cube = |x0: usize| {
            let labels = (0..s.voxel_count())
                .map(|i| {
                    let [x, _, _] = s.coords(i);
                    (x >= x0 && x < x0 + 4) as u8
                })
                .collect();
            OccupancyGrid::new(s, 1, labels).unwrap()
        };
        let cm = confusion(&cube(0), &cube(2)).unwrap();
        assert_eq!(iou_binary(&cm), 32.0 / 96.0);
    }

    #[test]
    fn spec_mismatch_rejected() {
        let a = OccupancyGrid::empty(spec(2), 1);
        let b = OccupancyGrid::empty(spec(3), 1);
        assert!(matches!(confusion(&a, &b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn matches_brute_force_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let a = random_grid(&mut rng, 4, 3);
            let b = random_grid(&mut rng, 4, 3);
            let cm = confusion(&a, &b).unwrap();
            for g in 0..4u8 {
                for p in 0..4u8 {
                    let n = (0..64).filter(|i| b.labels[*i] == g && a.labels[*i] == p).count() as u64;
                    assert_eq!(cm.get(g as usize, p as usize), n);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn iou_bounds_and_relabel_invariance(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_grid(&mut rng, 3, 4);
            let b = random_grid(&mut rng, 3, 4);
            let cm = confusion(&a, &b).unwrap();
            let m = miou(&cm);
            let max = m.per_class.iter().flatten().cloned().fold(0.0, f64::max);
            prop_assert!(m.per_class.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(m.miou <= max + 1e-15);
            let perm = [0u8, 3, 1, 4, 2];
            let relabel = |g: &OccupancyGrid| OccupancyGrid::new(g.spec, g.classes, g.labels.iter().map(|l| perm[*l as usize]).collect()).unwrap();
            let cm2 = confusion(&relabel(&a), &relabel(&b)).unwrap();
            prop_assert_eq!(iou_binary(&cm), iou_binary(&cm2));
        }
    }
}
