//! Segmentation quality (IoU, F1, MAE) and continual-learning summaries
//! (AA, FM, FT) over an accuracy matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;

fn check_shape(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::dim("mask metric", &[a.height, a.width], &[b.height, b.width]));
    }
    Ok(())
}

fn counts(pred: &Mask, gt: &Mask) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

/// `|P ∩ G| / |P ∪ G|`, 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shape(pred, gt)?;
    let (tp, fp, fn_) = counts(pred, gt);
    let union = tp + fp + fn_;
    Ok(if union == 0 { 1.0 } else { tp as f64 / union as f64 })
}

/// Harmonic mean of precision and recall; 1 when both empty, 0 when exactly one is.
pub fn f1(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shape(pred, gt)?;
    let (tp, fp, fn_) = counts(pred, gt);
    let (np, ng) = (tp + fp, tp + fn_);
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 || tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / np as f64;
    let recall = tp as f64 / ng as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Mean absolute difference between a probability map and the mask.
pub fn mae(prob: &[f64], gt: &Mask) -> Result<f64> {
    if prob.len() != gt.data.len() {
        return Err(Error::dim("mae", &[prob.len()], &[gt.height, gt.width]));
    }
    let s: f64 = prob
        .iter()
        .zip(&gt.data)
        .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(s / prob.len() as f64)
}

/// Per-image scores of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub iou: f64,
    pub f1: f64,
    pub mae: f64,
}

impl SegScores {
    pub fn of(pred: &Mask, prob: &[f64], gt: &Mask) -> Result<Self> {
        Ok(Self {
            iou: iou(pred, gt)?,
            f1: f1(pred, gt)?,
            mae: mae(prob, gt)?,
        })
    }

    /// Dataset-level means (mIoU, mF1, mMAE) of per-image scores, summed in order.
    pub fn mean(scores: &[SegScores]) -> Result<SegScores> {
        if scores.is_empty() {
            return Err(Error::Validation("mean of zero scores".into()));
        }
        let n = scores.len() as f64;
        let mut acc = SegScores { iou: 0.0, f1: 0.0, mae: 0.0 };
        for s in scores {
            acc.iou += s.iou;
            acc.f1 += s.f1;
            acc.mae += s.mae;
        }
        Ok(SegScores {
            iou: acc.iou / n,
            f1: acc.f1 / n,
            mae: acc.mae / n,
        })
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::MIou => self.iou,
            Metric::MF1 => self.f1,
            Metric::MMae => self.mae,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "miou")]
    MIou,
    #[serde(rename = "mf1")]
    MF1,
    #[serde(rename = "mmae")]
    MMae,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::MIou, Metric::MF1, Metric::MMae];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MIou => "miou",
            Metric::MF1 => "mf1",
            Metric::MMae => "mmae",
        }
    }
}

/// `a[i][j]`: score on task `j` after training task `i` (0-based).
///
/// Only `j <= i` and `j == i + 1` are ever filled; other cells stay `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            cells: vec![vec![None; tasks]; tasks],
        }
    }

    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let t = rows.len();
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::Validation("accuracy matrix must be square".into()));
        }
        Ok(Self { cells: rows })
    }

    pub fn tasks(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        let t = self.tasks();
        if i >= t || j >= t {
            return Err(Error::Index(format!("cell ({i}, {j}) outside {t}x{t} matrix")));
        }
        if j > i + 1 {
            return Err(Error::Validation(format!("cell ({i}, {j}) is above the superdiagonal")));
        }
        self.cells[i][j] = Some(v);
        Ok(())
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.cells
    }

    fn need(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j).ok_or(Error::IncompleteMatrix { row: i, col: j })
    }

    /// Final-row values `a[T-1][j]`.
    pub fn final_row(&self) -> Result<Vec<f64>> {
        let t = self.tasks();
        if t == 0 {
            return Err(Error::UndefinedMetric("empty matrix".into()));
        }
        (0..t).map(|j| self.need(t - 1, j)).collect()
    }
}

/// Average accuracy over the final row.
pub fn aa(m: &AccuracyMatrix) -> Result<f64> {
    let row = m.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Forgetting measure `(1/T) Σ_j (a[j][j] - a[T-1][j])`.
pub fn fm(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    let row = m.final_row()?;
    let mut s = 0.0;
    for (j, last) in row.iter().enumerate() {
        s += m.need(j, j)? - last;
    }
    Ok(s / t as f64)
}

/// Forward transfer `(1/(T-1)) Σ_i a[i][i+1]`.
pub fn ft(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t < 2 {
        return Err(Error::UndefinedMetric(format!("forward transfer needs T >= 2, got {t}")));
    }
    let mut s = 0.0;
    for i in 0..t - 1 {
        s += m.need(i, i + 1)?;
    }
    Ok(s / (t - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Mask::new(h, w, rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect()).unwrap()
    }

    fn filled(rows: &[&[f64]]) -> AccuracyMatrix {
        AccuracyMatrix::from_rows(rows.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect()).unwrap()
    }

    #[test]
    fn identical_masks() {
        let m = mask(&[".##.", ".##."]);
        assert_eq!(iou(&m, &m).unwrap(), 1.0);
        assert_eq!(f1(&m, &m).unwrap(), 1.0);
        assert_eq!(mae(&m.to_f64(), &m).unwrap(), 0.0);
    }

    #[test]
    fn prediction_inside_ground_truth() {
        // gt 4 px, prediction 2 of them
        let gt = mask(&["##..", "##.."]);
        let pred = mask(&["#...", "#..."]);
        assert_eq!(iou(&pred, &gt).unwrap(), 0.5);
        assert!((f1(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_and_empty_conventions() {
        let a = mask(&["#..."]);
        let b = mask(&["...#"]);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(f1(&a, &b).unwrap(), 0.0);
        let e = mask(&["...."]);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(f1(&e, &e).unwrap(), 1.0);
        assert_eq!(f1(&e, &a).unwrap(), 0.0);
        assert!(iou(&a, &mask(&["..."])).is_err());
    }

    #[test]
    fn aa_of_reported_final_row() {
        let row = [0.869, 0.738, 0.907, 0.879, 0.769];
        let mut m = AccuracyMatrix::new(5);
        for (j, &v) in row.iter().enumerate() {
            m.set(4, j, v).unwrap();
        }
        assert!((aa(&m).unwrap() - 0.832).abs() <= 0.0005);
    }

    #[test]
    fn aa_degenerate_cases() {
        assert_eq!(aa(&filled(&[&[0.5]])).unwrap(), 0.5);
        assert!((aa(&filled(&[&[0.3, 0.3], &[0.3, 0.3]])).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(aa(&AccuracyMatrix::new(2)), Err(Error::IncompleteMatrix { .. })));
    }

    #[test]
    fn fm_cases() {
        let mut m = AccuracyMatrix::new(2);
        m.set(0, 0, 0.9).unwrap();
        m.set(1, 0, 0.7).unwrap();
        m.set(1, 1, 0.8).unwrap();
        assert!((fm(&m).unwrap() - 0.1).abs() < 1e-15);
        let same = filled(&[&[0.5, 0.1], &[0.5, 0.6]]);
        let mut nf = same.clone();
        nf.set(1, 0, 0.5).unwrap();
        assert_eq!(fm(&nf).unwrap(), (0.5 - 0.5 + 0.6 - 0.6) / 2.0);
    }

    #[test]
    fn ft_cases() {
        let mut m = AccuracyMatrix::new(2);
        m.set(0, 1, 0.4).unwrap();
        assert_eq!(ft(&m).unwrap(), 0.4);
        let mut m3 = AccuracyMatrix::new(3);
        m3.set(0, 1, 0.2).unwrap();
        m3.set(1, 2, 0.6).unwrap();
        assert!((ft(&m3).unwrap() - 0.4).abs() < 1e-15);
        let mut c = AccuracyMatrix::new(4);
        for i in 0..3 {
            c.set(i, i + 1, 0.25).unwrap();
        }
        assert_eq!(ft(&c).unwrap(), 0.25);
        assert!(matches!(ft(&AccuracyMatrix::new(1)), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn cells_above_superdiagonal_rejected() {
        let mut m = AccuracyMatrix::new(3);
        assert!(m.set(0, 2, 0.1).is_err());
    }

    fn arb_masks() -> impl Strategy<Value = (Mask, Mask)> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(any::<bool>(), h * w),
                proptest::collection::vec(any::<bool>(), h * w),
            )
                .prop_map(move |(a, b)| (Mask::new(h, w, a).unwrap(), Mask::new(h, w, b).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn symmetric_and_dice_jaccard((a, b) in arb_masks()) {
            let i = iou(&a, &b).unwrap();
            let f = f1(&a, &b).unwrap();
            prop_assert_eq!(i, iou(&b, &a).unwrap());
            prop_assert!((f - f1(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!((f - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        }

        #[test]
        fn mae_complement(probs in proptest::collection::vec(0.0f64..1.0, 12), bits in proptest::collection::vec(any::<bool>(), 12)) {
            let g = Mask::new(3, 4, bits.clone()).unwrap();
            let gc = Mask::new(3, 4, bits.iter().map(|b| !b).collect()).unwrap();
            let pc: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
            prop_assert!((mae(&probs, &g).unwrap() - mae(&pc, &gc).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn summaries_match_loops(t in 1usize..7, vals in proptest::collection::vec(0.0f64..1.0, 49)) {
            let mut m = AccuracyMatrix::new(t);
            for i in 0..t {
                for j in 0..t.min(i + 2) {
                    m.set(i, j, vals[i * 7 + j]).unwrap();
                }
            }
            let mut s_aa = 0.0;
            let mut s_fm = 0.0;
            for j in 0..t {
                s_aa += vals[(t - 1) * 7 + j];
                s_fm += vals[j * 7 + j] - vals[(t - 1) * 7 + j];
            }
            prop_assert!((aa(&m).unwrap() - s_aa / t as f64).abs() < 1e-12);
            prop_assert!((fm(&m).unwrap() - s_fm / t as f64).abs() < 1e-12);
            if t >= 2 {
                let s_ft: f64 = (0..t - 1).map(|i| vals[i * 7 + i + 1]).sum();
                prop_assert!((ft(&m).unwrap() - s_ft / (t - 1) as f64).abs() < 1e-12);
            }
        }
    }
}
