//! Detection metrics, the reconstruction-threshold baseline and loss-curve
//! output.
//!
//! Attack (label 1) is the positive class throughout. Confusion matrices are
//! printed one row per true class, `[predicted benign, predicted attack]`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{mse_loss, DenseNet};
use crate::scaler::MinMaxScaler;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `(benign row, attack row)`, each `[predicted benign, predicted attack]`.
    pub fn rows(&self) -> ([u64; 2], [u64; 2]) {
        ([self.tn, self.fp], [self.fn_, self.tp])
    }

    pub fn from_rows(benign: [u64; 2], attack: [u64; 2]) -> Self {
        Self {
            tn: benign[0],
            fp: benign[1],
            fn_: attack[0],
            tp: attack[1],
        }
    }

    /// The same counts with benign taken as the positive class.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            (0, 1) => cm.fn_ += 1,
            _ => return Err(Error::Schema(format!("labels must be 0 or 1, got ({p}, {l})"))),
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True rows of this class.
    pub support: u64,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

fn ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn positive_metrics(cm: &ConfusionMatrix) -> ClassMetrics {
    let mut flag = false;
    let precision = ratio(cm.tp, cm.tp + cm.fp, &mut flag);
    let recall = ratio(cm.tp, cm.tp + cm.fn_, &mut flag);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support: cm.tp + cm.fn_,
        zero_division: flag,
    }
}

/// Per-class metrics. A class with no true rows has no metrics (printed as
/// `--`), as with a benign-only test set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub benign: Option<ClassMetrics>,
    pub attack: Option<ClassMetrics>,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl ClassReport {
    /// Unweighted mean F1 over the classes present. This is the single F1
    /// figure used to compare experiments.
    pub fn macro_f1(&self) -> f64 {
        let present: Vec<f64> = [self.benign, self.attack].iter().flatten().map(|m| m.f1).collect();
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn class_report(cm: &ConfusionMatrix) -> Result<ClassReport> {
    if cm.total() == 0 {
        return Err(Error::EmptyInput("confusion matrix has no rows".into()));
    }
    let attack = positive_metrics(cm);
    let benign = positive_metrics(&cm.swapped());
    Ok(ClassReport {
        benign: (benign.support > 0).then_some(benign),
        attack: (attack.support > 0).then_some(attack),
        accuracy: (cm.tp + cm.tn) as f64 / cm.total() as f64,
        confusion: *cm,
    })
}

/// Table-style plain text rendering of a report.
pub fn render_report(title: &str, report: &ClassReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "{:<8} {:>9} {:>9} {:>9}   confusion [pred benign, pred attack]", "class", "precision", "recall", "f1");
    let (b_row, a_row) = report.confusion.rows();
    for (name, m, row) in [("benign", report.benign, b_row), ("attack", report.attack, a_row)] {
        match m {
            Some(m) => {
                let _ = writeln!(
                    s,
                    "{name:<8} {:>9.4} {:>9.4} {:>9.4}   [{}, {}]{}",
                    m.precision,
                    m.recall,
                    m.f1,
                    row[0],
                    row[1],
                    if m.zero_division { "  (zero division)" } else { "" }
                );
            }
            None => {
                let _ = writeln!(s, "{name:<8} {:>9} {:>9} {:>9}   [{}, {}]", "--", "--", "--", row[0], row[1]);
            }
        }
    }
    let _ = writeln!(s, "accuracy {:.4}", report.accuracy);
    let _ = writeln!(s, "macro f1 {:.4}", report.macro_f1());
    s
}

/// Area under the ROC curve via the Mann-Whitney statistic; ties count half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::config("AUC needs both classes"));
    }
    // average ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Mean squared reconstruction error of each (already scaled) row.
pub fn reconstruction_losses(ae: &DenseNet, scaled: &Matrix) -> Result<Vec<f64>> {
    scaled
        .iter_rows()
        .map(|x| mse_loss(x, &ae.forward(x)?))
        .collect()
}

/// Attack-class F1 when everything with loss `> threshold` is flagged.
pub fn f1_at_threshold(benign: &[f64], attack: &[f64], threshold: f64) -> f64 {
    let tp = attack.iter().filter(|&&l| l > threshold).count() as u64;
    let fp = benign.iter().filter(|&&l| l > threshold).count() as u64;
    let cm = ConfusionMatrix {
        tp,
        fp,
        tn: benign.len() as u64 - fp,
        fn_: attack.len() as u64 - tp,
    };
    positive_metrics(&cm).f1
}

/// Candidate thresholds: one below every loss, the midpoints of consecutive
/// sorted unique losses, and the largest loss.
pub fn threshold_candidates(benign: &[f64], attack: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = benign.iter().chain(attack).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut c = Vec::with_capacity(all.len() + 1);
    if let (Some(lo), Some(hi)) = (all.first(), all.last()) {
        c.push(lo - 1.0);
        c.extend(all.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
        c.push(*hi);
    }
    c
}

/// Picks the candidate with the highest attack F1 on validation losses. Ties
/// go to the lowest threshold. Returns `(threshold, f1)`.
pub fn select_threshold(benign: &[f64], attack: &[f64]) -> Result<(f64, f64)> {
    if benign.is_empty() || attack.is_empty() {
        return Err(Error::config("threshold selection needs benign and attack validation rows"));
    }
    let mut tagged: Vec<(f64, u8)> = benign
        .iter()
        .map(|&l| (l, 0))
        .chain(attack.iter().map(|&l| (l, 1)))
        .collect();
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sweep upwards: rows at or below the threshold are predicted benign
    let n_attack = attack.len() as u64;
    let (mut tp, mut fp) = (n_attack, benign.len() as u64);
    let f1 = |tp: u64, fp: u64| {
        let cm = ConfusionMatrix {
            tp,
            fp,
            tn: 0,
            fn_: n_attack - tp,
        };
        positive_metrics(&cm).f1
    };
    let candidates = threshold_candidates(benign, attack);
    let mut best = (candidates[0], f1(tp, fp));
    let mut i = 0;
    for &t in &candidates[1..] {
        while i < tagged.len() && tagged[i].0 <= t {
            if tagged[i].1 == 1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        let score = f1(tp, fp);
        if score > best.1 {
            best = (t, score);
        }
    }
    Ok(best)
}

/// Autoencoder-only detector: chooses a loss threshold on validation rows,
/// then reports on a separate test set. Inputs are raw (unscaled) rows.
pub fn threshold_baseline(
    ae: &DenseNet,
    scaler: &MinMaxScaler,
    val_benign: &Matrix,
    val_attack: &Matrix,
    test: &Matrix,
    test_labels: &[u8],
    clamp: bool,
) -> Result<(f64, ClassReport)> {
    if val_benign.rows() == 0 || val_attack.rows() == 0 {
        return Err(Error::config("threshold baseline needs benign and attack validation rows"));
    }
    let lb = reconstruction_losses(ae, &scaler.scale_matrix(val_benign, clamp)?)?;
    let la = reconstruction_losses(ae, &scaler.scale_matrix(val_attack, clamp)?)?;
    let (threshold, _) = select_threshold(&lb, &la)?;
    let lt = reconstruction_losses(ae, &scaler.scale_matrix(test, clamp)?)?;
    let preds: Vec<u8> = lt.iter().map(|&l| u8::from(l > threshold)).collect();
    Ok((threshold, class_report(&confusion(&preds, test_labels)?)?))
}

/// One point of a loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub round: u32,
    pub phase: String,
    pub loss: f64,
}

/// Writes `round,phase,loss` rows, sorted by phase then round.
pub fn emit_loss_curve(points: &[LossPoint], path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::EmptyInput("no loss points to write".into()));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| phase_rank(&a.phase).cmp(&phase_rank(&b.phase)).then(a.round.cmp(&b.round)));
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let wrap = |e: csv::Error| Error::Parse(format!("{}: {e}", path.display()));
    w.write_record(["round", "phase", "loss"]).map_err(wrap)?;
    for p in &sorted {
        w.write_record([p.round.to_string(), p.phase.clone(), format!("{:?}", p.loss)])
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn phase_rank(p: &str) -> (u8, &str) {
    match p {
        "ae" => (0, p),
        "clf" => (1, p),
        _ => (2, p),
    }
}

/// Variance of round-to-round loss changes over the last half of a curve.
pub fn late_step_variance(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len() / 2..];
    let diffs: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).collect();
    if diffs.len() < 2 {
        return 0.0;
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (diffs.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn confusion_basics() {
        let cm = confusion(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!((cm.fp, cm.fn_), (0, 0));
        let cm = confusion(&[1, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(cm.fp, 2);
        assert!(confusion(&[1], &[1, 0]).is_err());
        assert!(confusion(&[2], &[1]).is_err());
    }

    #[test]
    fn confusion_matches_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p: Vec<u8> = (0..1000).map(|_| rng.random_range(0..2)).collect();
        let l: Vec<u8> = (0..1000).map(|_| rng.random_range(0..2)).collect();
        let cm = confusion(&p, &l).unwrap();
        let mut tally = [[0u64; 2]; 2];
        for i in 0..1000 {
            tally[l[i] as usize][p[i] as usize] += 1;
        }
        assert_eq!(cm.rows(), (tally[0], tally[1]));
        assert_eq!(cm.total(), 1000);
    }

    #[test]
    fn report_from_printed_confusion_tables() {
        // hand-computed: P = 16985 / (16985 + 7509), R = 16985 / 24000
        let r = class_report(&ConfusionMatrix::from_rows([16985, 7015], [7509, 16500])).unwrap();
        let b = r.benign.unwrap();
        let (p, rc) = (16985.0 / 24494.0, 16985.0 / 24000.0);
        assert!((b.precision - p).abs() < 1e-12 && (b.recall - rc).abs() < 1e-12);
        assert!((b.precision - 0.69).abs() <= 0.005);
        assert!((b.recall - 0.71).abs() <= 0.005);
        assert!((b.f1 - 0.70).abs() <= 0.005);

        let r = class_report(&ConfusionMatrix::from_rows([23831, 169], [119, 23881])).unwrap();
        let b = r.benign.unwrap();
        assert!((b.precision - 1.00).abs() <= 0.005);
        assert!((b.recall - 0.99).abs() <= 0.005);
        assert!((b.f1 - 0.99).abs() <= 0.005);
    }

    #[test]
    fn perfect_and_degenerate_reports() {
        let r = class_report(&ConfusionMatrix::from_rows([5, 0], [0, 7])).unwrap();
        assert_eq!(r.macro_f1(), 1.0);
        assert_eq!(r.accuracy, 1.0);
        // benign-only test set: attack metrics omitted
        let r = class_report(&ConfusionMatrix::from_rows([10, 0], [0, 0])).unwrap();
        assert!(r.attack.is_none());
        assert_eq!(r.benign.unwrap().precision, 1.0);
        assert!(render_report("t", &r).contains("--"));
        // never predicts attack: precision has a zero denominator
        let r = class_report(&ConfusionMatrix::from_rows([3, 0], [4, 0])).unwrap();
        let a = r.attack.unwrap();
        assert!(a.zero_division && a.precision == 0.0 && a.f1 == 0.0);
        assert!(class_report(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn threshold_examples() {
        let (t, f1) = select_threshold(&[0.1, 0.2, 0.3], &[0.5, 0.9]).unwrap();
        assert_eq!(f1, 1.0);
        assert!(t > 0.3 && t < 0.5);
        let same = [0.1, 0.2, 0.3, 0.4];
        let (t, f1) = select_threshold(&same, &same).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(t < 0.1);
        assert!(select_threshold(&[], &[1.0]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn loss_curve_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let pts = vec![
            LossPoint { round: 3, phase: "ae".into(), loss: 0.3 },
            LossPoint { round: 1, phase: "ae".into(), loss: 0.5 },
            LossPoint { round: 2, phase: "ae".into(), loss: 0.4 },
        ];
        emit_loss_curve(&pts, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "round,phase,loss\n1,ae,0.5\n2,ae,0.4\n3,ae,0.3\n");
        assert!(emit_loss_curve(&[], &path).is_err());
    }

    #[test]
    fn step_variance() {
        assert_eq!(late_step_variance(&[5.0, 4.0, 3.0, 2.0, 1.0, 0.0]), 0.0);
        assert!(late_step_variance(&[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]) > 0.0);
    }

    proptest! {
        #[test]
        fn sweep_matches_brute_force(b in prop::collection::vec(0u8..20, 1..15), a in prop::collection::vec(0u8..20, 1..15)) {
            // small integer grid forces plenty of ties
            let b: Vec<f64> = b.into_iter().map(|v| v as f64 / 4.0).collect();
            let a: Vec<f64> = a.into_iter().map(|v| v as f64 / 4.0).collect();
            let (t, f1) = select_threshold(&b, &a).unwrap();
            let cands = threshold_candidates(&b, &a);
            let brute = cands.iter().map(|&c| f1_at_threshold(&b, &a, c)).fold(f64::MIN, f64::max);
            prop_assert_eq!(f1, brute);
            prop_assert_eq!(f1_at_threshold(&b, &a, t), f1);
            for probe in [0.0, 1.0, 2.5, 4.9] {
                prop_assert!(f1 >= f1_at_threshold(&b, &a, probe));
            }
        }

        #[test]
        fn report_is_row_order_invariant(rows in prop::collection::vec((0u8..2, 0u8..2), 1..200), seed in any::<u64>()) {
            let (p, l): (Vec<u8>, Vec<u8>) = rows.iter().copied().unzip();
            let r1 = class_report(&confusion(&p, &l).unwrap()).unwrap();
            let mut shuffled = rows.clone();
            rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut ChaCha8Rng::seed_from_u64(seed));
            let (p2, l2): (Vec<u8>, Vec<u8>) = shuffled.into_iter().unzip();
            prop_assert_eq!(r1, class_report(&confusion(&p2, &l2).unwrap()).unwrap());
        }

        #[test]
        fn swapping_classes_swaps_blocks(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
            let cm = ConfusionMatrix { tp, fp, tn, fn_ };
            prop_assume!(cm.total() > 0);
            let a = class_report(&cm).unwrap();
            let b = class_report(&cm.swapped()).unwrap();
            prop_assert_eq!(a.benign, b.attack);
            prop_assert_eq!(a.attack, b.benign);
            if let Some(m) = a.attack {
                if m.precision + m.recall > 0.0 {
                    prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-15);
                }
            }
        }
    }
}
