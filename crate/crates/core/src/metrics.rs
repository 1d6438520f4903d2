//! Confusion-matrix metrics: overall accuracy, average accuracy and Cohen's kappa.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<u64>>,
    pub samples: u64,
    pub oa: f64,
    /// Mean recall over classes with at least one true sample.
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; `None` for classes without true samples.
    pub per_class: Vec<Option<f64>>,
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if truth.is_empty() {
        return Err(Error::Empty("no samples to score".into()));
    }
    if truth.len() != pred.len() {
        return Err(Error::dim("predictions", truth.len(), pred.len()));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::Range(format!("label pair ({t}, {p}) outside {classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn report_from_confusion(confusion: Vec<Vec<u64>>) -> Result<MetricsReport> {
    let k = confusion.len();
    if confusion.iter().any(|row| row.len() != k) {
        return Err(Error::Shape("confusion matrix must be square".into()));
    }
    let n: u64 = confusion.iter().flatten().sum();
    if n == 0 {
        return Err(Error::Empty("confusion matrix has no samples".into()));
    }
    let nf = n as f64;
    let diag: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let oa = diag as f64 / nf;
    let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|i| (rows[i] > 0).then(|| confusion[i][i] as f64 / rows[i] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let pe = rows.iter().zip(&cols).map(|(&r, &c)| r as f64 * c as f64).sum::<f64>() / (nf * nf);
    // all samples in one class on both sides: agreement is certain, kappa defined as 1
    let kappa = if (1.0 - pe).abs() < f64::EPSILON {
        1.0
    } else {
        (oa - pe) / (1.0 - pe)
    };
    Ok(MetricsReport {
        confusion,
        samples: n,
        oa,
        aa,
        kappa,
        per_class,
    })
}

pub fn evaluate_predictions(truth: &[usize], pred: &[usize], classes: usize) -> Result<MetricsReport> {
    report_from_confusion(confusion_matrix(truth, pred, classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_agreement() {
        let t = [0, 1, 2, 1];
        let r = evaluate_predictions(&t, &t, 3).unwrap();
        assert_eq!((r.oa, r.aa, r.kappa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn worked_two_class_example() {
        let r = report_from_confusion(vec![vec![30, 10], vec![10, 50]]).unwrap();
        assert!((r.oa - 0.8).abs() < 1e-15);
        assert!((r.aa - (0.75 + 50.0 / 60.0) / 2.0).abs() < 1e-15);
        assert!((r.kappa - 0.28 / 0.48).abs() < 1e-12);
    }

    #[test]
    fn constant_prediction_has_zero_kappa() {
        let r = evaluate_predictions(&[0, 0, 1, 1], &[1, 1, 1, 1], 2).unwrap();
        assert!(r.kappa.abs() < 1e-15);
    }

    #[test]
    fn absent_classes_leave_average() {
        let r = evaluate_predictions(&[0, 0, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(r.per_class[1], None);
        assert!((r.aa - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(evaluate_predictions(&[], &[], 2), Err(Error::Empty(_))));
        assert!(evaluate_predictions(&[3], &[0], 2).is_err());
    }

    proptest! {
        #[test]
        fn bounds_and_totals(seed in proptest::collection::vec((0usize..5, 0usize..5), 1..80)) {
            let (t, p): (Vec<_>, Vec<_>) = seed.into_iter().unzip();
            let r = evaluate_predictions(&t, &p, 5).unwrap();
            prop_assert_eq!(r.confusion.iter().flatten().sum::<u64>(), t.len() as u64);
            prop_assert!((0.0..=1.0).contains(&r.oa) && (0.0..=1.0).contains(&r.aa));
            prop_assert!((-1.0..=1.0).contains(&r.kappa));
            let mean = r.per_class.iter().flatten().sum::<f64>() / r.per_class.iter().flatten().count() as f64;
            prop_assert_eq!(mean, r.aa);
        }
    }
}
