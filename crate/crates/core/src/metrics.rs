//! Image-level correct / false / missed detection rates.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nms::Detection;

/// True iff any detection scores at least `score_threshold`.
pub fn classify_image(detections: &[Detection], score_threshold: f64) -> bool {
    detections.iter().any(|d| d.score >= score_threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Fault images in the test set.
    pub m: usize,
    /// Non-fault images.
    pub n: usize,
    /// Images predicted faulty.
    pub a: usize,
    /// ...of which are actually normal.
    pub b: usize,
    /// Images predicted normal.
    pub c: usize,
    /// ...of which are actually faulty.
    pub d: usize,
    pub cdr: f64,
    pub fdr: f64,
    pub mdr: f64,
}

impl MetricReport {
    /// Rates from the four counts: `FDR = b/(m+n)`, `MDR = d/(m+n)`,
    /// `CDR = 1 - FDR - MDR`.
    pub fn from_counts(m: usize, n: usize, b: usize, d: usize) -> Self {
        let total = (m + n) as f64;
        let (fdr, mdr) = if m + n == 0 {
            (0.0, 0.0)
        } else {
            (b as f64 / total, d as f64 / total)
        };
        // a = predicted faulty = true positives (m - d) + false alarms b
        let a = m - d + b;
        MetricReport {
            m,
            n,
            a,
            b,
            c: m + n - a,
            d,
            cdr: 1.0 - fdr - mdr,
            fdr,
            mdr,
        }
    }
}

/// `predictions` and `truth` are `(image id, is fault)` pairs; every id must
/// appear on both sides.
pub fn compute_metrics(predictions: &[(String, bool)], truth: &[(String, bool)]) -> Result<MetricReport> {
    let find = |set: &[(String, bool)], id: &str| set.iter().find(|(i, _)| i == id).map(|(_, f)| *f);
    let missing_pred: Vec<String> = truth
        .iter()
        .filter(|(id, _)| find(predictions, id).is_none())
        .map(|(id, _)| id.to_string())
        .collect();
    if !missing_pred.is_empty() {
        return Err(Error::IdMismatch {
            side: "predictions",
            ids: missing_pred,
        });
    }
    let missing_truth: Vec<String> = predictions
        .iter()
        .filter(|(id, _)| find(truth, id).is_none())
        .map(|(id, _)| id.to_string())
        .collect();
    if !missing_truth.is_empty() {
        return Err(Error::IdMismatch {
            side: "ground truth",
            ids: missing_truth,
        });
    }
    let (mut m, mut n, mut b, mut d) = (0, 0, 0, 0);
    for (id, actual) in truth {
        let predicted = find(predictions, id).expect("checked");
        match (*actual, predicted) {
            (true, false) => d += 1,
            (false, true) => b += 1,
            _ => {}
        }
        if *actual {
            m += 1;
        } else {
            n += 1;
        }
    }
    Ok(MetricReport::from_counts(m, n, b, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn set(flags: &[bool]) -> Vec<(String, bool)> {
        flags.iter().enumerate().map(|(i, f)| (format!("{i:06}"), *f)).collect()
    }

    #[test]
    fn reference_predictors() {
        let truth = set(&[true, true, true, false, false, false, false, false, false, false]);
        let perfect = compute_metrics(&truth, &truth).unwrap();
        assert_eq!((perfect.cdr, perfect.fdr, perfect.mdr), (1.0, 0.0, 0.0));
        let all = compute_metrics(&set(&[true; 10]), &truth).unwrap();
        assert_eq!((all.b, all.d), (7, 0));
        assert!((all.fdr - 0.7).abs() < 1e-15 && all.mdr == 0.0 && (all.cdr - 0.3).abs() < 1e-15);
        let none = compute_metrics(&set(&[false; 10]), &truth).unwrap();
        assert_eq!(none.d, 3);
        assert!((none.mdr - 0.3).abs() < 1e-15 && (none.cdr - 0.7).abs() < 1e-15);
    }

    #[test]
    fn id_mismatch_lists_ids() {
        let truth = set(&[true, false]);
        let err = compute_metrics(&truth[..1], &truth).unwrap_err();
        assert_eq!(
            err,
            Error::IdMismatch {
                side: "predictions",
                ids: vec!["000001".into()]
            }
        );
    }

    #[test]
    fn classify_threshold_inclusive() {
        use crate::head::BBox;
        let d = Detection {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            score: 0.4,
            class: 0,
        };
        assert!(!classify_image(&[], 0.4));
        assert!(classify_image(&[d], 0.4));
        assert!(!classify_image(&[d], 0.41));
    }
}
