use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::SeverityClass;
use crate::model::CLASSES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// `None` where the class was never predicted.
    pub precision: [Option<f64>; CLASSES],
    /// `None` where the class never occurs in the labels.
    pub recall: [Option<f64>; CLASSES],
    /// `confusion[label][prediction]`.
    pub confusion: [[usize; CLASSES]; CLASSES],
}

pub fn evaluate_classification(
    preds: &[SeverityClass],
    labels: &[SeverityClass],
) -> Result<ClassificationMetrics> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut confusion = [[0usize; CLASSES]; CLASSES];
    for (p, l) in preds.iter().zip(labels) {
        confusion[l.index()][p.index()] += 1;
    }
    let correct: usize = (0..CLASSES).map(|c| confusion[c][c]).sum();
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let precision = std::array::from_fn(|c| {
        ratio(confusion[c][c], (0..CLASSES).map(|l| confusion[l][c]).sum())
    });
    let recall = std::array::from_fn(|c| ratio(confusion[c][c], confusion[c].iter().sum()));
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / preds.len() as f64,
        precision,
        recall,
        confusion,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    /// `None` when either series is constant.
    pub plcc: Option<f64>,
    /// `None` when the targets are constant.
    pub r2: Option<f64>,
}

pub fn evaluate_regression(preds: &[f64], targets: &[f64]) -> Result<RegressionMetrics> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let mt = targets.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy, mut ss_res) = (0.0, 0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        sxy += (p - mp) * (t - mt);
        sxx += (p - mp) * (p - mp);
        syy += (t - mt) * (t - mt);
        ss_res += (t - p) * (t - p);
    }
    Ok(RegressionMetrics {
        rmse: (ss_res / n).sqrt(),
        plcc: (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)),
        r2: (syy > 0.0).then(|| 1.0 - ss_res / syy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use SeverityClass::*;

    #[test]
    fn hand_counted_confusion() {
        let m = evaluate_classification(&[None, Low, Low, High], &[None, None, Low, High]).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.precision[0], Some(1.0));
        assert_eq!(m.recall[0], Some(0.5));
        assert_eq!(m.precision[1], Some(0.5));
        assert_eq!(m.recall[1], Some(1.0));
        assert_eq!(m.precision[2], Option::None);
        assert_eq!(m.recall[2], Option::None);
    }

    #[test]
    fn perfect_and_single_class() {
        let l = [None, Low, Medium, High];
        let m = evaluate_classification(&l, &l).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.precision.iter().chain(&m.recall).all(|v| *v == Some(1.0)));
        let m = evaluate_classification(&[Low, Low], &[Low, Low]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.recall[0], Option::None);
        assert_eq!(m.recall[3], Option::None);
    }

    #[test]
    fn regression_examples() {
        let t = [1.0, 2.0, 3.0];
        let m = evaluate_regression(&t, &t).unwrap();
        assert_eq!((m.rmse, m.r2), (0.0, Some(1.0)));
        assert!((m.plcc.unwrap() - 1.0).abs() < 1e-12);
        let m = evaluate_regression(&[2.0, 4.0, 6.0], &t).unwrap();
        assert!((m.plcc.unwrap() - 1.0).abs() < 1e-12);
        assert!((m.r2.unwrap() + 6.0).abs() < 1e-12);
        assert!((m.rmse - (14.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let m = evaluate_regression(&[2.0; 3], &t).unwrap();
        assert_eq!(m.r2, Some(0.0));
        assert_eq!(m.plcc, Option::None);
    }
}
