//! Tumour-versus-rest F1 and the three-class confusion matrix.

use crate::data::{Label, PatchSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub f1: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: [[usize; 3]; 3],
}

/// `2tp / (2tp + fp + fn)`, or 0 when nothing is positive.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn metrics_from_predictions(predicted: &[Label], truth: &[Label]) -> Result<Metrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut confusion = [[0usize; 3]; 3];
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (p, t) in predicted.iter().zip(truth) {
        confusion[t.index()][p.index()] += 1;
        match (p.is_tumour(), t.is_tumour()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(Metrics {
        tp,
        fp,
        fn_,
        tn,
        f1: f1_score(tp, fp, fn_),
        confusion,
    })
}

/// Runs `predict` over the labelled test set and scores it.
pub fn evaluate_f1(
    predict: impl FnOnce(&PatchSet) -> Result<Vec<Label>>,
    test: &PatchSet,
) -> Result<Metrics> {
    let truth = test.labels()?;
    let predicted = predict(test)?;
    metrics_from_predictions(&predicted, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_f1() {
        assert_eq!(f1_score(6, 2, 2), 0.75);
        assert_eq!(f1_score(0, 0, 0), 0.0);
        assert_eq!(f1_score(0, 0, 5), 0.0);
        assert_eq!(f1_score(3, 0, 0), 1.0);
    }

    #[test]
    fn confusion_counts() {
        use Label::*;
        let truth = [Tumour, Tumour, Stroma, BenignEpithelium, Tumour];
        let pred = [Tumour, Stroma, Tumour, BenignEpithelium, Tumour];
        let m = metrics_from_predictions(&pred, &truth).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (2, 1, 1, 1));
        assert_eq!(m.confusion[2][0], 1);
        assert_eq!(m.confusion[0][2], 1);
        assert_eq!(m.confusion.iter().flatten().sum::<usize>(), 5);
        assert!(metrics_from_predictions(&pred[..2], &truth).is_err());
    }

    #[test]
    fn all_negative_predictor_scores_zero() {
        let truth = [Label::Tumour, Label::Stroma];
        let m = metrics_from_predictions(&[Label::Stroma; 2], &truth).unwrap();
        assert_eq!(m.f1, 0.0);
    }
}
