//! Classification accuracy and top-N annotation F-measure.

use serde::Serialize;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{predict_annotations, predict_class, ModelParams};

pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            got: predictions.len(),
        });
    }
    if truths.is_empty() {
        return Err(Error::InsufficientData("accuracy of an empty list".into()));
    }
    let correct = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truths.len() as f64)
}

fn dedup(xs: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(xs.len());
    for &x in xs {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// F-measure of predicted against ground-truth annotations, with repeated
/// words removed from both lists first. `None` when the ground truth is
/// empty, since recall is undefined there.
pub fn f_measure(predicted: &[usize], truth: &[usize]) -> Option<f64> {
    let truth = dedup(truth);
    if truth.is_empty() {
        return None;
    }
    let predicted = dedup(predicted);
    if predicted.is_empty() {
        return Some(0.0);
    }
    let hits = predicted.iter().filter(|p| truth.contains(p)).count();
    // 2PR/(P+R) reduced to a single division so rational results round once
    Some(2.0 * hits as f64 / (predicted.len() + truth.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FMeasureSummary {
    pub mean: f64,
    pub scored: usize,
    pub excluded_empty_truth: usize,
}

/// Mean per-document F-measure of `(predicted, truth)` pairs, skipping
/// documents whose ground truth is empty.
pub fn mean_f_measure<'a, I>(pairs: I) -> Result<FMeasureSummary>
where
    I: IntoIterator<Item = (&'a [usize], &'a [usize])>,
{
    let (mut total, mut scored, mut excluded) = (0.0, 0, 0);
    for (pred, truth) in pairs {
        match f_measure(pred, truth) {
            Some(f) => {
                total += f;
                scored += 1;
            }
            None => excluded += 1,
        }
    }
    if scored == 0 {
        return Err(Error::InsufficientData(
            "no document has a nonempty ground-truth annotation".into(),
        ));
    }
    Ok(FMeasureSummary {
        mean: total / scored as f64,
        scored,
        excluded_empty_truth: excluded,
    })
}

/// Average F-measure of the model's top-`top_n` annotations over a corpus.
pub fn corpus_f_measure(params: &ModelParams, corpus: &Corpus, top_n: usize) -> Result<FMeasureSummary> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("empty corpus".into()));
    }
    params.check_vocab(&corpus.vocab)?;
    let predicted = corpus
        .docs
        .iter()
        .map(|d| Ok(predict_annotations(params, d, top_n)?.into_iter().map(|x| x.0).collect()))
        .collect::<Result<Vec<Vec<usize>>>>()?;
    mean_f_measure(
        predicted
            .iter()
            .zip(&corpus.docs)
            .map(|(p, d)| (p.as_slice(), d.annotations.as_slice())),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` when the vocabulary has fewer than `top_n` annotation words
    /// or no document carries annotations.
    pub f_measure: Option<f64>,
    /// `None` for classes without test documents.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub documents: usize,
    pub excluded_empty_truth: usize,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(params: &ModelParams, corpus: &Corpus, top_n: usize) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("empty corpus".into()));
    }
    params.check_vocab(&corpus.vocab)?;
    let c = params.num_classes();
    let mut confusion = vec![vec![0usize; c]; c];
    let mut preds = Vec::with_capacity(corpus.len());
    for doc in &corpus.docs {
        let (p, _) = predict_class(params, doc)?;
        confusion[doc.label][p] += 1;
        preds.push(p);
    }
    let truths: Vec<usize> = corpus.docs.iter().map(|d| d.label).collect();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(y, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[y] as f64 / n as f64)
        })
        .collect();

    let has_truth = corpus.docs.iter().any(|d| !d.annotations.is_empty());
    let (f, excluded) = if params.vocab.a >= top_n && top_n > 0 && has_truth {
        let s = corpus_f_measure(params, corpus, top_n)?;
        (Some(s.mean), s.excluded_empty_truth)
    } else {
        (None, corpus.docs.iter().filter(|d| d.annotations.is_empty()).count())
    };

    Ok(EvalReport {
        accuracy: accuracy(&preds, &truths)?,
        f_measure: f,
        per_class_accuracy,
        documents: corpus.len(),
        excluded_empty_truth: excluded,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy(&[1], &[1, 2]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn f_measure_examples() {
        assert_eq!(f_measure(&[1, 2, 3, 4, 5], &[5, 4, 3, 2, 1]), Some(1.0));
        let f = f_measure(&[1, 2, 10, 11, 12], &[1, 2, 3, 4]).unwrap();
        assert_eq!(f, 4.0 / 9.0);
        let f = f_measure(&[3, 1, 2, 4, 5], &[3, 3, 7]).unwrap();
        assert_eq!(f, 2.0 / 7.0);
        assert_eq!(f_measure(&[1], &[]), None);
        assert_eq!(f_measure(&[1, 2], &[3]), Some(0.0));
        assert_eq!(f_measure(&[1, 1, 2], &[1, 2]), Some(1.0));
    }

    #[test]
    fn mean_f_measure_examples() {
        let s = mean_f_measure([(&[1usize, 2][..], &[2usize, 1][..]), (&[3, 4][..], &[5][..])]).unwrap();
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.scored, 2);
        let s = mean_f_measure([(&[1usize][..], &[1usize][..]), (&[1][..], &[][..])]).unwrap();
        assert_eq!((s.mean, s.excluded_empty_truth), (1.0, 1));
        assert!(mean_f_measure([(&[1usize][..], &[][..])]).is_err());
    }

    proptest! {
        #[test]
        fn f_measure_properties(
            pred in proptest::collection::vec(0usize..12, 1..8),
            truth in proptest::collection::vec(0usize..12, 1..8),
        ) {
            let f = f_measure(&pred, &truth).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            let (dp, dt) = (dedup(&pred), dedup(&truth));
            let same = dp.len() == dt.len() && dp.iter().all(|x| dt.contains(x));
            prop_assert_eq!(f == 1.0, same);
            if dp.len() == dt.len() {
                prop_assert_eq!(f, f_measure(&truth, &pred).unwrap());
            }
        }

        #[test]
        fn mean_is_order_invariant(
            docs in proptest::collection::vec(
                (proptest::collection::vec(0usize..6, 1..4), proptest::collection::vec(0usize..6, 0..4)),
                1..10,
            ),
        ) {
            prop_assume!(docs.iter().any(|d| !d.1.is_empty()));
            let a = mean_f_measure(docs.iter().map(|(p, t)| (p.as_slice(), t.as_slice()))).unwrap();
            let b = mean_f_measure(docs.iter().rev().map(|(p, t)| (p.as_slice(), t.as_slice()))).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-12);
            prop_assert_eq!(a.scored, b.scored);
        }
    }
}
