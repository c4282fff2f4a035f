//! Accuracy, macro-F1, invalid-label rate, flip rate and saturation point.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no predictions")]
    Empty,
    #[error("gold label {0:?} is not in the label space")]
    UnknownGold(String),
    #[error("curve is empty")]
    EmptyCurve,
    #[error("curve repeats k = {0}")]
    DuplicateK(usize),
    #[error("stored {field} {stored} differs from recomputed {recomputed}")]
    Inconsistent {
        field: &'static str,
        stored: f64,
        recomputed: f64,
    },
}

fn same_len<A, B>(a: &[A], b: &[B]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

pub fn accuracy<S: AsRef<str>, T: AsRef<str>>(preds: &[S], golds: &[T]) -> Result<f64, MetricError> {
    same_len(preds, golds)?;
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean of per-label F1 over the whole label space; a label with
/// no true positives (including one never predicted nor present) scores 0.
pub fn macro_f1<S: AsRef<str>, T: AsRef<str>, L: AsRef<str>>(
    preds: &[S],
    golds: &[T],
    label_space: &[L],
) -> Result<f64, MetricError> {
    same_len(preds, golds)?;
    if label_space.is_empty() {
        return Err(MetricError::Empty);
    }
    let index: HashMap<&str, usize> = label_space.iter().enumerate().map(|(i, l)| (l.as_ref(), i)).collect();
    let n = label_space.len();
    let (mut tp, mut fp, mut fneg) = (vec![0usize; n], vec![0usize; n], vec![0usize; n]);
    for (p, g) in preds.iter().zip(golds) {
        let gi = *index
            .get(g.as_ref())
            .ok_or_else(|| MetricError::UnknownGold(g.as_ref().to_string()))?;
        if p.as_ref() == g.as_ref() {
            tp[gi] += 1;
        } else {
            fneg[gi] += 1;
            if let Some(&pi) = index.get(p.as_ref()) {
                fp[pi] += 1;
            }
        }
    }
    let total: f64 = (0..n)
        .map(|i| {
            let denom = 2 * tp[i] + fp[i] + fneg[i];
            if tp[i] == 0 {
                0.0
            } else {
                2.0 * tp[i] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / n as f64)
}

/// Normalized Hamming distance between two prediction lists.
pub fn flip_rate<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> Result<f64, MetricError> {
    same_len(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let flips = a.iter().zip(b).filter(|(x, y)| x.as_ref() != y.as_ref()).count();
    Ok(flips as f64 / a.len() as f64)
}

pub fn invalid_rate<S: AsRef<str>, L: AsRef<str>>(preds: &[S], label_space: &[L]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let bad = preds
        .iter()
        .filter(|p| !label_space.iter().any(|l| l.as_ref() == p.as_ref()))
        .count();
    bad as f64 / preds.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaturationReport {
    /// `(k, accuracy)` sorted by k.
    pub curve: Vec<(usize, f64)>,
    pub max_acc: f64,
    pub threshold: f64,
    pub saturation_k: usize,
}

/// Smallest tested k whose accuracy reaches `ratio` times the curve maximum.
pub fn saturation_point(curve: &[(usize, f64)], ratio: f64) -> Result<SaturationReport, MetricError> {
    if curve.is_empty() {
        return Err(MetricError::EmptyCurve);
    }
    let mut sorted = curve.to_vec();
    sorted.sort_by_key(|(k, _)| *k);
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(MetricError::DuplicateK(w[0].0));
    }
    let max_acc = sorted.iter().map(|(_, a)| *a).fold(f64::NEG_INFINITY, f64::max);
    let threshold = ratio * max_acc;
    let saturation_k = sorted
        .iter()
        .find(|(_, a)| *a >= threshold)
        .map(|(k, _)| *k)
        .expect("the maximum itself reaches any ratio <= 1");
    Ok(SaturationReport {
        curve: sorted,
        max_acc,
        threshold,
        saturation_k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub gold: String,
    pub prediction: String,
    pub valid: bool,
}

/// Identifies one grid point of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub dataset: String,
    pub strategy: String,
    pub ordering: String,
    pub k: usize,
    /// `None` for the full causal mask.
    pub block: Option<(usize, usize, usize)>,
    pub seed: u64,
    pub constrained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub key: RunKey,
    pub label_space: Vec<String>,
    pub records: Vec<ExampleRecord>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub invalid_rate: f64,
    /// Mean flip rate over reshuffles, when measured.
    pub flip_rate: Option<f64>,
    pub runtime_ms: u64,
}

impl RunResult {
    pub fn new(key: RunKey, label_space: Vec<String>, records: Vec<ExampleRecord>, runtime_ms: u64) -> Result<Self, MetricError> {
        let (accuracy, macro_f1, invalid_rate) = aggregates(&records, &label_space)?;
        Ok(Self {
            key,
            label_space,
            records,
            accuracy,
            macro_f1,
            invalid_rate,
            flip_rate: None,
            runtime_ms,
        })
    }

    pub fn predictions(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.prediction.as_str()).collect()
    }

    /// Checks the stored aggregates against the per-example records.
    pub fn verify(&self) -> Result<(), MetricError> {
        let (a, f, i) = aggregates(&self.records, &self.label_space)?;
        for (field, stored, recomputed) in [
            ("accuracy", self.accuracy, a),
            ("macro_f1", self.macro_f1, f),
            ("invalid_rate", self.invalid_rate, i),
        ] {
            if stored != recomputed {
                return Err(MetricError::Inconsistent {
                    field,
                    stored,
                    recomputed,
                });
            }
        }
        Ok(())
    }
}

fn aggregates(records: &[ExampleRecord], label_space: &[String]) -> Result<(f64, f64, f64), MetricError> {
    let preds: Vec<&str> = records.iter().map(|r| r.prediction.as_str()).collect();
    let golds: Vec<&str> = records.iter().map(|r| r.gold.as_str()).collect();
    Ok((
        accuracy(&preds, &golds)?,
        macro_f1(&preds, &golds, label_space)?,
        invalid_rate(&preds, label_space),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(accuracy(&["a", "b"], &["b", "a"]).unwrap(), 0.0);
        assert_eq!(accuracy(&["a", "b", "c", "d"], &["a", "x", "c", "y"]).unwrap(), 0.5);
        assert_eq!(accuracy(&["a"], &["a", "b"]), Err(MetricError::LengthMismatch(1, 2)));
        assert_eq!(accuracy::<&str, &str>(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn macro_f1_hand_computed() {
        // A: tp=1 fp=0 fn=1 -> 2/3 ; B: tp=1 fp=1 fn=0 -> 2/3
        let f = macro_f1(&["A", "B", "B"], &["A", "A", "B"], &["A", "B"]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1(&["A", "B"], &["A", "B"], &["A", "B"]).unwrap(), 1.0);
        let f = macro_f1(&["A", "B"], &["A", "B"], &["A", "B", "C"]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(
            macro_f1(&["A"], &["Z"], &["A"]),
            Err(MetricError::UnknownGold("Z".into()))
        );
    }

    #[test]
    fn flip_and_invalid_cases() {
        assert_eq!(flip_rate(&["a", "b"], &["a", "b"]).unwrap(), 0.0);
        assert!((flip_rate(&["A", "B", "A"], &["A", "A", "A"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(flip_rate(&["a", "b"], &["c", "d"]).unwrap(), 1.0);
        assert_eq!(invalid_rate(&["A", "A"], &["A"]), 0.0);
        assert_eq!(invalid_rate(&["foo"], &["A"]), 1.0);
        assert_eq!(invalid_rate(&["A", "A", "x", "A"], &["A"]), 0.25);
    }

    #[test]
    fn saturation_cases() {
        let r = saturation_point(&[(10, 50.0), (100, 90.0), (500, 94.0), (1000, 95.0)], 0.95).unwrap();
        assert_eq!(r.saturation_k, 500);
        assert!((r.threshold - 90.25).abs() < 1e-12);
        assert_eq!(saturation_point(&[(10, 80.0), (100, 80.0)], 0.95).unwrap().saturation_k, 10);
        let r = saturation_point(&[(1, 10.0), (5, 20.0)], 0.95).unwrap();
        assert_eq!(r.saturation_k, 5);
        assert!((r.threshold - 19.0).abs() < 1e-12);
        assert_eq!(saturation_point(&[], 0.95), Err(MetricError::EmptyCurve));
        assert_eq!(saturation_point(&[(1, 1.0), (1, 2.0)], 0.95), Err(MetricError::DuplicateK(1)));
    }

    #[test]
    fn run_result_verifies_and_detects_tampering() {
        let key = RunKey {
            dataset: "d".into(),
            strategy: "random_prefix".into(),
            ordering: "as_given".into(),
            k: 1,
            block: None,
            seed: 0,
            constrained: true,
        };
        let rec = |g: &str, p: &str| ExampleRecord {
            gold: g.into(),
            prediction: p.into(),
            valid: p == "A" || p == "B",
        };
        let mut r = RunResult::new(key, vec!["A".into(), "B".into()], vec![rec("A", "A"), rec("B", "x")], 5).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.invalid_rate, 0.5);
        let json = serde_json::to_string(&r).unwrap();
        let back: RunResult = serde_json::from_str(&json).unwrap();
        back.verify().unwrap();
        assert_eq!(back, r);
        r.accuracy = 0.9;
        assert!(r.verify().is_err());
    }

    fn labels() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec(prop::sample::select(vec!["A", "B", "C"]).prop_map(String::from), 1..30)
    }

    proptest! {
        #[test]
        fn perfect_iff_equal(golds in labels(), preds_seed in labels()) {
            let preds: Vec<String> = golds.iter().zip(preds_seed.iter().cycle()).map(|(g, p)| if p == "A" { g.clone() } else { p.clone() }).collect();
            let space = ["A", "B", "C"];
            let used: Vec<&str> = space.iter().copied().filter(|l| golds.iter().any(|g| g == l)).collect();
            let equal = preds == golds;
            prop_assert_eq!(accuracy(&preds, &golds).unwrap() == 1.0, equal);
            prop_assert_eq!(macro_f1(&preds, &golds, &used).unwrap() == 1.0, equal);
        }

        #[test]
        fn flip_rate_is_a_metric(a in labels(), b in labels(), c in labels()) {
            let n = a.len().min(b.len()).min(c.len());
            let (a, b, c) = (&a[..n], &b[..n], &c[..n]);
            prop_assert_eq!(flip_rate(a, b).unwrap(), flip_rate(b, a).unwrap());
            prop_assert!(flip_rate(a, c).unwrap() <= flip_rate(a, b).unwrap() + flip_rate(b, c).unwrap() + 1e-12);
        }

        #[test]
        fn saturation_monotone_in_ratio(
            accs in proptest::collection::vec(0.0f64..100.0, 1..12),
            r1 in 0.0f64..1.0,
            r2 in 0.0f64..1.0,
        ) {
            let curve: Vec<(usize, f64)> = accs.iter().enumerate().map(|(i, a)| (i * 3 + 1, *a)).collect();
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let a = saturation_point(&curve, lo).unwrap().saturation_k;
            let b = saturation_point(&curve, hi).unwrap().saturation_k;
            prop_assert!(a <= b);
        }
    }
}
