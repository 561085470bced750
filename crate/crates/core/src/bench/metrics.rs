use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};

/// Binary confusion counts; the positive class is label 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Metrics of one evaluation. Precision and recall are `None` when their
/// denominator is zero; F1 is `None` unless both are defined and not both zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub confusion: Confusion,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize]) -> Result<RunMetrics> {
    if predictions.is_empty() {
        return Err(Error::Usage("metrics of an empty prediction set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::Data(format!("non-binary prediction/label pair ({p}, {y})"))),
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(RunMetrics {
        confusion: c,
        precision,
        recall,
        f1,
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
    })
}

/// Mean, sample standard deviation and normal-approximation 95% interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    /// Absent for a single run. Bounds are not clipped to `[0, 1]`.
    pub ci95: Option<(f64, f64)>,
}

pub fn confidence_interval(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Usage("confidence interval of zero runs".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(Summary {
            mean,
            std: 0.0,
            runs: 1,
            ci95: None,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let half = 1.96 * std / (n as f64).sqrt();
    Ok(Summary {
        mean,
        std,
        runs: n,
        ci95: Some((mean - half, mean + half)),
    })
}

/// Metrics summarized over runs. Undefined precision, recall or F1 values
/// are left out of their summary and counted instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub precision: Option<Summary>,
    pub recall: Option<Summary>,
    pub f1: Option<Summary>,
    pub accuracy: Summary,
    pub undefined_precision: usize,
    pub undefined_recall: usize,
    pub undefined_f1: usize,
}

pub fn aggregate(runs: &[RunMetrics]) -> Result<AggregateMetrics> {
    let defined = |f: fn(&RunMetrics) -> Option<f64>| -> Result<(Option<Summary>, usize)> {
        let values: Vec<f64> = runs.iter().filter_map(f).collect();
        let missing = runs.len() - values.len();
        let summary = if values.is_empty() { None } else { Some(confidence_interval(&values)?) };
        Ok((summary, missing))
    };
    let (precision, undefined_precision) = defined(|m| m.precision)?;
    let (recall, undefined_recall) = defined(|m| m.recall)?;
    let (f1, undefined_f1) = defined(|m| m.f1)?;
    let accuracy = confidence_interval(&runs.iter().map(|m| m.accuracy).collect::<Vec<_>>())?;
    Ok(AggregateMetrics {
        precision,
        recall,
        f1,
        accuracy,
        undefined_precision,
        undefined_recall,
        undefined_f1,
    })
}

/// One-sided sign test on paired differences: `P(X ≥ wins)` for
/// `X ~ Binomial(wins + losses, 1/2)`. Ties are dropped before calling.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if wins == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("p = 0.5 is a valid probability");
    b.sf(wins as u64 - 1)
}

/// Wins and losses of `a` over `b`, pairwise; exact ties are ignored.
pub fn paired_wins(a: &[f64], b: &[f64]) -> (usize, usize) {
    a.iter().zip(b).fold((0, 0), |(w, l), (x, y)| {
        if x > y {
            (w + 1, l)
        } else if x < y {
            (w, l + 1)
        } else {
            (w, l)
        }
    })
}
