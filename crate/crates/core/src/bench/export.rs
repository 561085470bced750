use std::fs;
use std::io;
use std::path::Path;

use super::{RunResult, Summary, SweepRow};
use crate::error::{Error, Result};

/// File holding the serialized [`RunResult`]s of a results directory.
pub const RUNS_FILE: &str = "runs.json";

pub fn save_run_results(path: &Path, results: &[RunResult]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(results)?).map_err(|e| Error::io(path, e))
}

pub fn load_run_results(path: &Path) -> Result<Vec<RunResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::ingestion(path, e.to_string()))
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn mean(s: &Option<Summary>) -> String {
    num(s.as_ref().map(|s| s.mean))
}

fn samples(r: &RunResult) -> String {
    r.samples().map(|n| n.to_string()).unwrap_or_default()
}

/// One row per method: precision, recall, F1, accuracy with std and 95% interval.
pub fn write_metrics_csv(path: &Path, results: &[RunResult]) -> Result<()> {
    metrics_csv(fs::File::create(path).map_err(|e| Error::io(path, e))?, results)
}

pub fn metrics_csv<W: io::Write>(out: W, results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method", "size", "samples", "precision", "recall", "f1", "accuracy", "std", "ci95_lo", "ci95_hi", "runs",
        "failed",
    ])?;
    for r in results {
        let failed = r.runs.iter().filter(|t| t.metrics.is_none()).count().to_string();
        let mut row = vec![r.config.method.name().to_string(), r.config.n_train.to_string(), samples(r)];
        match &r.aggregate {
            Some(a) => {
                let ci = a.accuracy.ci95;
                row.extend([
                    mean(&a.precision),
                    mean(&a.recall),
                    mean(&a.f1),
                    num(Some(a.accuracy.mean)),
                    num(Some(a.accuracy.std)),
                    num(ci.map(|c| c.0)),
                    num(ci.map(|c| c.1)),
                    a.accuracy.runs.to_string(),
                ]);
            }
            None => row.extend(std::iter::repeat_n(String::new(), 7).chain(["0".to_string()])),
        }
        row.push(failed);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

/// Long-format adaptation curves: one row per method, run, task and step.
pub fn write_curves_csv(path: &Path, results: &[RunResult]) -> Result<()> {
    curves_csv(fs::File::create(path).map_err(|e| Error::io(path, e))?, results)
}

pub fn curves_csv<W: io::Write>(out: W, results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "size", "seed", "task_id", "step", "accuracy"])?;
    for r in results {
        for t in &r.runs {
            for (step, acc) in t.curve.iter().enumerate() {
                w.write_record([
                    r.config.method.name().to_string(),
                    r.config.n_train.to_string(),
                    t.seed.to_string(),
                    t.task_id.clone(),
                    step.to_string(),
                    format!("{acc:.6}"),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}

/// Accuracy per training size.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    sweep_csv(fs::File::create(path).map_err(|e| Error::io(path, e))?, rows)
}

pub fn sweep_csv<W: io::Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "size", "samples", "accuracy", "std", "ci95_lo", "ci95_hi", "runs"])?;
    for row in rows {
        let acc = row.result.aggregate.as_ref().map(|a| &a.accuracy);
        let ci = acc.and_then(|a| a.ci95);
        w.write_record([
            row.method.name().to_string(),
            row.budget.to_string(),
            samples(&row.result),
            num(acc.map(|a| a.mean)),
            num(acc.map(|a| a.std)),
            num(ci.map(|c| c.0)),
            num(ci.map(|c| c.1)),
            acc.map(|a| a.runs.to_string()).unwrap_or_else(|| "0".into()),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))
}
