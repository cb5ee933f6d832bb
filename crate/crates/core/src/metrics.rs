//! Lifelong-learning metrics and result files.
//!
//! * PPA: mean of the best ⌈5%⌉ per-epoch test accuracies of a task.
//! * APA: mean accuracy over all tasks seen so far, under the current model.
//! * CFR: mean over seen tasks of current accuracy divided by peak accuracy.
//! * SC: first epoch reaching 98% of the task's peak accuracy.
//! * TT: training cost per task.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    /// Mean training objective over the epoch's steps.
    pub loss: f64,
    pub test_acc: f64,
    /// Wall-clock of the epoch's optimizer steps, evaluation excluded.
    pub wall_ms: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskLog {
    pub task: usize,
    pub epochs: Vec<EpochRecord>,
    /// Accuracy of tasks `1..=task` right after this task finished.
    pub seen_accuracies: Vec<f64>,
}

impl TaskLog {
    pub fn trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.test_acc).collect()
    }

    pub fn peak(&self) -> f64 {
        self.epochs.iter().map(|e| e.test_acc).fold(0.0, f64::max)
    }

    pub fn steps(&self) -> usize {
        self.epochs.iter().map(|e| e.steps).sum()
    }

    pub fn wall_ms(&self) -> f64 {
        self.epochs.iter().map(|e| e.wall_ms).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub tasks: Vec<TaskLog>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpaMode {
    /// Mean of the top ⌈5%⌉ epochs.
    #[default]
    TopFraction,
    Max,
}

pub fn ppa(trace: &[f64], mode: PpaMode) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::Data("PPA of an empty trace".into()));
    }
    let mut sorted = trace.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = match mode {
        PpaMode::Max => 1,
        PpaMode::TopFraction => (trace.len() as f64 * 0.05).ceil().max(1.0) as usize,
    };
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

pub fn apa(seen: &[f64]) -> Result<f64> {
    if seen.is_empty() {
        return Err(Error::Data("APA over zero tasks".into()));
    }
    Ok(seen.iter().sum::<f64>() / seen.len() as f64)
}

/// Tasks with zero peak are skipped. Returns 0 when every task is skipped.
pub fn cfr(current: &[f64], peaks: &[f64]) -> Result<f64> {
    if current.len() != peaks.len() || current.is_empty() {
        return Err(Error::Data(format!(
            "CFR needs matching non-empty lists, got {} and {}",
            current.len(),
            peaks.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (i, (&c, &p)) in current.iter().zip(peaks).enumerate() {
        if p <= 0.0 {
            log::warn!("task {} has zero peak accuracy; skipped in CFR", i + 1);
            continue;
        }
        sum += c / p;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// 1-based epoch of the first accuracy ≥ 98% of the trace maximum.
pub fn sc(trace: &[f64]) -> Result<usize> {
    let peak = trace
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::Data("SC of an empty trace".into()))?;
    let threshold = 0.98 * peak;
    Ok(trace.iter().position(|&a| a >= threshold).unwrap_or(0) + 1)
}

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: usize,
    pub ppa: f64,
    /// APA over tasks `1..=task` at the end of this task.
    pub apa: f64,
    /// CFR over tasks `1..=task` at the end of this task.
    pub cfr: f64,
    pub sc: usize,
    pub tt_steps: usize,
}

pub fn summarize(run: &RunLog, mode: PpaMode) -> Result<Vec<SummaryRow>> {
    let peaks: Vec<f64> = run.tasks.iter().map(TaskLog::peak).collect();
    run.tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let seen = &t.seen_accuracies;
            if seen.len() != i + 1 {
                return Err(Error::Data(format!(
                    "task {} boundary lists {} accuracies, expected {}",
                    t.task,
                    seen.len(),
                    i + 1
                )));
            }
            let trace = t.trace();
            Ok(SummaryRow {
                task: t.task,
                ppa: ppa(&trace, mode)?,
                apa: apa(seen)?,
                cfr: cfr(seen, &peaks[..=i])?,
                sc: sc(&trace)?,
                tt_steps: t.steps(),
            })
        })
        .collect()
}

pub fn summary_csv(run: &RunLog, mode: PpaMode) -> Result<String> {
    let rows = summarize(run, mode)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["task", "ppa", "apa", "cfr", "sc", "tt_steps"])
            .map_err(csv_err)?;
    }
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<SummaryRow>, _>>()
        .map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Epoch(EpochRecord),
    Boundary { task: usize, accuracies: Vec<f64> },
}

pub fn metrics_jsonl(run: &RunLog) -> String {
    let mut out = String::new();
    for t in &run.tasks {
        for e in &t.epochs {
            out.push_str(&serde_json::to_string(&Record::Epoch(e.clone())).expect("serializable"));
            out.push('\n');
        }
        let b = Record::Boundary {
            task: t.task,
            accuracies: t.seen_accuracies.clone(),
        };
        out.push_str(&serde_json::to_string(&b).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<RunLog> {
    let mut run = RunLog::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        match rec {
            Record::Epoch(e) => {
                if run.tasks.last().is_none_or(|t| t.task != e.task) {
                    run.tasks.push(TaskLog {
                        task: e.task,
                        ..TaskLog::default()
                    });
                }
                run.tasks.last_mut().expect("pushed above").epochs.push(e);
            }
            Record::Boundary { task, accuracies } => match run.tasks.last_mut() {
                Some(t) if t.task == task => t.seen_accuracies = accuracies,
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("boundary for task {task} without epoch records"),
                    })
                }
            },
        }
    }
    Ok(run)
}

pub fn timing_csv(run: &RunLog) -> String {
    let mut s = String::from("task,tt_ms\n");
    for t in &run.tasks {
        s.push_str(&format!("{},{}\n", t.task, t.wall_ms()));
    }
    s
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMING_FILE: &str = "timing.csv";

/// Writes `metrics.jsonl`, `summary.csv` and `timing.csv` into `dir`.
pub fn export(run: &RunLog, dir: &Path, mode: PpaMode) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write(METRICS_FILE, metrics_jsonl(run))?;
    write(SUMMARY_FILE, summary_csv(run, mode)?)?;
    write(TIMING_FILE, timing_csv(run))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_fixture() -> RunLog {
        let mk = |task: usize, accs: &[f64], seen: Vec<f64>| TaskLog {
            task,
            epochs: accs
                .iter()
                .enumerate()
                .map(|(i, &a)| EpochRecord {
                    task,
                    epoch: i + 1,
                    loss: 0.5 / (i + 1) as f64,
                    test_acc: a,
                    wall_ms: 1.25,
                    steps: 3,
                })
                .collect(),
            seen_accuracies: seen,
        };
        RunLog {
            tasks: vec![
                mk(1, &[0.5, 0.9, 0.8], vec![0.8]),
                mk(2, &[0.6, 0.7, 0.75], vec![0.45, 0.75]),
            ],
        }
    }

    #[test]
    fn ppa_examples() {
        let mut trace: Vec<f64> = (0..95).map(|i| i as f64 / 200.0).collect();
        trace.extend([0.90, 0.91, 0.92, 0.93, 0.94]);
        assert!((ppa(&trace, PpaMode::TopFraction).unwrap() - 0.92).abs() < 1e-12);
        assert_eq!(ppa(&trace, PpaMode::Max).unwrap(), 0.94);
        assert_eq!(ppa(&[0.3; 7], PpaMode::TopFraction).unwrap(), 0.3);
        assert_eq!(ppa(&[0.42], PpaMode::TopFraction).unwrap(), 0.42);
    }

    #[test]
    fn apa_examples() {
        assert_eq!(apa(&[1.0, 0.5]).unwrap(), 0.75);
        assert_eq!(apa(&[0.3]).unwrap(), 0.3);
        assert_eq!(apa(&[0.5, 1.0]).unwrap(), apa(&[1.0, 0.5]).unwrap());
    }

    #[test]
    fn cfr_examples() {
        assert!((cfr(&[0.45, 0.8], &[0.9, 0.8]).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(cfr(&[0.7, 0.6], &[0.7, 0.6]).unwrap(), 1.0);
        assert_eq!(cfr(&[0.5, 0.6], &[0.0, 0.6]).unwrap(), 1.0);
    }

    #[test]
    fn sc_examples() {
        assert_eq!(sc(&[0.1, 0.5, 0.97, 0.98, 0.99]).unwrap(), 4);
        assert_eq!(sc(&[0.1, 0.2, 0.3]).unwrap(), 3);
        assert_eq!(sc(&[0.4; 5]).unwrap(), 1);
    }

    #[test]
    fn summary_rows() {
        let rows = summarize(&run_fixture(), PpaMode::TopFraction).unwrap();
        assert_eq!(rows[0].ppa, 0.9);
        assert_eq!(rows[0].sc, 2);
        assert_eq!(rows[1].apa, 0.6);
        // peaks 0.9 and 0.75
        assert!((rows[1].cfr - 0.75).abs() < 1e-12);
        assert_eq!(rows[1].tt_steps, 9);
    }

    #[test]
    fn empty_run_has_header_only() {
        let csv = summary_csv(&RunLog::default(), PpaMode::TopFraction).unwrap();
        assert_eq!(csv, "task,ppa,apa,cfr,sc,tt_steps\n");
    }

    #[test]
    fn exports_round_trip() {
        let run = run_fixture();
        let csv = summary_csv(&run, PpaMode::TopFraction).unwrap();
        assert_eq!(
            parse_summary(&csv).unwrap(),
            summarize(&run, PpaMode::TopFraction).unwrap()
        );
        assert_eq!(parse_jsonl(&metrics_jsonl(&run)).unwrap(), run);
        assert_eq!(csv, summary_csv(&run, PpaMode::TopFraction).unwrap());
    }

    #[test]
    fn export_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let run = run_fixture();
        export(&run, dir.path(), PpaMode::TopFraction).unwrap();
        let first = std::fs::read(dir.path().join(SUMMARY_FILE)).unwrap();
        let first_jsonl = std::fs::read(dir.path().join(METRICS_FILE)).unwrap();
        export(&run, dir.path(), PpaMode::TopFraction).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join(SUMMARY_FILE)).unwrap());
        assert_eq!(
            first_jsonl,
            std::fs::read(dir.path().join(METRICS_FILE)).unwrap()
        );
    }
}
