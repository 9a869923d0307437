//! JSON-lines metric streams.
//!
//! Each run contributes one `run` line (seed, stage, config snapshot) followed
//! by one `epoch` line per epoch. Wall-clock timings go to a separate stream so
//! that metric files are byte-identical across reruns.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::trainer::{EpochMetrics, RunRecord, Stage};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize)]
struct RunLine<'a> {
    schema: u32,
    kind: &'static str,
    run_id: &'a str,
    seed: u64,
    stage: Stage,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    schema: u32,
    kind: &'static str,
    run_id: &'a str,
    stage: Stage,
    #[serde(flatten)]
    metrics: &'a EpochMetrics,
}

#[derive(Serialize)]
struct TimingLine<'a> {
    run_id: &'a str,
    stage: Stage,
    seconds: f64,
}

/// Appends records to a JSON-lines sink.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl MetricsWriter<BufWriter<File>> {
    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(BufWriter::new(file)))
    }

    /// Creates or truncates `path`.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?)))
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write_run(&mut self, record: &RunRecord) -> Result<()> {
        let head = RunLine {
            schema: SCHEMA_VERSION,
            kind: "run",
            run_id: &record.run_id,
            seed: record.seed,
            stage: record.stage,
            config: &record.config,
        };
        writeln!(self.out, "{}", serde_json::to_string(&head)?)?;
        for m in &record.epochs {
            let line = EpochLine {
                schema: SCHEMA_VERSION,
                kind: "epoch",
                run_id: &record.run_id,
                stage: record.stage,
                metrics: m,
            };
            writeln!(self.out, "{}", serde_json::to_string(&line)?)?;
        }
        self.out.flush()?;
        Ok(())
    }

    pub fn write_timing(&mut self, run_id: &str, stage: Stage, seconds: f64) -> Result<()> {
        let line = TimingLine { run_id, stage, seconds };
        writeln!(self.out, "{}", serde_json::to_string(&line)?)?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parses every line of a stream and checks the schema version.
pub fn read_stream(path: impl AsRef<Path>) -> Result<Vec<serde_json::Value>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(&line?)?;
        if v.get("schema").and_then(|s| s.as_u64()) != Some(SCHEMA_VERSION as u64) {
            return Err(Error::Parse {
                line: i as u64 + 1,
                msg: format!("expected schema {SCHEMA_VERSION}"),
            });
        }
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossBreakdown;

    fn record() -> RunRecord {
        let mut r = RunRecord::new("s1-adapt", 1, Stage::Adapt, &ExperimentConfig::default());
        for epoch in 0..2 {
            r.epochs.push(EpochMetrics {
                epoch,
                steps: 3,
                loss: LossBreakdown::default(),
                total: 0.1 * epoch as f64,
                step_totals: vec![0.3, 0.2, 0.1],
                train_acc: Some(1.0),
                test_acc: Some(0.5),
                pseudo_acc: None,
                unreached: None,
                propagation_iters: None,
                mining: None,
            });
        }
        r
    }

    #[test]
    fn one_run_line_then_one_line_per_epoch() {
        let mut w = MetricsWriter::new(Vec::new());
        w.write_run(&record()).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["kind"], "run");
        assert_eq!(lines[0]["config"]["lambda_mix"], 60.0);
        assert_eq!(lines[2]["epoch"], 1);
        assert_eq!(lines[2]["schema"], SCHEMA_VERSION);
        assert!(lines.iter().all(|l| l.get("seconds").is_none()));
    }

    #[test]
    fn identical_records_serialize_identically() {
        let bytes = |r: &RunRecord| {
            let mut w = MetricsWriter::new(Vec::new());
            w.write_run(r).unwrap();
            w.into_inner()
        };
        assert_eq!(bytes(&record()), bytes(&record()));
    }
}
