use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::distill::LossBundle;
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 9] = [
    "epoch", "split", "accuracy", "l_h", "l_s", "l_kd", "l_adv_d", "l_adv_g", "l_g",
];

/// One `(epoch, split)` line. Losses are recorded on the train row only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub split: Split,
    pub accuracy: f64,
    pub losses: Option<LossBundle>,
}

impl MetricsRow {
    fn to_record(&self) -> Vec<String> {
        let mut rec = vec![
            self.epoch.to_string(),
            self.split.to_string(),
            self.accuracy.to_string(),
        ];
        match &self.losses {
            Some(l) => rec.extend(l.fields().iter().map(f64::to_string)),
            None => rec.extend(std::iter::repeat_n(String::new(), 6)),
        }
        rec
    }

    fn from_record(rec: &csv::StringRecord, line: u64) -> Result<Self> {
        let bad = |what: &str| Error::Format {
            offset: line,
            reason: format!("metrics row {line}: bad {what}"),
        };
        if rec.len() != METRICS_HEADER.len() {
            return Err(bad("field count"));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(METRICS_HEADER[i]));
        let split = match &rec[1] {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(bad("split")),
        };
        let losses = if rec[3].is_empty() {
            None
        } else {
            Some(LossBundle {
                l_h: num(3)?,
                l_s: num(4)?,
                l_kd: num(5)?,
                l_adv_d: num(6)?,
                l_adv_g: num(7)?,
                l_g: num(8)?,
            })
        };
        Ok(MetricsRow {
            epoch: rec[0].parse().map_err(|_| bad("epoch"))?,
            split,
            accuracy: num(2)?,
            losses,
        })
    }
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(METRICS_HEADER)?;
    for row in rows {
        w.write_record(row.to_record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Format {
            offset: 0,
            reason: "unexpected metrics header".into(),
        });
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| MetricsRow::from_record(&rec?, i as u64 + 1))
        .collect()
}

/// Wall-clock seconds per epoch, kept apart from the metrics so those stay
/// byte-identical across runs.
pub fn write_timings(path: impl AsRef<Path>, seconds: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["epoch", "seconds"])?;
    for (e, s) in seconds.iter().enumerate() {
        w.write_record([e.to_string(), format!("{s:.6}")])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!("checked is_io_error");
    }
    Error::Csv(e)
}

/// Run-level summary written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub role: String,
    pub method: Option<String>,
    pub epochs: u64,
    pub seed: u64,
    pub config_hash: String,
    pub final_train_accuracy: Option<f64>,
    pub final_test_accuracy: f64,
    pub param_count: usize,
}

impl RunSummary {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
