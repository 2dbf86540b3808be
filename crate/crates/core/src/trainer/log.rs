//! Per-epoch training records, serialized as JSON lines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    /// Stage-1 branch (`T`, `A_KD`, ...) or the stage-2 model name.
    pub branch: String,
    /// 1-based.
    pub epoch: usize,
    pub split: String,
    pub l_total: f64,
    pub l_ce: f64,
    /// Stage-1 students only.
    pub l_s: Option<f64>,
    pub l_f: Option<f64>,
    /// Stage 2: audio and video distillation terms, `L_s + L_f` each.
    pub l_kd_a: Option<f64>,
    pub l_kd_v: Option<f64>,
    pub accuracy: f64,
    pub weighted_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: TrainingLog) {
        self.records.extend(other.records);
    }

    /// Records of one branch and split, in epoch order.
    pub fn series<'a>(
        &'a self,
        branch: &'a str,
        split: &'a str,
    ) -> impl Iterator<Item = &'a LogRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.branch == branch && r.split == split)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain record"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut log = TrainingLog::default();
        for epoch in 1..=2 {
            log.push(LogRecord {
                stage: 2,
                branch: "MAGT".into(),
                epoch,
                split: "train".into(),
                l_total: 1.5,
                l_ce: 1.0,
                l_s: None,
                l_f: None,
                l_kd_a: Some(0.25),
                l_kd_v: Some(0.5),
                accuracy: 0.5,
                weighted_f1: 0.4,
            });
        }
        let text = log.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(TrainingLog::from_jsonl(&text).unwrap(), log);
        assert_eq!(log.series("MAGT", "train").count(), 2);
        assert!(matches!(
            TrainingLog::from_jsonl("{}\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
