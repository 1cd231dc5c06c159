//! Line-oriented training logs: one `key=value` record per epoch plus a
//! final summary line. Floats are written with Rust's shortest round-trip
//! formatting, so parsing a log recovers the exact values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: Real,
    pub loss: Real,
    pub top1: Option<Real>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append the next epoch's record; epochs must arrive contiguously
    /// starting at 1.
    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        let expected = self.records.len() + 1;
        if record.epoch != expected {
            return Err(Error::InvalidArgument {
                op: "MetricsLog::push",
                msg: format!("expected epoch {expected}, got {}", record.epoch),
            });
        }
        self.records.push(record);
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("epoch={} lr={} loss={}", r.epoch, r.lr, r.loss));
            if let Some(t) = r.top1 {
                out.push_str(&format!(" top1={t}"));
            }
            out.push('\n');
        }
        if let Some(last) = self.records.last() {
            out.push_str(&format!(
                "final_epoch={} final_loss={}",
                last.epoch, last.loss
            ));
            if let Some(t) = last.top1 {
                out.push_str(&format!(" final_top1={t}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: &str, why: &str| Error::InvalidArgument {
            op: "MetricsLog::parse",
            msg: format!("{why} in log line {line:?}"),
        };
        let mut log = MetricsLog::new();
        for line in text.lines() {
            if !line.starts_with("epoch=") {
                continue;
            }
            let mut epoch = None;
            let mut lr = None;
            let mut loss = None;
            let mut top1 = None;
            for pair in line.split_whitespace() {
                let (key, value) = pair
                    .split_once('=')
                    .ok_or_else(|| bad(line, "missing '='"))?;
                match key {
                    "epoch" => epoch = Some(value.parse().map_err(|_| bad(line, "bad epoch"))?),
                    "lr" => lr = Some(value.parse().map_err(|_| bad(line, "bad lr"))?),
                    "loss" => loss = Some(value.parse().map_err(|_| bad(line, "bad loss"))?),
                    "top1" => top1 = Some(value.parse().map_err(|_| bad(line, "bad top1"))?),
                    other => return Err(bad(line, &format!("unknown key {other}"))),
                }
            }
            log.push(EpochRecord {
                epoch: epoch.ok_or_else(|| bad(line, "missing epoch"))?,
                lr: lr.ok_or_else(|| bad(line, "missing lr"))?,
                loss: loss.ok_or_else(|| bad(line, "missing loss"))?,
                top1,
            })?;
        }
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
