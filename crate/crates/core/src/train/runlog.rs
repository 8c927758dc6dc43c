use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "step,tokens_seen,lr,raw_loss,ema_loss,aux_loss,dropped_fraction,wallclock_s";

/// Smoothing weight given to each new loss sample.
pub const EMA_ALPHA: f64 = 0.001;

/// `s_t = (1 − α) s_{t−1} + α · loss_t`, starting from the first loss.
pub fn ema_update(prev: Option<f64>, loss: f64, alpha: f64) -> f64 {
    match prev {
        None => loss,
        Some(s) => (1.0 - alpha) * s + alpha * loss,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub tokens_seen: u64,
    pub lr: f64,
    pub raw_loss: f64,
    pub ema_loss: f64,
    pub aux_loss: f64,
    pub dropped_fraction: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.tokens_seen,
                r.lr,
                r.raw_loss,
                r.ema_loss,
                r.aux_loss,
                r.dropped_fraction,
                r.wallclock_s
            )
            .expect("write to string");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            other => {
                return Err(Error::Config(format!(
                    "unexpected run log header {other:?}"
                )))
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("malformed run log line {}: {line}", i + 2));
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |j: usize| f[j].trim().parse::<f64>().map_err(|_| bad());
            records.push(LogRecord {
                step: f[0].trim().parse().map_err(|_| bad())?,
                tokens_seen: f[1].trim().parse().map_err(|_| bad())?,
                lr: num(2)?,
                raw_loss: num(3)?,
                ema_loss: num(4)?,
                aux_loss: num(5)?,
                dropped_fraction: num(6)?,
                wallclock_s: num(7)?,
            });
        }
        Ok(RunLog { records })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }
}
