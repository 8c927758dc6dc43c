use super::runlog::RunLog;
use crate::error::{Error, Result};

/// Loss as a function of processed tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    tokens: Vec<f64>,
    loss: Vec<f64>,
}

impl LossCurve {
    pub fn new(tokens: Vec<f64>, loss: Vec<f64>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != loss.len() {
            return Err(Error::Config(format!(
                "loss curve needs matching nonempty axes, got {} and {}",
                tokens.len(),
                loss.len()
            )));
        }
        if tokens.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "token counts must be strictly increasing".into(),
            ));
        }
        if loss.iter().any(|l| !l.is_finite()) {
            return Err(Error::Config(
                "loss curve contains a non-finite value".into(),
            ));
        }
        Ok(LossCurve { tokens, loss })
    }

    /// Smoothed loss against tokens seen.
    pub fn from_runlog(log: &RunLog) -> Result<Self> {
        Self::new(
            log.records.iter().map(|r| r.tokens_seen as f64).collect(),
            log.records.iter().map(|r| r.ema_loss).collect(),
        )
    }

    pub fn tokens(&self) -> &[f64] {
        &self.tokens
    }

    pub fn loss(&self) -> &[f64] {
        &self.loss
    }

    pub fn min_loss(&self) -> f64 {
        self.loss.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Tokens at the first point where the curve is at or below `level`,
    /// interpolated linearly from the preceding logged point.
    pub fn tokens_to_reach(&self, level: f64) -> Option<f64> {
        let i = self.loss.iter().position(|&l| l <= level)?;
        if i == 0 {
            return Some(self.tokens[0]);
        }
        let (t0, t1) = (self.tokens[i - 1], self.tokens[i]);
        let (l0, l1) = (self.loss[i - 1], self.loss[i]);
        Some(t0 + (l0 - level) / (l0 - l1) * (t1 - t0))
    }
}

/// Tokens `a` needed to reach `level` divided by tokens `b` needed.
pub fn speedup_at(a: &LossCurve, b: &LossCurve, level: f64) -> Result<f64> {
    let ta = a
        .tokens_to_reach(level)
        .ok_or(Error::UnattainedLevel { level, curve: "a" })?;
    let tb = b
        .tokens_to_reach(level)
        .ok_or(Error::UnattainedLevel { level, curve: "b" })?;
    Ok(ta / tb)
}
