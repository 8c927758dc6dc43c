use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of one selective state-space block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub d_model: usize,
    /// Expansion factor `E = expansion_num / expansion_den`.
    pub expansion_num: usize,
    pub expansion_den: usize,
    pub d_state: usize,
    /// `None` resolves to `ceil(d_model / 16)`.
    pub dt_rank: Option<usize>,
    pub d_conv: usize,
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        MambaConfig {
            d_model,
            expansion_num: 2,
            expansion_den: 1,
            d_state: 16,
            dt_rank: None,
            d_conv: 4,
        }
    }

    pub fn with_expansion(mut self, num: usize, den: usize) -> Self {
        self.expansion_num = num;
        self.expansion_den = den;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.expansion_num == 0 || self.expansion_den == 0 {
            return Err(Error::Config(format!(
                "mamba config has a zero field: {self:?}"
            )));
        }
        if (self.d_model * self.expansion_num) % self.expansion_den != 0 {
            return Err(Error::Config(format!(
                "expansion {}/{} times d_model {} is not an integer",
                self.expansion_num, self.expansion_den, self.d_model
            )));
        }
        if self.d_state == 0 || self.d_conv == 0 || self.dt_rank == Some(0) {
            return Err(Error::Config(format!(
                "mamba config has a zero field: {self:?}"
            )));
        }
        Ok(())
    }

    /// `E · d_model`.
    pub fn d_inner(&self) -> usize {
        self.d_model * self.expansion_num / self.expansion_den
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_rank.unwrap_or_else(|| self.d_model.div_ceil(16))
    }

    /// Closed-form parameter count of a dense block.
    pub fn param_count(&self) -> usize {
        let (d, ed, ds, r, k) = (
            self.d_model,
            self.d_inner(),
            self.d_state,
            self.dt_rank(),
            self.d_conv,
        );
        let in_proj = 2 * d * ed;
        let conv = ed * k + ed;
        let x_proj = ed * (r + 2 * ds);
        let dt_proj = r * ed + ed;
        let a_log = ed * ds;
        let skip = ed;
        let out_proj = ed * d;
        in_proj + conv + x_proj + dt_proj + a_log + skip + out_proj
    }
}

/// Closed-form parameter count of a dense block.
pub fn mamba_param_count(cfg: &MambaConfig) -> usize {
    cfg.param_count()
}
