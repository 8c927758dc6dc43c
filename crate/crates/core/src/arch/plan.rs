use serde::{Deserialize, Serialize};

use super::spec::{ArchKind, ModelSpec};
use crate::error::{Error, Result};

/// One split of six equal active-parameter parts between the Mamba layer
/// (`ratio` parts) and the expert feed-forward (`6 − ratio` parts), each part
/// worth `2·d_model²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatioPlan {
    pub mamba_parts: usize,
    pub moe_parts: usize,
    /// Expansion factor `E = 2·ratio / 3`, in lowest terms.
    pub expansion_num: usize,
    pub expansion_den: usize,
    pub d_expert: usize,
    pub n_experts: usize,
}

impl RatioPlan {
    pub fn expansion(&self) -> f64 {
        self.expansion_num as f64 / self.expansion_den as f64
    }

    /// MoE-Mamba spec with this plan's widths. Fails if `E · d_model` is fractional.
    pub fn to_spec(&self, d_model: usize, n_blocks: usize) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(ArchKind::MoeMamba, d_model, n_blocks);
        spec.expansion_num = self.expansion_num;
        spec.expansion_den = self.expansion_den;
        spec.d_expert = self.d_expert;
        spec.n_experts = self.n_experts;
        spec.validate()?;
        Ok(spec)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Expert-product constant `N_experts · d_expert` used when none is given.
pub fn default_expert_product(d_model: usize) -> usize {
    96 * d_model
}

/// Widths for a Mamba:MoE active-parameter ratio of `ratio : 6 − ratio`.
/// `expert_product` defaults to [`default_expert_product`].
pub fn plan_ratio(
    ratio: usize,
    d_model: usize,
    expert_product: Option<usize>,
) -> Result<RatioPlan> {
    if ratio == 6 {
        return Err(Error::Config(
            "ratio 6:0 leaves no expert parameters; that model is plain Mamba with E = 4".into(),
        ));
    }
    if !(1..=5).contains(&ratio) {
        return Err(Error::Config(format!(
            "ratio must be in 1..=5, got {ratio}"
        )));
    }
    if d_model == 0 {
        return Err(Error::Config("d_model must be positive".into()));
    }
    let k = expert_product.unwrap_or_else(|| default_expert_product(d_model));
    let g = gcd(2 * ratio, 3);
    let d_expert = (6 - ratio) * d_model;
    let n_experts = ((k as f64) / (d_expert as f64)).round() as usize;
    Ok(RatioPlan {
        mamba_parts: ratio,
        moe_parts: 6 - ratio,
        expansion_num: 2 * ratio / g,
        expansion_den: 3 / g,
        d_expert,
        n_experts,
    })
}
