use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mamba::{MambaConfig, ProjectionSlot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// `n_blocks` × [attention, dense feed-forward].
    Transformer,
    /// `n_blocks` × [attention, switch feed-forward].
    TransformerMoe,
    /// `n_blocks` Mamba layers.
    Mamba,
    /// `n_blocks` × [Mamba, switch feed-forward].
    MoeMamba,
    /// `n_blocks` blocks computing `x + mamba(norm x) + moe(norm x)`.
    ParallelMoeMamba,
    /// `n_blocks` Mamba layers with routed projections.
    InnerMoeMamba,
}

/// Declarative description of a model. Serializes to a flat JSON object.
///
/// `d_expert` is the hidden width of each feed-forward expert, and the dense
/// feed-forward width for [`ArchKind::Transformer`]. For
/// [`ArchKind::InnerMoeMamba`], `n_experts` is the per-layer budget split evenly
/// across the masked projections.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ArchKind,
    pub d_model: usize,
    pub n_blocks: usize,
    #[serde(default)]
    pub n_experts: usize,
    #[serde(default)]
    pub d_expert: usize,
    #[serde(default = "default_expansion_num")]
    pub expansion_num: usize,
    #[serde(default = "default_expansion_den")]
    pub expansion_den: usize,
    #[serde(default)]
    pub inner_mask: Vec<ProjectionSlot>,
    #[serde(default)]
    pub every_other: bool,
    #[serde(default)]
    pub n_heads: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
}

/// Attention head width used when a spec does not choose `n_heads`.
pub const HEAD_WIDTH: usize = 16;

fn default_expansion_num() -> usize {
    2
}

fn default_expansion_den() -> usize {
    1
}

fn default_vocab() -> usize {
    256
}

impl ModelSpec {
    /// Spec with the default widths for `kind`: `4·d` feed-forward experts next
    /// to attention, `3·d` next to Mamba, and 16-wide attention heads. Routed
    /// kinds still need `n_experts` (and inner-MoE kinds `inner_mask`).
    pub fn new(kind: ArchKind, d_model: usize, n_blocks: usize) -> Self {
        let attention = matches!(kind, ArchKind::Transformer | ArchKind::TransformerMoe);
        let d_expert = match kind {
            ArchKind::Transformer | ArchKind::TransformerMoe => 4 * d_model,
            ArchKind::MoeMamba | ArchKind::ParallelMoeMamba => 3 * d_model,
            ArchKind::Mamba | ArchKind::InnerMoeMamba => 0,
        };
        ModelSpec {
            kind,
            d_model,
            n_blocks,
            n_experts: 0,
            d_expert,
            expansion_num: 2,
            expansion_den: 1,
            inner_mask: Vec::new(),
            every_other: false,
            n_heads: if attention {
                (d_model / HEAD_WIDTH).max(1)
            } else {
                0
            },
            vocab_size: 256,
        }
    }

    pub fn mamba_config(&self) -> MambaConfig {
        MambaConfig::new(self.d_model).with_expansion(self.expansion_num, self.expansion_den)
    }

    pub fn uses_attention(&self) -> bool {
        matches!(self.kind, ArchKind::Transformer | ArchKind::TransformerMoe)
    }

    pub fn uses_mamba(&self) -> bool {
        !self.uses_attention()
    }

    pub fn has_moe(&self) -> bool {
        !matches!(self.kind, ArchKind::Transformer | ArchKind::Mamba)
    }

    /// Mask sorted into canonical slot order.
    pub fn mask(&self) -> Vec<ProjectionSlot> {
        let mut m = self.inner_mask.clone();
        m.sort();
        m
    }

    /// Whether Mamba layer `i` of an inner-MoE model carries routed projections.
    pub fn layer_is_routed(&self, i: usize) -> bool {
        self.kind == ArchKind::InnerMoeMamba && (!self.every_other || i % 2 == 1)
    }

    /// Experts in each routed projection bank of an inner-MoE layer.
    pub fn experts_per_projection(&self) -> usize {
        match self.inner_mask.len() {
            0 => 0,
            m => self.n_experts / m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.n_blocks == 0 || self.vocab_size == 0 {
            return bad(format!(
                "d_model, n_blocks and vocab_size must be positive: {self:?}"
            ));
        }
        if self.uses_mamba() {
            self.mamba_config().validate()?;
        }
        if self.uses_attention() {
            if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
                return bad(format!(
                    "n_heads {} must divide d_model {}",
                    self.n_heads, self.d_model
                ));
            }
            if (self.d_model / self.n_heads) % 2 != 0 {
                return bad(format!(
                    "rotary embedding needs an even head width, got {}",
                    self.d_model / self.n_heads
                ));
            }
        }
        let needs_ff = matches!(
            self.kind,
            ArchKind::Transformer
                | ArchKind::TransformerMoe
                | ArchKind::MoeMamba
                | ArchKind::ParallelMoeMamba
        );
        if needs_ff && self.d_expert == 0 {
            return bad(format!("{:?} needs d_expert", self.kind));
        }
        if self.has_moe() && self.n_experts == 0 {
            return bad(format!("{:?} needs n_experts", self.kind));
        }
        match self.kind {
            ArchKind::InnerMoeMamba => {
                let mask = self.mask();
                if mask.is_empty() {
                    return bad("inner-MoE mask is empty; that is plain Mamba".into());
                }
                if mask.windows(2).any(|w| w[0] == w[1]) {
                    return bad(format!(
                        "duplicate projection in mask {:?}",
                        self.inner_mask
                    ));
                }
                if self.n_experts % mask.len() != 0 {
                    return bad(format!(
                        "{} experts cannot be split evenly across {} projections",
                        self.n_experts,
                        mask.len()
                    ));
                }
            }
            _ => {
                if !self.inner_mask.is_empty() || self.every_other {
                    return bad(format!(
                        "inner_mask and every_other only apply to inner_moe_mamba, got {:?}",
                        self.kind
                    ));
                }
            }
        }
        Ok(())
    }

    /// Short machine-friendly identifier.
    pub fn name(&self) -> String {
        match self.kind {
            ArchKind::Transformer => "transformer".into(),
            ArchKind::TransformerMoe => "transformer_moe".into(),
            ArchKind::Mamba => "mamba".into(),
            ArchKind::MoeMamba => "moe_mamba".into(),
            ArchKind::ParallelMoeMamba => "parallel_moe_mamba".into(),
            ArchKind::InnerMoeMamba => {
                let parts: Vec<&str> = self
                    .mask()
                    .iter()
                    .map(|s| match s {
                        ProjectionSlot::ConvProj => "conv",
                        ProjectionSlot::GateProj => "gate",
                        ProjectionSlot::OutputProj => "output",
                    })
                    .collect();
                let mode = if self.every_other {
                    "every_other"
                } else {
                    "all"
                };
                format!("inner_{}_{mode}", parts.join("_"))
            }
        }
    }

    /// Human-readable name of the modified projections, e.g. "Conv + Gate Projection".
    pub fn projection_label(&self) -> Option<String> {
        if self.kind != ArchKind::InnerMoeMamba {
            return None;
        }
        let parts: Vec<&str> = self
            .mask()
            .iter()
            .map(|s| s.label().trim_end_matches(" Projection"))
            .collect();
        Some(format!("{} Projection", parts.join(" + ")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}
