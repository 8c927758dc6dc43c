//! Parameter accounting. Headline numbers exclude the embedding and
//! unembedding matrices; "active" counts one expert per routed bank.

use serde::{Deserialize, Serialize};

use super::attention::Attention;
use super::model::Model;
use super::spec::{ArchKind, ModelSpec};
use crate::error::Result;
use crate::mamba::{MambaConfig, ProjectionSlot};
use crate::moe::ExpertFfn;
use crate::param::{Module, Role};
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockReport {
    pub kind: String,
    pub total: usize,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total_params: usize,
    pub active_params_per_token: usize,
    pub embedding_params: usize,
    pub unembedding_params: usize,
    pub final_norm_params: usize,
    pub blocks: Vec<BlockReport>,
}

/// `(total, active)` of a switch bank with `n` experts of `per_expert` params
/// routed from width `d_in`.
fn bank(d_in: usize, n: usize, per_expert: usize) -> (usize, usize) {
    (d_in * n + n * per_expert, d_in * n + per_expert)
}

/// `(total, active)` of a Mamba block with the projections in `mask` routed
/// over `experts` linear experts each.
pub fn mamba_counts(cfg: &MambaConfig, mask: &[ProjectionSlot], experts: usize) -> (usize, usize) {
    let (d, ed) = (cfg.d_model, cfg.d_inner());
    let dense = cfg.param_count();
    let (mut total, mut active) = (dense, dense);
    for slot in mask {
        let (d_in, d_out) = match slot {
            ProjectionSlot::ConvProj | ProjectionSlot::GateProj => (d, ed),
            ProjectionSlot::OutputProj => (ed, d),
        };
        let (t, a) = bank(d_in, experts, d_in * d_out);
        total = total - d_in * d_out + t;
        active = active - d_in * d_out + a;
    }
    (total, active)
}

fn block(kind: &str, (total, active): (usize, usize), norm: usize) -> BlockReport {
    BlockReport {
        kind: kind.into(),
        total: total + norm,
        active: active + norm,
    }
}

/// Closed-form report computed from a `ModelSpec` alone, without building the model.
pub fn param_report(spec: &ModelSpec) -> Result<ParamReport> {
    spec.validate()?;
    let d = spec.d_model;
    let attn = Attention::<f64>::param_count(d);
    let ffn = ExpertFfn::<f64>::param_count(d, spec.d_expert);
    let moe = bank(d, spec.n_experts, ffn);
    let mamba = mamba_counts(&spec.mamba_config(), &[], 0);
    let mut blocks = Vec::new();
    for i in 0..spec.n_blocks {
        match spec.kind {
            ArchKind::Transformer => {
                blocks.push(block("attention", (attn, attn), d));
                blocks.push(block("dense_ff", (ffn, ffn), d));
            }
            ArchKind::TransformerMoe => {
                blocks.push(block("attention", (attn, attn), d));
                blocks.push(block("moe_ff", moe, d));
            }
            ArchKind::Mamba => blocks.push(block("mamba", mamba, d)),
            ArchKind::MoeMamba => {
                blocks.push(block("mamba", mamba, d));
                blocks.push(block("moe_ff", moe, d));
            }
            ArchKind::ParallelMoeMamba => {
                blocks.push(block(
                    "parallel_mamba_moe",
                    (mamba.0 + moe.0, mamba.1 + moe.1),
                    d,
                ));
            }
            ArchKind::InnerMoeMamba => {
                if spec.layer_is_routed(i) {
                    let c = mamba_counts(
                        &spec.mamba_config(),
                        &spec.mask(),
                        spec.experts_per_projection(),
                    );
                    blocks.push(block("inner_moe_mamba", c, d));
                } else {
                    blocks.push(block("mamba", mamba, d));
                }
            }
        }
    }
    let total = blocks.iter().map(|b| b.total).sum::<usize>() + d;
    let active = blocks.iter().map(|b| b.active).sum::<usize>() + d;
    Ok(ParamReport {
        total_params: total,
        active_params_per_token: active,
        embedding_params: spec.vocab_size * d,
        unembedding_params: d * spec.vocab_size,
        final_norm_params: d,
        blocks,
    })
}

/// Report obtained by walking every parameter buffer of a built model.
pub fn count_params<T: Element>(model: &Model<T>) -> ParamReport {
    let blocks: Vec<BlockReport> = model
        .blocks
        .iter()
        .map(|b| {
            let (mut total, mut active) = (0, 0);
            b.visit(&mut |p| {
                total += p.numel();
                match p.role {
                    Role::Expert { expert, .. } if expert != 0 => {}
                    _ => active += p.numel(),
                }
            });
            BlockReport {
                kind: b.kind_name().into(),
                total,
                active,
            }
        })
        .collect();
    let fin = model.final_norm.numel();
    ParamReport {
        total_params: blocks.iter().map(|b| b.total).sum::<usize>() + fin,
        active_params_per_token: blocks.iter().map(|b| b.active).sum::<usize>() + fin,
        embedding_params: model.embed.numel(),
        unembedding_params: model.unembed.numel(),
        final_norm_params: fin,
        blocks,
    }
}
