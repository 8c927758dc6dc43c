use super::spec::{ArchKind, ModelSpec};
use crate::mamba::ProjectionSlot;

/// Expert budget of a modified Mamba layer when every layer is modified.
pub const INNER_EXPERTS_ALL: usize = 24;
/// Expert budget of a modified layer when only every other layer is modified.
pub const INNER_EXPERTS_EVERY_OTHER: usize = 48;

/// The seven nonempty projection masks, in the order Conv, Gate, Output,
/// Conv+Gate, Conv+Output, Gate+Output, Conv+Gate+Output.
pub fn inner_masks() -> Vec<Vec<ProjectionSlot>> {
    use ProjectionSlot::*;
    vec![
        vec![ConvProj],
        vec![GateProj],
        vec![OutputProj],
        vec![ConvProj, GateProj],
        vec![ConvProj, OutputProj],
        vec![GateProj, OutputProj],
        vec![ConvProj, GateProj, OutputProj],
    ]
}

/// Transformer, Transformer-MoE, Mamba, MoE-Mamba and Parallel MoE-Mamba,
/// followed by the seven all-layer and seven every-other-layer inner-MoE
/// models. Feed-forward banks get `n_experts`; Mamba-side experts are `3·d`
/// wide and Transformer-side ones `4·d`.
pub fn enumerate_variants(d_model: usize, n_blocks: usize, n_experts: usize) -> Vec<ModelSpec> {
    let mut out = Vec::with_capacity(19);
    for kind in [
        ArchKind::Transformer,
        ArchKind::TransformerMoe,
        ArchKind::Mamba,
        ArchKind::MoeMamba,
        ArchKind::ParallelMoeMamba,
    ] {
        let mut s = ModelSpec::new(kind, d_model, n_blocks);
        if s.has_moe() {
            s.n_experts = n_experts;
        }
        out.push(s);
    }

    for every_other in [false, true] {
        for mask in inner_masks() {
            let mut s = ModelSpec::new(ArchKind::InnerMoeMamba, d_model, n_blocks);
            s.inner_mask = mask;
            s.every_other = every_other;
            s.n_experts = if every_other {
                INNER_EXPERTS_EVERY_OTHER
            } else {
                INNER_EXPERTS_ALL
            };
            out.push(s);
        }
    }
    out
}
