mod common;

use common::{normalish, rng};
use moemamba::arch::{
    count_params, enumerate_variants, inner_masks, param_report, plan_ratio, ArchKind, Attention,
    Block, Layer, Model, ModelSpec, INNER_EXPERTS_ALL, INNER_EXPERTS_EVERY_OTHER,
};
use moemamba::mamba::{MambaConfig, MambaLayer, Projection, ProjectionSlot};
use moemamba::moe::{ExpertFfn, MoeAux, SwitchConfig, SwitchMoe};
use moemamba::{Error, Graph, Module, Param};
use proptest::prelude::*;

fn spec(kind: ArchKind, d: usize, n_blocks: usize, n_experts: usize) -> ModelSpec {
    let mut s = ModelSpec::new(kind, d, n_blocks);
    if s.has_moe() {
        s.n_experts = n_experts;
    }
    s
}

fn inner(mask: &[ProjectionSlot], every_other: bool, d: usize, n_blocks: usize) -> ModelSpec {
    let mut s = ModelSpec::new(ArchKind::InnerMoeMamba, d, n_blocks);
    s.inner_mask = mask.to_vec();
    s.every_other = every_other;
    s.n_experts = if every_other {
        INNER_EXPERTS_EVERY_OTHER
    } else {
        INNER_EXPERTS_ALL
    };
    s
}

fn tokens(n: usize, seed: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 37 + seed * 11 + 5) % 256).collect()
}

/// Millions, rounded as in the published tables.
fn millions(n: usize) -> usize {
    (n as f64 / 1e6).round() as usize
}

fn mamba_layer(kind: &Block<f64>) -> &MambaLayer<f64> {
    match kind {
        Block::Residual {
            layer: Layer::Mamba(m),
            ..
        } => m,
        Block::Parallel { mamba, .. } => mamba,
        _ => panic!("not a mamba block"),
    }
}

#[test]
fn attention_and_feed_forward_budgets() {
    assert_eq!(Attention::<f64>::param_count(512), 1_048_576);
    assert_eq!(
        Attention::<f64>::new(512, 8, &mut rng(0))
            .unwrap()
            .num_params(),
        4 * 512 * 512
    );
    assert_eq!(ExpertFfn::<f64>::param_count(512, 2048), 2_097_152);
    assert_eq!(ExpertFfn::<f64>::param_count(512, 3 * 512), 6 * 512 * 512);
    assert_eq!(ModelSpec::new(ArchKind::MoeMamba, 512, 8).d_expert, 1536);
}

#[test]
fn published_model_sizes() {
    let with = |kind, d, blocks, experts, d_expert| {
        let mut s = spec(kind, d, blocks, experts);
        if d_expert > 0 {
            s.d_expert = d_expert;
        }
        let r = param_report(&s).unwrap();
        (
            millions(r.total_params),
            millions(r.active_params_per_token),
        )
    };
    // (total, active) in millions, small then large configurations.
    assert_eq!(with(ArchKind::Transformer, 512, 8, 0, 2048), (25, 25));
    assert_eq!(with(ArchKind::Mamba, 512, 16, 0, 0), (27, 27));
    assert_eq!(with(ArchKind::TransformerMoe, 512, 8, 32, 2048), (545, 25));
    assert_eq!(with(ArchKind::MoeMamba, 512, 8, 42, 1536), (542, 26));
    assert_eq!(with(ArchKind::Mamba, 768, 32, 0, 0), (121, 121));
    assert_eq!(
        with(ArchKind::TransformerMoe, 768, 16, 32, 3072),
        (2454, 114)
    );
    assert_eq!(with(ArchKind::MoeMamba, 768, 16, 42, 2304), (2439, 117));
}

#[test]
fn expert_count_sweep_sizes() {
    for (n, total) in [(1, 26), (4, 64), (8, 114), (16, 215), (32, 416)] {
        let r = param_report(&spec(ArchKind::MoeMamba, 512, 8, n)).unwrap();
        assert_eq!(millions(r.total_params), total, "{n} experts");
        assert_eq!(millions(r.active_params_per_token), 26, "{n} experts");
    }
}

#[test]
fn small_mamba_counts_are_frozen() {
    let mamba = param_report(&spec(ArchKind::Mamba, 512, 16, 0)).unwrap();
    // 16 · (layer + norm) + final norm
    assert_eq!(mamba.total_params, 16 * (1_694_720 + 512) + 512);
    assert_eq!(mamba.total_params, 27_124_224);
    let moe = param_report(&spec(ArchKind::MoeMamba, 512, 8, 42)).unwrap();
    assert_eq!(moe.active_params_per_token, 26_321_408);
    let rel = (27e6 - mamba.total_params as f64).abs() / 27e6;
    assert!(rel < 0.10);
}

#[test]
fn matched_models_have_close_active_counts() {
    for (d, mamba_blocks) in [(512, 16), (768, 32), (64, 4)] {
        let a = param_report(&spec(ArchKind::Mamba, d, mamba_blocks, 0))
            .unwrap()
            .active_params_per_token as f64;
        let b = param_report(&spec(ArchKind::MoeMamba, d, mamba_blocks / 2, 42))
            .unwrap()
            .active_params_per_token as f64;
        assert!((a - b).abs() / a < 0.10, "d={d}: {a} vs {b}");
    }
}

#[test]
fn embeddings_are_reported_separately() {
    let s = spec(ArchKind::Mamba, 64, 2, 0);
    let r = param_report(&s).unwrap();
    assert_eq!(r.embedding_params, 256 * 64);
    assert_eq!(r.unembedding_params, 64 * 256);
    let m = Model::<f64>::build(&s, &mut rng(0)).unwrap();
    assert_eq!(
        m.num_params(),
        r.total_params + r.embedding_params + r.unembedding_params
    );
    assert!(r.total_params >= r.active_params_per_token);
}

#[test]
fn closed_form_matches_enumeration_for_every_variant() {
    for s in enumerate_variants(64, 2, 4) {
        let m = Model::<f64>::build(&s, &mut rng(1)).unwrap();
        assert_eq!(count_params(&m), param_report(&s).unwrap(), "{}", s.name());
    }
    for s in [
        spec(ArchKind::MoeMamba, 24, 3, 5),
        spec(ArchKind::TransformerMoe, 32, 1, 7),
    ] {
        let m = Model::<f64>::build(&s, &mut rng(2)).unwrap();
        assert_eq!(count_params(&m), param_report(&s).unwrap());
    }
}

#[test]
fn layer_layouts() {
    let kinds = |s: &ModelSpec| -> Vec<String> {
        Model::<f64>::build(s, &mut rng(0))
            .unwrap()
            .blocks
            .iter()
            .map(|b| b.kind_name().to_string())
            .collect()
    };
    assert_eq!(kinds(&spec(ArchKind::Mamba, 16, 3, 0)), ["mamba"; 3]);
    assert_eq!(
        kinds(&spec(ArchKind::MoeMamba, 16, 2, 2)),
        ["mamba", "moe_ff", "mamba", "moe_ff"]
    );
    assert_eq!(
        kinds(&spec(ArchKind::Transformer, 16, 1, 0)),
        ["attention", "dense_ff"]
    );
    assert_eq!(
        kinds(&spec(ArchKind::TransformerMoe, 16, 1, 2)),
        ["attention", "moe_ff"]
    );
    assert_eq!(
        kinds(&spec(ArchKind::ParallelMoeMamba, 16, 2, 2)),
        ["parallel_mamba_moe"; 2]
    );
    let every_other = inner(&[ProjectionSlot::GateProj], true, 16, 4);
    assert_eq!(
        kinds(&every_other),
        ["mamba", "inner_moe_mamba", "mamba", "inner_moe_mamba"]
    );
}

#[test]
fn single_block_models_run() {
    for kind in [
        ArchKind::Transformer,
        ArchKind::TransformerMoe,
        ArchKind::Mamba,
        ArchKind::MoeMamba,
        ArchKind::ParallelMoeMamba,
    ] {
        let m = Model::<f64>::build(&spec(kind, 16, 1, 2), &mut rng(3)).unwrap();
        let logits = m.logits(&tokens(10, 0), 2, 5).unwrap();
        assert_eq!(logits.shape(), &[10, 256]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn single_token_attention_is_value_then_output() {
    let att = Attention::<f64>::new(8, 2, &mut rng(4)).unwrap();
    let x = normalish(&[1, 1, 8], &mut rng(5));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = att.forward(&mut g, xv).unwrap();
    let y = g.value(y).clone();
    // Direct double product x · Wv · Wo.
    let (wv, wo) = (att.wv.value.data(), att.wo.value.data());
    let v: Vec<f64> = (0..8)
        .map(|j| (0..8).map(|i| x.data()[i] * wv[i * 8 + j]).sum())
        .collect();
    for k in 0..8 {
        let want: f64 = (0..8).map(|j| v[j] * wo[j * 8 + k]).sum();
        assert!((y.data()[k] - want).abs() < 1e-12);
    }
}

#[test]
fn bad_head_counts_are_config_errors() {
    assert!(matches!(
        Attention::<f64>::new(12, 5, &mut rng(0)),
        Err(Error::Config(_))
    ));
    let mut s = spec(ArchKind::Transformer, 12, 1, 0);
    s.n_heads = 5;
    assert!(matches!(
        Model::<f64>::build(&s, &mut rng(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn parallel_block_with_silent_experts_is_a_mamba_block() {
    let d = 8;
    let mamba = MambaLayer::<f64>::new(MambaConfig::new(d), &mut rng(6)).unwrap();
    let mut moe = SwitchMoe::<f64, _>::new(&SwitchConfig::new(3, d, 3 * d), &mut rng(7)).unwrap();
    for e in &mut moe.experts {
        e.visit_mut(&mut |p: &mut Param<f64>| p.value.data_mut().fill(0.0));
    }
    let norm = Param::ones("norm", d);
    let par = Block::Parallel {
        norm: norm.clone(),
        mamba: mamba.clone(),
        moe,
    };
    let plain = Block::Residual {
        norm,
        layer: Layer::Mamba(mamba),
    };
    let x = normalish(&[1, 6, d], &mut rng(8));
    let run = |b: &Block<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = b.forward(&mut g, xv, &mut MoeAux::default()).unwrap();
        g.value(y).clone()
    };
    let y = run(&par);
    assert_eq!(y.shape(), &[1, 6, d]);
    assert_eq!(y.data(), run(&plain).data());
}

#[test]
fn parallel_block_trains_both_branches() {
    let m = Model::<f64>::build(&spec(ArchKind::ParallelMoeMamba, 8, 1, 2), &mut rng(9)).unwrap();
    let Block::Parallel { mamba, moe, .. } = &m.blocks[0] else {
        panic!("expected a parallel block")
    };
    let toks = tokens(8, 1);
    let mut g = Graph::new();
    let mut aux = MoeAux::default();
    let (ce, _) = m
        .loss(&mut g, &toks, &tokens(8, 2), 1, 8, &mut aux)
        .unwrap();
    let grads = g.backward(ce).unwrap();
    let norm = |p: &Param<f64>| {
        grads
            .param(p.key())
            .map_or(0.0, |t| t.data().iter().map(|v| v * v).sum::<f64>())
    };
    assert!(norm(&mamba.x_proj) > 0.0);
    assert!(norm(&moe.router) > 0.0);
    let expert_grad: f64 = moe
        .experts
        .iter()
        .map(|e| {
            let mut s = 0.0;
            e.visit(&mut |p| s += norm(p));
            s
        })
        .sum();
    assert!(expert_grad > 0.0);
}

#[test]
fn inner_banks_split_the_expert_budget() {
    let d = 16;
    let m = Model::<f64>::build(
        &inner(&[ProjectionSlot::OutputProj], false, d, 2),
        &mut rng(10),
    )
    .unwrap();
    for b in &m.blocks {
        let layer = mamba_layer(b);
        let Projection::Routed(bank) = &layer.out_proj else {
            panic!("output not routed")
        };
        assert_eq!(bank.n_experts(), 24);
        assert_eq!(bank.experts[0].w.value.shape(), &[2 * d, d]);
        assert!(matches!(layer.conv_proj, Projection::Dense(_)));
        assert!(matches!(layer.gate_proj, Projection::Dense(_)));
    }

    let all = [
        ProjectionSlot::ConvProj,
        ProjectionSlot::GateProj,
        ProjectionSlot::OutputProj,
    ];
    let m = Model::<f64>::build(&inner(&all, false, d, 1), &mut rng(11)).unwrap();
    let layer = mamba_layer(&m.blocks[0]);
    for slot in all {
        let Projection::Routed(bank) = layer.projection(slot) else {
            panic!("{slot:?} not routed")
        };
        assert_eq!(bank.n_experts(), 8);
    }

    let m = Model::<f64>::build(
        &inner(&[ProjectionSlot::ConvProj], true, d, 2),
        &mut rng(12),
    )
    .unwrap();
    assert!(matches!(
        mamba_layer(&m.blocks[0]).conv_proj,
        Projection::Dense(_)
    ));
    let Projection::Routed(bank) = &mamba_layer(&m.blocks[1]).conv_proj else {
        panic!("odd layer not routed")
    };
    assert_eq!(bank.n_experts(), 48);
}

#[test]
fn ratio_plans() {
    let p = plan_ratio(3, 512, None).unwrap();
    assert_eq!(
        (p.expansion_num, p.expansion_den, p.d_expert, p.n_experts),
        (2, 1, 1536, 32)
    );
    let p = plan_ratio(5, 512, None).unwrap();
    assert_eq!(
        (p.expansion_num, p.expansion_den, p.d_expert, p.n_experts),
        (10, 3, 512, 96)
    );
    let p = plan_ratio(1, 512, None).unwrap();
    assert_eq!(
        (p.expansion_num, p.expansion_den, p.d_expert, p.n_experts),
        (2, 3, 2560, 19)
    );

    let k = 96 * 512;
    for r in 2..=5 {
        let p = plan_ratio(r, 512, None).unwrap();
        assert_eq!(p.n_experts * p.d_expert, k, "r={r}");
    }
    let p = plan_ratio(1, 512, None).unwrap();
    assert!((p.n_experts * p.d_expert).abs_diff(k) <= p.d_expert / 2);
    assert_eq!(plan_ratio(4, 512, Some(4096)).unwrap().n_experts, 4);
}

#[test]
fn ratio_plan_active_budget() {
    // r parts of 2d² go to Mamba (3E·d²) and 6 − r parts to one expert (2·d·d_expert).
    for r in 1..=5usize {
        let p = plan_ratio(r, 96, None).unwrap();
        let d2 = 96 * 96;
        assert_eq!(3 * p.expansion_num * d2, 2 * r * d2 * p.expansion_den);
        assert_eq!(2 * 96 * p.d_expert, 2 * (6 - r) * d2);
    }
}

#[test]
fn degenerate_ratios_are_rejected() {
    let Err(Error::Config(msg)) = plan_ratio(6, 512, None) else {
        panic!("6:0 accepted")
    };
    assert!(msg.contains("E = 4"), "{msg}");
    assert!(plan_ratio(0, 512, None).is_err());
    assert!(plan_ratio(7, 512, None).is_err());
    assert!(plan_ratio(3, 0, None).is_err());
}

#[test]
fn ratio_plan_spec_needs_whole_inner_width() {
    assert!(plan_ratio(3, 512, None).unwrap().to_spec(512, 8).is_ok());
    assert!(plan_ratio(1, 512, None).unwrap().to_spec(512, 8).is_err());
    let s = plan_ratio(1, 96, None).unwrap().to_spec(96, 2).unwrap();
    assert_eq!(s.mamba_config().d_inner(), 64);
}

#[test]
fn nineteen_variants_with_table_rows() {
    let v = enumerate_variants(64, 2, 4);
    assert_eq!(v.len(), 19);
    let mut names: Vec<String> = v.iter().map(|s| s.name()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), 19);

    let rows = [
        "Conv Projection",
        "Gate Projection",
        "Output Projection",
        "Conv + Gate Projection",
        "Conv + Output Projection",
        "Gate + Output Projection",
        "Conv + Gate + Output Projection",
    ];
    let inner: Vec<&ModelSpec> = v
        .iter()
        .filter(|s| s.kind == ArchKind::InnerMoeMamba)
        .collect();
    assert_eq!(inner.len(), 14);
    for (i, s) in inner.iter().enumerate() {
        assert_eq!(s.projection_label().as_deref(), Some(rows[i % 7]));
        assert_eq!(s.every_other, i >= 7);
        assert_eq!(s.n_experts, if i >= 7 { 48 } else { 24 });
    }
    assert_eq!(inner_masks().len(), 7);
    assert!(v
        .iter()
        .filter(|s| s.kind != ArchKind::InnerMoeMamba)
        .all(|s| s.projection_label().is_none()));
}

#[test]
fn one_expert_switch_transformer_is_the_dense_transformer() {
    let moe = Model::<f64>::build(&spec(ArchKind::TransformerMoe, 16, 2, 1), &mut rng(13)).unwrap();
    let mut dense = moe.clone();
    dense.spec.kind = ArchKind::Transformer;
    for b in &mut dense.blocks {
        if let Block::Residual { layer, .. } = b {
            if let Layer::MoeFf(m) = layer {
                *layer = Layer::DenseFf(m.experts[0].clone());
            }
        }
    }
    let toks = tokens(24, 3);
    assert_eq!(
        moe.logits(&toks, 2, 12).unwrap().data(),
        dense.logits(&toks, 2, 12).unwrap().data()
    );
}

#[test]
fn every_block_kind_is_causal() {
    let mut specs = vec![
        spec(ArchKind::Transformer, 16, 1, 0),
        spec(ArchKind::TransformerMoe, 16, 1, 3),
        spec(ArchKind::Mamba, 16, 1, 0),
        spec(ArchKind::MoeMamba, 16, 1, 3),
        spec(ArchKind::ParallelMoeMamba, 16, 1, 3),
    ];
    for mask in inner_masks() {
        specs.push(inner(&mask, false, 16, 1));
    }
    let (l, probe) = (16, 9);
    for s in specs {
        let m = Model::<f64>::build(&s, &mut rng(14)).unwrap();
        let a = tokens(l, 4);
        let mut b = a.clone();
        for t in &mut b[probe..] {
            *t = (*t + 101) % 256;
        }
        // One sequence per batch: capacity is first come first kept, so a
        // later token cannot take an earlier token's slot.
        let (ya, yb) = (m.logits(&a, 1, l).unwrap(), m.logits(&b, 1, l).unwrap());
        let v = 256;
        assert_eq!(
            ya.data()[..probe * v],
            yb.data()[..probe * v],
            "{}",
            s.name()
        );
        assert_ne!(
            ya.data()[probe * v..],
            yb.data()[probe * v..],
            "{}",
            s.name()
        );
    }
}

#[test]
fn spec_json_uses_flat_field_names() {
    let s = inner(
        &[ProjectionSlot::GateProj, ProjectionSlot::OutputProj],
        true,
        64,
        2,
    );
    let v: serde_json::Value = serde_json::from_str(&s.to_json()).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(
        keys,
        [
            "d_expert",
            "d_model",
            "every_other",
            "expansion_den",
            "expansion_num",
            "inner_mask",
            "kind",
            "n_blocks",
            "n_experts",
            "n_heads",
            "vocab_size"
        ]
    );
    assert_eq!(v["kind"], "inner_moe_mamba");
    assert_eq!(
        v["inner_mask"],
        serde_json::json!(["gate_proj", "output_proj"])
    );
    assert_eq!(ModelSpec::from_json(&s.to_json()).unwrap(), s);
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = inner(&[], false, 16, 1);
    assert!(matches!(s.validate(), Err(Error::Config(_))));
    s.inner_mask = vec![ProjectionSlot::GateProj, ProjectionSlot::GateProj];
    assert!(s.validate().is_err());
    s.inner_mask = vec![ProjectionSlot::GateProj, ProjectionSlot::ConvProj];
    s.n_experts = 25;
    assert!(s.validate().is_err());
    assert!(spec(ArchKind::MoeMamba, 16, 1, 0).validate().is_err());
    let mut m = spec(ArchKind::Mamba, 16, 1, 0);
    m.every_other = true;
    assert!(m.validate().is_err());
    assert!(spec(ArchKind::Mamba, 16, 0, 0).validate().is_err());
    assert!(ModelSpec::from_json(r#"{"kind":"mamba","d_model":0,"n_blocks":1}"#).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn report_matches_enumeration(d in 1usize..5, blocks in 1usize..4, experts in 1usize..6, k in 0usize..19) {
        let d = 8 * d;
        let s = enumerate_variants(d, blocks, experts).swap_remove(k);
        let m = Model::<f32>::build(&s, &mut rng(0)).unwrap();
        prop_assert_eq!(count_params(&m), param_report(&s).unwrap());
    }

    #[test]
    fn logits_shape(b in 1usize..3, l in 1usize..9, k in 0usize..19) {
        let s = enumerate_variants(16, 1, 2).swap_remove(k);
        let m = Model::<f64>::build(&s, &mut rng(1)).unwrap();
        let out = m.logits(&tokens(b * l, 0), b, l).unwrap();
        prop_assert_eq!(out.shape(), &[b * l, 256]);
        prop_assert!(out.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn wrong_token_count_is_a_shape_error() {
    let m = Model::<f64>::build(&spec(ArchKind::Mamba, 8, 1, 0), &mut rng(0)).unwrap();
    assert!(matches!(
        m.logits(&tokens(5, 0), 2, 3),
        Err(Error::Shape { .. })
    ));
}
