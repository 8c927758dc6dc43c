#![allow(dead_code)]

use moemamba::arch::{Attention, Model, ModelSpec};
use moemamba::gradcheck::{check_inputs, check_module, project, GradCheck, GradReport};
use moemamba::mamba::{MambaConfig, MambaLayer, ProjectionSlot};
use moemamba::moe::{MoeAux, SwitchConfig, SwitchMoe};
use moemamba::{Graph, Module, Param, Result, ScanMode, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-5;
pub const GRAD_SEEDS: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

pub fn normalish(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, rng)
}

/// Direct double loop over `[b][t][ch][s]`.
pub fn naive_selective_scan(
    abar: &Tensor<f64>,
    bbar_u: &Tensor<f64>,
    c: &Tensor<f64>,
    d: &Tensor<f64>,
    u: &Tensor<f64>,
) -> Vec<f64> {
    let s = abar.shape();
    let (nb, l, ed, ds) = (s[0], s[1], s[2], s[3]);
    let at = |t: &Tensor<f64>, b: usize, i: usize, ch: usize, st: usize| {
        t.data()[((b * l + i) * ed + ch) * ds + st]
    };
    let mut y = vec![0.0; nb * l * ed];
    for b in 0..nb {
        let mut h = vec![vec![0.0; ds]; ed];
        for t in 0..l {
            for ch in 0..ed {
                let mut acc = 0.0;
                for st in 0..ds {
                    h[ch][st] = at(abar, b, t, ch, st) * h[ch][st] + at(bbar_u, b, t, ch, st);
                    acc += h[ch][st] * c.data()[(b * l + t) * ds + st];
                }
                y[(b * l + t) * ed + ch] = acc + d.data()[ch] * u.data()[(b * l + t) * ed + ch];
            }
        }
    }
    y
}

/// Adds U(−s, s) noise to every parameter so checks do not sit on special init values.
pub fn jitter<M: Module<f64>>(m: &mut M, s: f64, rng: &mut impl Rng) {
    m.visit_mut(&mut |p: &mut Param<f64>| {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-s..s);
        }
    });
}

/// Top-1 routing is piecewise: finite differences are only meaningful when no
/// token sits within this probability gap of switching experts.
pub const MIN_ROUTING_MARGIN: f64 = 1e-4;

/// Draws inputs until `margin` (the forward pass's smallest routing gap, if
/// anything was routed) clears [`MIN_ROUTING_MARGIN`].
pub fn routable<X>(mut draw: impl FnMut() -> X, margin: impl Fn(&X) -> Option<f64>) -> X {
    for _ in 0..100 {
        let x = draw();
        let m = margin(&x);
        if m.map_or(true, |m| m >= MIN_ROUTING_MARGIN) {
            return x;
        }
    }
    panic!("no well-separated routing instance in 100 draws");
}

fn margin_of<'a>(f: impl FnOnce(&mut Graph<'a, f64>, &mut MoeAux) -> Result<Var>) -> Option<f64> {
    let mut g = Graph::new();
    let mut aux = MoeAux::default();
    f(&mut g, &mut aux).expect("forward");
    aux.min_margin
}

fn ops(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    project(g, out, seed)
}

type Case = (&'static str, fn(u64) -> Result<GradReport>);

macro_rules! op_case {
    ($name:literal, [$($shape:expr),*], |$g:ident, $v:ident| $body:expr) => {
        ($name, |seed: u64| {
            let mut r = rng(seed);
            let inputs: Vec<Tensor<f64>> = vec![$(normalish(&$shape, &mut r)),*];
            check_inputs(&inputs, GradCheck::default(), move |$g, $v| {
                let out = $body?;
                ops($g, out, seed)
            })
        })
    };
}

/// Every differentiable operation, each with a random projection loss.
pub fn op_cases() -> Vec<Case> {
    vec![
        op_case!("matmul_shared", [[2, 3, 4], [4, 5]], |g, v| g
            .matmul(v[0], v[1])),
        op_case!("matmul_batched", [[2, 3, 4], [2, 4, 5]], |g, v| g
            .matmul(v[0], v[1])),
        op_case!("add_broadcast", [[2, 3, 4], [4]], |g, v| g.add(v[0], v[1])),
        op_case!("mul_broadcast", [[2, 3, 4], [3, 4]], |g, v| g
            .mul(v[0], v[1])),
        op_case!("exp", [[3, 4]], |g, v| Ok::<_, moemamba::Error>(
            g.exp(v[0])
        )),
        op_case!("softplus", [[3, 4]], |g, v| Ok::<_, moemamba::Error>(
            g.softplus(v[0])
        )),
        op_case!("silu", [[3, 4]], |g, v| Ok::<_, moemamba::Error>(
            g.silu(v[0])
        )),
        op_case!("sigmoid", [[3, 4]], |g, v| Ok::<_, moemamba::Error>(
            g.sigmoid(v[0])
        )),
        op_case!("scale", [[3, 4]], |g, v| Ok::<_, moemamba::Error>(
            g.scale(v[0], -1.7)
        )),
        op_case!("neg", [[3, 4]], |g, v| Ok::<_, moemamba::Error>(
            g.neg(v[0])
        )),
        op_case!("sum_all", [[3, 4]], |g, v| {
            let s = g.sum_all(v[0]);
            Ok::<_, moemamba::Error>(g.mul(s, s)?)
        }),
        op_case!("mean_all", [[3, 4]], |g, v| {
            let s = g.mean_all(v[0]);
            Ok::<_, moemamba::Error>(g.exp(s))
        }),
        op_case!("softmax", [[3, 5]], |g, v| g.softmax(v[0])),
        op_case!("softmax_canonical", [[3, 5]], |g, v| g
            .softmax_canonical(v[0])),
        op_case!("causal_softmax", [[2, 4, 4]], |g, v| g
            .causal_softmax(v[0], 0.7)),
        op_case!("rmsnorm", [[2, 3, 6], [6]], |g, v| g
            .rmsnorm(v[0], v[1], 1e-5)),
        op_case!(
            "conv1d_depthwise_causal",
            [[2, 6, 3], [3, 4], [3]],
            |g, v| g.conv1d_depthwise_causal(v[0], v[1], v[2])
        ),
        ("cross_entropy", |seed| {
            let mut r = rng(seed);
            let logits = uniform(&[6, 7], -2.0, 2.0, &mut r);
            let targets: Vec<usize> = (0..6).map(|_| r.gen_range(0..7)).collect();
            check_inputs(&[logits], GradCheck::default(), move |g, v| {
                g.cross_entropy(v[0], &targets)
            })
        }),
        op_case!("reshape", [[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        op_case!("slice_last", [[2, 3, 7]], |g, v| g.slice_last(v[0], 2, 3)),
        op_case!("transpose_last2", [[2, 3, 4]], |g, v| g
            .transpose_last2(v[0])),
        op_case!("permute_0213", [[2, 3, 4, 2]], |g, v| g.permute_0213(v[0])),
        op_case!("gather_rows", [[5, 3]], |g, v| g
            .gather_rows(v[0], &[4, 0, 4, 2])),
        op_case!("scatter_rows", [[3, 2]], |g, v| g.scatter_rows(
            v[0],
            &[4, 0, 2],
            5
        )),
        op_case!("concat_rows", [[2, 3], [4, 3]], |g, v| g
            .concat_rows(&[v[0], v[1]])),
        op_case!("pick_columns", [[4, 3]], |g, v| g
            .pick_columns(v[0], &[2, 0, 1, 2])),
        op_case!("scale_rows", [[4, 3], [4]], |g, v| g.scale_rows(v[0], v[1])),
        op_case!("mean_rows", [[5, 3]], |g, v| g.mean_rows(v[0])),
        op_case!("outer_expand", [[2, 3, 4], [4, 5]], |g, v| g
            .outer_expand(v[0], v[1])),
        op_case!("outer", [[2, 3, 4], [2, 3, 5]], |g, v| g.outer(v[0], v[1])),
        op_case!("contract_state", [[2, 3, 4, 5], [2, 3, 5]], |g, v| g
            .contract_state(v[0], v[1])),
        op_case!("scan_sequential", [[2, 6, 3], [2, 6, 3]], |g, v| g.scan(
            v[0],
            v[1],
            ScanMode::Sequential
        )),
        op_case!("scan_parallel", [[2, 7, 3], [2, 7, 3]], |g, v| g.scan(
            v[0],
            v[1],
            ScanMode::Parallel
        )),
        ("selective_scan", |seed| {
            let mut r = rng(seed);
            let delta = uniform(&[2, 5, 3], 0.05, 1.5, &mut r);
            let a = uniform(&[3, 4], -2.0, -0.1, &mut r);
            let b = normalish(&[2, 5, 4], &mut r);
            let c = normalish(&[2, 5, 4], &mut r);
            let u = normalish(&[2, 5, 3], &mut r);
            check_inputs(&[delta, a, b, c, u], GradCheck::default(), move |g, v| {
                let y = g.selective_scan(v[0], v[1], v[2], v[3], v[4])?;
                ops(g, y, seed)
            })
        }),
        op_case!("rope", [[2, 5, 6]], |g, v| g.rope(v[0], 10_000.0)),
    ]
}

fn mamba_case(seed: u64, mode: ScanMode, mask: &[ProjectionSlot]) -> Result<GradReport> {
    let mut r = rng(seed);
    let mut layer = MambaLayer::<f64>::with_routed(MambaConfig::new(8), mask, 3, &mut r)?;
    layer.scan_mode = mode;
    jitter(&mut layer, 0.2, &mut r);
    let x = routable(
        || normalish(&[1, 4, 8], &mut r),
        |x| {
            margin_of(|g, aux| {
                let v = g.constant(x.clone());
                layer.forward(g, v, aux)
            })
        },
    );
    check_module(&mut layer, &[x], GradCheck::default(), move |g, m, v| {
        let mut aux = MoeAux::default();
        let y = m.forward(g, v[0], &mut aux)?;
        let out = ops(g, y, seed)?;
        match aux.total(g)? {
            Some(a) => g.add(out, a),
            None => Ok(out),
        }
    })
}

fn switch_case(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let mut cfg = SwitchConfig::new(3, 8, 12);
    cfg.capacity_factor = 3.0;
    let mut moe = SwitchMoe::<f64, _>::new(&cfg, &mut r)?;
    jitter(&mut moe, 0.2, &mut r);
    let x = routable(
        || normalish(&[6, 8], &mut r),
        |x| {
            margin_of(|g, aux| {
                let v = g.constant(x.clone());
                moe.forward(g, v, aux)
            })
        },
    );
    check_module(&mut moe, &[x], GradCheck::default(), move |g, m, v| {
        let mut aux = MoeAux::default();
        let y = m.forward(g, v[0], &mut aux)?;
        assert_eq!(aux.dropped, 0);
        let out = ops(g, y, seed)?;
        let a = aux.total(g)?.expect("aux loss");
        g.add(out, a)
    })
}

fn attention_case(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let mut att = Attention::<f64>::new(8, 2, &mut r)?;
    let x = normalish(&[2, 4, 8], &mut r);
    check_module(&mut att, &[x], GradCheck::default(), move |g, m, v| {
        let y = m.forward(g, v[0])?;
        ops(g, y, seed)
    })
}

fn block_case(seed: u64, spec: ModelSpec, index: usize) -> Result<GradReport> {
    let mut r = rng(seed);
    let model = Model::<f64>::build(&spec, &mut r)?;
    let mut block = model.blocks[index].clone();
    jitter(&mut block, 0.1, &mut r);
    let x = routable(
        || normalish(&[1, 8, spec.d_model], &mut r),
        |x| {
            margin_of(|g, aux| {
                let v = g.constant(x.clone());
                block.forward(g, v, aux)
            })
        },
    );
    check_module(&mut block, &[x], GradCheck::default(), move |g, b, v| {
        let mut aux = MoeAux::default();
        let y = b.forward(g, v[0], &mut aux)?;
        let out = ops(g, y, seed)?;
        match aux.total(g)? {
            Some(a) => g.add(out, a),
            None => Ok(out),
        }
    })
}

fn model_case(seed: u64, spec: ModelSpec) -> Result<GradReport> {
    let mut r = rng(seed);
    let mut model = Model::<f64>::build(&spec, &mut r)?;
    jitter(&mut model, 0.05, &mut r);
    let v = spec.vocab_size;
    let inputs = routable(
        || (0..6).map(|_| r.gen_range(0..v)).collect::<Vec<usize>>(),
        |toks| margin_of(|g, aux| model.forward(g, toks, 2, 3, aux)),
    );
    let targets: Vec<usize> = (0..6).map(|_| r.gen_range(0..v)).collect();
    check_module(&mut model, &[], GradCheck::default(), move |g, m, _| {
        let mut aux = MoeAux::default();
        let (ce, extra) = m.loss(g, &inputs, &targets, 2, 3, &mut aux)?;
        match extra {
            Some(a) => g.add(ce, a),
            None => Ok(ce),
        }
    })
}

pub fn small_spec(kind: moemamba::arch::ArchKind) -> ModelSpec {
    let mut s = ModelSpec::new(kind, 8, 1);
    s.vocab_size = 11;
    if s.has_moe() {
        s.n_experts = 3;
    }
    s
}

pub fn inner_spec(mask: &[ProjectionSlot], every_other: bool) -> ModelSpec {
    let mut s = ModelSpec::new(moemamba::arch::ArchKind::InnerMoeMamba, 8, 2);
    s.inner_mask = mask.to_vec();
    s.every_other = every_other;
    s.n_experts = 6;
    s.vocab_size = 11;
    s
}

/// Full layers and composed blocks at d_model = 8.
pub fn layer_cases() -> Vec<(String, Box<dyn Fn(u64) -> Result<GradReport>>)> {
    use moemamba::arch::ArchKind::*;
    use ProjectionSlot::*;
    let mut cases: Vec<(String, Box<dyn Fn(u64) -> Result<GradReport>>)> = vec![
        (
            "mamba_layer_sequential".into(),
            Box::new(|s| mamba_case(s, ScanMode::Sequential, &[])),
        ),
        (
            "mamba_layer_parallel".into(),
            Box::new(|s| mamba_case(s, ScanMode::Parallel, &[])),
        ),
        (
            "inner_moe_mamba_layer".into(),
            Box::new(|s| mamba_case(s, ScanMode::Sequential, &[ConvProj, GateProj, OutputProj])),
        ),
        ("switch_moe_layer".into(), Box::new(switch_case)),
        ("attention_layer".into(), Box::new(attention_case)),
    ];
    let blocks: Vec<(&str, ModelSpec, usize)> = vec![
        ("attention_block", small_spec(Transformer), 0),
        ("dense_ff_block", small_spec(Transformer), 1),
        ("moe_ff_block", small_spec(TransformerMoe), 1),
        ("mamba_block", small_spec(Mamba), 0),
        ("parallel_block", small_spec(ParallelMoeMamba), 0),
        ("inner_moe_block", inner_spec(&[OutputProj], false), 0),
    ];
    for (name, spec, idx) in blocks {
        cases.push((
            name.into(),
            Box::new(move |s| block_case(s, spec.clone(), idx)),
        ));
    }
    for kind in [
        Transformer,
        TransformerMoe,
        Mamba,
        MoeMamba,
        ParallelMoeMamba,
    ] {
        let spec = small_spec(kind);
        cases.push((
            format!("model_{}", spec.name()),
            Box::new(move |s| model_case(s, spec.clone())),
        ));
    }
    let spec = inner_spec(&[ConvProj, GateProj], true);
    cases.push((
        "model_inner_every_other".into(),
        Box::new(move |s| model_case(s, spec.clone())),
    ));
    cases
}

/// Worst relative error over `seeds` seeds, the seed it came from and the
/// number of gradient entries checked in total.
pub fn worst_over_seeds(
    f: &dyn Fn(u64) -> Result<GradReport>,
    seeds: u64,
) -> Result<(f64, u64, usize)> {
    let (mut worst, mut at, mut checked) = (0.0, 0, 0);
    for seed in 0..seeds {
        let rep = f(seed)?;
        checked += rep.checked;
        if rep.max_rel_err > worst {
            worst = rep.max_rel_err;
            at = seed;
        }
    }
    Ok((worst, at, checked))
}
