use rand::Rng;

use super::attention::Attention;
use super::spec::{ArchKind, ModelSpec};
use crate::error::{Error, Result};
use crate::mamba::{MambaLayer, Projection};
use crate::moe::{ExpertFfn, MoeAux, SwitchConfig, SwitchMoe};
use crate::param::{Module, Param, Role};
use crate::tensor::{Element, Graph, ScanMode, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
/// Half-width of the uniform unembedding init; small, so untrained logits are near uniform.
pub const UNEMBED_INIT: f64 = 0.02;

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Attention(Attention<T>),
    DenseFf(ExpertFfn<T>),
    MoeFf(SwitchMoe<T, ExpertFfn<T>>),
    Mamba(MambaLayer<T>),
}

impl<T: Element> Layer<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Attention(_) => "attention",
            Layer::DenseFf(_) => "dense_ff",
            Layer::MoeFf(_) => "moe_ff",
            Layer::Mamba(m) => {
                let routed = [&m.conv_proj, &m.gate_proj, &m.out_proj]
                    .iter()
                    .any(|p| matches!(p, Projection::Routed(_)));
                if routed {
                    "inner_moe_mamba"
                } else {
                    "mamba"
                }
            }
        }
    }

    /// `x: [B, L, d]`, already normalized.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, aux: &mut MoeAux) -> Result<Var> {
        match self {
            Layer::Attention(a) => a.forward(g, x),
            Layer::DenseFf(f) => {
                use crate::moe::Expert;
                f.forward(g, x)
            }
            Layer::MoeFf(m) => moe_tokens(m, g, x, aux),
            Layer::Mamba(m) => m.forward(g, x, aux),
        }
    }
}

/// Applies a switch layer token-wise to `[B, L, d]`.
fn moe_tokens<'a, T: Element>(
    m: &'a SwitchMoe<T, ExpertFfn<T>>,
    g: &mut Graph<'a, T>,
    x: Var,
    aux: &mut MoeAux,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = m.forward(g, flat, aux)?;
    g.reshape(y, &s)
}

impl<T: Element> Module<T> for Layer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            Layer::Attention(a) => a.visit(f),
            Layer::DenseFf(x) => x.visit(f),
            Layer::MoeFf(m) => m.visit(f),
            Layer::Mamba(m) => m.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Layer::Attention(a) => a.visit_mut(f),
            Layer::DenseFf(x) => x.visit_mut(f),
            Layer::MoeFf(m) => m.visit_mut(f),
            Layer::Mamba(m) => m.visit_mut(f),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Block<T> {
    /// `x + layer(norm(x))`
    Residual { norm: Param<T>, layer: Layer<T> },
    /// `x + mamba(norm(x)) + moe(norm(x))` with one shared norm.
    Parallel {
        norm: Param<T>,
        mamba: MambaLayer<T>,
        moe: SwitchMoe<T, ExpertFfn<T>>,
    },
}

impl<T: Element> Block<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Block::Residual { layer, .. } => layer.kind_name(),
            Block::Parallel { .. } => "parallel_mamba_moe",
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, aux: &mut MoeAux) -> Result<Var> {
        match self {
            Block::Residual { norm, layer } => {
                let gain = g.param(norm);
                let n = g.rmsnorm(x, gain, NORM_EPS)?;
                let y = layer.forward(g, n, aux)?;
                g.add(x, y)
            }
            Block::Parallel { norm, mamba, moe } => {
                let gain = g.param(norm);
                let n = g.rmsnorm(x, gain, NORM_EPS)?;
                let a = mamba.forward(g, n, aux)?;
                let b = moe_tokens(moe, g, n, aux)?;
                let y = g.add(x, a)?;
                g.add(y, b)
            }
        }
    }

    pub fn mamba_layers_mut(&mut self) -> Vec<&mut MambaLayer<T>> {
        match self {
            Block::Residual {
                layer: Layer::Mamba(m),
                ..
            } => vec![m],
            Block::Parallel { mamba, .. } => vec![mamba],
            _ => vec![],
        }
    }
}

impl<T: Element> Module<T> for Block<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            Block::Residual { norm, layer } => {
                f(norm);
                layer.visit(f);
            }
            Block::Parallel { norm, mamba, moe } => {
                f(norm);
                mamba.visit(f);
                moe.visit(f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Block::Residual { norm, layer } => {
                f(norm);
                layer.visit_mut(f);
            }
            Block::Parallel { norm, mamba, moe } => {
                f(norm);
                mamba.visit_mut(f);
                moe.visit_mut(f);
            }
        }
    }
}

/// Embedding, pre-norm residual stack, final norm, untied unembedding.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub embed: Param<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Param<T>,
    pub unembed: Param<T>,
}

fn residual<T: Element>(i: usize, layer: Layer<T>, d: usize) -> Block<T> {
    let mut b = Block::Residual {
        norm: Param::ones("norm", d),
        layer,
    };
    b.prefix_names(&format!("blocks.{i}"));
    b
}

impl<T: Element> Model<T> {
    pub fn build(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let embed =
            Param::uniform("embed", vec![spec.vocab_size, d], 1.0, rng).with_role(Role::Embedding);
        let ff = SwitchConfig::new(spec.n_experts, d, spec.d_expert);
        let mut layers: Vec<Block<T>> = Vec::new();
        for i in 0..spec.n_blocks {
            match spec.kind {
                ArchKind::Transformer => {
                    layers.push(residual(
                        layers.len(),
                        Layer::Attention(Attention::new(d, spec.n_heads, rng)?),
                        d,
                    ));
                    layers.push(residual(
                        layers.len(),
                        Layer::DenseFf(ExpertFfn::new(d, spec.d_expert, rng)),
                        d,
                    ));
                }
                ArchKind::TransformerMoe => {
                    layers.push(residual(
                        layers.len(),
                        Layer::Attention(Attention::new(d, spec.n_heads, rng)?),
                        d,
                    ));
                    layers.push(residual(
                        layers.len(),
                        Layer::MoeFf(SwitchMoe::new(&ff, rng)?),
                        d,
                    ));
                }
                ArchKind::Mamba => {
                    let m = MambaLayer::new(spec.mamba_config(), rng)?;
                    layers.push(residual(layers.len(), Layer::Mamba(m), d));
                }
                ArchKind::MoeMamba => {
                    let m = MambaLayer::new(spec.mamba_config(), rng)?;
                    layers.push(residual(layers.len(), Layer::Mamba(m), d));
                    layers.push(residual(
                        layers.len(),
                        Layer::MoeFf(SwitchMoe::new(&ff, rng)?),
                        d,
                    ));
                }
                ArchKind::ParallelMoeMamba => {
                    let mut b = Block::Parallel {
                        norm: Param::ones("norm", d),
                        mamba: MambaLayer::new(spec.mamba_config(), rng)?,
                        moe: SwitchMoe::new(&ff, rng)?,
                    };
                    b.prefix_names(&format!("blocks.{i}"));
                    layers.push(b);
                }
                ArchKind::InnerMoeMamba => {
                    let m = if spec.layer_is_routed(i) {
                        MambaLayer::with_routed(
                            spec.mamba_config(),
                            &spec.mask(),
                            spec.experts_per_projection(),
                            rng,
                        )?
                    } else {
                        MambaLayer::new(spec.mamba_config(), rng)?
                    };
                    layers.push(residual(layers.len(), Layer::Mamba(m), d));
                }
            }
        }
        let mut model = Model {
            spec: spec.clone(),
            embed,
            blocks: layers,
            final_norm: Param::ones("final_norm", d),
            unembed: Param::uniform("unembed", vec![d, spec.vocab_size], UNEMBED_INIT, rng)
                .with_role(Role::Unembedding),
        };
        model.assign_banks();
        Ok(model)
    }

    /// Numbers every routed bank in visiting order and tags its experts.
    fn assign_banks(&mut self) {
        let mut bank = 0;
        for block in &mut self.blocks {
            let mut tag = |moe_bank: &mut dyn FnMut(usize)| {
                moe_bank(bank);
                bank += 1;
            };
            match block {
                Block::Residual { layer, .. } => match layer {
                    Layer::MoeFf(m) => tag(&mut |b| m.set_bank(b)),
                    Layer::Mamba(m) => {
                        for p in [&mut m.conv_proj, &mut m.gate_proj, &mut m.out_proj] {
                            if let Projection::Routed(r) = p {
                                tag(&mut |b| r.set_bank(b));
                            }
                        }
                    }
                    _ => {}
                },
                Block::Parallel { moe, .. } => tag(&mut |b| moe.set_bank(b)),
            }
        }
    }

    pub fn set_scan_mode(&mut self, mode: ScanMode) {
        for b in &mut self.blocks {
            for m in b.mamba_layers_mut() {
                m.scan_mode = mode;
            }
        }
    }

    /// Logits `[B·L, vocab]` for `tokens` laid out as `[B, L]`.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        tokens: &[usize],
        batch: usize,
        len: usize,
        aux: &mut MoeAux,
    ) -> Result<Var> {
        if tokens.len() != batch * len || tokens.is_empty() {
            return Err(Error::shape("model", &[tokens.len()], &[batch, len]));
        }
        let d = self.spec.d_model;
        let embed = g.param(&self.embed);
        let x = g.gather_rows(embed, tokens)?;
        let mut x = g.reshape(x, &[batch, len, d])?;
        for block in &self.blocks {
            x = block.forward(g, x, aux)?;
        }
        let gain = g.param(&self.final_norm);
        let x = g.rmsnorm(x, gain, NORM_EPS)?;
        let x = g.reshape(x, &[batch * len, d])?;
        let unembed = g.param(&self.unembed);
        g.matmul(x, unembed)
    }

    /// Mean next-token cross-entropy and the summed auxiliary loss.
    pub fn loss<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        len: usize,
        aux: &mut MoeAux,
    ) -> Result<(Var, Option<Var>)> {
        let logits = self.forward(g, inputs, batch, len, aux)?;
        let ce = g.cross_entropy(logits, targets)?;
        let extra = aux.total(g)?;
        Ok((ce, extra))
    }

    /// Logits as a plain tensor, without keeping a tape around.
    pub fn logits(&self, tokens: &[usize], batch: usize, len: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut aux = MoeAux::default();
        let v = self.forward(&mut g, tokens, batch, len, &mut aux)?;
        Ok(g.value(v).clone())
    }
}

impl<T: Element> Module<T> for Model<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.embed);
        for b in &self.blocks {
            b.visit(f);
        }
        f(&self.final_norm);
        f(&self.unembed);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.embed);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        f(&mut self.final_norm);
        f(&mut self.unembed);
    }
}
