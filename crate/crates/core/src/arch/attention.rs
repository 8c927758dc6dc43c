use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{Module, Param};
use crate::tensor::{Element, Graph, Var};

pub const ROPE_BASE: f64 = 10_000.0;

/// Multi-head causal self-attention with rotary position embedding on Q and K.
/// The four projections carry no bias.
#[derive(Debug, Clone)]
pub struct Attention<T> {
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    pub n_heads: usize,
}

impl<T: Element> Attention<T> {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 || (d_model / n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "{n_heads} heads do not split d_model {d_model} into even widths"
            )));
        }
        Ok(Attention {
            wq: Param::linear("wq", d_model, d_model, rng),
            wk: Param::linear("wk", d_model, d_model, rng),
            wv: Param::linear("wv", d_model, d_model, rng),
            wo: Param::linear("wo", d_model, d_model, rng),
            n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.value.shape()[0]
    }

    pub fn param_count(d_model: usize) -> usize {
        4 * d_model * d_model
    }

    /// `[B, L, d] → [B, H, L, dh]`
    fn heads<'a>(&self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let dh = s[2] / self.n_heads;
        let x = g.reshape(x, &[s[0], s[1], self.n_heads, dh])?;
        g.permute_0213(x)
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let d = self.d_model();
        if s.len() != 3 || s[2] != d {
            return Err(Error::shape("attention", &s, &[d]));
        }
        let dh = d / self.n_heads;
        let (wq, wk, wv, wo) = (
            g.param(&self.wq),
            g.param(&self.wk),
            g.param(&self.wv),
            g.param(&self.wo),
        );
        let q = g.matmul(x, wq)?;
        let q = self.heads(g, q)?;
        let q = g.rope(q, ROPE_BASE)?;
        let k = g.matmul(x, wk)?;
        let k = self.heads(g, k)?;
        let k = g.rope(k, ROPE_BASE)?;
        let v = g.matmul(x, wv)?;
        let v = self.heads(g, v)?;

        let kt = g.transpose_last2(k)?;
        let scores = g.matmul(q, kt)?;
        let att = g.causal_softmax(scores, 1.0 / (dh as f64).sqrt())?;
        let o = g.matmul(att, v)?;
        let o = g.permute_0213(o)?;
        let o = g.reshape(o, &[s[0], s[1], d])?;
        g.matmul(o, wo)
    }
}

impl<T: Element> Module<T> for Attention<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.wq);
        f(&self.wk);
        f(&self.wv);
        f(&self.wo);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.wq);
        f(&mut self.wk);
        f(&mut self.wv);
        f(&mut self.wo);
    }
}
