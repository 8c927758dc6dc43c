//! Switch-style top-1 mixture of experts.

mod routing;

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::{Module, Param, Role};
use crate::tensor::{Element, Graph, Tensor, Var};

pub use routing::{
    apply_capacity, argmax, expert_capacity, load_balance_loss, route, route_scores,
    RoutingDecision,
};

pub const DEFAULT_AUX_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchConfig {
    pub n_experts: usize,
    pub d_model: usize,
    pub d_expert: usize,
    pub capacity_factor: f64,
    pub aux_alpha: f64,
}

impl SwitchConfig {
    pub fn new(n_experts: usize, d_model: usize, d_expert: usize) -> Self {
        SwitchConfig {
            n_experts,
            d_model,
            d_expert,
            capacity_factor: 1.0,
            aux_alpha: DEFAULT_AUX_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 || self.d_model == 0 || self.d_expert == 0 {
            return Err(Error::Config(format!(
                "switch layer needs positive sizes, got {self:?}"
            )));
        }
        if !(self.capacity_factor > 0.0) || !(self.aux_alpha >= 0.0) {
            return Err(Error::Config(format!(
                "capacity_factor must be positive and aux_alpha non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Routing statistics and auxiliary losses collected during one forward pass.
#[derive(Debug, Default)]
pub struct MoeAux {
    pub losses: Vec<Var>,
    pub routed: usize,
    pub dropped: usize,
    /// Smallest gap between a token's top two router probabilities. Rows of
    /// identical scores (an all-zero input, say) are exact, stable ties and
    /// are not counted.
    pub min_margin: Option<f64>,
}

impl MoeAux {
    pub fn dropped_fraction(&self) -> f64 {
        if self.routed == 0 {
            0.0
        } else {
            self.dropped as f64 / self.routed as f64
        }
    }

    /// Sum of the collected auxiliary losses, if any.
    pub fn total<T: Element>(&self, g: &mut Graph<'_, T>) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for &l in &self.losses {
            acc = Some(match acc {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        Ok(acc)
    }
}

/// A map from `[n, d_in]` rows to `[n, d_out]` rows.
pub trait Expert<T: Element>: Module<T> {
    fn d_in(&self) -> usize;
    fn d_out(&self) -> usize;
    fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var>;
}

/// Two bias-free projections with a SiLU between them.
#[derive(Debug, Clone)]
pub struct ExpertFfn<T> {
    pub w_in: Param<T>,
    pub w_out: Param<T>,
}

impl<T: Element> ExpertFfn<T> {
    pub fn new(d_model: usize, d_hidden: usize, rng: &mut impl Rng) -> Self {
        ExpertFfn {
            w_in: Param::linear("w_in", d_model, d_hidden, rng),
            w_out: Param::linear("w_out", d_hidden, d_model, rng),
        }
    }

    pub fn param_count(d_model: usize, d_hidden: usize) -> usize {
        2 * d_model * d_hidden
    }
}

impl<T: Element> Module<T> for ExpertFfn<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.w_in);
        f(&self.w_out);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w_in);
        f(&mut self.w_out);
    }
}

impl<T: Element> Expert<T> for ExpertFfn<T> {
    fn d_in(&self) -> usize {
        self.w_in.value.shape()[0]
    }

    fn d_out(&self) -> usize {
        self.w_out.value.shape()[1]
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        let w_in = g.param(&self.w_in);
        let w_out = g.param(&self.w_out);
        let h = g.matmul(x, w_in)?;
        let h = g.silu(h);
        g.matmul(h, w_out)
    }
}

/// A single bias-free projection; the expert shape used inside Mamba blocks.
#[derive(Debug, Clone)]
pub struct LinearExpert<T> {
    pub w: Param<T>,
}

impl<T: Element> LinearExpert<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        LinearExpert {
            w: Param::linear("w", d_in, d_out, rng),
        }
    }
}

impl<T: Element> Module<T> for LinearExpert<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.w);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w);
    }
}

impl<T: Element> Expert<T> for LinearExpert<T> {
    fn d_in(&self) -> usize {
        self.w.value.shape()[0]
    }

    fn d_out(&self) -> usize {
        self.w.value.shape()[1]
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        let w = g.param(&self.w);
        g.matmul(x, w)
    }
}

/// Router plus a bank of same-shaped experts.
#[derive(Debug, Clone)]
pub struct SwitchMoe<T, X> {
    pub router: Param<T>,
    pub experts: Vec<X>,
    pub capacity_factor: f64,
    pub aux_alpha: f64,
}

impl<T: Element> SwitchMoe<T, ExpertFfn<T>> {
    pub fn new(cfg: &SwitchConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let experts = (0..cfg.n_experts)
            .map(|_| ExpertFfn::new(cfg.d_model, cfg.d_expert, rng))
            .collect();
        Ok(Self::from_experts(cfg.d_model, experts, cfg, rng))
    }
}

impl<T: Element> SwitchMoe<T, LinearExpert<T>> {
    pub fn linear(d_in: usize, d_out: usize, n_experts: usize, rng: &mut impl Rng) -> Result<Self> {
        let cfg = SwitchConfig::new(n_experts, d_in, d_out);
        cfg.validate()?;
        let experts = (0..n_experts)
            .map(|_| LinearExpert::new(d_in, d_out, rng))
            .collect();
        Ok(Self::from_experts(d_in, experts, &cfg, rng))
    }
}

impl<T: Element, X: Expert<T>> SwitchMoe<T, X> {
    fn from_experts(d_in: usize, experts: Vec<X>, cfg: &SwitchConfig, rng: &mut impl Rng) -> Self {
        let n = experts.len();
        let mut moe = SwitchMoe {
            router: Param::linear("router", d_in, n, rng),
            experts,
            capacity_factor: cfg.capacity_factor,
            aux_alpha: cfg.aux_alpha,
        };
        for (i, e) in moe.experts.iter_mut().enumerate() {
            e.prefix_names(&format!("expert{i}"));
        }
        moe
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_in(&self) -> usize {
        self.router.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.experts[0].d_out()
    }

    /// Tags every expert parameter with its bank and position for accounting.
    pub fn set_bank(&mut self, bank: usize) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&mut |p| p.role = Role::Expert { bank, expert: i });
        }
    }

    /// Router decision for `x: [N, d_in]` under this layer's capacity.
    pub fn decide(&self, x: &Tensor<T>) -> Result<RoutingDecision<T>> {
        let d = route(x, &self.router.value)?;
        let cap = expert_capacity(self.capacity_factor, d.n_tokens(), d.n_experts());
        Ok(apply_capacity(d, cap))
    }

    /// `y[n] = p[n, I_n] · E_{I_n}(x[n])` for kept tokens and zero for dropped
    /// ones. Pushes the load-balancing loss onto `aux`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, aux: &mut MoeAux) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.d_in() {
            return Err(Error::shape("switch_moe", &s, &[self.d_in()]));
        }
        let n = s[0];
        let e = self.n_experts();
        let router = g.param(&self.router);
        let scores = g.matmul(x, router)?;
        let probs = g.softmax_canonical(scores)?;

        let chosen: Vec<usize> = g.value(probs).data().chunks(e).map(argmax).collect();
        if e > 1 {
            for (row, &i) in g.value(probs).data().chunks(e).zip(&chosen) {
                if row.iter().all(|&p| p == row[0]) {
                    continue;
                }
                let runner_up = (0..e)
                    .filter(|&j| j != i)
                    .map(|j| row[j])
                    .fold(T::neg_infinity(), T::max);
                let m = (row[i] - runner_up).f64();
                aux.min_margin = Some(aux.min_margin.map_or(m, |old| old.min(m)));
            }
        }
        let capacity = expert_capacity(self.capacity_factor, n, e);
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); e];
        let mut assigned = vec![0usize; e];
        for (t, &i) in chosen.iter().enumerate() {
            assigned[i] += 1;
            if buckets[i].len() < capacity {
                buckets[i].push(t);
            }
        }
        let kept: usize = buckets.iter().map(Vec::len).sum();
        assert!(
            buckets.iter().all(|b| b.len() <= capacity),
            "expert over capacity"
        );
        aux.routed += n;
        aux.dropped += n - kept;

        let y = if kept == 0 {
            g.constant(Tensor::zeros(vec![n, self.d_out()]))
        } else {
            let mut parts = Vec::new();
            let mut order = Vec::with_capacity(kept);
            for (expert, idx) in self.experts.iter().zip(&buckets) {
                if idx.is_empty() {
                    continue;
                }
                let xi = g.gather_rows(x, idx)?;
                parts.push(expert.forward(g, xi)?);
                order.extend_from_slice(idx);
            }
            let stacked = if parts.len() == 1 {
                parts[0]
            } else {
                g.concat_rows(&parts)?
            };
            let y = g.scatter_rows(stacked, &order, n)?;
            let p_chosen = g.pick_columns(probs, &chosen)?;
            g.scale_rows(y, p_chosen)?
        };

        if self.aux_alpha > 0.0 {
            let scale = self.aux_alpha * e as f64 / n as f64;
            let f = Tensor::from_fn(vec![e], |i| T::c(assigned[i] as f64 * scale));
            let f = g.constant(f);
            let mean_p = g.mean_rows(probs)?;
            let weighted = g.mul(mean_p, f)?;
            aux.losses.push(g.sum_all(weighted));
        }
        Ok(y)
    }

    pub fn total_params(&self) -> usize {
        self.num_params()
    }

    /// Router plus one expert.
    pub fn active_params(&self) -> usize {
        self.router.numel() + self.experts[0].num_params()
    }
}

impl<T: Element, X: Expert<T>> Module<T> for SwitchMoe<T, X> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.router);
        for e in &self.experts {
            e.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.router);
        for e in &mut self.experts {
            e.visit_mut(f);
        }
    }
}
