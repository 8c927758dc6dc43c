use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::MambaConfig;
use super::scan::{scan_parallel, scan_sequential};
use crate::error::{Error, Result};
use crate::moe::{LinearExpert, MoeAux, SwitchMoe};
use crate::param::{Module, Param};
use crate::tensor::{Element, Graph, ScanMode, Tensor, Var};

/// The three linear projections of a block that may be replaced by routed banks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionSlot {
    ConvProj,
    GateProj,
    OutputProj,
}

impl ProjectionSlot {
    pub const ALL: [ProjectionSlot; 3] = [Self::ConvProj, Self::GateProj, Self::OutputProj];

    pub fn label(self) -> &'static str {
        match self {
            Self::ConvProj => "Conv Projection",
            Self::GateProj => "Gate Projection",
            Self::OutputProj => "Output Projection",
        }
    }
}

/// A dense weight matrix or a top-1 routed bank of same-shaped ones.
#[derive(Debug, Clone)]
pub enum Projection<T> {
    Dense(Param<T>),
    Routed(SwitchMoe<T, LinearExpert<T>>),
}

impl<T: Element> Projection<T> {
    fn new(
        name: &str,
        d_in: usize,
        d_out: usize,
        experts: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match experts {
            None => Projection::Dense(Param::linear(name, d_in, d_out, rng)),
            Some(n) => {
                let mut moe = SwitchMoe::linear(d_in, d_out, n, rng)?;
                moe.prefix_names(name);
                Projection::Routed(moe)
            }
        })
    }

    /// Applies the projection to `x: [B, L, d_in]`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, aux: &mut MoeAux) -> Result<Var> {
        match self {
            Projection::Dense(w) => {
                let w = g.param(w);
                g.matmul(x, w)
            }
            Projection::Routed(moe) => {
                let s = g.shape(x).to_vec();
                let rows: usize = s[..s.len() - 1].iter().product();
                let flat = g.reshape(x, &[rows, s[s.len() - 1]])?;
                let y = moe.forward(g, flat, aux)?;
                let mut out = s;
                *out.last_mut().expect("nonempty") = moe.d_out();
                g.reshape(y, &out)
            }
        }
    }

    pub fn total_params(&self) -> usize {
        match self {
            Projection::Dense(w) => w.numel(),
            Projection::Routed(m) => m.total_params(),
        }
    }

    pub fn active_params(&self) -> usize {
        match self {
            Projection::Dense(w) => w.numel(),
            Projection::Routed(m) => m.active_params(),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            Projection::Dense(w) => f(w),
            Projection::Routed(m) => m.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Projection::Dense(w) => f(w),
            Projection::Routed(m) => m.visit_mut(f),
        }
    }
}

/// Selective state-space block: gate and conv projections, causal depthwise
/// conv, input-dependent discretization, scan, SiLU gating, output projection.
#[derive(Debug, Clone)]
pub struct MambaLayer<T> {
    pub cfg: MambaConfig,
    pub conv_proj: Projection<T>,
    pub gate_proj: Projection<T>,
    /// `[Ed, k]`; tap `j` multiplies the input `j` steps back.
    pub conv_w: Param<T>,
    pub conv_b: Param<T>,
    /// `[Ed, dt_rank + 2·d_state]`, producing the Δ precursor, B and C.
    pub x_proj: Param<T>,
    pub dt_proj: Param<T>,
    pub dt_bias: Param<T>,
    /// `A = −exp(a_log)`, `[Ed, d_state]`.
    pub a_log: Param<T>,
    pub d_skip: Param<T>,
    pub out_proj: Projection<T>,
    pub scan_mode: ScanMode,
}

/// Discretized SSM inputs for a whole sequence batch.
#[derive(Debug, Clone)]
pub struct Discretized<T> {
    /// `[B, L, Ed, ds]`
    pub abar: Tensor<T>,
    /// `[B, L, Ed, ds]`
    pub bbar_u: Tensor<T>,
    /// `[B, L, ds]`
    pub c: Tensor<T>,
}

pub(crate) struct DiscretizedVars {
    pub abar: Var,
    pub bbar_u: Var,
    pub c: Var,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Element> MambaLayer<T> {
    pub fn new(cfg: MambaConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::with_routed(cfg, &[], 0, rng)
    }

    /// A block whose projections in `mask` are routed banks of `n_experts`
    /// linear experts each.
    pub fn with_routed(
        cfg: MambaConfig,
        mask: &[ProjectionSlot],
        n_experts: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if !mask.is_empty() && n_experts == 0 {
            return Err(Error::Config(
                "routed projections need at least one expert".into(),
            ));
        }
        let (d, ed, ds, r, k) = (
            cfg.d_model,
            cfg.d_inner(),
            cfg.d_state,
            cfg.dt_rank(),
            cfg.d_conv,
        );
        let experts = |slot| mask.contains(&slot).then_some(n_experts);

        let conv_proj =
            Projection::new("conv_proj", d, ed, experts(ProjectionSlot::ConvProj), rng)?;
        let gate_proj =
            Projection::new("gate_proj", d, ed, experts(ProjectionSlot::GateProj), rng)?;
        let conv_bound = 1.0 / (k as f64).sqrt();
        let conv_w = Param::uniform("conv_w", vec![ed, k], conv_bound, rng);
        let mut conv_b = Param::uniform("conv_b", vec![ed], conv_bound, rng);
        conv_b.decay = false;
        let x_proj = Param::linear("x_proj", ed, r + 2 * ds, rng);
        let dt_proj = Param::linear("dt_proj", r, ed, rng);
        let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
        let dt_init = Tensor::from_fn(vec![ed], |_| {
            T::c(inverse_softplus(rng.gen_range(lo..hi).exp()))
        });
        let dt_bias = Param::new("dt_bias", dt_init, false);
        let a_init = Tensor::from_fn(vec![ed, ds], |i| T::c(((i % ds) + 1) as f64).ln());
        let a_log = Param::new("a_log", a_init, false);
        let d_skip = Param::ones("d_skip", ed);
        let out_proj =
            Projection::new("out_proj", ed, d, experts(ProjectionSlot::OutputProj), rng)?;

        Ok(MambaLayer {
            cfg,
            conv_proj,
            gate_proj,
            conv_w,
            conv_b,
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            d_skip,
            out_proj,
            scan_mode: ScanMode::default(),
        })
    }

    pub fn projection(&self, slot: ProjectionSlot) -> &Projection<T> {
        match slot {
            ProjectionSlot::ConvProj => &self.conv_proj,
            ProjectionSlot::GateProj => &self.gate_proj,
            ProjectionSlot::OutputProj => &self.out_proj,
        }
    }

    pub fn projection_mut(&mut self, slot: ProjectionSlot) -> &mut Projection<T> {
        match slot {
            ProjectionSlot::ConvProj => &mut self.conv_proj,
            ProjectionSlot::GateProj => &mut self.gate_proj,
            ProjectionSlot::OutputProj => &mut self.out_proj,
        }
    }

    fn check_input(&self, s: &[usize], width: usize) -> Result<()> {
        if s.len() != 3 || s[2] != width {
            return Err(Error::shape("mamba", s, &[width]));
        }
        Ok(())
    }

    /// Δ, Abar, Bbar·u and C from the post-activation sequence `u: [B, L, Ed]`.
    pub(crate) fn discretize_vars<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        u: Var,
    ) -> Result<DiscretizedVars> {
        let (r, ds) = (self.cfg.dt_rank(), self.cfg.d_state);
        let x_proj = g.param(&self.x_proj);
        let xdbl = g.matmul(u, x_proj)?;
        let dt_low = g.slice_last(xdbl, 0, r)?;
        let b = g.slice_last(xdbl, r, ds)?;
        let c = g.slice_last(xdbl, r + ds, ds)?;
        let dt_proj = g.param(&self.dt_proj);
        let dt_bias = g.param(&self.dt_bias);
        let dt = g.matmul(dt_low, dt_proj)?;
        let dt = g.add(dt, dt_bias)?;
        let delta = g.softplus(dt);

        let a_log = g.param(&self.a_log);
        let a = g.exp(a_log);
        let a = g.neg(a);
        let da = g.outer_expand(delta, a)?;
        let abar = g.exp(da);
        let du = g.mul(delta, u)?;
        let bbar_u = g.outer(du, b)?;
        Ok(DiscretizedVars { abar, bbar_u, c })
    }

    /// The SSM output `Σ_s C ⊙ h` computed step by step without materializing
    /// the discretized tensors.
    fn fused_scan<'a>(&'a self, g: &mut Graph<'a, T>, u: Var) -> Result<Var> {
        let (r, ds) = (self.cfg.dt_rank(), self.cfg.d_state);
        let x_proj = g.param(&self.x_proj);
        let xdbl = g.matmul(u, x_proj)?;
        let dt_low = g.slice_last(xdbl, 0, r)?;
        let b = g.slice_last(xdbl, r, ds)?;
        let c = g.slice_last(xdbl, r + ds, ds)?;
        let dt_proj = g.param(&self.dt_proj);
        let dt_bias = g.param(&self.dt_bias);
        let dt = g.matmul(dt_low, dt_proj)?;
        let dt = g.add(dt, dt_bias)?;
        let delta = g.softplus(dt);
        let a_log = g.param(&self.a_log);
        let a = g.exp(a_log);
        let a = g.neg(a);
        g.selective_scan(delta, a, b, c, u)
    }

    /// Value-level discretization of `u: [B, L, Ed]`.
    pub fn discretize(&self, u: &Tensor<T>) -> Result<Discretized<T>> {
        self.check_input(u.shape(), self.cfg.d_inner())?;
        let mut g = Graph::new();
        let uv = g.constant(u.clone());
        let d = self.discretize_vars(&mut g, uv)?;
        Ok(Discretized {
            abar: g.value(d.abar).clone(),
            bbar_u: g.value(d.bbar_u).clone(),
            c: g.value(d.c).clone(),
        })
    }

    /// Block output for pre-normalized `x: [B, L, d_model]`. The caller adds the residual.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, aux: &mut MoeAux) -> Result<Var> {
        self.check_input(g.shape(x), self.cfg.d_model)?;
        let xc = self.conv_proj.forward(g, x, aux)?;
        let z = self.gate_proj.forward(g, x, aux)?;
        let conv_w = g.param(&self.conv_w);
        let conv_b = g.param(&self.conv_b);
        let xc = g.conv1d_depthwise_causal(xc, conv_w, conv_b)?;
        let u = g.silu(xc);

        let y = match self.scan_mode {
            ScanMode::Sequential => self.fused_scan(g, u)?,
            ScanMode::Parallel => {
                let d = self.discretize_vars(g, u)?;
                let h = g.scan(d.abar, d.bbar_u, ScanMode::Parallel)?;
                g.contract_state(h, d.c)?
            }
        };
        let d_skip = g.param(&self.d_skip);
        let skip = g.mul(u, d_skip)?;
        let y = g.add(y, skip)?;

        let gate = g.silu(z);
        let gated = g.mul(y, gate)?;
        self.out_proj.forward(g, gated, aux)
    }

    pub fn total_params(&self) -> usize {
        self.num_params()
    }

    pub fn active_params(&self) -> usize {
        let mut n = self.conv_proj.active_params()
            + self.gate_proj.active_params()
            + self.out_proj.active_params();
        for p in [
            &self.conv_w,
            &self.conv_b,
            &self.x_proj,
            &self.dt_proj,
            &self.dt_bias,
            &self.a_log,
            &self.d_skip,
        ] {
            n += p.numel();
        }
        n
    }
}

impl<T: Element> Module<T> for MambaLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv_proj.visit(f);
        self.gate_proj.visit(f);
        f(&self.conv_w);
        f(&self.conv_b);
        f(&self.x_proj);
        f(&self.dt_proj);
        f(&self.dt_bias);
        f(&self.a_log);
        f(&self.d_skip);
        self.out_proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv_proj.visit_mut(f);
        self.gate_proj.visit_mut(f);
        f(&mut self.conv_w);
        f(&mut self.conv_b);
        f(&mut self.x_proj);
        f(&mut self.dt_proj);
        f(&mut self.dt_bias);
        f(&mut self.a_log);
        f(&mut self.d_skip);
        self.out_proj.visit_mut(f);
    }
}

fn check_scan_inputs<T: Element>(
    abar: &Tensor<T>,
    bbar_u: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
    u: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let s = abar.shape();
    if s.len() != 4 || bbar_u.shape() != s {
        return Err(Error::shape("selective_scan", s, bbar_u.shape()));
    }
    let (b, l, ed, ds) = (s[0], s[1], s[2], s[3]);
    if c.shape() != [b, l, ds] {
        return Err(Error::shape("selective_scan", s, c.shape()));
    }
    if d.shape() != [ed] || u.shape() != [b, l, ed] {
        return Err(Error::shape("selective_scan", d.shape(), u.shape()));
    }
    Ok((b, l, ed, ds))
}

fn readout<T: Element>(
    h: &[T],
    c: &Tensor<T>,
    d: &Tensor<T>,
    u: &Tensor<T>,
    ed: usize,
    ds: usize,
) -> Vec<T> {
    let (cv, dv, uv) = (c.data(), d.data(), u.data());
    let mut y = Vec::with_capacity(uv.len());
    for (pos, (hrow, crow)) in h.chunks(ed * ds).zip(cv.chunks(ds)).enumerate() {
        for ch in 0..ed {
            let acc = hrow[ch * ds..(ch + 1) * ds]
                .iter()
                .zip(crow)
                .fold(T::zero(), |acc, (&hh, &cc)| acc + hh * cc);
            y.push(acc + dv[ch] * uv[pos * ed + ch]);
        }
    }
    y
}

/// `h_t = Abar_t ⊙ h_{t−1} + Bbar_u_t`, `y_t = Σ_s C_t ⊙ h_t + D ⊙ u_t`, one step at a time.
pub fn selective_scan_sequential<T: Element>(
    abar: &Tensor<T>,
    bbar_u: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
    u: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, l, ed, ds) = check_scan_inputs(abar, bbar_u, c, d, u)?;
    let mut h = vec![T::zero(); abar.numel()];
    scan_sequential(abar.data(), bbar_u.data(), b, l, ed * ds, &mut h);
    Tensor::new(vec![b, l, ed], readout(&h, c, d, u, ed, ds))
}

/// Same output as [`selective_scan_sequential`], via an associative tree scan.
pub fn selective_scan_parallel<T: Element>(
    abar: &Tensor<T>,
    bbar_u: &Tensor<T>,
    c: &Tensor<T>,
    d: &Tensor<T>,
    u: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, l, ed, ds) = check_scan_inputs(abar, bbar_u, c, d, u)?;
    let mut h = vec![T::zero(); abar.numel()];
    scan_parallel(abar.data(), bbar_u.data(), b, l, ed * ds, &mut h);
    Tensor::new(vec![b, l, ed], readout(&h, c, d, u, ed, ds))
}
