//! Central finite-difference checks of graph gradients in `f64`.
//!
//! Outputs are reduced to a scalar through a fixed random projection, so every
//! output element contributes to the checked gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::param::Module;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub step: f64,
    /// Lower bound on the denominator of the relative error, so entries whose
    /// true gradient is near zero are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-6,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(analytic, numeric)` at the worst entry.
    pub worst: (f64, f64),
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_err || self.checked == 1 {
            self.max_rel_err = err;
            self.worst = (analytic, numeric);
        }
    }
}

/// `Σ out ⊙ R` for a fixed random `R` drawn from `seed`.
pub fn project(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let r = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let r = g.constant(r);
    let w = g.mul(out, r)?;
    Ok(g.sum_all(w))
}

/// Checks gradients with respect to every element of `inputs`. `f` maps the
/// bound input handles to a scalar.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    cfg: GradCheck,
    f: impl for<'a> Fn(&mut Graph<'a, f64>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut report = GradReport::default();
    let mut xs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("leaf requires grad").data().to_vec();
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + cfg.step;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - cfg.step;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            report.record(analytic[i], (up - down) / (2.0 * cfg.step), cfg.floor);
        }
    }
    Ok(report)
}

/// Checks gradients with respect to every parameter of `module` and every
/// element of `inputs`.
pub fn check_module<M: Module<f64>>(
    module: &mut M,
    inputs: &[Tensor<f64>],
    cfg: GradCheck,
    f: impl for<'a> Fn(&mut Graph<'a, f64>, &'a M, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    fn eval<M: Module<f64>>(
        m: &M,
        xs: &[Tensor<f64>],
        f: &impl for<'a> Fn(&mut Graph<'a, f64>, &'a M, &[Var]) -> Result<Var>,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), false)).collect();
        let loss = f(&mut g, m, &vars)?;
        Ok(g.value(loss).item())
    }

    let (param_grads, input_grads) = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let loss = f(&mut g, module, &vars)?;
        let grads = g.backward(loss)?;
        let mut pg = Vec::new();
        module.visit(&mut |p| {
            pg.push(
                grads
                    .param(p.key())
                    .map_or_else(|| vec![0.0; p.numel()], |t| t.data().to_vec()),
            )
        });
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .map(|v| grads.wrt(*v).expect("leaf").data().to_vec())
            .collect();
        (pg, ig)
    };

    let mut report = GradReport::default();
    for (pi, analytic) in param_grads.iter().enumerate() {
        for i in 0..analytic.len() {
            let nudge = |m: &mut M, delta: f64| {
                let mut j = 0;
                m.visit_mut(&mut |p| {
                    if j == pi {
                        p.value.data_mut()[i] += delta;
                    }
                    j += 1;
                });
            };
            nudge(module, cfg.step);
            let up = eval(module, inputs, &f)?;
            nudge(module, -2.0 * cfg.step);
            let down = eval(module, inputs, &f)?;
            nudge(module, cfg.step);
            report.record(analytic[i], (up - down) / (2.0 * cfg.step), cfg.floor);
        }
    }
    let mut xs = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        for i in 0..analytic.len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + cfg.step;
            let up = eval(module, &xs, &f)?;
            xs[k].data_mut()[i] = orig - cfg.step;
            let down = eval(module, &xs, &f)?;
            xs[k].data_mut()[i] = orig;
            report.record(analytic[i], (up - down) / (2.0 * cfg.step), cfg.floor);
        }
    }
    Ok(report)
}
