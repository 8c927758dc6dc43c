use crate::error::{Error, Result};
use crate::param::{Module, Param};
use crate::tensor::{Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Errors naming the first parameter with a non-finite gradient.
pub fn check_finite<T: Element>(params: &[&Param<T>], grads: &[Tensor<T>]) -> Result<()> {
    for (p, g) in params.iter().zip(grads) {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
            });
        }
    }
    Ok(())
}

/// Adam with decoupled weight decay. Moments are kept in parameter visiting order.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(model: &impl Module<T>, weight_decay: f64) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |p| m.push(Tensor::zeros(p.value.shape().to_vec())));
        AdamW {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            weight_decay,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update with rate `lr`; `grads` follow the model's visiting order.
    pub fn step(&mut self, model: &mut impl Module<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - self.beta1), T::c(1.0 - self.beta2));
        let (lr_t, eps) = (T::c(lr), T::c(self.eps));
        let decay = T::c(lr * self.weight_decay);
        let (inv_bc1, inv_bc2) = (T::c(1.0 / bc1), T::c(1.0 / bc2));
        let mut i = 0;
        let mut mismatch = None;
        model.visit_mut(&mut |p| {
            let (Some(g), Some(m), Some(v)) = (grads.get(i), self.m.get_mut(i), self.v.get_mut(i))
            else {
                mismatch.get_or_insert(i);
                return;
            };
            if g.shape() != p.value.shape() {
                mismatch.get_or_insert(i);
                return;
            }
            let apply_decay = p.decay && self.weight_decay != 0.0;
            for (((w, &gv), mv), vv) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                if apply_decay {
                    *w = *w - decay * *w;
                }
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let mhat = *mv * inv_bc1;
                let vhat = *vv * inv_bc2;
                *w = *w - lr_t * mhat / (vhat.sqrt() + eps);
            }
            i += 1;
        });
        match mismatch {
            Some(j) => Err(Error::Usage(format!(
                "gradient/optimizer state mismatch at parameter {j}"
            ))),
            None if i != grads.len() => Err(Error::Usage(format!(
                "{} gradients for {i} parameters",
                grads.len()
            ))),
            None => Ok(()),
        }
    }
}
