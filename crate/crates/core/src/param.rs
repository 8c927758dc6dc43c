//! Named trainable buffers and the visitor used to enumerate them.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::tensor::{Element, Tensor};

/// What a parameter is for, as far as accounting is concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Embedding,
    Unembedding,
    /// Used for every token.
    Dense,
    /// One expert of routed bank `bank`.
    Expert {
        bank: usize,
        expert: usize,
    },
}

static NEXT_KEY: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    pub role: Role,
    key: usize,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay: bool) -> Self {
        Param {
            name: name.into(),
            value,
            decay,
            role: Role::Dense,
            key: NEXT_KEY.fetch_add(1, Ordering::Relaxed),
        }
    }

    /// Weight matrix `[fan_in, fan_out]` drawn from U(−1/√fan_in, 1/√fan_in).
    pub fn linear(
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::uniform(name, vec![fan_in, fan_out], bound, rng)
    }

    pub fn uniform(
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let value = Tensor::from_fn(shape, |_| T::c(rng.gen_range(-bound..=bound)));
        Self::new(name, value, true)
    }

    pub fn ones(name: impl Into<String>, len: usize) -> Self {
        Self::new(name, Tensor::full(vec![len], T::one()), false)
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    /// Process-unique identity used to bind the parameter on a graph and to
    /// look up its gradient.
    pub fn key(&self) -> usize {
        self.key
    }
}

/// Anything that owns parameters.
pub trait Module<T: Element> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Number of scalars across all owned buffers, by enumeration.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.numel());
        n
    }

    /// Prefixes every owned parameter name.
    fn prefix_names(&mut self, prefix: &str) {
        self.visit_mut(&mut |p| p.name = format!("{prefix}.{}", p.name));
    }
}
