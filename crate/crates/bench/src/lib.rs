//! Shared fixtures for the benchmarks.

use moemamba::arch::{ArchKind, ModelSpec};
use moemamba::train::{encode, TrainConfig};
use moemamba::{DType, Element, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random<T: Element>(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor<T> {
    Tensor::<f64>::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi)).cast::<T>()
}

/// Discretized scan inputs `(abar, bbar_u, c, d, u)` for batch `b`, length `l`,
/// `ed` channels and `ds` states.
pub struct ScanInputs<T> {
    pub abar: Tensor<T>,
    pub bbar_u: Tensor<T>,
    pub c: Tensor<T>,
    pub d: Tensor<T>,
    pub u: Tensor<T>,
}

pub fn scan_inputs<T: Element>(
    b: usize,
    l: usize,
    ed: usize,
    ds: usize,
    seed: u64,
) -> ScanInputs<T> {
    let mut r = rng(seed);
    ScanInputs {
        abar: random(&[b, l, ed, ds], 0.5, 1.0, &mut r),
        bbar_u: random(&[b, l, ed, ds], -1.0, 1.0, &mut r),
        c: random(&[b, l, ds], -1.0, 1.0, &mut r),
        d: random(&[ed], -1.0, 1.0, &mut r),
        u: random(&[b, l, ed], -1.0, 1.0, &mut r),
    }
}

pub fn tokens(n: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(0..256)).collect()
}

/// A small in-memory corpus for trainer steps.
pub fn corpus() -> Vec<usize> {
    encode(
        "Call me Ishmael. Some years ago, never mind how long precisely. "
            .repeat(400)
            .as_bytes(),
    )
}

/// The desk-scale training setup at a given architecture.
pub fn desk_config(kind: ArchKind) -> TrainConfig {
    let mut spec = ModelSpec::new(kind, 64, 2);
    if spec.has_moe() {
        spec.n_experts = 4;
    }
    let mut c = TrainConfig::new(spec, "in-memory");
    c.context_length = 128;
    c.batch_size = 16;
    c.dtype = DType::F32;
    c
}
