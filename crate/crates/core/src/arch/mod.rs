//! Model family: block stacks, parameter accounting and ratio planning.

mod attention;
mod model;
mod params;
mod plan;
mod spec;
mod variants;

pub use attention::{Attention, ROPE_BASE};
pub use model::{Block, Layer, Model, NORM_EPS, UNEMBED_INIT};
pub use params::{count_params, mamba_counts, param_report, BlockReport, ParamReport};
pub use plan::{default_expert_product, plan_ratio, RatioPlan};
pub use spec::{ArchKind, ModelSpec, HEAD_WIDTH};
pub use variants::{enumerate_variants, inner_masks, INNER_EXPERTS_ALL, INNER_EXPERTS_EVERY_OTHER};
