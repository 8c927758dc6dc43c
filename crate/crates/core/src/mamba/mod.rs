//! Selective state-space block and its linear-recurrence kernels.

mod config;
mod layer;
pub(crate) mod scan;

pub use config::{mamba_param_count, MambaConfig};
pub use layer::{
    selective_scan_parallel, selective_scan_sequential, Discretized, MambaLayer, Projection,
    ProjectionSlot,
};
pub use scan::ScanElement;
