//! Dense AdamW and the masked (lazy) Adam used for sparse weight gradients.

mod adam;
mod masked;
mod report;

pub use adam::{adamw_step, adamw_step_slice, AdamConfig, AdamState};
pub use masked::{sparse_adam_step, MaskedAdamFlags, MaskedAdamState, MomentRecord, MASKED_RECORD_BYTES};
pub use report::{optimizer_memory_report, MemoryLine, OptimizerMemoryReport, StateRef};
