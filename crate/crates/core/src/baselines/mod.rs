//! Comparison methods: top-k weight gradients in the original basis
//! (MeProp) and low-rank adapters (LoRA), plus trainable-parameter counts.

mod count;
mod lora;
mod meprop;

pub use count::{trainable_param_count, ModelInventory, ParamCount};
pub use lora::{LoraAdapter, LoraGrads, LoraLayer, LORA_INIT_STD};
pub use meprop::{meprop_backward, MePropGrads, MePropLayer};
