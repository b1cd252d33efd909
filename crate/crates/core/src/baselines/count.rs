use serde::Serialize;

use crate::autonet::ModelDims;
use crate::harness::Method;
use crate::sparse::top_k_count;

/// Parameter inventory of a model whose MLP blocks are `d → h → d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModelInventory {
    pub name: String,
    pub n_blocks: usize,
    pub d: usize,
    pub h: usize,
    /// Parameters outside the MLP blocks.
    pub other_params: u64,
}

impl ModelInventory {
    /// Toy model: the classifier head is the only non-MLP part.
    pub fn toy(dims: &ModelDims) -> Self {
        ModelInventory {
            name: "toy".into(),
            n_blocks: dims.n_blocks,
            d: dims.d,
            h: dims.h,
            other_params: (dims.d * dims.classes + dims.classes) as u64,
        }
    }

    /// BERT-base: 12 blocks, 768 ↔ 3072, 30,522-token vocabulary,
    /// 512 positions, 2 segment types, pooler included.
    pub fn bert_base() -> Self {
        let (d, h, blocks, vocab, positions, segments) = (768u64, 3072u64, 12u64, 30_522u64, 512u64, 2u64);
        let layer_norm = 2 * d;
        let embeddings = (vocab + positions + segments) * d + layer_norm;
        let attention = 4 * (d * d + d) + layer_norm;
        let per_block = attention + layer_norm;
        let pooler = d * d + d;
        ModelInventory {
            name: "bert-base".into(),
            n_blocks: blocks as usize,
            d: d as usize,
            h: h as usize,
            other_params: embeddings + blocks * per_block + pooler,
        }
    }

    /// Weights plus biases of both MLP linears across all blocks.
    pub fn mlp_params(&self) -> u64 {
        let (d, h) = (self.d as u64, self.h as u64);
        self.n_blocks as u64 * (2 * d * h + d + h)
    }

    pub fn total_params(&self) -> u64 {
        self.mlp_params() + self.other_params
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub method: Method,
    /// Trainable weight entries in the MLP linears.
    pub trainable_weights: u64,
    /// Trainable MLP biases (dense for every method except LoRA).
    pub trainable_biases: u64,
    pub mlp_params: u64,
    pub total_params: u64,
    pub trainable_fraction_of_mlp: f64,
    pub mlp_fraction_of_total: f64,
}

/// Exact trainable counts for the MLP linears. `fraction` is `ρ` for the
/// top-k methods, `rank` the LoRA rank. The classifier head is not counted.
pub fn trainable_param_count(
    method: Method,
    fraction: f64,
    rank: usize,
    model: &ModelInventory,
) -> ParamCount {
    let (d, h) = (model.d, model.h);
    let blocks = model.n_blocks as u64;
    let per_block_weights = match method {
        Method::Regular => 2 * (d * h) as u64,
        Method::SparsegradSd | Method::SparsegradReg | Method::Meprop => 2 * top_k_count(fraction, d * h) as u64,
        Method::Lora => 2 * (rank * (d + h)) as u64,
    };
    let per_block_biases = match method {
        Method::Lora => 0,
        _ => (d + h) as u64,
    };
    let trainable_weights = blocks * per_block_weights;
    let mlp_params = model.mlp_params();
    ParamCount {
        method,
        trainable_weights,
        trainable_biases: blocks * per_block_biases,
        mlp_params,
        total_params: model.total_params(),
        trainable_fraction_of_mlp: trainable_weights as f64 / mlp_params as f64,
        mlp_fraction_of_total: mlp_params as f64 / model.total_params() as f64,
    }
}
