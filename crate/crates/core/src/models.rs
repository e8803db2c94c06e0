//! Example workloads: the sequential MLP training step and the shipped
//! hand-written programs.

use crate::ir::{DType, IrModule};
use crate::text::{parse_module, TextError};
use crate::transforms::{emit_mlp, DistConfig};

/// Shape of a bias-free MLP with square layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub n_layer: usize,
    pub d_model: usize,
    pub batch_size: usize,
    pub dtype: DType,
    /// SGD learning rate.
    pub lr: f64,
}

impl MlpSpec {
    pub fn new(n_layer: usize, d_model: usize, batch_size: usize) -> MlpSpec {
        MlpSpec {
            n_layer,
            d_model,
            batch_size,
            dtype: DType::F32,
            lr: 0.01,
        }
    }

    pub fn with_dtype(mut self, dtype: DType) -> MlpSpec {
        self.dtype = dtype;
        self
    }

    pub fn with_lr(mut self, lr: f64) -> MlpSpec {
        self.lr = lr;
        self
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_layer == 0 {
            v.push("n_layer must be at least 1".to_string());
        }
        if self.d_model == 0 {
            v.push("d_model must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            v.push("batch size must be at least 1".to_string());
        }
        if !self.dtype.is_float() {
            v.push(format!("dtype {} is not a float type", self.dtype.name()));
        }
        if !self.lr.is_finite() {
            v.push(format!("learning rate {} is not finite", self.lr));
        }
        v
    }

    /// `n_layer · d_model²`.
    pub fn param_count(&self) -> u64 {
        self.n_layer as u64 * (self.d_model as u64).pow(2)
    }

    pub fn param_bytes(&self) -> u64 {
        self.param_count() * self.dtype.width() as u64
    }
}

/// Sequential training step on device 0: forward through `n_layer`
/// Gemm+Relu layers, the loss gradient, the backward chain and one SGD
/// update per weight. Parameters are `w1..wL, x, y`; the updated weights are
/// returned.
///
/// # Panics
///
/// If `spec` is invalid (see [`MlpSpec::violations`]).
pub fn build_mlp(spec: &MlpSpec) -> IrModule {
    match emit_mlp(spec, &DistConfig::sequential()) {
        Ok(m) => m,
        Err(e) => panic!("invalid MLP spec: {e}"),
    }
}

/// Pipeline-parallel 2-layer MLP over devices 1 and 2.
pub const MLP_PP: &str = include_str!("../programs/mlp_pp.dir");
/// `MLP_PP` with the `%p_1` and `%ar_2` lines swapped.
pub const MLP_PP_SWAPPED: &str = include_str!("../programs/mlp_pp_swapped.dir");
/// The same step without distribution, on device 0.
pub const MLP: &str = include_str!("../programs/mlp.dir");
/// Sequential step recomputing the first activation in the backward pass.
pub const MLP_CHECKPOINTING: &str = include_str!("../programs/mlp_checkpointing.dir");
/// Parameters and gradients partitioned across devices 1 and 2.
pub const MLP_ZERO: &str = include_str!("../programs/mlp_zero.dir");
/// Dynamic reshape with shapes from a GPT-2 attention block.
pub const RESHAPE: &str = include_str!("../programs/reshape.dir");

/// `(file stem, source)` of every shipped program.
pub const SHIPPED_SOURCES: &[(&str, &str)] = &[
    ("mlp_pp", MLP_PP),
    ("mlp_pp_swapped", MLP_PP_SWAPPED),
    ("mlp", MLP),
    ("mlp_checkpointing", MLP_CHECKPOINTING),
    ("mlp_zero", MLP_ZERO),
    ("reshape", RESHAPE),
];

pub fn shipped(name: &str) -> Option<IrModule> {
    SHIPPED_SOURCES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, src)| parse_module(src).expect("shipped program is valid"))
}

/// Every shipped program, parsed and validated.
pub fn shipped_examples() -> Result<Vec<(String, IrModule)>, TextError> {
    SHIPPED_SOURCES
        .iter()
        .map(|(n, src)| Ok((n.to_string(), parse_module(src)?)))
        .collect()
}
