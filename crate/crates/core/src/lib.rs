//! Modality-aware sparse transformer language modeling at desk scale.
//!
//! Width sparsity comes from per-modality expert groups with expert-choice
//! routing; depth sparsity from learned token skipping. Auxiliary routers
//! restore causal inference, upcycling grows a multi-expert model from a
//! one-expert-per-modality seed, and the analysis tools compare
//! architectures at matched compute.

pub mod analysis;
pub mod autodiff;
pub mod aux_router;
pub mod balance;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod depth;
pub mod error;
pub mod model;
pub mod moma;
pub mod optim;
pub mod params;
pub mod routing;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod upcycle;

pub use autodiff::{Category, Grads, OpCounter, RopeTable, Tape, Var};
pub use config::{Arch, BaseDims, ModelConfig};
pub use error::{Error, Result};
pub use model::{ForwardOptions, LossBreakdown, Mode, Model};
pub use scalar::{DType, Scalar};
pub use tensor::{top_k_indices, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
