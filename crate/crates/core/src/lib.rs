//! Contextual feedback loops for feed-forward networks.
//!
//! A network's output `y` is summarized into a context vector `z = g(y)` and
//! fed back into earlier layers through adapters `ψ^(l)`; repeating this for
//! `T` iterations refines the prediction. The crate contains the tensor and
//! autodiff core, two backbones, the adapter family, the refinement loop,
//! unrolled training, contraction and cost diagnostics, and an experiment
//! harness driven by the `cfl` binary.

pub mod backbone;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod feedback;
pub mod graph;
pub mod harness;
pub mod model;
pub mod params;
pub mod refine;
pub mod tensor;
pub mod training;

pub use error::{CflError, Result};
pub use graph::{Activation, FlopTag, Graph, NodeId};
pub use model::{CflModel, Input, ModelSpec, Session};
pub use params::{ParamGroup, ParamId, ParamRole, ParamStore};
pub use refine::{refine, refine_early_exit, Mode, ModelState, RefinementTrace, StopReason};
pub use tensor::{Real, Tensor};
