//! Reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP, REL_ERR_FLOOR};
pub use graph::{AttentionLayout, Gradients, Graph, NodeId, OpKind, LAYER_NORM_EPS};
pub use params::{ParamId, ParamStore, Parameter};
