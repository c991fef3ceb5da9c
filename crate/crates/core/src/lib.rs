//! Core of a state-space joint source-channel image codec.
//!
//! Everything runs in `f64` on a small reverse-mode tape ([`graph::Graph`]).
//! Parameters live in a [`params::ParamStore`] and are bound into a fresh
//! graph for every forward pass.

pub mod channel;
pub mod codec;
pub mod csi;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod params;
pub mod ssm;
pub mod tensor;

pub use channel::{ChannelKind, ChannelRealization, ChannelSignal};
pub use codec::{CodecError, CsiMode, JsccModel, ModelConfig};
pub use graph::{Graph, Var};
pub use params::{Bindings, ParamId, ParamStore};
pub use tensor::{Tensor, TensorError};
