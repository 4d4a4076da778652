//! Dense f64 tensors with a reverse-mode autodiff tape, MLP building blocks,
//! positional encoding, an Adam optimizer, and a binary checkpoint container.
//!
//! The tape records batched matrix primitives (everything is a `rows x cols`
//! matrix; scalars are `1 x 1`). A forward pass appends nodes, `backward`
//! replays them once in reverse. Tapes are cheap and short-lived: training
//! builds one per batch chunk and throws it away.

pub mod checkpoint;
pub mod encoding;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use encoding::{positional_encode, positional_encode_with_jacobian};
pub use mlp::{Activation, MlpParams};
pub use optim::AdamState;
pub use params::{ParamRef, ParamSet};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
