//! Dense f64 tensors, a reverse-mode tape, GRU cells, and Adam.

pub mod gradcheck;
pub mod optim;
pub mod rnn;
pub mod tape;
pub mod tensor;

pub use optim::{AdamConfig, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::{Tensor, TensorError};
