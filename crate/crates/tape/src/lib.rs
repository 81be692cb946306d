//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; a
//! single reverse sweep then produces gradients for every bound parameter.
//! Tapes are cheap and single-use: build one per example (or batch), call
//! [`Tape::backward`], and feed the resulting [`Gradients`] to an optimizer.
//!
//! ```
//! use dialogeval_tape::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::row_vector(vec![2.0, -1.0]));
//! let mut tape = Tape::new();
//! let x = tape.param(&store, w, true);
//! let sq = tape.mul(x, x);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss);
//! assert_eq!(grads.get(w).unwrap().data(), &[4.0, -2.0]);
//! ```

pub mod numeric;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{Bindings, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed parameter data: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}
