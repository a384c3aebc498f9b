//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation as it is evaluated (define-by-run), so
//! the recorded graph can change from one call to the next. Gradients are
//! available with respect to any leaf, which covers both trainable weights and
//! network inputs.
//!
//! ```
//! use egcbf_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum(sq);
//! let g = tape.grad(y, &[x]).unwrap();
//! assert_eq!(g[0].data(), &[2.0, 4.0]);
//! ```

pub mod gradcheck;
mod ops;
mod scalar;
mod tape;
mod tensor;

pub use ops::Unary;
pub use scalar::Scalar;
pub use tape::{Tape, TapeError, Var};
pub use tensor::Tensor;
