//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every op of a forward pass; [`Tape::backward`] sweeps
//! it in reverse and returns [`Gradients`]. Parameters live in a
//! [`ParamStore`] outside the tape and are bound per step with
//! [`Tape::param`], so the tape can be thrown away after each update.
//!
//! ```
//! use scenflow_tensor::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.constant(&[2], vec![1.0, -2.0]).unwrap();
//! let loss = x.sum_squares();
//! assert_eq!(loss.item(), 5.0);
//! ```

mod adam;
mod backward;
mod error;
pub mod gradcheck;
pub mod nn;
mod ops;
mod param;
mod tape;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use backward::Gradients;
pub use error::{Result, TensorError};
pub use param::{ParamEntry, ParamId, ParamStore};
pub use tape::{Tape, Var};

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}
