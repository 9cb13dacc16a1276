//! Scalar abstraction for the numeric routines.
//!
//! Everything numerical in this crate is written against [`Real`], a thin
//! bundle of `num-traits` bounds satisfied by `f32` and `f64`. The harness
//! and the file formats use `f64`; the generic bound exists so the math
//! kernels can be reused at other precisions without code changes.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar usable by every numeric routine in the crate.
///
/// The `FromPrimitive`/`ToPrimitive` bounds let code convert counts and
/// grid sizes without sprinkling `as` casts; `Sum` enables idiomatic
/// iterator reductions; `Send + Sync` keeps the types usable from the
/// parallel experiment harness; the serde bounds let report types carry
/// scalars without per-struct bound plumbing.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum<Self>
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts a `usize` count, panicking only if the value cannot be
    /// represented at all (never the case for the sizes this crate sees).
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    /// Converts a plain `f64` constant such as a tolerance or grid step.
    fn from_config(x: f64) -> Self {
        Self::from_f64(x).expect("constant representable in scalar type")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Sum<T>
        + Debug
        + Display
        + Serialize
        + DeserializeOwned
        + Send
        + Sync
        + 'static
{
}
