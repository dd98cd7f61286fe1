//! Core numerics for training networks that survive magnitude pruning.
//!
//! Everything in this crate is pure computation over in-memory values and
//! builds without `std` (an allocator is required). File formats, the
//! training harness and the command line live in the `sparsekit` crate.
//!
//! Module map:
//!
//! * [`tensor`]: dense row-major `f64` arrays, matmul and convolution.
//! * [`rng`]: the counter-based generator every stochastic op draws from.
//! * [`network`]: layer stack, forward/backward, SGD and the L1 penalty.
//! * [`targeting`]: candidate selection and masks for targeted dropout,
//!   plus ramping and fixed-per-filter schedules.
//! * [`pruning`]: post hoc magnitude pruning, random pruning and
//!   sparsity accounting.
//! * [`analysis`]: Hessian-vector products, the second-order loss change
//!   estimate and the weight/Hessian dependence matrix.
//! * [`data`]: in-memory datasets, synthetic blobs and augmentation.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod analysis;
pub mod data;
pub mod error;
pub mod network;
pub mod pruning;
pub mod rng;
pub mod targeting;
pub mod tensor;

mod select;

pub use error::{Error, Result};
pub use network::{Architecture, Gradients, Network};
pub use rng::Rng;
pub use tensor::Tensor;

/// Which structure a mask or pruning criterion acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Granularity {
    /// Individual weights, ranked by `|w|` within their column.
    Weight,
    /// Whole columns (output units / filters), ranked by L2 norm.
    Unit,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Weight => "weight",
            Granularity::Unit => "unit",
        }
    }
}

impl core::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(Granularity::Weight),
            "unit" => Ok(Granularity::Unit),
            other => Err(Error::Config(alloc::format!(
                "unknown granularity `{other}` (expected weight|unit)"
            ))),
        }
    }
}

/// Number of elements removed when a fraction `f` of `n` items is dropped:
/// `ceil(f * n)`, with a small tolerance so that products like `0.7 * 10`
/// that land a hair above an integer do not round up an extra element.
pub fn drop_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let k = libm::ceil(raw - 1e-9);
    if k <= 0.0 {
        0
    } else if k >= n as f64 {
        n
    } else {
        k as usize
    }
}
