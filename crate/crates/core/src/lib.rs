//! Allocation-only core of the FedSpar uplink codec and federated-learning
//! simulator.
//!
//! The crate is `no_std` (it needs `alloc`) so the codec can run anywhere a
//! device can hold a model update in memory. Everything that touches files,
//! threads or clocks lives in the `fedspar` companion crate.
//!
//! Layout:
//!
//! * [`quantizer`]: Lloyd-Max codebooks for the standard Gaussian and their
//!   Bussgang constants.
//! * [`transform`]: seeded Haar-distributed orthogonal matrices.
//! * [`position`] and [`bits`]: combinatorial support coding and the packed
//!   bit stream that carries a payload.
//! * [`codec`]: compress / reconstruct, including parallel sub-vector mode.
//! * [`param_opt`]: choice of sparsification and quantization levels under a
//!   bit budget.
//! * [`fl`]: device and server rounds with error feedback.
//! * [`task`], [`mlp`], [`linreg`], [`data`], [`capacity`]: learning tasks,
//!   data partitioning and the wireless capacity model.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod bits;
pub mod capacity;
pub mod codec;
pub mod data;
pub mod fl;
pub mod linreg;
pub mod math;
pub mod mlp;
pub mod param_opt;
pub mod position;
pub mod quantizer;
pub mod rng;
pub mod task;
pub mod transform;

pub use codec::{CodecContext, CodecError, CompressedUpdate, PayloadHeader, SubvectorSpec, ValueCoding};
pub use quantizer::{Quantizer, QuantizerBank, DEFAULT_Q_MAX};
pub use rng::{SeedContext, SeedScope};
pub use transform::{OrthoTransform, TransformSource};
