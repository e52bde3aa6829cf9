//! Weight-surgery staining and locking for small neural networks.
//!
//! The crate plants verifiable detector units ("stains") into trained
//! networks by closed-form weight rewrites, synthesizes the trigger
//! inputs that fire them, couples network behavior to a removable patch
//! ("locks"), and certifies false-positive rates of the detectors with
//! analytic bounds and Monte-Carlo checks.
//!
//! * [`tensor`] / [`nn`] — dense/conv evaluation engine with exact
//!   gradients (f32 storage, f64 accumulation).
//! * [`stain`] — detector implants and message schemas.
//! * [`trigger`] — trigger synthesis and input-plane patches.
//! * [`lock`] — behavior locks riding on a stained channel.
//! * [`bounds`] — false-positive certificates.
//! * [`harness`] — synthetic datasets, training, evaluation, pruning,
//!   and Monte-Carlo drivers used to exercise all of the above.

pub mod bounds;
pub mod error;
pub mod harness;
pub mod io;
pub mod lock;
pub mod math;
pub mod models;
pub mod nn;
pub mod rng;
pub mod stain;
pub mod tensor;
pub mod trigger;

pub use error::{Result, SealError};
pub use nn::{Layer, Network};
pub use rng::Rng;
pub use tensor::Tensor;

/// Stamped into run manifests so outputs can be traced to a build.
pub const TOOLKIT_VERSION: &str = concat!("seal/", env!("CARGO_PKG_VERSION"));

/// On-disk format generation for every container this crate writes.
pub const FORMAT_VERSION: &str = "1";

/// Identifier of the deterministic RNG pipeline (bit-for-bit stable
/// across platforms); stored in model files and checked on load.
pub const RNG_ALGORITHM: &str = "xoshiro256pp-polar-v1";
