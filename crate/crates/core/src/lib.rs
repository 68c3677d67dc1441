//! Training-free QSM dipole inversion.
//!
//! The measured local field `phi` relates to tissue susceptibility `chi`
//! through a k-space multiplication with the unit dipole kernel,
//! `phi = F^-1 D F chi`. Inverting that operator is ill-posed (D vanishes on
//! the magic-angle cone), so this crate couples two untrained pieces:
//!
//! * a small encoder-decoder network ([`unet`]) that maps the field to an
//!   interim susceptibility estimate `chi_0`, and
//! * a data-fidelity gradient-descent loop ([`dfo`]) that refines `chi_0`
//!   into `chi_n` against the physical model, with an exact closed-form
//!   vector-Jacobian product so the network update backpropagates through
//!   the unrolled steps without storing intermediates.
//!
//! [`recon`] orchestrates the full loop (plus pure-DIP and pure-DFO baseline
//! modes), [`phantom`] builds synthetic evaluation volumes, and [`metrics`]
//! scores reconstructions. Everything is deterministic for a fixed seed:
//! the only randomness source is the [`rng`] module and all parallel work
//! splits over independent outputs, so results are bit-identical for any
//! thread count.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature only adds conveniences such as `std::error::Error` impls and
//! wall-clock timing in the reconstruction log. File formats and the
//! command-line front end live in the companion `modip-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod check;
pub mod dfo;
pub mod dipole;
pub mod error;
pub mod fft;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod recon;
pub mod rng;
pub mod unet;
pub mod volume;

mod fmath;
mod parallel;

/// Working scalar type; `f64` unless the `single` feature is enabled.
#[cfg(not(feature = "single"))]
pub type Real = f64;
#[cfg(feature = "single")]
pub type Real = f32;

/// Name of the working precision, as recorded in run manifests.
pub const PRECISION: &str = if cfg!(feature = "single") { "f32" } else { "f64" };

pub use dfo::DfoConfig;
pub use dipole::DipoleKernel;
pub use error::{Error, Result};
pub use grid::GridSpec;
pub use loss::LossReport;
pub use optim::{AdamConfig, AdamState};
pub use recon::{ReconConfig, ReconMode, ReconOutput};
pub use unet::{NetworkConfig, ParameterSet};
pub use volume::{ComplexSpectrum, Mask, ScalarVolume};
