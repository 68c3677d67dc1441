//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Grid construction rejected (matrix/voxel/B0 constraints).
    InvalidGrid(String),
    /// Two operands live on different grids.
    GridMismatch { context: &'static str },
    /// Non-finite values where finite data is required.
    NonFinite { context: &'static str },
    /// Inverse FFT of a supposedly real field left too much imaginary part;
    /// signals a broken operator chain.
    ImaginaryResidue { max_im: f64, tol: f64 },
    /// Operation needs at least one masked-in voxel.
    EmptyMask,
    /// NRMSE normalization undefined: truth is identically zero in the region.
    ZeroTruthRegion,
    /// Configuration value out of its admissible range.
    InvalidConfig(String),
    /// Reconstruction produced a non-finite loss at the given iteration.
    Divergence { iter: usize },
    /// Optimizer received a non-finite gradient; the step was skipped.
    NonFiniteGradient { tensor: String },
    /// Shape disagreement between parameter sets / gradients.
    ShapeMismatch { context: &'static str },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidGrid(msg) => write!(f, "invalid grid: {msg}"),
            Error::GridMismatch { context } => write!(f, "grid mismatch in {context}"),
            Error::NonFinite { context } => write!(f, "non-finite values in {context}"),
            Error::ImaginaryResidue { max_im, tol } => write!(
                f,
                "inverse FFT imaginary residue {max_im:.3e} exceeds {tol:.3e}; operator chain is broken"
            ),
            Error::EmptyMask => write!(f, "mask selects no voxels"),
            Error::ZeroTruthRegion => {
                write!(f, "NRMSE undefined: truth is zero everywhere in the region")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Divergence { iter } => {
                write!(f, "non-finite loss at iteration {iter}; run aborted")
            }
            Error::NonFiniteGradient { tensor } => {
                write!(f, "non-finite gradient for '{tensor}'; step skipped")
            }
            Error::ShapeMismatch { context } => write!(f, "shape mismatch in {context}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
