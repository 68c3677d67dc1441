//! Quantitative evaluation of reconstructions against ground truth.

use crate::error::{Error, Result};
use crate::fmath;
use crate::volume::{Mask, ScalarVolume};
use crate::Real;

/// Normalized root-mean-square error over a region:
/// `||region.(pred - truth)||_2 / ||region.truth||_2`.
///
/// The normalizer is the masked L2 norm of the truth (the common QSM
/// challenge convention); a truth that is identically zero inside the
/// region leaves the ratio undefined and is an error.
pub fn nrmse(pred: &ScalarVolume, truth: &ScalarVolume, region: &Mask) -> Result<Real> {
    pred.check_grid(truth, "nrmse")?;
    let mut diff = pred.sub(truth)?;
    region.apply(&mut diff)?;
    let mut t = truth.clone();
    region.apply(&mut t)?;
    let denom = t.norm_sq();
    if denom == 0.0 {
        return Err(Error::ZeroTruthRegion);
    }
    Ok(fmath::sqrt(diff.norm_sq() / denom))
}

/// Population mean, standard deviation and voxel count over a region.
pub fn roi_stats(vol: &ScalarVolume, region: &Mask) -> Result<(Real, Real, usize)> {
    vol.check_grid(region.as_volume(), "roi_stats")?;
    let n = region.ones();
    let mut sum: Real = 0.0;
    for (v, m) in vol.data().iter().zip(region.values()) {
        sum += v * m;
    }
    let mean = sum / n as Real;
    let mut ss: Real = 0.0;
    for (v, m) in vol.data().iter().zip(region.values()) {
        if *m == 1.0 {
            let d = v - mean;
            ss += d * d;
        }
    }
    Ok((mean, fmath::sqrt(ss / n as Real), n))
}
