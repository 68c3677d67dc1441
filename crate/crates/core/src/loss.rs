//! Network-update loss: mean absolute error of the physical model plus mean
//! absolute error of its Laplacian, and the exact (sub)gradient of both
//! with respect to `chi_n`.
//!
//! Both terms are means over masked-in voxels, which keeps one learning-rate
//! default valid across grid sizes. The Laplacian is the 7-point stencil
//! with voxel-size scaling and zero (Dirichlet) padding, which makes the
//! operator self-adjoint so its transpose in the gradient is itself.

use crate::dipole::DipoleKernel;
use crate::error::Result;
use crate::volume::{Mask, ScalarVolume};
use crate::Real;

/// One iteration's loss values; `total` is the unweighted sum of the terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub fidelity_mae: Real,
    pub laplacian_mae: Real,
    pub total: Real,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.fidelity_mae.is_finite() && self.laplacian_mae.is_finite() && self.total.is_finite()
    }
}

/// 7-point Laplacian: `sum_axis (v+ - 2v + v-) / voxel_axis^2`, zero outside
/// the volume.
pub fn laplacian(v: &ScalarVolume) -> ScalarVolume {
    let grid = v.grid().clone();
    let [mx, my, mz] = grid.matrix();
    let voxel = grid.voxel_mm();
    let wx = (1.0 / (voxel[0] * voxel[0])) as Real;
    let wy = (1.0 / (voxel[1] * voxel[1])) as Real;
    let wz = (1.0 / (voxel[2] * voxel[2])) as Real;
    let src = v.data();
    let mut out = ScalarVolume::zeros(grid);
    let dst = out.data_mut();
    for z in 0..mz {
        for y in 0..my {
            let row = mx * (y + my * z);
            for x in 0..mx {
                let i = row + x;
                let c = src[i];
                let xm = if x > 0 { src[i - 1] } else { 0.0 };
                let xp = if x + 1 < mx { src[i + 1] } else { 0.0 };
                let ym = if y > 0 { src[i - mx] } else { 0.0 };
                let yp = if y + 1 < my { src[i + mx] } else { 0.0 };
                let zm = if z > 0 { src[i - mx * my] } else { 0.0 };
                let zp = if z + 1 < mz { src[i + mx * my] } else { 0.0 };
                dst[i] = wx * (xp - 2.0 as Real * c + xm)
                    + wy * (yp - 2.0 as Real * c + ym)
                    + wz * (zp - 2.0 as Real * c + zm);
            }
        }
    }
    out
}

fn masked_mean_abs(v: &ScalarVolume, mask: &Mask) -> Real {
    let mut sum: Real = 0.0;
    for (x, m) in v.data().iter().zip(mask.values()) {
        sum += (x * m).abs();
    }
    sum / mask.ones() as Real
}

/// Evaluate the loss at `chi_n`.
pub fn outer_loss(
    chi_n: &ScalarVolume,
    phi: &ScalarVolume,
    kern: &DipoleKernel,
    mask: &Mask,
) -> Result<LossReport> {
    let (report, _residuals) = loss_terms(chi_n, phi, kern, mask)?;
    Ok(report)
}

/// Gradient of [`outer_loss`] with respect to `chi_n`:
/// `(1/N_mask) * [ A(mask.sign(r)) + A(lap(mask.sign(s))) ]` with
/// `sign(0) = 0`, using self-adjointness of `A` and the Laplacian.
pub fn outer_loss_grad(
    chi_n: &ScalarVolume,
    phi: &ScalarVolume,
    kern: &DipoleKernel,
    mask: &Mask,
) -> Result<ScalarVolume> {
    let (_report, grad) = loss_and_grad(chi_n, phi, kern, mask)?;
    Ok(grad)
}

/// Loss and gradient in one pass; shares the forward model application.
pub fn loss_and_grad(
    chi_n: &ScalarVolume,
    phi: &ScalarVolume,
    kern: &DipoleKernel,
    mask: &Mask,
) -> Result<(LossReport, ScalarVolume)> {
    let (report, (r, s)) = loss_terms(chi_n, phi, kern, mask)?;
    let n_mask = mask.ones() as Real;

    let sign_r = ScalarVolume::same_data_grid(
        r.grid(),
        r.data().iter().map(|&v| sgn(v)).collect(),
    );
    let sign_s = ScalarVolume::same_data_grid(
        s.grid(),
        s.data().iter().map(|&v| sgn(v)).collect(),
    );
    // r and s are already masked, so sign(.) is zero outside the mask
    let mut grad = kern.apply(&sign_r)?;
    let lap_sign_s = laplacian(&sign_s);
    grad.axpy(1.0, &kern.apply(&lap_sign_s)?)?;
    grad.scale(1.0 as Real / n_mask);
    Ok((report, grad))
}

#[inline]
fn sgn(v: Real) -> Real {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Shared computation: masked residual `r = mask.(A chi - phi)` and masked
/// Laplacian residual `s = mask.(lap(A chi) - lap(phi))`.
fn loss_terms(
    chi_n: &ScalarVolume,
    phi: &ScalarVolume,
    kern: &DipoleKernel,
    mask: &Mask,
) -> Result<(LossReport, (ScalarVolume, ScalarVolume))> {
    chi_n.check_grid(phi, "outer loss")?;
    let achi = kern.apply(chi_n)?;
    let mut r = achi.sub(phi)?;
    mask.apply(&mut r)?;
    let mut s = laplacian(&achi).sub(&laplacian(phi))?;
    mask.apply(&mut s)?;
    let fidelity_mae = masked_mean_abs(&r, mask);
    let laplacian_mae = masked_mean_abs(&s, mask);
    Ok((
        LossReport { fidelity_mae, laplacian_mae, total: fidelity_mae + laplacian_mae },
        (r, s),
    ))
}
