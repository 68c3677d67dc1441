//! Unit dipole kernel and the forward field operator `A = F^-1 D F`.
//!
//! In k-space the field perturbation from a unit susceptibility source is
//! `D(k) = 1/3 - (p.k)^2 / |k|^2` with `p` the unit main-field direction and
//! `k` the physical frequency coordinate `s(j,M) / (M * v)` per axis, where
//! `s` maps bin index to the signed frequency `j` or `j - M`. The DC bin is
//! set to zero: the quotient is 0/0 there, and a zero DC makes the operator
//! annihilate constants so reconstructions come out mean-free, consistent
//! with background-removed input fields.
//!
//! `D` is real, even, and bounded in `[-2/3, 1/3]`, so `A` is self-adjoint
//! with spectral norm at most 2/3. Application is a circular convolution:
//! no padding is performed here.

use alloc::vec::Vec;

use crate::error::Result;
use crate::fft::{fft3, ifft3_real, Fft3};
use crate::grid::GridSpec;
use crate::volume::{Mask, ScalarVolume};
use crate::Real;

/// Signed DFT frequency index: `j` for `j < M/2`, else `j - M`.
#[inline]
fn signed_index(j: usize, m: usize) -> i64 {
    if (j as u64) < (m as u64).div_ceil(2) {
        j as i64
    } else {
        j as i64 - m as i64
    }
}

/// Precomputed dipole kernel plus the FFT plan for its grid.
pub struct DipoleKernel {
    grid: GridSpec,
    d: Vec<Real>,
    fft: Fft3,
}

impl DipoleKernel {
    /// Build the kernel for a grid (eq. values in unshifted bin order).
    pub fn build(grid: GridSpec) -> Self {
        let [mx, my, mz] = grid.matrix();
        let [vx, vy, vz] = grid.voxel_mm();
        let p = grid.b0_dir();
        let mut d = Vec::with_capacity(grid.len());
        for z in 0..mz {
            let kz = signed_index(z, mz) as f64 / (mz as f64 * vz);
            for y in 0..my {
                let ky = signed_index(y, my) as f64 / (my as f64 * vy);
                for x in 0..mx {
                    let kx = signed_index(x, mx) as f64 / (mx as f64 * vx);
                    let k_sq = kx * kx + ky * ky + kz * kz;
                    let val = if k_sq == 0.0 {
                        0.0
                    } else {
                        let pk = p[0] * kx + p[1] * ky + p[2] * kz;
                        1.0 / 3.0 - (pk * pk) / k_sq
                    };
                    d.push(val as Real);
                }
            }
        }
        // On even axes the Nyquist bin aliases +M/2 and -M/2; with an
        // oblique p the raw formula then disagrees between a bin and its
        // mirror, which would break evenness (and with it self-adjointness
        // and real-valued outputs). Averaging each mirror pair restores the
        // symmetry; bins off the Nyquist planes are already symmetric and
        // keep their exact value.
        for i in 0..d.len() {
            let (x, y, z) = grid.coords(i);
            let m = grid.index((mx - x) % mx, (my - y) % my, (mz - z) % mz);
            if m > i {
                let avg = 0.5 as Real * (d[i] + d[m]);
                d[i] = avg;
                d[m] = avg;
            }
        }
        let fft = Fft3::new(grid.clone());
        DipoleKernel { grid, d, fft }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Kernel values, unshifted DFT layout.
    pub fn values(&self) -> &[Real] {
        &self.d
    }

    /// Kernel as a volume, for dumping to file.
    pub fn to_volume(&self) -> ScalarVolume {
        ScalarVolume::same_data_grid(&self.grid, self.d.clone())
    }

    pub fn fft(&self) -> &Fft3 {
        &self.fft
    }

    /// Apply the forward model `A chi = F^-1 (D . F chi)`.
    pub fn apply(&self, chi: &ScalarVolume) -> Result<ScalarVolume> {
        if chi.grid() != &self.grid {
            return Err(crate::error::Error::GridMismatch { context: "apply_A" });
        }
        let mut spec = fft3(chi, &self.fft);
        for (s, &dk) in spec.data_mut().iter_mut().zip(self.d.iter()) {
            *s *= dk;
        }
        ifft3_real(&spec, &self.fft)
    }
}

/// Squared-L2 data fidelity `|| mask . (A chi - phi) ||_2^2`.
pub fn fidelity_value(
    chi: &ScalarVolume,
    phi: &ScalarVolume,
    kern: &DipoleKernel,
    mask: &Mask,
) -> Result<Real> {
    chi.check_grid(phi, "fidelity")?;
    let mut r = kern.apply(chi)?.sub(phi)?;
    mask.apply(&mut r)?;
    Ok(r.norm_sq())
}

/// Gradient of [`fidelity_value`] with respect to `chi`:
/// `2 A (mask . (A chi - phi))`, using that `A` is self-adjoint.
pub fn fidelity_gradient(
    chi: &ScalarVolume,
    phi: &ScalarVolume,
    kern: &DipoleKernel,
    mask: &Mask,
) -> Result<ScalarVolume> {
    chi.check_grid(phi, "fidelity gradient")?;
    let mut r = kern.apply(chi)?.sub(phi)?;
    mask.apply(&mut r)?;
    let mut g = kern.apply(&r)?;
    g.scale(2.0);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{fd_gradient_volume, max_rel_err_volumes};
    use crate::rng::Rng;

    fn random_volume(grid: &GridSpec, seed: u64) -> ScalarVolume {
        let mut rng = Rng::new(seed);
        let data = (0..grid.len())
            .map(|_| (rng.next_f64() * 2.0 - 1.0) as Real)
            .collect();
        ScalarVolume::from_vec(grid.clone(), data).unwrap()
    }

    #[test]
    fn axial_kernel_reference_bins() {
        let g = GridSpec::isotropic([4, 4, 4]).unwrap();
        let k = DipoleKernel::build(g.clone());
        // on-axis: k = (0,0,0.25) -> 1/3 - 1
        assert!((k.values()[g.index(0, 0, 1)] as f64 + 2.0 / 3.0).abs() < 1e-15);
        // in-plane: p.k = 0
        assert!((k.values()[g.index(1, 0, 0)] as f64 - 1.0 / 3.0).abs() < 1e-15);
        // magic angle: kz^2/|k|^2 = 1/3
        assert!((k.values()[g.index(1, 1, 1)] as f64).abs() < 1e-15);
        // DC convention
        assert_eq!(k.values()[0], 0.0);
    }

    #[test]
    fn anisotropic_kernel_hand_value() {
        // [DERIVED] bin (1,0,1) on v=[1,1,2]: k=(0.25,0,0.125),
        // d = 1/3 - 0.015625/0.078125 = 2/15
        let g = GridSpec::new([4, 4, 4], [1.0, 1.0, 2.0], [0.0, 0.0, 1.0]).unwrap();
        let k = DipoleKernel::build(g.clone());
        let got = k.values()[g.index(1, 0, 1)] as f64;
        assert!((got - 2.0 / 15.0).abs() < 1e-15, "{got}");
    }

    #[test]
    fn kernel_range_and_even_symmetry() {
        for (matrix, voxel, b0) in [
            ([4, 4, 4], [1.0, 1.0, 1.0], [0.0, 0.0, 1.0]),
            ([6, 4, 8], [1.0, 1.0, 2.0], [0.5, 0.5, 0.71]),
            ([5, 3, 7], [0.8, 1.2, 2.0], [0.02, -0.12, 0.99]),
        ] {
            let g = GridSpec::new(matrix, voxel, b0).unwrap();
            let k = DipoleKernel::build(g.clone());
            let [mx, my, mz] = matrix;
            for z in 0..mz {
                for y in 0..my {
                    for x in 0..mx {
                        let v = k.values()[g.index(x, y, z)] as f64;
                        assert!(v >= -2.0 / 3.0 - 1e-12 && v <= 1.0 / 3.0 + 1e-12);
                        let mirrored = k.values()
                            [g.index((mx - x) % mx, (my - y) % my, (mz - z) % mz)]
                            as f64;
                        assert!((v - mirrored).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn constants_are_annihilated() {
        let g = GridSpec::isotropic([4, 4, 4]).unwrap();
        let k = DipoleKernel::build(g.clone());
        let c = ScalarVolume::from_fn(g, |_, _, _| 0.93);
        let out = k.apply(&c).unwrap();
        assert!(out.max_abs() < 1e-12);

        let z = ScalarVolume::zeros(k.grid().clone());
        assert!(k.apply(&z).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn impulse_response_dc_voxel_is_mean_of_kernel() {
        // [DERIVED] A(delta_0)(0) = (1/N) sum_k d_k by the inverse DFT at r=0
        let g = GridSpec::isotropic([4, 4, 4]).unwrap();
        let k = DipoleKernel::build(g.clone());
        let mut imp = ScalarVolume::zeros(g.clone());
        imp.data_mut()[0] = 1.0;
        let out = k.apply(&imp).unwrap();
        let mean: f64 = k.values().iter().map(|&d| d as f64).sum::<f64>() / 64.0;
        assert!((out.data()[0] as f64 - mean).abs() < 1e-12);
    }

    #[test]
    fn self_adjoint_and_bounded() {
        let g = GridSpec::new([8, 8, 8], [1.0, 1.0, 2.0], [0.5, 0.5, 0.71]).unwrap();
        let k = DipoleKernel::build(g.clone());
        for seed in 0..20 {
            let x = random_volume(&g, 2 * seed);
            let y = random_volume(&g, 2 * seed + 1);
            let ax = k.apply(&x).unwrap();
            let ay = k.apply(&y).unwrap();
            let lhs = ax.dot(&y).unwrap() as f64;
            let rhs = x.dot(&ay).unwrap() as f64;
            let bound = 1e-10 * (x.norm() * y.norm()) as f64;
            assert!((lhs - rhs).abs() <= bound, "{lhs} vs {rhs}");
            assert!(ax.norm() <= 2.0 / 3.0 * x.norm() + 1e-12);
        }
    }

    #[test]
    fn fidelity_matches_scalar_loop() {
        // [DERIVED] scalar-loop oracle on random 4^3 data
        let g = GridSpec::isotropic([4, 4, 4]).unwrap();
        let k = DipoleKernel::build(g.clone());
        let chi = random_volume(&g, 7);
        let phi = random_volume(&g, 8);
        let mut mvals = alloc::vec![1.0 as Real; 64];
        for i in 0..64 {
            if i % 3 == 0 {
                mvals[i] = 0.0;
            }
        }
        let mask =
            Mask::from_volume(ScalarVolume::from_vec(g.clone(), mvals.clone()).unwrap()).unwrap();

        let got = fidelity_value(&chi, &phi, &k, &mask).unwrap() as f64;
        let achi = k.apply(&chi).unwrap();
        let mut expect = 0.0f64;
        for i in 0..64 {
            let r = mvals[i] as f64 * (achi.data()[i] as f64 - phi.data()[i] as f64);
            expect += r * r;
        }
        assert!((got - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn fidelity_zero_at_consistent_pair_and_norm_identity() {
        let g = GridSpec::isotropic([4, 4, 4]).unwrap();
        let k = DipoleKernel::build(g.clone());
        let chi = random_volume(&g, 3);
        let phi = k.apply(&chi).unwrap();
        let mask = Mask::all_ones(g.clone());
        let f = fidelity_value(&chi, &phi, &k, &mask).unwrap();
        assert!(f.abs() < 1e-24);
        // gradient vanishes at the optimum
        let grad = fidelity_gradient(&chi, &phi, &k, &mask).unwrap();
        assert!(grad.max_abs() < 1e-12);

        let zero = ScalarVolume::zeros(g);
        let f0 = fidelity_value(&zero, &phi, &k, &mask).unwrap();
        assert!((f0 - phi.norm_sq()).abs() <= 1e-12 * f0.max(1.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        // [DERIVED] finite-difference oracle, step 1e-5, double precision
        let g = GridSpec::isotropic([4, 4, 4]).unwrap();
        let k = DipoleKernel::build(g.clone());
        let chi = random_volume(&g, 21);
        let phi = random_volume(&g, 22);
        let mask = Mask::all_ones(g);
        let analytic = fidelity_gradient(&chi, &phi, &k, &mask).unwrap();
        let numeric = fd_gradient_volume(&chi, 1e-5, |c| {
            fidelity_value(c, &phi, &k, &mask).unwrap()
        });
        let err = max_rel_err_volumes(&analytic, &numeric, 1e-8);
        assert!(err <= 1e-6, "max rel err {err}");
    }

    #[test]
    fn gradient_is_linear_in_chi() {
        let g = GridSpec::isotropic([4, 4, 4]).unwrap();
        let k = DipoleKernel::build(g.clone());
        let mask = Mask::all_ones(g.clone());
        let phi0 = ScalarVolume::zeros(g.clone());
        let a = random_volume(&g, 31);
        let b = random_volume(&g, 32);
        let mut sum = a.clone();
        sum.axpy(1.0, &b).unwrap();
        let gs = fidelity_gradient(&sum, &phi0, &k, &mask).unwrap();
        let mut ga = fidelity_gradient(&a, &phi0, &k, &mask).unwrap();
        let gb = fidelity_gradient(&b, &phi0, &k, &mask).unwrap();
        ga.axpy(1.0, &gb).unwrap();
        for (x, y) in gs.data().iter().zip(ga.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}
