//! Independent numerical oracles and self-check suites.
//!
//! Everything here recomputes results by a route the production code never
//! takes (direct DFT sums, dense matrices, central differences), so the test
//! suites and the `gradcheck` command can compare the fast implementations
//! against slow-but-obvious references.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex;

use crate::dfo::{dfo_run, dfo_vjp, DfoConfig};
use crate::dipole::{fidelity_gradient, fidelity_value, DipoleKernel};
use crate::grid::GridSpec;
use crate::loss::{laplacian, outer_loss, outer_loss_grad};
use crate::rng::Rng;
use crate::unet::{backward, forward, init_params, NetworkConfig, ParameterSet};
use crate::volume::{Mask, ScalarVolume};
use crate::Real;

/// Direct O(N^2) 3D DFT sum in f64, unshifted bin order, forward unscaled.
/// Matches the `fft3` convention and nothing of its implementation.
pub fn naive_dft3(v: &ScalarVolume) -> Vec<Complex<f64>> {
    let [mx, my, mz] = v.grid().matrix();
    let n = v.grid().len();
    let mut out = vec![Complex::new(0.0f64, 0.0); n];
    let tau = 2.0 * core::f64::consts::PI;
    for kz in 0..mz {
        for ky in 0..my {
            for kx in 0..mx {
                let mut acc = Complex::new(0.0f64, 0.0);
                for z in 0..mz {
                    for y in 0..my {
                        for x in 0..mx {
                            let phase = -tau
                                * ((kx * x) as f64 / mx as f64
                                    + (ky * y) as f64 / my as f64
                                    + (kz * z) as f64 / mz as f64);
                            let val = v.at(x, y, z) as f64;
                            acc += Complex::new(
                                val * libm::cos(phase),
                                val * libm::sin(phase),
                            );
                        }
                    }
                }
                out[v.grid().index(kx, ky, kz)] = acc;
            }
        }
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(floor))
}

/// Central-difference gradient of a scalar functional of a volume.
pub fn fd_gradient_volume(
    at: &ScalarVolume,
    step: Real,
    mut f: impl FnMut(&ScalarVolume) -> Real,
) -> ScalarVolume {
    let mut grad = ScalarVolume::zeros(at.grid().clone());
    let mut probe = at.clone();
    for i in 0..at.data().len() {
        let orig = at.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 as Real * step);
    }
    grad
}

/// Worst relative disagreement between two gradient volumes.
pub fn max_rel_err_volumes(a: &ScalarVolume, b: &ScalarVolume, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x as f64, y as f64, floor))
        .fold(0.0, f64::max)
}

/// Outcome of one self-check suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

fn random_volume(grid: &GridSpec, seed: u64) -> ScalarVolume {
    let mut rng = Rng::new(seed);
    let data = (0..grid.len())
        .map(|_| (rng.next_f64() * 2.0 - 1.0) as Real)
        .collect();
    ScalarVolume::from_vec(grid.clone(), data).expect("finite draws")
}

/// Central differences against the squared-L2 fidelity gradient.
pub fn check_fidelity_gradient(size: usize, seed: u64) -> SuiteReport {
    let g = GridSpec::isotropic([size; 3]).expect("grid");
    let kern = DipoleKernel::build(g.clone());
    let mask = Mask::all_ones(g.clone());
    let chi = random_volume(&g, seed);
    let phi = random_volume(&g, seed.wrapping_add(1));
    let analytic = fidelity_gradient(&chi, &phi, &kern, &mask).expect("gradient");
    let numeric = fd_gradient_volume(&chi, 1e-5, |c| {
        fidelity_value(c, &phi, &kern, &mask).expect("value")
    });
    SuiteReport {
        name: "fidelity gradient vs central differences".into(),
        max_rel_err: max_rel_err_volumes(&analytic, &numeric, 1e-8),
        tolerance: 1e-6,
    }
}

/// Directional central differences against the network-update loss
/// gradient, probing away from the absolute-value kinks.
pub fn check_outer_loss_gradient(size: usize, seed: u64) -> SuiteReport {
    let g = GridSpec::isotropic([size; 3]).expect("grid");
    let kern = DipoleKernel::build(g.clone());
    let mask = Mask::all_ones(g.clone());
    let chi = random_volume(&g, seed);
    let phi = random_volume(&g, seed.wrapping_add(1));
    let analytic = outer_loss_grad(&chi, &phi, &kern, &mask).expect("gradient");
    let gnorm = analytic.norm() as f64;
    let h = 1e-8;

    let mut worst = 0.0f64;
    let mut dirs = vec![{
        let mut d = analytic.clone();
        d.scale(1.0 as Real / analytic.norm());
        d
    }];
    for k in 0..8u64 {
        let mut u = random_volume(&g, seed.wrapping_add(100 + k));
        u.scale(1.0 as Real / u.norm());
        dirs.push(u);
    }
    for u in &dirs {
        // skip probes that could cross a kink inside the interval
        let au = kern.apply(u).expect("apply");
        if h * au.max_abs() as f64 > 1e-7 || h * laplacian(&au).max_abs() as f64 > 1e-7 {
            continue;
        }
        let mut plus = chi.clone();
        plus.axpy(h as Real, u).expect("axpy");
        let mut minus = chi.clone();
        minus.axpy(-(h as Real), u).expect("axpy");
        let fd = (outer_loss(&plus, &phi, &kern, &mask).expect("loss").total as f64
            - outer_loss(&minus, &phi, &kern, &mask).expect("loss").total as f64)
            / (2.0 * h);
        let an = analytic.dot(u).expect("dot") as f64;
        worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-2 * gnorm));
    }
    SuiteReport {
        name: "network-update loss gradient vs directional differences".into(),
        max_rel_err: worst,
        tolerance: 1e-5,
    }
}

/// Unrolled-DFO vector-Jacobian product against the dense transpose of the
/// assembled one-step matrix, applied `n` times.
pub fn check_dfo_vjp_dense(size: usize, alpha: f64, steps: &[usize], seed: u64) -> SuiteReport {
    let g = GridSpec::isotropic([size; 3]).expect("grid");
    let kern = DipoleKernel::build(g.clone());
    let mask = Mask::all_ones(g.clone());
    let n = g.len();
    let dense = dense_dfo_step_matrix(&kern, &mask, alpha);
    let gcot = random_volume(&g, seed);
    let mut worst = 0.0f64;
    for &n_steps in steps {
        let cfg = DfoConfig::new(alpha, n_steps).expect("config");
        let got = dfo_vjp(&gcot, &kern, &mask, &cfg).expect("vjp");
        // (L^T)^n g by repeated dense transpose-multiply
        let mut v: Vec<f64> = gcot.data().iter().map(|&x| x as f64).collect();
        for _ in 0..n_steps {
            let mut next = vec![0.0f64; n];
            for (j, nx) in next.iter_mut().enumerate() {
                for i in 0..n {
                    *nx += dense[i][j] * v[i];
                }
            }
            v = next;
        }
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in got.data().iter().zip(v.iter()) {
            worst = worst.max((*a as f64 - b).abs() / b.abs().max(1e-3 * scale));
        }
    }
    SuiteReport {
        name: "dfo vjp vs dense transpose oracle".into(),
        max_rel_err: worst,
        tolerance: 1e-10,
    }
}

/// Unrolled-DFO vector-Jacobian product against a finite-difference
/// Jacobian of the forward run.
pub fn check_dfo_vjp_fd(size: usize, alpha: f64, n_steps: usize, seed: u64) -> SuiteReport {
    let g = GridSpec::isotropic([size; 3]).expect("grid");
    let kern = DipoleKernel::build(g.clone());
    let mask = Mask::all_ones(g.clone());
    let cfg = DfoConfig::new(alpha, n_steps).expect("config");
    let n = g.len();
    let chi0 = random_volume(&g, seed);
    let phi = random_volume(&g, seed.wrapping_add(1));
    let h = 1e-5 as Real;

    // FD Jacobian column by column: J[., j] = d(dfo_run)/d(chi0_j)
    let mut jac = vec![vec![0.0f64; n]; n];
    let mut probe = chi0.clone();
    for j in 0..n {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + h;
        let plus = dfo_run(&probe, &phi, &kern, &mask, &cfg).expect("run");
        probe.data_mut()[j] = orig - h;
        let minus = dfo_run(&probe, &phi, &kern, &mask, &cfg).expect("run");
        probe.data_mut()[j] = orig;
        for i in 0..n {
            jac[i][j] = (plus.data()[i] as f64 - minus.data()[i] as f64) / (2.0 * h as f64);
        }
    }
    let gcot = random_volume(&g, seed.wrapping_add(2));
    let got = dfo_vjp(&gcot, &kern, &mask, &cfg).expect("vjp");
    let mut worst = 0.0f64;
    let gmax = got.max_abs() as f64;
    for j in 0..n {
        let mut jt_g = 0.0f64;
        for i in 0..n {
            jt_g += jac[i][j] * gcot.data()[i] as f64;
        }
        worst = worst.max((got.data()[j] as f64 - jt_g).abs() / jt_g.abs().max(1e-3 * gmax));
    }
    SuiteReport {
        name: "dfo vjp vs finite-difference jacobian".into(),
        max_rel_err: worst,
        tolerance: 1e-5,
    }
}

/// Every network parameter gradient against central differences on the
/// probe functional `<G, f(phi)>`.
pub fn check_network_gradients(size: usize, base_channels: usize, seed: u64) -> SuiteReport {
    let cfg = NetworkConfig { depth: 1, base_channels, seed, norm_enabled: true };
    let g = GridSpec::isotropic([size; 3]).expect("grid");
    let mut params = init_params(&cfg);
    let phi = random_volume(&g, seed.wrapping_add(1));
    let probe = random_volume(&g, seed.wrapping_add(2));

    let (_, cache) = forward(&phi, &params, &cfg).expect("forward");
    let grads = backward(&probe, cache, &params, &cfg).expect("backward");

    let score = |p: &ParameterSet| -> f64 {
        let (out, _) = forward(&phi, p, &cfg).expect("forward");
        out.dot(&probe).expect("dot") as f64
    };
    // floor at 1e-3 of the gradient scale; below it the h^2 truncation of
    // the quotient dominates (conv biases are exactly zero-gradient under
    // instance norm)
    let gmax = grads
        .tensors()
        .iter()
        .flat_map(|t| t.values.iter())
        .fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let h = 1e-4;
    let mut worst = 0.0f64;
    for ti in 0..params.tensors().len() {
        for vi in 0..params.tensors()[ti].values.len() {
            let orig = params.tensors()[ti].values[vi];
            params.tensors_mut()[ti].values[vi] = orig + h as Real;
            let plus = score(&params);
            params.tensors_mut()[ti].values[vi] = orig - h as Real;
            let minus = score(&params);
            params.tensors_mut()[ti].values[vi] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(grads.tensors()[ti].values[vi] as f64, fd, 1e-3 * gmax));
        }
    }
    SuiteReport {
        name: "network parameter gradients vs central differences".into(),
        max_rel_err: worst,
        tolerance: 1e-4,
    }
}

/// Dense matrix of the linear part of one DFO step,
/// `L = I - 2 alpha A (mask . A .)`, assembled column by column through the
/// production operator but materialized so tests can transpose it.
pub fn dense_dfo_step_matrix(kern: &DipoleKernel, mask: &Mask, alpha: f64) -> Vec<Vec<f64>> {
    let n = kern.grid().len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = ScalarVolume::zeros(kern.grid().clone());
        e.data_mut()[j] = 1.0;
        let mut ae = kern.apply(&e).expect("unit vector apply");
        mask.apply(&mut ae).expect("mask apply");
        let aae = kern.apply(&ae).expect("unit vector apply");
        let col: Vec<f64> = e
            .data()
            .iter()
            .zip(aae.data())
            .map(|(&ei, &v)| ei as f64 - 2.0 * alpha * v as f64)
            .collect();
        cols.push(col);
    }
    // cols[j][i] is L e_j at voxel i; return row-major L[i][j]
    let mut rows = vec![vec![0.0f64; n]; n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            rows[i][j] = v;
        }
    }
    rows
}
