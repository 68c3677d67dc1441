//! End-to-end reconstruction loop in three modes.
//!
//! * `modip` - per outer iteration the network maps the input to an interim
//!   estimate `chi_0`, the DFO loop refines it to `chi_n`, the loss is
//!   evaluated at `chi_n`, and its gradient flows back through the unrolled
//!   DFO steps into the network parameters, which Adam updates.
//! * `dip` - the same loop with zero DFO steps (pure deep-image-prior
//!   fitting); configurations with nonzero step counts are rejected.
//! * `dfo` - no network: plain gradient descent on the data fidelity from
//!   `chi = 0`, one step per logged iteration. Its loss column records the
//!   squared-L2 fidelity objective rather than the network loss.
//!
//! The run stops at `max_iters`, or earlier when the relative change of the
//! total loss between consecutive iterations falls below `stop_rel_tol`
//! (when set). A non-finite loss aborts with the iteration index; it is
//! never silently returned. The returned volume is `chi_n` of the last
//! completed iteration; the iteration with minimal loss is also reported.

use alloc::vec::Vec;

use crate::dfo::{dfo_run, dfo_vjp, DfoConfig};
use crate::dipole::{fidelity_gradient, fidelity_value, DipoleKernel};
use crate::error::{Error, Result};
use crate::loss::{loss_and_grad, LossReport};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{derive_seed, NormalSource};
use crate::unet::{backward, forward, init_params, NetworkConfig};
use crate::volume::{Mask, ScalarVolume};
use crate::Real;

/// Stream tag for the noise-input mode (weights draw from the plain seed).
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconMode {
    Modip,
    Dip,
    Dfo,
}

impl ReconMode {
    pub fn name(&self) -> &'static str {
        match self {
            ReconMode::Modip => "modip",
            ReconMode::Dip => "dip",
            ReconMode::Dfo => "dfo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    /// Feed the measured local field to the network.
    Field,
    /// Feed a fixed seeded unit-Gaussian volume instead (ablation mode).
    Noise,
}

impl InputKind {
    pub fn name(&self) -> &'static str {
        match self {
            InputKind::Field => "field",
            InputKind::Noise => "noise",
        }
    }
}

/// Full configuration of one reconstruction run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub mode: ReconMode,
    pub input_kind: InputKind,
    pub max_iters: usize,
    pub stop_rel_tol: Option<f64>,
    pub snapshot_iters: Vec<usize>,
    pub network: NetworkConfig,
    pub dfo: DfoConfig,
    pub adam: AdamConfig,
    /// Diagnostic: treat `chi_n` as detached from `chi_0` when
    /// backpropagating (skips the DFO vector-Jacobian product).
    pub stop_grad_dfo: bool,
    /// Master seed; the noise-input stream derives from it.
    pub seed: u64,
}

impl ReconConfig {
    /// Paper-default configuration for a mode and seed.
    pub fn defaults(mode: ReconMode, seed: u64) -> Self {
        let dfo = match mode {
            ReconMode::Dip => DfoConfig::default().with_steps(0),
            _ => DfoConfig::default(),
        };
        ReconConfig {
            mode,
            input_kind: InputKind::Field,
            max_iters: 200,
            stop_rel_tol: None,
            snapshot_iters: Self::default_snapshots(),
            network: NetworkConfig { seed, ..NetworkConfig::default() },
            dfo,
            adam: AdamConfig::default(),
            stop_grad_dfo: false,
            seed,
        }
    }

    /// Iteration counts commonly displayed for visual inspection.
    pub fn default_snapshots() -> Vec<usize> {
        alloc::vec![10, 20, 50, 100, 200]
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if let Some(tol) = self.stop_rel_tol {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(Error::InvalidConfig("stop_rel_tol must be positive".into()));
            }
        }
        if self.mode == ReconMode::Dip && self.dfo.n_steps() != 0 {
            return Err(Error::InvalidConfig(
                "dip mode runs zero DFO steps; a nonzero --dfo-steps conflicts with it".into(),
            ));
        }
        if self.mode != ReconMode::Dfo {
            self.network.validate()?;
            self.adam.validate()?;
        }
        Ok(())
    }
}

/// One completed outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based iteration index.
    pub iter: usize,
    pub loss: LossReport,
    pub wall_ms: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct ReconOutput {
    /// `chi_n` of the last completed iteration.
    pub chi: ScalarVolume,
    /// Final network output `chi_0` (absent in dfo mode).
    pub chi0: Option<ScalarVolume>,
    pub history: Vec<IterationRecord>,
    pub snapshots: Vec<(usize, ScalarVolume)>,
    /// 1-based iteration whose total loss was minimal.
    pub argmin_iter: usize,
    /// True when `stop_rel_tol` fired before `max_iters`.
    pub stopped_early: bool,
    /// Adam steps skipped over non-finite gradients.
    pub skipped_updates: usize,
}

/// Run a reconstruction, timing iterations with the caller's monotonic
/// clock (milliseconds).
pub fn reconstruct_with_clock(
    phi: &ScalarVolume,
    mask: &Mask,
    cfg: &ReconConfig,
    now_ms: &mut dyn FnMut() -> f64,
) -> Result<ReconOutput> {
    cfg.validate()?;
    phi.check_grid(mask.as_volume(), "reconstruct")?;
    let kern = DipoleKernel::build(phi.grid().clone());
    match cfg.mode {
        ReconMode::Dfo => run_dfo_only(phi, mask, &kern, cfg, now_ms),
        ReconMode::Modip | ReconMode::Dip => run_network(phi, mask, &kern, cfg, now_ms),
    }
}

/// [`reconstruct_with_clock`] with wall time from `std::time::Instant`.
#[cfg(feature = "std")]
pub fn reconstruct(phi: &ScalarVolume, mask: &Mask, cfg: &ReconConfig) -> Result<ReconOutput> {
    let start = std::time::Instant::now();
    let mut clock = move || start.elapsed().as_secs_f64() * 1e3;
    reconstruct_with_clock(phi, mask, cfg, &mut clock)
}

struct RunLog {
    history: Vec<IterationRecord>,
    snapshots: Vec<(usize, ScalarVolume)>,
    argmin_iter: usize,
    argmin_loss: Real,
    stopped: bool,
}

impl RunLog {
    fn new() -> Self {
        RunLog {
            history: Vec::new(),
            snapshots: Vec::new(),
            argmin_iter: 0,
            argmin_loss: Real::INFINITY,
            stopped: false,
        }
    }

    /// Record iteration `iter`; returns true when the run should stop.
    fn push(
        &mut self,
        iter: usize,
        loss: LossReport,
        wall_ms: f64,
        chi_n: &ScalarVolume,
        cfg: &ReconConfig,
    ) -> Result<bool> {
        if !loss.is_finite() {
            return Err(Error::Divergence { iter });
        }
        let prev = self.history.last().map(|r| r.loss.total);
        if loss.total < self.argmin_loss {
            self.argmin_loss = loss.total;
            self.argmin_iter = iter;
        }
        self.history.push(IterationRecord { iter, loss, wall_ms });
        if cfg.snapshot_iters.contains(&iter) {
            self.snapshots.push((iter, chi_n.clone()));
        }
        if let (Some(tol), Some(prev)) = (cfg.stop_rel_tol, prev) {
            if prev > 0.0 {
                let rel = ((loss.total - prev) / prev).abs();
                if (rel as f64) < tol {
                    self.stopped = true;
                    return Ok(true);
                }
            }
        }
        Ok(iter >= cfg.max_iters)
    }
}

fn run_dfo_only(
    phi: &ScalarVolume,
    mask: &Mask,
    kern: &DipoleKernel,
    cfg: &ReconConfig,
    now_ms: &mut dyn FnMut() -> f64,
) -> Result<ReconOutput> {
    let mut chi = ScalarVolume::zeros(phi.grid().clone());
    let mut log = RunLog::new();
    let mut iter = 0usize;
    loop {
        iter += 1;
        let t0 = now_ms();
        let grad = fidelity_gradient(&chi, phi, kern, mask)?;
        chi.axpy(-cfg.dfo.alpha(), &grad)?;
        let f = fidelity_value(&chi, phi, kern, mask)?;
        let loss = LossReport { fidelity_mae: f, laplacian_mae: 0.0, total: f };
        let wall = now_ms() - t0;
        if log.push(iter, loss, wall, &chi, cfg)? {
            break;
        }
    }
    Ok(ReconOutput {
        chi,
        chi0: None,
        history: log.history,
        snapshots: log.snapshots,
        argmin_iter: log.argmin_iter,
        stopped_early: log.stopped,
        skipped_updates: 0,
    })
}

fn run_network(
    phi: &ScalarVolume,
    mask: &Mask,
    kern: &DipoleKernel,
    cfg: &ReconConfig,
    now_ms: &mut dyn FnMut() -> f64,
) -> Result<ReconOutput> {
    if !phi.grid().divisible_by(1 << cfg.network.depth) {
        return Err(Error::InvalidConfig(alloc::format!(
            "grid {:?} not divisible by 2^depth = {}",
            phi.grid().matrix(),
            1usize << cfg.network.depth
        )));
    }
    let net_input = match cfg.input_kind {
        InputKind::Field => phi.clone(),
        InputKind::Noise => {
            let mut z = ScalarVolume::zeros(phi.grid().clone());
            NormalSource::new(derive_seed(cfg.seed, NOISE_STREAM)).fill(
                z.data_mut(),
                0.0,
                1.0,
            );
            z
        }
    };
    let mut params = init_params(&cfg.network);
    let mut adam = AdamState::new(cfg.adam, &params)?;
    let mut log = RunLog::new();
    let mut chi_final: Option<ScalarVolume>;
    let mut chi0_final: Option<ScalarVolume>;
    let mut iter = 0usize;
    loop {
        iter += 1;
        let t0 = now_ms();
        let (chi0, cache) = forward(&net_input, &params, &cfg.network)?;
        let chi_n = dfo_run(&chi0, phi, kern, mask, &cfg.dfo)?;
        let (loss, grad_chi_n) = loss_and_grad(&chi_n, phi, kern, mask)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { iter });
        }

        // network weights update (runs on every iteration, per the loop's
        // definition, including the final one)
        let grad_chi0 = if cfg.stop_grad_dfo {
            grad_chi_n
        } else {
            dfo_vjp(&grad_chi_n, kern, mask, &cfg.dfo)?
        };
        let grads = backward(&grad_chi0, cache, &params, &cfg.network)?;
        match adam.step(&mut params, &grads) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient { .. }) => {} // reported via skipped_updates
            Err(e) => return Err(e),
        }

        let wall = now_ms() - t0;
        let stop = log.push(iter, loss, wall, &chi_n, cfg)?;
        chi_final = Some(chi_n);
        chi0_final = Some(chi0);
        if stop {
            break;
        }
    }
    Ok(ReconOutput {
        chi: chi_final.expect("at least one iteration"),
        chi0: chi0_final,
        history: log.history,
        snapshots: log.snapshots,
        argmin_iter: log.argmin_iter,
        stopped_early: log.stopped,
        skipped_updates: adam.skipped_steps(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::phantom::{cuboid_phantom, simulate_field, CuboidSpec};

    fn small_case(seed: u64) -> (ScalarVolume, Mask) {
        noisy_case(seed, 0.0)
    }

    fn noisy_case(seed: u64, noise_std: f64) -> (ScalarVolume, Mask) {
        let g = GridSpec::isotropic([8, 8, 8]).unwrap();
        let mut spec = CuboidSpec::standard(seed);
        spec.grid = g.clone();
        spec.side_range = [1, 4];
        spec.count = 12;
        spec.chi_range = [-0.1, 0.1];
        let chi = cuboid_phantom(&spec).unwrap();
        let phi = simulate_field(&chi, noise_std, seed).unwrap();
        (phi, Mask::all_ones(g))
    }

    fn tiny_cfg(mode: ReconMode, iters: usize) -> ReconConfig {
        let mut cfg = ReconConfig::defaults(mode, 7);
        cfg.max_iters = iters;
        cfg.network.base_channels = 2;
        cfg.adam.base_lr = 1e-3;
        if mode == ReconMode::Dip {
            cfg.dfo = cfg.dfo.with_steps(0);
        } else if mode == ReconMode::Modip {
            cfg.dfo = cfg.dfo.with_steps(3);
        }
        cfg
    }

    fn no_clock() -> impl FnMut() -> f64 {
        || 0.0
    }

    #[test]
    fn dip_equals_modip_with_zero_steps_bitwise() {
        let (phi, mask) = small_case(1);
        let mut a_cfg = tiny_cfg(ReconMode::Modip, 5);
        a_cfg.dfo = a_cfg.dfo.with_steps(0);
        let b_cfg = tiny_cfg(ReconMode::Dip, 5);
        let mut c = no_clock();
        let a = reconstruct_with_clock(&phi, &mask, &a_cfg, &mut c).unwrap();
        let mut c = no_clock();
        let b = reconstruct_with_clock(&phi, &mask, &b_cfg, &mut c).unwrap();
        assert_eq!(a.chi, b.chi);
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.loss, rb.loss);
        }
    }

    #[test]
    fn dip_mode_rejects_nonzero_dfo_steps() {
        let mut cfg = tiny_cfg(ReconMode::Dip, 5);
        cfg.dfo = cfg.dfo.with_steps(10);
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn dfo_mode_fidelity_is_monotone_on_exact_data() {
        let (phi, mask) = small_case(2);
        let mut cfg = ReconConfig::defaults(ReconMode::Dfo, 1);
        cfg.max_iters = 100;
        let mut c = no_clock();
        let out = reconstruct_with_clock(&phi, &mask, &cfg, &mut c).unwrap();
        let mut prev = Real::INFINITY;
        for rec in &out.history {
            assert!(rec.loss.total <= prev * (1.0 + 1e-12));
            prev = rec.loss.total;
        }
        assert_eq!(out.history.len(), 100);
        assert!(out.chi0.is_none());
    }

    #[test]
    fn modip_fidelity_of_chi_n_never_exceeds_chi_0() {
        // per-iteration invariant at the default step size
        let (phi, mask) = small_case(3);
        let g = phi.grid().clone();
        let kern = DipoleKernel::build(g);
        let cfg = tiny_cfg(ReconMode::Modip, 6);
        // replicate the loop manually to observe both states
        let mut params = init_params(&cfg.network);
        let mut adam = AdamState::new(cfg.adam, &params).unwrap();
        for _ in 0..cfg.max_iters {
            let (chi0, cache) = forward(&phi, &params, &cfg.network).unwrap();
            let chi_n = dfo_run(&chi0, &phi, &kern, &mask, &cfg.dfo).unwrap();
            let f0 = fidelity_value(&chi0, &phi, &kern, &mask).unwrap();
            let fn_ = fidelity_value(&chi_n, &phi, &kern, &mask).unwrap();
            assert!(fn_ <= f0 * (1.0 + 1e-12), "{fn_} > {f0}");
            let (_, gn) = loss_and_grad(&chi_n, &phi, &kern, &mask).unwrap();
            let g0 = dfo_vjp(&gn, &kern, &mask, &cfg.dfo).unwrap();
            let grads = backward(&g0, cache, &params, &cfg.network).unwrap();
            adam.step(&mut params, &grads).unwrap();
        }
    }

    #[test]
    fn runs_are_seed_deterministic() {
        let (phi, mask) = small_case(4);
        let cfg = tiny_cfg(ReconMode::Modip, 4);
        let mut c = no_clock();
        let a = reconstruct_with_clock(&phi, &mask, &cfg, &mut c).unwrap();
        let mut c = no_clock();
        let b = reconstruct_with_clock(&phi, &mask, &cfg, &mut c).unwrap();
        assert_eq!(a.chi, b.chi);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn noise_input_differs_from_field_input() {
        let (phi, mask) = small_case(5);
        let cfg_f = tiny_cfg(ReconMode::Modip, 3);
        let mut cfg_n = cfg_f.clone();
        cfg_n.input_kind = InputKind::Noise;
        let mut c = no_clock();
        let a = reconstruct_with_clock(&phi, &mask, &cfg_f, &mut c).unwrap();
        let mut c = no_clock();
        let b = reconstruct_with_clock(&phi, &mask, &cfg_n, &mut c).unwrap();
        assert_ne!(a.chi, b.chi);
    }

    #[test]
    fn stop_rel_tol_halts_early() {
        // noise puts a floor under the fidelity, so consecutive losses
        // flatten out and the relative-change rule fires
        let (phi, mask) = noisy_case(6, 1e-3);
        let mut cfg = ReconConfig::defaults(ReconMode::Dfo, 1);
        cfg.max_iters = 5000;
        cfg.stop_rel_tol = Some(1e-5);
        let mut c = no_clock();
        let out = reconstruct_with_clock(&phi, &mask, &cfg, &mut c).unwrap();
        assert!(out.stopped_early);
        assert!(out.history.len() < 5000);
    }

    #[test]
    fn divergent_run_aborts_with_iteration_index() {
        // a field at 1e200 ppm is finite voxel-wise but its squared norm
        // overflows, so the very first fidelity evaluation goes infinite
        let g = GridSpec::isotropic([8, 8, 8]).unwrap();
        let phi = ScalarVolume::from_fn(g.clone(), |x, _, _| {
            if x % 2 == 0 { 1e200 } else { -1e200 }
        });
        let mask = Mask::all_ones(g);
        let mut cfg = ReconConfig::defaults(ReconMode::Dfo, 1);
        cfg.max_iters = 10;
        let mut c = no_clock();
        match reconstruct_with_clock(&phi, &mask, &cfg, &mut c) {
            Err(Error::Divergence { iter }) => assert_eq!(iter, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn snapshots_and_argmin_are_recorded() {
        let (phi, mask) = small_case(8);
        let mut cfg = tiny_cfg(ReconMode::Modip, 6);
        cfg.snapshot_iters = alloc::vec![2, 4];
        let mut c = no_clock();
        let out = reconstruct_with_clock(&phi, &mask, &cfg, &mut c).unwrap();
        assert_eq!(out.snapshots.len(), 2);
        assert_eq!(out.snapshots[0].0, 2);
        assert_eq!(out.snapshots[1].0, 4);
        assert!(out.argmin_iter >= 1 && out.argmin_iter <= 6);
        assert_eq!(out.history.len(), 6);
        assert!(out.chi0.is_some());
    }
}
