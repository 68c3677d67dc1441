//! Manual throughput probe; run with
//! `cargo test -p modip-core --features parallel --test perf_probe -- --ignored --nocapture`

use std::time::Instant;

use modip_core::phantom::{cuboid_phantom, simulate_field, CuboidSpec};
use modip_core::recon::{reconstruct, ReconConfig, ReconMode};
use modip_core::{GridSpec, Mask};

#[test]
#[ignore]
fn modip_iteration_walltime_64() {
    let g = GridSpec::isotropic([64, 64, 64]).unwrap();
    let mut spec = CuboidSpec::standard(1);
    spec.grid = g.clone();
    spec.count = 100;
    spec.side_range = [1, 32];
    let chi = cuboid_phantom(&spec).unwrap();
    let phi = simulate_field(&chi, 0.0, 2).unwrap();
    let mask = Mask::all_ones(g);

    for depth in [1usize, 4] {
        let mut cfg = ReconConfig::defaults(ReconMode::Modip, 1);
        cfg.network.depth = depth;
        cfg.max_iters = 3;
        let t = Instant::now();
        let out = reconstruct(&phi, &mask, &cfg).unwrap();
        let total = t.elapsed().as_secs_f64();
        let per_iter: Vec<f64> = out.history.iter().map(|r| r.wall_ms / 1e3).collect();
        println!(
            "depth {depth}: total {total:.2}s, per-iter {per_iter:?} (loss {:.5})",
            out.history.last().unwrap().loss.total
        );
    }
}

#[test]
#[ignore]
fn phase_breakdown_64() {
    use modip_core::dfo::{dfo_run, dfo_vjp};
    use modip_core::dipole::DipoleKernel;
    use modip_core::loss::loss_and_grad;
    use modip_core::unet::{backward, forward, init_params, NetworkConfig};

    let g = GridSpec::isotropic([64, 64, 64]).unwrap();
    let mut spec = CuboidSpec::standard(1);
    spec.grid = g.clone();
    spec.count = 100;
    spec.side_range = [1, 32];
    let chi = cuboid_phantom(&spec).unwrap();
    let phi = simulate_field(&chi, 0.0, 2).unwrap();
    let mask = Mask::all_ones(g);
    let kern = DipoleKernel::build(phi.grid().clone());

    let ncfg = NetworkConfig::default();
    let params = init_params(&ncfg);
    let dcfg = modip_core::DfoConfig::default();

    let t = Instant::now();
    let (chi0, cache) = forward(&phi, &params, &ncfg).unwrap();
    println!("forward      {:.2}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let chi_n = dfo_run(&chi0, &phi, &kern, &mask, &dcfg).unwrap();
    println!("dfo_run(10)  {:.2}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let (_loss, gn) = loss_and_grad(&chi_n, &phi, &kern, &mask).unwrap();
    println!("loss+grad    {:.2}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let g0 = dfo_vjp(&gn, &kern, &mask, &dcfg).unwrap();
    println!("dfo_vjp(10)  {:.2}s", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let _grads = backward(&g0, cache, &params, &ncfg).unwrap();
    println!("backward     {:.2}s", t.elapsed().as_secs_f64());
}
