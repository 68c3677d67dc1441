//! Deterministic digital phantoms and forward field simulation.
//!
//! The cuboid phantom scatters axis-aligned boxes with uniform random
//! corners, side lengths and susceptibility values over a zero background;
//! later cuboids paint over earlier ones. The lesion generator fills a
//! sphere (by physical voxel-center distance) with independent Gaussian
//! susceptibility draws. Field simulation applies the dipole forward model
//! and optionally adds seeded Gaussian measurement noise.

use alloc::format;

use crate::dipole::DipoleKernel;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::rng::{NormalSource, Rng};
use crate::volume::ScalarVolume;
use crate::Real;

/// Random-cuboid phantom recipe.
#[derive(Debug, Clone, PartialEq)]
pub struct CuboidSpec {
    pub grid: GridSpec,
    pub count: usize,
    /// Inclusive side-length range in voxels.
    pub side_range: [usize; 2],
    /// Susceptibility range in ppm.
    pub chi_range: [f64; 2],
    pub seed: u64,
}

impl CuboidSpec {
    /// 128^3, 1 mm isotropic, 800 cuboids of sides 1..=64 voxels and
    /// susceptibilities in [-0.02, 0.02] ppm.
    pub fn standard(seed: u64) -> Self {
        CuboidSpec {
            grid: GridSpec::isotropic([128, 128, 128]).unwrap(),
            count: 800,
            side_range: [1, 64],
            chi_range: [-0.02, 0.02],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min_dim = self.grid.matrix().iter().copied().min().unwrap();
        if self.side_range[0] < 1 || self.side_range[0] > self.side_range[1] {
            return Err(Error::InvalidConfig(format!(
                "cuboid side range {:?} is not an ordered positive range",
                self.side_range
            )));
        }
        if self.side_range[1] > min_dim {
            return Err(Error::InvalidConfig(format!(
                "cuboid side {} exceeds the smallest matrix dimension {}",
                self.side_range[1], min_dim
            )));
        }
        if self.chi_range[0] > self.chi_range[1] {
            return Err(Error::InvalidConfig("cuboid chi range is reversed".into()));
        }
        Ok(())
    }
}

/// Draw the cuboid phantom. Per cuboid, in seed order: corner (x,y,z)
/// uniform over the matrix, sides (x,y,z) uniform over `side_range`, chi
/// uniform over `chi_range`; extents are clipped to the field of view and
/// painted over anything below.
pub fn cuboid_phantom(spec: &CuboidSpec) -> Result<ScalarVolume> {
    spec.validate()?;
    let [mx, my, mz] = spec.grid.matrix();
    let mut vol = ScalarVolume::zeros(spec.grid.clone());
    let mut rng = Rng::new(spec.seed);
    for _ in 0..spec.count {
        let cx = rng.below(mx as u64) as usize;
        let cy = rng.below(my as u64) as usize;
        let cz = rng.below(mz as u64) as usize;
        let sx = rng.int_in(spec.side_range[0] as u64, spec.side_range[1] as u64) as usize;
        let sy = rng.int_in(spec.side_range[0] as u64, spec.side_range[1] as u64) as usize;
        let sz = rng.int_in(spec.side_range[0] as u64, spec.side_range[1] as u64) as usize;
        let chi = rng.real_in(spec.chi_range[0], spec.chi_range[1]) as Real;
        let x1 = (cx + sx).min(mx);
        let y1 = (cy + sy).min(my);
        let z1 = (cz + sz).min(mz);
        let data = vol.data_mut();
        for z in cz..z1 {
            for y in cy..y1 {
                let row = mx * (y + my * z);
                data[row + cx..row + x1].fill(chi);
            }
        }
    }
    Ok(vol)
}

/// Spherical lesion recipe; radius in millimetres, center as a voxel index.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionSpec {
    pub center: [usize; 3],
    pub radius_mm: f64,
    pub mean_ppm: f64,
    pub std_ppm: f64,
    pub seed: u64,
}

impl LesionSpec {
    pub fn standard(center: [usize; 3], seed: u64) -> Self {
        LesionSpec { center, radius_mm: 2.0, mean_ppm: 0.8, std_ppm: 0.05, seed }
    }
}

/// Fill the lesion sphere with independent `N(mean, std^2)` draws, leaving
/// everything else untouched. Voxels are inside when the physical distance
/// between voxel centers is at most the radius. Draw order is the linear
/// scan order of inside voxels.
pub fn add_lesion(chi: &ScalarVolume, spec: &LesionSpec) -> Result<ScalarVolume> {
    if !(spec.radius_mm > 0.0 && spec.radius_mm.is_finite()) {
        return Err(Error::InvalidConfig("lesion radius must be positive".into()));
    }
    if spec.std_ppm < 0.0 {
        return Err(Error::InvalidConfig("lesion std must be non-negative".into()));
    }
    let grid = chi.grid().clone();
    let [mx, my, mz] = grid.matrix();
    let [vx, vy, vz] = grid.voxel_mm();
    let r2 = spec.radius_mm * spec.radius_mm;
    let mut out = chi.clone();
    let mut normals = NormalSource::new(spec.seed);
    let mut inside = 0usize;
    for z in 0..mz {
        for y in 0..my {
            for x in 0..mx {
                let dx = (x as f64 - spec.center[0] as f64) * vx;
                let dy = (y as f64 - spec.center[1] as f64) * vy;
                let dz = (z as f64 - spec.center[2] as f64) * vz;
                if dx * dx + dy * dy + dz * dz <= r2 {
                    let v = spec.mean_ppm + spec.std_ppm * normals.next();
                    out.set(x, y, z, v as Real);
                    inside += 1;
                }
            }
        }
    }
    if inside == 0 {
        return Err(Error::InvalidConfig(
            "lesion sphere does not intersect the field of view".into(),
        ));
    }
    Ok(out)
}

/// Forward-simulate the local field: `phi = A chi + N(0, noise_std^2)`.
/// The grid's voxel size and B0 direction drive the dipole kernel, so an
/// oblique anisotropic acquisition is simulated by posing the grid
/// accordingly. `noise_std = 0` gives the exact model.
pub fn simulate_field(chi: &ScalarVolume, noise_std: f64, seed: u64) -> Result<ScalarVolume> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidConfig("noise std must be non-negative".into()));
    }
    let kern = DipoleKernel::build(chi.grid().clone());
    let mut phi = kern.apply(chi)?;
    if noise_std > 0.0 {
        let mut normals = NormalSource::new(seed);
        for v in phi.data_mut().iter_mut() {
            *v += (noise_std * normals.next()) as Real;
        }
    }
    Ok(phi)
}
