//! Geometry-aware 3D volumes and the elementwise arithmetic on them.
//!
//! Values are stored x-fastest (`index = x + Mx*(y + My*z)`); field and
//! susceptibility volumes are in ppm, masks are exactly 0/1. All types are
//! value-semantic and freely shared across threads.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::Real;

/// Real-valued 3D volume bound to a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    grid: GridSpec,
    data: Vec<Real>,
}

impl ScalarVolume {
    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.len();
        ScalarVolume { grid, data: vec![0.0; n] }
    }

    /// Wrap raw values, checking length and finiteness.
    pub fn from_vec(grid: GridSpec, data: Vec<Real>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch { context: "volume construction" });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "volume construction" });
        }
        Ok(ScalarVolume { grid, data })
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize, usize) -> Real) -> Self {
        let mut v = Self::zeros(grid);
        let [mx, my, mz] = v.grid.matrix();
        let mut i = 0;
        for z in 0..mz {
            for y in 0..my {
                for x in 0..mx {
                    v.data[i] = f(x, y, z);
                    i += 1;
                }
            }
        }
        v
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> Real {
        self.data[self.grid.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: Real) {
        let i = self.grid.index(x, y, z);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean inner product over all voxels; fixed summation order.
    pub fn dot(&self, other: &ScalarVolume) -> Result<Real> {
        self.check_grid(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .fold(0.0 as Real, |acc, (a, b)| acc + a * b))
    }

    pub fn norm_sq(&self) -> Real {
        self.data.iter().fold(0.0 as Real, |acc, v| acc + v * v)
    }

    pub fn norm(&self) -> Real {
        crate::fmath::sqrt(self.norm_sq())
    }

    pub fn max_abs(&self) -> Real {
        self.data.iter().fold(0.0 as Real, |m, v| {
            let a = v.abs();
            if a > m { a } else { m }
        })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: Real, other: &ScalarVolume) -> Result<()> {
        self.check_grid(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: Real) {
        for v in self.data.iter_mut() {
            *v *= alpha;
        }
    }

    pub fn sub(&self, other: &ScalarVolume) -> Result<ScalarVolume> {
        self.check_grid(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(ScalarVolume { grid: self.grid.clone(), data })
    }

    /// Elementwise product (used for masking).
    pub fn mul_elem(&self, other: &ScalarVolume) -> Result<ScalarVolume> {
        self.check_grid(other, "mul_elem")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(ScalarVolume { grid: self.grid.clone(), data })
    }

    pub(crate) fn check_grid(&self, other: &ScalarVolume, context: &'static str) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch { context });
        }
        Ok(())
    }

    pub(crate) fn same_data_grid(grid: &GridSpec, data: Vec<Real>) -> ScalarVolume {
        debug_assert_eq!(grid.len(), data.len());
        ScalarVolume { grid: grid.clone(), data }
    }
}

/// Complex k-space data in unshifted DFT bin order, same layout as
/// [`ScalarVolume`]. Spectra of real volumes satisfy Hermitian symmetry
/// `S(k) = conj(S(-k mod M))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    grid: GridSpec,
    data: Vec<Complex<Real>>,
}

impl ComplexSpectrum {
    pub(crate) fn new(grid: GridSpec, data: Vec<Complex<Real>>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        ComplexSpectrum { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[Complex<Real>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<Real>] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex<Real>> {
        self.data
    }
}

/// Binary region of interest; wraps a volume whose values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    vol: ScalarVolume,
    ones: usize,
}

impl Mask {
    /// Validate a 0/1 volume with at least one selected voxel.
    pub fn from_volume(vol: ScalarVolume) -> Result<Self> {
        let mut ones = 0usize;
        for &v in vol.data() {
            if v == 1.0 {
                ones += 1;
            } else if v != 0.0 {
                return Err(Error::InvalidConfig(
                    "mask values must be exactly 0 or 1".into(),
                ));
            }
        }
        if ones == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(Mask { vol, ones })
    }

    pub fn all_ones(grid: GridSpec) -> Self {
        let n = grid.len();
        Mask {
            vol: ScalarVolume { grid, data: vec![1.0; n] },
            ones: n,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        self.vol.grid()
    }

    pub fn values(&self) -> &[Real] {
        self.vol.data()
    }

    pub fn as_volume(&self) -> &ScalarVolume {
        &self.vol
    }

    /// Number of selected voxels; always positive.
    pub fn ones(&self) -> usize {
        self.ones
    }

    /// Zero out everything outside the mask, in place.
    pub fn apply(&self, v: &mut ScalarVolume) -> Result<()> {
        v.check_grid(&self.vol, "mask apply")?;
        for (x, m) in v.data_mut().iter_mut().zip(self.vol.data()) {
            *x *= m;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> GridSpec {
        GridSpec::isotropic([n, n, n]).unwrap()
    }

    #[test]
    fn layout_round_trip() {
        let mut v = ScalarVolume::zeros(grid(3));
        v.set(2, 1, 0, 7.5);
        assert_eq!(v.at(2, 1, 0), 7.5);
        assert_eq!(v.data()[2 + 3 * 1], 7.5);
    }

    #[test]
    fn dot_matches_hand_sum() {
        // [DERIVED] scalar loop oracle on 2^3 volumes
        let g = grid(2);
        let a = ScalarVolume::from_vec(
            g.clone(),
            vec![1.0, -2.0, 0.5, 3.0, -1.5, 2.0, 0.0, 4.0],
        )
        .unwrap();
        let b = ScalarVolume::from_vec(
            g,
            vec![2.0, 1.0, -4.0, 0.5, 1.0, 1.0, 9.0, -0.25],
        )
        .unwrap();
        let mut expect = 0.0;
        for i in 0..8 {
            expect += a.data()[i] * b.data()[i];
        }
        assert_eq!(a.dot(&b).unwrap(), expect);
    }

    #[test]
    fn dot_with_self_nonnegative_and_zero_identity() {
        let g = grid(2);
        let z = ScalarVolume::zeros(g.clone());
        let v =
            ScalarVolume::from_vec(g, vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -3.0, 0.25]).unwrap();
        assert!(v.dot(&v).unwrap() >= 0.0);
        assert_eq!(z.dot(&v).unwrap(), 0.0);
    }

    #[test]
    fn rejects_nan_and_bad_length() {
        let g = grid(2);
        assert!(matches!(
            ScalarVolume::from_vec(g.clone(), vec![0.0; 7]),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut d = vec![0.0 as Real; 8];
        d[3] = Real::NAN;
        assert!(matches!(
            ScalarVolume::from_vec(g, d),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let a = ScalarVolume::zeros(grid(2));
        let b = ScalarVolume::zeros(grid(3));
        assert!(matches!(a.dot(&b), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn mask_validation() {
        let g = grid(2);
        let mut d = vec![0.0 as Real; 8];
        d[1] = 1.0;
        let m = Mask::from_volume(ScalarVolume::from_vec(g.clone(), d).unwrap()).unwrap();
        assert_eq!(m.ones(), 1);

        assert!(Mask::from_volume(ScalarVolume::zeros(g.clone())).is_err());
        let half = ScalarVolume::from_vec(g, vec![0.5; 8]).unwrap();
        assert!(Mask::from_volume(half).is_err());
    }
}
