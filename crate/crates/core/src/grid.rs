//! Acquisition geometry shared by every operator.

use alloc::format;

use crate::error::{Error, Result};

/// Matrix size, voxel size and main-field direction of a 3D volume.
///
/// `b0_dir` is stored unit-normalized; the constructor rejects a zero vector
/// and normalizes anything else, so oblique inputs such as `[0.5, 0.5, 0.71]`
/// are legal and equivalent up to scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    matrix: [usize; 3],
    voxel_mm: [f64; 3],
    b0_dir: [f64; 3],
}

impl GridSpec {
    pub fn new(matrix: [usize; 3], voxel_mm: [f64; 3], b0: [f64; 3]) -> Result<Self> {
        for (axis, &m) in matrix.iter().enumerate() {
            if m < 2 {
                return Err(Error::InvalidGrid(format!(
                    "matrix[{axis}] = {m}, need at least 2 voxels per axis"
                )));
            }
        }
        for (axis, &v) in voxel_mm.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidGrid(format!(
                    "voxel_mm[{axis}] = {v}, need a positive finite size"
                )));
            }
        }
        if b0.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidGrid("b0 direction has non-finite components".into()));
        }
        let norm = libm::sqrt(b0[0] * b0[0] + b0[1] * b0[1] + b0[2] * b0[2]);
        if norm == 0.0 {
            return Err(Error::InvalidGrid("b0 direction must be non-zero".into()));
        }
        Ok(GridSpec {
            matrix,
            voxel_mm,
            b0_dir: [b0[0] / norm, b0[1] / norm, b0[2] / norm],
        })
    }

    /// 1 mm isotropic grid with axial B0, the common default.
    pub fn isotropic(matrix: [usize; 3]) -> Result<Self> {
        Self::new(matrix, [1.0; 3], [0.0, 0.0, 1.0])
    }

    pub fn matrix(&self) -> [usize; 3] {
        self.matrix
    }

    pub fn voxel_mm(&self) -> [f64; 3] {
        self.voxel_mm
    }

    /// Unit-normalized B0 direction.
    pub fn b0_dir(&self) -> [f64; 3] {
        self.b0_dir
    }

    /// Total voxel count.
    pub fn len(&self) -> usize {
        self.matrix[0] * self.matrix[1] * self.matrix[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Linear index with x fastest: `x + Mx*(y + My*z)`.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.matrix[0] && y < self.matrix[1] && z < self.matrix[2]);
        x + self.matrix[0] * (y + self.matrix[1] * z)
    }

    /// Inverse of [`GridSpec::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.matrix[0];
        let rest = i / self.matrix[0];
        (x, rest % self.matrix[1], rest / self.matrix[1])
    }

    /// True when every axis length is divisible by `factor`.
    pub fn divisible_by(&self, factor: usize) -> bool {
        self.matrix.iter().all(|&m| m % factor == 0)
    }

    /// Returns a grid with identical matrix but new pose metadata.
    pub fn with_pose(&self, voxel_mm: [f64; 3], b0: [f64; 3]) -> Result<Self> {
        Self::new(self.matrix, voxel_mm, b0)
    }
}
