//! 3D discrete Fourier transform.
//!
//! Convention: forward transform unscaled, inverse scaled by `1/(Mx*My*Mz)`,
//! unshifted bin order everywhere. Power-of-two axis lengths use an iterative
//! radix-2 transform; any other length goes through Bluestein's chirp
//! convolution, so arbitrary matrix sizes work. Twiddles come from `libm`
//! for cross-platform bit stability.
//!
//! The 3D pass structure is axis-rotating: each pass reads lines along one
//! axis and writes them contiguously into the output buffer, which keeps the
//! inner transforms on contiguous memory and lets every pass split over
//! independent output lines.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::parallel::for_each_chunk_mut;
use crate::volume::{ComplexSpectrum, ScalarVolume};
use crate::Real;

type C = Complex<Real>;

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// exp(-2*pi*i * k / n) in f64, cast to working precision.
fn twiddle(k: f64, n: f64, dir: Direction) -> C {
    let theta = -2.0 * core::f64::consts::PI * k / n;
    let theta = match dir {
        Direction::Forward => theta,
        Direction::Inverse => -theta,
    };
    Complex::new(libm::cos(theta) as Real, libm::sin(theta) as Real)
}

enum AxisKind {
    /// Iterative radix-2, in place.
    Pow2 {
        log2: u32,
        // twiddles for the largest stage; smaller stages stride through it
        tw_fwd: Vec<C>,
        tw_inv: Vec<C>,
    },
    /// Bluestein chirp-z for arbitrary lengths, via a padded radix-2 plan.
    Bluestein {
        chirp_fwd: Vec<C>,
        chirp_inv: Vec<C>,
        // FFT of the padded chirp filter, for both directions
        filter_fwd: Vec<C>,
        filter_inv: Vec<C>,
        inner: Box<AxisPlan>,
    },
}

/// Transform plan for one axis length.
pub struct AxisPlan {
    len: usize,
    kind: AxisKind,
}

impl AxisPlan {
    pub fn new(len: usize) -> Self {
        assert!(len >= 1);
        if len.is_power_of_two() {
            let half = len / 2;
            let mut tw_fwd = Vec::with_capacity(half);
            let mut tw_inv = Vec::with_capacity(half);
            for k in 0..half {
                tw_fwd.push(twiddle(k as f64, len as f64, Direction::Forward));
                tw_inv.push(twiddle(k as f64, len as f64, Direction::Inverse));
            }
            AxisPlan {
                len,
                kind: AxisKind::Pow2 { log2: len.trailing_zeros(), tw_fwd, tw_inv },
            }
        } else {
            // chirp c[n] = exp(-i*pi*n^2/len); n^2 reduced mod 2*len keeps the
            // angle argument small
            let two_len = 2 * len;
            let chirp = |n: usize, dir: Direction| -> C {
                let m = (n * n) % two_len;
                twiddle(m as f64, two_len as f64, dir)
            };
            let chirp_fwd: Vec<C> = (0..len).map(|n| chirp(n, Direction::Forward)).collect();
            let chirp_inv: Vec<C> = (0..len).map(|n| chirp(n, Direction::Inverse)).collect();

            let padded = (2 * len - 1).next_power_of_two();
            let inner = Box::new(AxisPlan::new(padded));
            let build_filter = |c: &[C]| -> Vec<C> {
                let mut b = vec![C::new(0.0, 0.0); padded];
                // filter n -> conj(chirp[n]), wrapped so negative lags alias to the end
                for n in 0..len {
                    let v = c[n].conj();
                    b[n] = v;
                    if n > 0 {
                        b[padded - n] = v;
                    }
                }
                inner.transform_line(&mut b, Direction::Forward);
                b
            };
            let filter_fwd = build_filter(&chirp_fwd);
            let filter_inv = build_filter(&chirp_inv);
            AxisPlan {
                len,
                kind: AxisKind::Bluestein { chirp_fwd, chirp_inv, filter_fwd, filter_inv, inner },
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Unscaled transform of one line, in place. `line.len()` must equal the
    /// plan length.
    pub fn transform_line(&self, line: &mut [C], dir: Direction) {
        debug_assert_eq!(line.len(), self.len);
        match &self.kind {
            AxisKind::Pow2 { log2, tw_fwd, tw_inv } => {
                let tw = match dir {
                    Direction::Forward => tw_fwd,
                    Direction::Inverse => tw_inv,
                };
                radix2(line, *log2, tw);
            }
            AxisKind::Bluestein { chirp_fwd, chirp_inv, filter_fwd, filter_inv, inner } => {
                let (chirp, filter) = match dir {
                    Direction::Forward => (chirp_fwd, filter_fwd),
                    Direction::Inverse => (chirp_inv, filter_inv),
                };
                let padded = inner.len;
                let mut a = vec![C::new(0.0, 0.0); padded];
                for n in 0..self.len {
                    a[n] = line[n] * chirp[n];
                }
                inner.transform_line(&mut a, Direction::Forward);
                for (av, bv) in a.iter_mut().zip(filter.iter()) {
                    *av *= *bv;
                }
                inner.transform_line(&mut a, Direction::Inverse);
                let scale = 1.0 as Real / padded as Real;
                for k in 0..self.len {
                    line[k] = a[k] * scale * chirp[k];
                }
            }
        }
    }
}

/// In-place iterative radix-2 DIT with a strided shared twiddle table.
fn radix2(a: &mut [C], log2: u32, tw: &[C]) {
    let n = a.len();
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
    let shift = usize::BITS - log2;
    for i in 0..n {
        let j = i.reverse_bits() >> shift;
        if i < j {
            a.swap(i, j);
        }
    }
    let mut m = 2usize;
    while m <= n {
        let half = m / 2;
        let step = n / m;
        let mut start = 0;
        while start < n {
            let mut tidx = 0;
            for k in start..start + half {
                let w = tw[tidx];
                let t = w * a[k + half];
                let u = a[k];
                a[k] = u + t;
                a[k + half] = u - t;
                tidx += step;
            }
            start += m;
        }
        m <<= 1;
    }
}

/// Cached 3D transform plan for one grid.
pub struct Fft3 {
    grid: GridSpec,
    plan_x: AxisPlan,
    plan_y: AxisPlan,
    plan_z: AxisPlan,
}

impl Fft3 {
    pub fn new(grid: GridSpec) -> Self {
        let [mx, my, mz] = grid.matrix();
        Fft3 {
            grid,
            plan_x: AxisPlan::new(mx),
            plan_y: AxisPlan::new(my),
            plan_z: AxisPlan::new(mz),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// In-place 3D transform; inverse includes the `1/N` scale.
    pub fn process(&self, data: &mut Vec<C>, dir: Direction) {
        let [mx, my, mz] = self.grid.matrix();
        let n = mx * my * mz;
        assert_eq!(data.len(), n);
        let mut buf = vec![C::new(0.0, 0.0); n];

        // pass 1: x lines are contiguous in (x,y,z) order
        for_each_chunk_mut(&mut data[..], mx, |_, line| {
            self.plan_x.transform_line(line, dir);
        });

        // pass 2: gather y lines from (x,y,z), write (y,z,x)
        {
            let src = &data[..];
            for_each_chunk_mut(&mut buf[..], my, |c, line| {
                let x = c / mz;
                let z = c % mz;
                let base = x + mx * my * z;
                for (y, slot) in line.iter_mut().enumerate() {
                    *slot = src[base + mx * y];
                }
                self.plan_y.transform_line(line, dir);
            });
        }

        // pass 3: gather z lines from (y,z,x), write (z,x,y)
        {
            let src = &buf[..];
            for_each_chunk_mut(&mut data[..], mz, |c, line| {
                let y = c / mx;
                let x = c % mx;
                let base = y + my * mz * x;
                for (z, slot) in line.iter_mut().enumerate() {
                    *slot = src[base + my * z];
                }
                self.plan_z.transform_line(line, dir);
            });
        }

        // pass 4: permute (z,x,y) back to (x,y,z); fold in inverse scaling
        let scale: Real = match dir {
            Direction::Forward => 1.0,
            Direction::Inverse => 1.0 as Real / n as Real,
        };
        {
            let src = &data[..];
            for_each_chunk_mut(&mut buf[..], mx, |c, row| {
                let y = c % my;
                let z = c / my;
                let base = z + mz * mx * y;
                for (x, slot) in row.iter_mut().enumerate() {
                    *slot = src[base + mz * x] * scale;
                }
            });
        }
        core::mem::swap(data, &mut buf);
    }
}

/// Ratio of imaginary residue to the real peak tolerated by
/// [`ifft3_real`]; anything above signals a broken operator chain.
pub const RESIDUE_RATIO: Real = 1e-5;

/// Forward 3D DFT of a real volume (unscaled).
pub fn fft3(v: &ScalarVolume, plan: &Fft3) -> ComplexSpectrum {
    assert_eq!(v.grid(), plan.grid(), "fft3 plan grid mismatch");
    let mut data: Vec<C> = v.data().iter().map(|&r| C::new(r, 0.0)).collect();
    plan.process(&mut data, Direction::Forward);
    ComplexSpectrum::new(v.grid().clone(), data)
}

/// Inverse 3D DFT (scaled by `1/N`) of a spectrum expected to describe a real
/// volume. The imaginary residue is checked against
/// `RESIDUE_RATIO * max|real|` (plus a floor at rounding scale for
/// mathematically-zero outputs) and the call fails if it is exceeded.
pub fn ifft3_real(s: &ComplexSpectrum, plan: &Fft3) -> Result<ScalarVolume> {
    assert_eq!(s.grid(), plan.grid(), "ifft3 plan grid mismatch");
    let n = s.grid().len();
    let spec_peak = s
        .data()
        .iter()
        .fold(0.0 as Real, |m, c| m.max(c.re.abs()).max(c.im.abs()));
    let mut data = s.data().to_vec();
    plan.process(&mut data, Direction::Inverse);

    let mut max_re: Real = 0.0;
    let mut max_im: Real = 0.0;
    for c in &data {
        max_re = max_re.max(c.re.abs());
        max_im = max_im.max(c.im.abs());
    }
    // The floor keeps exact-zero results (e.g. the operator applied to a
    // constant) from being rejected over pure rounding noise.
    let floor = Real::EPSILON * 1024.0 * (spec_peak / n as Real);
    let tol = RESIDUE_RATIO * max_re + floor;
    if max_im > tol {
        return Err(Error::ImaginaryResidue { max_im: max_im as f64, tol: tol as f64 });
    }
    Ok(ScalarVolume::same_data_grid(
        s.grid(),
        data.iter().map(|c| c.re).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::naive_dft3;
    use crate::rng::Rng;

    fn random_volume(grid: GridSpec, seed: u64) -> ScalarVolume {
        let mut rng = Rng::new(seed);
        let data = (0..grid.len())
            .map(|_| (rng.next_f64() * 2.0 - 1.0) as Real)
            .collect();
        ScalarVolume::from_vec(grid, data).unwrap()
    }

    #[test]
    fn zeros_stay_zeros() {
        let g = GridSpec::isotropic([4, 4, 4]).unwrap();
        let plan = Fft3::new(g.clone());
        let s = fft3(&ScalarVolume::zeros(g), &plan);
        assert!(s.data().iter().all(|c| c.re == 0.0 && c.im == 0.0));
        let back = ifft3_real(&s, &plan).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_volume_concentrates_at_dc() {
        let g = GridSpec::isotropic([4, 4, 4]).unwrap();
        let plan = Fft3::new(g.clone());
        let c = 0.37 as Real;
        let v = ScalarVolume::from_fn(g, |_, _, _| c);
        let s = fft3(&v, &plan);
        assert!((s.data()[0].re - c * 64.0).abs() < 1e-12);
        assert!(s.data()[0].im.abs() < 1e-12);
        for bin in &s.data()[1..] {
            assert!(bin.re.abs() < 1e-12 && bin.im.abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_dft_on_4cubed() {
        // [DERIVED] O(N^2) direct DFT sum oracle
        let g = GridSpec::isotropic([4, 4, 4]).unwrap();
        let plan = Fft3::new(g.clone());
        let v = random_volume(g, 99);
        let fast = fft3(&v, &plan);
        let slow = naive_dft3(&v);
        for (f, s) in fast.data().iter().zip(slow.iter()) {
            assert!((f.re as f64 - s.re).abs() < 1e-10, "{} vs {}", f.re, s.re);
            assert!((f.im as f64 - s.im).abs() < 1e-10);
        }
    }

    #[test]
    fn matches_naive_dft_on_non_pow2() {
        let g = GridSpec::isotropic([6, 3, 5]).unwrap();
        let plan = Fft3::new(g.clone());
        let v = random_volume(g, 12);
        let fast = fft3(&v, &plan);
        let slow = naive_dft3(&v);
        for (f, s) in fast.data().iter().zip(slow.iter()) {
            assert!((f.re as f64 - s.re).abs() < 1e-10);
            assert!((f.im as f64 - s.im).abs() < 1e-10);
        }
    }

    #[test]
    fn round_trip_within_double_tolerance() {
        for (dims, seed) in [([8, 8, 8], 1u64), ([4, 6, 10], 2), ([16, 4, 2], 3)] {
            let g = GridSpec::isotropic(dims).unwrap();
            let plan = Fft3::new(g.clone());
            let v = random_volume(g, seed);
            let back = ifft3_real(&fft3(&v, &plan), &plan).unwrap();
            let peak = v.max_abs();
            for (a, b) in v.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 1e-12 * peak, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn parseval_holds() {
        let g = GridSpec::isotropic([8, 8, 8]).unwrap();
        let plan = Fft3::new(g.clone());
        let v = random_volume(g, 5);
        let s = fft3(&v, &plan);
        let time_energy = v.norm_sq() as f64 * 512.0;
        let freq_energy: f64 = s.data().iter().map(|c| (c.norm_sqr()) as f64).sum();
        assert!(
            (time_energy - freq_energy).abs() <= 1e-6 * time_energy,
            "{time_energy} vs {freq_energy}"
        );
    }

    #[test]
    fn hermitian_symmetry_of_real_spectra() {
        for dims in [[4, 4, 4], [6, 5, 3]] {
            let g = GridSpec::isotropic(dims).unwrap();
            let plan = Fft3::new(g.clone());
            let v = random_volume(g.clone(), 31);
            let s = fft3(&v, &plan);
            let [mx, my, mz] = dims;
            let peak = s
                .data()
                .iter()
                .fold(0.0 as Real, |m, c| m.max(c.norm_sqr().sqrt()));
            for z in 0..mz {
                for y in 0..my {
                    for x in 0..mx {
                        let a = s.data()[g.index(x, y, z)];
                        let b = s.data()
                            [g.index((mx - x) % mx, (my - y) % my, (mz - z) % mz)];
                        assert!((a.re - b.re).abs() <= 1e-10 * peak);
                        assert!((a.im + b.im).abs() <= 1e-10 * peak);
                    }
                }
            }
        }
    }

    #[test]
    fn excessive_residue_is_rejected() {
        let g = GridSpec::isotropic([4, 4, 4]).unwrap();
        let plan = Fft3::new(g.clone());
        let v = random_volume(g.clone(), 8);
        let mut s = fft3(&v, &plan);
        // break Hermitian symmetry hard: zero one half-pair partner
        s.data_mut()[g.index(1, 0, 0)] = C::new(50.0, 50.0);
        assert!(matches!(
            ifft3_real(&s, &plan),
            Err(Error::ImaginaryResidue { .. })
        ));
    }
}
