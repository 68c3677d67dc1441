//! Layer primitives with hand-derived forward and backward passes.
//!
//! Feature maps are channel-major (each channel a contiguous x-fastest
//! volume). The 3x3x3 convolution walks output rows with up to eight output
//! channels blocked per pass so each loaded input row feeds eight fused
//! multiply-add chains; that structure, not the operation count, is what
//! sets throughput. Weight-gradient reductions accumulate into eight fixed
//! lanes (lane = x mod 8) folded in a fixed order at the end, so results do
//! not depend on the SIMD width the compiler picks.
//!
//! Backward through the input of a 3x3x3 convolution reuses the forward
//! kernel with channel-transposed, tap-reversed weights; correctness of that
//! identity is pinned by the finite-difference suites.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath::fmadd;
use crate::parallel::for_each_chunk_mut_any;
use crate::Real;

/// Rows longer than this are rejected at network entry. Not a power of two:
/// the accumulator block strides by `MAX_ROW * 8` bytes between channels,
/// and a power-of-two stride would alias all eight rows onto the same L1
/// sets.
pub(crate) const MAX_ROW: usize = 264;

/// Channel-major stack of 3D volumes.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FeatureMap {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<Real>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        FeatureMap { channels, dims, data: vec![0.0; channels * dims[0] * dims[1] * dims[2]] }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[Real] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

}

#[inline(always)]
fn fma3(rm: Real, r0: Real, rp: Real, w: &[Real; 3], a: Real) -> Real {
    fmadd(w[0], rm, fmadd(w[1], r0, fmadd(w[2], rp, a)))
}

/// acc[k][x] += sum_dx w[k][dx] * r[x + dx - 1], zero-padded at row ends.
#[inline]
fn row_taps<const K: usize>(acc: &mut [[Real; MAX_ROW]], mx: usize, r: &[Real], w: &[[Real; 3]]) {
    let r = &r[..mx];
    if mx == 1 {
        for k in 0..K {
            acc[k][0] = fmadd(w[k][1], r[0], acc[k][0]);
        }
        return;
    }
    for k in 0..K {
        acc[k][0] = fmadd(w[k][1], r[0], fmadd(w[k][2], r[1], acc[k][0]));
    }
    for x in 1..mx - 1 {
        let (rm, r0, rp) = (r[x - 1], r[x], r[x + 1]);
        for k in 0..K {
            acc[k][x] = fma3(rm, r0, rp, &w[k], acc[k][x]);
        }
    }
    let x = mx - 1;
    for k in 0..K {
        acc[k][x] = fmadd(w[k][0], r[x - 1], fmadd(w[k][1], r[x], acc[k][x]));
    }
}

/// One block of up to eight output channels over the whole volume.
fn conv3_block<const K: usize>(
    out_block: &mut [Real],
    inp: &FeatureMap,
    w: &[Real],
    bias: Option<&[Real]>,
    co0: usize,
) {
    let [mx, my, mz] = inp.dims;
    let n = inp.voxels();
    let c_in = inp.channels;
    let w_stride = c_in * 27;
    let mut acc = [[0.0 as Real; MAX_ROW]; 8];
    for z in 0..mz {
        for y in 0..my {
            let row0 = (z * my + y) * mx;
            for k in 0..K {
                let b = bias.map_or(0.0, |b| b[co0 + k]);
                acc[k][..mx].fill(b);
            }
            for ci in 0..c_in {
                let ch = inp.channel(ci);
                for dz in 0..3usize {
                    let zi = z + dz;
                    if zi < 1 || zi > mz {
                        continue;
                    }
                    let zi = zi - 1;
                    for dy in 0..3usize {
                        let yi = y + dy;
                        if yi < 1 || yi > my {
                            continue;
                        }
                        let yi = yi - 1;
                        let r = &ch[(zi * my + yi) * mx..(zi * my + yi) * mx + mx];
                        let t = ci * 27 + dz * 9 + dy * 3;
                        let mut wk = [[0.0 as Real; 3]; 8];
                        for (k, wkk) in wk.iter_mut().enumerate().take(K) {
                            let base = (co0 + k) * w_stride + t;
                            *wkk = [w[base], w[base + 1], w[base + 2]];
                        }
                        row_taps::<K>(&mut acc, mx, r, &wk);
                    }
                }
            }
            for k in 0..K {
                out_block[k * n + row0..k * n + row0 + mx].copy_from_slice(&acc[k][..mx]);
            }
        }
    }
}

/// 3x3x3 convolution, stride 1, zero padding 1; output grid equals input
/// grid. `w` is laid out `[c_out][c_in][dz][dy][dx]`.
pub(crate) fn conv3_forward(
    inp: &FeatureMap,
    w: &[Real],
    bias: Option<&[Real]>,
    c_out: usize,
) -> FeatureMap {
    let n = inp.voxels();
    debug_assert_eq!(w.len(), c_out * inp.channels * 27);
    assert!(inp.dims[0] <= MAX_ROW, "row length exceeds conv kernel limit");
    let mut out = FeatureMap::zeros(c_out, inp.dims);
    for_each_chunk_mut_any(&mut out.data, 8 * n, |blk, chunk| {
        let co0 = blk * 8;
        let k = chunk.len() / n;
        match k {
            8 => conv3_block::<8>(chunk, inp, w, bias, co0),
            7 => conv3_block::<7>(chunk, inp, w, bias, co0),
            6 => conv3_block::<6>(chunk, inp, w, bias, co0),
            5 => conv3_block::<5>(chunk, inp, w, bias, co0),
            4 => conv3_block::<4>(chunk, inp, w, bias, co0),
            3 => conv3_block::<3>(chunk, inp, w, bias, co0),
            2 => conv3_block::<2>(chunk, inp, w, bias, co0),
            1 => conv3_block::<1>(chunk, inp, w, bias, co0),
            _ => unreachable!(),
        }
    });
    out
}

/// Gradient w.r.t. the convolution input: the same convolution with
/// channel-transposed, tap-reversed weights and no bias.
pub(crate) fn conv3_backward_input(
    dout: &FeatureMap,
    w: &[Real],
    c_in: usize,
) -> FeatureMap {
    let c_out = dout.channels;
    let mut wt = vec![0.0 as Real; w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            let src = (co * c_in + ci) * 27;
            let dst = (ci * c_out + co) * 27;
            for t in 0..27 {
                wt[dst + 26 - t] = w[src + t];
            }
        }
    }
    conv3_forward(dout, &wt, None, c_in)
}

/// Gradients w.r.t. convolution weights and bias.
pub(crate) fn conv3_backward_weights(
    inp: &FeatureMap,
    dout: &FeatureMap,
) -> (Vec<Real>, Vec<Real>) {
    let c_in = inp.channels;
    let c_out = dout.channels;
    let [mx, my, mz] = inp.dims;
    let mut dw = vec![0.0 as Real; c_out * c_in * 27];
    let mut db = vec![0.0 as Real; c_out];

    for_each_chunk_mut_any(&mut dw, c_in * 27, |co, dw_co| {
        dw_one(dw_co, inp, dout.channel(co));
    });

    for (co, db_co) in db.iter_mut().enumerate() {
        let mut s: Real = 0.0;
        for &d in dout.channel(co) {
            s += d;
        }
        *db_co = s;
    }
    (dw, db)
}

/// Weight gradients for one output channel against all input channels.
///
/// Eight fixed accumulation lanes per tap (lane = offset within an aligned
/// x-chunk): the reduction order is defined by the lane layout, not the
/// SIMD width, and each chunk is dependency-free so it vectorizes.
fn dw_one(dw_co: &mut [Real], inp: &FeatureMap, dch: &[Real]) {
    let c_in = inp.channels;
    let [mx, my, mz] = inp.dims;
    for ci in 0..c_in {
        let ich = inp.channel(ci);
        for dz in 0..3usize {
            for dy in 0..3usize {
                let mut l0 = [0.0 as Real; 8];
                let mut l1 = [0.0 as Real; 8];
                let mut l2 = [0.0 as Real; 8];
                let mut edge = [0.0 as Real; 3];
                for z in 0..mz {
                    let zi = z + dz;
                    if zi < 1 || zi > mz {
                        continue;
                    }
                    let zi = zi - 1;
                    for y in 0..my {
                        let yi = y + dy;
                        if yi < 1 || yi > my {
                            continue;
                        }
                        let yi = yi - 1;
                        let drow = &dch[(z * my + y) * mx..(z * my + y) * mx + mx];
                        let irow = &ich[(zi * my + yi) * mx..(zi * my + yi) * mx + mx];
                        // interior x in [1, mx-1): chunked panic-free views
                        // keep the lane arrays in registers
                        if mx >= 2 {
                            let n_int = mx - 2;
                            let take = n_int / 8;
                            let (d8, _) = drow[1..mx - 1].as_chunks::<8>();
                            let (im, _) = irow[0..n_int].as_chunks::<8>();
                            let (i0, _) = irow[1..1 + n_int].as_chunks::<8>();
                            let (ip, _) = irow[2..2 + n_int].as_chunks::<8>();
                            for k in 0..take {
                                let d = &d8[k];
                                let (a, b, c) = (&im[k], &i0[k], &ip[k]);
                                for j in 0..8 {
                                    l0[j] = fmadd(d[j], a[j], l0[j]);
                                    l1[j] = fmadd(d[j], b[j], l1[j]);
                                    l2[j] = fmadd(d[j], c[j], l2[j]);
                                }
                            }
                            let mut x = 1 + take * 8;
                            while x < mx - 1 {
                                let d = drow[x];
                                edge[0] = fmadd(d, irow[x - 1], edge[0]);
                                edge[1] = fmadd(d, irow[x], edge[1]);
                                edge[2] = fmadd(d, irow[x + 1], edge[2]);
                                x += 1;
                            }
                        }
                        // x = 0: taps dx=1,2; x = mx-1: taps dx=0,1
                        let d0 = drow[0];
                        edge[1] = fmadd(d0, irow[0], edge[1]);
                        if mx > 1 {
                            edge[2] = fmadd(d0, irow[1], edge[2]);
                            let dl = drow[mx - 1];
                            edge[0] = fmadd(dl, irow[mx - 2], edge[0]);
                            edge[1] = fmadd(dl, irow[mx - 1], edge[1]);
                        }
                    }
                }
                let base = ci * 27 + dz * 9 + dy * 3;
                for (dx, lanes) in [l0, l1, l2].iter().enumerate() {
                    let mut s = edge[dx];
                    for &lane in lanes {
                        s += lane;
                    }
                    dw_co[base + dx] = s;
                }
            }
        }
    }
}

/// Pointwise (1x1x1) convolution.
pub(crate) fn conv1_forward(
    inp: &FeatureMap,
    w: &[Real],
    bias: &[Real],
    c_out: usize,
) -> FeatureMap {
    let c_in = inp.channels;
    let n = inp.voxels();
    let mut out = FeatureMap::zeros(c_out, inp.dims);
    for_each_chunk_mut_any(&mut out.data, n, |co, och| {
        och.fill(bias[co]);
        for ci in 0..c_in {
            let wv = w[co * c_in + ci];
            for (o, &i) in och.iter_mut().zip(inp.channel(ci)) {
                *o = fmadd(wv, i, *o);
            }
        }
    });
    out
}

pub(crate) fn conv1_backward(
    inp: &FeatureMap,
    dout: &FeatureMap,
    w: &[Real],
) -> (FeatureMap, Vec<Real>, Vec<Real>) {
    let c_in = inp.channels;
    let c_out = dout.channels;
    let n = inp.voxels();
    let mut din = FeatureMap::zeros(c_in, inp.dims);
    for_each_chunk_mut_any(&mut din.data, n, |ci, ich| {
        for co in 0..c_out {
            let wv = w[co * c_in + ci];
            for (i, &d) in ich.iter_mut().zip(dout.channel(co)) {
                *i = fmadd(wv, d, *i);
            }
        }
    });
    let mut dw = vec![0.0 as Real; c_out * c_in];
    let mut db = vec![0.0 as Real; c_out];
    for co in 0..c_out {
        let dch = dout.channel(co);
        for ci in 0..c_in {
            let ich = inp.channel(ci);
            let mut s: Real = 0.0;
            for (&d, &i) in dch.iter().zip(ich) {
                s = fmadd(d, i, s);
            }
            dw[co * c_in + ci] = s;
        }
        let mut s: Real = 0.0;
        for &d in dch {
            s += d;
        }
        db[co] = s;
    }
    (din, dw, db)
}

/// Per-channel normalization over spatial voxels with learnable affine.
/// Returns the output, the normalized pre-affine values and per-channel
/// `1/sqrt(var + eps)` for the backward pass.
pub(crate) fn instance_norm_forward(
    inp: &FeatureMap,
    scale: &[Real],
    shift: &[Real],
    eps: Real,
) -> (FeatureMap, FeatureMap, Vec<Real>) {
    let nvox = inp.voxels();
    let n = nvox as Real;
    let mut out = FeatureMap::zeros(inp.channels, inp.dims);
    let mut xhat = FeatureMap::zeros(inp.channels, inp.dims);
    // stats[2c] = mean, stats[2c+1] = 1/sqrt(var + eps); each channel's
    // reduction runs whole on one task, so the split never reorders sums
    let mut stats = vec![0.0 as Real; 2 * inp.channels];
    for_each_chunk_mut_any(&mut stats, 2, |c, slot| {
        let x = inp.channel(c);
        let mut mean: Real = 0.0;
        for &v in x {
            mean += v;
        }
        mean /= n;
        let mut var: Real = 0.0;
        for &v in x {
            let d = v - mean;
            var = fmadd(d, d, var);
        }
        var /= n;
        slot[0] = mean;
        slot[1] = 1.0 as Real / crate::fmath::sqrt(var + eps);
    });
    for_each_chunk_mut_any(&mut xhat.data, nvox, |c, xh| {
        let (mean, is) = (stats[2 * c], stats[2 * c + 1]);
        for (o, &v) in xh.iter_mut().zip(inp.channel(c)) {
            *o = (v - mean) * is;
        }
    });
    for_each_chunk_mut_any(&mut out.data, nvox, |c, och| {
        let (g, b) = (scale[c], shift[c]);
        for (o, &xh) in och.iter_mut().zip(xhat.channel(c)) {
            *o = fmadd(g, xh, b);
        }
    });
    let inv_std = (0..inp.channels).map(|c| stats[2 * c + 1]).collect();
    (out, xhat, inv_std)
}

/// Full-statistics backward:
/// `dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))`
/// with `dxhat = dy * scale`; also returns (dscale, dshift).
pub(crate) fn instance_norm_backward(
    dout: &FeatureMap,
    xhat: &FeatureMap,
    inv_std: &[Real],
    scale: &[Real],
) -> (FeatureMap, Vec<Real>, Vec<Real>) {
    let c = dout.channels;
    let nvox = dout.voxels();
    let n = nvox as Real;
    let mut din = FeatureMap::zeros(c, dout.dims);
    // sums[2c] = sum(dy), sums[2c+1] = sum(dy * xhat)
    let mut sums = vec![0.0 as Real; 2 * c];
    for_each_chunk_mut_any(&mut sums, 2, |ch, slot| {
        let dy = dout.channel(ch);
        let xh = xhat.channel(ch);
        let mut sum_dy: Real = 0.0;
        let mut sum_dy_xh: Real = 0.0;
        for (&d, &x) in dy.iter().zip(xh) {
            sum_dy += d;
            sum_dy_xh = fmadd(d, x, sum_dy_xh);
        }
        slot[0] = sum_dy;
        slot[1] = sum_dy_xh;
    });
    for_each_chunk_mut_any(&mut din.data, nvox, |ch, dx| {
        let dy = dout.channel(ch);
        let xh = xhat.channel(ch);
        let g = scale[ch];
        let is = inv_std[ch];
        let mean_dxhat = g * sums[2 * ch] / n;
        let mean_dxhat_xhat = g * sums[2 * ch + 1] / n;
        for ((o, &d), &x) in dx.iter_mut().zip(dy).zip(xh) {
            *o = is * (g * d - mean_dxhat - x * mean_dxhat_xhat);
        }
    });
    let dscale = (0..c).map(|ch| sums[2 * ch + 1]).collect();
    let dshift = (0..c).map(|ch| sums[2 * ch]).collect();
    (din, dscale, dshift)
}

/// In-place rectifier.
pub(crate) fn relu_forward(fm: &mut FeatureMap) {
    for v in fm.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gate the upstream gradient by the forward output (`out > 0`).
pub(crate) fn relu_backward(dout: &mut FeatureMap, out: &FeatureMap) {
    for (d, &o) in dout.data.iter_mut().zip(out.data.iter()) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// 2x2x2 max pooling, stride 2; records the argmax (first index wins ties,
/// scanning dz, dy, dx with x fastest).
pub(crate) fn maxpool2_forward(inp: &FeatureMap) -> (FeatureMap, Vec<u32>) {
    let [mx, my, mz] = inp.dims;
    debug_assert!(mx % 2 == 0 && my % 2 == 0 && mz % 2 == 0);
    let odims = [mx / 2, my / 2, mz / 2];
    let on = odims[0] * odims[1] * odims[2];
    let mut out = FeatureMap::zeros(inp.channels, odims);
    let mut argmax = vec![0u32; inp.channels * on];
    for_each_chunk_mut_any(&mut argmax, on, |c, am| {
        let ich = inp.channel(c);
        let amx = odims[0];
        let amy = odims[1];
        for oz in 0..odims[2] {
            for oy in 0..amy {
                for ox in 0..amx {
                    let mut best = Real::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (2 * ox + dx)
                                    + mx * ((2 * oy + dy) + my * (2 * oz + dz));
                                if ich[i] > best {
                                    best = ich[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    am[ox + amx * (oy + amy * oz)] = best_i as u32;
                }
            }
        }
    });
    for_each_chunk_mut_any(&mut out.data, on, |c, och| {
        let ich = inp.channel(c);
        let am = &argmax[c * on..(c + 1) * on];
        for (o, &i) in och.iter_mut().zip(am) {
            *o = ich[i as usize];
        }
    });
    (out, argmax)
}

/// Route pooled gradients back to the recorded argmax voxels.
pub(crate) fn maxpool2_backward(
    dout: &FeatureMap,
    argmax: &[u32],
    in_dims: [usize; 3],
) -> FeatureMap {
    let on = dout.voxels();
    let mut din = FeatureMap::zeros(dout.channels, in_dims);
    let invox = in_dims[0] * in_dims[1] * in_dims[2];
    for_each_chunk_mut_any(&mut din.data, invox, |c, ich| {
        let dch = dout.channel(c);
        let am = &argmax[c * on..(c + 1) * on];
        for (o, &d) in dch.iter().enumerate() {
            ich[am[o] as usize] += d;
        }
    });
    din
}

/// Nearest-neighbour upsampling by two along each axis.
pub(crate) fn upsample2_forward(inp: &FeatureMap) -> FeatureMap {
    let [mx, my, mz] = inp.dims;
    let odims = [mx * 2, my * 2, mz * 2];
    let mut out = FeatureMap::zeros(inp.channels, odims);
    let ovox = odims[0] * odims[1] * odims[2];
    for_each_chunk_mut_any(&mut out.data, ovox, |c, och| {
        let ich = inp.channel(c);
        for z in 0..odims[2] {
            for y in 0..odims[1] {
                let irow = (z / 2 * my + y / 2) * mx;
                let orow = (z * odims[1] + y) * odims[0];
                for x in 0..odims[0] {
                    och[orow + x] = ich[irow + x / 2];
                }
            }
        }
    });
    out
}

/// Adjoint of nearest-neighbour upsampling: sum the 2x2x2 children.
pub(crate) fn upsample2_backward(dout: &FeatureMap) -> FeatureMap {
    let [ox, oy, _oz] = dout.dims;
    let idims = [dout.dims[0] / 2, dout.dims[1] / 2, dout.dims[2] / 2];
    let ivox = idims[0] * idims[1] * idims[2];
    let mut din = FeatureMap::zeros(dout.channels, idims);
    for_each_chunk_mut_any(&mut din.data, ivox, |c, ich| {
        let dch = dout.channel(c);
        for z in 0..idims[2] {
            for y in 0..idims[1] {
                let irow = (z * idims[1] + y) * idims[0];
                for x in 0..idims[0] {
                    let mut s: Real = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (2 * x + dx) + ox * ((2 * y + dy) + oy * (2 * z + dz));
                                s += dch[i];
                            }
                        }
                    }
                    ich[irow + x] = s;
                }
            }
        }
    });
    din
}

/// Channel concatenation `[a, b]`.
pub(crate) fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    debug_assert_eq!(a.dims, b.dims);
    let mut out = FeatureMap::zeros(a.channels + b.channels, a.dims);
    let n = a.voxels();
    out.data[..a.channels * n].copy_from_slice(&a.data);
    out.data[a.channels * n..].copy_from_slice(&b.data);
    out
}

/// Split a concatenated gradient back into the two branches.
pub(crate) fn split_grad(dout: &FeatureMap, ca: usize) -> (FeatureMap, FeatureMap) {
    let n = dout.voxels();
    let cb = dout.channels - ca;
    let da = FeatureMap {
        channels: ca,
        dims: dout.dims,
        data: dout.data[..ca * n].to_vec(),
    };
    let db = FeatureMap {
        channels: cb,
        dims: dout.dims,
        data: dout.data[ca * n..].to_vec(),
    };
    (da, db)
}
