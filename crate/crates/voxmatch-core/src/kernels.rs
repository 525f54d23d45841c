//! Numeric kernels behind the graph ops: 3D convolution, trilinear warping
//! and upsampling, group normalization, pooling, linear layers.
//!
//! Every kernel is deterministic: parallel loops only split over output
//! elements, and each output element is accumulated by one sequential loop,
//! so results are bit-identical regardless of thread scheduling.

use rayon::prelude::*;

/// Shape of a rank-5 tensor [n, c, z, y, x].
pub type Shape5 = [usize; 5];

pub fn conv_out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

#[inline]
fn idx5(s: &Shape5, n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
    (((n * s[1] + c) * s[2] + z) * s[3] + y) * s[4] + x
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

/// Zero-padded 3D convolution. `x` is [n, ci, z, y, x], `w` is
/// [co, ci, k, k, k], optional bias [co].
pub fn conv3d_forward(
    x: &[f64],
    xs: &Shape5,
    w: &[f64],
    ws: &Shape5,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Shape5) {
    let (n, ci, z, y, xx) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (co, k) = (ws[0], ws[2]);
    debug_assert_eq!(ws[1], ci);
    let oz = conv_out_extent(z, k, stride, pad);
    let oy = conv_out_extent(y, k, stride, pad);
    let ox = conv_out_extent(xx, k, stride, pad);
    let os: Shape5 = [n, co, oz, oy, ox];
    let mut out = vec![0.0; n * co * oz * oy * ox];

    out.par_chunks_mut(oy * ox).enumerate().for_each(|(slab, chunk)| {
        let zc = slab % oz;
        let cc = (slab / oz) % co;
        let nc = slab / (oz * co);
        if let Some(b) = bias {
            chunk.fill(b[cc]);
        }
        for c_in in 0..ci {
            for kz in 0..k {
                let iz = (zc * stride + kz) as isize - pad as isize;
                if iz < 0 || iz >= z as isize {
                    continue;
                }
                let iz = iz as usize;
                for ky in 0..k {
                    for yo in 0..oy {
                        let iy = (yo * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= y as isize {
                            continue;
                        }
                        let in_row_base = idx5(xs, nc, c_in, iz, iy as usize, 0);
                        let in_row = &x[in_row_base..in_row_base + xx];
                        let out_row = &mut chunk[yo * ox..yo * ox + ox];
                        for kx in 0..k {
                            let wv = w[(((cc * ci + c_in) * k + kz) * k + ky) * k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            if stride == 1 {
                                let off = kx as isize - pad as isize;
                                let lo = (-off).max(0) as usize;
                                let hi = ((xx as isize - off).min(ox as isize)).max(0) as usize;
                                if lo >= hi {
                                    continue;
                                }
                                let src = &in_row[(lo as isize + off) as usize
                                    ..(hi as isize + off) as usize];
                                for (d, s) in out_row[lo..hi].iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for (xo, d) in out_row.iter_mut().enumerate() {
                                    let ix = (xo * stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < xx as isize {
                                        *d += wv * in_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    (out, os)
}

/// Gradient of conv3d w.r.t. its input.
pub fn conv3d_grad_input(
    up: &[f64],
    os: &Shape5,
    w: &[f64],
    ws: &Shape5,
    xs: &Shape5,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (co, ci, k) = (ws[0], ws[1], ws[2]);
    if stride == 1 {
        // Full correlation with the channel-transposed, spatially flipped
        // kernel is itself a stride-1 convolution.
        let mut wt = vec![0.0; w.len()];
        for o in 0..co {
            for i in 0..ci {
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            wt[(((i * co + o) * k + (k - 1 - kz)) * k + (k - 1 - ky)) * k
                                + (k - 1 - kx)] =
                                w[(((o * ci + i) * k + kz) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
        let wts: Shape5 = [ci, co, k, k, k];
        let (dx, ds) = conv3d_forward(up, os, &wt, &wts, None, 1, k - 1 - pad);
        debug_assert_eq!(&ds, xs);
        dx
    } else {
        let (n, z, y, xx) = (xs[0], xs[2], xs[3], xs[4]);
        let (oz, oy, ox) = (os[2], os[3], os[4]);
        let mut dx = vec![0.0; n * ci * z * y * xx];
        dx.par_chunks_mut(y * xx).enumerate().for_each(|(slab, chunk)| {
            let iz = slab % z;
            let c_in = (slab / z) % ci;
            let nc = slab / (z * ci);
            for iy in 0..y {
                for ix in 0..xx {
                    let mut acc = 0.0;
                    for o in 0..co {
                        for kz in 0..k {
                            let t = iz as isize + pad as isize - kz as isize;
                            if t < 0 || t % stride as isize != 0 {
                                continue;
                            }
                            let zo = (t / stride as isize) as usize;
                            if zo >= oz {
                                continue;
                            }
                            for ky in 0..k {
                                let t = iy as isize + pad as isize - ky as isize;
                                if t < 0 || t % stride as isize != 0 {
                                    continue;
                                }
                                let yo = (t / stride as isize) as usize;
                                if yo >= oy {
                                    continue;
                                }
                                for kx in 0..k {
                                    let t = ix as isize + pad as isize - kx as isize;
                                    if t < 0 || t % stride as isize != 0 {
                                        continue;
                                    }
                                    let xo = (t / stride as isize) as usize;
                                    if xo >= ox {
                                        continue;
                                    }
                                    acc += up[idx5(os, nc, o, zo, yo, xo)]
                                        * w[(((o * ci + c_in) * k + kz) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    chunk[iy * xx + ix] = acc;
                }
            }
        });
        dx
    }
}

/// Gradient of conv3d w.r.t. the kernel.
pub fn conv3d_grad_weight(
    up: &[f64],
    os: &Shape5,
    x: &[f64],
    xs: &Shape5,
    ws: &Shape5,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (n, z, y, xx) = (xs[0], xs[2], xs[3], xs[4]);
    let (co, ci, k) = (ws[0], ws[1], ws[2]);
    let (oz, oy, ox) = (os[2], os[3], os[4]);
    let mut dw = vec![0.0; co * ci * k * k * k];
    dw.par_chunks_mut(ci * k * k * k).enumerate().for_each(|(o, wchunk)| {
        for c_in in 0..ci {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for nc in 0..n {
                            for zo in 0..oz {
                                let iz = (zo * stride + kz) as isize - pad as isize;
                                if iz < 0 || iz >= z as isize {
                                    continue;
                                }
                                for yo in 0..oy {
                                    let iy = (yo * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= y as isize {
                                        continue;
                                    }
                                    let up_row = {
                                        let b = idx5(os, nc, o, zo, yo, 0);
                                        &up[b..b + ox]
                                    };
                                    let in_base = idx5(xs, nc, c_in, iz as usize, iy as usize, 0);
                                    if stride == 1 {
                                        let off = kx as isize - pad as isize;
                                        let lo = (-off).max(0) as usize;
                                        let hi =
                                            ((xx as isize - off).min(ox as isize)).max(0) as usize;
                                        if lo >= hi {
                                            continue;
                                        }
                                        let in_row = &x[(in_base as isize + lo as isize + off)
                                            as usize
                                            ..(in_base as isize + hi as isize + off) as usize];
                                        for (u, s) in up_row[lo..hi].iter().zip(in_row) {
                                            acc += u * s;
                                        }
                                    } else {
                                        for (xo, u) in up_row.iter().enumerate() {
                                            let ix =
                                                (xo * stride + kx) as isize - pad as isize;
                                            if ix >= 0 && ix < xx as isize {
                                                acc += u * x[in_base + ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        wchunk[((c_in * k + kz) * k + ky) * k + kx] = acc;
                    }
                }
            }
        }
    });
    dw
}

pub fn conv3d_grad_bias(up: &[f64], os: &Shape5) -> Vec<f64> {
    let (n, co) = (os[0], os[1]);
    let spatial = os[2] * os[3] * os[4];
    let mut db = vec![0.0; co];
    for nc in 0..n {
        for o in 0..co {
            let base = (nc * co + o) * spatial;
            let mut acc = 0.0;
            for v in &up[base..base + spatial] {
                acc += v;
            }
            db[o] += acc;
        }
    }
    db
}

// ---------------------------------------------------------------------------
// trilinear upsample x2 (edge-replicated)
// ---------------------------------------------------------------------------

/// Per-axis tap table: output index -> (lo index, hi index, hi weight).
fn upsample_taps(extent: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * extent)
        .map(|o| {
            let c = o as f64 * 0.5 - 0.25;
            let f = c - c.floor();
            let i0 = c.floor() as isize;
            let lo = i0.clamp(0, extent as isize - 1) as usize;
            let hi = (i0 + 1).clamp(0, extent as isize - 1) as usize;
            (lo, hi, f)
        })
        .collect()
}

pub fn upsample2_forward(x: &[f64], xs: &Shape5) -> (Vec<f64>, Shape5) {
    let (n, c, z, y, xx) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let os: Shape5 = [n, c, 2 * z, 2 * y, 2 * xx];
    let (tz, ty, tx) = (upsample_taps(z), upsample_taps(y), upsample_taps(xx));
    let mut out = vec![0.0; n * c * 8 * z * y * xx];
    out.par_chunks_mut(4 * y * xx).enumerate().for_each(|(slab, chunk)| {
        let zo = slab % (2 * z);
        let cc = (slab / (2 * z)) % c;
        let nc = slab / (2 * z * c);
        let (z0, z1, fz) = tz[zo];
        for yo in 0..2 * y {
            let (y0, y1, fy) = ty[yo];
            for xo in 0..2 * xx {
                let (x0, x1, fx) = tx[xo];
                let s = |zz: usize, yy: usize, xv: usize| x[idx5(xs, nc, cc, zz, yy, xv)];
                let c00 = s(z0, y0, x0) * (1.0 - fx) + s(z0, y0, x1) * fx;
                let c01 = s(z0, y1, x0) * (1.0 - fx) + s(z0, y1, x1) * fx;
                let c10 = s(z1, y0, x0) * (1.0 - fx) + s(z1, y0, x1) * fx;
                let c11 = s(z1, y1, x0) * (1.0 - fx) + s(z1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                chunk[yo * 2 * xx + xo] = c0 * (1.0 - fz) + c1 * fz;
            }
        }
    });
    (out, os)
}

pub fn upsample2_grad_input(up: &[f64], xs: &Shape5) -> Vec<f64> {
    let (n, c, z, y, xx) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let os: Shape5 = [n, c, 2 * z, 2 * y, 2 * xx];
    let (tz, ty, tx) = (upsample_taps(z), upsample_taps(y), upsample_taps(xx));
    let mut dx = vec![0.0; n * c * z * y * xx];
    dx.par_chunks_mut(z * y * xx).enumerate().for_each(|(slab, chunk)| {
        let cc = slab % c;
        let nc = slab / c;
        for zo in 0..2 * z {
            let (z0, z1, fz) = tz[zo];
            for yo in 0..2 * y {
                let (y0, y1, fy) = ty[yo];
                for xo in 0..2 * xx {
                    let (x0, x1, fx) = tx[xo];
                    let u = up[idx5(&os, nc, cc, zo, yo, xo)];
                    if u == 0.0 {
                        continue;
                    }
                    let mut add = |zz: usize, yy: usize, xv: usize, w: f64| {
                        chunk[(zz * y + yy) * xx + xv] += u * w;
                    };
                    add(z0, y0, x0, (1.0 - fz) * (1.0 - fy) * (1.0 - fx));
                    add(z0, y0, x1, (1.0 - fz) * (1.0 - fy) * fx);
                    add(z0, y1, x0, (1.0 - fz) * fy * (1.0 - fx));
                    add(z0, y1, x1, (1.0 - fz) * fy * fx);
                    add(z1, y0, x0, fz * (1.0 - fy) * (1.0 - fx));
                    add(z1, y0, x1, fz * (1.0 - fy) * fx);
                    add(z1, y1, x0, fz * fy * (1.0 - fx));
                    add(z1, y1, x1, fz * fy * fx);
                }
            }
        }
    });
    dx
}

// ---------------------------------------------------------------------------
// group normalization
// ---------------------------------------------------------------------------

pub fn groupnorm_forward(
    x: &[f64],
    xs: &Shape5,
    gamma: &[f64],
    beta: &[f64],
    groups: usize,
    eps: f64,
) -> Vec<f64> {
    let (_, c) = (xs[0], xs[1]);
    let spatial = xs[2] * xs[3] * xs[4];
    let cg = c / groups;
    let m = cg * spatial;
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(cg * spatial).enumerate().for_each(|(gi, chunk)| {
        let g = gi % groups;
        let nc = gi / groups;
        let base = (nc * c + g * cg) * spatial;
        let src = &x[base..base + cg * spatial];
        let mut mean = 0.0;
        for v in src {
            mean += v;
        }
        mean /= m as f64;
        let mut var = 0.0;
        for v in src {
            let d = v - mean;
            var += d * d;
        }
        var /= m as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for ci in 0..cg {
            let gsc = gamma[g * cg + ci];
            let bsc = beta[g * cg + ci];
            for p in 0..spatial {
                chunk[ci * spatial + p] = (src[ci * spatial + p] - mean) * inv_std * gsc + bsc;
            }
        }
    });
    out
}

pub fn groupnorm_backward(
    up: &[f64],
    x: &[f64],
    xs: &Shape5,
    gamma: &[f64],
    groups: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c) = (xs[0], xs[1]);
    let spatial = xs[2] * xs[3] * xs[4];
    let cg = c / groups;
    let m = cg * spatial;
    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(cg * spatial).enumerate().for_each(|(gi, chunk)| {
        let g = gi % groups;
        let nc = gi / groups;
        let base = (nc * c + g * cg) * spatial;
        let src = &x[base..base + cg * spatial];
        let upg = &up[base..base + cg * spatial];
        let mut mean = 0.0;
        for v in src {
            mean += v;
        }
        mean /= m as f64;
        let mut var = 0.0;
        for v in src {
            let d = v - mean;
            var += d * d;
        }
        var /= m as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        // s1 = sum(g_i), s2 = sum(g_i * xhat_i) with g_i = up_i * gamma_c
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for ci in 0..cg {
            let gsc = gamma[g * cg + ci];
            for p in 0..spatial {
                let gi_v = upg[ci * spatial + p] * gsc;
                s1 += gi_v;
                s2 += gi_v * (src[ci * spatial + p] - mean) * inv_std;
            }
        }
        let inv_m = 1.0 / m as f64;
        for ci in 0..cg {
            let gsc = gamma[g * cg + ci];
            for p in 0..spatial {
                let xhat = (src[ci * spatial + p] - mean) * inv_std;
                let gi_v = upg[ci * spatial + p] * gsc;
                chunk[ci * spatial + p] = inv_std * (gi_v - s1 * inv_m - xhat * s2 * inv_m);
            }
        }
    });

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for nc in 0..n {
        for g in 0..groups {
            let base = (nc * c + g * cg) * spatial;
            let src = &x[base..base + cg * spatial];
            let upg = &up[base..base + cg * spatial];
            let mut mean = 0.0;
            for v in src {
                mean += v;
            }
            mean /= m as f64;
            let mut var = 0.0;
            for v in src {
                let d = v - mean;
                var += d * d;
            }
            var /= m as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for ci in 0..cg {
                let mut dg = 0.0;
                let mut db = 0.0;
                for p in 0..spatial {
                    let u = upg[ci * spatial + p];
                    dg += u * (src[ci * spatial + p] - mean) * inv_std;
                    db += u;
                }
                dgamma[g * cg + ci] += dg;
                dbeta[g * cg + ci] += db;
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// global average pool
// ---------------------------------------------------------------------------

pub fn gap_forward(x: &[f64], xs: &Shape5) -> (Vec<f64>, Vec<usize>) {
    let (n, c) = (xs[0], xs[1]);
    let spatial = xs[2] * xs[3] * xs[4];
    let mut out = vec![0.0; n * c];
    for nc in 0..n {
        for cc in 0..c {
            let base = (nc * c + cc) * spatial;
            let mut acc = 0.0;
            for v in &x[base..base + spatial] {
                acc += v;
            }
            out[nc * c + cc] = acc / spatial as f64;
        }
    }
    (out, vec![n, c])
}

pub fn gap_grad_input(up: &[f64], xs: &Shape5) -> Vec<f64> {
    let (n, c) = (xs[0], xs[1]);
    let spatial = xs[2] * xs[3] * xs[4];
    let mut dx = vec![0.0; n * c * spatial];
    for nc in 0..n {
        for cc in 0..c {
            let g = up[nc * c + cc] / spatial as f64;
            let base = (nc * c + cc) * spatial;
            for v in &mut dx[base..base + spatial] {
                *v = g;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// y[n, o] = b[o] + sum_i x[n, i] * w[o, i]
pub fn linear_forward(x: &[f64], n: usize, fin: usize, w: &[f64], fout: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * fout];
    for nc in 0..n {
        let xrow = &x[nc * fin..(nc + 1) * fin];
        for o in 0..fout {
            let wrow = &w[o * fin..(o + 1) * fin];
            let mut acc = b[o];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            out[nc * fout + o] = acc;
        }
    }
    out
}

pub fn linear_grads(
    up: &[f64],
    x: &[f64],
    n: usize,
    fin: usize,
    w: &[f64],
    fout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * fin];
    let mut dw = vec![0.0; fout * fin];
    let mut db = vec![0.0; fout];
    for nc in 0..n {
        for o in 0..fout {
            let u = up[nc * fout + o];
            db[o] += u;
            for i in 0..fin {
                dx[nc * fin + i] += u * w[o * fin + i];
                dw[o * fin + i] += u * x[nc * fin + i];
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// trilinear warp (pull-based, zero outside)
// ---------------------------------------------------------------------------

/// Precomputed sampling taps for one output voxel.
#[derive(Clone, Copy)]
pub struct WarpTap {
    pub i0: [isize; 3], // (z, y, x) floor indices
    pub f: [f64; 3],    // fractional parts (z, y, x)
}

/// Computes the tap table for one batch member. `dvf` points at that
/// member's [3, z, y, x] block with channel order (u_x, u_y, u_z).
pub fn warp_taps(dvf: &[f64], dims: [usize; 3]) -> Vec<WarpTap> {
    let (z, y, x) = (dims[0], dims[1], dims[2]);
    let spatial = z * y * x;
    let mut taps = Vec::with_capacity(spatial);
    for zi in 0..z {
        for yi in 0..y {
            for xi in 0..x {
                let p = (zi * y + yi) * x + xi;
                let sx = xi as f64 + dvf[p];
                let sy = yi as f64 + dvf[spatial + p];
                let sz = zi as f64 + dvf[2 * spatial + p];
                let fz = sz.floor();
                let fy = sy.floor();
                let fx = sx.floor();
                taps.push(WarpTap {
                    i0: [fz as isize, fy as isize, fx as isize],
                    f: [sz - fz, sy - fy, sx - fx],
                });
            }
        }
    }
    taps
}

#[inline]
fn tap_value(src: &[f64], dims: [usize; 3], z: isize, y: isize, x: isize) -> f64 {
    if z < 0
        || y < 0
        || x < 0
        || z >= dims[0] as isize
        || y >= dims[1] as isize
        || x >= dims[2] as isize
    {
        0.0
    } else {
        src[(z as usize * dims[1] + y as usize) * dims[2] + x as usize]
    }
}

/// out(p) = trilinear sample of src at p + u(p); src is [n, c, z, y, x],
/// dvf is [n, 3, z, y, x].
pub fn warp_forward(src: &[f64], ss: &Shape5, dvf: &[f64]) -> Vec<f64> {
    let (n, c, z, y, x) = (ss[0], ss[1], ss[2], ss[3], ss[4]);
    let dims = [z, y, x];
    let spatial = z * y * x;
    let mut out = vec![0.0; src.len()];
    for nc in 0..n {
        let taps = warp_taps(&dvf[nc * 3 * spatial..(nc + 1) * 3 * spatial], dims);
        out[nc * c * spatial..(nc + 1) * c * spatial]
            .par_chunks_mut(spatial)
            .enumerate()
            .for_each(|(cc, chunk)| {
                let sc = &src[(nc * c + cc) * spatial..(nc * c + cc + 1) * spatial];
                for (p, o) in chunk.iter_mut().enumerate() {
                    let t = taps[p];
                    let [z0, y0, x0] = t.i0;
                    let [fz, fy, fx] = t.f;
                    let c000 = tap_value(sc, dims, z0, y0, x0);
                    let c001 = tap_value(sc, dims, z0, y0, x0 + 1);
                    let c010 = tap_value(sc, dims, z0, y0 + 1, x0);
                    let c011 = tap_value(sc, dims, z0, y0 + 1, x0 + 1);
                    let c100 = tap_value(sc, dims, z0 + 1, y0, x0);
                    let c101 = tap_value(sc, dims, z0 + 1, y0, x0 + 1);
                    let c110 = tap_value(sc, dims, z0 + 1, y0 + 1, x0);
                    let c111 = tap_value(sc, dims, z0 + 1, y0 + 1, x0 + 1);
                    let c00 = c000 * (1.0 - fx) + c001 * fx;
                    let c01 = c010 * (1.0 - fx) + c011 * fx;
                    let c10 = c100 * (1.0 - fx) + c101 * fx;
                    let c11 = c110 * (1.0 - fx) + c111 * fx;
                    let c0 = c00 * (1.0 - fy) + c01 * fy;
                    let c1 = c10 * (1.0 - fy) + c11 * fy;
                    *o = c0 * (1.0 - fz) + c1 * fz;
                }
            });
    }
    out
}

pub fn warp_grad_source(up: &[f64], ss: &Shape5, dvf: &[f64]) -> Vec<f64> {
    let (n, c, z, y, x) = (ss[0], ss[1], ss[2], ss[3], ss[4]);
    let dims = [z, y, x];
    let spatial = z * y * x;
    let mut dsrc = vec![0.0; up.len()];
    for nc in 0..n {
        let taps = warp_taps(&dvf[nc * 3 * spatial..(nc + 1) * 3 * spatial], dims);
        dsrc[nc * c * spatial..(nc + 1) * c * spatial]
            .par_chunks_mut(spatial)
            .enumerate()
            .for_each(|(cc, chunk)| {
                let upc = &up[(nc * c + cc) * spatial..(nc * c + cc + 1) * spatial];
                for (p, &u) in upc.iter().enumerate() {
                    if u == 0.0 {
                        continue;
                    }
                    let t = taps[p];
                    let [z0, y0, x0] = t.i0;
                    let [fz, fy, fx] = t.f;
                    let mut add = |zz: isize, yy: isize, xv: isize, w: f64| {
                        if zz >= 0
                            && yy >= 0
                            && xv >= 0
                            && zz < dims[0] as isize
                            && yy < dims[1] as isize
                            && xv < dims[2] as isize
                        {
                            chunk[(zz as usize * dims[1] + yy as usize) * dims[2] + xv as usize] +=
                                u * w;
                        }
                    };
                    add(z0, y0, x0, (1.0 - fz) * (1.0 - fy) * (1.0 - fx));
                    add(z0, y0, x0 + 1, (1.0 - fz) * (1.0 - fy) * fx);
                    add(z0, y0 + 1, x0, (1.0 - fz) * fy * (1.0 - fx));
                    add(z0, y0 + 1, x0 + 1, (1.0 - fz) * fy * fx);
                    add(z0 + 1, y0, x0, fz * (1.0 - fy) * (1.0 - fx));
                    add(z0 + 1, y0, x0 + 1, fz * (1.0 - fy) * fx);
                    add(z0 + 1, y0 + 1, x0, fz * fy * (1.0 - fx));
                    add(z0 + 1, y0 + 1, x0 + 1, fz * fy * fx);
                }
            });
    }
    dsrc
}

/// Gradient w.r.t. the displacement field, [n, 3, z, y, x].
pub fn warp_grad_dvf(up: &[f64], src: &[f64], ss: &Shape5, dvf: &[f64]) -> Vec<f64> {
    let (n, c, z, y, x) = (ss[0], ss[1], ss[2], ss[3], ss[4]);
    let dims = [z, y, x];
    let spatial = z * y * x;
    let mut ddvf = vec![0.0; n * 3 * spatial];
    for nc in 0..n {
        let taps = warp_taps(&dvf[nc * 3 * spatial..(nc + 1) * 3 * spatial], dims);
        let (dd, rest) = ddvf[nc * 3 * spatial..].split_at_mut(spatial);
        let (dy_chan, dz_chan) = rest.split_at_mut(spatial);
        // Single parallel pass over voxels; each voxel writes its own three
        // channel entries.
        let dx_ptr = AtomicSlices {
            x: dd,
            y: dy_chan,
            z: dz_chan,
        };
        (0..spatial).into_par_iter().for_each(|p| {
            let t = taps[p];
            let [z0, y0, x0] = t.i0;
            let [fz, fy, fx] = t.f;
            let mut gx = 0.0;
            let mut gy = 0.0;
            let mut gz = 0.0;
            for cc in 0..c {
                let u = up[(nc * c + cc) * spatial + p];
                if u == 0.0 {
                    continue;
                }
                let sc = &src[(nc * c + cc) * spatial..(nc * c + cc + 1) * spatial];
                let c000 = tap_value(sc, dims, z0, y0, x0);
                let c001 = tap_value(sc, dims, z0, y0, x0 + 1);
                let c010 = tap_value(sc, dims, z0, y0 + 1, x0);
                let c011 = tap_value(sc, dims, z0, y0 + 1, x0 + 1);
                let c100 = tap_value(sc, dims, z0 + 1, y0, x0);
                let c101 = tap_value(sc, dims, z0 + 1, y0, x0 + 1);
                let c110 = tap_value(sc, dims, z0 + 1, y0 + 1, x0);
                let c111 = tap_value(sc, dims, z0 + 1, y0 + 1, x0 + 1);
                // d/dfx
                let dxv = ((c001 - c000) * (1.0 - fy) + (c011 - c010) * fy) * (1.0 - fz)
                    + ((c101 - c100) * (1.0 - fy) + (c111 - c110) * fy) * fz;
                // d/dfy
                let dyv = ((c010 - c000) * (1.0 - fx) + (c011 - c001) * fx) * (1.0 - fz)
                    + ((c110 - c100) * (1.0 - fx) + (c111 - c101) * fx) * fz;
                // d/dfz
                let dzv = ((c100 - c000) * (1.0 - fx) + (c101 - c001) * fx) * (1.0 - fy)
                    + ((c110 - c010) * (1.0 - fx) + (c111 - c011) * fx) * fy;
                gx += u * dxv;
                gy += u * dyv;
                gz += u * dzv;
            }
            unsafe {
                dx_ptr.write(p, gx, gy, gz);
            }
        });
    }
    ddvf
}

/// Disjoint per-voxel writes into the three dvf channels from a parallel
/// loop over voxels. Each index `p` is visited by exactly one task.
struct AtomicSlices<'a> {
    x: &'a mut [f64],
    y: &'a mut [f64],
    z: &'a mut [f64],
}

unsafe impl Sync for AtomicSlices<'_> {}

impl AtomicSlices<'_> {
    /// Safety: caller guarantees distinct `p` per invocation.
    unsafe fn write(&self, p: usize, gx: f64, gy: f64, gz: f64) {
        let xp = self.x.as_ptr() as *mut f64;
        let yp = self.y.as_ptr() as *mut f64;
        let zp = self.z.as_ptr() as *mut f64;
        unsafe {
            *xp.add(p) = gx;
            *yp.add(p) = gy;
            *zp.add(p) = gz;
        }
    }
}

// ---------------------------------------------------------------------------
// forward difference along a spatial axis
// ---------------------------------------------------------------------------

/// out(p) = in(p + e_axis) - in(p); zero at the far boundary.
/// axis: 0 = z, 1 = y, 2 = x.
pub fn forward_diff(x: &[f64], xs: &Shape5, axis: usize) -> Vec<f64> {
    let (n, c, z, y, xx) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let mut out = vec![0.0; x.len()];
    let ext = [z, y, xx][axis];
    let stride = match axis {
        0 => y * xx,
        1 => xx,
        _ => 1,
    };
    for nc in 0..n * c {
        let base = nc * z * y * xx;
        for zi in 0..z {
            for yi in 0..y {
                for xi in 0..xx {
                    let along = [zi, yi, xi][axis];
                    if along + 1 >= ext {
                        continue;
                    }
                    let p = base + (zi * y + yi) * xx + xi;
                    out[p] = x[p + stride] - x[p];
                }
            }
        }
    }
    out
}

pub fn forward_diff_adjoint(up: &[f64], xs: &Shape5, axis: usize) -> Vec<f64> {
    let (n, c, z, y, xx) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let mut dx = vec![0.0; up.len()];
    let ext = [z, y, xx][axis];
    let stride = match axis {
        0 => y * xx,
        1 => xx,
        _ => 1,
    };
    for nc in 0..n * c {
        let base = nc * z * y * xx;
        for zi in 0..z {
            for yi in 0..y {
                for xi in 0..xx {
                    let along = [zi, yi, xi][axis];
                    let p = base + (zi * y + yi) * xx + xi;
                    let mut acc = 0.0;
                    if along >= 1 {
                        acc += up[p - stride];
                    }
                    if along + 1 < ext {
                        acc -= up[p];
                    }
                    dx[p] = acc;
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// softmax cross-entropy over voxel class labels
// ---------------------------------------------------------------------------

/// logits [n, k, z, y, x]; labels flattened [n * z * y * x] in 0..k.
/// Returns mean over voxels of (logsumexp - logit_at_label).
pub fn softmax_ce_forward(logits: &[f64], ls: &Shape5, labels: &[i32]) -> f64 {
    let (n, k) = (ls[0], ls[1]);
    let spatial = ls[2] * ls[3] * ls[4];
    debug_assert_eq!(labels.len(), n * spatial);
    let mut total = 0.0;
    for nc in 0..n {
        for p in 0..spatial {
            let mut mx = f64::NEG_INFINITY;
            for cc in 0..k {
                mx = mx.max(logits[(nc * k + cc) * spatial + p]);
            }
            let mut lse = 0.0;
            for cc in 0..k {
                lse += (logits[(nc * k + cc) * spatial + p] - mx).exp();
            }
            let lse = mx + lse.ln();
            let lab = labels[nc * spatial + p] as usize;
            total += lse - logits[(nc * k + lab) * spatial + p];
        }
    }
    total / (n * spatial) as f64
}

pub fn softmax_ce_grad(logits: &[f64], ls: &Shape5, labels: &[i32], upstream: f64) -> Vec<f64> {
    let (n, k) = (ls[0], ls[1]);
    let spatial = ls[2] * ls[3] * ls[4];
    let scale = upstream / (n * spatial) as f64;
    let mut dl = vec![0.0; logits.len()];
    for nc in 0..n {
        for p in 0..spatial {
            let mut mx = f64::NEG_INFINITY;
            for cc in 0..k {
                mx = mx.max(logits[(nc * k + cc) * spatial + p]);
            }
            let mut denom = 0.0;
            for cc in 0..k {
                denom += (logits[(nc * k + cc) * spatial + p] - mx).exp();
            }
            let lab = labels[nc * spatial + p] as usize;
            for cc in 0..k {
                let soft = (logits[(nc * k + cc) * spatial + p] - mx).exp() / denom;
                let ind = if cc == lab { 1.0 } else { 0.0 };
                dl[(nc * k + cc) * spatial + p] = scale * (soft - ind);
            }
        }
    }
    dl
}
