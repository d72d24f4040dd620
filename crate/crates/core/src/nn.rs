//! Volumetric neural-network primitives with hand-written backward passes.
//!
//! Feature maps are `(channel, x, y, z)` arrays in standard layout. Kernels
//! are plain loops over contiguous z-rows with a fixed accumulation order, so
//! results are bitwise reproducible run to run.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub type Feature = Array4<f32>;

pub(crate) fn dims(x: &Feature) -> [usize; 3] {
    let s = x.shape();
    [s[1], s[2], s[3]]
}

fn channels(x: &Feature) -> usize {
    x.shape()[0]
}

fn slice(x: &Feature) -> &[f32] {
    x.as_slice().expect("feature maps are contiguous")
}

fn slice_mut(x: &mut Feature) -> &mut [f32] {
    x.as_slice_mut().expect("feature maps are contiguous")
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// Dot product with eight independent partial sums.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Valid output range along one axis for kernel offset `d`.
#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// Stride-1 "same" convolution with an odd cubic kernel.
/// `w` is `(cout, cin, k, k, k)`.
pub fn conv3d(x: &Feature, w: &[f32], bias: Option<&[f32]>, cout: usize, k: usize) -> Feature {
    let cin = channels(x);
    let [nx, ny, nz] = dims(x);
    debug_assert_eq!(w.len(), cout * cin * k * k * k);
    let vol = nx * ny * nz;
    let pad = (k / 2) as isize;
    let xs = slice(x);
    let mut out = Feature::zeros((cout, nx, ny, nz));
    let os = slice_mut(&mut out);
    for o in 0..cout {
        let out_o = &mut os[o * vol..(o + 1) * vol];
        if let Some(b) = bias {
            out_o.fill(b[o]);
        }
        for i in 0..cin {
            let in_i = &xs[i * vol..(i + 1) * vol];
            for a in 0..k {
                let dx = a as isize - pad;
                let (x0, x1) = span(nx, dx);
                for b in 0..k {
                    let dy = b as isize - pad;
                    let (y0, y1) = span(ny, dy);
                    let wbase = (((o * cin + i) * k + a) * k + b) * k;
                    for xo in x0..x1 {
                        let xi = (xo as isize + dx) as usize;
                        for yo in y0..y1 {
                            let yi = (yo as isize + dy) as usize;
                            let orow = (xo * ny + yo) * nz;
                            let irow = (xi * ny + yi) * nz;
                            for c in 0..k {
                                let dz = c as isize - pad;
                                let (z0, z1) = span(nz, dz);
                                let zi = (z0 as isize + dz) as usize;
                                let len = z1 - z0;
                                axpy(
                                    &mut out_o[orow + z0..orow + z1],
                                    w[wbase + c],
                                    &in_i[irow + zi..irow + zi + len],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients into `gw`/`gb`; returns the input
/// gradient when `need_input_grad`.
pub fn conv3d_backward(
    x: &Feature,
    gy: &Feature,
    w: &[f32],
    k: usize,
    gw: &mut [f32],
    gb: Option<&mut [f32]>,
    need_input_grad: bool,
) -> Option<Feature> {
    let cin = channels(x);
    let cout = channels(gy);
    let [nx, ny, nz] = dims(x);
    let vol = nx * ny * nz;
    let pad = (k / 2) as isize;
    let xs = slice(x);
    let gs = slice(gy);

    if let Some(gb) = gb {
        for o in 0..cout {
            gb[o] += gs[o * vol..(o + 1) * vol].iter().map(|v| *v as f64).sum::<f64>() as f32;
        }
    }

    for o in 0..cout {
        let g_o = &gs[o * vol..(o + 1) * vol];
        for i in 0..cin {
            let in_i = &xs[i * vol..(i + 1) * vol];
            for a in 0..k {
                let dx = a as isize - pad;
                let (x0, x1) = span(nx, dx);
                for b in 0..k {
                    let dy = b as isize - pad;
                    let (y0, y1) = span(ny, dy);
                    let wbase = (((o * cin + i) * k + a) * k + b) * k;
                    for c in 0..k {
                        let dz = c as isize - pad;
                        let (z0, z1) = span(nz, dz);
                        let zi = (z0 as isize + dz) as usize;
                        let len = z1 - z0;
                        let mut acc = 0.0f64;
                        for xo in x0..x1 {
                            let xi = (xo as isize + dx) as usize;
                            for yo in y0..y1 {
                                let yi = (yo as isize + dy) as usize;
                                let orow = (xo * ny + yo) * nz;
                                let irow = (xi * ny + yi) * nz;
                                acc += dot(&g_o[orow + z0..orow + z1], &in_i[irow + zi..irow + zi + len]) as f64;
                            }
                        }
                        gw[wbase + c] += acc as f32;
                    }
                }
            }
        }
    }

    if !need_input_grad {
        return None;
    }
    let mut gx = Feature::zeros((cin, nx, ny, nz));
    let gxs = slice_mut(&mut gx);
    for i in 0..cin {
        let gx_i = &mut gxs[i * vol..(i + 1) * vol];
        for o in 0..cout {
            let g_o = &gs[o * vol..(o + 1) * vol];
            for a in 0..k {
                let dx = a as isize - pad;
                let (x0, x1) = span(nx, dx);
                for b in 0..k {
                    let dy = b as isize - pad;
                    let (y0, y1) = span(ny, dy);
                    let wbase = (((o * cin + i) * k + a) * k + b) * k;
                    for xo in x0..x1 {
                        let xi = (xo as isize + dx) as usize;
                        for yo in y0..y1 {
                            let yi = (yo as isize + dy) as usize;
                            let orow = (xo * ny + yo) * nz;
                            let irow = (xi * ny + yi) * nz;
                            for c in 0..k {
                                let dz = c as isize - pad;
                                let (z0, z1) = span(nz, dz);
                                let zi = (z0 as isize + dz) as usize;
                                let len = z1 - z0;
                                axpy(&mut gx_i[irow + zi..irow + zi + len], w[wbase + c], &g_o[orow + z0..orow + z1]);
                            }
                        }
                    }
                }
            }
        }
    }
    Some(gx)
}

pub const NORM_EPS: f64 = 1e-5;

/// Saved state of an instance normalization.
#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Feature,
    inv_std: Vec<f64>,
}

/// Per-channel normalization over the spatial extent with affine
/// `gamma`/`beta`.
pub fn instance_norm(x: &Feature, gamma: &[f32], beta: &[f32]) -> (Feature, NormCache) {
    let c = channels(x);
    let vol = dims(x).iter().product::<usize>();
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(c);
    {
        let hs = slice_mut(&mut xhat);
        let ys = slice_mut(&mut y);
        for ch in 0..c {
            let h = &mut hs[ch * vol..(ch + 1) * vol];
            let mean = h.iter().map(|v| *v as f64).sum::<f64>() / vol as f64;
            let var = h.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / vol as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            let yc = &mut ys[ch * vol..(ch + 1) * vol];
            for (hv, yv) in h.iter_mut().zip(yc.iter_mut()) {
                let n = ((*hv as f64 - mean) * is) as f32;
                *hv = n;
                *yv = n * gamma[ch] + beta[ch];
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward(cache: &NormCache, gy: &Feature, gamma: &[f32], ggamma: &mut [f32], gbeta: &mut [f32]) -> Feature {
    let c = channels(gy);
    let vol = dims(gy).iter().product::<usize>();
    let n = vol as f64;
    let hs = slice(&cache.xhat);
    let gs = slice(gy);
    let mut gx = Feature::zeros(gy.raw_dim());
    let gxs = slice_mut(&mut gx);
    for ch in 0..c {
        let h = &hs[ch * vol..(ch + 1) * vol];
        let g = &gs[ch * vol..(ch + 1) * vol];
        let (mut sg, mut sgh) = (0.0f64, 0.0f64);
        for (gv, hv) in g.iter().zip(h) {
            sg += *gv as f64;
            sgh += (*gv as f64) * (*hv as f64);
        }
        gbeta[ch] += sg as f32;
        ggamma[ch] += sgh as f32;
        let gm = gamma[ch] as f64;
        let scale = cache.inv_std[ch] * gm;
        let out = &mut gxs[ch * vol..(ch + 1) * vol];
        for ((o, gv), hv) in out.iter_mut().zip(g).zip(h) {
            *o = (scale * (*gv as f64 - sg / n - *hv as f64 * sgh / n)) as f32;
        }
    }
    gx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

const FRAC_1_SQRT_2PI: f32 = 0.398_942_3;

impl Activation {
    pub fn forward(self, x: &Feature) -> Feature {
        match self {
            Self::Relu => x.mapv(|v| v.max(0.0)),
            Self::Gelu => x.mapv(|v| 0.5 * v * (1.0 + libm::erff(v * std::f32::consts::FRAC_1_SQRT_2))),
        }
    }

    /// Gradient given the pre-activation input.
    pub fn backward(self, pre: &Feature, gy: &Feature) -> Feature {
        let mut gx = gy.clone();
        match self {
            Self::Relu => ndarray::Zip::from(&mut gx).and(pre).for_each(|g, &x| {
                if x <= 0.0 {
                    *g = 0.0;
                }
            }),
            Self::Gelu => ndarray::Zip::from(&mut gx).and(pre).for_each(|g, &x| {
                let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
                let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
                *g *= cdf + x * pdf;
            }),
        }
        gx
    }
}

/// 2×2×2 max pooling with stride 2; returns the winning offset per output.
pub fn max_pool2(x: &Feature) -> (Feature, Vec<u8>) {
    let c = channels(x);
    let [nx, ny, nz] = dims(x);
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let mut y = Feature::zeros((c, ox, oy, oz));
    let mut arg = vec![0u8; c * ox * oy * oz];
    let ys = slice_mut(&mut y);
    let mut n = 0;
    for ch in 0..c {
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0u8;
                    for off in 0..8u8 {
                        let (a, b, d) = ((off >> 2) as usize, ((off >> 1) & 1) as usize, (off & 1) as usize);
                        let v = x[[ch, 2 * i + a, 2 * j + b, 2 * k + d]];
                        if v > best {
                            best = v;
                            bi = off;
                        }
                    }
                    ys[n] = best;
                    arg[n] = bi;
                    n += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(arg: &[u8], gy: &Feature, in_dims: [usize; 3]) -> Feature {
    let c = channels(gy);
    let [ox, oy, oz] = dims(gy);
    let mut gx = Feature::zeros((c, in_dims[0], in_dims[1], in_dims[2]));
    let gs = slice(gy);
    let mut n = 0;
    for ch in 0..c {
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    let off = arg[n];
                    let (a, b, d) = ((off >> 2) as usize, ((off >> 1) & 1) as usize, (off & 1) as usize);
                    gx[[ch, 2 * i + a, 2 * j + b, 2 * k + d]] += gs[n];
                    n += 1;
                }
            }
        }
    }
    gx
}

/// Transposed convolution, kernel 2, stride 2. `w` is `(cin, cout, 2, 2, 2)`.
pub fn conv_transpose2(x: &Feature, w: &[f32], bias: &[f32], cout: usize) -> Feature {
    let cin = channels(x);
    let [nx, ny, nz] = dims(x);
    let mut y = Feature::zeros((cout, 2 * nx, 2 * ny, 2 * nz));
    let (my, mz) = (2 * ny, 2 * nz);
    let ovol = 8 * nx * ny * nz;
    let vol = nx * ny * nz;
    let xs = slice(x);
    let ys = slice_mut(&mut y);
    for o in 0..cout {
        let out_o = &mut ys[o * ovol..(o + 1) * ovol];
        out_o.fill(bias[o]);
        for i in 0..cin {
            let in_i = &xs[i * vol..(i + 1) * vol];
            for off in 0..8 {
                let (a, b, d) = (off >> 2, (off >> 1) & 1, off & 1);
                let wv = w[(i * cout + o) * 8 + off];
                for p in 0..nx {
                    for q in 0..ny {
                        let row = &in_i[(p * ny + q) * nz..(p * ny + q + 1) * nz];
                        let base = ((2 * p + a) * my + 2 * q + b) * mz + d;
                        for (r, v) in row.iter().enumerate() {
                            out_o[base + 2 * r] += wv * v;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv_transpose2_backward(x: &Feature, gy: &Feature, w: &[f32], gw: &mut [f32], gb: &mut [f32]) -> Feature {
    let cin = channels(x);
    let cout = channels(gy);
    let [nx, ny, nz] = dims(x);
    let (my, mz) = (2 * ny, 2 * nz);
    let ovol = 8 * nx * ny * nz;
    let vol = nx * ny * nz;
    let xs = slice(x);
    let gs = slice(gy);
    for o in 0..cout {
        gb[o] += gs[o * ovol..(o + 1) * ovol].iter().map(|v| *v as f64).sum::<f64>() as f32;
    }
    let mut gx = Feature::zeros(x.raw_dim());
    let gxs = slice_mut(&mut gx);
    for i in 0..cin {
        let in_i = &xs[i * vol..(i + 1) * vol];
        let gx_i = &mut gxs[i * vol..(i + 1) * vol];
        for o in 0..cout {
            let g_o = &gs[o * ovol..(o + 1) * ovol];
            for off in 0..8 {
                let (a, b, d) = (off >> 2, (off >> 1) & 1, off & 1);
                let widx = (i * cout + o) * 8 + off;
                let wv = w[widx];
                let mut acc = 0.0f64;
                for p in 0..nx {
                    for q in 0..ny {
                        let base = ((2 * p + a) * my + 2 * q + b) * mz + d;
                        let rbase = (p * ny + q) * nz;
                        let mut part = 0.0f32;
                        for r in 0..nz {
                            let g = g_o[base + 2 * r];
                            part += g * in_i[rbase + r];
                            gx_i[rbase + r] += wv * g;
                        }
                        acc += part as f64;
                    }
                }
                gw[widx] += acc as f32;
            }
        }
    }
    gx
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest(x: &Feature, f: usize) -> Feature {
    if f == 1 {
        return x.clone();
    }
    let [nx, ny, nz] = dims(x);
    Feature::from_shape_fn((channels(x), nx * f, ny * f, nz * f), |(c, i, j, k)| x[[c, i / f, j / f, k / f]])
}

pub fn upsample_nearest_backward(gy: &Feature, f: usize) -> Feature {
    if f == 1 {
        return gy.clone();
    }
    let [mx, my, mz] = dims(gy);
    let mut gx = Feature::zeros((channels(gy), mx / f, my / f, mz / f));
    for ((c, i, j, k), v) in gy.indexed_iter() {
        gx[[c, i / f, j / f, k / f]] += *v;
    }
    gx
}

/// Channel-wise concatenation.
pub fn concat(parts: &[&Feature]) -> Feature {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("matching spatial shapes")
}

/// Splits a gradient back into the channel widths of a [`concat`].
pub fn split(g: &Feature, widths: &[usize]) -> Vec<Feature> {
    let mut out = Vec::with_capacity(widths.len());
    let mut start = 0;
    for w in widths {
        out.push(g.slice(ndarray::s![start..start + w, .., .., ..]).to_owned());
        start += w;
    }
    out
}

/// Inverted dropout; returns the output and the scaled keep mask.
pub fn dropout<R: Rng>(x: &Feature, rate: f32, rng: &mut R) -> (Feature, Feature) {
    let scale = 1.0 / (1.0 - rate);
    let mask = Feature::from_shape_simple_fn(x.raw_dim(), || if rng.random::<f32>() < rate { 0.0 } else { scale });
    (x * &mask, mask)
}

pub fn sigmoid32(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_feature(shape: (usize, usize, usize, usize), seed: u64) -> Feature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Feature::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0))
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    /// Naive direct convolution used as an oracle.
    fn conv_naive(x: &Feature, w: &[f32], b: &[f32], cout: usize, k: usize) -> Feature {
        let cin = x.shape()[0];
        let [nx, ny, nz] = dims(x);
        let p = (k / 2) as isize;
        Feature::from_shape_fn((cout, nx, ny, nz), |(o, i, j, l)| {
            let mut s = b[o] as f64;
            for c in 0..cin {
                for a in 0..k {
                    for bb in 0..k {
                        for d in 0..k {
                            let (xi, yi, zi) = (i as isize + a as isize - p, j as isize + bb as isize - p, l as isize + d as isize - p);
                            if xi < 0 || yi < 0 || zi < 0 || xi >= nx as isize || yi >= ny as isize || zi >= nz as isize {
                                continue;
                            }
                            s += (w[(((o * cin + c) * k + a) * k + bb) * k + d] * x[[c, xi as usize, yi as usize, zi as usize]]) as f64;
                        }
                    }
                }
            }
            s as f32
        })
    }

    #[test]
    fn conv_matches_naive() {
        for k in [1, 3, 5] {
            let x = rand_feature((2, 5, 4, 6), 1);
            let w = rand_vec(3 * 2 * k * k * k, 2);
            let b = rand_vec(3, 3);
            let y = conv3d(&x, &w, Some(&b), 3, k);
            let r = conv_naive(&x, &w, &b, 3, k);
            for (a, b) in y.iter().zip(r.iter()) {
                assert!((a - b).abs() < 1e-4, "k={k}: {a} vs {b}");
            }
        }
    }

    /// Finite-difference check of a scalar objective `sum(y * probe)`.
    fn check_grad(analytic: &[f32], mut f: impl FnMut(usize, f32) -> f64, tol: f64) {
        for idx in (0..analytic.len()).step_by((analytic.len() / 17).max(1)) {
            let h = 1e-2f32;
            let fd = (f(idx, h) - f(idx, -h)) / (2.0 * h as f64);
            let a = analytic[idx] as f64;
            assert!((fd - a).abs() <= tol * (1.0 + fd.abs().max(a.abs())), "idx {idx}: fd {fd} vs analytic {a}");
        }
    }

    fn objective(y: &Feature, probe: &Feature) -> f64 {
        y.iter().zip(probe.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    }

    #[test]
    fn conv_gradients() {
        for k in [1, 3] {
            let x = rand_feature((2, 4, 3, 5), 4);
            let w = rand_vec(3 * 2 * k * k * k, 5);
            let b = rand_vec(3, 6);
            let probe = rand_feature((3, 4, 3, 5), 7);
            let mut gw = vec![0.0; w.len()];
            let mut gb = vec![0.0; 3];
            let gx = conv3d_backward(&x, &probe, &w, k, &mut gw, Some(&mut gb), true).unwrap();
            check_grad(&gw, |i, h| {
                let mut w2 = w.clone();
                w2[i] += h;
                objective(&conv3d(&x, &w2, Some(&b), 3, k), &probe)
            }, 1e-3);
            check_grad(&gb, |i, h| {
                let mut b2 = b.clone();
                b2[i] += h;
                objective(&conv3d(&x, &w, Some(&b2), 3, k), &probe)
            }, 1e-3);
            check_grad(gx.as_slice().unwrap(), |i, h| {
                let mut x2 = x.clone();
                x2.as_slice_mut().unwrap()[i] += h;
                objective(&conv3d(&x2, &w, Some(&b), 3, k), &probe)
            }, 1e-3);
        }
    }

    #[test]
    fn norm_gradients() {
        let x = rand_feature((2, 3, 3, 2), 8);
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.1, -0.2];
        let probe = rand_feature((2, 3, 3, 2), 9);
        let (y, cache) = instance_norm(&x, &gamma, &beta);
        let m: f64 = y.iter().take(18).map(|v| *v as f64).sum::<f64>() / 18.0;
        assert!((m - 0.1).abs() < 1e-5);
        let (mut gg, mut gbt) = (vec![0.0; 2], vec![0.0; 2]);
        let gx = instance_norm_backward(&cache, &probe, &gamma, &mut gg, &mut gbt);
        check_grad(gx.as_slice().unwrap(), |i, h| {
            let mut x2 = x.clone();
            x2.as_slice_mut().unwrap()[i] += h;
            objective(&instance_norm(&x2, &gamma, &beta).0, &probe)
        }, 5e-3);
        check_grad(&gg, |i, h| {
            let mut g2 = gamma.clone();
            g2[i] += h;
            objective(&instance_norm(&x, &g2, &beta).0, &probe)
        }, 1e-3);
    }

    #[test]
    fn activation_gradients() {
        let x = rand_feature((1, 3, 3, 3), 10).mapv(|v| v * 3.0);
        let probe = rand_feature((1, 3, 3, 3), 11);
        for act in [Activation::Relu, Activation::Gelu] {
            let gx = act.backward(&x, &probe);
            check_grad(gx.as_slice().unwrap(), |i, h| {
                let mut x2 = x.clone();
                x2.as_slice_mut().unwrap()[i] += h * 0.1;
                objective(&act.forward(&x2), &probe) * 10.0
            }, 2e-2);
        }
        let g = Activation::Gelu.forward(&Feature::from_elem((1, 1, 1, 1), 1.0));
        assert!((g[[0, 0, 0, 0]] - 0.841_344_7).abs() < 1e-6);
    }

    #[test]
    fn pool_and_transpose_gradients() {
        let x = rand_feature((2, 4, 2, 4), 12);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.shape(), &[2, 2, 1, 2]);
        let probe = rand_feature((2, 2, 1, 2), 13);
        let gx = max_pool2_backward(&arg, &probe, [4, 2, 4]);
        assert!((gx.sum() - probe.sum()).abs() < 1e-5);

        let x = rand_feature((3, 2, 3, 2), 14);
        let w = rand_vec(3 * 2 * 8, 15);
        let b = rand_vec(2, 16);
        let probe = rand_feature((2, 4, 6, 4), 17);
        let (mut gw, mut gb) = (vec![0.0; w.len()], vec![0.0; 2]);
        let gx = conv_transpose2_backward(&x, &probe, &w, &mut gw, &mut gb);
        check_grad(&gw, |i, h| {
            let mut w2 = w.clone();
            w2[i] += h;
            objective(&conv_transpose2(&x, &w2, &b, 2), &probe)
        }, 1e-3);
        check_grad(gx.as_slice().unwrap(), |i, h| {
            let mut x2 = x.clone();
            x2.as_slice_mut().unwrap()[i] += h;
            objective(&conv_transpose2(&x2, &w, &b, 2), &probe)
        }, 1e-3);
        check_grad(&gb, |i, h| {
            let mut b2 = b.clone();
            b2[i] += h;
            objective(&conv_transpose2(&x, &w, &b2, 2), &probe)
        }, 1e-3);
    }

    #[test]
    fn upsample_round_trip_sums() {
        let x = rand_feature((2, 2, 2, 2), 18);
        let y = upsample_nearest(&x, 4);
        assert_eq!(y.shape(), &[2, 8, 8, 8]);
        let g = upsample_nearest_backward(&Feature::ones(y.raw_dim()), 4);
        assert!(g.iter().all(|v| *v == 64.0));
        let parts = split(&concat(&[&x, &y.slice(ndarray::s![.., ..2, ..2, ..2]).to_owned()]), &[2, 2]);
        assert_eq!(parts[0], x);
    }
}
