//! Differentiable operations. Image-like tensors are channel-last
//! (`[batch, height, width, channels]`).

use std::sync::Arc;

use rayon::prelude::*;

use super::Var;
use crate::error::{arg_err, shape_err, Result};
use crate::fft::{circular_convolve, reverse_circular};
use crate::longconv::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Rows per partial sum when reducing over many rows; fixed so reductions are
/// independent of the thread count.
const REDUCE_CHUNK: usize = 256;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn channel_param(x: &Tensor, p: &Tensor, op: &str) -> Result<usize> {
    let c = x.last_dim();
    if p.shape() != [c] {
        return shape_err(format!("{op}: parameter {:?} for {c} channels", p.shape()));
    }
    Ok(c)
}

fn image_dims(x: &Tensor, op: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, h, w, c] => Ok((b, h, w, c)),
        ref s => shape_err(format!("{op}: expected [B, H, W, C], got {s:?}")),
    }
}

/// Column sums of a `[rows, cols]` row-major buffer, reduced in fixed chunk order.
fn column_sums(data: &[f64], cols: usize) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = data
        .par_chunks(REDUCE_CHUNK * cols)
        .map(|chunk| {
            let mut acc = vec![0.0; cols];
            for row in chunk.chunks_exact(cols) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; cols];
    for p in partials {
        for (a, v) in out.iter_mut().zip(p) {
            *a += v;
        }
    }
    out
}

fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for p in parts {
        for (a, v) in out.iter_mut().zip(p) {
            *a += v;
        }
    }
    out
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("op preserves element count")
}

impl<'t> Var<'t> {
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let y = a.zip_map(&b, |x, y| x + y)?;
        self.tape.record("add", y, &[*self, *other], |g| vec![g.clone(), g.clone()])
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        let y = a.zip_map(&b, |x, y| x - y)?;
        self.tape
            .record("sub", y, &[*self, *other], |g| vec![g.clone(), g.map(|v| -v)])
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul")?;
        let y = a.zip_map(&b, |x, y| x * y)?;
        self.tape.record("mul", y, &[*self, *other], move |g| {
            vec![
                g.zip_map(&b, |g, b| g * b).unwrap(),
                g.zip_map(&a, |g, a| g * a).unwrap(),
            ]
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let y = self.value().map(|x| x * c);
        self.tape.record("scale", y, &[*self], move |g| vec![g.map(|v| v * c)])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let y = self.value().map(|x| x + c);
        self.tape.record("add_scalar", y, &[*self], |g| vec![g.clone()])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, mask: Arc<Tensor>) -> Result<Var<'t>> {
        let x = self.value();
        same_shape(&x, &mask, "mul_const")?;
        let y = x.zip_map(&mask, |a, m| a * m)?;
        self.tape.record("mul_const", y, &[*self], move |g| {
            vec![g.zip_map(&mask, |g, m| g * m).unwrap()]
        })
    }

    pub fn sin(&self) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.map(f64::sin);
        self.tape.record("sin", y, &[*self], move |g| {
            vec![g.zip_map(&x, |g, x| g * x.cos()).unwrap()]
        })
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape
            .record("sum", Tensor::scalar(x.sum()), &[*self], move |g| {
                vec![Tensor::full(shape.clone(), g.data()[0])]
            })
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let from = x.shape().to_vec();
        let y = x.reshape(shape)?;
        self.tape.record("reshape", y, &[*self], move |g| {
            vec![g.reshape(from.clone()).unwrap()]
        })
    }

    /// Channels `[start, start + len)` of the trailing axis.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.last_dim();
        if len == 0 || start + len > c {
            return arg_err(format!("narrow_last {start}+{len} of {c} channels"));
        }
        let rows = x.numel() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let in_shape = x.shape().to_vec();
        self.tape
            .record("narrow_last", tensor(&shape, data), &[*self], move |g| {
                let mut dx = Tensor::zeros(in_shape.clone());
                let d = dx.data_mut();
                for r in 0..rows {
                    d[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![dx]
            })
    }

    /// `x * p` with `p` broadcast over every axis but the last.
    pub fn mul_channel(&self, p: &Var<'t>) -> Result<Var<'t>> {
        let (x, pv) = (self.value(), p.value());
        let c = channel_param(&x, &pv, "mul_channel")?;
        let y = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * pv.data()[i % c]);
        self.tape.record("mul_channel", y, &[*self, *p], move |g| {
            let dx = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * pv.data()[i % c]);
            let prod: Vec<f64> = g.data().iter().zip(x.data()).map(|(g, x)| g * x).collect();
            vec![dx, tensor(&[c], column_sums(&prod, c))]
        })
    }

    /// `x + p` with `p` broadcast over every axis but the last.
    pub fn add_channel(&self, p: &Var<'t>) -> Result<Var<'t>> {
        let (x, pv) = (self.value(), p.value());
        let c = channel_param(&x, &pv, "add_channel")?;
        let y = Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] + pv.data()[i % c]);
        self.tape.record("add_channel", y, &[*self, *p], move |g| {
            vec![g.clone(), tensor(&[c], column_sums(g.data(), c))]
        })
    }

    /// Affine map over the trailing axis: `x[.., Cin] @ w[Cin, Cout] (+ b[Cout])`.
    pub fn linear(&self, w: &Var<'t>, b: Option<&Var<'t>>) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        let cin = x.last_dim();
        let (wr, cout) = match *wv.shape() {
            [r, c] => (r, c),
            ref s => return shape_err(format!("linear weight must be 2D, got {s:?}")),
        };
        if wr != cin {
            return shape_err(format!("linear: input has {cin} features, weight {:?}", wv.shape()));
        }
        let bv = match b {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [cout] {
                    return shape_err(format!("linear bias {:?} for {cout} outputs", bv.shape()));
                }
                Some(bv)
            }
            None => None,
        };
        let rows = x.numel() / cin;
        let mut out = vec![0.0; rows * cout];
        out.par_chunks_mut(cout).enumerate().for_each(|(r, o)| {
            if let Some(bv) = &bv {
                o.copy_from_slice(bv.data());
            }
            let xr = &x.data()[r * cin..(r + 1) * cin];
            for (i, &xi) in xr.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = &wv.data()[i * cout..(i + 1) * cout];
                for (o, w) in o.iter_mut().zip(wrow) {
                    *o += xi * w;
                }
            }
        });
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let has_bias = b.is_some();
        let mut parents = vec![*self, *w];
        if let Some(b) = b {
            parents.push(*b);
        }
        self.tape.record("linear", tensor(&shape, out), &parents, move |g| {
            let gd = g.data();
            let mut dx = vec![0.0; rows * cin];
            dx.par_chunks_mut(cin).enumerate().for_each(|(r, d)| {
                let gr = &gd[r * cout..(r + 1) * cout];
                for (i, di) in d.iter_mut().enumerate() {
                    let wrow = &wv.data()[i * cout..(i + 1) * cout];
                    *di = gr.iter().zip(wrow).map(|(g, w)| g * w).sum();
                }
            });
            let partials: Vec<Vec<f64>> = (0..rows.div_ceil(REDUCE_CHUNK))
                .into_par_iter()
                .map(|chunk| {
                    let mut dw = vec![0.0; cin * cout];
                    let end = ((chunk + 1) * REDUCE_CHUNK).min(rows);
                    for r in chunk * REDUCE_CHUNK..end {
                        let gr = &gd[r * cout..(r + 1) * cout];
                        for (i, &xi) in x.data()[r * cin..(r + 1) * cin].iter().enumerate() {
                            if xi == 0.0 {
                                continue;
                            }
                            for (d, g) in dw[i * cout..(i + 1) * cout].iter_mut().zip(gr) {
                                *d += xi * g;
                            }
                        }
                    }
                    dw
                })
                .collect();
            let mut grads = vec![
                tensor(x.shape(), dx),
                tensor(&[cin, cout], sum_in_order(partials, cin * cout)),
            ];
            if has_bias {
                grads.push(tensor(&[cout], column_sums(gd, cout)));
            }
            grads
        })
    }

    /// Per-channel 2D convolution with stride 1 and zero padding; the output
    /// keeps the input extent. `pad = (top, left)` positions the kernel:
    /// `(kh / 2, kw / 2)` centers it, `(0, kw - 1)` makes it causal along x.
    pub fn depthwise_conv2d(&self, w: &Var<'t>, b: Option<&Var<'t>>, pad: (usize, usize)) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        let (bn, h, wd, c) = image_dims(&x, "depthwise_conv2d")?;
        let (kh, kw) = match *wv.shape() {
            [kh, kw, wc] if wc == c => (kh, kw),
            ref s => return shape_err(format!("depthwise kernel {s:?} for {c} channels")),
        };
        if pad.0 >= kh || pad.1 >= kw {
            return arg_err(format!("padding {pad:?} exceeds kernel {kh}x{kw}"));
        }
        let bv = match b {
            Some(b) => {
                let bv = b.value();
                channel_param(&x, &bv, "depthwise_conv2d bias")?;
                Some(bv)
            }
            None => None,
        };
        let (pt, pl) = (pad.0 as isize, pad.1 as isize);
        let plane = h * wd * c;
        let mut out = vec![0.0; bn * plane];
        out.par_chunks_mut(plane).enumerate().for_each(|(bi, o)| {
            let xb = &x.data()[bi * plane..(bi + 1) * plane];
            for i in 0..h {
                for j in 0..wd {
                    let dst = &mut o[(i * wd + j) * c..(i * wd + j + 1) * c];
                    if let Some(bv) = &bv {
                        dst.copy_from_slice(bv.data());
                    }
                    for a in 0..kh {
                        let y = i as isize + a as isize - pt;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for e in 0..kw {
                            let xx = j as isize + e as isize - pl;
                            if xx < 0 || xx >= wd as isize {
                                continue;
                            }
                            let src = &xb[(y as usize * wd + xx as usize) * c..][..c];
                            let wk = &wv.data()[(a * kw + e) * c..][..c];
                            for ((d, s), k) in dst.iter_mut().zip(src).zip(wk) {
                                *d += s * k;
                            }
                        }
                    }
                }
            }
        });
        let has_bias = b.is_some();
        let mut parents = vec![*self, *w];
        if let Some(b) = b {
            parents.push(*b);
        }
        let shape = x.shape().to_vec();
        self.tape.record("depthwise_conv2d", tensor(&shape, out), &parents, move |g| {
            let gd = g.data();
            let per_batch: Vec<(Vec<f64>, Vec<f64>)> = (0..bn)
                .into_par_iter()
                .map(|bi| {
                    let xb = &x.data()[bi * plane..(bi + 1) * plane];
                    let gb = &gd[bi * plane..(bi + 1) * plane];
                    let mut dx = vec![0.0; plane];
                    let mut dw = vec![0.0; kh * kw * c];
                    for i in 0..h {
                        for j in 0..wd {
                            let go = &gb[(i * wd + j) * c..][..c];
                            for a in 0..kh {
                                let y = i as isize + a as isize - pt;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for e in 0..kw {
                                    let xx = j as isize + e as isize - pl;
                                    if xx < 0 || xx >= wd as isize {
                                        continue;
                                    }
                                    let at = (y as usize * wd + xx as usize) * c;
                                    let kat = (a * kw + e) * c;
                                    for ch in 0..c {
                                        dx[at + ch] += go[ch] * wv.data()[kat + ch];
                                        dw[kat + ch] += go[ch] * xb[at + ch];
                                    }
                                }
                            }
                        }
                    }
                    (dx, dw)
                })
                .collect();
            let mut dx = Vec::with_capacity(bn * plane);
            let mut dws = Vec::with_capacity(bn);
            for (d, w) in per_batch {
                dx.extend(d);
                dws.push(w);
            }
            let mut grads = vec![
                tensor(&shape, dx),
                tensor(&[kh, kw, c], sum_in_order(dws, kh * kw * c)),
            ];
            if has_bias {
                grads.push(tensor(&[c], column_sums(gd, c)));
            }
            grads
        })
    }

    /// Dense 2D convolution `[B, H, W, Cin] -> [B, Ho, Wo, Cout]` with weight
    /// `[kh, kw, Cin, Cout]`, symmetric zero padding and equal strides.
    pub fn conv2d(&self, w: &Var<'t>, b: &Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        let (bn, h, wd, cin) = image_dims(&x, "conv2d")?;
        let (kh, kw, cout) = match *wv.shape() {
            [kh, kw, ci, co] if ci == cin => (kh, kw, co),
            ref s => return shape_err(format!("conv2d kernel {s:?} for {cin} input channels")),
        };
        if bv.shape() != [cout] {
            return shape_err(format!("conv2d bias {:?} for {cout} outputs", bv.shape()));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return arg_err(format!("conv2d: kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{wd}"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let in_plane = h * wd * cin;
        let out_plane = ho * wo * cout;
        let taps = move |o: usize, a: usize, extent: usize| -> Option<usize> {
            let p = (o * stride + a) as isize - pad as isize;
            (p >= 0 && p < extent as isize).then_some(p as usize)
        };
        let mut out = vec![0.0; bn * out_plane];
        out.par_chunks_mut(out_plane).enumerate().for_each(|(bi, o)| {
            let xb = &x.data()[bi * in_plane..(bi + 1) * in_plane];
            for oy in 0..ho {
                for ox in 0..wo {
                    let dst = &mut o[(oy * wo + ox) * cout..][..cout];
                    dst.copy_from_slice(bv.data());
                    for a in 0..kh {
                        let Some(y) = taps(oy, a, h) else { continue };
                        for e in 0..kw {
                            let Some(xx) = taps(ox, e, wd) else { continue };
                            let src = &xb[(y * wd + xx) * cin..][..cin];
                            for (ci, &s) in src.iter().enumerate() {
                                let wk = &wv.data()[((a * kw + e) * cin + ci) * cout..][..cout];
                                for (d, k) in dst.iter_mut().zip(wk) {
                                    *d += s * k;
                                }
                            }
                        }
                    }
                }
            }
        });
        let out_shape = [bn, ho, wo, cout];
        let in_shape = x.shape().to_vec();
        self.tape.record("conv2d", tensor(&out_shape, out), &[*self, *w, *b], move |g| {
            let gd = g.data();
            let per_batch: Vec<(Vec<f64>, Vec<f64>)> = (0..bn)
                .into_par_iter()
                .map(|bi| {
                    let xb = &x.data()[bi * in_plane..(bi + 1) * in_plane];
                    let gb = &gd[bi * out_plane..(bi + 1) * out_plane];
                    let mut dx = vec![0.0; in_plane];
                    let mut dw = vec![0.0; kh * kw * cin * cout];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = &gb[(oy * wo + ox) * cout..][..cout];
                            for a in 0..kh {
                                let Some(y) = taps(oy, a, h) else { continue };
                                for e in 0..kw {
                                    let Some(xx) = taps(ox, e, wd) else { continue };
                                    let at = (y * wd + xx) * cin;
                                    for ci in 0..cin {
                                        let kat = ((a * kw + e) * cin + ci) * cout;
                                        let wk = &wv.data()[kat..kat + cout];
                                        dx[at + ci] += go.iter().zip(wk).map(|(g, k)| g * k).sum::<f64>();
                                        let xi = xb[at + ci];
                                        for (d, gv) in dw[kat..kat + cout].iter_mut().zip(go) {
                                            *d += xi * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    (dx, dw)
                })
                .collect();
            let mut dx = Vec::with_capacity(bn * in_plane);
            let mut dws = Vec::with_capacity(bn);
            for (d, w) in per_batch {
                dx.extend(d);
                dws.push(w);
            }
            vec![
                tensor(&in_shape, dx),
                tensor(&[kh, kw, cin, cout], sum_in_order(dws, kh * kw * cin * cout)),
                tensor(&[cout], column_sums(gd, cout)),
            ]
        })
    }

    /// Normalizes each position over the trailing axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return arg_err("layer_norm eps must be positive");
        }
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let c = channel_param(&x, &gv, "layer_norm gamma")?;
        channel_param(&x, &bv, "layer_norm beta")?;
        let rows = x.numel() / c;
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        xhat.par_chunks_mut(c)
            .zip(inv_std.par_iter_mut())
            .enumerate()
            .for_each(|(r, (xh, is))| {
                let row = &x.data()[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                *is = 1.0 / (var + eps).sqrt();
                for (o, v) in xh.iter_mut().zip(row) {
                    *o = (v - mean) * *is;
                }
            });
        let y: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv.data()[i % c] + bv.data()[i % c])
            .collect();
        let shape = x.shape().to_vec();
        self.tape.record("layer_norm", tensor(&shape, y), &[*self, *gamma, *beta], move |g| {
            let gd = g.data();
            let mut dx = vec![0.0; gd.len()];
            dx.par_chunks_mut(c).enumerate().for_each(|(r, d)| {
                let gr = &gd[r * c..(r + 1) * c];
                let xr = &xhat[r * c..(r + 1) * c];
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for ch in 0..c {
                    let dxh = gr[ch] * gv.data()[ch];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xr[ch];
                }
                mean_dxh /= c as f64;
                mean_dxh_xh /= c as f64;
                for ch in 0..c {
                    let dxh = gr[ch] * gv.data()[ch];
                    d[ch] = inv_std[r] * (dxh - mean_dxh - xr[ch] * mean_dxh_xh);
                }
            });
            let gx: Vec<f64> = gd.iter().zip(&xhat).map(|(g, x)| g * x).collect();
            vec![
                tensor(&shape, dx),
                tensor(&[c], column_sums(&gx, c)),
                tensor(&[c], column_sums(gd, c)),
            ]
        })
    }

    /// `s * relu(x)^2 + b` with scalar parameters `s` and `b` (shape `[1]`).
    pub fn star_relu(&self, s: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        let (x, sv, bv) = (self.value(), s.value(), b.value());
        if sv.shape() != [1] || bv.shape() != [1] {
            return shape_err("star_relu parameters must have shape [1]");
        }
        let (sc, bc) = (sv.data()[0], bv.data()[0]);
        let y = x.map(|v| sc * v.max(0.0).powi(2) + bc);
        self.tape.record("star_relu", y, &[*self, *s, *b], move |g| {
            let dx = g.zip_map(&x, |g, v| g * sc * 2.0 * v.max(0.0)).unwrap();
            let ds: f64 = g.data().iter().zip(x.data()).map(|(g, v)| g * v.max(0.0).powi(2)).sum();
            vec![dx, Tensor::scalar(ds), Tensor::scalar(g.sum())]
        })
    }

    /// Mean over the spatial axes: `[B, H, W, C] -> [B, C]`.
    pub fn spatial_mean(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (bn, h, w, c) = image_dims(&x, "spatial_mean")?;
        let n = (h * w) as f64;
        let mut out = vec![0.0; bn * c];
        for b in 0..bn {
            let sums = column_sums(&x.data()[b * h * w * c..(b + 1) * h * w * c], c);
            for (o, s) in out[b * c..(b + 1) * c].iter_mut().zip(sums) {
                *o = s / n;
            }
        }
        let shape = x.shape().to_vec();
        self.tape.record("spatial_mean", tensor(&[bn, c], out), &[*self], move |g| {
            let gd = g.data();
            vec![Tensor::from_fn(shape.clone(), |i| {
                let b = i / (h * w * c);
                gd[b * c + i % c] / n
            })]
        })
    }

    /// Exponential decay envelope `exp(-alpha_c * d_p) + bias_c`, shape `[P, C]`,
    /// for fixed distances `d_p >= 0`. Negative `alpha` is clamped to zero.
    pub fn decay_window(alpha: &Var<'t>, bias: &Var<'t>, distances: Arc<Vec<f64>>) -> Result<Var<'t>> {
        let (av, bv) = (alpha.value(), bias.value());
        if av.rank() != 1 || av.shape() != bv.shape() {
            return shape_err(format!("decay_window alpha {:?}, bias {:?}", av.shape(), bv.shape()));
        }
        let c = av.numel();
        let p = distances.len();
        if p == 0 {
            return arg_err("decay_window needs at least one position");
        }
        let decay: Vec<f64> = (0..p * c)
            .map(|i| (-av.data()[i % c].max(0.0) * distances[i / c]).exp())
            .collect();
        let y: Vec<f64> = decay.iter().enumerate().map(|(i, e)| e + bv.data()[i % c]).collect();
        let active: Vec<bool> = av.data().iter().map(|&a| a >= 0.0).collect();
        alpha.tape.record("decay_window", tensor(&[p, c], y), &[*alpha, *bias], move |g| {
            let gd = g.data();
            let dd: Vec<f64> = (0..p * c).map(|i| -gd[i] * distances[i / c] * decay[i]).collect();
            let mut da = column_sums(&dd, c);
            for (d, &on) in da.iter_mut().zip(&active) {
                if !on {
                    *d = 0.0;
                }
            }
            vec![tensor(&[c], da), tensor(&[c], column_sums(gd, c))]
        })
    }

    /// Windowed long convolution of a `[B, H, W, C]` map with a `[KH, KW, C]`
    /// kernel; see [`crate::longconv`] for the index convention.
    pub fn long_conv(&self, kernel: &Var<'t>, offset: (usize, usize)) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        let (bn, h, w, c) = image_dims(&x, "long_conv")?;
        let (kh, kw) = match *k.shape() {
            [kh, kw, kc] if kc == c => (kh, kw),
            ref s => return shape_err(format!("long_conv kernel {s:?} for {c} channels")),
        };
        if offset.0 >= kh || offset.1 >= kw {
            return arg_err(format!("long_conv offset {offset:?} outside kernel {kh}x{kw}"));
        }
        let geom = ConvGeometry {
            batch: bn,
            height: h,
            width: w,
            channels: c,
            kernel_h: kh,
            kernel_w: kw,
            off_y: offset.0,
            off_x: offset.1,
        };
        let y = longconv::forward(&geom, x.data(), k.data());
        let shape = x.shape().to_vec();
        self.tape.record("long_conv", tensor(&shape, y), &[*self, *kernel], move |g| {
            let (dx, dk) = longconv::backward(&geom, x.data(), k.data(), g.data());
            vec![tensor(&shape, dx), tensor(&[kh, kw, c], dk)]
        })
    }

    /// Differentiable [`circular_convolve`]; `self` and `h` share one shape.
    pub fn circular_convolve(&self, h: &Var<'t>, dims: &[usize]) -> Result<Var<'t>> {
        let (x, hv) = (self.value(), h.value());
        let y = circular_convolve(&x, &hv, dims)?;
        let dims = dims.to_vec();
        self.tape.record("circular_convolve", y, &[*self, *h], move |g| {
            let dx = circular_convolve(g, &reverse_circular(&hv, &dims), &dims).unwrap();
            let dh = circular_convolve(g, &reverse_circular(&x, &dims), &dims).unwrap();
            vec![dx, dh]
        })
    }

    /// Mean label-smoothed cross-entropy of `[N, classes]` logits.
    pub fn cross_entropy(&self, labels: &[usize], smoothing: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (n, k) = match *x.shape() {
            [n, k] => (n, k),
            ref s => return shape_err(format!("cross_entropy expects [N, classes], got {s:?}")),
        };
        if labels.len() != n {
            return shape_err(format!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return arg_err(format!("label {bad} out of range for {k} classes"));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return arg_err(format!("label smoothing {smoothing} outside [0, 1)"));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &x.data()[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for j in 0..k {
                let t = smoothing / k as f64 + if j == labels[r] { 1.0 - smoothing } else { 0.0 };
                loss -= t * (row[j] - lse);
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        self.tape.record("cross_entropy", Tensor::scalar(loss), &[*self], move |g| {
            let scale = g.data()[0] / n as f64;
            let d = Tensor::from_fn([n, k], |i| {
                let (r, j) = (i / k, i % k);
                let t = smoothing / k as f64 + if j == labels[r] { 1.0 - smoothing } else { 0.0 };
                (probs[i] - t) * scale
            });
            vec![d]
        })
    }
}
