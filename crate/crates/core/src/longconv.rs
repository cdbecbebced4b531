//! FFT engine behind every long convolution in the mixers.
//!
//! All variants reduce to one windowed linear convolution on a channel-last map
//! `u[b, y, x, c]` with a per-channel kernel `h[j_y, j_x, c]`:
//!
//! ```text
//! out[b, i_y, i_x, c] = sum_{s_y, s_x} u[b, s_y, s_x, c] * h[i_y - s_y + off_y, i_x - s_x + off_x, c]
//! ```
//!
//! Causal Hyena uses a length-`L` kernel with offset 0; the centered variants
//! use `2L - 1` taps with offset `L - 1` (the kernel center). Both operands are
//! zero padded to a fast transform length `M >= L + K - 1` per axis, so the
//! circular product never aliases into the selected output window. Outputs
//! are cleared outside the box reachable from the operands' nonzeros, so
//! structural zeros such as causality hold exactly.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::fft::{fast_len, plan, plan_c2r, plan_r2c};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub off_y: usize,
    pub off_x: usize,
}

impl ConvGeometry {
    fn fft_dims(&self) -> (usize, usize) {
        (
            fast_len(self.height + self.kernel_h - 1),
            fast_len(self.width + self.kernel_w - 1),
        )
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.channels
    }
}

/// 2D real-to-complex transform of one channel plane (zero padded to `my x mx`).
struct Plane {
    my: usize,
    mx: usize,
}

impl Plane {
    fn cols(&self) -> usize {
        self.mx / 2 + 1
    }

    /// `src` is read as a `rows x cols_in` plane through `get(r, c)`.
    fn forward(&self, rows: usize, cols_in: usize, get: impl Fn(usize, usize) -> f64) -> Vec<Complex64> {
        let nc = self.cols();
        let mut spec = vec![Complex64::default(); self.my * nc];
        let r2c = plan_r2c(self.mx);
        let mut line = r2c.make_input_vec();
        let mut scratch = r2c.make_scratch_vec();
        for r in 0..rows {
            line.iter_mut().for_each(|v| *v = 0.0);
            for (c, slot) in line.iter_mut().enumerate().take(cols_in) {
                *slot = get(r, c);
            }
            r2c.process_with_scratch(&mut line, &mut spec[r * nc..(r + 1) * nc], &mut scratch)
                .expect("buffer sizes come from the plan");
        }
        if self.my > 1 {
            column_pass(&mut spec, self.my, nc, false);
        }
        spec
    }

    /// Inverse transform returning the `nh x nw` window starting at `(r0, c0)`
    /// (indices taken modulo the padded extents), scaled by `1/(my*mx)`.
    fn inverse_window(&self, mut spec: Vec<Complex64>, r0: usize, nh: usize, c0: usize, nw: usize) -> Vec<f64> {
        let nc = self.cols();
        if self.my > 1 {
            column_pass(&mut spec, self.my, nc, true);
        }
        let c2r = plan_c2r(self.mx);
        let mut row = c2r.make_output_vec();
        let mut scratch = c2r.make_scratch_vec();
        let scale = 1.0 / (self.my * self.mx) as f64;
        let mut out = vec![0.0; nh * nw];
        let mut line = vec![Complex64::default(); nc];
        for i in 0..nh {
            let r = (r0 + i) % self.my;
            line.copy_from_slice(&spec[r * nc..(r + 1) * nc]);
            // Hermitian symmetry forces these to be real; drop rounding residue.
            line[0].im = 0.0;
            if self.mx % 2 == 0 {
                line[nc - 1].im = 0.0;
            }
            c2r.process_with_scratch(&mut line, &mut row, &mut scratch)
                .expect("buffer sizes come from the plan");
            for j in 0..nw {
                out[i * nw + j] = row[(c0 + j) % self.mx] * scale;
            }
        }
        out
    }
}

fn column_pass(spec: &mut [Complex64], my: usize, nc: usize, inverse: bool) {
    let fft = plan(my, inverse);
    let mut col = vec![Complex64::default(); my];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    for c in 0..nc {
        for r in 0..my {
            col[r] = spec[r * nc + c];
        }
        fft.process_with_scratch(&mut col, &mut scratch);
        for r in 0..my {
            spec[r * nc + c] = col[r];
        }
    }
}

fn input_plane(geom: &ConvGeometry, plane: &Plane, data: &[f64], b: usize, c: usize) -> Vec<Complex64> {
    let (h, w, ch) = (geom.height, geom.width, geom.channels);
    plane.forward(h, w, |y, x| data[((b * h + y) * w + x) * ch + c])
}

fn kernel_plane(geom: &ConvGeometry, plane: &Plane, kernel: &[f64], c: usize) -> Vec<Complex64> {
    let (kh, kw, ch) = (geom.kernel_h, geom.kernel_w, geom.channels);
    plane.forward(kh, kw, |y, x| kernel[(y * kw + x) * ch + c])
}

type Support = ((isize, isize), (isize, isize));

/// Inclusive row and column ranges covering the nonzeros of a `rows x cols` plane.
fn support_of(rows: usize, cols: usize, get: impl Fn(usize, usize) -> f64) -> Option<Support> {
    let (mut y0, mut y1, mut x0, mut x1) = (isize::MAX, isize::MIN, isize::MAX, isize::MIN);
    for y in 0..rows {
        for x in 0..cols {
            if get(y, x) != 0.0 {
                let (y, x) = (y as isize, x as isize);
                (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
            }
        }
    }
    (y0 <= y1).then_some(((y0, y1), (x0, x1)))
}

fn input_support(geom: &ConvGeometry, data: &[f64], b: usize, c: usize) -> Option<Support> {
    let (h, w, ch) = (geom.height, geom.width, geom.channels);
    support_of(h, w, |y, x| data[((b * h + y) * w + x) * ch + c])
}

fn kernel_support(geom: &ConvGeometry, kernel: &[f64], c: usize) -> Option<Support> {
    let (kw, ch) = (geom.kernel_w, geom.channels);
    support_of(geom.kernel_h, kw, |y, x| kernel[(y * kw + x) * ch + c])
}

/// Sets an `h x w` plane to zero outside the inclusive ranges, where the
/// exact result vanishes and the transform leaves only rounding residue.
fn clip(vals: &mut [f64], w: usize, rows: (isize, isize), cols: (isize, isize)) {
    for (i, v) in vals.iter_mut().enumerate() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        if y < rows.0 || y > rows.1 || x < cols.0 || x > cols.1 {
            *v = 0.0;
        }
    }
}

fn scatter(geom: &ConvGeometry, out: &mut [f64], planes: Vec<((usize, usize), Vec<f64>)>) {
    let (h, w, ch) = (geom.height, geom.width, geom.channels);
    for ((b, c), vals) in planes {
        for y in 0..h {
            for x in 0..w {
                out[((b * h + y) * w + x) * ch + c] = vals[y * w + x];
            }
        }
    }
}

fn plane_for(geom: &ConvGeometry) -> Plane {
    let (my, mx) = geom.fft_dims();
    Plane { my, mx }
}

pub fn forward(geom: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    debug_assert_eq!(input.len(), geom.input_len());
    debug_assert_eq!(kernel.len(), geom.kernel_len());
    let plane = plane_for(geom);
    let kspec: Vec<Vec<Complex64>> = (0..geom.channels)
        .into_par_iter()
        .map(|c| kernel_plane(geom, &plane, kernel, c))
        .collect();
    let planes: Vec<_> = (0..geom.batch * geom.channels)
        .into_par_iter()
        .map(|bc| {
            let (b, c) = (bc / geom.channels, bc % geom.channels);
            let mut spec = input_plane(geom, &plane, input, b, c);
            for (s, k) in spec.iter_mut().zip(&kspec[c]) {
                *s *= k;
            }
            let mut vals = plane.inverse_window(spec, geom.off_y, geom.height, geom.off_x, geom.width);
            match (input_support(geom, input, b, c), kernel_support(geom, kernel, c)) {
                (Some(u), Some(k)) => {
                    let (oy, ox) = (geom.off_y as isize, geom.off_x as isize);
                    let rows = (u.0 .0 + k.0 .0 - oy, u.0 .1 + k.0 .1 - oy);
                    let cols = (u.1 .0 + k.1 .0 - ox, u.1 .1 + k.1 .1 - ox);
                    clip(&mut vals, geom.width, rows, cols);
                }
                _ => vals.iter_mut().for_each(|v| *v = 0.0),
            }
            ((b, c), vals)
        })
        .collect();
    let mut out = vec![0.0; geom.input_len()];
    scatter(geom, &mut out, planes);
    out
}

/// Gradients of `sum(grad_out * forward(input, kernel))` with respect to the
/// input and the kernel. Kernel gradients are reduced over the batch in index
/// order, so results do not depend on thread scheduling.
pub fn backward(geom: &ConvGeometry, input: &[f64], kernel: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let plane = plane_for(geom);
    let (my, mx) = (plane.my, plane.mx);
    let kspec: Vec<Vec<Complex64>> = (0..geom.channels)
        .into_par_iter()
        .map(|c| kernel_plane(geom, &plane, kernel, c))
        .collect();
    let row_start = (my - geom.off_y) % my;
    let col_start = (mx - geom.off_x) % mx;

    // Per (b, c): G = FFT(grad_out), U = FFT(input).
    // d_input = IFFT(conj(H) G) read from -off; d_kernel accumulates conj(U) G.
    let per_item: Vec<(Vec<f64>, Vec<Complex64>)> = (0..geom.batch * geom.channels)
        .into_par_iter()
        .map(|bc| {
            let (b, c) = (bc / geom.channels, bc % geom.channels);
            let g = input_plane(geom, &plane, grad_out, b, c);
            let u = input_plane(geom, &plane, input, b, c);
            let dspec: Vec<Complex64> = g.iter().zip(&kspec[c]).map(|(g, k)| k.conj() * g).collect();
            let kcorr: Vec<Complex64> = g.iter().zip(&u).map(|(g, u)| u.conj() * g).collect();
            let mut din = plane.inverse_window(dspec, row_start, geom.height, col_start, geom.width);
            match (input_support(geom, grad_out, b, c), kernel_support(geom, kernel, c)) {
                (Some(g), Some(k)) => {
                    let (oy, ox) = (geom.off_y as isize, geom.off_x as isize);
                    let rows = (g.0 .0 - k.0 .1 + oy, g.0 .1 - k.0 .0 + oy);
                    let cols = (g.1 .0 - k.1 .1 + ox, g.1 .1 - k.1 .0 + ox);
                    clip(&mut din, geom.width, rows, cols);
                }
                _ => din.iter_mut().for_each(|v| *v = 0.0),
            }
            (din, kcorr)
        })
        .collect();

    let mut d_input = vec![0.0; geom.input_len()];
    let (h, w, ch) = (geom.height, geom.width, geom.channels);
    for (bc, (din, _)) in per_item.iter().enumerate() {
        let (b, c) = (bc / ch, bc % ch);
        for y in 0..h {
            for x in 0..w {
                d_input[((b * h + y) * w + x) * ch + c] = din[y * w + x];
            }
        }
    }

    let kernel_grads: Vec<Vec<f64>> = (0..ch)
        .into_par_iter()
        .map(|c| {
            let mut acc = per_item[c].1.clone();
            for b in 1..geom.batch {
                for (a, v) in acc.iter_mut().zip(&per_item[b * ch + c].1) {
                    *a += v;
                }
            }
            plane.inverse_window(acc, row_start, geom.kernel_h, col_start, geom.kernel_w)
        })
        .collect();
    let mut d_kernel = vec![0.0; geom.kernel_len()];
    let kw = geom.kernel_w;
    for (c, vals) in kernel_grads.into_iter().enumerate() {
        for j in 0..geom.kernel_h * kw {
            d_kernel[j * ch + c] = vals[j];
        }
    }
    (d_input, d_kernel)
}
