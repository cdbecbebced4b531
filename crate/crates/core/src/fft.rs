//! Discrete Fourier transforms over arbitrary tensor axes and circular convolution.
//!
//! Transforms of any length are delegated to `rustfft`, which picks mixed-radix,
//! Rader or Bluestein algorithms as the length requires.

use std::cell::RefCell;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
    static REAL_PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

pub(crate) fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

pub(crate) fn plan_r2c(len: usize) -> Arc<dyn RealToComplex<f64>> {
    REAL_PLANNER.with(|p| p.borrow_mut().plan_fft_forward(len))
}

pub(crate) fn plan_c2r(len: usize) -> Arc<dyn ComplexToReal<f64>> {
    REAL_PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(len))
}

/// Smallest `n >= min` whose only prime factors are 2, 3, 5 and 7.
pub fn fast_len(min: usize) -> usize {
    let mut n = min.max(1);
    loop {
        let mut r = n;
        for p in [2, 3, 5, 7] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return n;
        }
        n += 1;
    }
}

/// Complex array produced by [`fft`]; `data` is row-major and stored as
/// interleaved `(re, im)` pairs in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn new(shape: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return shape_err(format!("spectrum shape {shape:?} vs {} values", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_real(x: &Tensor) -> Self {
        Self {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|&r| Complex64::new(r, 0.0)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Flat `[re0, im0, re1, im1, ...]` view.
    pub fn interleaved(&self) -> Vec<f64> {
        self.data.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    pub fn real_part(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|c| c.re).collect())
            .expect("spectrum shape is valid")
    }

    /// Applies the DFT (or its `1/N`-scaled inverse) along each listed axis.
    pub fn transform(mut self, dims: &[usize], inverse: bool) -> Result<Self> {
        check_dims(&self.shape, dims)?;
        for &axis in dims {
            transform_axis(&self.shape, &mut self.data, axis, inverse);
        }
        Ok(self)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }
}

fn check_dims(shape: &[usize], dims: &[usize]) -> Result<()> {
    if dims.is_empty() {
        return arg_err("empty axis list");
    }
    for (i, &d) in dims.iter().enumerate() {
        if d >= shape.len() {
            return arg_err(format!("axis {d} out of range for rank {}", shape.len()));
        }
        if dims[..i].contains(&d) {
            return arg_err(format!("axis {d} listed twice"));
        }
    }
    Ok(())
}

fn transform_axis(shape: &[usize], data: &mut [Complex64], axis: usize, inverse: bool) {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let fft = plan(n, inverse);
    let scale = if inverse { 1.0 / n as f64 } else { 1.0 };
    let mut line = vec![Complex64::default(); n];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (k, slot) in line.iter_mut().enumerate() {
                *slot = data[base + k * inner];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for (k, v) in line.iter().enumerate() {
                data[base + k * inner] = v * scale;
            }
        }
    }
}

/// DFT of a real tensor along `dims`. With `inverse` set the `1/N` scaling is applied.
pub fn fft(x: &Tensor, dims: &[usize], inverse: bool) -> Result<ComplexSpectrum> {
    ComplexSpectrum::from_real(x).transform(dims, inverse)
}

/// Circular convolution `y[t] = sum_s x[s] h[(t - s) mod N]` along `dims`;
/// the remaining axes are batch axes shared by `x` and `h`.
pub fn circular_convolve(x: &Tensor, h: &Tensor, dims: &[usize]) -> Result<Tensor> {
    if x.shape() != h.shape() {
        return shape_err(format!(
            "circular_convolve needs equal extents, got {:?} and {:?}",
            x.shape(),
            h.shape()
        ));
    }
    let fx = fft(x, dims, false)?;
    let fh = fft(h, dims, false)?;
    Ok(fx.mul(&fh)?.transform(dims, true)?.real_part())
}

/// Index reversal `h[n] -> h[-n mod N]` along `dims`, the adjoint partner of
/// circular convolution.
pub(crate) fn reverse_circular(h: &Tensor, dims: &[usize]) -> Tensor {
    let shape = h.shape().to_vec();
    let mut out = Tensor::zeros(shape.clone());
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..h.numel() {
        let mut rem = flat;
        for a in (0..shape.len()).rev() {
            idx[a] = rem % shape[a];
            rem /= shape[a];
        }
        let mut src = idx.clone();
        for &d in dims {
            src[d] = (shape[d] - idx[d]) % shape[d];
        }
        out.data_mut()[flat] = h.at(&src);
    }
    out
}
