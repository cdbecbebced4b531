//! Direct-summation reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use hyenapixel::mixer::{
    hyena_bidirectional_mix, hyena_causal_mix, hyena_pixel_mix, separable_mix, ConvLayout, Domain, HyenaMixer, LongConv,
    MixerConfig, MixerKind,
};
use hyenapixel::nn::{DepthwiseConv2d, Linear};
use hyenapixel::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `O(N²)` DFT of a real signal as `(re, im)` pairs.
pub fn dft(x: &[f64]) -> Vec<(f64, f64)> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &v)| {
                let a = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

/// `y[t] = Σ_s x[s] h[(t - s) mod N]` over a `rows x cols` plane.
pub fn circular_direct_2d(x: &[f64], h: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * cols];
    for ty in 0..rows {
        for tx in 0..cols {
            let mut acc = 0.0;
            for sy in 0..rows {
                for sx in 0..cols {
                    let (jy, jx) = ((ty + rows - sy) % rows, (tx + cols - sx) % cols);
                    acc += x[sy * cols + sx] * h[jy * cols + jx];
                }
            }
            y[ty * cols + tx] = acc;
        }
    }
    y
}

/// `out[b,i,c] = Σ_s u[b,s,c] · k[i - s + off, c]` on `[B, H, W, C]` maps.
pub fn long_conv_direct(u: &Tensor, k: &Tensor, off: (usize, usize)) -> Tensor {
    let (bn, h, w, c) = (u.shape()[0], u.shape()[1], u.shape()[2], u.shape()[3]);
    let (kh, kw) = (k.shape()[0] as isize, k.shape()[1] as isize);
    let mut out = Tensor::zeros([bn, h, w, c]);
    for b in 0..bn {
        for iy in 0..h {
            for ix in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for sy in 0..h {
                        let jy = iy as isize - sy as isize + off.0 as isize;
                        if jy < 0 || jy >= kh {
                            continue;
                        }
                        for sx in 0..w {
                            let jx = ix as isize - sx as isize + off.1 as isize;
                            if jx < 0 || jx >= kw {
                                continue;
                            }
                            acc += u.at(&[b, sy, sx, ch]) * k.at(&[jy as usize, jx as usize, ch]);
                        }
                    }
                    out.set(&[b, iy, ix, ch], acc);
                }
            }
        }
    }
    out
}

/// `x · W + b` over the last axis.
pub fn linear_direct(x: &Tensor, lin: &Linear) -> Tensor {
    let w = lin.weight.value();
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::from_fn(shape, |i| {
        let (r, o) = (i / cout, i % cout);
        let b = lin.bias.as_ref().map_or(0.0, |b| b.value().data()[o]);
        (0..cin).fold(b, |acc, j| acc + x.data()[r * cin + j] * w.data()[j * cout + o])
    })
}

/// Depthwise convolution with zero padding `(py, px)` before the first row / column.
pub fn depthwise_direct(x: &Tensor, conv: &DepthwiseConv2d) -> Tensor {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let wt = conv.weight.value();
    let (kh, kw) = (wt.shape()[0], wt.shape()[1]);
    let (py, px) = (conv.padding.0 as isize, conv.padding.1 as isize);
    Tensor::from_fn([n, h, w, c], |i| {
        let (b, y, xx, ch) = (i / (h * w * c), (i / (w * c)) % h, (i / c) % w, i % c);
        let mut acc = conv.bias.value().data()[ch];
        for dy in 0..kh {
            for dx in 0..kw {
                let (sy, sx) = (y as isize + dy as isize - py, xx as isize + dx as isize - px);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    acc += wt.at(&[dy, dx, ch]) * x.at(&[b, sy as usize, sx as usize, ch]);
                }
            }
        }
        acc
    })
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x * y).unwrap()
}

/// `(q, k, v)` of a `[N, H, W, C]` map.
pub fn qkv_direct(x: &Tensor, m: &HyenaMixer) -> (Tensor, Tensor, Tensor) {
    let c = x.shape()[3];
    let p = depthwise_direct(&linear_direct(x, &m.proj.pointwise), &m.proj.short_conv);
    let part = |o: usize| {
        let mut s = p.shape().to_vec();
        s[3] = c;
        Tensor::from_fn(s, |i| p.data()[(i / c) * 3 * c + o * c + i % c])
    };
    (part(0), part(1), part(2))
}

/// Long-convolution branch `g(q ⊙ k)` of a `[N, H, W, C]` map.
pub fn long_branch_direct(z: &Tensor, m: &HyenaMixer) -> Tensor {
    let shape = z.shape().to_vec();
    let mut z = z.clone();
    for conv in &m.convs {
        let (_, off) = conv.geometry();
        let kernel = conv.materialize().unwrap();
        z = match conv.layout {
            ConvLayout::Flat => {
                let flat = z.reshape([shape[0], 1, shape[1] * shape[2], shape[3]]).unwrap();
                long_conv_direct(&flat, &kernel, off).reshape(shape.clone()).unwrap()
            }
            _ => long_conv_direct(&z, &kernel, off),
        };
    }
    z
}

/// Gated output `g(q ⊙ k) ⊙ v` before the output projection.
pub fn gated_direct(x: &Tensor, m: &HyenaMixer) -> Tensor {
    let (q, k, v) = qkv_direct(x, m);
    hadamard(&long_branch_direct(&hadamard(&q, &k), m), &v)
}

/// A seeded mixer with random sizes (sequences up to 64, maps up to 12×12,
/// up to 8 channels), nonzero window offsets, and a matching input.
pub fn random_mixer_case(kind: MixerKind, seed: u64) -> (HyenaMixer, Tensor) {
    let mut r = rng(seed);
    let c = r.random_range(1..=8);
    let n = r.random_range(1..=2);
    let (domain, shape) = match kind {
        MixerKind::CausalHyena | MixerKind::HB => {
            let l = r.random_range(1..=64);
            (Domain::Sequence { len: l }, vec![n, l, c])
        }
        _ => {
            let (h, w) = (r.random_range(1..=12), r.random_range(1..=12));
            (Domain::Map { h, w }, vec![n, h, w, c])
        }
    };
    let k = 2 * r.random_range(1..=4);
    let mut m = HyenaMixer::new(&MixerConfig::new(kind, c, domain, k), &mut r).unwrap();
    for conv in &mut m.convs {
        conv.filter.window.bias.set(Tensor::uniform([c], -0.5, 0.5, &mut r));
    }
    let x = Tensor::uniform(shape, -1.0, 1.0, &mut r);
    (m, x)
}

/// Max abs difference between the mixer's gated output and the direct-sum oracle.
pub fn oracle_error(kind: MixerKind, seed: u64) -> f64 {
    let (m, x) = random_mixer_case(kind, seed);
    let fast = match kind {
        MixerKind::CausalHyena => hyena_causal_mix(&x, &m),
        MixerKind::HB => hyena_bidirectional_mix(&x, &m),
        MixerKind::HPx => hyena_pixel_mix(&x, &m),
        MixerKind::HPxSeparable => separable_mix(&x, &m),
        MixerKind::LocalConv => unreachable!("not a long-convolution mixer"),
    }
    .unwrap();
    let x4 = match *x.shape() {
        [n, l, c] => x.reshape([n, 1, l, c]).unwrap(),
        _ => x.clone(),
    };
    let oracle = gated_direct(&x4, &m).reshape(x.shape().to_vec()).unwrap();
    fast.max_abs_diff(&oracle)
}

/// Makes the filter's kernel identically one: constant FFN output, flat window.
pub fn constant_kernel(conv: &mut LongConv) {
    let f = &mut conv.filter;
    let last = f.ffn.layers.last_mut().unwrap();
    let (i, o) = (last.in_features(), last.out_features());
    last.weight.set(Tensor::zeros([i, o]));
    last.bias = Some(hyenapixel::Param::new(Tensor::ones([o])));
    f.window.alpha.set(Tensor::zeros([o]));
    f.window.bias.set(Tensor::zeros([o]));
}

/// Makes the kernel a unit impulse at the zero offset.
pub fn impulse_kernel(conv: &mut LongConv) {
    constant_kernel(conv);
    let ((kh, kw), (oy, ox)) = conv.geometry();
    let c = conv.filter.channels();
    let mask = Tensor::from_fn([kh, kw, c], |i| f64::from(i / c == oy * kw + ox));
    conv.mask = Some(std::sync::Arc::new(mask));
}

/// A one-stage, one-block model of the given mixer family.
pub fn single_block_config(family: &str, channels: usize, input: usize) -> hyenapixel::ModelConfig {
    let mut cfg = hyenapixel::ModelConfig::preset(&format!("{family}-micro")).unwrap();
    cfg.stage_channels = vec![channels];
    cfg.stage_blocks = vec![1];
    cfg.mixers.truncate(1);
    cfg.k.truncate(1);
    cfg.res_scale_stages.clear();
    cfg.input_size = [input, input];
    cfg
}

/// Inclusive `(min, max)` row and column of the nonzero entries of an `[H, W]` grid.
pub fn support_box(grid: &Tensor) -> Option<((usize, usize), (usize, usize))> {
    let w = grid.shape()[1];
    let nz: Vec<(usize, usize)> = grid.data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| (i / w, i % w)).collect();
    let ys = nz.iter().map(|p| p.0);
    let xs = nz.iter().map(|p| p.1);
    Some(((ys.clone().min()?, ys.max()?), (xs.clone().min()?, xs.max()?)))
}

/// Value of the long-convolution branch `g` in the first block of `stage` (1-based).
pub fn long_branch(m: &hyenapixel::Model, stage: usize, x: &Tensor) -> Tensor {
    use hyenapixel::{Ctx, Tape};
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let mut h = hyenapixel::patch_embed(&ctx, &m.stem, ctx.input(x.clone())).unwrap();
    for (i, st) in m.stages.iter().enumerate() {
        if let Some(ds) = &st.downsample {
            h = hyenapixel::downsample(&ctx, ds, h).unwrap();
        }
        if i + 1 == stage {
            let block = &st.blocks[0];
            let normed = block.norm1.forward(&ctx, h).unwrap();
            let trace = block.mixer.hyena().unwrap().trace(&ctx, normed).unwrap();
            return (*trace.g.value()).clone();
        }
        for block in &st.blocks {
            h = block.forward(&ctx, h).unwrap();
        }
    }
    unreachable!("stage {stage} beyond the model")
}
