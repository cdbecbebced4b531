//! Inspection tools: effective receptive fields, effective kernel diameters
//! and feature-map coverage, in-model kernel truncation, runtime scaling.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{arg_err, Error, Result};
use crate::filter::FilterShape;
use crate::mixer::{ConvLayout, Domain, LongConv, Mixer, MixerConfig, MixerKind};
use crate::model::Model;
use crate::nn::Ctx;
use crate::tensor::Tensor;

/// Mean absolute input gradient of the center output, max-normalized.
#[derive(Clone, Debug)]
pub struct ErfMap {
    /// `[H, W]` in `[0, 1]`.
    pub grid: Tensor,
    pub num_images: usize,
    /// Maximum of the averaged gradient map before normalization.
    pub scale: f64,
}

/// Backpropagates the channel sum at the center of the normalized last-stage
/// map of each image and averages `Σ_color |∂/∂pixel|` over the batch.
pub fn erf_map(model: &Model, images: &Tensor) -> Result<ErfMap> {
    let (n, h, w) = match *images.shape() {
        [n, h, w, 3] if n >= 1 => (n, h, w),
        ref s => return arg_err(format!("ERF needs a non-empty [N, H, W, 3] batch, got {s:?}")),
    };
    let mut acc = vec![0.0; h * w];
    for i in 0..n {
        let img = Tensor::new([1, h, w, 3], images.data()[i * h * w * 3..(i + 1) * h * w * 3].to_vec())?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape);
        let x = ctx.input(img);
        let feats = model.features(&ctx, x)?;
        let shape = feats.pre_pool.shape();
        let (fh, fw, c) = (shape[1], shape[2], shape[3]);
        let (cy, cx) = (fh / 2, fw / 2);
        let pick = Tensor::from_fn(shape.clone(), |j| {
            let (y, xx) = (j / (fw * c), (j / c) % fw);
            if y == cy && xx == cx {
                1.0
            } else {
                0.0
            }
        });
        let objective = feats.pre_pool.mul_const(Arc::new(pick))?.sum()?;
        let g = tape.backward(objective)?.wrt(x);
        for (p, a) in acc.iter_mut().enumerate() {
            *a += (0..3).map(|ch| g.data()[p * 3 + ch].abs()).sum::<f64>();
        }
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    let scale = acc.iter().cloned().fold(0.0, f64::max);
    if scale > 0.0 {
        for a in &mut acc {
            *a /= scale;
        }
    }
    Ok(ErfMap {
        grid: Tensor::new([h, w], acc)?,
        num_images: n,
        scale,
    })
}

/// `2·r + 1` where `r` is the largest Chebyshev distance from the center
/// among values `≥ threshold`; 0 when nothing survives. Accepts a centered
/// `[L]` or `[KH, KW]` grid with odd extents.
pub fn kernel_effective_diameter(values: &Tensor, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return arg_err(format!("threshold must be positive, got {threshold}"));
    }
    let (kh, kw) = match *values.shape() {
        [l] => (1, l),
        [kh, kw] => (kh, kw),
        ref s => return arg_err(format!("diameter needs a [L] or [KH, KW] grid, got {s:?}")),
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return arg_err(format!("diameter needs odd extents, got {kh}x{kw}"));
    }
    let (cy, cx) = ((kh / 2) as i64, (kw / 2) as i64);
    let mut best: Option<i64> = None;
    for (i, &v) in values.data().iter().enumerate() {
        if v >= threshold {
            let (y, x) = ((i / kw) as i64, (i % kw) as i64);
            let r = (y - cy).abs().max((x - cx).abs());
            best = Some(best.map_or(r, |b| b.max(r)));
        }
    }
    Ok(best.map_or(0.0, |r| (2 * r + 1) as f64))
}

/// What the diameter is measured on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CoverageSource {
    /// The decay envelope alone.
    #[default]
    Window,
    /// `|kernel|` normalized by its per-channel maximum.
    Kernel,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageRow {
    /// 1-based.
    pub stage: usize,
    /// 1-based within the stage.
    pub block: usize,
    pub diameter: f64,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
}

impl CoverageReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,block,diameter,coverage\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.stage, r.block, r.diameter, r.coverage));
        }
        s
    }
}

/// Diameter of one channel's `[P]` values laid out as `shape`, and the
/// extent it is compared against. A causal kernel reports its one-sided
/// footprint `t_max + 1`.
fn channel_diameter(shape: FilterShape, column: Vec<f64>, threshold: f64) -> Result<(f64, usize)> {
    match shape {
        FilterShape::Causal { len } => {
            if !(threshold > 0.0) {
                return arg_err(format!("threshold must be positive, got {threshold}"));
            }
            let last = column.iter().rposition(|&v| v >= threshold);
            Ok((last.map_or(0.0, |t| (t + 1) as f64), len))
        }
        FilterShape::Bidirectional { len } => {
            Ok((kernel_effective_diameter(&Tensor::new([2 * len - 1], column)?, threshold)?, len))
        }
        FilterShape::Pixel { l_y, l_x } => {
            let grid = Tensor::new([2 * l_y - 1, 2 * l_x - 1], column)?;
            Ok((kernel_effective_diameter(&grid, threshold)?, l_y.max(l_x)))
        }
    }
}

fn conv_diameter(conv: &LongConv, threshold: f64, source: CoverageSource) -> Result<(f64, f64)> {
    let c = conv.filter.channels();
    let values = match source {
        CoverageSource::Window => conv.filter.window_values()?,
        CoverageSource::Kernel => {
            let k = conv.materialize()?;
            k.reshape([k.numel() / c, c])?.map(f64::abs)
        }
    };
    let p = values.shape()[0];
    let (mut total, mut extent) = (0.0, 1);
    for ch in 0..c {
        let mut column: Vec<f64> = (0..p).map(|i| values.at(&[i, ch])).collect();
        if source == CoverageSource::Kernel {
            let peak = column.iter().cloned().fold(0.0, f64::max);
            if peak > 0.0 {
                column.iter_mut().for_each(|v| *v /= peak);
            }
        }
        let (d, e) = channel_diameter(conv.filter.shape, column, threshold)?;
        total += d;
        extent = e;
    }
    Ok((total / c as f64, extent as f64))
}

/// Mean per-channel effective diameter of each long-convolution block and its
/// ratio to the feature extent the kernel acts on.
pub fn coverage_report(model: &Model, threshold: f64, source: CoverageSource) -> Result<CoverageReport> {
    let mut rows = Vec::new();
    for (s, b, block) in model.blocks() {
        let Some(m) = block.mixer.hyena() else { continue };
        let mut diameter = 0.0;
        let mut coverage = 0.0;
        for conv in &m.convs {
            let (d, extent) = conv_diameter(conv, threshold, source)?;
            diameter += d;
            coverage += d / extent;
        }
        let n = m.convs.len() as f64;
        rows.push(CoverageRow {
            stage: s + 1,
            block: b + 1,
            diameter: diameter / n,
            coverage: coverage / n,
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument("model has no implicit-filter mixers".into()));
    }
    Ok(CoverageReport { rows })
}

/// Zeroes every kernel tap of `stage` (1-based) outside the centered box of
/// side `relative_size · extent` along each axis; a tap at offset `t` survives
/// when `2|t| + 1 ≤ relative_size · extent`. Masks that keep every tap are
/// omitted, so `relative_size = 2` returns an identical model.
pub fn truncate_kernels(model: &Model, stage: usize, relative_size: f64) -> Result<Model> {
    if !(0.0..=2.0).contains(&relative_size) {
        return arg_err(format!("relative size {relative_size} outside [0, 2]"));
    }
    if stage == 0 || stage > model.stages.len() {
        return arg_err(format!("stage {stage} outside 1..={}", model.stages.len()));
    }
    let st = &model.stages[stage - 1];
    if !st.blocks.iter().any(|b| b.mixer.hyena().is_some()) {
        return Err(Error::InvalidArgument(format!("stage {stage} has no long-convolution mixers")));
    }
    let (fh, fw) = st.extent;
    let mut out = model.clone();
    for block in &mut out.stages[stage - 1].blocks {
        let Some(m) = block.mixer.hyena_mut() else { continue };
        for conv in &mut m.convs {
            let ((kh, kw), (oy, ox)) = conv.geometry();
            // Extent of each kernel axis the layout actually convolves along.
            let (ey, ex) = match conv.layout {
                ConvLayout::Flat => (None, Some(fh * fw)),
                ConvLayout::Horizontal => (None, Some(fw)),
                ConvLayout::Vertical => (Some(fh), None),
                ConvLayout::Plane => (Some(fh), Some(fw)),
            };
            let keep = |t: i64, e: Option<usize>| {
                e.is_none_or(|e| (2 * t.unsigned_abs() + 1) as f64 <= relative_size * e as f64)
            };
            let c = conv.filter.channels();
            let mask = Tensor::from_fn([kh, kw, c], |i| {
                let (y, x) = ((i / (kw * c)) as i64, ((i / c) % kw) as i64);
                let ky = keep(y - oy as i64, ey);
                let kx = keep(x - ox as i64, ex);
                if ky && kx {
                    1.0
                } else {
                    0.0
                }
            });
            conv.mask = if mask.data().iter().all(|&v| v == 1.0) {
                None
            } else {
                Some(Arc::new(mask))
            };
        }
    }
    Ok(out)
}

/// A benchmarked operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchVariant {
    Mixer(MixerKind),
    /// Direct `O(P²)` evaluation of a full `(2F-1)²` per-channel convolution.
    DenseConv,
}

impl BenchVariant {
    pub fn name(&self) -> &'static str {
        match self {
            BenchVariant::Mixer(k) => k.name(),
            BenchVariant::DenseConv => "dense_conv",
        }
    }
}

impl std::str::FromStr for BenchVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense_conv" | "dense" => Ok(BenchVariant::DenseConv),
            _ => Ok(BenchVariant::Mixer(s.parse()?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub extent: usize,
    pub channels: usize,
    pub pixels: usize,
    pub median_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln(time)` against `ln(pixels)` per variant.
    pub slopes: Vec<(String, f64)>,
}

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,extent,channels,pixels,median_seconds\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{:e}\n", r.variant, r.extent, r.channels, r.pixels, r.median_seconds));
        }
        s
    }

    pub fn slope(&self, variant: &str) -> Option<f64> {
        self.slopes.iter().find(|(v, _)| v == variant).map(|&(_, s)| s)
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Direct per-channel full convolution of `[H, W, C]` with a centered
/// `[2H-1, 2W-1, C]` kernel.
pub fn dense_conv(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w, c) = match *x.shape() {
        [h, w, c] => (h, w, c),
        ref s => return arg_err(format!("dense_conv input {s:?}")),
    };
    let (kh, kw) = (2 * h - 1, 2 * w - 1);
    if kernel.shape() != [kh, kw, c] {
        return arg_err(format!("dense_conv kernel {:?} for {h}x{w}x{c}", kernel.shape()));
    }
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        // Reversed rows make the inner loop a forward dot product.
        let rev: Vec<f64> = (0..kh * kw)
            .map(|i| kernel.data()[(kh - 1 - i / kw) * kw * c + (kw - 1 - i % kw) * c + ch])
            .collect();
        let plane: Vec<f64> = (0..h * w).map(|i| x.data()[i * c + ch]).collect();
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for s in 0..h {
                    // kernel index (i - s + h - 1) reversed is (h - 1 - i + s)
                    let krow = &rev[(h - 1 - i + s) * kw + (w - 1 - j)..][..w];
                    let xrow = &plane[s * w..(s + 1) * w];
                    acc += krow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                }
                out[(i * w + j) * c + ch] = acc;
            }
        }
    }
    Tensor::new([h, w, c], out)
}

/// Median forward time of each variant at each square extent, on one thread.
pub fn bench_runtime(variants: &[BenchVariant], extents: &[usize], channels: usize, repeats: usize) -> Result<BenchTable> {
    if repeats < 5 {
        return arg_err(format!("need at least 5 repeats, got {repeats}"));
    }
    if extents.is_empty() || extents.contains(&0) || channels == 0 {
        return arg_err("extents and channels must be positive");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &variant in variants {
        let mut lx = Vec::new();
        let mut ly = Vec::new();
        for &f in extents {
            let mut rng = ChaCha8Rng::seed_from_u64(f as u64);
            let x = Tensor::uniform([1, f, f, channels], -1.0, 1.0, &mut rng);
            let run: Box<dyn Fn() -> Result<()> + Send + Sync> = match variant {
                BenchVariant::Mixer(kind) => {
                    let cfg = MixerConfig::new(kind, channels, Domain::Map { h: f, w: f }, 16);
                    let mixer = Mixer::new(&cfg, &mut rng)?;
                    let x = x.clone();
                    Box::new(move || {
                        let tape = Tape::new();
                        let ctx = Ctx::new(&tape);
                        mixer.forward(&ctx, ctx.input(x.clone())).map(|_| ())
                    })
                }
                BenchVariant::DenseConv => {
                    let x = x.reshape([f, f, channels])?;
                    let k = Tensor::uniform([2 * f - 1, 2 * f - 1, channels], -1.0, 1.0, &mut rng);
                    Box::new(move || dense_conv(&x, &k).map(|_| ()))
                }
            };
            let mut times = pool.install(|| -> Result<Vec<f64>> {
                run()?;
                (0..repeats)
                    .map(|_| {
                        let t = Instant::now();
                        run()?;
                        Ok(t.elapsed().as_secs_f64())
                    })
                    .collect()
            })?;
            times.sort_by(f64::total_cmp);
            let median = times[times.len() / 2];
            lx.push(((f * f) as f64).ln());
            ly.push(median.max(1e-12).ln());
            rows.push(BenchRow {
                variant: variant.name().to_string(),
                extent: f,
                channels,
                pixels: f * f,
                median_seconds: median,
            });
        }
        let slope = if lx.len() >= 2 { fit_slope(&lx, &ly) } else { f64::NAN };
        slopes.push((variant.name().to_string(), slope));
    }
    Ok(BenchTable { rows, slopes })
}
