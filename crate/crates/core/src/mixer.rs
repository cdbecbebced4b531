//! Token mixers.
//!
//! The general Hyena recursion of order `O` is
//! `z_1 = v`, `z_{n+1} = x_n ⊙ (h_n * z_n)`, `y = z_{O+1}`, with projections
//! `(v, x_1, …, x_O)` of the input. Only `O = 2` is implemented, in the form
//! `y = g(q ⊙ k) ⊙ v` where `g` is a long convolution with an implicit filter.
//! The variants differ in what `g` sees:
//!
//! * causal: a length-`L` kernel on the (flattened) sequence, outputs `0..L`;
//! * `h_b`: a centered length-`2L-1` kernel on the flattened sequence;
//! * `h_px`: a centered `(2H-1) x (2W-1)` kernel on the map;
//! * separable: a centered horizontal kernel followed by a vertical one.
//!
//! All convolutions use zero padding, so every output position of `h_b` and
//! `h_px` sees every input position.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::filter::{FilterShape, ImplicitFilter};
use crate::nn::{impl_module, join, Ctx, DepthwiseConv2d, Linear, Module, Param, StarRelu};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    CausalHyena,
    #[serde(rename = "h_b")]
    HB,
    #[serde(rename = "h_px")]
    HPx,
    #[serde(rename = "h_px_separable")]
    HPxSeparable,
    LocalConv,
}

impl MixerKind {
    pub fn is_long_conv(&self) -> bool {
        !matches!(self, MixerKind::LocalConv)
    }

    pub fn name(&self) -> &'static str {
        match self {
            MixerKind::CausalHyena => "causal_hyena",
            MixerKind::HB => "h_b",
            MixerKind::HPx => "h_px",
            MixerKind::HPxSeparable => "h_px_separable",
            MixerKind::LocalConv => "local_conv",
        }
    }
}

impl std::str::FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "causal_hyena" | "causal" => MixerKind::CausalHyena,
            "h_b" | "hb" => MixerKind::HB,
            "h_px" | "hpx" => MixerKind::HPx,
            "h_px_separable" | "separable" => MixerKind::HPxSeparable,
            "local_conv" | "local" => MixerKind::LocalConv,
            _ => return Err(Error::Config(format!("unknown mixer variant {s:?}"))),
        })
    }
}

/// Spatial layout a mixer is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Sequence { len: usize },
    Map { h: usize, w: usize },
}

impl Domain {
    pub fn positions(&self) -> usize {
        match *self {
            Domain::Sequence { len } => len,
            Domain::Map { h, w } => h * w,
        }
    }

    fn dims(&self) -> (usize, usize) {
        match *self {
            Domain::Sequence { len } => (1, len),
            Domain::Map { h, w } => (h, w),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub channels: usize,
    pub domain: Domain,
    /// Positional embedding dimension of the implicit filters.
    pub k: usize,
    /// Short-convolution size: `n` means `n x n` on maps, `n` taps on sequences.
    pub short_conv: usize,
    /// Hyena order; only 2 is supported.
    pub order: usize,
    /// Expansion of the local-convolution mixer.
    pub local_expansion: usize,
    /// Depthwise kernel of the local-convolution mixer.
    pub local_kernel: usize,
}

impl MixerConfig {
    pub fn new(kind: MixerKind, channels: usize, domain: Domain, k: usize) -> Self {
        let short_conv = match domain {
            Domain::Sequence { .. } => 3,
            Domain::Map { .. } => 5,
        };
        Self {
            kind,
            channels,
            domain,
            k,
            short_conv,
            order: 2,
            local_expansion: 2,
            local_kernel: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order != 2 {
            return Err(Error::Config(format!("Hyena order {} unsupported; only 2", self.order)));
        }
        if self.channels == 0 || self.domain.positions() == 0 {
            return Err(Error::Config("mixer needs channels and a non-empty domain".into()));
        }
        if matches!(self.kind, MixerKind::HPx | MixerKind::HPxSeparable | MixerKind::LocalConv)
            && matches!(self.domain, Domain::Sequence { .. })
        {
            return Err(Error::Config(format!("{} needs a 2D map", self.kind.name())));
        }
        if self.kind.is_long_conv() && self.short_conv == 0 {
            return Err(Error::Config("short convolution size must be positive".into()));
        }
        if self.kind == MixerKind::LocalConv && (self.local_kernel % 2 == 0 || self.local_expansion == 0) {
            return Err(Error::Config("local convolution needs an odd kernel and positive expansion".into()));
        }
        Ok(())
    }

    /// Long-convolution kernel extents `(KH, KW)`, or `None` for local mixing.
    pub fn kernel_dims(&self) -> Option<(usize, usize)> {
        let (h, w) = self.domain.dims();
        let l = h * w;
        match self.kind {
            MixerKind::CausalHyena => Some((1, l)),
            MixerKind::HB => Some((1, 2 * l - 1)),
            MixerKind::HPx | MixerKind::HPxSeparable => Some((2 * h - 1, 2 * w - 1)),
            MixerKind::LocalConv => None,
        }
    }
}

/// Pointwise `C → 3C` followed by a depthwise short convolution.
#[derive(Clone, Debug)]
pub struct ProjectionParams {
    pub pointwise: Linear,
    pub short_conv: DepthwiseConv2d,
}
impl_module!(ProjectionParams { pointwise, short_conv });

impl ProjectionParams {
    pub fn new<R: Rng + ?Sized>(cfg: &MixerConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let n = cfg.short_conv;
        let short_conv = match (cfg.domain, cfg.kind) {
            (Domain::Sequence { .. }, MixerKind::CausalHyena) => DepthwiseConv2d::causal(n, 3 * c, rng),
            (Domain::Sequence { .. }, _) => DepthwiseConv2d::centered(1, n, 3 * c, rng),
            (Domain::Map { .. }, _) => DepthwiseConv2d::centered(n, n, 3 * c, rng),
        };
        Self {
            pointwise: Linear::new(c, 3 * c, true, rng),
            short_conv,
        }
    }

    pub fn channels(&self) -> usize {
        self.pointwise.in_features()
    }

    /// `(q, k, v)` for a `[N, H, W, C]` input.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let c = self.channels();
        if x.shape().last() != Some(&c) {
            return shape_err(format!("projection expects {c} channels, got {:?}", x.shape()));
        }
        let p = self.short_conv.forward(ctx, self.pointwise.forward(ctx, x)?)?;
        Ok((p.narrow_last(0, c)?, p.narrow_last(c, c)?, p.narrow_last(2 * c, c)?))
    }
}

/// Where a long-convolution kernel sits relative to the `[N, H, W, C]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvLayout {
    /// Over the row-major flattened map.
    Flat,
    Horizontal,
    Vertical,
    Plane,
}

/// An implicit filter applied as a long convolution, with an optional fixed
/// mask on the materialized kernel.
#[derive(Clone, Debug)]
pub struct LongConv {
    pub filter: ImplicitFilter,
    pub layout: ConvLayout,
    /// `[KH, KW, C]` multiplier applied to the kernel.
    pub mask: Option<Arc<Tensor>>,
}
impl_module!(LongConv { filter });

impl LongConv {
    /// Kernel extents `(KH, KW)` and zero-offset tap `(y, x)` on the map.
    pub fn geometry(&self) -> ((usize, usize), (usize, usize)) {
        let (_, n) = self.filter.shape.kernel_dims();
        let (_, o) = self.filter.shape.origin();
        match self.layout {
            ConvLayout::Flat | ConvLayout::Horizontal => ((1, n), (0, o)),
            ConvLayout::Vertical => ((n, 1), (o, 0)),
            ConvLayout::Plane => (self.filter.shape.kernel_dims(), self.filter.shape.origin()),
        }
    }

    /// Differentiable masked kernel `[KH, KW, C]`.
    pub fn kernel<'t>(&self, ctx: &Ctx<'t>) -> Result<Var<'t>> {
        let ((kh, kw), _) = self.geometry();
        let k = self.filter.kernel(ctx)?.reshape([kh, kw, self.filter.channels()])?;
        match &self.mask {
            Some(m) => k.mul_const(Arc::clone(m)),
            None => Ok(k),
        }
    }

    /// Materialized masked kernel `[KH, KW, C]`.
    pub fn materialize(&self) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape);
        let k = self.kernel(&ctx)?;
        Ok(k.value().as_ref().clone())
    }

    /// Convolves a `[N, H, W, C]` map.
    pub fn apply<'t>(&self, ctx: &Ctx<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let shape = z.shape();
        let (_, offset) = self.geometry();
        let kernel = self.kernel(ctx)?;
        match self.layout {
            ConvLayout::Flat => {
                let flat = z.reshape([shape[0], 1, shape[1] * shape[2], shape[3]])?;
                flat.long_conv(&kernel, offset)?.reshape(shape)
            }
            _ => z.long_conv(&kernel, offset),
        }
    }
}

/// `y = out(g(q ⊙ k) ⊙ v)`.
#[derive(Clone, Debug)]
pub struct HyenaMixer {
    pub kind: MixerKind,
    pub domain: Domain,
    pub proj: ProjectionParams,
    pub convs: Vec<LongConv>,
    pub out_proj: Linear,
}
impl_module!(HyenaMixer { proj, convs, out_proj });

/// Intermediate values of one Hyena mixer pass, all `[N, H, W, C]`.
pub struct HyenaTrace<'t> {
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
    /// Long-convolution output `g(q ⊙ k)`.
    pub g: Var<'t>,
    /// Gated output `g(q ⊙ k) ⊙ v`.
    pub gated: Var<'t>,
}

impl HyenaMixer {
    pub fn new<R: Rng + ?Sized>(cfg: &MixerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let (h, w) = cfg.domain.dims();
        let proj = ProjectionParams::new(cfg, rng);
        let conv = |shape, layout, rng: &mut R| -> Result<LongConv> {
            Ok(LongConv {
                filter: ImplicitFilter::new(shape, cfg.k, c, rng)?,
                layout,
                mask: None,
            })
        };
        let convs = match cfg.kind {
            MixerKind::CausalHyena => vec![conv(FilterShape::Causal { len: h * w }, ConvLayout::Flat, rng)?],
            MixerKind::HB => vec![conv(FilterShape::Bidirectional { len: h * w }, ConvLayout::Flat, rng)?],
            MixerKind::HPx => vec![conv(FilterShape::Pixel { l_y: h, l_x: w }, ConvLayout::Plane, rng)?],
            MixerKind::HPxSeparable => vec![
                conv(FilterShape::Bidirectional { len: w }, ConvLayout::Horizontal, rng)?,
                conv(FilterShape::Bidirectional { len: h }, ConvLayout::Vertical, rng)?,
            ],
            MixerKind::LocalConv => return arg_err("local_conv is not a Hyena mixer"),
        };
        Ok(Self {
            kind: cfg.kind,
            domain: cfg.domain,
            proj,
            convs,
            out_proj: Linear::new(c, c, true, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.proj.channels()
    }

    /// Same weights with filters re-evaluated for another domain; masks are dropped.
    pub fn resampled(&self, domain: Domain) -> Result<Self> {
        let (h, w) = domain.dims();
        let mut out = self.clone();
        out.domain = domain;
        for conv in &mut out.convs {
            let shape = match (conv.filter.shape, conv.layout) {
                (FilterShape::Causal { .. }, _) => FilterShape::Causal { len: h * w },
                (FilterShape::Bidirectional { .. }, ConvLayout::Flat) => FilterShape::Bidirectional { len: h * w },
                (FilterShape::Bidirectional { .. }, ConvLayout::Vertical) => FilterShape::Bidirectional { len: h },
                (FilterShape::Bidirectional { .. }, _) => FilterShape::Bidirectional { len: w },
                (FilterShape::Pixel { .. }, _) => FilterShape::Pixel { l_y: h, l_x: w },
            };
            conv.filter = conv.filter.resampled(shape)?;
            conv.mask = None;
        }
        Ok(out)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.domain.dims();
        if shape.len() != 4 || shape[1] != h || shape[2] != w || shape[3] != self.channels() {
            return shape_err(format!(
                "{} mixer built for {h}x{w}x{} got {shape:?}",
                self.kind.name(),
                self.channels()
            ));
        }
        Ok(())
    }

    /// Full pass on a `[N, H, W, C]` map, exposing intermediates.
    pub fn trace<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<HyenaTrace<'t>> {
        self.check_input(&x.shape())?;
        let (q, k, v) = self.proj.forward(ctx, x)?;
        let mut g = q.mul(&k)?;
        for conv in &self.convs {
            g = conv.apply(ctx, g)?;
        }
        let gated = g.mul(&v)?;
        Ok(HyenaTrace { q, k, v, g, gated })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let t = self.trace(ctx, x)?;
        self.out_proj.forward(ctx, t.gated)
    }
}

/// `contract(act(depthwise(expand(x))))`.
#[derive(Clone, Debug)]
pub struct LocalConvMixer {
    pub expand: Linear,
    pub depthwise: DepthwiseConv2d,
    pub act: StarRelu,
    pub contract: Linear,
}
impl_module!(LocalConvMixer { expand, depthwise, act, contract });

impl LocalConvMixer {
    pub fn new<R: Rng + ?Sized>(cfg: &MixerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, e) = (cfg.channels, cfg.channels * cfg.local_expansion);
        Ok(Self {
            expand: Linear::new(c, e, true, rng),
            depthwise: DepthwiseConv2d::centered(cfg.local_kernel, cfg.local_kernel, e, rng),
            act: StarRelu::new(),
            contract: Linear::new(e, c, true, rng),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match *x.shape() {
            [_, h, w, c] if h >= 1 && w >= 1 && c == self.expand.in_features() => {}
            ref s => return shape_err(format!("local conv mixer got {s:?}")),
        }
        let h = self.expand.forward(ctx, x)?;
        let h = self.depthwise.forward(ctx, h)?;
        let h = self.act.forward(ctx, h)?;
        self.contract.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Hyena(HyenaMixer),
    Local(LocalConvMixer),
}

impl Module for Mixer {
    fn visit<'a>(&'a self, path: &str, out: &mut Vec<(String, &'a Param)>) {
        match self {
            Mixer::Hyena(m) => m.visit(&join(path, "hyena"), out),
            Mixer::Local(m) => m.visit(&join(path, "local"), out),
        }
    }
    fn visit_mut<'a>(&'a mut self, path: &str, out: &mut Vec<(String, &'a mut Param)>) {
        match self {
            Mixer::Hyena(m) => m.visit_mut(&join(path, "hyena"), out),
            Mixer::Local(m) => m.visit_mut(&join(path, "local"), out),
        }
    }
}

impl Mixer {
    pub fn new<R: Rng + ?Sized>(cfg: &MixerConfig, rng: &mut R) -> Result<Self> {
        Ok(match cfg.kind {
            MixerKind::LocalConv => Mixer::Local(LocalConvMixer::new(cfg, rng)?),
            _ => Mixer::Hyena(HyenaMixer::new(cfg, rng)?),
        })
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Hyena(m) => m.kind,
            Mixer::Local(_) => MixerKind::LocalConv,
        }
    }

    pub fn hyena(&self) -> Option<&HyenaMixer> {
        match self {
            Mixer::Hyena(m) => Some(m),
            Mixer::Local(_) => None,
        }
    }

    pub fn hyena_mut(&mut self) -> Option<&mut HyenaMixer> {
        match self {
            Mixer::Hyena(m) => Some(m),
            Mixer::Local(_) => None,
        }
    }

    pub fn resampled(&self, domain: Domain) -> Result<Self> {
        Ok(match self {
            Mixer::Hyena(m) => Mixer::Hyena(m.resampled(domain)?),
            Mixer::Local(m) => Mixer::Local(m.clone()),
        })
    }

    /// `[N, H, W, C] → [N, H, W, C]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Mixer::Hyena(m) => m.forward(ctx, x),
            Mixer::Local(m) => m.forward(ctx, x),
        }
    }
}

/// `(q, k, v)` for a `[.., C]` tensor of rank 2 (`[L, C]`), 3 or 4.
pub fn project_qkv(x: &Tensor, params: &ProjectionParams) -> Result<(Tensor, Tensor, Tensor)> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let shape = x.shape().to_vec();
    let x4 = match *x.shape() {
        [l, c] => x.reshape([1, 1, l, c])?,
        [n, l, c] => x.reshape([n, 1, l, c])?,
        [_, _, _, _] => x.clone(),
        ref s => return shape_err(format!("project_qkv input {s:?}")),
    };
    let (q, k, v) = params.forward(&ctx, ctx.input(x4))?;
    let out = |v: Var<'_>| v.value().reshape(shape.clone());
    Ok((out(q)?, out(k)?, out(v)?))
}

fn gated_1d(x: &Tensor, mixer: &HyenaMixer, kind: MixerKind) -> Result<Tensor> {
    if mixer.kind != kind {
        return arg_err(format!("expected a {} mixer, got {}", kind.name(), mixer.kind.name()));
    }
    let x4 = match *x.shape() {
        [l, c] => x.reshape([1, 1, l, c])?,
        [n, l, c] => x.reshape([n, 1, l, c])?,
        ref s => return shape_err(format!("{} expects [L, C] or [N, L, C], got {s:?}", kind.name())),
    };
    run_gated(x4, mixer)?.reshape(x.shape().to_vec())
}

fn gated_2d(x: &Tensor, mixer: &HyenaMixer, kind: MixerKind) -> Result<Tensor> {
    if mixer.kind != kind {
        return arg_err(format!("expected a {} mixer, got {}", kind.name(), mixer.kind.name()));
    }
    let x4 = match *x.shape() {
        [h, w, c] => x.reshape([1, h, w, c])?,
        [_, _, _, _] => x.clone(),
        ref s => return shape_err(format!("{} expects [H, W, C] or [N, H, W, C], got {s:?}", kind.name())),
    };
    run_gated(x4, mixer)?.reshape(x.shape().to_vec())
}

fn run_gated(x4: Tensor, mixer: &HyenaMixer) -> Result<Tensor> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let t = mixer.trace(&ctx, ctx.input(x4))?;
    Ok(t.gated.value().as_ref().clone())
}

/// Causal gated mixing of `[L, C]` / `[N, L, C]`.
pub fn hyena_causal_mix(x: &Tensor, mixer: &HyenaMixer) -> Result<Tensor> {
    gated_1d(x, mixer, MixerKind::CausalHyena)
}

/// Bidirectional gated mixing of `[L, C]` / `[N, L, C]`.
pub fn hyena_bidirectional_mix(x: &Tensor, mixer: &HyenaMixer) -> Result<Tensor> {
    gated_1d(x, mixer, MixerKind::HB)
}

/// 2D gated mixing of `[H, W, C]` / `[N, H, W, C]`.
pub fn hyena_pixel_mix(x: &Tensor, mixer: &HyenaMixer) -> Result<Tensor> {
    gated_2d(x, mixer, MixerKind::HPx)
}

/// Horizontal-then-vertical gated mixing of `[H, W, C]` / `[N, H, W, C]`.
pub fn separable_mix(x: &Tensor, mixer: &HyenaMixer) -> Result<Tensor> {
    gated_2d(x, mixer, MixerKind::HPxSeparable)
}

/// Local inverted-bottleneck mixing of `[H, W, C]` / `[N, H, W, C]`.
pub fn local_conv_mix(x: &Tensor, mixer: &LocalConvMixer) -> Result<Tensor> {
    let x4 = match *x.shape() {
        [h, w, c] => x.reshape([1, h, w, c])?,
        [_, _, _, _] => x.clone(),
        ref s => return shape_err(format!("local_conv_mix expects [H, W, C] or [N, H, W, C], got {s:?}")),
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let y = mixer.forward(&ctx, ctx.input(x4))?;
    y.value().reshape(x.shape().to_vec())
}
