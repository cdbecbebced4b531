//! Implicitly parameterized long-convolution kernels.
//!
//! A kernel is produced by evaluating a small sine-activated FFN on a fixed
//! sinusoidal encoding of each kernel position and multiplying the result by an
//! exponential decay envelope. Positions are encoded relative to the kernel
//! period, so evaluating the same weights on a larger grid stretches the kernel
//! (see [`ImplicitFilter::resampled`]).

use std::f64::consts::{LN_2, PI};
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::nn::{impl_module, Ctx, Linear, Param};
use crate::tensor::Tensor;

/// Sinusoidal features `[1, sin(2πkt/P), cos(2πkt/P), …]` for `k = 1..K-1`.
#[derive(Clone, Debug)]
pub struct PositionalBasis1D {
    pub filter_len: usize,
    pub period: usize,
    pub k: usize,
    /// `[filter_len, 2K-1]`, rows indexed by `t = 0..filter_len`.
    pub features: Tensor,
}

pub fn build_basis_1d(filter_len: usize, period: usize, k: usize) -> Result<PositionalBasis1D> {
    if filter_len == 0 || period == 0 {
        return arg_err("basis length and period must be positive");
    }
    let t: Vec<f64> = (0..filter_len).map(|t| t as f64).collect();
    Ok(PositionalBasis1D {
        filter_len,
        period,
        k,
        features: basis_1d_at(&t, period as f64, k)?,
    })
}

/// 1D features at arbitrary (possibly negative or fractional) positions.
pub fn basis_1d_at(positions: &[f64], period: f64, k: usize) -> Result<Tensor> {
    if k == 0 {
        return arg_err("embedding dimension K must be at least 1");
    }
    let width = 2 * k - 1;
    let mut data = Vec::with_capacity(positions.len() * width);
    for &t in positions {
        data.push(1.0);
        for m in 1..k {
            let a = 2.0 * PI * m as f64 * t / period;
            data.push(a.sin());
            data.push(a.cos());
        }
    }
    Tensor::new([positions.len(), width], data)
}

/// Features over the centered `(2L_y-1) x (2L_x-1)` grid: the first `K/2`
/// columns encode the vertical offset, the rest the horizontal one, each as
/// alternating sin/cos of increasing frequency.
#[derive(Clone, Debug)]
pub struct PositionalBasis2D {
    pub l_x: usize,
    pub l_y: usize,
    pub k: usize,
    /// `[(2L_y-1)(2L_x-1), K]`, rows in row-major kernel order.
    pub features: Tensor,
}

pub fn build_basis_2d(l_x: usize, l_y: usize, k: usize) -> Result<PositionalBasis2D> {
    if k == 0 || k % 2 != 0 {
        return arg_err(format!("2D embedding dimension must be even and positive, got {k}"));
    }
    if l_x == 0 || l_y == 0 {
        return arg_err("2D basis extents must be positive");
    }
    let (py, px) = (2 * l_y - 1, 2 * l_x - 1);
    let half = k / 2;
    let axis = |t: f64, period: f64, out: &mut Vec<f64>| {
        for m in 0..half {
            let a = 2.0 * PI * (m / 2 + 1) as f64 * t / period;
            out.push(if m % 2 == 0 { a.sin() } else { a.cos() });
        }
    };
    let mut data = Vec::with_capacity(py * px * k);
    for jy in 0..py {
        let ty = jy as f64 - (l_y - 1) as f64;
        for jx in 0..px {
            let tx = jx as f64 - (l_x - 1) as f64;
            axis(ty, py as f64, &mut data);
            axis(tx, px as f64, &mut data);
        }
    }
    Ok(PositionalBasis2D {
        l_x,
        l_y,
        k,
        features: Tensor::new([py * px, k], data)?,
    })
}

/// `Linear → sin → Linear → sin → Linear`, mapping basis rows to `C` channels.
#[derive(Clone, Debug)]
pub struct FilterFfn {
    pub layers: Vec<Linear>,
}
impl_module!(FilterFfn { layers });

impl FilterFfn {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, channels: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![
                Linear::new(input, hidden, true, rng),
                Linear::new(hidden, hidden, true, rng),
                Linear::new(hidden, channels, true, rng),
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn channels(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_features)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, basis: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = basis;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, h)?;
            if i < last {
                h = h.sin()?;
            }
        }
        Ok(h)
    }

    pub fn eval(&self, basis: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape);
        let out = self.forward(&ctx, ctx.input(basis.clone()))?;
        Ok(out.value().as_ref().clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WindowVariant {
    /// `exp(-αt) + b` for `t ≥ 0`.
    Causal,
    /// `exp(-α|t|) + b`.
    Bidirectional,
    /// `exp(-α‖p - c‖) + b` around the center `(c_x, c_y)`.
    Radial2d { cx: f64, cy: f64 },
}

/// Kernel positions: 1D offsets, or 2D `(x, y)` coordinates.
#[derive(Clone, Debug)]
pub enum Positions {
    Line(Vec<f64>),
    Grid(Vec<(f64, f64)>),
}

impl Positions {
    pub fn len(&self) -> usize {
        match self {
            Positions::Line(p) => p.len(),
            Positions::Grid(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct WindowParams {
    /// Per-channel decay rate, `[C]`.
    pub alpha: Param,
    /// Per-channel offset, `[C]`.
    pub bias: Param,
    pub variant: WindowVariant,
}
impl_module!(WindowParams { alpha, bias });

impl WindowParams {
    pub fn new(alpha: Tensor, bias: Tensor, variant: WindowVariant) -> Result<Self> {
        if alpha.rank() != 1 || alpha.shape() != bias.shape() {
            return shape_err(format!("window alpha {:?} and bias {:?}", alpha.shape(), bias.shape()));
        }
        Ok(Self {
            alpha: Param::new(alpha),
            bias: Param::new(bias),
            variant,
        })
    }

    /// Decay rates drawn from `[ln2 / L, 5 ln2 / L]`, zero offsets.
    pub fn init<R: Rng + ?Sized>(channels: usize, extent: usize, variant: WindowVariant, rng: &mut R) -> Self {
        let l = extent as f64;
        let alpha = Tensor::uniform([channels], LN_2 / l, 5.0 * LN_2 / l, rng);
        Self::new(alpha, Tensor::zeros([channels]), variant).expect("matching shapes")
    }

    pub fn channels(&self) -> usize {
        self.alpha.numel()
    }

    /// Distance from the window origin for each position.
    pub fn distances(&self, positions: &Positions) -> Result<Vec<f64>> {
        match (self.variant, positions) {
            (WindowVariant::Causal, Positions::Line(t)) => {
                if let Some(&bad) = t.iter().find(|&&t| t < 0.0) {
                    return arg_err(format!("causal window at negative position {bad}"));
                }
                Ok(t.clone())
            }
            (WindowVariant::Bidirectional, Positions::Line(t)) => Ok(t.iter().map(|t| t.abs()).collect()),
            (WindowVariant::Radial2d { cx, cy }, Positions::Grid(p)) => {
                Ok(p.iter().map(|&(x, y)| (x - cx).hypot(y - cy)).collect())
            }
            (v, _) => arg_err(format!("positions do not match window variant {v:?}")),
        }
    }
}

/// Window values `[P, C]` at the given positions.
pub fn eval_window(params: &WindowParams, positions: &Positions) -> Result<Tensor> {
    if let Some(&a) = params.alpha.value().data().iter().find(|&&a| a < 0.0 || a.is_nan()) {
        return arg_err(format!("window decay must be non-negative, got {a}"));
    }
    let d = params.distances(positions)?;
    if d.is_empty() {
        return arg_err("window needs at least one position");
    }
    let (alpha, bias) = (params.alpha.value().data(), params.bias.value().data());
    let c = alpha.len();
    Tensor::new(
        [d.len(), c],
        (0..d.len() * c).map(|i| (-alpha[i % c] * d[i / c]).exp() + bias[i % c]).collect(),
    )
}

fn check_channels(ffn: &FilterFfn, window: &WindowParams) -> Result<()> {
    if ffn.channels() != window.channels() {
        return Err(Error::Shape(format!(
            "filter FFN emits {} channels, window has {}",
            ffn.channels(),
            window.channels()
        )));
    }
    Ok(())
}

/// Differentiable `FFN(basis) ⊙ window`, shape `[P, C]`.
pub fn filter_kernel<'t>(
    ctx: &Ctx<'t>,
    basis: Var<'t>,
    distances: Arc<Vec<f64>>,
    ffn: &FilterFfn,
    window: &WindowParams,
) -> Result<Var<'t>> {
    check_channels(ffn, window)?;
    let rows = basis.shape()[0];
    if rows != distances.len() {
        return shape_err(format!("{rows} basis rows for {} window positions", distances.len()));
    }
    let h = ffn.forward(ctx, basis)?;
    let w = Var::decay_window(&ctx.bind(&window.alpha), &ctx.bind(&window.bias), distances)?;
    h.mul(&w)
}

/// `FFN(basis) ⊙ window` evaluated once, shape `[P, C]`.
pub fn materialize_filter(
    basis: &Tensor,
    positions: &Positions,
    ffn: &FilterFfn,
    window: &WindowParams,
) -> Result<Tensor> {
    check_channels(ffn, window)?;
    if basis.rank() != 2 || basis.shape()[0] != positions.len() {
        return shape_err(format!("basis {:?} for {} positions", basis.shape(), positions.len()));
    }
    let w = eval_window(window, positions)?;
    ffn.eval(basis)?.zip_map(&w, |h, w| h * w)
}

/// Position layout of a kernel, in units of the input it convolves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterShape {
    /// `len` taps at offsets `0..len`.
    Causal { len: usize },
    /// `2·len-1` taps at offsets `-(len-1)..=len-1`.
    Bidirectional { len: usize },
    /// `(2·l_y-1) x (2·l_x-1)` taps centered on the origin.
    Pixel { l_y: usize, l_x: usize },
}

impl FilterShape {
    /// Number of kernel taps along (y, x).
    pub fn kernel_dims(&self) -> (usize, usize) {
        match *self {
            FilterShape::Causal { len } => (1, len),
            FilterShape::Bidirectional { len } => (1, 2 * len - 1),
            FilterShape::Pixel { l_y, l_x } => (2 * l_y - 1, 2 * l_x - 1),
        }
    }

    /// Index of the zero-offset tap along (y, x).
    pub fn origin(&self) -> (usize, usize) {
        match *self {
            FilterShape::Causal { .. } => (0, 0),
            FilterShape::Bidirectional { len } => (0, len - 1),
            FilterShape::Pixel { l_y, l_x } => (l_y - 1, l_x - 1),
        }
    }

    pub fn num_positions(&self) -> usize {
        let (h, w) = self.kernel_dims();
        h * w
    }

    /// Feature extent the decay rates are initialized against.
    pub fn extent(&self) -> usize {
        match *self {
            FilterShape::Causal { len } | FilterShape::Bidirectional { len } => len,
            FilterShape::Pixel { l_y, l_x } => l_y.max(l_x),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            FilterShape::Causal { len } | FilterShape::Bidirectional { len } => len > 0,
            FilterShape::Pixel { l_y, l_x } => l_y > 0 && l_x > 0,
        };
        if ok {
            Ok(())
        } else {
            arg_err(format!("empty filter shape {self:?}"))
        }
    }

    fn same_kind(&self, other: &FilterShape) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }

    fn window_variant(&self) -> WindowVariant {
        match self {
            FilterShape::Causal { .. } => WindowVariant::Causal,
            FilterShape::Bidirectional { .. } => WindowVariant::Bidirectional,
            FilterShape::Pixel { .. } => WindowVariant::Radial2d { cx: 0.0, cy: 0.0 },
        }
    }
}

/// An FFN plus decay window bound to a kernel layout.
///
/// `trained` is the layout the weights were fitted on; window distances are
/// measured in its units so that [`ImplicitFilter::resampled`] stretches the
/// whole kernel rather than only its FFN part.
#[derive(Clone, Debug)]
pub struct ImplicitFilter {
    pub ffn: FilterFfn,
    pub window: WindowParams,
    pub shape: FilterShape,
    pub trained: FilterShape,
    pub k: usize,
}
impl_module!(ImplicitFilter { ffn, window });

impl ImplicitFilter {
    /// Hidden width is `2K`.
    pub fn new<R: Rng + ?Sized>(shape: FilterShape, k: usize, channels: usize, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let input = match shape {
            FilterShape::Pixel { .. } => {
                if k == 0 || k % 2 != 0 {
                    return arg_err(format!("2D embedding dimension must be even and positive, got {k}"));
                }
                k
            }
            _ if k == 0 => return arg_err("embedding dimension K must be at least 1"),
            _ => 2 * k - 1,
        };
        let ffn = FilterFfn::new(input, 2 * k, channels, rng);
        let window = WindowParams::init(channels, shape.extent(), shape.window_variant(), rng);
        Ok(Self {
            ffn,
            window,
            shape,
            trained: shape,
            k,
        })
    }

    pub fn channels(&self) -> usize {
        self.window.channels()
    }

    /// The same weights evaluated on another layout of the same kind.
    pub fn resampled(&self, shape: FilterShape) -> Result<Self> {
        shape.validate()?;
        if !shape.same_kind(&self.trained) {
            return arg_err(format!("cannot resample {:?} filter to {shape:?}", self.trained));
        }
        Ok(Self { shape, ..self.clone() })
    }

    /// Basis features `[P, input]` for the current layout.
    pub fn basis(&self) -> Result<Tensor> {
        match self.shape {
            FilterShape::Causal { len } => Ok(build_basis_1d(len, len, self.k)?.features),
            FilterShape::Bidirectional { len } => {
                let offsets: Vec<f64> = (0..2 * len - 1).map(|j| j as f64 - (len - 1) as f64).collect();
                basis_1d_at(&offsets, (2 * len - 1) as f64, self.k)
            }
            FilterShape::Pixel { l_y, l_x } => Ok(build_basis_2d(l_x, l_y, self.k)?.features),
        }
    }

    /// Window positions, rescaled to the trained layout's units.
    pub fn positions(&self) -> Positions {
        let (kh, kw) = self.shape.kernel_dims();
        let (oy, ox) = self.shape.origin();
        let (th, tw) = self.trained.kernel_dims();
        let scale = |trained: usize, current: usize| {
            if trained == current {
                1.0
            } else {
                trained as f64 / current as f64
            }
        };
        let (sy, sx) = (scale(th, kh), scale(tw, kw));
        match self.shape {
            FilterShape::Causal { .. } | FilterShape::Bidirectional { .. } => {
                Positions::Line((0..kw).map(|j| (j as f64 - ox as f64) * sx).collect())
            }
            FilterShape::Pixel { .. } => Positions::Grid(
                (0..kh)
                    .flat_map(|jy| {
                        (0..kw).map(move |jx| ((jx as f64 - ox as f64) * sx, (jy as f64 - oy as f64) * sy))
                    })
                    .collect(),
            ),
        }
    }

    pub fn distances(&self) -> Result<Vec<f64>> {
        self.window.distances(&self.positions())
    }

    /// Differentiable kernel `[KH, KW, C]`.
    pub fn kernel<'t>(&self, ctx: &Ctx<'t>) -> Result<Var<'t>> {
        let basis = ctx.input(self.basis()?);
        let k = filter_kernel(ctx, basis, Arc::new(self.distances()?), &self.ffn, &self.window)?;
        let (kh, kw) = self.shape.kernel_dims();
        k.reshape([kh, kw, self.channels()])
    }

    /// Kernel `[P, C]` evaluated outside any training graph.
    pub fn materialize(&self) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape);
        let k = self.kernel(&ctx)?;
        k.value().reshape([self.shape.num_positions(), self.channels()])
    }

    /// Decay envelope `[P, C]` at the current layout (negative rates read as 0).
    pub fn window_values(&self) -> Result<Tensor> {
        let d = self.distances()?;
        let (alpha, bias) = (self.window.alpha.value().data(), self.window.bias.value().data());
        let c = alpha.len();
        Tensor::new(
            [d.len(), c],
            (0..d.len() * c).map(|i| (-alpha[i % c].max(0.0) * d[i / c]).exp() + bias[i % c]).collect(),
        )
    }
}

/// Kernel `[P, C]` of `filter` re-evaluated on `new_shape`.
pub fn resample_filter(filter: &ImplicitFilter, new_shape: FilterShape) -> Result<Tensor> {
    filter.resampled(new_shape)?.materialize()
}
