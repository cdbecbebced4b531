//! Parameters, the per-forward binding context, and the small layers shared by
//! the mixers and the backbone.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{grad_check, GradCheck, Grads, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// A learnable tensor. Cloning shares storage; [`Param::make_mut`] detaches.
#[derive(Clone, Debug)]
pub struct Param(Arc<Tensor>);

impl Param {
    pub fn new(t: Tensor) -> Self {
        Self(Arc::new(t))
    }

    pub fn value(&self) -> &Tensor {
        &self.0
    }

    pub fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.0)
    }

    pub fn make_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.0)
    }

    pub fn set(&mut self, t: Tensor) {
        self.0 = Arc::new(t);
    }

    pub fn numel(&self) -> usize {
        self.0.numel()
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }
}

/// Binds parameters to tape leaves for one forward pass.
pub struct Ctx<'t> {
    tape: &'t Tape,
    bound: RefCell<HashMap<usize, Var<'t>>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Self {
            tape,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&self, p: &Param) -> Var<'t> {
        *self
            .bound
            .borrow_mut()
            .entry(p.key())
            .or_insert_with(|| self.tape.leaf_shared(p.shared()))
    }

    /// Routes `p` to an existing variable for the rest of this pass.
    pub fn bind_as(&self, p: &Param, v: Var<'t>) {
        self.bound.borrow_mut().insert(p.key(), v);
    }

    pub fn input(&self, t: Tensor) -> Var<'t> {
        self.tape.leaf(t)
    }

    /// Gradient for `p`; zeros if `p` was never bound.
    pub fn grad(&self, grads: &Grads, p: &Param) -> Tensor {
        match self.bound.borrow().get(&p.key()) {
            Some(&v) => grads.wrt(v),
            None => Tensor::zeros(p.value().shape().to_vec()),
        }
    }
}

pub(crate) fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

/// Ordered traversal over named parameters.
pub trait Module {
    fn visit<'a>(&'a self, path: &str, out: &mut Vec<(String, &'a Param)>);
    fn visit_mut<'a>(&'a mut self, path: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }
}

impl Module for Param {
    fn visit<'a>(&'a self, path: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((path.to_string(), self));
    }
    fn visit_mut<'a>(&'a mut self, path: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((path.to_string(), self));
    }
}

impl<T: Module> Module for Option<T> {
    fn visit<'a>(&'a self, path: &str, out: &mut Vec<(String, &'a Param)>) {
        if let Some(m) = self {
            m.visit(path, out);
        }
    }
    fn visit_mut<'a>(&'a mut self, path: &str, out: &mut Vec<(String, &'a mut Param)>) {
        if let Some(m) = self {
            m.visit_mut(path, out);
        }
    }
}

impl<T: Module> Module for Vec<T> {
    fn visit<'a>(&'a self, path: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(path, &i.to_string()), out);
        }
    }
    fn visit_mut<'a>(&'a mut self, path: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(path, &i.to_string()), out);
        }
    }
}

/// Implements [`Module`] for a struct by visiting the listed fields in order.
macro_rules! impl_module {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Module for $ty {
            fn visit<'a>(&'a self, path: &str, out: &mut Vec<(String, &'a $crate::nn::Param)>) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join(path, stringify!($field)), out); )*
            }
            fn visit_mut<'a>(&'a mut self, path: &str, out: &mut Vec<(String, &'a mut $crate::nn::Param)>) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join(path, stringify!($field)), out); )*
            }
        }
    };
}
pub(crate) use impl_module;

/// [`grad_check`] over `inputs` followed by every parameter of `module`.
pub fn module_grad_check<M, F>(module: &M, inputs: &[Tensor], f: F, eps: f64) -> Result<GradCheck>
where
    M: Module + ?Sized,
    F: for<'t> Fn(&Ctx<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let params = module.named_params();
    let n = inputs.len();
    let all: Vec<Tensor> = inputs
        .iter()
        .cloned()
        .chain(params.iter().map(|(_, p)| p.value().clone()))
        .collect();
    grad_check(
        |tape, v| {
            let ctx = Ctx::new(tape);
            for ((_, p), &var) in params.iter().zip(&v[n..]) {
                ctx.bind_as(p, var);
            }
            f(&ctx, &v[..n])
        },
        &all,
        eps,
    )
}

fn fan_in_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Param {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Param::new(Tensor::uniform(shape, -bound, bound, rng))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}
impl_module!(Linear { weight, bias });

impl Linear {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: fan_in_uniform(vec![cin, cout], cin, rng),
            bias: bias.then(|| fan_in_uniform(vec![cout], cin, rng)),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let b = self.bias.as_ref().map(|b| ctx.bind(b));
        x.linear(&ctx.bind(&self.weight), b.as_ref())
    }

    pub fn in_features(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value().shape()[1]
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}
impl_module!(LayerNorm { gamma, beta });

impl LayerNorm {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones([c])),
            beta: Param::new(Tensor::zeros([c])),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&ctx.bind(&self.gamma), &ctx.bind(&self.beta), LAYER_NORM_EPS)
    }
}

/// `s * relu(x)^2 + b` with learnable scalars.
#[derive(Clone, Debug)]
pub struct StarRelu {
    pub scale: Param,
    pub bias: Param,
}
impl_module!(StarRelu { scale, bias });

impl StarRelu {
    /// Scale and bias that keep unit-Gaussian inputs at zero mean and unit
    /// variance: `1 / sqrt(1.25)` and `-0.5 / sqrt(1.25)`.
    pub fn new() -> Self {
        let s = 1.0 / 1.25f64.sqrt();
        Self::with(s, -0.5 * s)
    }

    pub fn with(scale: f64, bias: f64) -> Self {
        Self {
            scale: Param::new(Tensor::scalar(scale)),
            bias: Param::new(Tensor::scalar(bias)),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.star_relu(&ctx.bind(&self.scale), &ctx.bind(&self.bias))
    }
}

impl Default for StarRelu {
    fn default() -> Self {
        Self::new()
    }
}

/// Dense strided convolution with symmetric zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: usize,
}
impl_module!(Conv2d { weight, bias });

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        Self {
            weight: fan_in_uniform(vec![kernel, kernel, cin, cout], fan_in, rng),
            bias: fan_in_uniform(vec![cout], fan_in, rng),
            stride,
            padding,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(&ctx.bind(&self.weight), &ctx.bind(&self.bias), self.stride, self.padding)
    }
}

/// Per-channel convolution, stride 1, output extent equal to input extent.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub weight: Param,
    pub bias: Param,
    /// Zero padding before the first row / column; see [`Var::depthwise_conv2d`].
    pub padding: (usize, usize),
}
impl_module!(DepthwiseConv2d { weight, bias });

impl DepthwiseConv2d {
    pub fn centered<R: Rng + ?Sized>(kh: usize, kw: usize, c: usize, rng: &mut R) -> Self {
        Self::with_padding(kh, kw, c, (kh / 2, kw / 2), rng)
    }

    /// Kernel that only looks at the current and preceding positions along x.
    pub fn causal<R: Rng + ?Sized>(kw: usize, c: usize, rng: &mut R) -> Self {
        Self::with_padding(1, kw, c, (0, kw - 1), rng)
    }

    fn with_padding<R: Rng + ?Sized>(kh: usize, kw: usize, c: usize, padding: (usize, usize), rng: &mut R) -> Self {
        let fan_in = kh * kw;
        Self {
            weight: fan_in_uniform(vec![kh, kw, c], fan_in, rng),
            bias: fan_in_uniform(vec![c], fan_in, rng),
            padding,
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.value().shape();
        (s[0], s[1])
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.depthwise_conv2d(&ctx.bind(&self.weight), Some(&ctx.bind(&self.bias)), self.padding)
    }
}
