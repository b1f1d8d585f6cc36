//! Layer building blocks: dense and depthwise convolutions and batch
//! normalization.
//!
//! Layers are plain data — they hold [`ParamId`]s and hyperparameters, not
//! arrays — so one constructed network can run against any [`ParamStore`]
//! with the same creation order (e.g. an `f64` cast of `f32` weights).

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Ctx, ParamId, ParamStore, Real, Var};

/// Weight initialization scheme for a convolution.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Xavier (Glorot) uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// All zeros; used for attention gates so they start as identity maps.
    Zero,
}

/// Creates named parameters with deterministic initialization order.
pub struct ParamBuilder<'r, T: Real> {
    pub ps: ParamStore<T>,
    pub rng: &'r mut ChaCha8Rng,
}

impl<'r, T: Real> ParamBuilder<'r, T> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        ParamBuilder { ps: ParamStore::new(), rng }
    }

    pub fn finish(self) -> ParamStore<T> {
        self.ps
    }

    fn xavier(&mut self, dim: (usize, usize, usize, usize), fan_in: usize, fan_out: usize) -> Array4<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut out = Array4::<T>::zeros(dim);
        for v in out.iter_mut() {
            // Sample in f64 so f32 and f64 stores draw the same sequence.
            *v = T::from_f64(self.rng.random_range(-a..=a));
        }
        out
    }

    pub fn conv_weight(
        &mut self,
        name: String,
        dim: (usize, usize, usize, usize),
        init: InitKind,
    ) -> ParamId {
        let (c_out, c_in, kh, kw) = dim;
        let value = match init {
            InitKind::Xavier => self.xavier(dim, c_in * kh * kw, c_out * kh * kw),
            InitKind::Zero => Array4::zeros(dim),
        };
        self.ps.add(name, value, true)
    }

    pub fn depthwise_weight(
        &mut self,
        name: String,
        dim: (usize, usize, usize, usize),
        init: InitKind,
    ) -> ParamId {
        let (_, mult, kh, kw) = dim;
        let value = match init {
            // Each depthwise filter sees a single input map.
            InitKind::Xavier => self.xavier(dim, kh * kw, mult * kh * kw),
            InitKind::Zero => Array4::zeros(dim),
        };
        self.ps.add(name, value, true)
    }

    pub fn zeros(&mut self, name: String, channels: usize) -> ParamId {
        self.ps.add(name, Array4::zeros((1, channels, 1, 1)), true)
    }

    pub fn ones(&mut self, name: String, channels: usize) -> ParamId {
        self.ps.add(name, Array4::ones((1, channels, 1, 1)), true)
    }

    fn buffer(&mut self, name: String, channels: usize, fill: f64) -> ParamId {
        self.ps.add(name, Array4::from_elem((1, channels, 1, 1), T::from_f64(fill)), false)
    }
}

/// Dense 2-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: InitKind,
    ) -> Self {
        let w = pb.conv_weight(format!("{name}.weight"), (c_out, c_in, kernel, kernel), init);
        let b = bias.then(|| pb.zeros(format!("{name}.bias"), c_out));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.tape.param(ctx.ps, self.w);
        let b = self.b.map(|id| ctx.tape.param(ctx.ps, id));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Depthwise 2-D convolution layer (channel multiplier, no bias).
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d {
    pub w: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl DepthwiseConv2d {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        channels: usize,
        multiplier: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = pb.depthwise_weight(
            format!("{name}.weight"),
            (channels, multiplier, kernel, kernel),
            InitKind::Xavier,
        );
        DepthwiseConv2d { w, stride, pad }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.tape.param(ctx.ps, self.w);
        ctx.tape.depthwise_conv2d(x, w, self.stride, self.pad)
    }
}

/// Batch normalization with running statistics.
///
/// Training mode normalizes with batch statistics (biased variance) and
/// updates the running mean/variance with momentum; the running variance
/// uses the unbiased estimate except for single-element batches. Eval mode
/// normalizes with the stored running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub r_mean: ParamId,
    pub r_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl BatchNorm2d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: pb.ones(format!("{name}.gamma"), channels),
            beta: pb.zeros(format!("{name}.beta"), channels),
            r_mean: pb.buffer(format!("{name}.running_mean"), channels, 0.0),
            r_var: pb.buffer(format!("{name}.running_var"), channels, 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gamma = ctx.tape.param(ctx.ps, self.gamma);
        let beta = ctx.tape.param(ctx.ps, self.beta);
        if ctx.train {
            let (b, _, h, w) = ctx.tape.shape(x);
            let n = b * h * w;
            let (y, mean, var) = ctx.tape.batch_norm_train(x, gamma, beta, self.eps);
            let m = T::from_f64(self.momentum);
            let keep = T::one() - m;
            let unbias =
                if n > 1 { T::from_usize(n) / T::from_usize(n - 1) } else { T::one() };
            for (r, &bm) in ctx.ps.value_mut(self.r_mean).iter_mut().zip(&mean) {
                *r = keep * *r + m * bm;
            }
            for (r, &bv) in ctx.ps.value_mut(self.r_var).iter_mut().zip(&var) {
                *r = keep * *r + m * bv * unbias;
            }
            Ok(y)
        } else {
            let rm = ctx.ps.value(self.r_mean).clone();
            let rv = ctx.ps.value(self.r_var).clone();
            Ok(ctx.tape.batch_norm_eval(x, gamma, beta, &rm, &rv, self.eps))
        }
    }
}
