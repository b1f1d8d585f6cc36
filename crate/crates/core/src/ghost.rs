//! Ghost modules and ghost bottlenecks.
//!
//! A ghost module produces `out/ratio_s` "intrinsic" channels with a dense
//! (primary) convolution and synthesizes the remaining channels with cheap
//! per-channel (depthwise) convolutions applied to the intrinsic maps, then
//! concatenates the two groups. A ghost bottleneck stacks an expanding and
//! a projecting ghost module with a residual shortcut.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, DepthwiseConv2d, InitKind, ParamBuilder};
use crate::tensor::{Ctx, Real, Var};

/// Hyperparameters of a single ghost module.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct GhostModuleSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel ratio `s`: the primary convolution produces `out/s` channels;
    /// `s = 1` degenerates to a plain dense convolution.
    pub ratio_s: usize,
    pub primary_kernel: usize,
    pub cheap_kernel: usize,
    pub stride: usize,
}

impl GhostModuleSpec {
    pub fn new(in_channels: usize, out_channels: usize, ratio_s: usize) -> Self {
        GhostModuleSpec {
            in_channels,
            out_channels,
            ratio_s,
            primary_kernel: 1,
            cheap_kernel: 3,
            stride: 1,
        }
    }

    pub fn with_kernels(mut self, primary: usize, cheap: usize) -> Self {
        self.primary_kernel = primary;
        self.cheap_kernel = cheap;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("ghost module needs positive channel counts"));
        }
        if self.ratio_s == 0 {
            return Err(Error::config("ghost ratio must be at least 1"));
        }
        if !self.out_channels.is_multiple_of(self.ratio_s) {
            return Err(Error::config(format!(
                "out_channels {} not divisible by ratio {}",
                self.out_channels, self.ratio_s
            )));
        }
        if self.primary_kernel.is_multiple_of(2) || self.cheap_kernel.is_multiple_of(2) {
            return Err(Error::config("ghost kernels must be odd"));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::config(format!("ghost stride must be 1 or 2, got {}", self.stride)));
        }
        Ok(())
    }

    /// Channels produced by the dense primary convolution.
    pub fn intrinsic_channels(&self) -> usize {
        self.out_channels / self.ratio_s
    }

    /// Channels synthesized by the cheap depthwise branch.
    pub fn ghost_channels(&self) -> usize {
        self.out_channels - self.intrinsic_channels()
    }

    /// Convolution weight count (primary + cheap branches, no bias — the
    /// scale/shift normalization that follows makes bias redundant).
    pub fn parameter_count(&self) -> usize {
        let intr = self.intrinsic_channels();
        let pk = self.primary_kernel;
        let ck = self.cheap_kernel;
        let mut n = self.in_channels * intr * pk * pk;
        if self.ratio_s > 1 {
            n += intr * (self.ratio_s - 1) * ck * ck;
        }
        n
    }

    /// Weight count of a dense convolution with the same in/out channels
    /// and the primary kernel.
    pub fn dense_parameter_count(&self) -> usize {
        self.in_channels * self.out_channels * self.primary_kernel * self.primary_kernel
    }

    /// `dense / ghost` weight-count ratio (≥ 1 means the ghost module is
    /// cheaper).
    pub fn compression_ratio(&self) -> f64 {
        self.dense_parameter_count() as f64 / self.parameter_count() as f64
    }
}

/// A built ghost module: dense primary convolution + normalization
/// (+ rectifier), cheap depthwise branch on the intrinsic maps, channel
/// concatenation. With `ratio_s == 1` the cheap branch is absent.
#[derive(Debug)]
pub struct GhostModule {
    pub spec: GhostModuleSpec,
    pub relu: bool,
    primary: Conv2d,
    primary_bn: BatchNorm2d,
    cheap: Option<(DepthwiseConv2d, BatchNorm2d)>,
}

impl GhostModule {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        spec: GhostModuleSpec,
        relu: bool,
    ) -> Result<Self> {
        spec.validate()?;
        let intr = spec.intrinsic_channels();
        let primary = Conv2d::new(
            pb,
            &format!("{name}.primary"),
            spec.in_channels,
            intr,
            spec.primary_kernel,
            spec.stride,
            spec.primary_kernel / 2,
            false,
            InitKind::Xavier,
        );
        let primary_bn = BatchNorm2d::new(pb, &format!("{name}.primary_bn"), intr);
        let cheap = (spec.ratio_s > 1).then(|| {
            let dw = DepthwiseConv2d::new(
                pb,
                &format!("{name}.cheap"),
                intr,
                spec.ratio_s - 1,
                spec.cheap_kernel,
                1,
                spec.cheap_kernel / 2,
            );
            let bn = BatchNorm2d::new(pb, &format!("{name}.cheap_bn"), spec.ghost_channels());
            (dw, bn)
        });
        Ok(GhostModule { spec, relu, primary, primary_bn, cheap })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (_, c, _, _) = ctx.tape.shape(x);
        if c != self.spec.in_channels {
            return Err(Error::config(format!(
                "ghost module expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let mut intrinsic = self.primary.forward(ctx, x)?;
        intrinsic = self.primary_bn.forward(ctx, intrinsic)?;
        if self.relu {
            intrinsic = ctx.tape.relu(intrinsic);
        }
        let Some((dw, bn)) = &self.cheap else {
            return Ok(intrinsic);
        };
        let mut ghost = dw.forward(ctx, intrinsic)?;
        ghost = bn.forward(ctx, ghost)?;
        if self.relu {
            ghost = ctx.tape.relu(ghost);
        }
        Ok(ctx.tape.concat_channels(&[intrinsic, ghost]))
    }
}

/// Hyperparameters of a ghost bottleneck: expand ghost module (carries the
/// block stride) then project ghost module, plus a residual shortcut.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct GhostBottleneckSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Hidden width between the two ghost modules.
    pub expansion_channels: usize,
    pub ratio_s: usize,
    pub primary_kernel: usize,
    pub cheap_kernel: usize,
}

impl GhostBottleneckSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        GhostBottleneckSpec {
            in_channels,
            out_channels,
            stride,
            expansion_channels: 2 * out_channels,
            ratio_s: 2,
            primary_kernel: 1,
            cheap_kernel: 3,
        }
    }

    pub fn with_ratio(mut self, ratio_s: usize) -> Self {
        self.ratio_s = ratio_s;
        self
    }

    pub fn expand_spec(&self) -> GhostModuleSpec {
        GhostModuleSpec::new(self.in_channels, self.expansion_channels, self.ratio_s)
            .with_kernels(self.primary_kernel, self.cheap_kernel)
            .with_stride(self.stride)
    }

    pub fn project_spec(&self) -> GhostModuleSpec {
        GhostModuleSpec::new(self.expansion_channels, self.out_channels, self.ratio_s)
            .with_kernels(self.primary_kernel, self.cheap_kernel)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::config(format!(
                "bottleneck stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        self.expand_spec().validate()?;
        self.project_spec().validate()
    }

    /// The residual shortcut is the identity exactly when no reshaping is
    /// needed.
    pub fn identity_shortcut(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

#[derive(Debug)]
struct Shortcut {
    /// Present for stride 2: depthwise step so spatial dims match.
    dw: Option<(DepthwiseConv2d, BatchNorm2d)>,
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// A built ghost bottleneck.
#[derive(Debug)]
pub struct GhostBottleneck {
    pub spec: GhostBottleneckSpec,
    expand: GhostModule,
    project: GhostModule,
    shortcut: Option<Shortcut>,
}

impl GhostBottleneck {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        spec: GhostBottleneckSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let expand = GhostModule::new(pb, &format!("{name}.expand"), spec.expand_spec(), true)?;
        let project =
            GhostModule::new(pb, &format!("{name}.project"), spec.project_spec(), false)?;
        let shortcut = (!spec.identity_shortcut())
            .then(|| {
                let dw = (spec.stride == 2).then(|| {
                    let dw = DepthwiseConv2d::new(
                        pb,
                        &format!("{name}.shortcut.dw"),
                        spec.in_channels,
                        1,
                        3,
                        2,
                        1,
                    );
                    let bn =
                        BatchNorm2d::new(pb, &format!("{name}.shortcut.dw_bn"), spec.in_channels);
                    (dw, bn)
                });
                let conv = Conv2d::new(
                    pb,
                    &format!("{name}.shortcut.conv"),
                    spec.in_channels,
                    spec.out_channels,
                    1,
                    1,
                    0,
                    false,
                    InitKind::Xavier,
                );
                let bn = BatchNorm2d::new(pb, &format!("{name}.shortcut.bn"), spec.out_channels);
                Shortcut { dw, conv, bn }
            });
        Ok(GhostBottleneck { spec, expand, project, shortcut })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let hidden = self.expand.forward(ctx, x)?;
        let main = self.project.forward(ctx, hidden)?;
        let residual = match &self.shortcut {
            None => x,
            Some(sc) => {
                let mut r = x;
                if let Some((dw, bn)) = &sc.dw {
                    r = dw.forward(ctx, r)?;
                    r = bn.forward(ctx, r)?;
                }
                r = sc.conv.forward(ctx, r)?;
                sc.bn.forward(ctx, r)?
            }
        };
        Ok(ctx.tape.add(main, residual))
    }

    /// Trainable convolution weights in this block (analytic, for the
    /// efficiency report).
    pub fn conv_parameter_count(&self) -> usize {
        let mut n = self.spec.expand_spec().parameter_count()
            + self.spec.project_spec().parameter_count();
        if !self.spec.identity_shortcut() {
            if self.spec.stride == 2 {
                n += self.spec.in_channels * 9;
            }
            n += self.spec.in_channels * self.spec.out_channels;
        }
        n
    }
}
