//! Channel, spatial, and depth attention.
//!
//! Channel attention is a squeeze–excitation gate (global average pool →
//! reduce → expand → sigmoid, broadcast over space). Spatial attention
//! gates each pixel with a sigmoid of a wide convolution over the
//! channel-mean and channel-max maps. Depth attention scores each of the
//! same-shape skip branches entering a nested node and softmax-normalizes
//! the scores into branch weights. Gate-producing layers are
//! zero-initialized so every gate starts at 0.5 (and depth weights start
//! uniform), leaving the wrapped block's behaviour unchanged at step 0 up
//! to a known scale.

use crate::error::{Error, Result};
use crate::ghost::GhostBottleneck;
use crate::nn::{Conv2d, InitKind, ParamBuilder};
use crate::tensor::{Ctx, Real, Var};

/// Hyperparameters for the per-node channel/spatial attention pair.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct AttentionBlockSpec {
    pub channels: usize,
    /// Squeeze–excitation reduction `r`; the hidden width is
    /// `max(1, channels / r)`.
    pub channel_reduction: usize,
    pub spatial_kernel: usize,
    pub channel_enabled: bool,
    pub spatial_enabled: bool,
}

impl AttentionBlockSpec {
    pub fn new(channels: usize) -> Self {
        AttentionBlockSpec {
            channels,
            channel_reduction: 16,
            spatial_kernel: 7,
            channel_enabled: true,
            spatial_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("attention needs a positive channel count"));
        }
        if self.channel_reduction == 0 {
            return Err(Error::config("channel reduction must be at least 1"));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::config("spatial attention kernel must be odd"));
        }
        Ok(())
    }

    pub fn hidden_channels(&self) -> usize {
        (self.channels / self.channel_reduction).max(1)
    }
}

/// Squeeze–excitation channel gate.
#[derive(Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    reduce: Conv2d,
    expand: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, spec: &AttentionBlockSpec) -> Self {
        let hidden = spec.hidden_channels();
        let reduce = Conv2d::new(
            pb,
            &format!("{name}.reduce"),
            spec.channels,
            hidden,
            1,
            1,
            0,
            true,
            InitKind::Xavier,
        );
        let expand = Conv2d::new(
            pb,
            &format!("{name}.expand"),
            hidden,
            spec.channels,
            1,
            1,
            0,
            true,
            InitKind::Zero,
        );
        ChannelAttention { channels: spec.channels, reduce, expand }
    }

    /// The per-(batch, channel) gate in (0,1), shape `(B,C,1,1)`.
    pub fn gate<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (_, c, _, _) = ctx.tape.shape(x);
        if c != self.channels {
            return Err(Error::config(format!(
                "channel attention expects {} channels, got {c}",
                self.channels
            )));
        }
        let squeezed = ctx.tape.global_avg_pool(x);
        let hidden = self.reduce.forward(ctx, squeezed)?;
        let hidden = ctx.tape.relu(hidden);
        let scores = self.expand.forward(ctx, hidden)?;
        Ok(ctx.tape.sigmoid(scores))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gate = self.gate(ctx, x)?;
        Ok(ctx.tape.mul_broadcast(x, gate))
    }
}

/// Spatial gate from channel-mean and channel-max descriptors.
#[derive(Debug)]
pub struct SpatialAttention {
    conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, spec: &AttentionBlockSpec) -> Self {
        let k = spec.spatial_kernel;
        let conv =
            Conv2d::new(pb, &format!("{name}.conv"), 2, 1, k, 1, k / 2, true, InitKind::Zero);
        SpatialAttention { conv }
    }

    /// The per-(batch, pixel) gate in (0,1), shape `(B,1,H,W)`.
    pub fn gate<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mean = ctx.tape.channel_mean(x);
        let max = ctx.tape.channel_max(x);
        let desc = ctx.tape.concat_channels(&[mean, max]);
        let scores = self.conv.forward(ctx, desc)?;
        Ok(ctx.tape.sigmoid(scores))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gate = self.gate(ctx, x)?;
        Ok(ctx.tape.mul_broadcast(x, gate))
    }
}

/// Hyperparameters for depth attention at one merge point.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct DepthAttentionSpec {
    pub branch_count: usize,
    pub channels: usize,
}

/// Learned softmax weighting over same-shape skip branches.
#[derive(Debug)]
pub struct DepthAttention {
    pub spec: DepthAttentionSpec,
    scorers: Vec<Conv2d>,
}

impl DepthAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, spec: DepthAttentionSpec) -> Self {
        let scorers = (0..spec.branch_count)
            .map(|k| {
                Conv2d::new(
                    pb,
                    &format!("{name}.score{k}"),
                    spec.channels,
                    1,
                    1,
                    1,
                    0,
                    true,
                    InitKind::Zero,
                )
            })
            .collect();
        DepthAttention { spec, scorers }
    }

    /// Branch weights `(B,K,1,1)`: a probability vector over branches for
    /// every batch element.
    pub fn weights<T: Real>(&self, ctx: &mut Ctx<T>, branches: &[Var]) -> Result<Var> {
        if branches.is_empty() {
            return Err(Error::usage("depth attention needs at least one branch"));
        }
        if branches.len() != self.spec.branch_count {
            return Err(Error::config(format!(
                "depth attention built for {} branches, got {}",
                self.spec.branch_count,
                branches.len()
            )));
        }
        let shape = ctx.tape.shape(branches[0]);
        for &b in branches {
            if ctx.tape.shape(b) != shape {
                return Err(Error::config("depth attention branches must share one shape"));
            }
        }
        if shape.1 != self.spec.channels {
            return Err(Error::config(format!(
                "depth attention expects {} channels, got {}",
                self.spec.channels, shape.1
            )));
        }
        let mut scores = Vec::with_capacity(branches.len());
        for (&b, scorer) in branches.iter().zip(&self.scorers) {
            let descriptor = ctx.tape.global_avg_pool(b);
            scores.push(scorer.forward(ctx, descriptor)?);
        }
        let stacked = ctx.tape.concat_channels(&scores);
        Ok(ctx.tape.softmax_channels(stacked))
    }

    /// Weighted sum of the branches plus the weights used.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, branches: &[Var]) -> Result<(Var, Var)> {
        let weights = self.weights(ctx, branches)?;
        Ok((ctx.tape.depth_combine(weights, branches, false), weights))
    }
}

/// The channel/spatial attention pair wrapping a bottleneck's output.
/// Disabled mechanisms create no parameters and apply no operations.
#[derive(Debug)]
pub struct AttentionBlock {
    pub spec: AttentionBlockSpec,
    channel: Option<ChannelAttention>,
    spatial: Option<SpatialAttention>,
}

impl AttentionBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<T>, name: &str, spec: AttentionBlockSpec) -> Result<Self> {
        spec.validate()?;
        let channel =
            spec.channel_enabled.then(|| ChannelAttention::new(pb, &format!("{name}.channel"), &spec));
        let spatial =
            spec.spatial_enabled.then(|| SpatialAttention::new(pb, &format!("{name}.spatial"), &spec));
        Ok(AttentionBlock { spec, channel, spatial })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mut y = x;
        if let Some(ca) = &self.channel {
            y = ca.forward(ctx, y)?;
        }
        if let Some(sa) = &self.spatial {
            y = sa.forward(ctx, y)?;
        }
        Ok(y)
    }
}

/// `A(G(x))`: ghost bottleneck followed by channel then spatial attention.
pub fn attention_wrap<T: Real>(
    ctx: &mut Ctx<T>,
    bottleneck: &GhostBottleneck,
    attention: &AttentionBlock,
    x: Var,
) -> Result<Var> {
    let features = bottleneck.forward(ctx, x)?;
    attention.forward(ctx, features)
}
