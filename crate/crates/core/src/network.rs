//! The nested attention ghost network.
//!
//! Nodes `X(i,j)` for `i + j ≤ L−1` form a triangular grid: `i` is the
//! resolution level (spatial dims divided by `2^i`, channels multiplied by
//! `2^i`), `j` the nested depth. The encoder column `X(i,0)` pools and
//! re-convolves the previous level; every decoder node merges its `j`
//! same-level skip branches (weighted by depth attention) with one
//! up-sampled branch, then runs an attention-wrapped ghost bottleneck.
//! Deep-supervision heads project the top-row nodes to class logits and
//! are fused by summation.

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_wrap, AttentionBlock, AttentionBlockSpec, DepthAttention, DepthAttentionSpec,
};
use crate::error::{Error, Result};
use crate::ghost::{GhostBottleneck, GhostBottleneckSpec};
use crate::nn::{Conv2d, InitKind, ParamBuilder};
use crate::tensor::{Ctx, ParamStore, Real, Tape, Var};

/// Which attention mechanisms are active.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionFlags {
    pub channel: bool,
    pub spatial: bool,
    pub depth: bool,
}

impl Default for AttentionFlags {
    fn default() -> Self {
        AttentionFlags { channel: true, spatial: true, depth: true }
    }
}

impl AttentionFlags {
    pub fn none() -> Self {
        AttentionFlags { channel: false, spatial: false, depth: false }
    }
}

/// How a decoder node combines its skip branches with the up-sampled
/// branch: channel concatenation (default) or elementwise sum.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Sum,
    #[default]
    Concat,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    /// Number of resolution levels `L`; the grid has `L(L+1)/2` nodes.
    pub depth: usize,
    /// Channels at level 0, doubling per level.
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Ghost ratio `s` for every bottleneck; 1 builds the dense twin.
    pub ghost_ratio: usize,
    pub deep_supervision: bool,
    pub merge_mode: MergeMode,
    pub attention: AttentionFlags,
    pub channel_reduction: usize,
    pub spatial_kernel: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            depth: 5,
            base_channels: 32,
            in_channels: 1,
            num_classes: 4,
            ghost_ratio: 2,
            deep_supervision: true,
            merge_mode: MergeMode::Concat,
            attention: AttentionFlags::default(),
            channel_reduction: 16,
            spatial_kernel: 7,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::config(format!("network depth must be 1..=8, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be positive"));
        }
        if self.ghost_ratio == 0 {
            return Err(Error::config("ghost_ratio must be at least 1"));
        }
        if !self.base_channels.is_multiple_of(self.ghost_ratio) {
            return Err(Error::config(format!(
                "base_channels {} must be divisible by ghost_ratio {}",
                self.base_channels, self.ghost_ratio
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::config("spatial_kernel must be odd"));
        }
        if self.channel_reduction == 0 {
            return Err(Error::config("channel_reduction must be at least 1"));
        }
        Ok(())
    }

    /// `L(L+1)/2` bottleneck nodes.
    pub fn node_count(&self) -> usize {
        self.depth * (self.depth + 1) / 2
    }

    /// Channels at resolution level `i`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// The input spatial granuality: dims must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// The dense twin: identical topology with plain convolutions in place
    /// of ghost modules.
    pub fn dense_twin(&self) -> NetworkSpec {
        NetworkSpec { ghost_ratio: 1, ..self.clone() }
    }

    fn attention_spec(&self, channels: usize) -> AttentionBlockSpec {
        AttentionBlockSpec {
            channels,
            channel_reduction: self.channel_reduction,
            spatial_kernel: self.spatial_kernel,
            channel_enabled: self.attention.channel,
            spatial_enabled: self.attention.spatial,
        }
    }
}

/// One grid node: optional up-projection and depth attention (decoder
/// nodes only), the ghost bottleneck, and its channel/spatial attention.
#[derive(Debug)]
struct Node {
    up: Option<Conv2d>,
    depth_attn: Option<DepthAttention>,
    bottleneck: GhostBottleneck,
    attention: AttentionBlock,
}

/// Everything `forward` produces: the per-head logits (top-row outputs in
/// nested-depth order) and their fusion.
#[derive(Debug)]
pub struct ForwardOutput {
    pub heads: Vec<Var>,
    pub fused: Var,
}

/// A built network: layer structure only; weights live in a [`ParamStore`].
#[derive(Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    /// `rows[j][i]` is node `X(i,j)`.
    rows: Vec<Vec<Node>>,
    heads: Vec<Conv2d>,
}

impl Network {
    /// Build the grid and initialize a weight store from `seed`.
    pub fn build<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<(Network, ParamStore<T>)> {
        spec.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut pb: ParamBuilder<T> = ParamBuilder::new(&mut rng);
        let l = spec.depth;

        let mut rows = Vec::with_capacity(l);
        for j in 0..l {
            let mut row = Vec::with_capacity(l - j);
            for i in 0..l - j {
                let width = spec.width(i);
                let name = format!("x{i}{j}");
                let (up, depth_attn, in_channels) = if j == 0 {
                    let input = if i == 0 { spec.in_channels } else { spec.width(i - 1) };
                    (None, None, input)
                } else {
                    let up = Conv2d::new(
                        &mut pb,
                        &format!("{name}.up"),
                        spec.width(i + 1),
                        width,
                        1,
                        1,
                        0,
                        true,
                        InitKind::Xavier,
                    );
                    // A single skip branch needs no scorer: softmax over one
                    // logit is the constant 1.0, which would leave the scorer
                    // weights with a structurally zero gradient.
                    let depth_attn = (spec.attention.depth && j >= 2).then(|| {
                        DepthAttention::new(
                            &mut pb,
                            &format!("{name}.depth"),
                            DepthAttentionSpec { branch_count: j, channels: width },
                        )
                    });
                    let in_channels = match spec.merge_mode {
                        MergeMode::Concat => (j + 1) * width,
                        MergeMode::Sum => width,
                    };
                    (Some(up), depth_attn, in_channels)
                };
                let bottleneck = GhostBottleneck::new(
                    &mut pb,
                    &format!("{name}.block"),
                    GhostBottleneckSpec::new(in_channels, width, 1).with_ratio(spec.ghost_ratio),
                )?;
                let attention =
                    AttentionBlock::new(&mut pb, &format!("{name}.attn"), spec.attention_spec(width))?;
                row.push(Node { up, depth_attn, bottleneck, attention });
            }
            rows.push(row);
        }

        // Heads project top-row nodes to class logits. Only heads that feed
        // the output exist: all of X(0,1..L−1) under deep supervision, the
        // deepest alone otherwise, and X(0,0) in the degenerate L=1 grid.
        let head_js: Vec<usize> = if l == 1 {
            vec![0]
        } else if spec.deep_supervision {
            (1..l).collect()
        } else {
            vec![l - 1]
        };
        let heads = head_js
            .iter()
            .map(|&j| {
                Conv2d::new(
                    &mut pb,
                    &format!("head{j}"),
                    spec.base_channels,
                    spec.num_classes,
                    1,
                    1,
                    0,
                    true,
                    InitKind::Xavier,
                )
            })
            .collect();

        Ok((Network { spec: spec.clone(), rows, heads }, pb.finish()))
    }

    pub fn node_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Output channel count of node `X(i,j)`.
    pub fn node_width(&self, i: usize, j: usize) -> usize {
        self.rows[j][i].bottleneck.spec.out_channels
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let (_, c, h, w) = tape.shape(x);
        if c != self.spec.in_channels {
            return Err(Error::config(format!(
                "network expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let d = self.spec.spatial_divisor();
        if h % d != 0 || w % d != 0 {
            let ph = h.div_ceil(d) * d;
            let pw = w.div_ceil(d) * d;
            return Err(Error::usage(format!(
                "input {h}x{w} not divisible by {d} (depth {}); pad to {ph}x{pw}",
                self.spec.depth
            )));
        }
        Ok(())
    }

    /// Merge a decoder node's skip branches with its up-sampled branch.
    fn merge<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        node: &Node,
        skips: &[Var],
        up: Var,
    ) -> Result<Var> {
        let tape = ctx.tape;
        match (&node.depth_attn, self.spec.merge_mode) {
            (Some(da), MergeMode::Concat) => {
                let weights = da.weights(ctx, skips)?;
                let weighted = tape.depth_combine(weights, skips, true);
                Ok(tape.concat_channels(&[weighted, up]))
            }
            (Some(da), MergeMode::Sum) => {
                let (combined, _) = da.forward(ctx, skips)?;
                Ok(tape.add(combined, up))
            }
            (None, MergeMode::Concat) => {
                let mut parts = skips.to_vec();
                parts.push(up);
                Ok(tape.concat_channels(&parts))
            }
            (None, MergeMode::Sum) => {
                let mut acc = skips[0];
                for &s in &skips[1..] {
                    acc = tape.add(acc, s);
                }
                Ok(tape.add(acc, up))
            }
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<ForwardOutput> {
        self.check_input(ctx.tape, x)?;
        let l = self.spec.depth;
        let mut grid: Vec<Vec<Var>> = Vec::with_capacity(l);

        // Encoder column.
        let mut row0 = Vec::with_capacity(l);
        for i in 0..l {
            let node = &self.rows[0][i];
            let input = if i == 0 { x } else { ctx.tape.maxpool2(row0[i - 1])? };
            row0.push(attention_wrap(ctx, &node.bottleneck, &node.attention, input)?);
        }
        grid.push(row0);

        // Decoder nodes by increasing nested depth.
        for j in 1..l {
            let mut row = Vec::with_capacity(l - j);
            for i in 0..l - j {
                let node = &self.rows[j][i];
                let upsampled = ctx.tape.upsample_nearest2(grid[j - 1][i + 1]);
                let up = node.up.as_ref().unwrap().forward(ctx, upsampled)?;
                let skips: Vec<Var> = (0..j).map(|k| grid[k][i]).collect();
                let merged = self.merge(ctx, node, &skips, up)?;
                row.push(attention_wrap(ctx, &node.bottleneck, &node.attention, merged)?);
            }
            grid.push(row);
        }

        let head_inputs: Vec<Var> = if l == 1 {
            vec![grid[0][0]]
        } else if self.spec.deep_supervision {
            (1..l).map(|j| grid[j][0]).collect()
        } else {
            vec![grid[l - 1][0]]
        };
        let heads = head_inputs
            .iter()
            .zip(&self.heads)
            .map(|(&hin, conv)| conv.forward(ctx, hin))
            .collect::<Result<Vec<_>>>()?;
        let fused = fuse_outputs(ctx.tape, &heads, self.spec.deep_supervision)?;
        Ok(ForwardOutput { heads, fused })
    }

    /// Parameter accounting against the dense twin.
    pub fn parameter_report<T: Real>(&self, ps: &ParamStore<T>) -> Result<ParameterReport> {
        let total = ps.num_trainable_scalars();
        let twin_spec = self.spec.dense_twin();
        let (_, twin_ps) = Network::build::<T>(&twin_spec, 0)?;
        let twin_total = twin_ps.num_trainable_scalars();

        let mut per_node = Vec::new();
        for j in 0..self.spec.depth {
            for i in 0..self.spec.depth - j {
                let prefix = format!("x{i}{j}.");
                let count: usize = ps
                    .iter()
                    .filter(|(_, p)| p.trainable && p.name.starts_with(&prefix))
                    .map(|(_, p)| p.value.len())
                    .sum();
                per_node.push((format!("x{i}{j}"), count));
            }
        }
        let head_count: usize = ps
            .iter()
            .filter(|(_, p)| p.trainable && p.name.starts_with("head"))
            .map(|(_, p)| p.value.len())
            .sum();
        per_node.push(("heads".to_string(), head_count));

        Ok(ParameterReport {
            total,
            dense_twin_total: twin_total,
            ratio_vs_dense: total as f64 / twin_total as f64,
            per_node,
        })
    }
}

/// Totals produced by [`Network::parameter_report`].
#[derive(Clone, Debug)]
pub struct ParameterReport {
    pub total: usize,
    pub dense_twin_total: usize,
    /// Ghost network size as a fraction of the dense twin (< 1 is smaller).
    pub ratio_vs_dense: f64,
    pub per_node: Vec<(String, usize)>,
}

impl ParameterReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, count) in &self.per_node {
            out.push_str(&format!("{name}\t{count}\n"));
        }
        out.push_str(&format!("total\t{}\n", self.total));
        out.push_str(&format!("dense_twin\t{}\n", self.dense_twin_total));
        out.push_str(&format!("ratio_vs_dense\t{:.4}\n", self.ratio_vs_dense));
        out
    }
}

/// Combine deep-supervision heads: elementwise sum of all heads, or the
/// last head alone when deep supervision is off.
pub fn fuse_outputs<T: Real>(tape: &Tape<T>, heads: &[Var], deep_supervision: bool) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::usage("output fusion needs at least one head"));
    }
    let shape = tape.shape(heads[0]);
    for &h in heads {
        if tape.shape(h) != shape {
            return Err(Error::config("fused heads must share one shape"));
        }
    }
    if !deep_supervision {
        return Ok(*heads.last().unwrap());
    }
    let mut acc = heads[0];
    for &h in &heads[1..] {
        acc = tape.add(acc, h);
    }
    Ok(acc)
}
