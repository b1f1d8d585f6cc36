//! Shared finite-difference gradient-check machinery.
//!
//! Every scenario is built once at float64 as the master parameter point;
//! trainable parameters are nudged off their initialization by a
//! deterministic jitter so zero-initialized gates sit at a generic point
//! rather than a symmetric fixed point. The float32 check compares
//! float32 analytic gradients against the float64 central-difference
//! reference at the same point.

use ghost_unetpp::attention::{
    AttentionBlock, AttentionBlockSpec, ChannelAttention, DepthAttention, DepthAttentionSpec,
    SpatialAttention,
};
use ghost_unetpp::ghost::{GhostBottleneck, GhostBottleneckSpec, GhostModule, GhostModuleSpec};
use ghost_unetpp::network::{Network, NetworkSpec};
use ghost_unetpp::nn::ParamBuilder;
use ghost_unetpp::tensor::{Ctx, ParamId, ParamStore, Real, Tape, Var};
use ghost_unetpp::training::loss::{combined_loss, one_hot_target};
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const F64_TOLERANCE: f64 = 1e-5;
pub const F32_TOLERANCE: f64 = 1e-3;

enum Built {
    Ghost(GhostModule),
    Bottleneck(Box<GhostBottleneck>),
    Channel(ChannelAttention),
    Spatial(SpatialAttention),
    Depth(DepthAttention),
    Block(AttentionBlock),
    Network(Box<Network>),
    Logits(ParamId),
}

pub struct Scenario {
    pub name: &'static str,
    params: ParamStore<f64>,
    built: Built,
    input: Array4<f64>,
    second: Option<Array4<f64>>,
    target: Option<Array4<f64>>,
}

fn cast<T: Real>(a: &Array4<f64>) -> Array4<T> {
    a.mapv(T::from_f64)
}

/// Smooth, asymmetric test signal in roughly [-0.6, 1.0].
fn signal(shape: (usize, usize, usize, usize), phase: f64) -> Array4<f64> {
    let mut i = 0.0;
    Array4::from_shape_fn(shape, |_| {
        i += 1.0;
        0.2 + 0.8 * (1.3 * i + phase).sin()
    })
}

/// Moves every trainable parameter to a generic point so that
/// zero-initialized gates (sigmoid at 0.5, uniform softmax) do not hide
/// gradient paths behind symmetry.
fn jitter(ps: &mut ParamStore<f64>) {
    let ids: Vec<ParamId> = ps.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        if !ps.entry(id).trainable {
            continue;
        }
        let mut i = 0.0f64;
        ps.value_mut(id).mapv_inplace(|x| {
            i += 1.0;
            x + 0.05 * (1.7 * i + 0.31 * k as f64).sin()
        });
    }
}

#[allow(dead_code)] // used by the acceptance suite only
pub fn all_scenarios() -> Vec<Scenario> {
    vec![
        Scenario::ghost_module(),
        Scenario::ghost_bottleneck(),
        Scenario::channel_attention(),
        Scenario::spatial_attention(),
        Scenario::depth_attention(),
        Scenario::attention_block(),
        Scenario::full_forward(),
        Scenario::combined_loss(),
    ]
}

impl Scenario {
    fn with_builder<F>(name: &'static str, input: Array4<f64>, build: F) -> Scenario
    where
        F: FnOnce(&mut ParamBuilder<f64>) -> Built,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut pb = ParamBuilder::new(&mut rng);
        let built = build(&mut pb);
        let mut params = pb.finish();
        jitter(&mut params);
        Scenario { name, params, built, input, second: None, target: None }
    }

    pub fn ghost_module() -> Scenario {
        Scenario::with_builder("ghost_module", signal((2, 3, 6, 6), 0.1), |pb| {
            let spec = GhostModuleSpec::new(3, 4, 2);
            Built::Ghost(GhostModule::new(pb, "gm", spec, true).unwrap())
        })
    }

    pub fn ghost_bottleneck() -> Scenario {
        Scenario::with_builder("ghost_bottleneck", signal((1, 4, 6, 6), 0.4), |pb| {
            let spec = GhostBottleneckSpec::new(4, 6, 2);
            Built::Bottleneck(Box::new(GhostBottleneck::new(pb, "gb", spec).unwrap()))
        })
    }

    pub fn channel_attention() -> Scenario {
        Scenario::with_builder("channel_attention", signal((2, 8, 5, 5), 0.7), |pb| {
            let mut spec = AttentionBlockSpec::new(8);
            spec.channel_reduction = 4;
            Built::Channel(ChannelAttention::new(pb, "ca", &spec))
        })
    }

    pub fn spatial_attention() -> Scenario {
        Scenario::with_builder("spatial_attention", signal((2, 5, 7, 7), 1.1), |pb| {
            let mut spec = AttentionBlockSpec::new(5);
            spec.spatial_kernel = 3;
            Built::Spatial(SpatialAttention::new(pb, "sa", &spec))
        })
    }

    pub fn depth_attention() -> Scenario {
        let mut s = Scenario::with_builder("depth_attention", signal((2, 6, 5, 5), 1.6), |pb| {
            let spec = DepthAttentionSpec { branch_count: 2, channels: 6 };
            Built::Depth(DepthAttention::new(pb, "da", spec))
        });
        s.second = Some(signal((2, 6, 5, 5), 2.3));
        s
    }

    pub fn attention_block() -> Scenario {
        Scenario::with_builder("attention_block", signal((2, 6, 6, 6), 2.9), |pb| {
            let mut spec = AttentionBlockSpec::new(6);
            spec.channel_reduction = 3;
            spec.spatial_kernel = 3;
            Built::Block(AttentionBlock::new(pb, "ab", spec).unwrap())
        })
    }

    pub fn full_forward() -> Scenario {
        let spec = NetworkSpec {
            depth: 3,
            base_channels: 4,
            num_classes: 3,
            channel_reduction: 4,
            spatial_kernel: 3,
            ..NetworkSpec::default()
        };
        let (net, mut params) = Network::build::<f64>(&spec, 0x5eed).unwrap();
        jitter(&mut params);
        let mask = ndarray::Array2::from_shape_fn((8, 8), |(y, x)| ((y / 3 + x / 3) % 3) as u8);
        let target = one_hot_target::<f64>(&[&mask], 3).unwrap();
        Scenario {
            name: "full_forward",
            params,
            built: Built::Network(Box::new(net)),
            input: signal((1, 1, 8, 8), 3.7),
            second: None,
            target: Some(target),
        }
    }

    pub fn combined_loss() -> Scenario {
        let mut params = ParamStore::new();
        let id = params.add("logits", signal((2, 3, 4, 4), 4.1), true);
        let mask_a = ndarray::Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 3) as u8);
        let mask_b = ndarray::Array2::from_shape_fn((4, 4), |(y, x)| ((2 * y + x) % 3) as u8);
        let target = one_hot_target::<f64>(&[&mask_a, &mask_b], 3).unwrap();
        Scenario {
            name: "combined_loss",
            params,
            built: Built::Logits(id),
            input: Array4::zeros((1, 1, 1, 1)),
            second: None,
            target: Some(target),
        }
    }

    /// Forward pass to a scalar loss; optionally also the analytic
    /// gradients of every trainable parameter, converted to float64.
    fn eval<T: Real>(&self, ps: &mut ParamStore<T>, want_grads: bool) -> (f64, Vec<(ParamId, Array4<f64>)>) {
        let tape: Tape<T> = Tape::new(want_grads);
        let loss_var = self.loss_graph(&tape, ps);
        let loss = tape.value(loss_var)[(0, 0, 0, 0)].to_f64();
        let mut grads = Vec::new();
        if want_grads {
            let g = tape.backward(loss_var);
            for id in ps.ids() {
                if ps.entry(id).trainable {
                    grads.push((id, g.for_param(&tape, ps, id).mapv(|v| v.to_f64())));
                }
            }
        }
        (loss, grads)
    }

    fn loss_graph<T: Real>(&self, tape: &Tape<T>, ps: &mut ParamStore<T>) -> Var {
        let mut ctx = Ctx { tape, ps, train: true };
        let x = tape.leaf(cast::<T>(&self.input));
        let out = match &self.built {
            Built::Ghost(m) => m.forward(&mut ctx, x).unwrap(),
            Built::Bottleneck(m) => m.forward(&mut ctx, x).unwrap(),
            Built::Channel(m) => m.forward(&mut ctx, x).unwrap(),
            Built::Spatial(m) => m.forward(&mut ctx, x).unwrap(),
            Built::Block(m) => m.forward(&mut ctx, x).unwrap(),
            Built::Depth(m) => {
                let b2 = tape.leaf(cast::<T>(self.second.as_ref().unwrap()));
                m.forward(&mut ctx, &[x, b2]).unwrap().0
            }
            Built::Network(net) => {
                let fo = net.forward(&mut ctx, x).unwrap();
                let t = tape.leaf(cast::<T>(self.target.as_ref().unwrap()));
                return combined_loss(tape, fo.fused, t, 1.0, 1.0).unwrap();
            }
            Built::Logits(id) => {
                let logits = tape.param(ctx.ps, *id);
                let t = tape.leaf(cast::<T>(self.target.as_ref().unwrap()));
                return combined_loss(tape, logits, t, 0.7, 0.9).unwrap();
            }
        };
        // Project the module output to a scalar through a fixed asymmetric
        // weighting so every output entry influences the loss differently.
        let shape = tape.shape(out);
        let probe = tape.leaf(cast::<T>(&signal(shape, 5.3)));
        tape.mean_all(tape.mul(out, probe))
    }
}

pub struct CheckReport {
    pub name: &'static str,
    pub max_rel: f64,
    pub probes: usize,
}

/// Central finite difference at float64 against float64 analytic
/// gradients. `probes_per_param` entries of every trainable parameter are
/// probed, spread evenly through the flattened array.
pub fn fd_check_f64(s: &Scenario, probes_per_param: usize) -> CheckReport {
    let (_, analytic) = s.eval::<f64>(&mut s.params.clone(), true);
    fd_compare(s, &analytic, probes_per_param)
}

/// Float32 analytic gradients against the float64 finite-difference
/// reference at the same parameter point.
pub fn fd_check_f32(s: &Scenario, probes_per_param: usize) -> CheckReport {
    let mut ps32 = s.params.cast::<f32>();
    let (_, analytic32) = s.eval::<f32>(&mut ps32, true);
    fd_compare(s, &analytic32, probes_per_param)
}

fn fd_compare(
    s: &Scenario,
    analytic: &[(ParamId, Array4<f64>)],
    probes_per_param: usize,
) -> CheckReport {
    // Relative error with a floor of 1e-3× the gradient scale, so
    // finite-difference cancellation noise on near-zero entries does not
    // register as disagreement.
    let scale = analytic
        .iter()
        .flat_map(|(_, g)| g.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let floor = scale * 1e-3;
    let h = 1e-6;
    let mut max_rel = 0.0f64;
    let mut probes = 0usize;
    for (id, grad) in analytic {
        let flat = grad.as_slice().expect("standard layout");
        let stride = (flat.len() / probes_per_param).max(1);
        for idx in (0..flat.len()).step_by(stride) {
            let probe_at = |delta: f64| -> f64 {
                let mut ps = s.params.clone();
                ps.value_mut(*id).as_slice_mut().expect("standard layout")[idx] += delta;
                s.eval::<f64>(&mut ps, false).0
            };
            let fd = (probe_at(h) - probe_at(-h)) / (2.0 * h);
            let an = flat[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(floor);
            max_rel = max_rel.max(rel);
            probes += 1;
        }
    }
    CheckReport { name: s.name, max_rel, probes }
}
