//! Gradient integrity: analytic gradients against central finite
//! differences on micro configurations of every differentiable building
//! block, at float64 (tolerance 1e-5) and float32 (tolerance 1e-3).

mod common;

use common::{fd_check_f32, fd_check_f64, Scenario, F32_TOLERANCE, F64_TOLERANCE};

fn check(s: Scenario, probes: usize) {
    let r64 = fd_check_f64(&s, probes);
    assert!(
        r64.max_rel < F64_TOLERANCE,
        "{}: float64 max relative error {:.3e} over {} probes",
        r64.name,
        r64.max_rel,
        r64.probes
    );
    let r32 = fd_check_f32(&s, probes);
    assert!(
        r32.max_rel < F32_TOLERANCE,
        "{}: float32 max relative error {:.3e} over {} probes",
        r32.name,
        r32.max_rel,
        r32.probes
    );
}

#[test]
fn ghost_module_gradients_match_finite_differences() {
    check(Scenario::ghost_module(), 16);
}

#[test]
fn ghost_bottleneck_gradients_match_finite_differences() {
    check(Scenario::ghost_bottleneck(), 12);
}

#[test]
fn channel_attention_gradients_match_finite_differences() {
    check(Scenario::channel_attention(), 16);
}

#[test]
fn spatial_attention_gradients_match_finite_differences() {
    check(Scenario::spatial_attention(), 16);
}

#[test]
fn depth_attention_gradients_match_finite_differences() {
    check(Scenario::depth_attention(), 16);
}

#[test]
fn attention_block_gradients_match_finite_differences() {
    check(Scenario::attention_block(), 12);
}

#[test]
fn full_forward_gradients_match_finite_differences() {
    check(Scenario::full_forward(), 3);
}

#[test]
fn combined_loss_gradients_match_finite_differences() {
    check(Scenario::combined_loss(), 48);
}
