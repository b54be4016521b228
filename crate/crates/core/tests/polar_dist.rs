//! One-off distribution probe (ignored).
use hiermoe_core::train::polarization::{run_polarization_with, PolarizationFixture};

#[test]
#[ignore]
fn dist() {
    let fx = PolarizationFixture {
        fast_expert_scale: 0.3,
        slow_expert_scale: 0.01,
        beta: 0.0,
        epochs: 60,
        warmup_stage: 40,
        ..Default::default()
    };
    let rep = run_polarization_with(&fx, false, false, 1).unwrap();
    println!("joint-from-0 mean_gate {:?}", rep.mean_gate);
}
