//! Scratch grid over polarization fixture knobs (ignored).
use hiermoe_core::train::polarization::{run_polarization_with, PolarizationFixture};

#[test]
#[ignore]
fn grid() {
    for hidden in [6usize, 8] {
        for n_source in [4usize, 6] {
            let fx = PolarizationFixture {
                fast_expert_scale: 1.0,
                slow_expert_scale: 0.01,
                beta: 1e-3,
                epochs: 100,
                warmup_stage: 70,
                hidden,
                n_source,
                ..Default::default()
            };
            let a = run_polarization_with(&fx, false, false, 1).unwrap();
            let b = run_polarization_with(&fx, true, true, 1).unwrap();
            println!(
                "hidden={hidden} src={n_source}: joint-from-0 max_g {:.3} (mse {:.3}, experts {:?}) | two-stage max_g {:.3} (mse {:.3}, experts {:?})",
                a.max_mean_gate, a.joint_total_mse,
                a.per_expert_total_mse.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>(),
                b.max_mean_gate, b.joint_total_mse,
                b.per_expert_total_mse.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>(),
            );
        }
    }
}
