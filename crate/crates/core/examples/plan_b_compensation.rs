//! Compensates a pure-pursuit steering sequence for the first-order actuator
//! lag and compares the predicted actuator output with and without it.
//!
//!     cargo run --example plan_b_compensation

use delaytube::path::Path;
use delaytube::planb::{compensate, predicted_actuator_output, rollout_blackbox, CompensationConfig, PurePursuit};
use delaytube::vehicle::{VehicleParams, VehicleState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = VehicleParams::default();
    let track = Path::circle([0.0, 50.0], 50.0, 400)?;
    let pp = PurePursuit::new(3.0, 40.0, params);
    // start a little outside the circle so the controller has work to do
    let x0 = VehicleState::new(0.0, -0.5, 0.0, 40.0, 0.0);
    let (horizon, dt) = (15, 0.02);
    let wanted: Vec<f64> = rollout_blackbox(&pp, &x0, &track, horizon, dt, &params)?
        .iter()
        .map(|u| u.delta_cmd)
        .collect();

    let cfg = CompensationConfig::new(horizon, dt, &params);
    let comp = compensate(&wanted, x0.delta_a, &cfg)?;
    let raw = predicted_actuator_output(&wanted, x0.delta_a, &cfg)?;
    let fixed = predicted_actuator_output(&comp.commands, x0.delta_a, &cfg)?;
    println!("{:>3} {:>9} {:>9} {:>9} {:>9}", "k", "wanted", "command", "lag only", "comp.");
    for k in 0..horizon {
        println!(
            "{k:>3} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            wanted[k], comp.commands[k], raw[k], fixed[k]
        );
    }
    let err = |out: &[f64]| out.iter().zip(&wanted).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max tracking error: uncompensated {:.4}, compensated {:.4}", err(&raw), err(&fixed));
    Ok(())
}
