//! Replans around a slow car ahead with the lateral lattice and prints the
//! chosen reference.
//!
//!     cargo run --example frenet_lattice

use delaytube::path::Path;
use delaytube::scenario::{frenet_replan, FrenetConfig, ObstacleBox};
use delaytube::vehicle::{VehicleParams, VehicleState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let lane = Path::straight([0.0, 0.0], 0.0, 300.0, 0.5)?;
    let params = VehicleParams::default();
    let cfg = FrenetConfig {
        offsets: vec![0.0, 3.5],
        ..FrenetConfig::default()
    };
    let state = VehicleState::new(0.0, 0.0, 0.0, 15.0, 0.0);
    for lead_x in [60.0, 30.0, 18.0] {
        let lead = ObstacleBox::new([lead_x, 0.0], [2.25, 0.9], 0.0);
        let (reference, emergency) = frenet_replan(&state, &lane, &[lead], 0.0, 15, 0.1, 15.0, &cfg, &params)?;
        let end = reference.states.last().unwrap();
        println!(
            "lead at {lead_x:>4} m: end of horizon at ({:.1}, {:.2}), speed {:.1}{}",
            end.p_x,
            end.p_y,
            end.v,
            if emergency { ", emergency stop" } else { "" }
        );
    }
    Ok(())
}
