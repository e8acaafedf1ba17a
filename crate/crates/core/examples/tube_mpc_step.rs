//! One delay-aware tube MPC cycle: builds the planner, solves from a
//! predicted state for several delay bounds and prints the nominal plan.
//!
//!     cargo run --release --example tube_mpc_step

use delaytube::scenario::{build_plan_a, tube_extent};
use delaytube::tubempc::{solve_delay_aware, vehicle_gain, ConstraintSet, ReferenceTrajectory};
use delaytube::vehicle::{VehicleParams, VehicleState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = VehicleParams::default();
    let (horizon, dt) = (15, 0.1);
    let w = [0.005, 0.005, 0.00125, 0.0125, 0.0005];
    let plan_a = build_plan_a(&params, horizon, dt, w, (5, 5, 5))?;
    println!("tube half-widths: {:?}", tube_extent(&plan_a.invariant).map(|v| (v * 1e3).round() / 1e3));

    let (v, radius) = (10.0, 60.0);
    let states: Vec<VehicleState> = (0..=horizon)
        .map(|k| {
            let th = v * dt * k as f64 / radius;
            VehicleState::new(radius * th.sin(), radius * (1.0 - th.cos()), th, v, (params.wheelbase / radius).atan())
        })
        .collect();
    let reference = ReferenceTrajectory::from_states(states, dt, &params)?;
    let x_pred = VehicleState::new(0.0, -0.3, 0.02, 9.8, 0.0);
    let gain = vehicle_gain(&x_pred, &reference.controls[0], &plan_a.mpc, &params)?;
    let sets = ConstraintSet::new(
        plan_a.state.clone(),
        plan_a.control.clone(),
        plan_a.disturbance.clone(),
        plan_a.invariant.clone(),
        gain.k,
    )?;

    for s in [1, 2, 5, 10] {
        match solve_delay_aware(&x_pred, &reference, &sets, s, &plan_a.mpc, &params, None) {
            Ok(sol) => {
                let x0 = sol.plan.xbar[0];
                println!(
                    "s = {s:>2}: cost {:>8.4}, nominal start ({:.3}, {:.3}), first input ({:.3}, {:.4})",
                    sol.cost, x0.p_x, x0.p_y, sol.plan.ubar[0].accel, sol.plan.ubar[0].delta_cmd
                );
            }
            Err(e) => println!("s = {s:>2}: {e}"),
        }
    }
    Ok(())
}
