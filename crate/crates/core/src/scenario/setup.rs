//! Construction of the tube planner from vehicle parameters and a
//! disturbance box.

use nalgebra::DVector;

use crate::polytope::{self, FamilyDynamics, HPolytope, JacobianFamily, TemplateDirections, Zonotope};
use crate::sim::PlanA;
use crate::tubempc::{self, MpcConfig, TubeError};
use crate::vehicle::VehicleParams;

/// Speed in `[0, v_max]` and actuator angle within its range.
pub fn state_box(params: &VehicleParams) -> HPolytope {
    let inf = 1e9;
    HPolytope::from_box(
        &[-inf, -inf, -inf, 0.0, -params.delta_max],
        &[inf, inf, inf, params.v_max, params.delta_max],
    )
    .expect("valid params")
}

/// Tube planner with the default weights, the invariant set computed over the
/// closed-loop Jacobian family on the given grid, and the vehicle's control
/// box.
pub fn build_plan_a(
    params: &VehicleParams,
    horizon: usize,
    dt: f64,
    w_half: [f64; 5],
    grid: (usize, usize, usize),
) -> Result<PlanA, TubeError> {
    let (q, r) = tubempc::vehicle_weights();
    let mut mpc = MpcConfig::new(horizon, dt, q.clone(), r.clone(), q.clone() * 5.0)?;
    mpc.qp = mpc.qp.with_tol(1e-6).with_max_iter(4000);
    let disturbance = Zonotope::symmetric_box(&w_half)?;
    let family = JacobianFamily::new(*params, dt, grid, FamilyDynamics::ClosedLoop { q, r })?;
    let invariant = polytope::invariant_set(&family, &disturbance, horizon, &TemplateDirections::vehicle_default())?;
    Ok(PlanA {
        mpc,
        disturbance,
        invariant,
        control: tubempc::control_box(params),
        state: state_box(params),
    })
}

/// Half-widths of the invariant set along the state axes.
pub fn tube_extent(invariant: &HPolytope) -> [f64; 5] {
    use crate::polytope::SupportFunction;
    let mut out = [0.0; 5];
    for (i, o) in out.iter_mut().enumerate() {
        let mut e = DVector::zeros(5);
        e[i] = 1.0;
        *o = invariant.support(&e).unwrap_or(f64::INFINITY);
    }
    out
}
