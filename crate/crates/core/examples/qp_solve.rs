//! Solves a small box- and equality-constrained QP and prints the KKT data.
//!
//!     cargo run --example qp_solve

use nalgebra::{DMatrix, DVector};

use delaytube::qp::{solve, stationarity_residual, QuadraticProgram, DEFAULT_MAX_ITER, DEFAULT_TOL};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // minimize 1/2 x'Px + q'x  s.t.  x0 + x1 + x2 = 1,  0 <= x <= 0.6
    let p = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
    let q = DVector::from_column_slice(&[-1.0, 0.5, -2.0]);
    let qp = QuadraticProgram::new(p, q)?
        .with_equalities(DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]), DVector::from_element(1, 1.0))?
        .with_bounds(&DVector::zeros(3), &DVector::from_element(3, 0.6))?;
    let sol = solve(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER);
    println!("status     {:?} after {} iterations", sol.status, sol.iterations);
    println!("x          {:?}", sol.x.as_slice());
    println!("objective  {:.6}", sol.objective);
    println!("y_eq       {:?}", sol.y_eq.as_slice());
    println!("y_ineq     {:?}", sol.y_ineq.as_slice());
    println!("stationarity residual {:.2e}", stationarity_residual(&qp, &sol));
    Ok(())
}
