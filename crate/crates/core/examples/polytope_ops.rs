//! Minkowski sums, Pontryagin differences and power sums on small sets.
//!
//!     cargo run --example polytope_ops

use nalgebra::{DMatrix, DVector};

use delaytube::polytope::{minkowski_sum, pontryagin_diff, power_sum, ConvexSet, HPolytope, SupportFunction, Zonotope};

fn show(name: &str, set: &dyn SupportFunction) {
    let dirs = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [0.7071, 0.7071]];
    let s: Vec<String> = dirs
        .iter()
        .map(|d| format!("{:.3}", set.support(&DVector::from_column_slice(d)).unwrap()))
        .collect();
    println!("{name:<28} support (+x +y -x -y diag): {}", s.join(" "));
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = HPolytope::from_box(&[-2.0, -1.0], &[2.0, 1.0])?;
    let q = Zonotope::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.0, 0.2]))?;
    show("P", &p);
    show("Q", &q);

    let sum = minkowski_sum(&ConvexSet::from(p.clone()), &ConvexSet::from(q.clone()))?;
    show("P + Q", &sum);
    let diff = pontryagin_diff(&p, &q)?;
    show("P - Q", &diff);
    let back = minkowski_sum(&ConvexSet::from(diff), &ConvexSet::from(q.clone()))?;
    show("(P - Q) + Q", &back);

    let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]);
    for s in [1, 3, 10, 30] {
        show(&format!("Q + AQ + ... ({s} terms)"), &power_sum(&a, &q, s)?);
    }
    Ok(())
}
