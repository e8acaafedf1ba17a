//! Carves an obstacle-free convex region around the vehicle, choosing each
//! separating line so that as much of the path ahead as possible stays free.
//!
//!     cargo run --example region_carving

use nalgebra::DVector;

use delaytube::polytope::HPolytope;
use delaytube::scenario::{carve_along, carve_convex_region, ObstacleBox};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let road = HPolytope::from_box(&[-100.0, -2.0], &[200.0, 5.5])?;
    let obstacles = [
        ObstacleBox::new([20.0, 0.0], [2.25, 0.9], 0.0),
        ObstacleBox::new([35.0, 3.5], [2.25, 0.9], 0.0),
    ];
    // part way into a lane change to the left, to be finished before the
    // second car
    let seed = [10.0, 1.5];
    let ahead: Vec<[f64; 2]> = (1..=15)
        .map(|k| {
            let x = seed[0] + 1.5 * k as f64;
            [x, 1.5 + 2.0 * ((x - 10.0) / 8.0).clamp(0.0, 1.0)]
        })
        .collect();

    for (name, region) in [
        ("nearest point", carve_convex_region(seed, &obstacles, &road)?),
        ("lookahead", carve_along(seed, &ahead, &obstacles, &road)?),
    ] {
        let kept = ahead
            .iter()
            .filter(|p| region.contains(&DVector::from_column_slice(&p[..])))
            .count();
        println!("{name}: {kept}/{} lookahead points inside", ahead.len());
        for (row, b) in region.normals().row_iter().zip(region.offsets().iter()).skip(4) {
            println!("    {:+.3} x {:+.3} y <= {:.3}", row[0], row[1], b);
        }
    }
    Ok(())
}
