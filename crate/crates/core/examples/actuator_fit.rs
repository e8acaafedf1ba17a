//! Recovers the steering time constant from a simulated step response with
//! measurement noise.
//!
//!     cargo run --example actuator_fit

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use delaytube::vehicle::fit_time_constant;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let k_true = 30.0;
    let times: Vec<f64> = (0..=150).map(|i| i as f64 * 0.002).collect();
    let clean: Vec<f64> = times.iter().map(|t| 1.0 - (-k_true * t).exp()).collect();
    println!("noiseless fit: {:.6}", fit_time_constant(&times, &clean)?);

    for sigma in [0.005, 0.01, 0.02] {
        let noise = Normal::new(0.0, sigma)?;
        let fits: Vec<f64> = (0..20)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noisy: Vec<f64> = clean.iter().map(|r| r + noise.sample(&mut rng)).collect();
                fit_time_constant(&times, &noisy)
            })
            .collect::<Result<_, _>>()?;
        let lo = fits.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = fits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!("sigma {sigma}: 20 fits in [{lo:.2}, {hi:.2}]");
    }
    Ok(())
}
