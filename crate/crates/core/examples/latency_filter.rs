//! Runs the latency filter over a synthetic computation-time trace with a
//! load spike and prints how the upper bound follows it.
//!
//!     cargo run --example latency_filter

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use delaytube::influence::{coverage, replay, FilterConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sigma: f64 = 0.25;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trace: Vec<f64> = (0..3000)
        .map(|n| {
            // mean latency doubles between samples 1000 and 1500
            let mean: f64 = if (1000..1500).contains(&n) { 0.04 } else { 0.02 };
            LogNormal::new(mean.ln() - sigma * sigma / 2.0, sigma).unwrap().sample(&mut rng)
        })
        .collect();

    let cfg = FilterConfig::std_dev(3.0);
    let rows = replay(&trace, &cfg)?;
    println!("{:>5} {:>8} {:>8} {:>8}", "n", "t_c", "x_pred", "bound");
    for r in rows.iter().filter(|r| r.n % 250 == 0 || (995..1010).contains(&r.n)) {
        println!("{:>5} {:>8.4} {:>8.4} {:>8.4}", r.n, r.t_c, r.x_pred, r.bound);
    }
    println!("coverage after 100 samples: {:.3}", coverage(&rows, 100));
    Ok(())
}
