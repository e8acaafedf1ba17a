//! Runs every arm of a shipped scenario over a range of seeds and prints the
//! safety and tracking numbers side by side.
//!
//!     cargo run --release --example compare_arms -- overtaking 10

use std::time::Instant;

use delaytube::scenario::{builtin, Arm, Metrics, Prepared};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "static_obstacle".into());
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let src = builtin(&name).ok_or_else(|| format!("no shipped scenario {name:?}"))?;
    let prepared = Prepared::from_toml(src)?;

    println!("{:>4} {:>10} {:>10} {:>10} {:>6} {:>7} {:>8}", "seed", "arm", "min clr", "max xte", "cycles", "infeas", "time");
    for seed in 0..seeds {
        for arm in Arm::ALL {
            let t = Instant::now();
            let m = Metrics::from_log(&prepared.simulate(arm, seed)?);
            let clr = m.min_clearance.map_or("-".to_string(), |c| format!("{c:.3}"));
            println!(
                "{seed:>4} {arm:>10} {clr:>10} {:>10.3} {:>6} {:>7} {:>7.1}s{}",
                m.max_cross_track,
                m.cycles,
                m.infeasible_cycles,
                t.elapsed().as_secs_f64(),
                if m.collision { "  collision" } else { "" }
            );
        }
    }
    Ok(())
}
