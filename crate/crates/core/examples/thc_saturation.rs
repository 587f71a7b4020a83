//! THC: rotate, quantize to `q` bits on a shared grid and sum the codes with
//! a saturating `b`-bit all-reduce. Narrow accumulators clip a little and
//! barely move the error.
//!
//! ```bash
//! cargo run --release --example thc_saturation
//! ```

use gradcomp::collectives::WorkerGroup;
use gradcomp::metrics::overflow_rate;
use gradcomp::pipelines::{run_thc_round, RoundContext};
use gradcomp::vectorcore::{pad_to_pow2, SeedSpec};
use rand_distr::{Distribution, StandardNormal};

fn main() -> gradcomp::Result<()> {
    let (n, d) = (4, 1 << 16);
    let seeds = SeedSpec::new(3);
    let grads = (0..n)
        .map(|w| {
            let mut rng = seeds.worker("example-grads", 0, w);
            let v: Vec<f32> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            pad_to_pow2(&v)
        })
        .collect::<gradcomp::Result<Vec<_>>>()?;
    let ctx = RoundContext::new(WorkerGroup::new(n)?, seeds, 0);

    println!("  q  acc  depth   nmse     overflow  bits/coord");
    for (q, b, depth) in [(2, 2, None), (4, 4, None), (4, 8, None), (4, 4, Some(8)), (8, 8, None)] {
        let r = run_thc_round(&ctx, &grads, q, b, depth)?;
        println!(
            "{q:>3} {b:>4} {:>6} {:>8.5} {:>9.4}% {:>10.3}",
            depth.map_or("full".to_string(), |x: u32| x.to_string()),
            r.nmse.unwrap_or(f64::NAN),
            100.0 * overflow_rate(&r.overflow),
            r.input_bits_per_coord()
        );
    }
    Ok(())
}
