//! PowerSGD: error against rank on one matrix, then warm-started rounds on
//! a slowly drifting gradient.
//!
//! ```bash
//! cargo run --release --example powersgd_rank
//! ```

use gradcomp::collectives::WorkerGroup;
use gradcomp::compressors::{draw_q, powersgd_compress, powersgd_decompress, CompressorConfig};
use gradcomp::pipelines::{Aggregator, Scheme};
use gradcomp::vectorcore::SeedSpec;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

fn main() -> gradcomp::Result<()> {
    let seeds = SeedSpec::new(11);
    let mut rng = seeds.shared("example-matrix", 0);
    let mut randn = |r, c| DMatrix::<f32>::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let spectrum = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(64, |i, _| 0.85f32.powi(i as i32)));
    let m = randn(64, 64) * spectrum * randn(64, 64).transpose();

    for rank in [1, 2, 4, 8, 16, 32] {
        let q = draw_q(64, rank, &seeds, 0)?;
        let approx = powersgd_decompress(&powersgd_compress(&m, rank, &q, &seeds, 0)?)?;
        println!("rank {rank:>2}: relative error {:.4}", (&m - approx).norm() / m.norm());
    }

    // the same matrix every round: warm starts turn rounds into power iterations
    let grads: Vec<Vec<f32>> = (0..2).map(|_| m.as_slice().to_vec()).collect();
    let cfg = CompressorConfig::PowerSgd { rank: 4, warm_start: true };
    let scheme = Scheme::new("powersgd-r4", cfg).with_error_feedback(false);
    let mut agg = Aggregator::new(scheme, WorkerGroup::new(2)?, seeds, 64 * 64, Vec::new())?;
    for round in 0..5 {
        let r = agg.aggregate(&grads, round)?;
        println!("warm round {round}: nmse {:.5}", r.nmse.unwrap_or(f64::NAN));
    }
    Ok(())
}
