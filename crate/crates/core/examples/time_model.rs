//! Round-time model: fixed compute plus the busiest worker's egress over
//! the link, plus optional per-scheme compression cost.
//!
//! ```bash
//! cargo run --release --example time_model
//! ```

use std::collections::BTreeMap;

use gradcomp::collectives::WorkerGroup;
use gradcomp::compressors::CompressorConfig;
use gradcomp::metrics::{simulated_round_time, TimeModel};
use gradcomp::pipelines::{Aggregator, Scheme};
use gradcomp::trainbench::{gen_correlated_gradient, SyntheticGradSpec};
use gradcomp::vectorcore::SeedSpec;

fn main() -> gradcomp::Result<()> {
    let spec = SyntheticGradSpec::default();
    let seeds = SeedSpec::new(1);
    let group = WorkerGroup::new(8)?;
    let grads = (0..8)
        .map(|w| gen_correlated_gradient(&spec, &seeds, w, 0).map(|g| g.logical().to_vec()))
        .collect::<gradcomp::Result<Vec<_>>>()?;
    let schemes = [
        Scheme::new("dense-fp32", CompressorConfig::DenseFp32),
        Scheme::new("dense-fp16", CompressorConfig::DenseFp16),
        Scheme::new("thc-q4", CompressorConfig::Thc { q: 4, b: 4, depth: None }),
        Scheme::new("topkc-b2", CompressorConfig::TopKC { chunk_size: 64, chunks: 112 }),
    ];
    // THC pays for its rotation; the number is illustrative
    let models = [
        ("10 Gbit/s", TimeModel { bandwidth_bits_per_s: 1e10, compute_s_per_round: 1e-3, ..TimeModel::default() }),
        ("100 Gbit/s", TimeModel { bandwidth_bits_per_s: 1e11, compute_s_per_round: 1e-3, ..TimeModel::default() }),
        (
            "100 Gbit/s + rotation cost",
            TimeModel {
                bandwidth_bits_per_s: 1e11,
                compute_s_per_round: 1e-3,
                compression_compute_s: BTreeMap::from([("thc-q4".to_string(), 2e-4)]),
            },
        ),
    ];
    for scheme in schemes {
        let label = scheme.label.clone();
        let r = Aggregator::new(scheme, group, seeds, spec.d, Vec::new())?.aggregate(&grads, 0)?;
        let times: Vec<String> = models
            .iter()
            .map(|(name, m)| format!("{name}: {:.3} ms", simulated_round_time(&r.ledger, m, &label) * 1e3))
            .collect();
        println!("{label:<11} egress {:>8} bits | {}", r.ledger.max_worker_egress(), times.join(" | "));
    }
    Ok(())
}
