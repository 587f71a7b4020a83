//! TopK, chunked TopK and the permuted ablation on spatially correlated
//! gradients at matched bits per coordinate.
//!
//! ```bash
//! cargo run --release --example topk_vs_topkc
//! ```

use gradcomp::cli::{topk_for_budget, topkc_chunks_for_budget};
use gradcomp::collectives::WorkerGroup;
use gradcomp::compressors::CompressorConfig;
use gradcomp::metrics::mean;
use gradcomp::pipelines::{Aggregator, Scheme};
use gradcomp::trainbench::{gen_correlated_gradient, SyntheticGradSpec};
use gradcomp::vectorcore::SeedSpec;

fn main() -> gradcomp::Result<()> {
    let spec = SyntheticGradSpec::default();
    let d = spec.d;
    let group = WorkerGroup::new(4)?;
    let seeds = SeedSpec::new(7);

    for b in [0.5, 2.0, 8.0] {
        let c = if b < 1.0 { 128 } else { 64 };
        let chunks = topkc_chunks_for_budget(b, c, d)?;
        let topkc = CompressorConfig::TopKC { chunk_size: c, chunks };
        let schemes = [
            Scheme::new("topk", CompressorConfig::TopK { k: topk_for_budget(b, d)? }),
            Scheme::new("topkc", topkc.clone()),
            Scheme::new("topkc-permuted", topkc).permuted(),
        ];
        for scheme in schemes {
            let label = scheme.label.clone();
            // rounds are independent draws, so residuals would only add noise
            let mut agg = Aggregator::new(scheme.with_error_feedback(false), group, seeds, d, Vec::new())?;
            let (mut errs, mut bits) = (Vec::new(), 0.0);
            for round in 0..5 {
                let grads = (0..4)
                    .map(|w| gen_correlated_gradient(&spec, &seeds, w, round).map(|g| g.logical().to_vec()))
                    .collect::<gradcomp::Result<Vec<_>>>()?;
                let r = agg.aggregate(&grads, round)?;
                errs.extend(r.nmse);
                bits = r.input_bits_per_coord();
            }
            println!("b={b:<4} {label:<15} nmse {:.4}  bits/coord {bits:.4}", mean(&errs).unwrap_or(f64::NAN));
        }
    }
    Ok(())
}
