//! Padding, FP16 rounding and chunk norms: the building blocks every
//! scheme starts from.
//!
//! ```bash
//! cargo run --example fp16_chunks
//! ```

use gradcomp::compressors::topkc_local_norms;
use gradcomp::vectorcore::{fp16_round_trip, pad_to_pow2, to_fp16_bits, ChunkGeometry, FP16_MAX};

fn main() -> gradcomp::Result<()> {
    let g = pad_to_pow2(&[3.0, 4.0, 0.1, -2.5, 1e-3, 7.0])?;
    println!("logical {} coords, padded to {}", g.logical_len(), g.padded_len());

    for x in [0.1f32, 1e-5, 65519.0, 70000.0] {
        let r = fp16_round_trip(x);
        println!("{x:>10} -> fp16 {r:>10} (bits {:#06x})", to_fp16_bits(x));
    }
    println!("largest finite half: {FP16_MAX}");

    // squared L2 norm of every chunk; the last one is zero-padded
    let geom = ChunkGeometry::new(g.logical_len(), 4)?;
    let norms = topkc_local_norms(&g, &geom)?;
    for (p, n) in norms.iter().enumerate() {
        println!("chunk {p} {:?}: {n}", geom.chunk_range(p));
    }
    Ok(())
}
