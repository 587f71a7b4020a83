//! Randomized Hadamard rotation. A full rotation spreads a spike over all
//! coordinates; a partial one only within blocks of `2^depth`.
//!
//! ```bash
//! cargo run --example hadamard_rotation
//! ```

use gradcomp::transforms::{rht_forward, rht_inverse, RotationSpec};
use gradcomp::vectorcore::{pad_to_pow2, SeedSpec};

fn main() -> gradcomp::Result<()> {
    let d = 1024;
    let mut v = vec![0.01f32; d];
    v[17] = 10.0;
    let g = pad_to_pow2(&v)?;
    let seeds = SeedSpec::new(42);

    for depth in [0, 3, 6, 10] {
        let spec = RotationSpec::draw(d, depth, &seeds, 0)?;
        let r = rht_forward(&g, &spec)?;
        let peak = r.padded().iter().fold(0f32, |m, x| m.max(x.abs()));
        let back = rht_inverse(&r, &spec)?;
        let err = back
            .padded()
            .iter()
            .zip(g.padded())
            .fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        println!(
            "depth {depth:>2} (blocks of {:>4}): max |x| {peak:>8.4}, norm {:.4} -> {:.4}, round trip {err:.1e}",
            spec.block_size(),
            g.sq_norm().sqrt(),
            r.sq_norm().sqrt()
        );
    }
    Ok(())
}
