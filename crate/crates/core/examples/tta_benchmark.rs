//! Time to accuracy on the Gaussian-cluster task. Cheap rounds are not
//! enough: the most aggressive budget has the fastest rounds but not the
//! fastest time to the target.
//!
//! ```bash
//! cargo run --release --example tta_benchmark
//! ```

use gradcomp::cli::{build_task, train_all, ExperimentConfig, SchemeEntry, SchemeKind};

fn main() -> gradcomp::Result<()> {
    let mut cfg = ExperimentConfig::default();
    let mut thc = SchemeEntry::new(SchemeKind::Thc);
    thc.q = Some(4);
    cfg.schemes = vec![
        SchemeEntry::new(SchemeKind::DenseFp32),
        SchemeEntry::new(SchemeKind::DenseFp16),
        SchemeEntry::new(SchemeKind::Topkc).with_budgets(&[0.5, 2.0, 8.0]),
        SchemeEntry::new(SchemeKind::Topk).with_budgets(&[2.0]),
        thc,
    ];
    let task = build_task(&cfg)?;
    println!("{} parameters, {} workers", task.model.num_params(), cfg.workers);
    println!("{:<14} {:>9} {:>10} {:>12} {:>12}", "scheme", "final acc", "round ms", "to 0.80 ms", "to 0.85 ms");
    for (_, s) in train_all(&cfg, &task)? {
        let ms = |t: &str| s.time_to[t].map_or("-".to_string(), |x| format!("{:.2}", x * 1e3));
        println!(
            "{:<14} {:>9.4} {:>10.4} {:>12} {:>12}",
            s.scheme,
            s.final_metric.unwrap_or(f64::NAN),
            s.mean_round_seconds * 1e3,
            ms("0.8"),
            ms("0.85")
        );
    }
    Ok(())
}
