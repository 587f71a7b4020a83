//! Driving the experiment runner from code: load a TOML config, tweak it
//! and run the collective checks into a temporary directory.
//!
//! ```bash
//! cargo run --example experiment_config
//! ```

use gradcomp::cli::{cmd_collective_check, ExperimentConfig};

const CONFIG: &str = r#"
seed = 5
workers = 8

[collective_check]
oracle_instances = 20
settings = [
  { d = 65536, chunk_size = 64, chunks = 112, k = 2731 },
  { d = 4096, chunk_size = 16, chunks = 40, k = 64 },
]

[[schemes]]
kind = "topkc"
budgets = [2.0]
"#;

fn main() -> gradcomp::Result<()> {
    let mut cfg = ExperimentConfig::from_toml(CONFIG)?;
    let dir = std::env::temp_dir().join("gradcomp-example");
    cfg.out = dir.clone();
    println!("config hash {}", cfg.hash()?);

    let outcome = cmd_collective_check(&cfg)?;
    for line in &outcome.report {
        println!("{line}");
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }

    // unknown keys are rejected with their name
    if let Err(e) = ExperimentConfig::from_toml("[train]\nepochs = 3\n") {
        println!("rejected: {e}");
    }
    Ok(())
}
