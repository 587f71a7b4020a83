//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL
//! line; the process exits non-zero if any criterion fails.
//!
//! Run with `cargo test --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use gradcomp::cli::{self, ExperimentConfig, SchemeEntry, SchemeKind};
use gradcomp::collectives::{ring_all_reduce, ReduceOp, TrafficLedger, Wire, WorkerGroup};
use gradcomp::compressors::{orthogonalize, powersgd_compress, powersgd_decompress, CompressedPayload, Grid};
use gradcomp::metrics::{mean, overflow_rate};
use gradcomp::pipelines::{run_thc_round, RoundContext};
use gradcomp::transforms::{rht_forward, rht_inverse, RotationSpec};
use gradcomp::vectorcore::{pad_to_pow2, GradientVector, SeedSpec};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))
}

fn gaussian(len: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn bit_accounting() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let rows = cli::collective_check(&cfg).map_err(|e| e.to_string())?;
    let bits: Vec<_> = rows.iter().filter(|r| r.check.contains("-bits ")).collect();
    let settings = cfg.collective_check.settings.len();
    ensure(settings >= 5, || format!("only {settings} settings"))?;
    ensure(bits.len() == 2 * settings, || format!("{} bit rows", bits.len()))?;
    if let Some(bad) = bits.iter().find(|r| !r.pass) {
        return Err(format!("{}: expected {}, measured {}", bad.check, bad.expected, bad.measured));
    }
    // the J = 7936 setting lands exactly on 8 bits per coordinate
    let j7936 = bits
        .iter()
        .find(|r| r.check.contains("J=7936"))
        .ok_or("missing the J=7936 setting")?;
    ensure(j7936.measured == "8", || format!("J=7936 measured {}", j7936.measured))?;
    within(Duration::from_secs(10), start)?;
    Ok(format!("{} identities exact, J=7936 gives 8 bits/coord", bits.len()))
}

fn collective_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0f64;
    for n in [1usize, 2, 4, 8] {
        let group = WorkerGroup::new(n).map_err(|e| e.to_string())?;
        for inst in 0..100u64 {
            let mut rng = SeedSpec::new(1000 + n as u64).shared("acceptance-ring", inst);
            let len = rng.random_range(1..2000usize);
            let inputs: Vec<Vec<f32>> = (0..n).map(|_| gaussian(len, &mut rng)).collect();
            let mut ledger = TrafficLedger::new();
            let sum = ring_all_reduce(&group, &inputs, ReduceOp::FloatSum, Wire::FP32, "sum", &mut ledger)
                .map_err(|e| e.to_string())?;
            for i in 0..len {
                let naive: f64 = inputs.iter().map(|v| f64::from(v[i])).sum();
                let scale = inputs.iter().map(|v| f64::from(v[i]).abs()).sum::<f64>().max(f64::MIN_POSITIVE);
                for out in &sum.outputs {
                    worst = worst.max((f64::from(out[i]) - naive).abs() / scale);
                }
            }
            let min = ring_all_reduce(&group, &inputs, ReduceOp::ElemMin, Wire::FP32, "min", &mut ledger)
                .map_err(|e| e.to_string())?;
            let max = ring_all_reduce(&group, &inputs, ReduceOp::ElemMax, Wire::FP32, "max", &mut ledger)
                .map_err(|e| e.to_string())?;
            for i in 0..len {
                let lo = inputs.iter().map(|v| v[i]).fold(f32::INFINITY, f32::min);
                let hi = inputs.iter().map(|v| v[i]).fold(f32::NEG_INFINITY, f32::max);
                ensure(min.outputs.iter().all(|o| o[i] == lo), || format!("min mismatch n={n} inst={inst}"))?;
                ensure(max.outputs.iter().all(|o| o[i] == hi), || format!("max mismatch n={n} inst={inst}"))?;
            }
            let bits = 8u32;
            let cap = 127 / n as i32;
            let ints: Vec<Vec<i32>> = (0..n)
                .map(|_| (0..len).map(|_| rng.random_range(-cap..=cap)).collect())
                .collect();
            let sat = ring_all_reduce(&group, &ints, ReduceOp::SatIntSum { bits }, Wire::int(bits), "sat", &mut ledger)
                .map_err(|e| e.to_string())?;
            ensure(sat.stats.clip_events == 0, || format!("clipping without overflow n={n}"))?;
            for i in 0..len {
                let exact: i32 = ints.iter().map(|v| v[i]).sum();
                ensure(sat.outputs.iter().all(|o| o[i] == exact), || format!("sat mismatch n={n} inst={inst}"))?;
            }
        }
    }
    ensure(worst <= 1e-6, || format!("FloatSum relative error {worst:.2e}"))?;
    within(Duration::from_secs(30), start)?;
    Ok(format!("400 instances, worst FloatSum relative error {worst:.1e}"))
}

fn transform_suite() -> Outcome {
    let start = Instant::now();
    let (mut worst_trip, mut worst_norm) = (0f64, 0f64);
    for l in 4..=16u32 {
        let len = 1usize << l;
        let mut rng = SeedSpec::new(7).shared("acceptance-rht", u64::from(l));
        let v = GradientVector::from_padded(gaussian(len, &mut rng), len).map_err(|e| e.to_string())?;
        let norm = v.sq_norm().sqrt();
        for depth in 0..=l {
            let spec = RotationSpec::draw(len, depth, &SeedSpec::new(11), u64::from(depth)).map_err(|e| e.to_string())?;
            let fwd = rht_forward(&v, &spec).map_err(|e| e.to_string())?;
            // every block of 2^depth coordinates rotated on its own
            let block = 1usize << depth;
            for (b, (vals, signs)) in v.padded().chunks(block).zip(spec.signs().chunks(block)).enumerate() {
                let sub = GradientVector::from_padded(vals.to_vec(), block).map_err(|e| e.to_string())?;
                let sub_spec = RotationSpec::from_signs(signs.to_vec(), depth).map_err(|e| e.to_string())?;
                let out = rht_forward(&sub, &sub_spec).map_err(|e| e.to_string())?;
                ensure(out.padded() == &fwd.padded()[b * block..(b + 1) * block], || {
                    format!("partial rotation differs from block-wise at d=2^{l}, depth {depth}, block {b}")
                })?;
            }
            worst_norm = worst_norm.max((fwd.sq_norm().sqrt() - norm).abs() / norm);
            let back = rht_inverse(&fwd, &spec).map_err(|e| e.to_string())?;
            let err = back
                .padded()
                .iter()
                .zip(v.padded())
                .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                .sum::<f64>()
                .sqrt();
            worst_trip = worst_trip.max(err / norm);
        }
    }
    ensure(worst_trip <= 1e-6, || format!("round trip error {worst_trip:.2e}"))?;
    ensure(worst_norm <= 1e-6, || format!("norm drift {worst_norm:.2e}"))?;
    within(Duration::from_secs(30), start)?;
    Ok(format!("round trip {worst_trip:.1e}, norm drift {worst_norm:.1e}"))
}

fn quantization_unbiased() -> Outcome {
    let start = Instant::now();
    let draws = 100_000u32;
    let mut worst = 0f64;
    for q in [2u32, 4, 8] {
        let mut rng = SeedSpec::new(3).shared("acceptance-quant", u64::from(q));
        let grid = Grid::new((-1.5, 2.5), q);
        for _ in 0..10 {
            let x: f32 = rng.random_range(-1.5..2.5);
            let (mut s, mut s2) = (0f64, 0f64);
            for _ in 0..draws {
                let v = grid.value(i64::from(grid.code(x, rng.random::<f64>())));
                s += v;
                s2 += v * v;
            }
            let m = s / f64::from(draws);
            let var = (s2 / f64::from(draws) - m * m).max(0.0);
            // analytic per-draw variance of stochastic rounding
            let pos = (f64::from(x) - grid.min) / grid.step();
            let p = pos - pos.floor();
            let sigma = grid.step() * (p * (1.0 - p)).sqrt() / f64::from(draws).sqrt();
            let dev = (m - f64::from(x)).abs();
            ensure(dev <= 3.0 * sigma + 1e-9, || {
                format!("q={q} x={x}: mean {m} off by {dev:.2e}, 3 sigma = {:.2e}", 3.0 * sigma)
            })?;
            ensure((var.sqrt() - sigma * f64::from(draws).sqrt()).abs() <= 0.05 * grid.step(), || {
                format!("q={q} x={x}: variance {var:.3e} does not match p(1-p) step^2")
            })?;
            if sigma > 0.0 {
                worst = worst.max(dev / sigma);
            }
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("30 points, worst deviation {worst:.2} sigma"))
}

fn nmse_trend() -> Outcome {
    let start = Instant::now();
    let budgets = [0.5, 2.0, 8.0];
    let mut cfg = ExperimentConfig::default();
    cfg.gradients.rho = 0.99;
    cfg.nmse_sweep.seeds = 20;
    cfg.nmse_sweep.rounds = 20;
    cfg.schemes = vec![
        SchemeEntry::new(SchemeKind::Topk).with_budgets(&budgets),
        SchemeEntry::new(SchemeKind::Topkc).with_budgets(&budgets),
        SchemeEntry::new(SchemeKind::TopkcPermuted).with_budgets(&budgets),
    ];
    let rows = cli::nmse_sweep(&cfg).map_err(|e| e.to_string())?;
    let per_seed = |label: String| -> Vec<f64> {
        rows.iter().filter(|r| r.scheme == label).map(|r| r.mean_nmse).collect()
    };
    let mut report = Vec::new();
    for b in budgets {
        let topk = per_seed(format!("topk-b{b}"));
        let topkc = per_seed(format!("topkc-b{b}"));
        let perm = per_seed(format!("topkc-permuted-b{b}"));
        ensure(topk.len() == 20 && topkc.len() == 20 && perm.len() == 20, || format!("missing rows at b={b}"))?;
        let wins = topkc.iter().zip(&perm).filter(|(c, p)| c < p).count();
        ensure(wins >= 18, || format!("b={b}: TopKC beat the permuted ablation in {wins}/20 seeds"))?;
        let (mk, mc, mp) = (mean(&topk).unwrap(), mean(&topkc).unwrap(), mean(&perm).unwrap());
        ensure(mc <= mk, || format!("b={b}: mean NMSE TopKC {mc:.4} > TopK {mk:.4}"))?;
        report.push(format!("b={b}: topkc {mc:.4} topk {mk:.4} permuted {mp:.4} ({wins}/20)"));
    }
    within(Duration::from_secs(300), start)?;
    Ok(report.join("; "))
}

fn saturation_trend() -> Outcome {
    let start = Instant::now();
    let d = 1 << 18;
    let group = WorkerGroup::new(4).map_err(|e| e.to_string())?;
    let (mut narrow, mut wide, mut clips, mut adds) = (Vec::new(), Vec::new(), 0u64, 0u64);
    for round in 0..8u64 {
        let seeds = SeedSpec::new(21);
        let grads = (0..4)
            .map(|w| pad_to_pow2(&gaussian(d, &mut seeds.worker("acceptance-sat", round, w))))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let ctx = RoundContext::new(group, seeds, round);
        let a = run_thc_round(&ctx, &grads, 4, 4, None).map_err(|e| e.to_string())?;
        let b = run_thc_round(&ctx, &grads, 4, 8, None).map_err(|e| e.to_string())?;
        ensure(b.overflow.clip_events == 0, || "wide accumulator clipped".into())?;
        clips += a.overflow.clip_events;
        adds += a.overflow.total_adds;
        narrow.push(a.nmse.ok_or("no NMSE")?);
        wide.push(b.nmse.ok_or("no NMSE")?);
    }
    let rate = overflow_rate(&gradcomp::metrics::OverflowStats {
        clip_events: clips,
        total_adds: adds,
        code_sigma: None,
    });
    let (n4, n8) = (mean(&narrow).unwrap(), mean(&wide).unwrap());
    let rel = (n4 - n8).abs() / n8;
    ensure(rate < 0.01, || format!("overflow rate {rate:.4}"))?;
    ensure(rel <= 0.10, || format!("NMSE b=4 {n4:.4} vs b=8 {n8:.4} ({:.1}%)", 100.0 * rel))?;
    within(Duration::from_secs(120), start)?;
    Ok(format!(
        "overflow {:.3}%, NMSE b=4 {n4:.4} vs b=8 {n8:.4} ({:.1}%)",
        100.0 * rate,
        100.0 * rel
    ))
}

fn frob(m: &DMatrix<f32>) -> f64 {
    m.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
}

fn low_rank_step(m: &DMatrix<f32>, q: &DMatrix<f32>, seeds: &SeedSpec) -> Result<(DMatrix<f32>, DMatrix<f32>), String> {
    let payload = powersgd_compress(m, q.ncols(), q, seeds, 0).map_err(|e| e.to_string())?;
    let CompressedPayload::LowRank { p, .. } = &payload else {
        return Err("expected a low-rank payload".into());
    };
    let p = p.clone();
    Ok((powersgd_decompress(&payload).map_err(|e| e.to_string())?, p))
}

fn powersgd_suite() -> Outcome {
    let start = Instant::now();
    let (mut worst_exact, mut worst_orth) = (0f64, 0f64);
    for seed in 0..20u64 {
        let seeds = SeedSpec::new(seed);
        let mut rng = seeds.shared("acceptance-psgd", 0);
        let mut randn = |r, c| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
        // decaying spectrum so the ranks are distinguishable
        let (u, v): (DMatrix<f32>, DMatrix<f32>) = (randn(64, 64), randn(64, 64));
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(64, |i, _| 0.8f32.powi(i as i32)));
        let m = &u * s * v.transpose();
        let q16: DMatrix<f32> = randn(64, 16);
        let mut last = f64::INFINITY;
        for r in [1usize, 4, 16] {
            let q = q16.columns(0, r).into_owned();
            let (approx, p) = low_rank_step(&m, &q, &seeds)?;
            let err = frob(&(&m - &approx)) / frob(&m);
            ensure(err <= last + 1e-6, || format!("seed {seed}: error rose to {err:.4} at rank {r}"))?;
            last = err;
            let gram = p.transpose() * &p - DMatrix::<f32>::identity(r, r);
            worst_orth = worst_orth.max(gram.iter().fold(0f64, |a, &x| a.max(f64::from(x).abs())));

            // a rank-r input is recovered exactly
            let low = randn(64, r) * randn(64, r).transpose();
            let (rec, _) = low_rank_step(&low, &q, &seeds)?;
            worst_exact = worst_exact.max(frob(&(&low - &rec)) / frob(&low));
        }
    }
    // a rank-deficient P still comes back orthonormal
    let mut fill = SeedSpec::new(5).shared("acceptance-fill", 0);
    let p = DMatrix::from_fn(64, 4, |i, j| if j < 2 { (i + j) as f32 } else { i as f32 });
    let p_hat = orthogonalize(&p, &mut fill);
    let gram = p_hat.transpose() * &p_hat - DMatrix::<f32>::identity(4, 4);
    worst_orth = worst_orth.max(gram.iter().fold(0f64, |a, &x| a.max(f64::from(x).abs())));
    ensure(worst_exact <= 1e-4, || format!("rank-r recovery error {worst_exact:.2e}"))?;
    ensure(worst_orth <= 1e-5, || format!("orthogonality residual {worst_orth:.2e}"))?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("recovery {worst_exact:.1e}, orthogonality {worst_orth:.1e}"))
}

fn tta_ordering() -> Outcome {
    let start = Instant::now();
    let threshold = 0.8;
    let mut report = Vec::new();
    for seed in 1..=3u64 {
        let mut cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        cfg.train.thresholds = vec![threshold];
        cfg.schemes = vec![
            SchemeEntry::new(SchemeKind::Topkc).with_budgets(&[0.5, 2.0]),
            SchemeEntry::new(SchemeKind::DenseFp16),
            SchemeEntry::new(SchemeKind::DenseFp32),
        ];
        let task = cli::build_task(&cfg).map_err(|e| e.to_string())?;
        let runs = cli::train_all(&cfg, &task).map_err(|e| e.to_string())?;
        let get = |label: &str| runs.iter().map(|(_, s)| s).find(|s| s.scheme == label).unwrap();
        let tta = |label: &str| get(label).time_to[&format!("{threshold}")].unwrap_or(f64::INFINITY);
        let (fp16, fp32, moderate, aggressive) =
            (tta("dense-fp16"), tta("dense-fp32"), tta("topkc-b2"), tta("topkc-b0.5"));
        ensure(fp16 < fp32, || format!("seed {seed}: fp16 {fp16:.2e} s not faster than fp32 {fp32:.2e} s"))?;
        ensure(moderate < fp16, || format!("seed {seed}: topkc b=2 {moderate:.2e} s does not beat fp16 {fp16:.2e} s"))?;
        let cheaper = get("topkc-b0.5").mean_round_seconds < get("topkc-b2").mean_round_seconds;
        ensure(cheaper, || format!("seed {seed}: b=0.5 rounds are not cheaper"))?;
        ensure(aggressive > moderate, || {
            format!("seed {seed}: b=0.5 reached {threshold} at {aggressive:.2e} s, before b=2 at {moderate:.2e} s")
        })?;
        report.push(format!(
            "seed {seed}: fp32 {:.2} ms, fp16 {:.2} ms, b=2 {:.2} ms, b=0.5 {:.2} ms",
            fp32 * 1e3,
            fp16 * 1e3,
            moderate * 1e3,
            aggressive * 1e3
        ));
    }
    within(Duration::from_secs(600), start)?;
    Ok(report.join("; "))
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::default();
    cfg.gradients.d = 8192;
    cfg.nmse_sweep.seeds = 2;
    cfg.nmse_sweep.rounds = 3;
    cfg.train.rounds = 15;
    cfg.collective_check.settings.retain(|s| s.d <= 1 << 16);
    cfg.collective_check.oracle_instances = 10;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut compared = 0;
    let mut outputs = Vec::new();
    for dir in &dirs {
        cfg.out = dir.path().to_path_buf();
        let mut files = Vec::new();
        files.extend(cli::cmd_nmse_sweep(&cfg).map_err(|e| e.to_string())?.files);
        files.extend(cli::cmd_train(&cfg).map_err(|e| e.to_string())?.files);
        files.extend(cli::cmd_collective_check(&cfg).map_err(|e| e.to_string())?.files);
        let mut named: Vec<(String, Vec<u8>)> = files
            .iter()
            .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(f).unwrap()))
            .collect();
        named.sort();
        outputs.push(named);
    }
    ensure(outputs[0].len() == outputs[1].len(), || "different file sets".into())?;
    for ((na, a), (nb, b)) in outputs[0].iter().zip(&outputs[1]) {
        ensure(na == nb && a == b, || format!("{na} differs between runs"))?;
        compared += 1;
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("{compared} artifacts bitwise identical"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("bit accounting", bit_accounting),
        ("collective correctness", collective_correctness),
        ("transform suite", transform_suite),
        ("quantization unbiasedness", quantization_unbiased),
        ("NMSE trend", nmse_trend),
        ("saturation trend", saturation_trend),
        ("PowerSGD", powersgd_suite),
        ("time-to-accuracy ordering", tta_ordering),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
