//! Ring all-reduce with a traffic ledger. Every message is accounted, so
//! the per-worker egress matches `2 (n - 1) d / n` elements.
//!
//! ```bash
//! cargo run --example ring_ledger
//! ```

use gradcomp::collectives::{all_gather, ring_all_reduce, ReduceOp, TrafficLedger, Wire, WorkerGroup};

fn main() -> gradcomp::Result<()> {
    let n = 4;
    let group = WorkerGroup::new(n)?;
    let inputs: Vec<Vec<f32>> = (0..n).map(|w| (0..10).map(|i| (w * 10 + i) as f32).collect()).collect();
    let mut ledger = TrafficLedger::new();

    let sum = ring_all_reduce(&group, &inputs, ReduceOp::FloatSum, Wire::FP32, "sum", &mut ledger)?;
    println!("sum: {:?}", sum.outputs[0]);
    let max = ring_all_reduce(&group, &inputs, ReduceOp::ElemMax, Wire::FP16, "max", &mut ledger)?;
    println!("max: {:?}", max.outputs[0]);

    // 4-bit saturating sum: 7 + 7 clips at 7
    let codes: Vec<Vec<i32>> = (0..n).map(|_| vec![7, -3, 1]).collect();
    let sat = ring_all_reduce(&group, &codes, ReduceOp::SatIntSum { bits: 4 }, Wire::int(4), "sat", &mut ledger)?;
    println!("sat4: {:?}, {} clip events", sat.outputs[0], sat.stats.clip_events);

    let parts: Vec<Vec<u32>> = (0..n as u32).map(|w| vec![w; w as usize + 1]).collect();
    let bits: Vec<u64> = parts.iter().map(|p| 32 * p.len() as u64).collect();
    let gathered = all_gather(&group, &parts, &bits, "gather", &mut ledger)?;
    println!("gather: {:?}", gathered[0]);

    println!("max worker egress: {} bits", ledger.max_worker_egress());
    ledger.write_csv(std::io::stdout())
}
