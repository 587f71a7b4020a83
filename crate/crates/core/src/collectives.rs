//! Deterministic in-process ring collectives with exact traffic accounting.
//!
//! The simulator is message accurate: every block a worker forwards is
//! recorded in a [`TrafficLedger`] under the caller's phase label. It is not
//! time accurate; [`crate::metrics::simulated_round_time`] turns ledgers
//! into seconds.
//!
//! Ring all-reduce splits the (padded) buffer into `n` blocks. Block `c`
//! starts at its owner, worker `c`, and travels `c -> c+1 -> ... -> c-1`,
//! each hop combining the incoming partial with the local contribution
//! (`partial ⊕ own`). After `n - 1` steps worker `c - 1` holds the finished
//! block, and `n - 1` all-gather steps distribute it. The reduction order is
//! therefore fixed, which matters for the non-associative saturating sum.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::metrics::OverflowStats;
use crate::vectorcore::fp16_round_trip;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerGroup {
    n: usize,
}

impl WorkerGroup {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::out_of_range("workers", 0.0, ">= 1"));
        }
        Ok(Self { n })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn next(&self, worker: usize) -> usize {
        (worker + 1) % self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    FloatSum,
    /// Exact (wide accumulator) integer sum.
    IntSum,
    /// Saturating sum clamped to `[-2^(b-1)+1, 2^(b-1)-1]` after every add.
    SatIntSum { bits: u32 },
    ElemMin,
    ElemMax,
}

impl ReduceOp {
    pub fn name(&self) -> &'static str {
        match self {
            ReduceOp::FloatSum => "FloatSum",
            ReduceOp::IntSum => "IntSum",
            ReduceOp::SatIntSum { .. } => "SatIntSum",
            ReduceOp::ElemMin => "ElemMin",
            ReduceOp::ElemMax => "ElemMax",
        }
    }
}

/// Width and rounding of values while they are on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wire {
    pub element_bits: u32,
    /// Re-round every transmitted float to half precision.
    pub fp16: bool,
}

impl Wire {
    pub const FP32: Wire = Wire {
        element_bits: 32,
        fp16: false,
    };
    pub const FP16: Wire = Wire {
        element_bits: 16,
        fp16: true,
    };

    pub fn int(bits: u32) -> Wire {
        Wire {
            element_bits: bits,
            fp16: false,
        }
    }
}

/// Symmetric saturation bound `2^(b-1) - 1`.
pub fn sat_bound(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// `min(2^(b-1)-1, max(-2^(b-1)+1, x+y))`.
pub fn sat(x: i32, y: i32, bits: u32) -> i32 {
    let bound = sat_bound(bits);
    (i64::from(x) + i64::from(y)).clamp(-bound, bound) as i32
}

/// Element types the ring can carry.
pub trait RingElement: Copy + PartialEq + fmt::Debug {
    const NAME: &'static str;

    fn neutral(op: ReduceOp) -> Result<Self>;

    /// `partial ⊕ own`; returns whether the add clipped.
    fn combine(op: ReduceOp, partial: Self, own: Self) -> (Self, bool);

    fn on_wire(self, wire: Wire) -> Self;
}

impl RingElement for f32 {
    const NAME: &'static str = "f32";

    fn neutral(op: ReduceOp) -> Result<Self> {
        match op {
            ReduceOp::FloatSum => Ok(0.0),
            ReduceOp::ElemMin => Ok(f32::INFINITY),
            ReduceOp::ElemMax => Ok(f32::NEG_INFINITY),
            _ => Err(Error::UnsupportedOp {
                op: op.name(),
                element: Self::NAME,
            }),
        }
    }

    fn combine(op: ReduceOp, partial: Self, own: Self) -> (Self, bool) {
        let v = match op {
            ReduceOp::ElemMin => partial.min(own),
            ReduceOp::ElemMax => partial.max(own),
            _ => partial + own,
        };
        (v, false)
    }

    fn on_wire(self, wire: Wire) -> Self {
        if wire.fp16 && self.is_finite() {
            fp16_round_trip(self)
        } else {
            self
        }
    }
}

impl RingElement for i32 {
    const NAME: &'static str = "i32";

    fn neutral(op: ReduceOp) -> Result<Self> {
        match op {
            ReduceOp::IntSum | ReduceOp::SatIntSum { .. } => Ok(0),
            ReduceOp::ElemMin => Ok(i32::MAX),
            ReduceOp::ElemMax => Ok(i32::MIN),
            ReduceOp::FloatSum => Err(Error::UnsupportedOp {
                op: op.name(),
                element: Self::NAME,
            }),
        }
    }

    fn combine(op: ReduceOp, partial: Self, own: Self) -> (Self, bool) {
        match op {
            ReduceOp::SatIntSum { bits } => {
                let exact = i64::from(partial) + i64::from(own);
                let bound = sat_bound(bits);
                (exact.clamp(-bound, bound) as i32, exact.abs() > bound)
            }
            ReduceOp::ElemMin => (partial.min(own), false),
            ReduceOp::ElemMax => (partial.max(own), false),
            _ => (partial + own, false),
        }
    }

    fn on_wire(self, _wire: Wire) -> Self {
        self
    }
}

/// Outcome of one all-reduce.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduced<T> {
    /// One buffer per worker; all equal.
    pub outputs: Vec<Vec<T>>,
    pub stats: OverflowStats,
}

impl<T: Clone> Reduced<T> {
    /// Worker 0's copy.
    pub fn into_first(self) -> Vec<T> {
        self.outputs.into_iter().next().unwrap_or_default()
    }
}

/// Ring all-reduce of one equal-length buffer per worker.
pub fn ring_all_reduce<T: RingElement>(
    group: &WorkerGroup,
    inputs: &[Vec<T>],
    op: ReduceOp,
    wire: Wire,
    phase: &str,
    ledger: &mut TrafficLedger,
) -> Result<Reduced<T>> {
    let n = group.size();
    if inputs.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: inputs.len(),
        });
    }
    let len = inputs[0].len();
    if let Some(bad) = inputs.iter().find(|b| b.len() != len) {
        return Err(Error::LengthMismatch {
            expected: len,
            actual: bad.len(),
        });
    }
    if let ReduceOp::SatIntSum { bits } = op {
        if !(2..=32).contains(&bits) {
            return Err(Error::out_of_range("saturation bits", bits, "2..=32"));
        }
    }
    let neutral = T::neutral(op)?;
    let bits = u64::from(wire.element_bits);
    for w in 0..n {
        ledger.record_input(phase, n, w, len as u64 * bits);
    }

    let block = len.div_ceil(n);
    let mut state: Vec<Vec<T>> = inputs
        .iter()
        .map(|b| {
            let mut v = b.clone();
            v.resize(block * n, neutral);
            v
        })
        .collect();
    let mut stats = OverflowStats::default();
    if n == 1 {
        state[0].truncate(len);
        return Ok(Reduced {
            outputs: state,
            stats,
        });
    }
    let block_bits = block as u64 * bits;

    // reduce-scatter
    for step in 0..n - 1 {
        for sender in 0..n {
            let receiver = group.next(sender);
            let blk = (sender + n - step) % n;
            let range = blk * block..(blk + 1) * block;
            ledger.record_message(phase, n, sender, receiver, block_bits);
            for idx in range {
                let msg = state[sender][idx].on_wire(wire);
                let own = state[receiver][idx];
                let (v, clipped) = T::combine(op, msg, own);
                state[receiver][idx] = v;
                if idx < len {
                    stats.total_adds += 1;
                    stats.clip_events += u64::from(clipped);
                }
            }
        }
    }
    // the finished block is rounded once so the holder keeps what it sends
    for holder in 0..n {
        let blk = group.next(holder);
        for idx in blk * block..(blk + 1) * block {
            state[holder][idx] = state[holder][idx].on_wire(wire);
        }
    }
    // all-gather
    for step in 0..n - 1 {
        for sender in 0..n {
            let receiver = group.next(sender);
            let blk = (sender + 1 + n - step) % n;
            ledger.record_message(phase, n, sender, receiver, block_bits);
            for idx in blk * block..(blk + 1) * block {
                state[receiver][idx] = state[sender][idx];
            }
        }
    }
    for buf in &mut state {
        buf.truncate(len);
    }
    Ok(Reduced {
        outputs: state,
        stats,
    })
}

/// Ring all-gather of one payload per worker. Returns, for every worker, all
/// `n` payloads in worker order. Payload sizes may differ; a worker forwards
/// every payload except the one owned by its successor.
pub fn all_gather<T: Clone>(
    group: &WorkerGroup,
    payloads: &[T],
    payload_bits: &[u64],
    phase: &str,
    ledger: &mut TrafficLedger,
) -> Result<Vec<Vec<T>>> {
    let n = group.size();
    if payloads.len() != n || payload_bits.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: payloads.len().min(payload_bits.len()),
        });
    }
    for (w, &bits) in payload_bits.iter().enumerate() {
        ledger.record_input(phase, n, w, bits);
    }
    let mut held: Vec<Vec<Option<T>>> = (0..n)
        .map(|w| {
            let mut v = vec![None; n];
            v[w] = Some(payloads[w].clone());
            v
        })
        .collect();
    for step in 0..n.saturating_sub(1) {
        for sender in 0..n {
            let receiver = group.next(sender);
            let origin = (sender + n - step) % n;
            ledger.record_message(phase, n, sender, receiver, payload_bits[origin]);
            let item = held[sender][origin].clone();
            held[receiver][origin] = item;
        }
    }
    Ok(held
        .into_iter()
        .map(|v| v.into_iter().map(|p| p.expect("ring all-gather delivers every payload")).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerTraffic {
    pub bits_sent: u64,
    pub bits_received: u64,
    /// Size of this worker's collective input (the `b · d` of the phase).
    pub input_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseTraffic {
    pub label: String,
    pub workers: Vec<WorkerTraffic>,
}

/// Per-phase, per-worker bit counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficLedger {
    phases: Vec<PhaseTraffic>,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn phase_mut(&mut self, label: &str, n: usize) -> &mut PhaseTraffic {
        let pos = match self.phases.iter().position(|p| p.label == label) {
            Some(pos) => pos,
            None => {
                self.phases.push(PhaseTraffic {
                    label: label.to_string(),
                    workers: vec![WorkerTraffic::default(); n],
                });
                self.phases.len() - 1
            }
        };
        let phase = &mut self.phases[pos];
        if phase.workers.len() < n {
            phase.workers.resize(n, WorkerTraffic::default());
        }
        phase
    }

    pub fn record_message(&mut self, phase: &str, n: usize, from: usize, to: usize, bits: u64) {
        let p = self.phase_mut(phase, n);
        p.workers[from].bits_sent += bits;
        p.workers[to].bits_received += bits;
    }

    pub fn record_input(&mut self, phase: &str, n: usize, worker: usize, bits: u64) {
        self.phase_mut(phase, n).workers[worker].input_bits += bits;
    }

    pub fn phases(&self) -> &[PhaseTraffic] {
        &self.phases
    }

    pub fn phase(&self, label: &str) -> Option<&PhaseTraffic> {
        self.phases.iter().find(|p| p.label == label)
    }

    pub fn num_workers(&self) -> usize {
        self.phases.iter().map(|p| p.workers.len()).max().unwrap_or(0)
    }

    fn sum_worker(&self, worker: usize, f: impl Fn(&WorkerTraffic) -> u64) -> u64 {
        self.phases
            .iter()
            .filter_map(|p| p.workers.get(worker))
            .map(f)
            .sum()
    }

    pub fn worker_sent(&self, worker: usize) -> u64 {
        self.sum_worker(worker, |t| t.bits_sent)
    }

    pub fn worker_received(&self, worker: usize) -> u64 {
        self.sum_worker(worker, |t| t.bits_received)
    }

    pub fn worker_input(&self, worker: usize) -> u64 {
        self.sum_worker(worker, |t| t.input_bits)
    }

    pub fn max_worker_egress(&self) -> u64 {
        (0..self.num_workers())
            .map(|w| self.worker_sent(w))
            .max()
            .unwrap_or(0)
    }

    pub fn total_sent(&self) -> u64 {
        (0..self.num_workers()).map(|w| self.worker_sent(w)).sum()
    }

    pub fn total_received(&self) -> u64 {
        (0..self.num_workers()).map(|w| self.worker_received(w)).sum()
    }

    /// Bits per coordinate `b`: collective input bits of the busiest worker / d.
    pub fn input_bits_per_coord(&self, d: usize) -> f64 {
        let max_input = (0..self.num_workers())
            .map(|w| self.worker_input(w))
            .max()
            .unwrap_or(0);
        max_input as f64 / d as f64
    }

    /// One-direction egress of the busiest worker / d.
    pub fn egress_bits_per_coord(&self, d: usize) -> f64 {
        self.max_worker_egress() as f64 / d as f64
    }

    pub fn merge(&mut self, other: &TrafficLedger) {
        for p in &other.phases {
            let n = p.workers.len();
            let mine = self.phase_mut(&p.label, n);
            for (a, b) in mine.workers.iter_mut().zip(&p.workers) {
                a.bits_sent += b.bits_sent;
                a.bits_received += b.bits_received;
                a.input_bits += b.input_bits;
            }
        }
    }

    /// `phase,worker,bits_sent,bits_received` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["phase", "worker", "bits_sent", "bits_received"])?;
        for p in &self.phases {
            for (i, t) in p.workers.iter().enumerate() {
                w.write_record([
                    p.label.clone(),
                    i.to_string(),
                    t.bits_sent.to_string(),
                    t.bits_received.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
