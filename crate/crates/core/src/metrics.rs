//! NMSE, overflow rate and the analytical time model that turns traffic
//! ledgers into simulated seconds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::collectives::TrafficLedger;
use crate::error::{Error, Result};

/// `‖estimate − reference‖² / ‖reference‖²` over the logical coordinates.
pub fn nmse(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            actual: estimate.len(),
        });
    }
    let (mut err, mut norm) = (0f64, 0f64);
    for (&e, &r) in estimate.iter().zip(reference) {
        let diff = f64::from(e) - f64::from(r);
        err += diff * diff;
        norm += f64::from(r) * f64::from(r);
    }
    if norm == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(err / norm)
}

/// Saturation diagnostics of one or more integer all-reduces.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OverflowStats {
    pub clip_events: u64,
    pub total_adds: u64,
    /// Empirical standard deviation of the quantization codes, when measured.
    pub code_sigma: Option<f64>,
}

impl OverflowStats {
    pub fn merge(&mut self, other: &OverflowStats) {
        self.clip_events += other.clip_events;
        self.total_adds += other.total_adds;
        if other.code_sigma.is_some() {
            self.code_sigma = other.code_sigma;
        }
    }
}

/// `clip_events / total_adds`, or 0 when nothing was added.
pub fn overflow_rate(stats: &OverflowStats) -> f64 {
    if stats.total_adds == 0 {
        0.0
    } else {
        stats.clip_events as f64 / stats.total_adds as f64
    }
}

/// Analytical per-round cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeModel {
    pub bandwidth_bits_per_s: f64,
    /// Forward/backward time of one round, shared by every scheme.
    pub compute_s_per_round: f64,
    /// Extra per-round compression compute keyed by scheme label.
    pub compression_compute_s: BTreeMap<String, f64>,
}

impl Default for TimeModel {
    fn default() -> Self {
        Self {
            bandwidth_bits_per_s: 1e9,
            compute_s_per_round: 0.0,
            compression_compute_s: BTreeMap::new(),
        }
    }
}

impl TimeModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth_bits_per_s.is_finite() && self.bandwidth_bits_per_s > 0.0) {
            return Err(Error::Config(format!(
                "time_model.bandwidth_bits_per_s must be positive, got {}",
                self.bandwidth_bits_per_s
            )));
        }
        if !(self.compute_s_per_round.is_finite() && self.compute_s_per_round >= 0.0) {
            return Err(Error::Config(format!(
                "time_model.compute_s_per_round must be non-negative, got {}",
                self.compute_s_per_round
            )));
        }
        for (k, v) in &self.compression_compute_s {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::Config(format!(
                    "time_model.compression_compute_s.{k} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn compression_compute(&self, scheme: &str) -> f64 {
        self.compression_compute_s.get(scheme).copied().unwrap_or(0.0)
    }
}

/// `compute + compression_compute(scheme) + max worker egress / bandwidth`.
pub fn simulated_round_time(ledger: &TrafficLedger, model: &TimeModel, scheme: &str) -> f64 {
    model.compute_s_per_round
        + model.compression_compute(scheme)
        + ledger.max_worker_egress() as f64 / model.bandwidth_bits_per_s
}

/// Top-`k` coordinates of the exactly summed gradient by magnitude, lower
/// index first on ties. Only used as an offline reference.
pub fn global_topk_oracle(worker_grads: &[&[f32]], k: usize) -> Result<Vec<usize>> {
    let d = worker_grads.first().map_or(0, |g| g.len());
    if d == 0 {
        return Err(Error::Empty);
    }
    let mut sum = vec![0f64; d];
    for g in worker_grads {
        if g.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                actual: g.len(),
            });
        }
        for (s, &x) in sum.iter_mut().zip(g.iter()) {
            *s += f64::from(x);
        }
    }
    let summed: Vec<f32> = sum.into_iter().map(|x| x as f32).collect();
    crate::compressors::topk_select(&summed, k)
}

/// Arithmetic mean, `None` for an empty slice.
pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collectives::{ring_all_reduce, ReduceOp, Wire, WorkerGroup};
    use proptest::prelude::*;

    #[test]
    fn nmse_examples() {
        assert_eq!(nmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(nmse(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!((nmse(&[3.0, 0.0], &[3.0, 4.0]).unwrap() - 0.64).abs() < 1e-12);
        assert!(matches!(nmse(&[1.0], &[0.0]), Err(Error::ZeroReference)));
        assert!(nmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn overflow_rate_examples() {
        let none = OverflowStats {
            clip_events: 0,
            total_adds: 10,
            code_sigma: None,
        };
        assert_eq!(overflow_rate(&none), 0.0);
        let all = OverflowStats {
            clip_events: 10,
            total_adds: 10,
            code_sigma: None,
        };
        assert_eq!(overflow_rate(&all), 1.0);
    }

    fn dense_ledger(n: usize, len: usize, wire: Wire) -> TrafficLedger {
        let g = WorkerGroup::new(n).unwrap();
        let mut ledger = TrafficLedger::new();
        let inputs = vec![vec![0f32; len]; n];
        ring_all_reduce(&g, &inputs, ReduceOp::FloatSum, wire, "dense", &mut ledger).unwrap();
        ledger
    }

    #[test]
    fn round_time_examples() {
        let model = TimeModel {
            bandwidth_bits_per_s: 1e9,
            compute_s_per_round: 0.25,
            compression_compute_s: [("x".to_string(), 0.5)].into(),
        };
        assert_eq!(simulated_round_time(&TrafficLedger::new(), &model, "x"), 0.75);
        assert_eq!(simulated_round_time(&TrafficLedger::new(), &model, "y"), 0.25);

        let model = TimeModel::default();
        let d = 1 << 20;
        let t32 = simulated_round_time(&dense_ledger(4, d, Wire::FP32), &model, "fp32");
        let t16 = simulated_round_time(&dense_ledger(4, d, Wire::FP16), &model, "fp16");
        assert_eq!(t16 * 2.0, t32);
        let closed = 2.0 * 0.75 * d as f64 * 32.0 / 1e9;
        assert!((t32 - closed).abs() < 1e-12);
        assert!((t32 - 0.0503).abs() < 1e-4);
    }

    #[test]
    fn global_topk_examples() {
        let a = [3.0f32, -5.0, 1.0, 2.0];
        assert_eq!(global_topk_oracle(&[&a], 2).unwrap(), crate::compressors::topk_select(&a, 2).unwrap());
        let b = [-3.0f32, 5.0, 0.0, 0.0];
        // coordinates 0 and 1 cancel, so they rank below 3 and 2
        assert_eq!(global_topk_oracle(&[&a, &b], 2).unwrap(), vec![3, 2]);
    }

    proptest! {
        #[test]
        fn nmse_scale_invariant(v in prop::collection::vec(-10f32..10.0, 2..50), alpha in 0.01f32..100.0) {
            let r: Vec<f32> = v.iter().map(|x| x + 1.0).collect();
            let e = v.clone();
            let base = nmse(&e, &r).unwrap();
            let se: Vec<f32> = e.iter().map(|x| x * alpha).collect();
            let sr: Vec<f32> = r.iter().map(|x| x * alpha).collect();
            let scaled = nmse(&se, &sr).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-9_f64.max(1e-5 * base));
        }

        #[test]
        fn round_time_monotone_in_bits(a in 1u64..1_000_000, b in 1u64..1_000_000) {
            let model = TimeModel { compute_s_per_round: 0.1, ..TimeModel::default() };
            let mut la = TrafficLedger::new();
            la.record_message("p", 2, 0, 1, a);
            let mut lb = TrafficLedger::new();
            lb.record_message("p", 2, 0, 1, b);
            let (ta, tb) = (simulated_round_time(&la, &model, "s"), simulated_round_time(&lb, &model, "s"));
            prop_assert_eq!(a < b, ta < tb);
        }
    }
}
