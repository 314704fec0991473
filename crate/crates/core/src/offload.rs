//! Expert-offload replay over routing traces.
//!
//! Each layer keeps exactly the experts of the previous token on the
//! accelerator. When a token selects a different set, the unused experts are
//! evicted (free) and the newly selected ones are swapped in, each costing
//! `expert_bytes / bandwidth` seconds. The first token's experts are loaded
//! once up front; that load is timed but is not a replacement.

use std::collections::BTreeSet;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experts::{per_expert_params, shared_param_count};
use crate::model::ModelConfig;
use crate::trace::RoutingTrace;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OffloadCostModel {
    pub expert_bytes: f64,
    /// Host to accelerator bytes per second.
    pub bandwidth: f64,
    pub compute_per_token: f64,
    /// Bytes of all non-expert parameters.
    pub shared_bytes: f64,
}

impl OffloadCostModel {
    pub fn new(expert_bytes: f64, bandwidth: f64, compute_per_token: f64, shared_bytes: f64) -> Result<Self> {
        let cost = Self {
            expert_bytes,
            bandwidth,
            compute_per_token,
            shared_bytes,
        };
        cost.validate()?;
        Ok(cost)
    }

    /// Byte sizes taken from a model layout.
    pub fn for_config(
        config: &ModelConfig,
        bytes_per_param: f64,
        bandwidth: f64,
        compute_per_token: f64,
    ) -> Result<Self> {
        let per_expert = per_expert_params(config.expert_kind, config.hidden, config.inter, config.rank);
        Self::new(
            per_expert as f64 * bytes_per_param,
            bandwidth,
            compute_per_token,
            shared_param_count(config) as f64 * bytes_per_param,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.expert_bytes) && ok(self.bandwidth) && ok(self.compute_per_token) && ok(self.shared_bytes) {
            Ok(())
        } else {
            Err(Error::Parameter(format!("cost model fields must be finite and positive: {self:?}")))
        }
    }

    /// Seconds to move one expert onto the accelerator.
    pub fn swap_secs(&self) -> f64 {
        self.expert_bytes / self.bandwidth
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OffloadReport {
    pub tokens: usize,
    pub exrep_pct: f64,
    pub swap_events: usize,
    /// Decode throughput; excludes the up-front expert load.
    pub tokens_per_sec: f64,
    pub peak_resident_bytes: u64,
    pub full_model_bytes: u64,
    pub delta_uniform_pct: f64,
    pub delta_uniform_per_layer: Vec<f64>,
    pub initial_load_secs: f64,
    /// Decode time plus the initial load.
    pub total_secs: f64,
    /// Largest resident-set size seen in any layer after any token.
    pub max_resident_experts: usize,
}

/// Replacements of one layer: experts selected at `t+1` that were not
/// resident after `t`, summed over tokens.
fn layer_replacements(selections: &[Vec<usize>]) -> usize {
    selections
        .windows(2)
        .map(|w| w[1].iter().filter(|e| !w[0].contains(e)).count())
        .sum()
}

/// Percentage of realized replacements, averaged over layers. Traces with
/// fewer than two tokens have no transitions and report 0.
pub fn exrep(trace: &RoutingTrace) -> f64 {
    let t = trace.tokens();
    if t < 2 || trace.num_layers() == 0 {
        warn!("exrep needs at least two tokens, got {t}");
        return 0.0;
    }
    let sum: f64 = trace
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let denom = (trace.k(l) * (t - 1)) as f64;
            100.0 * (layer_replacements(&layer.selections) as f64 / denom)
        })
        .sum();
    sum / trace.num_layers() as f64
}

/// Per layer: mean over experts of `|f_e − 1/E|` in percentage points,
/// where `f_e` is the share of all selections going to expert `e`.
pub fn delta_uniform(trace: &RoutingTrace) -> (f64, Vec<f64>) {
    let e = trace.num_experts();
    let per_layer: Vec<f64> = trace
        .layers()
        .iter()
        .map(|layer| {
            let mut counts = vec![0usize; e];
            let mut n = 0usize;
            for s in &layer.selections {
                for &x in s {
                    counts[x] += 1;
                    n += 1;
                }
            }
            if n == 0 {
                return 0.0;
            }
            let u = 1.0 / e as f64;
            100.0 * counts.iter().map(|&c| (c as f64 / n as f64 - u).abs()).sum::<f64>() / e as f64
        })
        .collect();
    let overall = if per_layer.is_empty() {
        0.0
    } else {
        per_layer.iter().sum::<f64>() / per_layer.len() as f64
    };
    (overall, per_layer)
}

/// Resident bytes with every expert loaded, or with only `K` per layer
/// loaded when `offloaded`.
pub fn peak_memory(config: &ModelConfig, offloaded: bool, bytes_per_param: f64) -> f64 {
    let per_expert = per_expert_params(config.expert_kind, config.hidden, config.inter, config.rank) as f64;
    let shared = shared_param_count(config) as f64;
    let experts = if offloaded { config.active } else { config.experts };
    (shared + (config.layers * experts) as f64 * per_expert) * bytes_per_param
}

/// Replays the offloading rule over `trace`.
pub fn replay_offload(trace: &RoutingTrace, cost: &OffloadCostModel) -> Result<OffloadReport> {
    cost.validate()?;
    let tokens = trace.tokens();
    if tokens == 0 || trace.num_layers() == 0 {
        return Err(Error::Trace {
            line: 0,
            message: "cannot replay an empty trace".into(),
        });
    }
    let swap = cost.swap_secs();
    let mut resident: Vec<BTreeSet<usize>> = Vec::with_capacity(trace.num_layers());
    let mut initial = 0usize;
    for l in 0..trace.num_layers() {
        let first: BTreeSet<usize> = trace.layer(l).selections[0].iter().copied().collect();
        initial += first.len();
        resident.push(first);
    }
    let mut max_resident = resident.iter().map(BTreeSet::len).max().unwrap_or(0);
    let mut swap_events = 0usize;
    let mut decode_secs = tokens as f64 * cost.compute_per_token;
    for t in 1..tokens {
        let mut swapped_in = 0usize;
        for (l, set) in resident.iter_mut().enumerate() {
            let want: BTreeSet<usize> = trace.layer(l).selections[t].iter().copied().collect();
            if want != *set {
                swapped_in += want.difference(set).count();
                *set = want;
            }
            max_resident = max_resident.max(set.len());
        }
        swap_events += swapped_in;
        decode_secs += swapped_in as f64 * swap;
    }
    let initial_load_secs = initial as f64 * swap;
    let (du, du_layers) = delta_uniform(trace);
    let layers = trace.num_layers() as f64;
    let peak = cost.shared_bytes + max_resident as f64 * layers * cost.expert_bytes;
    let full = cost.shared_bytes + trace.num_experts() as f64 * layers * cost.expert_bytes;
    Ok(OffloadReport {
        tokens,
        exrep_pct: exrep(trace),
        swap_events,
        tokens_per_sec: tokens as f64 / decode_secs,
        peak_resident_bytes: peak.round() as u64,
        full_model_bytes: full.round() as u64,
        delta_uniform_pct: du,
        delta_uniform_per_layer: du_layers,
        initial_load_secs,
        total_secs: decode_secs + initial_load_secs,
        max_resident_experts: max_resident,
    })
}

/// Replays several traces on worker threads; results keep input order.
pub fn replay_many(traces: &[RoutingTrace], cost: &OffloadCostModel) -> Vec<Result<OffloadReport>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = traces.iter().map(|t| s.spawn(move || replay_offload(t, cost))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Evaluation("replay thread panicked".into()))))
            .collect()
    })
}

/// Per-token throughput model implied by the replay:
/// `1/tps = compute_per_token + layers·K·(exrep/100)·swap_secs`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub compute_per_token: f64,
    pub swap_secs: f64,
}

/// Solves the two-point linear system for `(compute_per_token, swap_secs)`
/// from `(exrep_pct, tokens_per_sec)` observations.
pub fn calibrate(a: (f64, f64), b: (f64, f64), layers: usize, k: usize) -> Result<Calibration> {
    let lk = (layers * k) as f64;
    let (xa, ta) = (a.0 / 100.0, 1.0 / a.1);
    let (xb, tb) = (b.0 / 100.0, 1.0 / b.1);
    if (xa - xb).abs() < 1e-12 || lk == 0.0 {
        return Err(Error::Parameter("calibration points need distinct exrep values".into()));
    }
    let slope = (ta - tb) / (xa - xb);
    let swap_secs = slope / lk;
    let compute_per_token = ta - slope * xa;
    if !(swap_secs > 0.0 && compute_per_token > 0.0) {
        return Err(Error::Parameter(format!(
            "calibration gives non-positive costs (compute {compute_per_token}, swap {swap_secs})"
        )));
    }
    Ok(Calibration {
        compute_per_token,
        swap_secs,
    })
}

impl Calibration {
    /// A cost model realizing this calibration for experts of `expert_bytes`.
    pub fn cost_model(&self, expert_bytes: f64, shared_bytes: f64) -> Result<OffloadCostModel> {
        OffloadCostModel::new(expert_bytes, expert_bytes / self.swap_secs, self.compute_per_token, shared_bytes)
    }
}

/// Random trace in which every layer has exactly `replacements` swapped-in
/// experts over `tokens` tokens.
pub fn synthetic_trace(
    layers: usize,
    experts: usize,
    k: usize,
    tokens: usize,
    replacements: usize,
    rng: &mut impl Rng,
) -> Result<RoutingTrace> {
    if k == 0 || k > experts || tokens == 0 {
        return Err(Error::Parameter(format!("bad trace shape E={experts} K={k} T={tokens}")));
    }
    let per_step = k.min(experts - k);
    let capacity = per_step * (tokens - 1);
    if replacements > capacity {
        return Err(Error::Parameter(format!(
            "{replacements} replacements exceed the {capacity} possible"
        )));
    }
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        // spread the swaps over transitions, at most `per_step` each
        let mut slots: Vec<usize> = (0..tokens - 1).flat_map(|t| std::iter::repeat_n(t, per_step)).collect();
        slots.shuffle(rng);
        let mut swaps = vec![0usize; tokens.saturating_sub(1)];
        for &t in &slots[..replacements] {
            swaps[t] += 1;
        }
        let mut all: Vec<usize> = (0..experts).collect();
        all.shuffle(rng);
        let mut current: Vec<usize> = all[..k].to_vec();
        let mut selections = vec![current.clone()];
        for &m in &swaps {
            if m > 0 {
                let mut outside: Vec<usize> = (0..experts).filter(|e| !current.contains(e)).collect();
                outside.shuffle(rng);
                current.shuffle(rng);
                current.truncate(k - m);
                current.extend_from_slice(&outside[..m]);
            }
            selections.push(current.clone());
        }
        out.push(crate::trace::LayerTrace {
            selections,
            weights: None,
        });
    }
    RoutingTrace::new(experts, out)
}

/// Header of [`csv_row`].
pub const CSV_HEADER: [&str; 9] = [
    "trace",
    "tokens",
    "exrep_pct",
    "swap_events",
    "tokens_per_sec",
    "delta_uniform_pct",
    "peak_resident_bytes",
    "initial_load_secs",
    "total_secs",
];

pub fn csv_row(name: &str, r: &OffloadReport) -> [String; 9] {
    [
        name.to_string(),
        r.tokens.to_string(),
        format!("{:.4}", r.exrep_pct),
        r.swap_events.to_string(),
        format!("{:.6}", r.tokens_per_sec),
        format!("{:.4}", r.delta_uniform_pct),
        r.peak_resident_bytes.to_string(),
        format!("{:.6}", r.initial_load_secs),
        format!("{:.6}", r.total_secs),
    ]
}

/// Writes the header and one row per named report.
pub fn write_csv(w: impl std::io::Write, reports: &[(String, OffloadReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let map = |e: csv::Error| Error::Evaluation(e.to_string());
    out.write_record(CSV_HEADER).map_err(map)?;
    for (name, r) in reports {
        out.write_record(csv_row(name, r)).map_err(map)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::hard_replacements;
    use crate::trace::LayerTrace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_layer(experts: usize, selections: Vec<Vec<usize>>) -> RoutingTrace {
        RoutingTrace::new(
            experts,
            vec![LayerTrace {
                selections,
                weights: None,
            }],
        )
        .unwrap()
    }

    fn cost() -> OffloadCostModel {
        OffloadCostModel::new(1000.0, 10_000.0, 0.01, 5000.0).unwrap()
    }

    #[test]
    fn constant_trace_runs_at_compute_speed() {
        let r = replay_offload(&one_layer(4, vec![vec![1, 2]; 10]), &cost()).unwrap();
        assert_eq!(r.swap_events, 0);
        assert_eq!(r.tokens_per_sec, 1.0 / 0.01);
        assert_eq!(r.exrep_pct, 0.0);
        assert!((r.initial_load_secs - 0.2).abs() < 1e-12);
        assert!((r.total_secs - 0.3).abs() < 1e-12);
    }

    #[test]
    fn alternating_hand_replay() {
        let trace = one_layer(2, vec![vec![0], vec![1], vec![0]]);
        let r = replay_offload(&trace, &cost()).unwrap();
        assert_eq!(r.swap_events, 2);
        assert!((r.tokens_per_sec - 3.0 / (0.03 + 2.0 * 0.1)).abs() < 1e-9);
        assert_eq!(r.exrep_pct, 100.0);
        assert_eq!(r.max_resident_experts, 1);
    }

    #[test]
    fn reordered_selection_is_not_a_swap() {
        let r = replay_offload(&one_layer(4, vec![vec![1, 2], vec![2, 1]]), &cost()).unwrap();
        assert_eq!(r.swap_events, 0);
    }

    #[test]
    fn empty_trace_is_an_error() {
        let empty = RoutingTrace::new(4, vec![LayerTrace::default()]).unwrap();
        assert!(replay_offload(&empty, &cost()).is_err());
        assert!(OffloadCostModel::new(1.0, 0.0, 1.0, 1.0).is_err());
        assert_eq!(exrep(&one_layer(4, vec![vec![1]])), 0.0);
    }

    fn random_trace(rng: &mut ChaCha8Rng) -> RoutingTrace {
        let e = rng.gen_range(2..=8);
        let k = rng.gen_range(1..=e.min(4));
        let t = rng.gen_range(1..=64);
        let selections = (0..t)
            .map(|_| {
                let mut all: Vec<usize> = (0..e).collect();
                all.shuffle(rng);
                all.truncate(k);
                all
            })
            .collect();
        one_layer(e, selections)
    }

    #[test]
    fn swap_events_equal_half_the_hard_transitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..1000 {
            let trace = random_trace(&mut rng);
            let (h, hn) = hard_replacements(&trace.selected(0).unwrap());
            let r = replay_offload(&trace, &cost()).unwrap();
            assert_eq!(r.swap_events, h / 2);
            assert!(r.max_resident_experts <= trace.k(0));
            if trace.tokens() >= 2 {
                assert_eq!(r.exrep_pct, 100.0 * hn);
            }
            assert!((0.0..=100.0).contains(&r.exrep_pct));
            assert!(r.peak_resident_bytes <= r.full_model_bytes);
        }
    }

    #[test]
    fn throughput_falls_with_every_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut last = f64::INFINITY;
        for n in 0..=20 {
            let trace = synthetic_trace(2, 8, 2, 32, n, &mut rng).unwrap();
            let r = replay_offload(&trace, &cost()).unwrap();
            assert_eq!(r.swap_events, 2 * n);
            assert!(r.tokens_per_sec < last);
            last = r.tokens_per_sec;
        }
        assert!(synthetic_trace(1, 3, 2, 4, 4, &mut rng).is_err());
    }

    #[test]
    fn delta_uniform_closed_forms() {
        assert_eq!(delta_uniform(&one_layer(4, vec![vec![0], vec![1], vec![2], vec![3]])).0, 0.0);
        let (d, layers) = delta_uniform(&one_layer(4, vec![vec![0]; 5]));
        assert!((d - 37.5).abs() < 1e-12);
        assert_eq!(layers.len(), 1);
    }

    #[test]
    fn delta_uniform_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..200 {
            let trace = random_trace(&mut rng);
            let e = trace.num_experts();
            let flat: Vec<usize> = trace.layer(0).selections.concat();
            let mut dev = 0.0;
            for x in 0..e {
                let f = flat.iter().filter(|&&y| y == x).count() as f64 / flat.len() as f64;
                dev += (f - 1.0 / e as f64).abs();
            }
            assert!((delta_uniform(&trace).0 - 100.0 * dev / e as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn peak_memory_closed_forms() {
        let c = ModelConfig::default();
        let bpp = 2.0;
        let per = per_expert_params(c.expert_kind, c.hidden, c.inter, c.rank) as f64 * bpp;
        let diff = peak_memory(&c, false, bpp) - peak_memory(&c, true, bpp);
        assert!((diff - (c.layers * 6) as f64 * per).abs() < 1e-6);
        let full = ModelConfig {
            active: c.experts,
            ..c.clone()
        };
        assert_eq!(peak_memory(&full, true, bpp), peak_memory(&full, false, bpp));
        let total = crate::experts::expert_param_count(&c).total as f64 * bpp;
        assert_eq!(peak_memory(&c, false, bpp), total);
        let active = crate::experts::expert_param_count(&c).active as f64 * bpp;
        assert_eq!(peak_memory(&c, true, bpp), active);
    }

    #[test]
    fn calibration_reproduces_its_points() {
        let cal = calibrate((43.82, 15.02), (6.55, 23.10), 24, 2).unwrap();
        for (x, tps) in [(43.82, 15.02), (6.55, 23.10)] {
            let t = cal.compute_per_token + 48.0 * x / 100.0 * cal.swap_secs;
            assert!((1.0 / t - tps).abs() < 1e-9);
        }
        assert!(calibrate((10.0, 5.0), (10.0, 6.0), 1, 1).is_err());
        assert!(calibrate((10.0, 10.0), (20.0, 20.0), 1, 1).is_err());
        let cm = cal.cost_model(1e6, 1e6).unwrap();
        assert!((cm.swap_secs() - cal.swap_secs).abs() < 1e-15);
    }

    #[test]
    fn replay_many_keeps_order() {
        let traces = vec![
            one_layer(2, vec![vec![0], vec![1], vec![0]]),
            one_layer(2, vec![vec![0]; 3]),
        ];
        let r = replay_many(&traces, &cost());
        assert_eq!(r[0].as_ref().unwrap().swap_events, 2);
        assert_eq!(r[1].as_ref().unwrap().swap_events, 0);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let r = replay_offload(&one_layer(2, vec![vec![0], vec![1]]), &cost()).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &[("a".into(), r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("trace,tokens,exrep_pct"));
        assert!(lines[1].starts_with("a,2,100.0000,1,"));
    }
}
