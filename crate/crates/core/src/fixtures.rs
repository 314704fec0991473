//! Reference checks against published numbers: the two bundled
//! expert-activity matrices, the parameter-count division for the
//! reference MoE size, the per-layer load-balancing exploit and the
//! throughput ratio of the offload model.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experts::{expert_param_count, per_expert_from_totals, ExpertKind};
use crate::losses::{hard_replacements, load_balance_loss, model_level_load_balance};
use crate::model::ModelConfig;
use crate::offload::{calibrate, exrep, replay_offload, synthetic_trace};
use crate::routing::LoadFractions;
use crate::trace::RoutingTrace;

pub const BLES_MATRIX: &str = include_str!("../fixtures/replacements_bles.txt");
pub const BASELINE_MATRIX: &str = include_str!("../fixtures/replacements_baseline.txt");
pub const BLES_FILE: &str = "replacements_bles.txt";
pub const BASELINE_FILE: &str = "replacements_baseline.txt";

/// Reported replacement counts of the two activity matrices.
pub const BLES_REPLACEMENTS: usize = 11;
pub const BASELINE_REPLACEMENTS: usize = 21;
/// Experts used at least once in each matrix.
pub const EXPERTS_USED: usize = 6;

/// Reported active and total parameters of the reference MoE.
pub const REFERENCE_ACTIVE: f64 = 1.37e9;
pub const REFERENCE_TOTAL: f64 = 3.75e9;

/// Reported `(exrep %, tokens/sec)` without and with the selection loss.
pub const THROUGHPUT_BASELINE: (f64, f64) = (43.82, 15.02);
pub const THROUGHPUT_BLES: (f64, f64) = (6.55, 23.10);

/// Parses rows of whitespace-separated 0/1 cells; `#` starts a comment.
pub fn parse_activity_matrix(text: &str) -> Result<Vec<Vec<u8>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|c| match c {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::Trace {
                    line: i + 1,
                    message: format!("cell {other:?} is not 0 or 1"),
                }),
            })
            .collect::<Result<Vec<u8>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Trace {
            line: 0,
            message: "activity matrix is empty".into(),
        });
    }
    Ok(rows)
}

/// First cell where `a` and `b` disagree, as `(expert, token)` (0-based).
pub fn first_difference(a: &[Vec<u8>], b: &[Vec<u8>]) -> Option<(usize, usize)> {
    for e in 0..a.len().max(b.len()) {
        let (ra, rb) = (a.get(e), b.get(e));
        let n = ra.map_or(0, Vec::len).max(rb.map_or(0, Vec::len));
        for t in 0..n {
            if ra.and_then(|r| r.get(t)) != rb.and_then(|r| r.get(t)) {
                return Some((e, t));
            }
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixtureCheck {
    pub name: String,
    pub expected: String,
    pub computed: String,
    pub pass: bool,
    pub detail: Option<String>,
}

impl FixtureCheck {
    fn new(name: &str, expected: String, computed: String, pass: bool) -> Self {
        Self {
            name: name.into(),
            expected,
            computed,
            pass,
            detail: None,
        }
    }

    fn failed(name: &str, expected: String, message: String) -> Self {
        Self {
            name: name.into(),
            expected,
            computed: "error".into(),
            pass: false,
            detail: Some(message),
        }
    }
}

fn matrix_checks(label: &str, text: &str, reference: &str, replacements: usize, out: &mut Vec<FixtureCheck>) {
    let name = format!("{label} replacements");
    let expected = replacements.to_string();
    let parsed = parse_activity_matrix(text);
    let diff = match (&parsed, parse_activity_matrix(reference)) {
        (Ok(m), Ok(r)) => first_difference(m, &r)
            .map(|(e, t)| format!("differs from the bundled matrix at expert E{} token {}", e + 1, t + 1)),
        _ => None,
    };
    let trace = parsed.and_then(|m| RoutingTrace::from_activity_matrix(&m));
    let trace = match trace {
        Ok(t) => t,
        Err(e) => {
            let msg = diff.map_or_else(|| e.to_string(), |d| format!("{e}; {d}"));
            out.push(FixtureCheck::failed(&name, expected, msg));
            return;
        }
    };
    let selected = match trace.selected(0) {
        Ok(s) => s,
        Err(e) => {
            out.push(FixtureCheck::failed(&name, expected, e.to_string()));
            return;
        }
    };
    let (h, h_norm) = hard_replacements(&selected);
    let mut count = FixtureCheck::new(&name, expected, (h / 2).to_string(), h / 2 == replacements);
    count.detail = diff.clone();
    if diff.is_some() {
        count.pass = false;
    }
    out.push(count);

    let t = trace.tokens();
    let k = trace.k(0);
    let want_norm = replacements as f64 / (k * (t - 1)) as f64;
    out.push(FixtureCheck::new(
        &format!("{label} normalized"),
        format!("{want_norm:.9}"),
        format!("{h_norm:.9}"),
        (h_norm - want_norm).abs() <= 1e-9,
    ));
    let pct = exrep(&trace);
    out.push(FixtureCheck::new(
        &format!("{label} exrep %"),
        format!("{:.2}", 100.0 * want_norm),
        format!("{pct:.2}"),
        format!("{pct:.2}") == format!("{:.2}", 100.0 * want_norm) && pct == 100.0 * h_norm,
    ));
    let used = (0..trace.num_experts())
        .filter(|&e| trace.layer(0).selections.iter().any(|s| s.contains(&e)))
        .count();
    out.push(FixtureCheck::new(
        &format!("{label} experts used"),
        EXPERTS_USED.to_string(),
        used.to_string(),
        used == EXPERTS_USED,
    ));
    if let Ok(cost) = crate::offload::OffloadCostModel::new(1.0, 1.0, 1.0, 1.0) {
        if let Ok(r) = replay_offload(&trace, &cost) {
            out.push(FixtureCheck::new(
                &format!("{label} offload swaps"),
                (h / 2).to_string(),
                r.swap_events.to_string(),
                r.swap_events == h / 2,
            ));
        }
    }
}

/// Reference MoE layout with an assumed Llama-style intermediate size and
/// vocabulary.
pub fn reference_moe_config() -> ModelConfig {
    ModelConfig {
        layers: 24,
        heads: 18,
        hidden: 1440,
        inter: 3840,
        vocab: 128_256,
        seq_len: 2048,
        experts: 8,
        active: 2,
        expert_kind: ExpertKind::Dense,
        rank: 720,
        ..ModelConfig::default()
    }
}

fn parameter_checks(out: &mut Vec<FixtureCheck>) {
    let c = reference_moe_config();
    let division = per_expert_from_totals(REFERENCE_ACTIVE, REFERENCE_TOTAL, c.layers, c.experts, c.active)
        .unwrap_or(f64::NAN);
    out.push(FixtureCheck::new(
        "per-expert params from totals",
        "16.53M".into(),
        format!("{:.2}M", division / 1e6),
        (division / 1e6 - 16.53).abs() < 0.005,
    ));
    let counts = expert_param_count(&c);
    let rel = (counts.per_expert as f64 - division).abs() / division;
    out.push(FixtureCheck::new(
        "per-expert params, calculator",
        format!("{:.2}M ± 2%", division / 1e6),
        format!("{:.2}M ({:.2}%)", counts.per_expert as f64 / 1e6, 100.0 * rel),
        rel <= 0.02,
    ));
    let (ra, rt) = (
        (counts.active as f64 - REFERENCE_ACTIVE).abs() / REFERENCE_ACTIVE,
        (counts.total as f64 - REFERENCE_TOTAL).abs() / REFERENCE_TOTAL,
    );
    out.push(FixtureCheck::new(
        "active / total params, calculator",
        "1.37B / 3.75B ± 2%".into(),
        format!("{:.3}B / {:.3}B", counts.active as f64 / 1e9, counts.total as f64 / 1e9),
        ra <= 0.02 && rt <= 0.02,
    ));
}

/// Three layers, three experts; layer `l` routes everything to expert `l`.
pub fn exploit_scenario() -> Vec<LoadFractions> {
    (0..3)
        .map(|l| {
            let mut v = vec![0.0; 3];
            v[l] = 1.0;
            LoadFractions {
                fractions: vec![v.clone()],
                mean_probs: vec![v],
            }
        })
        .collect()
}

fn exploit_checks(out: &mut Vec<FixtureCheck>) {
    let layers = exploit_scenario();
    let per_layer = load_balance_loss(&layers, 3).unwrap_or(f64::NAN);
    let pooled = model_level_load_balance(&layers, 3).unwrap_or(f64::NAN);
    out.push(FixtureCheck::new(
        "load balance, per layer",
        "3.0".into(),
        format!("{per_layer:.9}"),
        (per_layer - 3.0).abs() <= 1e-9,
    ));
    out.push(FixtureCheck::new(
        "load balance, model level",
        "1.0".into(),
        format!("{pooled:.9}"),
        (pooled - 1.0).abs() <= 1e-9,
    ));
}

/// Throughput ratio of two synthetic traces at the reported replacement
/// rates, under a cost model solved from the reported rows.
pub fn throughput_ratio(layers: usize, k: usize, experts: usize, tokens: usize, seed: u64) -> Result<f64> {
    let cal = calibrate(THROUGHPUT_BASELINE, THROUGHPUT_BLES, layers, k)?;
    let cost = cal.cost_model(1e6, 1e6)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tps = |pct: f64| -> Result<f64> {
        let n = (pct / 100.0 * (k * (tokens - 1)) as f64).round() as usize;
        let trace = synthetic_trace(layers, experts, k, tokens, n, &mut rng)?;
        Ok(replay_offload(&trace, &cost)?.tokens_per_sec)
    };
    let slow = tps(THROUGHPUT_BASELINE.0)?;
    let fast = tps(THROUGHPUT_BLES.0)?;
    Ok(fast / slow)
}

fn throughput_checks(out: &mut Vec<FixtureCheck>) {
    let expected = format!("[1.30, 1.80] (reported {:.2})", THROUGHPUT_BLES.1 / THROUGHPUT_BASELINE.1);
    match throughput_ratio(24, 2, 8, 128, 0) {
        Ok(r) => out.push(FixtureCheck::new(
            "offload speedup",
            expected,
            format!("{r:.3}"),
            (1.3..=1.8).contains(&r),
        )),
        Err(e) => out.push(FixtureCheck::failed("offload speedup", expected, e.to_string())),
    }
}

fn run(bles: &str, baseline: &str) -> Vec<FixtureCheck> {
    let mut out = Vec::new();
    matrix_checks("top (selection loss)", bles, BLES_MATRIX, BLES_REPLACEMENTS, &mut out);
    matrix_checks("bottom (baseline)", baseline, BASELINE_MATRIX, BASELINE_REPLACEMENTS, &mut out);
    parameter_checks(&mut out);
    exploit_checks(&mut out);
    throughput_checks(&mut out);
    out
}

/// All checks on the bundled matrices.
pub fn run_bundled() -> Vec<FixtureCheck> {
    run(BLES_MATRIX, BASELINE_MATRIX)
}

/// All checks with the matrices read from `dir`.
pub fn run_from_dir(dir: &Path) -> Result<Vec<FixtureCheck>> {
    let read = |f: &str| {
        std::fs::read_to_string(dir.join(f))
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", dir.join(f).display())))
    };
    Ok(run(&read(BLES_FILE)?, &read(BASELINE_FILE)?))
}

/// Plain-text table of the checks.
pub fn render(checks: &[FixtureCheck]) -> String {
    let w = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        s.push_str(&format!(
            "{:<4}  {:<w$}  expected {:<24} computed {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.expected,
            c.computed
        ));
        if let Some(d) = &c.detail {
            s.push_str(&format!("  ({d})"));
        }
        s.push('\n');
    }
    s
}
