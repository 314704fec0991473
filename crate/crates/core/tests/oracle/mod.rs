//! Direct transcriptions of the defining formulas, sharing no code with
//! the library. Values computed here are what the library is checked
//! against.

use std::collections::BTreeSet;

/// Σ over consecutive token pairs of the size of the symmetric difference
/// of their selected sets.
pub fn hard_count(selections: &[Vec<usize>]) -> usize {
    selections
        .windows(2)
        .map(|w| {
            let a: BTreeSet<usize> = w[0].iter().copied().collect();
            let b: BTreeSet<usize> = w[1].iter().copied().collect();
            a.symmetric_difference(&b).count()
        })
        .sum()
}

/// `⌊H/2⌋ / (B·K·(T−1))` for one sequence.
pub fn hard_norm(selections: &[Vec<usize>], k: usize) -> f64 {
    let t = selections.len();
    if t < 2 {
        return 0.0;
    }
    (hard_count(selections) / 2) as f64 / (k * (t - 1)) as f64
}

/// Σ_t Σ_e |w[t][e] − w[t−1][e]|.
pub fn soft_total_variation(weights: &[Vec<f64>]) -> f64 {
    weights
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum()
}

pub fn softmax(x: &[f64], temperature: f64) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| (temperature * v).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `E · Σ_e f_e · P_e` for one sequence of one layer.
pub fn sequence_load_balance(selections: &[Vec<usize>], weights: &[Vec<f64>], experts: usize) -> f64 {
    let t = selections.len() as f64;
    let slots: usize = selections.iter().map(Vec::len).sum();
    let mut f = vec![0.0; experts];
    for s in selections.iter().flatten() {
        f[*s] += 1.0 / slots as f64;
    }
    let mut p = vec![0.0; experts];
    for w in weights {
        for (e, v) in w.iter().enumerate() {
            p[e] += v / t;
        }
    }
    experts as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

/// Expert loads from host memory when only the current token's experts
/// are kept resident; loads for the first token are not counted.
pub fn swap_ins(selections: &[Vec<usize>]) -> usize {
    let Some(first) = selections.first() else {
        return 0;
    };
    let mut resident: BTreeSet<usize> = first.iter().copied().collect();
    let mut loads = 0;
    for s in &selections[1..] {
        let next: BTreeSet<usize> = s.iter().copied().collect();
        loads += next.difference(&resident).count();
        resident = next;
    }
    loads
}

/// Gate, up and down projections, each `hidden × inter`.
pub fn dense_expert_params(hidden: usize, inter: usize) -> usize {
    3 * hidden * inter
}

/// Three `n×r · r×m` factorizations.
pub fn wd_expert_params(hidden: usize, inter: usize, rank: usize) -> usize {
    3 * (hidden * rank + rank * inter)
}
