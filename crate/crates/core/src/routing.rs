//! Token-choice routing: temperature softmax over router logits followed by
//! a top-k expert selection per token.

use crate::error::{Error, Result};
use crate::numerics::{softmax_lastdim, Graph, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;

/// Raw router outputs of shape `(batch, tokens, experts)`.
#[derive(Clone, Debug)]
pub struct RouterLogits {
    values: Tensor,
}

impl RouterLogits {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[2] == 0 {
            return Err(Error::dim("router_logits", s, &[0, 0, 1]));
        }
        if !values.all_finite() {
            return Err(Error::Input("router logits contain non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn experts(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Routing probabilities `softmax(τ·R)`, shape `(batch, tokens, experts)`.
#[derive(Clone, Debug)]
pub struct RoutingWeights {
    values: Tensor,
    temperature: f64,
}

impl RoutingWeights {
    /// Wraps already-normalized probabilities (e.g. read back from a trace).
    pub fn from_probabilities(values: Tensor, temperature: f64) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 {
            return Err(Error::dim("routing_weights", s, &[0, 0, 0]));
        }
        for row in values.data().chunks(s[2].max(1)) {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                return Err(Error::Input(format!("routing row does not sum to 1 (sum {sum})")));
            }
        }
        Ok(Self {
            values,
            temperature,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn experts(&self) -> usize {
        self.values.shape()[2]
    }

    /// Probability row for token `t` of sequence `b`.
    pub fn row(&self, b: usize, t: usize) -> &[f64] {
        self.values.row(b * self.tokens() + t)
    }
}

/// Discrete top-k selection with the renormalized gate weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedExperts {
    indices: Vec<usize>,
    gate_weights: Tensor,
    batch: usize,
    tokens: usize,
    k: usize,
    num_experts: usize,
}

impl SelectedExperts {
    /// Builds a selection from explicit indices (row-major `(batch, tokens, k)`).
    /// Gate weights default to `1/k`.
    pub fn from_indices(
        indices: Vec<usize>,
        batch: usize,
        tokens: usize,
        k: usize,
        num_experts: usize,
    ) -> Result<Self> {
        let gate = Tensor::new(vec![batch, tokens, k], vec![1.0 / k.max(1) as f64; indices.len()])?;
        Self::with_gates(indices, gate, num_experts)
    }

    pub fn with_gates(indices: Vec<usize>, gate_weights: Tensor, num_experts: usize) -> Result<Self> {
        let s = gate_weights.shape().to_vec();
        if s.len() != 3 || indices.len() != gate_weights.numel() {
            return Err(Error::dim("selected_experts", &s, &[indices.len()]));
        }
        let (batch, tokens, k) = (s[0], s[1], s[2]);
        if k == 0 || k > num_experts {
            return Err(Error::Parameter(format!("k={k} must be in 1..={num_experts}")));
        }
        for (slot, row) in indices.chunks(k).enumerate() {
            for (j, &e) in row.iter().enumerate() {
                if e >= num_experts {
                    return Err(Error::Input(format!(
                        "expert index {e} out of range for {num_experts} experts (token slot {slot})"
                    )));
                }
                if row[..j].contains(&e) {
                    return Err(Error::Input(format!("duplicate expert {e} in token slot {slot}")));
                }
            }
        }
        Ok(Self {
            indices,
            gate_weights,
            batch,
            tokens,
            k,
            num_experts,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn gate_weights(&self) -> &Tensor {
        &self.gate_weights
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn token(&self, b: usize, t: usize) -> &[usize] {
        let start = (b * self.tokens + t) * self.k;
        &self.indices[start..start + self.k]
    }

    pub fn gates(&self, b: usize, t: usize) -> &[f64] {
        self.gate_weights.row(b * self.tokens + t)
    }
}

/// Indices of the `k` largest entries of `row`, largest first; ties go to
/// the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn check_k(k: usize, experts: usize) -> Result<()> {
    if k == 0 || k > experts {
        return Err(Error::Parameter(format!(
            "top-k must satisfy 1 <= k <= {experts}, got {k}"
        )));
    }
    Ok(())
}

/// Routing weights plus top-k selection for every token.
pub fn route(
    logits: &RouterLogits,
    temperature: f64,
    k: usize,
) -> Result<(RoutingWeights, SelectedExperts)> {
    let experts = logits.experts();
    check_k(k, experts)?;
    let weights = softmax_lastdim(logits.values(), temperature)?;
    let (batch, tokens) = (logits.batch(), logits.tokens());
    let mut indices = Vec::with_capacity(batch * tokens * k);
    let mut gates = Vec::with_capacity(batch * tokens * k);
    for row in weights.data().chunks(experts) {
        let sel = top_k_indices(row, k);
        let sum: f64 = sel.iter().map(|&e| row[e]).sum();
        gates.extend(sel.iter().map(|&e| row[e] / sum));
        indices.extend(sel);
    }
    let gate_weights = Tensor::new(vec![batch, tokens, k], gates)?;
    let selected = SelectedExperts::with_gates(indices, gate_weights, experts)?;
    Ok((
        RoutingWeights {
            values: weights,
            temperature,
        },
        selected,
    ))
}

/// Graph-side routing used inside the model.
pub struct RoutedVars {
    pub weights: Var,
    pub gates: Var,
    pub selected: SelectedExperts,
}

/// Routes `(batch·tokens) × experts` logits recorded on `g`. Gradient flows
/// through the gate renormalization into the logits; the selection itself
/// is constant.
pub fn route_on_graph(
    g: &mut Graph,
    logits: Var,
    temperature: f64,
    k: usize,
    batch: usize,
    tokens: usize,
) -> Result<RoutedVars> {
    let experts = g.value(logits).cols();
    check_k(k, experts)?;
    let weights = g.softmax(logits, temperature)?;
    let mut indices = Vec::with_capacity(batch * tokens * k);
    for row in g.value(weights).data().chunks(experts) {
        indices.extend(top_k_indices(row, k));
    }
    let gates = g.top_k_gate(weights, &indices, k)?;
    let gate_tensor = Tensor::new(vec![batch, tokens, k], g.value(gates).data().to_vec())?;
    let selected = SelectedExperts::with_gates(indices, gate_tensor, experts)?;
    Ok(RoutedVars {
        weights,
        gates,
        selected,
    })
}

/// Per-sequence expert usage `f` (share of the `T·K` assignment slots) and
/// mean routing probability `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadFractions {
    pub fractions: Vec<Vec<f64>>,
    pub mean_probs: Vec<Vec<f64>>,
}

pub fn expert_load_fractions(
    selected: &SelectedExperts,
    weights: &RoutingWeights,
) -> Result<LoadFractions> {
    if selected.batch() != weights.batch()
        || selected.tokens() != weights.tokens()
        || selected.num_experts() != weights.experts()
    {
        return Err(Error::dim(
            "expert_load_fractions",
            &[selected.batch(), selected.tokens(), selected.num_experts()],
            weights.values().shape(),
        ));
    }
    let (tokens, experts) = (selected.tokens(), selected.num_experts());
    let fractions = sequence_fractions(selected);
    let mean_probs = (0..selected.batch())
        .map(|b| {
            let mut p = vec![0.0; experts];
            for t in 0..tokens {
                p.iter_mut().zip(weights.row(b, t)).for_each(|(a, w)| *a += w);
            }
            p.iter_mut().for_each(|v| *v /= tokens.max(1) as f64);
            p
        })
        .collect();
    Ok(LoadFractions {
        fractions,
        mean_probs,
    })
}

pub(crate) fn sequence_fractions(selected: &SelectedExperts) -> Vec<Vec<f64>> {
    let (tokens, k, experts) = (selected.tokens(), selected.k(), selected.num_experts());
    (0..selected.batch())
        .map(|b| {
            let mut f = vec![0.0; experts];
            for t in 0..tokens {
                for &e in selected.token(b, t) {
                    f[e] += 1.0;
                }
            }
            f.iter_mut().for_each(|v| *v /= (tokens * k).max(1) as f64);
            f
        })
        .collect()
}
