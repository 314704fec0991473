//! Training objective: next-token cross-entropy, a sequence-level
//! load-balancing term, and the block-wise expert selection (BlES) term.
//!
//! BlES multiplies a hard count of expert replacements between consecutive
//! tokens by a soft total-variation of the routing weights:
//!
//! ```text
//! H       = Σ_b Σ_t Σ_e |[e ∈ S(b,t+1)] − [e ∈ S(b,t)]|
//! H_norm  = ⌊H/2⌋ / (B·K·(T−1))
//! L       = Σ_b Σ_t Σ_e |W(b,t+1,e) − W(b,t,e)|
//! L_norm  = L / (B·T)
//! loss    = H_norm · L_norm
//! ```
//!
//! The selection is discrete, so `H_norm` enters as a constant multiplier:
//! gradients flow only through `L_norm`. Note the two denominators differ
//! (`B·K·(T−1)` vs `B·T`); both are kept as written.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ForwardPass, ModelConfig};
use crate::numerics::{Graph, Tensor, Var};
use crate::routing::{sequence_fractions, LoadFractions, RoutingWeights, SelectedExperts};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BlesBreakdown {
    /// Total hard transitions `H` (each replacement counts twice).
    pub hard: usize,
    pub hard_norm: f64,
    pub soft: f64,
    pub soft_norm: f64,
    pub loss: f64,
}

/// `(H, H_norm)`. A single-token sequence has no transitions and yields
/// `(0, 0)`.
pub fn hard_replacements(selected: &SelectedExperts) -> (usize, f64) {
    let (batch, tokens, k) = (selected.batch(), selected.tokens(), selected.k());
    if tokens < 2 {
        return (0, 0.0);
    }
    let experts = selected.num_experts();
    let mut h = 0usize;
    for b in 0..batch {
        for t in 0..tokens - 1 {
            let (cur, next) = (selected.token(b, t), selected.token(b, t + 1));
            for e in 0..experts {
                if cur.contains(&e) != next.contains(&e) {
                    h += 1;
                }
            }
        }
    }
    let norm = (h / 2) as f64 / (batch * k * (tokens - 1)) as f64;
    (h, norm)
}

/// `(L, L_norm)` of a routing-weight tensor.
pub fn soft_selection(weights: &RoutingWeights) -> (f64, f64) {
    let (batch, tokens) = (weights.batch(), weights.tokens());
    let mut l = 0.0;
    for b in 0..batch {
        for t in 0..tokens.saturating_sub(1) {
            l += weights
                .row(b, t + 1)
                .iter()
                .zip(weights.row(b, t))
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>();
        }
    }
    (l, l / (batch * tokens).max(1) as f64)
}

fn check_pair(weights: &RoutingWeights, selected: &SelectedExperts) -> Result<()> {
    if weights.batch() != selected.batch()
        || weights.tokens() != selected.tokens()
        || weights.experts() != selected.num_experts()
    {
        return Err(Error::dim(
            "bles_loss",
            weights.values().shape(),
            &[selected.batch(), selected.tokens(), selected.num_experts()],
        ));
    }
    Ok(())
}

pub fn bles_loss(weights: &RoutingWeights, selected: &SelectedExperts) -> Result<BlesBreakdown> {
    check_pair(weights, selected)?;
    let (hard, hard_norm) = hard_replacements(selected);
    let (soft, soft_norm) = soft_selection(weights);
    Ok(BlesBreakdown {
        hard,
        hard_norm,
        soft,
        soft_norm,
        loss: hard_norm * soft_norm,
    })
}

/// Row pairs `(t, t+1)` of every sequence in a `(batch·tokens)`-row layout.
fn consecutive_rows(batch: usize, tokens: usize) -> (Vec<usize>, Vec<usize>) {
    let mut prev = Vec::new();
    let mut next = Vec::new();
    for b in 0..batch {
        for t in 0..tokens.saturating_sub(1) {
            prev.push(b * tokens + t);
            next.push(b * tokens + t + 1);
        }
    }
    (prev, next)
}

/// `L_norm` recorded on `g` for `(batch·tokens) × experts` routing weights.
pub fn soft_selection_on_graph(g: &mut Graph, weights: Var, batch: usize, tokens: usize) -> Result<Var> {
    if g.value(weights).rows() != batch * tokens {
        return Err(Error::dim("soft_selection", g.value(weights).shape(), &[batch, tokens]));
    }
    let scale = 1.0 / (batch * tokens) as f64;
    if tokens < 2 {
        let z = g.scale(weights, 0.0);
        let s = g.sum(z);
        return Ok(s);
    }
    let (prev, next) = consecutive_rows(batch, tokens);
    let a = g.gather_rows(weights, &next)?;
    let b = g.gather_rows(weights, &prev)?;
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    let l = g.sum(d);
    Ok(g.scale(l, scale))
}

/// BlES term on `g`: `H_norm · L_norm` with `H_norm` held constant.
pub fn bles_on_graph(
    g: &mut Graph,
    weights: Var,
    selected: &SelectedExperts,
) -> Result<(Var, BlesBreakdown)> {
    let (batch, tokens) = (selected.batch(), selected.tokens());
    let (hard, hard_norm) = hard_replacements(selected);
    let soft_norm_var = soft_selection_on_graph(g, weights, batch, tokens)?;
    let soft_norm = g.value(soft_norm_var).data()[0];
    let loss = g.scale(soft_norm_var, hard_norm);
    Ok((
        loss,
        BlesBreakdown {
            hard,
            hard_norm,
            soft: soft_norm * (batch * tokens) as f64,
            soft_norm,
            loss: hard_norm * soft_norm,
        },
    ))
}

/// Sequence-level load balancing: `E · Σ_e f_e · P_e` per sequence and
/// layer, averaged over both. `layers[l]` holds the per-sequence statistics
/// of layer `l`.
pub fn load_balance_loss(layers: &[LoadFractions], num_experts: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for lf in layers {
        if lf.fractions.len() != lf.mean_probs.len() {
            return Err(Error::dim("load_balance_loss", &[lf.fractions.len()], &[lf.mean_probs.len()]));
        }
        for (f, p) in lf.fractions.iter().zip(&lf.mean_probs) {
            if f.len() != num_experts || p.len() != num_experts {
                return Err(Error::dim("load_balance_loss", &[f.len(), p.len()], &[num_experts]));
            }
            total += num_experts as f64 * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Input("load_balance_loss needs at least one sequence".into()));
    }
    Ok(total / count as f64)
}

/// The same statistic computed after pooling `f` and `P` over all layers
/// (per sequence). Cross-layer specialization cancels out here, which is
/// why the training objective uses the per-layer form.
pub fn model_level_load_balance(layers: &[LoadFractions], num_experts: usize) -> Result<f64> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Input("model_level_load_balance needs at least one layer".into()))?;
    let sequences = first.fractions.len();
    let n = layers.len() as f64;
    let mut total = 0.0;
    for s in 0..sequences {
        let mut f = vec![0.0; num_experts];
        let mut p = vec![0.0; num_experts];
        for lf in layers {
            f.iter_mut().zip(&lf.fractions[s]).for_each(|(a, b)| *a += b / n);
            p.iter_mut().zip(&lf.mean_probs[s]).for_each(|(a, b)| *a += b / n);
        }
        total += num_experts as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total / sequences.max(1) as f64)
}

/// One layer's load-balancing term on `g`, gradient through `P` only.
pub fn load_balance_on_graph(g: &mut Graph, weights: Var, selected: &SelectedExperts) -> Result<Var> {
    let (batch, tokens, experts) = (selected.batch(), selected.tokens(), selected.num_experts());
    let fractions = sequence_fractions(selected);
    // row (b, t) of the mask carries f_b / T, so Σ W ⊙ mask = Σ_b Σ_e f_be · P_be
    let mut mask = Vec::with_capacity(batch * tokens * experts);
    for f in &fractions {
        for _ in 0..tokens {
            mask.extend(f.iter().map(|v| v / tokens as f64));
        }
    }
    let mask = g.constant(Tensor::new(g.value(weights).shape().to_vec(), mask)?);
    let prod = g.mul(weights, mask)?;
    let s = g.sum(prod);
    Ok(g.scale(s, experts as f64 / batch as f64))
}

pub fn total_loss(ce: f64, lb: f64, bles: f64, lb_coef: f64, bles_coef: f64) -> Result<f64> {
    if lb_coef < 0.0 || bles_coef < 0.0 {
        return Err(Error::Parameter("loss coefficients must be non-negative".into()));
    }
    Ok(ce + lb_coef * lb + bles_coef * bles)
}

/// Scalar components of the objective for one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub lb: f64,
    pub bles: f64,
    pub total: f64,
    /// Per-layer BlES terms.
    pub bles_layers: Vec<BlesBreakdown>,
}

/// Builds `ce + α·lb + λ·bles` on the pass's graph. `lb` and `bles` are
/// means over layers. `targets` has one entry per `(sequence, token)` row;
/// `None` rows are excluded from the cross-entropy.
pub fn objective(
    pass: &mut ForwardPass,
    targets: &[Option<usize>],
    config: &ModelConfig,
) -> Result<(Var, LossBreakdown)> {
    let g = &mut pass.graph;
    let ce = g.cross_entropy(pass.logits, targets)?;
    let layers = pass.routing.len().max(1) as f64;
    let mut lb_acc: Option<Var> = None;
    let mut bles_acc: Option<Var> = None;
    let mut bles_layers = Vec::with_capacity(pass.routing.len());
    for r in &pass.routing {
        let lb = load_balance_on_graph(g, r.weights, &r.selected)?;
        let (bles, breakdown) = bles_on_graph(g, r.weights, &r.selected)?;
        bles_layers.push(breakdown);
        lb_acc = Some(match lb_acc {
            Some(a) => g.add(a, lb)?,
            None => lb,
        });
        bles_acc = Some(match bles_acc {
            Some(a) => g.add(a, bles)?,
            None => bles,
        });
    }
    let mut total = ce;
    let mut lb_value = 0.0;
    let mut bles_value = 0.0;
    if let Some(lb) = lb_acc {
        let lb = g.scale(lb, 1.0 / layers);
        lb_value = g.value(lb).data()[0];
        let weighted = g.scale(lb, config.lb_coef);
        total = g.add(total, weighted)?;
    }
    if let Some(b) = bles_acc {
        let b = g.scale(b, 1.0 / layers);
        bles_value = g.value(b).data()[0];
        let weighted = g.scale(b, config.bles_coef);
        total = g.add(total, weighted)?;
    }
    let ce_value = g.value(ce).data()[0];
    let breakdown = LossBreakdown {
        ce: ce_value,
        lb: lb_value,
        bles: bles_value,
        total: g.value(total).data()[0],
        bles_layers,
    };
    Ok((total, breakdown))
}
