//! SiLU-gated feed-forward experts, dense or weight-decomposed.
//!
//! A weight-decomposed (WD) expert stores each projection `M (n×m)` as two
//! factors `L (n×r)` and `R (r×m)` and applies it as `(x·L)·R`, so the full
//! matrix is never materialized. All three projections are decomposed.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{matmul, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    #[default]
    Dense,
    Wd,
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertKind::Dense => "dense",
            ExpertKind::Wd => "wd",
        })
    }
}

impl FromStr for ExpertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ExpertKind::Dense),
            "wd" => Ok(ExpertKind::Wd),
            other => Err(Error::Parameter(format!("unknown expert kind '{other}'"))),
        }
    }
}

/// Low-rank factor pair whose product stands in for one projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Factors {
    pub left: Tensor,
    pub right: Tensor,
}

impl Factors {
    pub fn new(left: Tensor, right: Tensor) -> Result<Self> {
        let (l, r) = (left.shape(), right.shape());
        if l.len() != 2 || r.len() != 2 || l[1] != r[0] || l[1] == 0 {
            return Err(Error::dim("factors", l, r));
        }
        Ok(Self { left, right })
    }

    pub fn rank(&self) -> usize {
        self.left.shape()[1]
    }

    /// The `n × m` matrix the factors represent.
    pub fn product(&self) -> Tensor {
        matmul(&self.left, &self.right).expect("factor shapes checked at construction")
    }

    pub fn param_count(&self) -> usize {
        self.left.numel() + self.right.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseExpert {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WdExpert {
    pub gate: Factors,
    pub up: Factors,
    pub down: Factors,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expert {
    Dense(DenseExpert),
    Wd(WdExpert),
}

/// One projection as it appears on a graph.
#[derive(Clone, Copy, Debug)]
pub enum ProjectionVars {
    Dense(Var),
    Factored { left: Var, right: Var },
}

impl ProjectionVars {
    fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            ProjectionVars::Dense(w) => g.matmul(x, w),
            ProjectionVars::Factored { left, right } => {
                let h = g.matmul(x, left)?;
                g.matmul(h, right)
            }
        }
    }
}

/// Gate, up and down projections of one expert on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub gate: ProjectionVars,
    pub up: ProjectionVars,
    pub down: ProjectionVars,
}

/// `down(silu(gate(x)) ⊙ up(x))` for a `rows × hidden` input.
pub fn ffn_on_graph(g: &mut Graph, x: Var, expert: ExpertVars) -> Result<Var> {
    let gate = expert.gate.apply(g, x)?;
    let act = g.silu(gate);
    let up = expert.up.apply(g, x)?;
    let mixed = g.mul(act, up)?;
    expert.down.apply(g, mixed)
}

impl Expert {
    pub fn hidden(&self) -> usize {
        match self {
            Expert::Dense(d) => d.w_gate.shape()[0],
            Expert::Wd(w) => w.gate.left.shape()[0],
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Expert::Dense(d) => d.w_gate.numel() + d.w_up.numel() + d.w_down.numel(),
            Expert::Wd(w) => w.gate.param_count() + w.up.param_count() + w.down.param_count(),
        }
    }

    /// Dense expert built from the products of this expert's factors.
    pub fn to_dense(&self) -> DenseExpert {
        match self {
            Expert::Dense(d) => d.clone(),
            Expert::Wd(w) => DenseExpert {
                w_gate: w.gate.product(),
                w_up: w.up.product(),
                w_down: w.down.product(),
            },
        }
    }

    /// Random initialization. Dense weights are `N(0, std²)`; WD factor
    /// entries have variance `std/√r`, so entries of `L·R` have variance `std²`.
    pub fn init(
        kind: ExpertKind,
        hidden: usize,
        inter: usize,
        rank: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut normal = |rows: usize, cols: usize, s: f64| -> Result<Tensor> {
            let dist = Normal::new(0.0, s).map_err(|e| Error::Parameter(e.to_string()))?;
            Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| dist.sample(rng)).collect())
        };
        match kind {
            ExpertKind::Dense => Ok(Expert::Dense(DenseExpert {
                w_gate: normal(hidden, inter, std)?,
                w_up: normal(hidden, inter, std)?,
                w_down: normal(inter, hidden, std)?,
            })),
            ExpertKind::Wd => {
                let fs = (std / (rank as f64).sqrt()).sqrt();
                let mut pair = |n: usize, m: usize| -> Result<Factors> {
                    Factors::new(normal(n, rank, fs)?, normal(rank, m, fs)?)
                };
                Ok(Expert::Wd(WdExpert {
                    gate: pair(hidden, inter)?,
                    up: pair(hidden, inter)?,
                    down: pair(inter, hidden)?,
                }))
            }
        }
    }

    /// Places the expert's weights on `g` as constant leaves.
    pub fn bind(&self, g: &mut Graph) -> ExpertVars {
        fn dense(g: &mut Graph, t: &Tensor) -> ProjectionVars {
            ProjectionVars::Dense(g.leaf(t.clone()))
        }
        fn factored(g: &mut Graph, f: &Factors) -> ProjectionVars {
            ProjectionVars::Factored {
                left: g.leaf(f.left.clone()),
                right: g.leaf(f.right.clone()),
            }
        }
        match self {
            Expert::Dense(d) => ExpertVars {
                gate: dense(g, &d.w_gate),
                up: dense(g, &d.w_up),
                down: dense(g, &d.w_down),
            },
            Expert::Wd(w) => ExpertVars {
                gate: factored(g, &w.gate),
                up: factored(g, &w.up),
                down: factored(g, &w.down),
            },
        }
    }
}

/// Applies an expert to `x` of shape `(…, hidden)`.
pub fn expert_forward(expert: &Expert, x: &Tensor) -> Result<Tensor> {
    let hidden = expert.hidden();
    if x.cols() != hidden {
        return Err(Error::dim("expert_forward", x.shape(), &[hidden]));
    }
    let shape = x.shape().to_vec();
    let mut g = Graph::new();
    let vars = expert.bind(&mut g);
    let flat = x.clone().reshape(vec![x.rows(), hidden])?;
    let input = g.constant(flat);
    let out = ffn_on_graph(&mut g, input, vars)?;
    g.value(out).clone().reshape(shape)
}

/// Stored parameters of one expert.
pub fn per_expert_params(kind: ExpertKind, hidden: usize, inter: usize, rank: usize) -> usize {
    match kind {
        ExpertKind::Dense => 3 * hidden * inter,
        ExpertKind::Wd => 3 * rank * (hidden + inter),
    }
}

/// Non-expert parameters of the model layout: token and position
/// embeddings, per-layer attention, layer norms and router, final norm and
/// untied output head.
pub fn shared_param_count(c: &ModelConfig) -> usize {
    let embeddings = c.vocab * c.hidden + c.seq_len * c.hidden;
    let per_layer = 4 * c.hidden * c.hidden + 4 * c.hidden + c.hidden * c.experts;
    let head = 2 * c.hidden + c.hidden * c.vocab;
    embeddings + c.layers * per_layer + head
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub active: usize,
    pub total: usize,
    pub per_expert: usize,
    pub shared: usize,
}

pub fn expert_param_count(c: &ModelConfig) -> ParamCount {
    let per_expert = per_expert_params(c.expert_kind, c.hidden, c.inter, c.rank);
    let shared = shared_param_count(c);
    ParamCount {
        active: shared + c.layers * c.active * per_expert,
        total: shared + c.layers * c.experts * per_expert,
        per_expert,
        shared,
    }
}

/// Per-expert parameters implied by reported active/total counts:
/// `(total − active) / (layers · (E − K))`.
pub fn per_expert_from_totals(
    active: f64,
    total: f64,
    layers: usize,
    experts: usize,
    k: usize,
) -> Result<f64> {
    if experts <= k || layers == 0 {
        return Err(Error::Parameter("need E > K and layers > 0".into()));
    }
    Ok((total - active) / (layers * (experts - k)) as f64)
}
