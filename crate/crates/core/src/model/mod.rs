//! Decoder-only transformer whose every FFN sublayer is a sparse MoE layer.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! x = tok_emb[ids] + pos_emb[positions]
//! for each layer:
//!     x = x + attn(ln1(x)) · wo
//!     x = x + moe(ln2(x))
//! logits = ln_f(x) · lm_head
//! ```
//!
//! The router and the experts consume the same normalized input.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use params::{ParamId, ParamStore};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::experts::{
    ffn_on_graph, DenseExpert, Expert, ExpertKind, ExpertVars, Factors, ProjectionVars, WdExpert,
};
use crate::numerics::{Graph, Tensor, Var};
use crate::routing::{route_on_graph, RouterLogits, RoutingWeights, SelectedExperts};
use crate::trace::{LayerTrace, RoutingTrace};

#[derive(Clone, Copy, Debug)]
enum ProjParam {
    Dense(ParamId),
    Factored { left: ParamId, right: ParamId },
}

#[derive(Clone, Debug)]
struct ExpertParams {
    gate: ProjParam,
    up: ProjParam,
    down: ProjParam,
}

#[derive(Clone, Copy, Debug)]
struct NormParams {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct LayerParams {
    ln1: NormParams,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: NormParams,
    router: ParamId,
    experts: Vec<ExpertParams>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
    ln_f: NormParams,
    lm_head: ParamId,
}

/// Routing artifacts of one MoE layer recorded on a graph.
#[derive(Debug)]
pub struct LayerRouting {
    pub logits: Var,
    pub weights: Var,
    pub selected: SelectedExperts,
}

/// A recorded forward pass, ready for loss construction and backward.
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    /// `(batch·tokens) × vocab`
    pub logits: Var,
    pub routing: Vec<LayerRouting>,
    /// Graph leaf of every parameter, indexed by `ParamId`.
    pub params: Vec<Var>,
    pub batch: usize,
    pub tokens: usize,
}

/// Eager result of [`Model::moe_layer_forward`].
#[derive(Debug)]
pub struct MoeLayerOutput {
    pub output: Tensor,
    pub logits: RouterLogits,
    pub weights: RoutingWeights,
    pub selected: SelectedExperts,
}

/// Eager result of [`Model::lm_forward`].
#[derive(Debug)]
pub struct LmOutput {
    /// `(batch, tokens, vocab)`
    pub logits: Tensor,
    /// One trace per sequence in the batch.
    pub traces: Vec<RoutingTrace>,
    /// Per-layer router logits, weights and selections for the whole batch.
    pub routing: Vec<(RouterLogits, RoutingWeights, SelectedExperts)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<usize>,
    pub generated: Vec<usize>,
    /// Routing of every prompt and generated token.
    pub trace: RoutingTrace,
}

enum Init<'a, R: Rng> {
    Random(&'a mut R, f64),
    Zeros,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        match self {
            Init::Random(rng, _) => {
                let dist = Normal::new(0.0, std).expect("std is finite and positive");
                let n = shape.iter().product();
                let data = (0..n).map(|_| dist.sample(*rng)).collect();
                Tensor::new(shape, data).expect("shape matches data")
            }
            Init::Zeros => Tensor::zeros(shape),
        }
    }

    fn fill(&mut self, shape: Vec<usize>, value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("shape matches data")
    }

    fn std(&self) -> f64 {
        match self {
            Init::Random(_, s) => *s,
            Init::Zeros => 1.0,
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let std = config.init_std;
        Self::build(config, &mut Init::Random(rng, std))
    }

    /// Same layout as [`Model::new`] with every weight zeroed.
    pub(crate) fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Self::build(config, &mut Init::<rand_chacha::ChaCha8Rng>::Zeros)
    }

    fn build<R: Rng>(config: ModelConfig, init: &mut Init<'_, R>) -> Result<Self> {
        let c = &config;
        let std = init.std();
        let mut p = ParamStore::default();
        let norm = |p: &mut ParamStore, init: &mut Init<'_, R>, name: &str| NormParams {
            gain: p.insert(format!("{name}.gain"), init.fill(vec![c.hidden], 1.0)),
            bias: p.insert(format!("{name}.bias"), init.fill(vec![c.hidden], 0.0)),
        };
        let tok_emb = p.insert("tok_emb", init.normal(vec![c.vocab, c.hidden], std));
        let pos_emb = p.insert("pos_emb", init.normal(vec![c.seq_len, c.hidden], std));
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let pre = format!("layers.{l}");
            let ln1 = norm(&mut p, init, &format!("{pre}.ln1"));
            let square = |p: &mut ParamStore, init: &mut Init<'_, R>, n: &str| {
                p.insert(format!("{pre}.attn.{n}"), init.normal(vec![c.hidden, c.hidden], std))
            };
            let wq = square(&mut p, init, "wq");
            let wk = square(&mut p, init, "wk");
            let wv = square(&mut p, init, "wv");
            let wo = square(&mut p, init, "wo");
            let ln2 = norm(&mut p, init, &format!("{pre}.ln2"));
            let router = p.insert(format!("{pre}.router"), init.normal(vec![c.hidden, c.experts], std));
            let experts = (0..c.experts)
                .map(|e| {
                    let ep = format!("{pre}.experts.{e}");
                    let proj = |p: &mut ParamStore, init: &mut Init<'_, R>, n: &str, rows, cols| match c.expert_kind {
                        ExpertKind::Dense => {
                            ProjParam::Dense(p.insert(format!("{ep}.{n}"), init.normal(vec![rows, cols], std)))
                        }
                        ExpertKind::Wd => {
                            // factor std chosen so entries of L·R have variance std²
                            let fs = (std / (c.rank as f64).sqrt()).sqrt();
                            ProjParam::Factored {
                                left: p.insert(format!("{ep}.{n}.left"), init.normal(vec![rows, c.rank], fs)),
                                right: p.insert(format!("{ep}.{n}.right"), init.normal(vec![c.rank, cols], fs)),
                            }
                        }
                    };
                    ExpertParams {
                        gate: proj(&mut p, init, "gate", c.hidden, c.inter),
                        up: proj(&mut p, init, "up", c.hidden, c.inter),
                        down: proj(&mut p, init, "down", c.inter, c.hidden),
                    }
                })
                .collect();
            layers.push(LayerParams {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                router,
                experts,
            });
        }
        let ln_f = norm(&mut p, init, "ln_f");
        let lm_head = p.insert("lm_head", init.normal(vec![c.hidden, c.vocab], std));
        Ok(Self {
            config,
            params: p,
            tok_emb,
            pos_emb,
            layers,
            ln_f,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Router projection of `layer` (`hidden × experts`).
    pub fn router(&self, layer: usize) -> &Tensor {
        self.params.get(self.layers[layer].router)
    }

    /// Copy of expert `e` in `layer`.
    pub fn expert(&self, layer: usize, e: usize) -> Expert {
        let ep = &self.layers[layer].experts[e];
        let t = |id: ParamId| self.params.get(id).clone();
        let f = |p: ProjParam| match p {
            ProjParam::Factored { left, right } => Factors::new(t(left), t(right)).expect("factor shapes"),
            ProjParam::Dense(_) => unreachable!("dense projection in factored expert"),
        };
        match ep.gate {
            ProjParam::Dense(_) => {
                let d = |p: ProjParam| match p {
                    ProjParam::Dense(id) => t(id),
                    ProjParam::Factored { .. } => unreachable!("factored projection in dense expert"),
                };
                Expert::Dense(DenseExpert {
                    w_gate: d(ep.gate),
                    w_up: d(ep.up),
                    w_down: d(ep.down),
                })
            }
            ProjParam::Factored { .. } => Expert::Wd(WdExpert {
                gate: f(ep.gate),
                up: f(ep.up),
                down: f(ep.down),
            }),
        }
    }

    /// Overwrites expert `e` in `layer`; the variant must match the config.
    pub fn set_expert(&mut self, layer: usize, e: usize, expert: &Expert) -> Result<()> {
        let ep = self.layers[layer].experts[e].clone();
        let mut put = |p: ProjParam, dense: Option<&Tensor>, factors: Option<&Factors>| -> Result<()> {
            match (p, dense, factors) {
                (ProjParam::Dense(id), Some(t), _) => self.params.set(id, t.clone()),
                (ProjParam::Factored { left, right }, _, Some(f)) => {
                    self.params.set(left, f.left.clone())?;
                    self.params.set(right, f.right.clone())
                }
                _ => Err(Error::Parameter("expert kind does not match model".into())),
            }
        };
        match expert {
            Expert::Dense(d) => {
                put(ep.gate, Some(&d.w_gate), None)?;
                put(ep.up, Some(&d.w_up), None)?;
                put(ep.down, Some(&d.w_down), None)
            }
            Expert::Wd(w) => {
                put(ep.gate, None, Some(&w.gate))?;
                put(ep.up, None, Some(&w.up))?;
                put(ep.down, None, Some(&w.down))
            }
        }
    }

    /// Model whose experts (and router columns) are reordered so that new
    /// expert `j` is old expert `perm[j]`, in every layer.
    pub fn with_permuted_experts(&self, perm: &[usize]) -> Result<Model> {
        let e = self.config.experts;
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..e).collect::<Vec<_>>() {
            return Err(Error::Parameter(format!("{perm:?} is not a permutation of 0..{e}")));
        }
        let mut out = self.clone();
        for l in 0..self.config.layers {
            for (j, &src) in perm.iter().enumerate() {
                out.set_expert(l, j, &self.expert(l, src))?;
            }
            let r = self.router(l);
            let mut data = vec![0.0; r.numel()];
            for row in 0..r.rows() {
                for (j, &src) in perm.iter().enumerate() {
                    data[row * e + j] = r.data()[row * e + src];
                }
            }
            out.params.set(self.layers[l].router, Tensor::new(r.shape().to_vec(), data)?)?;
        }
        Ok(out)
    }

    fn bind(&self, g: &mut Graph, track_grad: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.zero_grad();
                t.set_requires_grad(track_grad);
                g.leaf(t)
            })
            .collect()
    }

    fn expert_vars(ep: &ExpertParams, vars: &[Var]) -> ExpertVars {
        let pv = |p: ProjParam| match p {
            ProjParam::Dense(id) => ProjectionVars::Dense(vars[id.index()]),
            ProjParam::Factored { left, right } => ProjectionVars::Factored {
                left: vars[left.index()],
                right: vars[right.index()],
            },
        };
        ExpertVars {
            gate: pv(ep.gate),
            up: pv(ep.up),
            down: pv(ep.down),
        }
    }

    fn moe_on_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        layer: &LayerParams,
        h: Var,
        batch: usize,
        tokens: usize,
    ) -> Result<(Var, LayerRouting)> {
        let c = &self.config;
        let n = batch * tokens;
        let k = c.active;
        let logits = g.matmul(h, vars[layer.router.index()])?;
        let routed = route_on_graph(g, logits, c.temperature, k, batch, tokens)?;
        let gates = g.reshape(routed.gates, vec![n * k, 1])?;
        let mut rows = vec![Vec::new(); c.experts];
        let mut slots = vec![Vec::new(); c.experts];
        for (slot, &e) in routed.selected.indices().iter().enumerate() {
            rows[e].push(slot / k);
            slots[e].push(slot);
        }
        let mut out: Option<Var> = None;
        for e in 0..c.experts {
            if rows[e].is_empty() {
                continue;
            }
            let xe = g.gather_rows(h, &rows[e])?;
            let ye = ffn_on_graph(g, xe, Self::expert_vars(&layer.experts[e], vars))?;
            let ge = g.gather_rows(gates, &slots[e])?;
            let weighted = g.mul_column(ye, ge)?;
            let placed = g.scatter_rows(weighted, &rows[e], n)?;
            out = Some(match out {
                Some(acc) => g.add(acc, placed)?,
                None => placed,
            });
        }
        let out = out.ok_or_else(|| Error::Input("MoE layer received no tokens".into()))?;
        Ok((
            out,
            LayerRouting {
                logits,
                weights: routed.weights,
                selected: routed.selected,
            },
        ))
    }

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<(usize, usize)> {
        let batch = tokens.len();
        let len = tokens.first().map_or(0, Vec::len);
        if batch == 0 || len == 0 {
            return Err(Error::Input("empty token batch".into()));
        }
        if tokens.iter().any(|s| s.len() != len) {
            return Err(Error::Input("sequences in a batch must have equal length".into()));
        }
        if len > self.config.seq_len {
            return Err(Error::Input(format!(
                "sequence length {len} exceeds seq_len {}",
                self.config.seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().flatten().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab
            )));
        }
        Ok((batch, len))
    }

    /// Records a full forward pass. With `track_grad` every parameter leaf
    /// requires a gradient.
    pub fn forward_graph(&self, tokens: &[Vec<usize>], track_grad: bool) -> Result<ForwardPass> {
        let (batch, len) = self.check_tokens(tokens)?;
        let c = &self.config;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, track_grad);
        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let te = g.gather_rows(vars[self.tok_emb.index()], &ids)?;
        let pe = g.gather_rows(vars[self.pos_emb.index()], &positions)?;
        let mut x = g.add(te, pe)?;
        let mut routing = Vec::with_capacity(c.layers);
        for layer in &self.layers {
            let h = g.layer_norm(x, vars[layer.ln1.gain.index()], vars[layer.ln1.bias.index()])?;
            let q = g.matmul(h, vars[layer.wq.index()])?;
            let k = g.matmul(h, vars[layer.wk.index()])?;
            let v = g.matmul(h, vars[layer.wv.index()])?;
            let a = g.causal_attention(q, k, v, batch, len, c.heads)?;
            let a = g.matmul(a, vars[layer.wo.index()])?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, vars[layer.ln2.gain.index()], vars[layer.ln2.bias.index()])?;
            let (y, r) = self.moe_on_graph(&mut g, &vars, layer, h, batch, len)?;
            x = g.add(x, y)?;
            routing.push(r);
        }
        let h = g.layer_norm(x, vars[self.ln_f.gain.index()], vars[self.ln_f.bias.index()])?;
        let logits = g.matmul(h, vars[self.lm_head.index()])?;
        Ok(ForwardPass {
            graph: g,
            logits,
            routing,
            params: vars,
            batch,
            tokens: len,
        })
    }

    /// One MoE layer applied to `x` of shape `(batch, tokens, hidden)`.
    pub fn moe_layer_forward(&self, layer: usize, x: &Tensor) -> Result<MoeLayerOutput> {
        let c = &self.config;
        let s = x.shape();
        if s.len() != 3 || s[2] != c.hidden {
            return Err(Error::dim("moe_layer_forward", s, &[0, 0, c.hidden]));
        }
        let (batch, tokens) = (s[0], s[1]);
        let lp = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Parameter(format!("layer {layer} out of range")))?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let h = g.constant(x.clone().reshape(vec![batch * tokens, c.hidden])?);
        let (y, r) = self.moe_on_graph(&mut g, &vars, lp, h, batch, tokens)?;
        let logits = Tensor::new(vec![batch, tokens, c.experts], g.value(r.logits).data().to_vec())?;
        let weights = Tensor::new(vec![batch, tokens, c.experts], g.value(r.weights).data().to_vec())?;
        Ok(MoeLayerOutput {
            output: g.value(y).clone().reshape(s.to_vec())?,
            logits: RouterLogits::new(logits)?,
            weights: RoutingWeights::from_probabilities(weights, c.temperature)?,
            selected: r.selected,
        })
    }

    /// Forward pass returning logits, per-sequence traces and routing
    /// artifacts.
    pub fn lm_forward(&self, tokens: &[Vec<usize>]) -> Result<LmOutput> {
        let pass = self.forward_graph(tokens, false)?;
        let c = &self.config;
        let (batch, len) = (pass.batch, pass.tokens);
        let g = &pass.graph;
        let logits = Tensor::new(vec![batch, len, c.vocab], g.value(pass.logits).data().to_vec())?;
        let mut routing = Vec::with_capacity(c.layers);
        for r in &pass.routing {
            let shape = vec![batch, len, c.experts];
            let rl = RouterLogits::new(Tensor::new(shape.clone(), g.value(r.logits).data().to_vec())?)?;
            let rw = RoutingWeights::from_probabilities(
                Tensor::new(shape, g.value(r.weights).data().to_vec())?,
                c.temperature,
            )?;
            routing.push((rl, rw, r.selected.clone()));
        }
        let traces = (0..batch)
            .map(|b| {
                let layers = routing
                    .iter()
                    .map(|(_, w, s)| LayerTrace {
                        selections: (0..len).map(|t| s.token(b, t).to_vec()).collect(),
                        weights: Some((0..len).map(|t| w.row(b, t).to_vec()).collect()),
                    })
                    .collect();
                RoutingTrace::new(c.experts, layers)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LmOutput {
            logits,
            traces,
            routing,
        })
    }

    /// Greedy decoding of `n` tokens after `prompt`. Once the sequence
    /// outgrows `seq_len`, the model sees the most recent `seq_len` tokens.
    pub fn generate(&self, prompt: &[usize], n: usize) -> Result<Generation> {
        if n == 0 {
            return Err(Error::Parameter("generate needs n >= 1".into()));
        }
        let c = &self.config;
        let first = self.lm_forward(&[prompt.to_vec()])?;
        let mut layers: Vec<LayerTrace> = first.traces[0].layers().to_vec();
        let mut seq = prompt.to_vec();
        let mut next = argmax(last_row(&first.logits));
        for _ in 0..n {
            seq.push(next);
            let start = seq.len().saturating_sub(c.seq_len);
            let out = self.lm_forward(&[seq[start..].to_vec()])?;
            let step = &out.traces[0];
            let last = step.tokens() - 1;
            for (l, layer) in layers.iter_mut().enumerate() {
                layer.selections.push(step.layer(l).selections[last].clone());
                if let (Some(ws), Some(src)) = (&mut layer.weights, &step.layer(l).weights) {
                    ws.push(src[last].clone());
                }
            }
            next = argmax(last_row(&out.logits));
        }
        let generated = seq[prompt.len()..].to_vec();
        Ok(Generation {
            tokens: seq,
            generated,
            trace: RoutingTrace::new(c.experts, layers)?,
        })
    }
}

fn last_row(logits: &Tensor) -> &[f64] {
    logits.row(logits.rows() - 1)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
