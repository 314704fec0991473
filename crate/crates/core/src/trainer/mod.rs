//! Optimization loop, validation metrics and the variant-comparison
//! harness.

mod config;
mod corpus;
mod experiment;
mod optim;

pub use config::TrainConfig;
pub use corpus::{decode, encode, Corpus, MAX_VOCAB, SPLIT_BLOCK};
pub use experiment::{run_experiment, ComparisonReport, ComparisonRow, Variant};
pub use optim::{clip_global_norm, learning_rate, AdamParams, Optimizer, OptimizerKind};

use std::io::Write;
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::objective;
use crate::model::{Model, ModelConfig};
use crate::offload::{delta_uniform, exrep, replay_offload, OffloadCostModel};
use crate::routing::SelectedExperts;
use crate::trace::{LayerTrace, RoutingTrace};

/// Input windows and their next-token targets, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Option<usize>>,
}

impl Batch {
    /// Windows of `seq_len + 1` tokens starting at `offsets`.
    pub fn from_offsets(stream: &[usize], offsets: &[usize], seq_len: usize) -> Result<Self> {
        let mut inputs = Vec::with_capacity(offsets.len());
        let mut targets = Vec::with_capacity(offsets.len() * seq_len);
        for &o in offsets {
            let w = stream
                .get(o..o + seq_len + 1)
                .ok_or_else(|| Error::Input(format!("window at {o} runs past the stream")))?;
            inputs.push(w[..seq_len].to_vec());
            targets.extend(w[1..].iter().map(|&t| Some(t)));
        }
        Ok(Self { inputs, targets })
    }

    pub fn sample(stream: &[usize], batch: usize, seq_len: usize, rng: &mut impl Rng) -> Result<Self> {
        if stream.len() < seq_len + 1 {
            return Err(Error::Ingestion(format!(
                "training split has {} tokens, need at least {}",
                stream.len(),
                seq_len + 1
            )));
        }
        let hi = stream.len() - seq_len;
        let offsets: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..hi)).collect();
        Self::from_offsets(stream, &offsets, seq_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub ce: f64,
    pub lb: f64,
    pub bles: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Replacement percentage of this batch, averaged over layers.
    pub exrep_pct: f64,
}

fn routing_diagnostic(selected: &[&SelectedExperts]) -> String {
    selected
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let mut counts = vec![0usize; s.num_experts()];
            s.indices().iter().for_each(|&e| counts[e] += 1);
            format!("layer {l} expert counts {counts:?}")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// One forward, backward and optimizer update.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &Batch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    let mut pass = model.forward_graph(&batch.inputs, true)?;
    let (total, losses) = objective(&mut pass, &batch.targets, model.config())?;
    let selected: Vec<&SelectedExperts> = pass.routing.iter().map(|r| &r.selected).collect();
    if !losses.total.is_finite() {
        return Err(Error::NonFinite {
            step,
            diagnostic: format!(
                "ce {} lb {} bles {}; {}",
                losses.ce,
                losses.lb,
                losses.bles,
                routing_diagnostic(&selected)
            ),
        });
    }
    let grads = pass.graph.backward(total)?;
    let mut flat: Vec<Vec<f64>> = pass
        .params
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.numel()).to_vec())
        .collect();
    if let Some(i) = flat.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite {
            step,
            diagnostic: format!(
                "gradient of {} is not finite; {}",
                model.params().names()[i],
                routing_diagnostic(&selected)
            ),
        });
    }
    let grad_norm = clip_global_norm(&mut flat, cfg.grad_clip);
    let lr = learning_rate(step, cfg.steps, cfg.warmup_steps, cfg.lr, cfg.min_lr_ratio);
    if lr > 0.0 {
        optimizer.step(model.params_mut().tensors_mut(), &flat, lr);
    }
    let layers = losses.bles_layers.len().max(1) as f64;
    let exrep_pct = 100.0 * losses.bles_layers.iter().map(|b| b.hard_norm).sum::<f64>() / layers;
    Ok(StepMetrics {
        step,
        ce: losses.ce,
        lb: losses.lb,
        bles: losses.bles,
        total: losses.total,
        grad_norm,
        lr,
        exrep_pct,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub ce: f64,
    pub perplexity: f64,
    /// Mean per-sequence replacement percentage.
    pub exrep_pct: f64,
    /// Deviation from uniform expert usage pooled over the whole set.
    pub delta_uniform_pct: f64,
    /// Simulated offloaded decode throughput over all sequences.
    pub tokens_per_sec: f64,
    pub sequences: usize,
}

/// Non-overlapping validation windows, at most `cfg.eval_batches` batches.
pub fn eval_batches(stream: &[usize], cfg: &TrainConfig) -> Result<Vec<Batch>> {
    let windows = stream.len().saturating_sub(1) / cfg.seq_len;
    if windows == 0 {
        return Err(Error::Ingestion(format!(
            "validation split has {} tokens, need at least {}",
            stream.len(),
            cfg.seq_len + 1
        )));
    }
    let n = windows.min(cfg.eval_batches * cfg.batch_size);
    let offsets: Vec<usize> = (0..n).map(|i| i * cfg.seq_len).collect();
    offsets
        .chunks(cfg.batch_size)
        .map(|o| Batch::from_offsets(stream, o, cfg.seq_len))
        .collect()
}

pub fn cost_model(model: &ModelConfig, cfg: &TrainConfig) -> Result<OffloadCostModel> {
    OffloadCostModel::for_config(model, cfg.bytes_per_param, cfg.bandwidth, cfg.compute_per_token)
}

/// Validation cross-entropy plus routing metrics of the traces.
pub fn evaluate(model: &Model, batches: &[Batch], cost: &OffloadCostModel) -> Result<EvalMetrics> {
    let mut nll = 0.0;
    let mut count = 0usize;
    let mut traces = Vec::new();
    for batch in batches {
        let out = model.lm_forward(&batch.inputs)?;
        for (row, target) in batch.targets.iter().enumerate() {
            if let Some(t) = target {
                let logits = out.logits.row(row);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                nll += lse - logits[*t];
                count += 1;
            }
        }
        traces.extend(out.traces);
    }
    if count == 0 {
        return Err(Error::Evaluation("no validation targets".into()));
    }
    let ce = nll / count as f64;
    let exrep_pct = traces.iter().map(exrep).sum::<f64>() / traces.len() as f64;
    let mut pooled: Vec<LayerTrace> = vec![LayerTrace::default(); traces[0].num_layers()];
    let (mut tokens, mut secs) = (0usize, 0.0);
    for tr in &traces {
        for (l, layer) in tr.layers().iter().enumerate() {
            pooled[l].selections.extend(layer.selections.iter().cloned());
        }
        let r = replay_offload(tr, cost)?;
        tokens += r.tokens;
        secs += r.tokens as f64 / r.tokens_per_sec;
    }
    let (delta_uniform_pct, _) = delta_uniform(&RoutingTrace::new(traces[0].num_experts(), pooled)?);
    Ok(EvalMetrics {
        ce,
        perplexity: ce.exp(),
        exrep_pct,
        delta_uniform_pct,
        tokens_per_sec: tokens as f64 / secs,
        sequences: traces.len(),
    })
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogRecord<'a> {
    Step(&'a StepMetrics),
    Eval { step: usize, metrics: &'a EvalMetrics },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub vocab: Vec<char>,
    pub history: Vec<StepMetrics>,
    pub evals: Vec<(usize, EvalMetrics)>,
    pub final_eval: EvalMetrics,
    pub train_secs: f64,
}

fn log_line(log: &mut Option<&mut dyn Write>, record: &LogRecord<'_>) -> Result<()> {
    if let Some(w) = log {
        let line = serde_json::to_string(record).map_err(|e| Error::Evaluation(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Trains a fresh model on `corpus`. Weight initialization and batch order
/// both derive from `cfg.seed`.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut mc = cfg.model.clone();
    mc.vocab = corpus.vocab.len();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::new(mc, &mut init_rng)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(1);
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.adam(), model.params().tensors());
    let valid = eval_batches(&corpus.valid, cfg)?;
    let cost = cost_model(model.config(), cfg)?;
    let started = Instant::now();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    for step in 0..cfg.steps {
        let batch = Batch::sample(&corpus.train, cfg.batch_size, cfg.seq_len, &mut batch_rng)?;
        let m = train_step(&mut model, &mut optimizer, &batch, cfg, step)?;
        log_line(&mut log, &LogRecord::Step(&m))?;
        if step % 100 == 0 {
            info!("step {step} ce {:.4} bles {:.4} exrep {:.2}%", m.ce, m.bles, m.exrep_pct);
        }
        history.push(m);
        if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 && step + 1 < cfg.steps {
            let e = evaluate(&model, &valid, &cost)?;
            log_line(&mut log, &LogRecord::Eval { step: step + 1, metrics: &e })?;
            evals.push((step + 1, e));
        }
    }
    let train_secs = started.elapsed().as_secs_f64();
    let final_eval = evaluate(&model, &valid, &cost)?;
    log_line(&mut log, &LogRecord::Eval { step: cfg.steps, metrics: &final_eval })?;
    Ok(TrainOutcome {
        model,
        vocab: corpus.vocab.clone(),
        history,
        evals,
        final_eval,
        train_secs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            seq_len: 8,
            steps: 5,
            eval_batches: 1,
            model: ModelConfig {
                layers: 2,
                heads: 2,
                hidden: 16,
                inter: 32,
                seq_len: 16,
                experts: 4,
                active: 2,
                rank: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn corpus() -> Corpus {
        let text = "the quick brown fox jumps over the lazy dog. ".repeat(200);
        Corpus::from_text(&text, 0.9, 1).unwrap()
    }

    #[test]
    fn batches_shift_targets_by_one() {
        let stream: Vec<usize> = (0..20).collect();
        let b = Batch::from_offsets(&stream, &[0, 5], 3).unwrap();
        assert_eq!(b.inputs, vec![vec![0, 1, 2], vec![5, 6, 7]]);
        let t: Vec<usize> = b.targets.iter().map(|t| t.unwrap()).collect();
        assert_eq!(t, vec![1, 2, 3, 6, 7, 8]);
        assert!(Batch::from_offsets(&stream, &[17], 3).is_err());
        assert!(Batch::sample(&stream[..3], 1, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    fn fresh(cfg: &TrainConfig, vocab: usize) -> Model {
        let mut mc = cfg.model.clone();
        mc.vocab = vocab;
        Model::new(mc, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let c = corpus();
        let cfg = TrainConfig {
            lr: 0.0,
            ..small_cfg()
        };
        let mut model = fresh(&cfg, c.vocab.len());
        let before = model.clone();
        let mut opt = Optimizer::new(cfg.optimizer, cfg.adam(), model.params().tensors());
        let batch = Batch::sample(&c.train, 2, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        train_step(&mut model, &mut opt, &batch, &cfg, 0).unwrap();
        for (a, b) in model.params().tensors().iter().zip(before.params().tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn sgd_step_moves_by_minus_lr_times_gradient() {
        let c = corpus();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            warmup_steps: 0,
            grad_clip: 0.0,
            ..small_cfg()
        };
        let mut model = fresh(&cfg, c.vocab.len());
        let before = model.clone();
        let batch = Batch::sample(&c.train, 2, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut pass = before.forward_graph(&batch.inputs, true).unwrap();
        let (total, _) = objective(&mut pass, &batch.targets, before.config()).unwrap();
        let grads = pass.graph.backward(total).unwrap();
        let mut opt = Optimizer::new(cfg.optimizer, cfg.adam(), model.params().tensors());
        let m = train_step(&mut model, &mut opt, &batch, &cfg, 0).unwrap();
        assert_eq!(m.lr, 0.05);
        for (i, (a, b)) in model.params().tensors().iter().zip(before.params().tensors()).enumerate() {
            let g = grads.get_or_zeros(pass.params[i], b.numel());
            for j in 0..a.numel() {
                let want = b.data()[j] - 0.05 * g[j];
                assert!((a.data()[j] - want).abs() < 1e-15, "{}", before.params().names()[i]);
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_routing_dump() {
        let c = corpus();
        let cfg = small_cfg();
        let mut model = fresh(&cfg, c.vocab.len());
        let id = model.params().find("lm_head").unwrap();
        let shape = model.params().get(id).shape().to_vec();
        let n = shape.iter().product();
        model.params_mut().set(id, crate::numerics::Tensor::new(shape, vec![f64::NAN; n]).unwrap()).unwrap();
        let mut opt = Optimizer::new(cfg.optimizer, cfg.adam(), model.params().tensors());
        let batch = Batch::sample(&c.train, 2, 8, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        match train_step(&mut model, &mut opt, &batch, &cfg, 7) {
            Err(Error::NonFinite { step, diagnostic }) => {
                assert_eq!(step, 7);
                assert!(diagnostic.contains("layer 0 expert counts"));
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let c = corpus();
        let cfg = small_cfg();
        let mut log_a = Vec::new();
        let a = train(&cfg, &c, Some(&mut log_a)).unwrap();
        let mut log_b = Vec::new();
        let b = train(&cfg, &c, Some(&mut log_b)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_eval, b.final_eval);
        assert_eq!(log_a, log_b);
        let lines = String::from_utf8(log_a).unwrap();
        assert_eq!(lines.lines().count(), cfg.steps + 1);
        assert!(lines.lines().next().unwrap().contains("\"kind\":\"step\""));
        assert!(a.final_eval.tokens_per_sec > 0.0);
        assert!(a.final_eval.exrep_pct >= 0.0 && a.final_eval.exrep_pct <= 100.0);
    }

    #[test]
    fn eval_windows_are_bounded() {
        let cfg = small_cfg();
        let stream: Vec<usize> = (0..100).map(|i| i % 5).collect();
        let b = eval_batches(&stream, &cfg).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].inputs.len(), 2);
        assert!(eval_batches(&stream[..8], &cfg).is_err());
    }
}
