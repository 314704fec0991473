//! Command-line interface. `run` parses arguments, dispatches and maps
//! errors to exit codes: 0 success, 1 usage or configuration, 2 data,
//! 3 fixture failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::experts::ExpertKind;
use crate::fixtures;
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig};
use crate::offload::{replay_many, write_csv, OffloadCostModel, OffloadReport};
use crate::trace::RoutingTrace;
use crate::trainer::{self, decode, encode, run_experiment, Corpus, TrainConfig, Variant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_FIXTURE: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "moe", version, about = "Sparse MoE training, routing traces and offload simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a text corpus.
    Train(TrainArgs),
    /// Validation metrics of a checkpoint.
    Eval(EvalArgs),
    /// Greedy generation with a routing trace.
    Generate(GenerateArgs),
    /// Replay routing traces through the offload cost model.
    SimulateOffload(OffloadArgs),
    /// Train a set of variants and compare them.
    Ablate(AblateArgs),
    /// Check the bundled reference fixtures.
    Fixtures(FixtureArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// TOML training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Sets hidden size and derives intermediate size and rank from it.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub active: Option<usize>,
    #[arg(long, value_parser = parse_kind)]
    pub expert_kind: Option<ExpertKind>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub lb_coef: Option<f64>,
    #[arg(long)]
    pub bles_coef: Option<f64>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub compute_per_token: Option<f64>,
}

fn parse_kind(s: &str) -> std::result::Result<ExpertKind, String> {
    s.parse::<ExpertKind>().map_err(|e| e.to_string())
}

impl Overrides {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(p) = &self.corpus {
            cfg.corpus = Some(p.clone());
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        if let Some(h) = self.hidden {
            cfg.model = cfg.model.clone().with_hidden(h);
        }
        set!(
            seed => cfg.seed,
            steps => cfg.steps,
            batch_size => cfg.batch_size,
            seq_len => cfg.seq_len,
            lr => cfg.lr,
            bandwidth => cfg.bandwidth,
            compute_per_token => cfg.compute_per_token,
            layers => cfg.model.layers,
            experts => cfg.model.experts,
            active => cfg.model.active,
            expert_kind => cfg.model.expert_kind,
            rank => cfg.model.rank,
            lb_coef => cfg.model.lb_coef,
            bles_coef => cfg.model.bles_coef,
        );
        cfg.model.seq_len = cfg.model.seq_len.max(cfg.seq_len);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Output directory for the checkpoint, metrics log and final metrics.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Tokens to generate.
    #[arg(short = 'n', long, default_value_t = 128)]
    pub tokens: usize,
    /// Where to write the routing trace.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OffloadArgs {
    /// Trace files; may be repeated.
    #[arg(long, required = true)]
    pub trace: Vec<PathBuf>,
    #[arg(long, default_value_t = 1e8)]
    pub bandwidth: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub compute_per_token: f64,
    /// Bytes per expert; derived from the model config when omitted.
    #[arg(long)]
    pub expert_bytes: Option<f64>,
    #[arg(long)]
    pub shared_bytes: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    pub bytes_per_param: f64,
    /// TOML training config whose model sizes the experts.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for offload.csv and offload.json; CSV goes to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Comma-separated active-expert counts.
    #[arg(long, value_delimiter = ',')]
    pub sweep_active: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_experts: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_bles: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub sweep_kind: Vec<ExpertKind>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FixtureArgs {
    /// Read the activity matrices from this directory instead of the
    /// bundled copies.
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run(args: impl IntoIterator<Item = OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::SimulateOffload(a) => cmd_simulate_offload(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::Fixtures(a) => cmd_fixtures(a, out),
    }
}

fn json(v: &impl serde::Serialize) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Evaluation(e.to_string()))
}

fn load_corpus(cfg: &TrainConfig) -> Result<Corpus> {
    let path = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Ingestion("no corpus given (--corpus or `corpus` in the config)".into()))?;
    Corpus::from_path(path, cfg.train_ratio, cfg.seed)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Input(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.overrides.resolve()?;
    let corpus = load_corpus(&cfg)?;
    create_dir(&a.out)?;
    let mut log = fs::File::create(a.out.join("metrics.jsonl"))?;
    let outcome = trainer::train(&cfg, &corpus, Some(&mut log))?;
    let ckpt = Checkpoint {
        model: outcome.model,
        vocab: Some(outcome.vocab),
        step: cfg.steps,
    };
    save_checkpoint(&ckpt, &a.out.join("checkpoint.bin"))?;
    fs::write(a.out.join("config.toml"), cfg.to_toml()?)?;
    let report = json(&outcome.final_eval)?;
    fs::write(a.out.join("eval.json"), &report)?;
    writeln!(out, "{report}")?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut cfg = a.overrides.resolve()?;
    cfg.seq_len = cfg.seq_len.min(ckpt.model.config().seq_len);
    let corpus = load_corpus(&cfg)?;
    if ckpt.vocab.as_deref() != Some(corpus.vocab.as_slice()) {
        return Err(Error::Input("corpus vocabulary does not match the checkpoint".into()));
    }
    let batches = trainer::eval_batches(&corpus.valid, &cfg)?;
    let cost = trainer::cost_model(ckpt.model.config(), &cfg)?;
    let metrics = trainer::evaluate(&ckpt.model, &batches, &cost)?;
    let report = json(&metrics)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        fs::write(dir.join("eval.json"), &report)?;
    }
    writeln!(out, "{report}")?;
    Ok(EXIT_OK)
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> Result<i32> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let vocab = ckpt
        .vocab
        .ok_or_else(|| Error::Checkpoint("checkpoint has no vocabulary".into()))?;
    let prompt = encode(&vocab, &a.prompt)?;
    if prompt.is_empty() {
        return Err(Error::Input("prompt is empty".into()));
    }
    let g = ckpt.model.generate(&prompt, a.tokens)?;
    if let Some(p) = &a.trace {
        g.trace.save(p)?;
    }
    writeln!(out, "{}", decode(&vocab, &g.tokens))?;
    Ok(EXIT_OK)
}

fn offload_cost(a: &OffloadArgs) -> Result<OffloadCostModel> {
    let model: ModelConfig = match &a.config {
        Some(p) => TrainConfig::load(p)?.model,
        None => ModelConfig::default(),
    };
    let derived = OffloadCostModel::for_config(&model, a.bytes_per_param, a.bandwidth, a.compute_per_token)?;
    OffloadCostModel::new(
        a.expert_bytes.unwrap_or(derived.expert_bytes),
        a.bandwidth,
        a.compute_per_token,
        a.shared_bytes.unwrap_or(derived.shared_bytes),
    )
}

fn cmd_simulate_offload(a: OffloadArgs, out: &mut dyn Write) -> Result<i32> {
    let cost = offload_cost(&a)?;
    let traces = a
        .trace
        .iter()
        .map(|p| {
            RoutingTrace::load(p).map_err(|e| match e {
                Error::Trace { line, message } => Error::Trace {
                    line,
                    message: format!("{}: {message}", p.display()),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = replay_many(&traces, &cost).into_iter().collect::<Result<Vec<OffloadReport>>>()?;
    let named: Vec<(String, OffloadReport)> = a
        .trace
        .iter()
        .map(|p| p.display().to_string())
        .zip(reports)
        .collect();
    for (name, r) in &named {
        writeln!(
            out,
            "trace={name} exrep_pct={:.4} tokens_per_sec={:.4} delta_uniform_pct={:.4} swap_events={}",
            r.exrep_pct, r.tokens_per_sec, r.delta_uniform_pct, r.swap_events
        )?;
    }
    match &a.out {
        Some(dir) => {
            create_dir(dir)?;
            write_csv(fs::File::create(dir.join("offload.csv"))?, &named)?;
            fs::write(dir.join("offload.json"), json(&named)?)?;
        }
        None => write_csv(&mut *out, &named)?,
    }
    Ok(EXIT_OK)
}

fn variants(a: &AblateArgs) -> Vec<Variant> {
    let mut out = vec![Variant::named("base")];
    if a.sweep_active.is_empty() && a.sweep_experts.is_empty() && a.sweep_bles.is_empty() && a.sweep_kind.is_empty() {
        return [0.0, 0.1]
            .iter()
            .map(|&b| Variant {
                bles_coef: Some(b),
                ..Variant::named(format!("bles={b}"))
            })
            .collect();
    }
    fn extend<T: Copy + std::fmt::Display>(
        out: Vec<Variant>,
        values: &[T],
        key: &str,
        set: impl Fn(&mut Variant, T),
    ) -> Vec<Variant> {
        if values.is_empty() {
            return out;
        }
        out.iter()
            .flat_map(|v| {
                values.iter().map({
                    let set = &set;
                    move |&x| {
                        let mut nv = v.clone();
                        set(&mut nv, x);
                        nv.name = if v.name == "base" {
                            format!("{key}={x}")
                        } else {
                            format!("{},{key}={x}", v.name)
                        };
                        nv
                    }
                })
            })
            .collect()
    }
    out = extend(out, &a.sweep_experts, "experts", |v, x| v.experts = Some(x));
    out = extend(out, &a.sweep_active, "active", |v, x| v.active = Some(x));
    out = extend(out, &a.sweep_kind, "kind", |v, x| v.expert_kind = Some(x));
    extend(out, &a.sweep_bles, "bles", |v, x| v.bles_coef = Some(x))
}

fn cmd_ablate(a: AblateArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = a.overrides.resolve()?;
    let corpus = load_corpus(&cfg)?;
    let report = run_experiment(&cfg, &corpus, &variants(&a));
    create_dir(&a.out)?;
    report.write_csv(fs::File::create(a.out.join("comparison.csv"))?)?;
    fs::write(a.out.join("comparison.json"), report.to_json()?)?;
    report.write_csv(&mut *out)?;
    Ok(EXIT_OK)
}

fn cmd_fixtures(a: FixtureArgs, out: &mut dyn Write) -> Result<i32> {
    let checks = match &a.dir {
        Some(d) => fixtures::run_from_dir(d)?,
        None => fixtures::run_bundled(),
    };
    write!(out, "{}", fixtures::render(&checks))?;
    let failed = checks.iter().filter(|c| !c.pass).count();
    writeln!(out, "{} passed, {failed} failed", checks.len() - failed)?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FIXTURE })
}
