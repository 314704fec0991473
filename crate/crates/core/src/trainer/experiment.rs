use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{train, Corpus, TrainConfig};
use crate::error::{Error, Result};
use crate::experts::ExpertKind;

/// Overrides applied to a base config; unset fields keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub experts: Option<usize>,
    pub active: Option<usize>,
    pub expert_kind: Option<ExpertKind>,
    pub rank: Option<usize>,
    pub lb_coef: Option<f64>,
    pub bles_coef: Option<f64>,
}

impl Variant {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let m = &mut cfg.model;
        m.experts = self.experts.unwrap_or(m.experts);
        m.active = self.active.unwrap_or(m.active);
        m.expert_kind = self.expert_kind.unwrap_or(m.expert_kind);
        m.rank = self.rank.unwrap_or(m.rank);
        m.lb_coef = self.lb_coef.unwrap_or(m.lb_coef);
        m.bles_coef = self.bles_coef.unwrap_or(m.bles_coef);
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    /// `None` when the variant trained and evaluated successfully.
    pub error: Option<String>,
    pub experts: usize,
    pub active: usize,
    pub expert_kind: ExpertKind,
    pub lb_coef: f64,
    pub bles_coef: f64,
    pub val_ce: f64,
    pub val_ppl: f64,
    pub exrep_pct: f64,
    pub delta_uniform_pct: f64,
    pub tokens_per_sec: f64,
    pub final_train_ce: f64,
    pub train_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

fn run_one(base: &TrainConfig, corpus: &Corpus, v: &Variant) -> ComparisonRow {
    let cfg = v.apply(base);
    let mut row = empty_row(&cfg, v);
    match train(&cfg, corpus, None) {
        Ok(out) => {
            let e = &out.final_eval;
            row.val_ce = e.ce;
            row.val_ppl = e.perplexity;
            row.exrep_pct = e.exrep_pct;
            row.delta_uniform_pct = e.delta_uniform_pct;
            row.tokens_per_sec = e.tokens_per_sec;
            row.final_train_ce = out.history.last().map_or(f64::NAN, |m| m.ce);
            row.train_secs = out.train_secs;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Trains every variant on its own thread with shared seed and data. A
/// failing or panicking variant yields a row with `error` set.
pub fn run_experiment(base: &TrainConfig, corpus: &Corpus, variants: &[Variant]) -> ComparisonReport {
    let rows = std::thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|v| (v, s.spawn(move || run_one(base, corpus, v))))
            .collect();
        handles
            .into_iter()
            .map(|(v, h)| {
                h.join().unwrap_or_else(|_| {
                    let mut row = empty_row(&v.apply(base), v);
                    row.error = Some("variant panicked".into());
                    row
                })
            })
            .collect()
    });
    ComparisonReport { rows }
}

fn empty_row(cfg: &TrainConfig, v: &Variant) -> ComparisonRow {
    ComparisonRow {
        name: v.name.clone(),
        error: None,
        experts: cfg.model.experts,
        active: cfg.model.active,
        expert_kind: cfg.model.expert_kind,
        lb_coef: cfg.model.lb_coef,
        bles_coef: cfg.model.bles_coef,
        val_ce: f64::NAN,
        val_ppl: f64::NAN,
        exrep_pct: f64::NAN,
        delta_uniform_pct: f64::NAN,
        tokens_per_sec: f64::NAN,
        final_train_ce: f64::NAN,
        train_secs: 0.0,
    }
}

const HEADER: [&str; 14] = [
    "name",
    "status",
    "experts",
    "active",
    "expert_kind",
    "lb_coef",
    "bles_coef",
    "val_ce",
    "val_ppl",
    "exrep_pct",
    "delta_uniform_pct",
    "tokens_per_sec",
    "final_train_ce",
    "train_secs",
];

impl ComparisonReport {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let map = |e: csv::Error| Error::Evaluation(e.to_string());
        let mut out = csv::Writer::from_writer(w);
        out.write_record(HEADER).map_err(map)?;
        for r in &self.rows {
            let status = r.error.clone().map_or_else(|| "ok".to_string(), |e| format!("failed: {e}"));
            out.write_record([
                r.name.clone(),
                status,
                r.experts.to_string(),
                r.active.to_string(),
                r.expert_kind.to_string(),
                r.lb_coef.to_string(),
                r.bles_coef.to_string(),
                format!("{:.6}", r.val_ce),
                format!("{:.4}", r.val_ppl),
                format!("{:.4}", r.exrep_pct),
                format!("{:.4}", r.delta_uniform_pct),
                format!("{:.4}", r.tokens_per_sec),
                format!("{:.6}", r.final_train_ce),
                format!("{:.2}", r.train_secs),
            ])
            .map_err(map)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Evaluation(e.to_string()))
    }

    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn base() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            seq_len: 8,
            steps: 3,
            eval_batches: 1,
            model: ModelConfig {
                layers: 1,
                heads: 1,
                hidden: 8,
                inter: 16,
                seq_len: 8,
                experts: 8,
                active: 2,
                rank: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn report_has_a_row_per_variant_and_isolates_failures() {
        let corpus = Corpus::from_text(&"abcdefgh ".repeat(300), 0.9, 0).unwrap();
        let variants = vec![
            Variant {
                bles_coef: Some(0.0),
                ..Variant::named("baseline")
            },
            Variant {
                bles_coef: Some(0.1),
                ..Variant::named("bles")
            },
            Variant {
                active: Some(9),
                ..Variant::named("broken")
            },
        ];
        let report = run_experiment(&base(), &corpus, &variants);
        assert_eq!(report.rows.len(), 3);
        assert!(report.row("baseline").unwrap().error.is_none());
        assert!(report.row("bles").unwrap().exrep_pct.is_finite());
        assert!(report.row("broken").unwrap().error.is_some());

        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(3).unwrap().contains("failed"));

        let again = run_experiment(&base(), &corpus, &variants);
        for (a, b) in report.rows.iter().zip(&again.rows) {
            assert_eq!((a.exrep_pct.to_bits(), a.val_ce.to_bits()), (b.exrep_pct.to_bits(), b.val_ce.to_bits()));
        }
    }
}
