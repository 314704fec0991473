//! Per-layer record of the experts selected for every token of one
//! sequence, and its line-delimited JSON file format.
//!
//! ```text
//! {"num_experts":8,"top_k":2,"num_layers":2}
//! {"token":0,"layer_id":0,"selected_expert_ids":[4,7]}
//! {"token":0,"layer_id":1,"selected_expert_ids":[0,3],"weights":[...]}
//! ...
//! ```
//!
//! The header line is optional; without it the expert count is inferred as
//! one past the largest index seen and `top_k` from the first record. One
//! record per (token, layer); tokens of each layer appear in order.
//! `token` and `weights` are optional.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::SelectedExperts;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTrace {
    /// `selections[t]` holds the experts chosen for token `t`.
    pub selections: Vec<Vec<usize>>,
    /// Optional full routing-probability rows, one per token.
    pub weights: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    num_experts: usize,
    layers: Vec<LayerTrace>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    num_experts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_layers: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token: Option<usize>,
    layer_id: usize,
    selected_expert_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Record(Record),
    Header(Header),
}

fn trace_err(line: usize, message: impl Into<String>) -> Error {
    Error::Trace {
        line,
        message: message.into(),
    }
}

impl RoutingTrace {
    /// Validates and wraps per-layer selections. Every layer must cover the
    /// same tokens with a constant number of distinct in-range experts.
    pub fn new(num_experts: usize, layers: Vec<LayerTrace>) -> Result<Self> {
        let tokens = layers.first().map_or(0, |l| l.selections.len());
        for (li, layer) in layers.iter().enumerate() {
            if layer.selections.len() != tokens {
                return Err(trace_err(0, format!(
                    "layer {li} has {} tokens, expected {tokens}",
                    layer.selections.len()
                )));
            }
            let k = layer.selections.first().map_or(0, Vec::len);
            for (t, sel) in layer.selections.iter().enumerate() {
                check_selection(sel, k, num_experts)
                    .map_err(|m| trace_err(0, format!("layer {li} token {t}: {m}")))?;
            }
            if let Some(w) = &layer.weights {
                if w.len() != tokens || w.iter().any(|r| r.len() != num_experts) {
                    return Err(trace_err(0, format!("layer {li}: weight rows do not match")));
                }
            }
        }
        Ok(Self {
            num_experts,
            layers,
        })
    }

    /// Builds a single-layer trace from an expert-major 0/1 activity matrix
    /// (`matrix[e][t] == 1` when expert `e` is active at token `t`).
    pub fn from_activity_matrix(matrix: &[Vec<u8>]) -> Result<Self> {
        let tokens = matrix.first().map_or(0, Vec::len);
        let mut selections = vec![Vec::new(); tokens];
        for (e, row) in matrix.iter().enumerate() {
            if row.len() != tokens {
                return Err(trace_err(e + 1, "ragged activity matrix"));
            }
            for (t, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => selections[t].push(e),
                    other => return Err(trace_err(e + 1, format!("cell value {other} is not 0/1"))),
                }
            }
        }
        let layer = LayerTrace {
            selections,
            weights: None,
        };
        RoutingTrace::new(matrix.len(), vec![layer])
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.selections.len())
    }

    pub fn layers(&self) -> &[LayerTrace] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerTrace {
        &self.layers[l]
    }

    /// Experts per token in layer `l`.
    pub fn k(&self, l: usize) -> usize {
        self.layers[l].selections.first().map_or(0, Vec::len)
    }

    /// Layer `l` as a batch-of-one selection tensor.
    pub fn selected(&self, l: usize) -> Result<SelectedExperts> {
        let layer = &self.layers[l];
        let k = self.k(l);
        let indices = layer.selections.iter().flatten().copied().collect();
        SelectedExperts::from_indices(indices, 1, layer.selections.len(), k, self.num_experts)
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut header: Option<Header> = None;
        let mut layers: Vec<LayerTrace> = Vec::new();
        let mut max_index = 0usize;
        let mut records = 0usize;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line?;
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(text)
                .map_err(|e| trace_err(lineno, format!("invalid record: {e}")))?;
            let rec = match parsed {
                Line::Header(h) => {
                    if records > 0 || header.is_some() {
                        return Err(trace_err(lineno, "header must be the first line"));
                    }
                    if h.num_experts == 0 {
                        return Err(trace_err(lineno, "num_experts must be positive"));
                    }
                    header = Some(h);
                    continue;
                }
                Line::Record(r) => r,
            };
            records += 1;
            if let Some(n) = header.as_ref().and_then(|h| h.num_layers) {
                if rec.layer_id >= n {
                    return Err(trace_err(lineno, format!("layer_id {} >= num_layers {n}", rec.layer_id)));
                }
            }
            if rec.layer_id >= layers.len() {
                layers.resize_with(rec.layer_id + 1, LayerTrace::default);
            }
            let layer = &mut layers[rec.layer_id];
            if let Some(t) = rec.token {
                if t != layer.selections.len() {
                    return Err(trace_err(lineno, format!(
                        "token {t} out of order for layer {} (expected {})",
                        rec.layer_id,
                        layer.selections.len()
                    )));
                }
            }
            let layer_k = header
                .as_ref()
                .and_then(|h| h.top_k)
                .or_else(|| layer.selections.first().map(Vec::len))
                .unwrap_or(rec.selected_expert_ids.len());
            let bound = header.as_ref().map_or(usize::MAX, |h| h.num_experts);
            check_selection(&rec.selected_expert_ids, layer_k, bound)
                .map_err(|m| trace_err(lineno, m))?;
            max_index = max_index.max(rec.selected_expert_ids.iter().copied().max().unwrap_or(0));
            match (&mut layer.weights, rec.weights) {
                (Some(ws), Some(w)) => ws.push(w),
                (None, Some(w)) if layer.selections.is_empty() => layer.weights = Some(vec![w]),
                (None, None) => {}
                _ => return Err(trace_err(lineno, "weights must be given for all or no tokens of a layer")),
            }
            layer.selections.push(rec.selected_expert_ids);
        }
        if records == 0 {
            return Err(trace_err(0, "trace contains no records"));
        }
        let num_experts = header.map_or(max_index + 1, |h| h.num_experts);
        RoutingTrace::new(num_experts, layers)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            num_experts: self.num_experts,
            top_k: self.layers.first().map(|_| self.k(0)),
            num_layers: Some(self.layers.len()),
        };
        let io = |e: serde_json::Error| Error::Io(e.into());
        writeln!(w, "{}", serde_json::to_string(&header).map_err(io)?)?;
        for t in 0..self.tokens() {
            for (l, layer) in self.layers.iter().enumerate() {
                let rec = Record {
                    token: Some(t),
                    layer_id: l,
                    selected_expert_ids: layer.selections[t].clone(),
                    weights: layer.weights.as_ref().map(|ws| ws[t].clone()),
                };
                writeln!(w, "{}", serde_json::to_string(&rec).map_err(io)?)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn check_selection(sel: &[usize], k: usize, num_experts: usize) -> std::result::Result<(), String> {
    if sel.len() != k {
        return Err(format!("expected {k} experts, found {}", sel.len()));
    }
    if k == 0 {
        return Err("no experts selected".into());
    }
    for (j, &e) in sel.iter().enumerate() {
        if e >= num_experts {
            return Err(format!("expert index {e} >= {num_experts}"));
        }
        if sel[..j].contains(&e) {
            return Err(format!("duplicate expert {e}"));
        }
    }
    Ok(())
}
