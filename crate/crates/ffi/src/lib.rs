//! C ABI for routing traces, replacement metrics, offload replay and
//! checkpointed models.
//!
//! Every fallible function returns a [`MoeStatus`]. On failure a message is
//! kept per thread and can be read with [`moe_last_error_message`]. Handles
//! are opaque; each `*_free` accepts null.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use moe_core::experts::{expert_param_count, ExpertKind};
use moe_core::losses::{bles_loss, load_balance_loss};
use moe_core::model::{load_checkpoint, Model, ModelConfig};
use moe_core::numerics::Tensor;
use moe_core::offload::{delta_uniform, exrep, replay_offload, OffloadCostModel};
use moe_core::routing::{LoadFractions, RoutingWeights, SelectedExperts};
use moe_core::trace::{LayerTrace, RoutingTrace};
use moe_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    TraceError = 3,
    IoError = 4,
    CheckpointError = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque routing trace.
pub struct MoeTrace {
    inner: RoutingTrace,
}

/// Opaque model loaded from a checkpoint.
pub struct MoeModel {
    inner: Model,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MoeCostModel {
    pub expert_bytes: f64,
    pub bandwidth: f64,
    pub compute_per_token: f64,
    pub shared_bytes: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MoeOffloadReport {
    pub tokens: u64,
    pub exrep_pct: f64,
    pub swap_events: u64,
    pub tokens_per_sec: f64,
    pub peak_resident_bytes: u64,
    pub full_model_bytes: u64,
    pub delta_uniform_pct: f64,
    pub initial_load_secs: f64,
    pub total_secs: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MoeParamCount {
    pub active: u64,
    pub total: u64,
    pub per_expert: u64,
    pub shared: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MoeBles {
    pub hard: u64,
    pub hard_norm: f64,
    pub soft: f64,
    pub soft_norm: f64,
    pub loss: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MoeStatus {
    match e {
        Error::Trace { .. } => MoeStatus::TraceError,
        Error::Io(_) => MoeStatus::IoError,
        Error::Checkpoint(_) => MoeStatus::CheckpointError,
        _ => MoeStatus::InvalidArgument,
    }
}

struct Fail(MoeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MoeStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MoeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MoeStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MoeStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn trace_arg<'a>(t: *const MoeTrace) -> Result<&'a RoutingTrace, Fail> {
    t.as_ref().map(|t| &t.inner).ok_or_else(|| null("trace"))
}

fn boxed_trace(inner: RoutingTrace) -> *mut MoeTrace {
    Box::into_raw(Box::new(MoeTrace { inner }))
}

/// Message of the last failed call on this thread, or null. The pointer
/// is valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn moe_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a trace from `ids`, laid out as `[layer][token][k]`.
///
/// # Safety
/// `ids` must point to `layers * tokens * k` values and `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn moe_trace_from_selections(
    ids: *const u32,
    layers: usize,
    tokens: usize,
    k: usize,
    num_experts: usize,
    out: *mut *mut MoeTrace,
) -> MoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ids = slice_arg(ids, layers * tokens * k, "ids")?;
        if layers == 0 || k == 0 {
            return Err(Fail(MoeStatus::InvalidArgument, "layers and k must be positive".into()));
        }
        let per_layer = tokens * k;
        let layer_traces = (0..layers)
            .map(|l| LayerTrace {
                selections: (0..tokens)
                    .map(|t| {
                        let start = l * per_layer + t * k;
                        ids[start..start + k].iter().map(|&x| x as usize).collect()
                    })
                    .collect(),
                weights: None,
            })
            .collect();
        *out = boxed_trace(RoutingTrace::new(num_experts, layer_traces)?);
        Ok(())
    })
}

/// Single-layer trace from an expert-major 0/1 matrix of
/// `experts * tokens` cells.
///
/// # Safety
/// `cells` must point to `experts * tokens` bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_trace_from_activity_matrix(
    cells: *const u8,
    experts: usize,
    tokens: usize,
    out: *mut *mut MoeTrace,
) -> MoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cells = slice_arg(cells, experts * tokens, "cells")?;
        let rows: Vec<Vec<u8>> = cells.chunks(tokens.max(1)).map(<[u8]>::to_vec).collect();
        *out = boxed_trace(RoutingTrace::from_activity_matrix(&rows)?);
        Ok(())
    })
}

/// Reads a line-delimited JSON trace file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_trace_load(path: *const c_char, out: *mut *mut MoeTrace) -> MoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = boxed_trace(RoutingTrace::load(&path_arg(path)?)?);
        Ok(())
    })
}

/// # Safety
/// `trace` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn moe_trace_save(trace: *const MoeTrace, path: *const c_char) -> MoeStatus {
    guard(|| {
        trace_arg(trace)?.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `trace` must come from this library and outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_trace_shape(
    trace: *const MoeTrace,
    layers: *mut usize,
    tokens: *mut usize,
    num_experts: *mut usize,
) -> MoeStatus {
    guard(|| {
        let t = trace_arg(trace)?;
        *out_arg(layers, "layers")? = t.num_layers();
        *out_arg(tokens, "tokens")? = t.tokens();
        *out_arg(num_experts, "num_experts")? = t.num_experts();
        Ok(())
    })
}

/// Hard transition count `H` and its normalization for one layer.
///
/// # Safety
/// `trace` must come from this library and outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_trace_hard_replacements(
    trace: *const MoeTrace,
    layer: usize,
    hard: *mut u64,
    hard_norm: *mut f64,
) -> MoeStatus {
    guard(|| {
        let t = trace_arg(trace)?;
        if layer >= t.num_layers() {
            return Err(Fail(MoeStatus::InvalidArgument, format!("layer {layer} out of range")));
        }
        let (h, n) = moe_core::losses::hard_replacements(&t.selected(layer)?);
        *out_arg(hard, "hard")? = h as u64;
        *out_arg(hard_norm, "hard_norm")? = n;
        Ok(())
    })
}

/// # Safety
/// `trace` must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_trace_exrep(trace: *const MoeTrace, out: *mut f64) -> MoeStatus {
    guard(|| {
        *out_arg(out, "out")? = exrep(trace_arg(trace)?);
        Ok(())
    })
}

/// Overall deviation from uniform usage; when `per_layer` is non-null it
/// receives one value per layer.
///
/// # Safety
/// `trace` must come from this library; `per_layer`, if non-null, must
/// hold `layers` values.
#[no_mangle]
pub unsafe extern "C" fn moe_trace_delta_uniform(
    trace: *const MoeTrace,
    overall: *mut f64,
    per_layer: *mut f64,
) -> MoeStatus {
    guard(|| {
        let t = trace_arg(trace)?;
        let (o, layers) = delta_uniform(t);
        *out_arg(overall, "overall")? = o;
        if !per_layer.is_null() {
            slice::from_raw_parts_mut(per_layer, layers.len()).copy_from_slice(&layers);
        }
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid; `trace` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn moe_replay_offload(
    trace: *const MoeTrace,
    cost: *const MoeCostModel,
    out: *mut MoeOffloadReport,
) -> MoeStatus {
    guard(|| {
        let t = trace_arg(trace)?;
        let c = cost.as_ref().ok_or_else(|| null("cost"))?;
        let cost = OffloadCostModel::new(c.expert_bytes, c.bandwidth, c.compute_per_token, c.shared_bytes)?;
        let r = replay_offload(t, &cost)?;
        *out_arg(out, "out")? = MoeOffloadReport {
            tokens: r.tokens as u64,
            exrep_pct: r.exrep_pct,
            swap_events: r.swap_events as u64,
            tokens_per_sec: r.tokens_per_sec,
            peak_resident_bytes: r.peak_resident_bytes,
            full_model_bytes: r.full_model_bytes,
            delta_uniform_pct: r.delta_uniform_pct,
            initial_load_secs: r.initial_load_secs,
            total_secs: r.total_secs,
        };
        Ok(())
    })
}

/// # Safety
/// `trace` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn moe_trace_free(trace: *mut MoeTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// BlES terms for routing probabilities `weights` (`batch*tokens*experts`)
/// and selections `ids` (`batch*tokens*k`).
///
/// # Safety
/// Buffers must hold the stated number of elements and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_bles_loss(
    weights: *const f64,
    ids: *const u32,
    batch: usize,
    tokens: usize,
    experts: usize,
    k: usize,
    out: *mut MoeBles,
) -> MoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let w = slice_arg(weights, batch * tokens * experts, "weights")?;
        let ids = slice_arg(ids, batch * tokens * k, "ids")?;
        let w = RoutingWeights::from_probabilities(Tensor::new(vec![batch, tokens, experts], w.to_vec())?, 1.0)?;
        let s = SelectedExperts::from_indices(ids.iter().map(|&x| x as usize).collect(), batch, tokens, k, experts)?;
        let b = bles_loss(&w, &s)?;
        *out = MoeBles {
            hard: b.hard as u64,
            hard_norm: b.hard_norm,
            soft: b.soft,
            soft_norm: b.soft_norm,
            loss: b.loss,
        };
        Ok(())
    })
}

/// Sequence-level load balancing over `layers * sequences * experts`
/// fractions `f` and mean probabilities `p`.
///
/// # Safety
/// Buffers must hold the stated number of elements and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_load_balance_loss(
    f: *const f64,
    p: *const f64,
    layers: usize,
    sequences: usize,
    experts: usize,
    out: *mut f64,
) -> MoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let n = layers * sequences * experts;
        let (f, p) = (slice_arg(f, n, "f")?, slice_arg(p, n, "p")?);
        let rows = |v: &[f64], l: usize| -> Vec<Vec<f64>> {
            (0..sequences)
                .map(|s| v[(l * sequences + s) * experts..(l * sequences + s + 1) * experts].to_vec())
                .collect()
        };
        let stats: Vec<LoadFractions> = (0..layers)
            .map(|l| LoadFractions {
                fractions: rows(f, l),
                mean_probs: rows(p, l),
            })
            .collect();
        *out = load_balance_loss(&stats, experts)?;
        Ok(())
    })
}

/// Parameter accounting of a layout. `expert_kind` is 0 for dense and 1
/// for weight-decomposed experts.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_param_count(
    layers: usize,
    hidden: usize,
    inter: usize,
    vocab: usize,
    seq_len: usize,
    experts: usize,
    active: usize,
    expert_kind: u32,
    rank: usize,
    out: *mut MoeParamCount,
) -> MoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let kind = match expert_kind {
            0 => ExpertKind::Dense,
            1 => ExpertKind::Wd,
            k => return Err(Fail(MoeStatus::InvalidArgument, format!("unknown expert kind {k}"))),
        };
        let c = ModelConfig {
            layers,
            hidden,
            inter,
            vocab,
            seq_len,
            experts,
            active,
            expert_kind: kind,
            rank,
            heads: 1,
            ..ModelConfig::default()
        };
        c.validate()?;
        let p = expert_param_count(&c);
        *out = MoeParamCount {
            active: p.active as u64,
            total: p.total as u64,
            per_expert: p.per_expert as u64,
            shared: p.shared as u64,
        };
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn moe_model_load(path: *const c_char, out: *mut *mut MoeModel) -> MoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ckpt = load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MoeModel { inner: ckpt.model }));
        Ok(())
    })
}

/// Vocabulary size of a loaded model.
///
/// # Safety
/// `model` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn moe_model_vocab_size(model: *const MoeModel, out: *mut usize) -> MoeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(out, "out")? = m.inner.config().vocab;
        Ok(())
    })
}

/// Greedy generation of `n` tokens. `out_tokens` receives prompt plus
/// generated ids and must hold `capacity >= prompt_len + n` values. When
/// `out_trace` is non-null it receives a new trace handle.
///
/// # Safety
/// Buffers must hold the stated number of elements; `model` must come
/// from this library.
#[no_mangle]
pub unsafe extern "C" fn moe_model_generate(
    model: *const MoeModel,
    prompt: *const u32,
    prompt_len: usize,
    n: usize,
    out_tokens: *mut u32,
    capacity: usize,
    out_trace: *mut *mut MoeTrace,
) -> MoeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let prompt = slice_arg(prompt, prompt_len, "prompt")?;
        if capacity < prompt_len + n {
            return Err(Fail(
                MoeStatus::BufferTooSmall,
                format!("capacity {capacity} < {}", prompt_len + n),
            ));
        }
        if out_tokens.is_null() {
            return Err(null("out_tokens"));
        }
        let ids: Vec<usize> = prompt.iter().map(|&x| x as usize).collect();
        let g = m.inner.generate(&ids, n)?;
        let dst = slice::from_raw_parts_mut(out_tokens, g.tokens.len());
        for (d, &s) in dst.iter_mut().zip(&g.tokens) {
            *d = s as u32;
        }
        if !out_trace.is_null() {
            *out_trace = boxed_trace(g.trace);
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn moe_model_free(model: *mut MoeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
