use std::ffi::{CStr, CString};
use std::ptr;

use moe_ffi::*;

fn last_error() -> String {
    let p = moe_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn alternating_trace() -> *mut MoeTrace {
    let ids = [0u32, 1, 0];
    let mut t = ptr::null_mut();
    let s = unsafe { moe_trace_from_selections(ids.as_ptr(), 1, 3, 1, 2, &mut t) };
    assert_eq!(s, MoeStatus::Ok);
    t
}

#[test]
fn trace_metrics_through_the_abi() {
    let t = alternating_trace();
    let (mut layers, mut tokens, mut experts) = (0, 0, 0);
    assert_eq!(unsafe { moe_trace_shape(t, &mut layers, &mut tokens, &mut experts) }, MoeStatus::Ok);
    assert_eq!((layers, tokens, experts), (1, 3, 2));

    let (mut h, mut hn) = (0u64, 0.0);
    assert_eq!(unsafe { moe_trace_hard_replacements(t, 0, &mut h, &mut hn) }, MoeStatus::Ok);
    assert_eq!((h, hn), (4, 1.0));

    let mut pct = 0.0;
    assert_eq!(unsafe { moe_trace_exrep(t, &mut pct) }, MoeStatus::Ok);
    assert_eq!(pct, 100.0);

    let (mut du, mut per) = (0.0, [0.0f64; 1]);
    assert_eq!(unsafe { moe_trace_delta_uniform(t, &mut du, per.as_mut_ptr()) }, MoeStatus::Ok);
    assert!((du - 100.0 / 6.0).abs() < 1e-9);
    assert_eq!(per[0], du);

    let cost = MoeCostModel {
        expert_bytes: 1000.0,
        bandwidth: 10_000.0,
        compute_per_token: 0.01,
        shared_bytes: 1.0,
    };
    let mut r = MoeOffloadReport::default();
    assert_eq!(unsafe { moe_replay_offload(t, &cost, &mut r) }, MoeStatus::Ok);
    assert_eq!(r.swap_events, 2);
    assert_eq!(r.tokens, 3);
    unsafe { moe_trace_free(t) };
}

#[test]
fn errors_set_status_and_message() {
    let mut t = ptr::null_mut();
    let ids = [0u32, 5];
    let s = unsafe { moe_trace_from_selections(ids.as_ptr(), 1, 2, 1, 2, &mut t) };
    assert_eq!(s, MoeStatus::TraceError);
    assert!(last_error().contains("5"));
    assert!(t.is_null());

    let s = unsafe { moe_trace_exrep(ptr::null(), &mut 0.0) };
    assert_eq!(s, MoeStatus::NullPointer);
    assert!(last_error().contains("trace"));

    let path = CString::new("/nonexistent/trace.jsonl").unwrap();
    assert_ne!(unsafe { moe_trace_load(path.as_ptr(), &mut t) }, MoeStatus::Ok);

    let tr = alternating_trace();
    let bad = MoeCostModel::default();
    let mut r = MoeOffloadReport::default();
    assert_eq!(unsafe { moe_replay_offload(tr, &bad, &mut r) }, MoeStatus::InvalidArgument);
    assert_eq!(unsafe { moe_trace_hard_replacements(tr, 3, &mut 0, &mut 0.0) }, MoeStatus::InvalidArgument);
    unsafe { moe_trace_free(tr) };
    unsafe { moe_trace_free(ptr::null_mut()) };
    unsafe { moe_model_free(ptr::null_mut()) };
}

#[test]
fn trace_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.jsonl").to_str().unwrap()).unwrap();
    let t = alternating_trace();
    assert_eq!(unsafe { moe_trace_save(t, path.as_ptr()) }, MoeStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { moe_trace_load(path.as_ptr(), &mut back) }, MoeStatus::Ok);
    let mut pct = 0.0;
    unsafe { moe_trace_exrep(back, &mut pct) };
    assert_eq!(pct, 100.0);
    unsafe {
        moe_trace_free(t);
        moe_trace_free(back);
    }
}

#[test]
fn activity_matrix_counts() {
    let text = moe_core::fixtures::BLES_MATRIX;
    let m = moe_core::fixtures::parse_activity_matrix(text).unwrap();
    let cells: Vec<u8> = m.concat();
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { moe_trace_from_activity_matrix(cells.as_ptr(), 8, 35, &mut t) }, MoeStatus::Ok);
    let (mut h, mut hn) = (0u64, 0.0);
    unsafe { moe_trace_hard_replacements(t, 0, &mut h, &mut hn) };
    assert_eq!(h / 2, 11);
    assert!((hn - 11.0 / 68.0).abs() < 1e-12);
    unsafe { moe_trace_free(t) };
}

#[test]
fn losses_and_param_counts() {
    let w = [1.0, 0.0, 0.0, 1.0];
    let ids = [0u32, 1];
    let mut b = MoeBles::default();
    assert_eq!(unsafe { moe_bles_loss(w.as_ptr(), ids.as_ptr(), 1, 2, 2, 1, &mut b) }, MoeStatus::Ok);
    assert_eq!((b.hard, b.hard_norm, b.soft, b.soft_norm, b.loss), (2, 1.0, 2.0, 1.0, 1.0));

    let u = [0.25f64; 4];
    let mut lb = 0.0;
    assert_eq!(unsafe { moe_load_balance_loss(u.as_ptr(), u.as_ptr(), 1, 1, 4, &mut lb) }, MoeStatus::Ok);
    assert!((lb - 1.0).abs() < 1e-12);

    let mut p = MoeParamCount::default();
    assert_eq!(unsafe { moe_param_count(2, 8, 32, 16, 8, 4, 2, 1, 4, &mut p) }, MoeStatus::Ok);
    assert_eq!(p.per_expert, 480);
    assert_eq!(p.total - p.active, 2 * 2 * 480);
    assert_eq!(unsafe { moe_param_count(2, 8, 32, 16, 8, 4, 2, 0, 4, &mut p) }, MoeStatus::Ok);
    assert_eq!(p.per_expert, 768);
    assert_eq!(unsafe { moe_param_count(2, 8, 32, 16, 8, 4, 2, 7, 4, &mut p) }, MoeStatus::InvalidArgument);
}

#[test]
fn model_generation_through_the_abi() {
    use moe_core::model::{save_checkpoint, Checkpoint, Model, ModelConfig};
    use rand::SeedableRng;
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        inter: 16,
        vocab: 10,
        seq_len: 16,
        experts: 4,
        active: 2,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("m.bin");
    let ckpt = Checkpoint {
        model: model.clone(),
        vocab: None,
        step: 0,
    };
    save_checkpoint(&ckpt, &file).unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { moe_model_load(path.as_ptr(), &mut m) }, MoeStatus::Ok);
    let mut vocab = 0;
    unsafe { moe_model_vocab_size(m, &mut vocab) };
    assert_eq!(vocab, 10);

    let prompt = [1u32, 2, 3];
    let mut small = [0u32; 4];
    let s = unsafe { moe_model_generate(m, prompt.as_ptr(), 3, 5, small.as_mut_ptr(), 4, ptr::null_mut()) };
    assert_eq!(s, MoeStatus::BufferTooSmall);

    let mut buf = [0u32; 8];
    let mut trace = ptr::null_mut();
    let s = unsafe { moe_model_generate(m, prompt.as_ptr(), 3, 5, buf.as_mut_ptr(), 8, &mut trace) };
    assert_eq!(s, MoeStatus::Ok);
    let want = model.generate(&[1, 2, 3], 5).unwrap();
    let got: Vec<usize> = buf.iter().map(|&x| x as usize).collect();
    assert_eq!(got, want.tokens);
    let (mut l, mut t, mut e) = (0, 0, 0);
    unsafe { moe_trace_shape(trace, &mut l, &mut t, &mut e) };
    assert_eq!((l, t, e), (2, 8, 4));
    unsafe {
        moe_trace_free(trace);
        moe_model_free(m);
    }
}
