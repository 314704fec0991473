use super::*;
use crate::experts::expert_forward;
use crate::losses::objective;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(experts: usize, active: usize, kind: ExpertKind) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        inter: 16,
        vocab: 11,
        seq_len: 8,
        experts,
        active,
        expert_kind: kind,
        rank: 4,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

fn model(c: ModelConfig, seed: u64) -> Model {
    Model::new(c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_input(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < tol, "{x} vs {y}");
    }
}

#[test]
fn single_expert_layer_is_that_expert() {
    for kind in [ExpertKind::Dense, ExpertKind::Wd] {
        let m = model(tiny(1, 1, kind), 1);
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(2), vec![2, 5, 8]);
        let out = m.moe_layer_forward(0, &x).unwrap();
        let want = expert_forward(&m.expert(0, 0), &x).unwrap();
        assert_close(out.output.data(), want.data(), 1e-12);
        assert!(out.selected.indices().iter().all(|&e| e == 0));
    }
}

#[test]
fn identical_experts_with_all_active_equal_one_expert() {
    let mut m = model(tiny(4, 4, ExpertKind::Dense), 3);
    let e0 = m.expert(0, 0);
    for e in 1..4 {
        m.set_expert(0, e, &e0).unwrap();
    }
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(4), vec![1, 6, 8]);
    let out = m.moe_layer_forward(0, &x).unwrap();
    let want = expert_forward(&e0, &x).unwrap();
    assert_close(out.output.data(), want.data(), 1e-12);
}

#[test]
fn uniform_router_with_all_active_averages_experts() {
    let mut m = model(tiny(3, 3, ExpertKind::Dense), 5);
    let id = m.layers[0].router;
    m.params.set(id, Tensor::zeros(vec![8, 3])).unwrap();
    let x = random_input(&mut ChaCha8Rng::seed_from_u64(6), vec![1, 4, 8]);
    let out = m.moe_layer_forward(0, &x).unwrap();
    let mut mean = vec![0.0; x.numel()];
    for e in 0..3 {
        let y = expert_forward(&m.expert(0, e), &x).unwrap();
        mean.iter_mut().zip(y.data()).for_each(|(a, b)| *a += b / 3.0);
    }
    assert_close(out.output.data(), &mean, 1e-12);
}

#[test]
fn moe_layer_matches_brute_force_mixture() {
    for kind in [ExpertKind::Dense, ExpertKind::Wd] {
        let mut c = tiny(4, 2, kind);
        c.temperature = 1.7;
        let m = model(c, 7);
        let x = random_input(&mut ChaCha8Rng::seed_from_u64(8), vec![2, 5, 8]);
        let out = m.moe_layer_forward(0, &x).unwrap();
        let router = m.router(0);
        let outputs: Vec<Tensor> = (0..4).map(|e| expert_forward(&m.expert(0, e), &x).unwrap()).collect();
        for r in 0..10 {
            let xr = x.row(r);
            let logits: Vec<f64> = (0..4)
                .map(|e| (0..8).map(|h| xr[h] * router.data()[h * 4 + e]).sum())
                .collect();
            let z: f64 = logits.iter().map(|l| (1.7 * l).exp()).sum();
            let p: Vec<f64> = logits.iter().map(|l| (1.7 * l).exp() / z).collect();
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
            let chosen = &order[..2];
            let s: f64 = chosen.iter().map(|&e| p[e]).sum();
            let mut want = vec![0.0; 8];
            for &e in chosen {
                for h in 0..8 {
                    want[h] += p[e] / s * outputs[e].row(r)[h];
                }
            }
            assert_close(out.output.row(r), &want, 1e-12);
            let b = r / 5;
            let t = r % 5;
            assert_eq!(out.selected.token(b, t), chosen);
        }
    }
}

#[test]
fn logits_shape_covers_single_token() {
    let m = model(tiny(4, 2, ExpertKind::Dense), 9);
    let out = m.lm_forward(&[vec![3], vec![7]]).unwrap();
    assert_eq!(out.logits.shape(), &[2, 1, 11]);
    assert_eq!(out.traces.len(), 2);
    assert_eq!(out.traces[0].tokens(), 1);
}

#[test]
fn prefix_logits_do_not_depend_on_future_tokens() {
    let m = model(tiny(4, 2, ExpertKind::Wd), 10);
    let a = m.lm_forward(&[vec![1, 2, 3, 4, 5, 6]]).unwrap();
    let b = m.lm_forward(&[vec![1, 2, 3, 9, 0, 10]]).unwrap();
    assert_eq!(&a.logits.data()[..3 * 11], &b.logits.data()[..3 * 11]);
    assert_ne!(&a.logits.data()[3 * 11..], &b.logits.data()[3 * 11..]);
}

#[test]
fn rejects_bad_token_batches() {
    let m = model(tiny(4, 2, ExpertKind::Dense), 11);
    assert!(m.lm_forward(&[]).is_err());
    assert!(m.lm_forward(&[vec![1, 2], vec![1]]).is_err());
    assert!(m.lm_forward(&[vec![11]]).is_err());
    assert!(m.lm_forward(&[vec![0; 9]]).is_err());
    assert!(m.generate(&[1], 0).is_err());
}

#[test]
fn generation_is_deterministic_and_traced() {
    let m = model(tiny(4, 2, ExpertKind::Dense), 12);
    let one = m.generate(&[1, 2], 1).unwrap();
    assert_eq!(one.generated.len(), 1);
    assert_eq!(one.trace.tokens(), 3);
    let a = m.generate(&[1, 2], 5).unwrap();
    let b = m.generate(&[1, 2], 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.generated[0], one.generated[0]);
}

#[test]
fn long_generation_records_every_token() {
    let c = ModelConfig {
        layers: 3,
        seq_len: 16,
        ..tiny(4, 2, ExpertKind::Dense)
    };
    let m = model(c, 13);
    let g = m.generate(&[0, 5], 30).unwrap();
    assert_eq!(g.tokens.len(), 32);
    assert_eq!(g.trace.num_layers(), 3);
    assert_eq!(g.trace.tokens(), 32);
    for l in 0..3 {
        assert!(g.trace.layer(l).selections.iter().all(|s| s.len() == 2));
    }
}

#[test]
fn trace_agrees_with_router_recomputation() {
    let m = model(tiny(4, 2, ExpertKind::Dense), 14);
    let seq = vec![1, 4, 1, 5, 9, 2];
    let out = m.lm_forward(&[seq]).unwrap();
    let trace = &out.traces[0];
    for l in 0..2 {
        let (logits, weights, selected) = &out.routing[l];
        let (w2, s2) = crate::routing::route(logits, m.config().temperature, 2).unwrap();
        assert_close(weights.values().data(), w2.values().data(), 1e-12);
        assert_eq!(selected.indices(), s2.indices());
        for t in 0..6 {
            assert_eq!(trace.layer(l).selections[t], s2.token(0, t));
        }
    }
}

#[test]
fn permuting_experts_permutes_the_trace_only() {
    let m = model(tiny(4, 2, ExpertKind::Wd), 15);
    let perm = [2, 0, 3, 1];
    let p = m.with_permuted_experts(&perm).unwrap();
    let tokens = vec![vec![3, 1, 4, 1, 5, 9, 2]];
    let a = m.lm_forward(&tokens).unwrap();
    let b = p.lm_forward(&tokens).unwrap();
    assert_close(a.logits.data(), b.logits.data(), 1e-10);
    let mut inv = [0; 4];
    for (j, &src) in perm.iter().enumerate() {
        inv[src] = j;
    }
    for l in 0..2 {
        for t in 0..7 {
            let mapped: Vec<usize> = a.traces[0].layer(l).selections[t].iter().map(|&e| inv[e]).collect();
            assert_eq!(mapped, b.traces[0].layer(l).selections[t]);
        }
    }
    assert!(m.with_permuted_experts(&[0, 0, 1, 2]).is_err());
}

#[test]
fn parameter_count_formula_matches_layout() {
    for kind in [ExpertKind::Dense, ExpertKind::Wd] {
        let c = tiny(4, 2, kind);
        let m = model(c.clone(), 16);
        assert_eq!(crate::experts::expert_param_count(&c).total, m.params().num_scalars());
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = model(tiny(4, 2, ExpertKind::Wd), 17);
    let ckpt = Checkpoint {
        model: m.clone(),
        vocab: Some(vec!['a', 'b', '\n']),
        step: 42,
    };
    let mut buf = Vec::new();
    write_checkpoint(&ckpt, &mut buf).unwrap();
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.step, 42);
    assert_eq!(back.vocab, ckpt.vocab);
    assert_eq!(back.model.config(), m.config());
    for (a, b) in back.model.params().tensors().iter().zip(m.params().tensors()) {
        assert_eq!(a.data(), b.data());
    }
    let tokens = vec![vec![1, 2, 3]];
    assert_eq!(
        back.model.lm_forward(&tokens).unwrap().logits.data(),
        m.lm_forward(&tokens).unwrap().logits.data()
    );

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::Checkpoint(_))));
    assert!(read_checkpoint(&buf[..buf.len() - 8]).is_err());
}

fn selections(m: &Model, tokens: &[Vec<usize>]) -> Vec<Vec<usize>> {
    m.forward_graph(tokens, false)
        .unwrap()
        .routing
        .iter()
        .map(|r| r.selected.indices().to_vec())
        .collect()
}

fn loss_of(m: &Model, tokens: &[Vec<usize>], targets: &[Option<usize>]) -> f64 {
    let mut pass = m.forward_graph(tokens, false).unwrap();
    objective(&mut pass, targets, m.config()).unwrap().1.total
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    for kind in [ExpertKind::Dense, ExpertKind::Wd] {
        let mut c = tiny(4, 2, kind);
        c.lb_coef = 0.5;
        c.bles_coef = 0.5;
        let m = model(c, 18);
        let tokens = vec![vec![1, 3, 5, 7, 9, 2], vec![4, 4, 0, 10, 6, 8]];
        let targets: Vec<Option<usize>> = tokens
            .iter()
            .flat_map(|s| s[1..].iter().map(|&t| Some(t)).chain([None]))
            .collect();
        let mut pass = m.forward_graph(&tokens, true).unwrap();
        let (total, _) = objective(&mut pass, &targets, m.config()).unwrap();
        let grads = pass.graph.backward(total).unwrap();
        let base_sel = selections(&m, &tokens);

        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let eps = 1e-5;
        let mut checked = 0;
        for _ in 0..150 {
            let p = rng.gen_range(0..m.params().len());
            let j = rng.gen_range(0..m.params().tensors()[p].numel());
            let bumped = |d: f64| {
                let mut mm = m.clone();
                mm.params_mut().tensors_mut()[p].data_mut()[j] += d;
                mm
            };
            let (up, down) = (bumped(eps), bumped(-eps));
            if selections(&up, &tokens) != base_sel || selections(&down, &tokens) != base_sel {
                continue;
            }
            let numeric = (loss_of(&up, &tokens, &targets) - loss_of(&down, &tokens, &targets)) / (2.0 * eps);
            let analytic = grads.get_or_zeros(pass.params[p], m.params().tensors()[p].numel())[j];
            let err = crate::numerics::relative_error(analytic, numeric, 1e-9);
            assert!(err < 1e-4, "{} [{j}]: {analytic} vs {numeric}", m.params().names()[p]);
            checked += 1;
        }
        assert!(checked > 100, "only {checked} coordinates checked");
    }
}
