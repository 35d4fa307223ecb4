use nn::functional::{gaussian_sample, kl_standard_normal, linear, lstm_cell, lstm_sequence, multi_head_attention};
use nn::gradcheck::{check_inputs, check_params, project};
use nn::{Bind, LayerNorm, Lstm, MultiHeadAttention, NnError, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

#[test]
fn linear_with_identity_is_identity() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap()).unwrap();
    let w = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 })).unwrap();
    let b = tape.constant(Tensor::zeros(&[3])).unwrap();
    let y = linear(&mut tape, x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn softmax_of_single_element_is_one() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1], vec![-4.2]).unwrap()).unwrap();
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0]);
}

#[test]
fn elementwise_and_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let rows = rng.gen_range(1..4);
        let cols = rng.gen_range(1..5);
        let x = rand_t(&mut rng, &[rows, cols]);
        let w = rand_t(&mut rng, &[rows, cols]);
        for op in ["tanh", "sigmoid", "softmax", "exp"] {
            let r = check_inputs(&[x.clone()], H, |t, v| {
                let y = match op {
                    "tanh" => t.tanh(v[0])?,
                    "sigmoid" => t.sigmoid(v[0])?,
                    "softmax" => t.softmax(v[0])?,
                    _ => t.exp(v[0])?,
                };
                project(t, y, &w)
            })
            .unwrap();
            assert!(r.max_rel_error < TOL, "{op}: {r:?}");
        }
        let gain = rand_t(&mut rng, &[cols]);
        let bias = rand_t(&mut rng, &[cols]);
        let r = check_inputs(&[x.clone(), gain, bias], H, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            project(t, y, &w)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "layer_norm: {r:?}");
    }
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (b, i, o) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5));
        let inputs = [rand_t(&mut rng, &[b, i]), rand_t(&mut rng, &[o, i]), rand_t(&mut rng, &[o])];
        let w = rand_t(&mut rng, &[b, o]);
        let r = check_inputs(&inputs, H, |t, v| {
            let y = linear(t, v[0], v[1], v[2])?;
            project(t, y, &w)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
    }
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let a = rand_t(&mut rng, &[4, 6]);
        let b = rand_t(&mut rng, &[2, 6]);
        let proj = rand_t(&mut rng, &[6, 6]);
        let r = check_inputs(&[a.clone(), b.clone()], H, |t, v| {
            let s = t.slice_cols(v[0], 1, 3)?;
            let c = t.concat_cols(&[s, v[0]])?;
            let sel = t.select_rows(c, &[3, 0, 0, 2])?;
            let tok = t.concat_tokens(v[0], 2, v[1], 1)?;
            let mean = t.mean_tokens(tok, 3)?;
            let st = t.stack_steps(&[mean, mean])?;
            let heads = t.split_heads(st, 2, 2, 3)?;
            let merged = t.merge_heads(heads, 2, 2, 3)?;
            let tiled = t.add_tiled(merged, v[1])?;
            let prod = t.matmul_t(tiled, true, v[0], false)?;
            let total = t.sum_squares(sel)?;
            let p = project(t, prod, &proj)?;
            t.add(total, p)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
    }
}

fn lstm_store(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> (Lstm, ParamStore) {
    let lstm = Lstm::new("cell", in_dim, hidden);
    let mut store = ParamStore::new();
    lstm.init(&mut store, rng).unwrap();
    (lstm, store)
}

#[test]
fn lstm_with_zero_params_stays_at_zero() {
    let lstm = Lstm::new("cell", 3, 4);
    let mut store = ParamStore::new();
    store.insert("cell.w_ih", Tensor::zeros(&[16, 3])).unwrap();
    store.insert("cell.w_hh", Tensor::zeros(&[16, 4])).unwrap();
    store.insert("cell.b", Tensor::zeros(&[16])).unwrap();
    let mut tape = Tape::new();
    let p = lstm.bind(&mut tape, &store, Bind::Train).unwrap();
    let x = tape.constant(Tensor::full(&[1, 3], 0.7)).unwrap();
    let h = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
    let c = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
    let (h2, c2) = lstm_cell(&mut tape, Some(x), h, c, &p).unwrap();
    assert!(tape.value(h2).data().iter().all(|v| *v == 0.0));
    assert!(tape.value(c2).data().iter().all(|v| *v == 0.0));
}

#[test]
fn saturated_forget_gate_preserves_cell() {
    let hidden = 3;
    let lstm = Lstm::new("cell", 2, hidden);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    store.insert("cell.w_ih", Tensor::uniform(&[12, 2], 0.1, &mut rng)).unwrap();
    store.insert("cell.w_hh", Tensor::uniform(&[12, 3], 0.1, &mut rng)).unwrap();
    let bias = Tensor::from_fn(&[12], |i| match i / hidden {
        0 => -20.0,
        1 => 20.0,
        _ => 0.0,
    });
    store.insert("cell.b", bias).unwrap();
    let mut tape = Tape::new();
    let p = lstm.bind(&mut tape, &store, Bind::Train).unwrap();
    let c0 = Tensor::new(&[1, 3], vec![0.4, -1.3, 2.0]).unwrap();
    let x = tape.constant(Tensor::full(&[1, 2], 0.3)).unwrap();
    let h = tape.constant(Tensor::full(&[1, 3], 0.1)).unwrap();
    let c = tape.constant(c0.clone()).unwrap();
    let (_, c2) = lstm_cell(&mut tape, Some(x), h, c, &p).unwrap();
    for (a, b) in tape.value(c2).data().iter().zip(c0.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn lstm_cell_and_sequence_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let (in_dim, hidden, batch, steps) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3), 3);
        let (lstm, store) = lstm_store(&mut rng, in_dim, hidden);
        let xs = rand_t(&mut rng, &[batch * steps, in_dim]);
        let h0 = rand_t(&mut rng, &[batch, hidden]);
        let c0 = rand_t(&mut rng, &[batch, hidden]);
        let w = rand_t(&mut rng, &[batch * steps, hidden]);
        let wc = rand_t(&mut rng, &[batch, hidden]);
        let r = check_params(&store, H, |t, s| {
            let p = lstm.bind(t, s, Bind::Train)?;
            let x = t.constant(xs.clone())?;
            let h = t.constant(h0.clone())?;
            let c = t.constant(c0.clone())?;
            let out = lstm_sequence(t, Some(x), steps, h, c, &p)?;
            let a = project(t, out.hidden_states, &w)?;
            let b = project(t, out.c, &wc)?;
            t.add(a, b)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "sequence params: {r:?}");
        let r = check_inputs(&[xs.clone(), h0.clone(), c0.clone()], H, |t, v| {
            let p = lstm.bind(t, &store, Bind::Frozen)?;
            let first = t.select_rows(v[0], &(0..batch).map(|b| b * steps).collect::<Vec<_>>())?;
            let (h, c) = lstm_cell(t, Some(first), v[1], v[2], &p)?;
            let a = project(t, h, &wc)?;
            let b = t.sum_squares(c)?;
            t.add(a, b)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "cell inputs: {r:?}");
    }
}

#[test]
fn single_step_sequence_matches_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (lstm, store) = lstm_store(&mut rng, 3, 4);
    let mut tape = Tape::new();
    let p = lstm.bind(&mut tape, &store, Bind::Frozen).unwrap();
    let x = tape.constant(rand_t(&mut rng, &[2, 3])).unwrap();
    let h = tape.constant(rand_t(&mut rng, &[2, 4])).unwrap();
    let c = tape.constant(rand_t(&mut rng, &[2, 4])).unwrap();
    let (h1, c1) = lstm_cell(&mut tape, Some(x), h, c, &p).unwrap();
    let seq = lstm_sequence(&mut tape, Some(x), 1, h, c, &p).unwrap();
    assert_eq!(tape.value(h1).data(), tape.value(seq.h).data());
    assert_eq!(tape.value(c1).data(), tape.value(seq.c).data());
}

#[test]
fn reversed_input_changes_final_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (lstm, store) = lstm_store(&mut rng, 2, 5);
    let xs = rand_t(&mut rng, &[6, 2]);
    let rev = Tensor::from_fn(&[6, 2], |i| xs.data()[(5 - i / 2) * 2 + i % 2]);
    let run = |input: &Tensor| {
        let mut tape = Tape::new();
        let p = lstm.bind(&mut tape, &store, Bind::Frozen).unwrap();
        let x = tape.constant(input.clone()).unwrap();
        let z = tape.constant(Tensor::zeros(&[1, 5])).unwrap();
        let out = lstm_sequence(&mut tape, Some(x), 6, z, z, &p).unwrap();
        tape.value(out.h).clone()
    };
    assert_ne!(run(&xs), run(&rev));
}

fn attention_store(rng: &mut ChaCha8Rng, width: usize, heads: usize) -> (MultiHeadAttention, ParamStore) {
    let mha = MultiHeadAttention::new("attn", width, heads);
    let mut store = ParamStore::new();
    mha.init(&mut store, rng).unwrap();
    (mha, store)
}

#[test]
fn single_token_attention_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mha, store) = attention_store(&mut rng, 4, 2);
    let q = rand_t(&mut rng, &[1, 4]);
    let kv = rand_t(&mut rng, &[1, 4]);
    let mut tape = Tape::new();
    let p = mha.bind(&mut tape, &store, Bind::Frozen).unwrap();
    let qv = tape.constant(q).unwrap();
    let kvv = tape.constant(kv).unwrap();
    let out = multi_head_attention(&mut tape, qv, kvv, 1, 1, 1, &p).unwrap();
    let v = p.v.forward(&mut tape, kvv).unwrap();
    let expect = p.o.forward(&mut tape, v).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(tape.value(expect).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_keys_get_equal_weights() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(&[1, 1, 2], vec![0.3, -1.0]).unwrap()).unwrap();
    let k = tape.constant(Tensor::new(&[1, 2, 2], vec![0.5, 0.2, 0.5, 0.2]).unwrap()).unwrap();
    let s = tape.batch_matmul(q, k, true).unwrap();
    let w = tape.softmax(s).unwrap();
    assert_eq!(tape.value(w).data(), &[0.5, 0.5]);
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..20 {
        let heads = rng.gen_range(1..3);
        let width = heads * rng.gen_range(1..3);
        let (batch, tq, tk) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (mha, store) = attention_store(&mut rng, width, heads);
        let q = rand_t(&mut rng, &[batch * tq, width]);
        let kv = rand_t(&mut rng, &[batch * tk, width]);
        let w = rand_t(&mut rng, &[batch * tq, width]);
        let r = check_params(&store, H, |t, s| {
            let p = mha.bind(t, s, Bind::Train)?;
            let qv = t.constant(q.clone())?;
            let kvv = t.constant(kv.clone())?;
            let out = multi_head_attention(t, qv, kvv, batch, tq, tk, &p)?;
            project(t, out, &w)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "params: {r:?}");
        let r = check_inputs(&[q.clone(), kv.clone()], H, |t, v| {
            let p = mha.bind(t, &store, Bind::Frozen)?;
            let out = multi_head_attention(t, v[0], v[1], batch, tq, tk, &p)?;
            project(t, out, &w)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "inputs: {r:?}");
    }
}

#[test]
fn gaussian_sample_examples_and_gradients() {
    let mut tape = Tape::new();
    let mean = tape.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let lv = tape.constant(Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap()).unwrap();
    let zero = tape.constant(Tensor::zeros(&[3])).unwrap();
    let z = gaussian_sample(&mut tape, mean, lv, zero).unwrap();
    assert_eq!(tape.value(z).data(), &[1.0, -2.0, 0.5]);
    let lv0 = tape.constant(Tensor::zeros(&[3])).unwrap();
    let n = tape.constant(Tensor::new(&[3], vec![0.1, 0.2, -0.3]).unwrap()).unwrap();
    let z = gaussian_sample(&mut tape, mean, lv0, n).unwrap();
    assert_eq!(tape.value(z).data(), &[1.1, -1.8, 0.2]);

    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..20 {
        let d = rng.gen_range(1..6);
        let inputs = [rand_t(&mut rng, &[1, d]), rand_t(&mut rng, &[1, d])];
        let noise = rand_t(&mut rng, &[1, d]);
        let w = rand_t(&mut rng, &[1, d]);
        let r = check_inputs(&inputs, H, |t, v| {
            let n = t.constant(noise.clone())?;
            let z = gaussian_sample(t, v[0], v[1], n)?;
            let a = project(t, z, &w)?;
            let kl = kl_standard_normal(t, v[0], v[1])?;
            t.add(a, kl)
        })
        .unwrap();
        assert!(r.max_rel_error < TOL, "{r:?}");
    }
}

#[test]
fn kl_closed_form_examples() {
    let mut tape = Tape::new();
    let zero = tape.constant(Tensor::zeros(&[4])).unwrap();
    let kl = kl_standard_normal(&mut tape, zero, zero).unwrap();
    assert_eq!(tape.value(kl).item(), 0.0);
    let mu = tape.constant(Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let kl = kl_standard_normal(&mut tape, mu, zero).unwrap();
    assert_eq!(tape.value(kl).item(), 0.5);
}

#[test]
fn layer_norm_module_normalizes_rows() {
    let ln = LayerNorm::new("ln", 4);
    let mut store = ParamStore::new();
    ln.init(&mut store).unwrap();
    let mut tape = Tape::new();
    let p = ln.bind(&mut tape, &store, Bind::Frozen).unwrap();
    let x = tape.constant(Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let y = p.forward(&mut tape, x).unwrap();
    let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12);
}

#[test]
fn non_finite_values_name_the_op() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2], 800.0)).unwrap();
    match tape.exp(x) {
        Err(NnError::NonFinite { op }) => assert_eq!(op, "exp"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn shape_errors_are_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(NnError::ShapeMismatch { .. })));
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mha, store) = attention_store(&mut rng, 4, 2);
        let q = rand_t(&mut rng, &[6, 4]);
        let mut tape = Tape::new();
        let p = mha.bind(&mut tape, &store, Bind::Train).unwrap();
        let qv = tape.constant(q).unwrap();
        let out = multi_head_attention(&mut tape, qv, qv, 2, 3, 3, &p).unwrap();
        let loss = tape.sum_squares(out).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = ParamStore::clone(&store);
        tape.accumulate_into(&mut grads).unwrap();
        (tape.value(loss).item().to_bits(), grads)
    };
    assert_eq!(run(), run());
}
