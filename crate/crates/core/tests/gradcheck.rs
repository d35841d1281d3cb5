//! Analytic gradients against central finite differences.

use pvc_core::nn::layers::{Conv1d, FeedForward, Gru, Init, LayerNorm, Linear, MultiHeadAttention};
use pvc_core::nn::{Graph, Matrix, ParamId, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compares backward() with (f(p+h) - f(p-h)) / 2h for every scalar of every parameter.
fn check(store: &mut ParamStore, loss: impl Fn(&mut Graph, &ParamStore) -> Var) {
    let trainable = vec![true; store.len()];
    let mut g = Graph::new(trainable.clone(), true, 0);
    let l = loss(&mut g, store);
    let grads = g.backward(l);
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(trainable.clone(), true, 0);
        let l = loss(&mut g, store);
        g.value(l).item()
    };
    let h = 1e-6;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        for k in 0..n {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let tol = 1e-5 * (1.0 + numeric.abs());
            assert!(
                (numeric - analytic).abs() <= tol,
                "{}[{k}]: analytic {analytic} numeric {numeric}",
                store.name(id)
            );
        }
    }
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let (r, c) = g.shape(y);
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), r, c);
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.sum_all(p)
}

#[test]
fn elementwise_and_matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut rng, 3, 4));
    let b = s.add("b", random(&mut rng, 4, 5));
    let c = s.add("c", random(&mut rng, 3, 5));
    let row = s.add("row", random(&mut rng, 1, 5));
    check(&mut s, |g, s| {
        let (a, b, c, row) = (g.param(s, a), g.param(s, b), g.param(s, c), g.param(s, row));
        let ab = g.matmul(a, b);
        let t1 = g.tanh(ab);
        let t2 = g.sigmoid(c);
        let m = g.mul(t1, t2);
        let d = g.sub(m, c);
        let e = g.add_row(d, row);
        let f = g.mul_row(e, row);
        let sq = g.square(f);
        let ex = g.exp(t2);
        let sum = g.add(sq, ex);
        let sc = g.scale(sum, 0.7);
        let sh = g.add_scalar(sc, 0.3);
        let lg = g.log_floor(sh, 1e-12);
        let cl = g.clamp(ab, -0.5, 0.5);
        let both = g.add(lg, cl);
        weighted_sum(g, both, 9)
    });
}

#[test]
fn transposed_matmuls() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut rng, 4, 3));
    let b = s.add("b", random(&mut rng, 5, 4));
    check(&mut s, |g, s| {
        let (a, b) = (g.param(s, a), g.param(s, b));
        let x = g.matmul_t(a, true, b, true); // [3 × 5]
        let y = g.matmul_t(b, false, a, false); // [5 × 3]
        let z = g.matmul_t(x, false, y, false);
        weighted_sum(g, z, 3)
    });
}

#[test]
fn softmax_layer_norm_and_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut rng, 3, 6));
    check(&mut s, |g, s| {
        let a = g.param(s, a);
        let p = g.softmax_rows(a);
        let n = g.layer_norm_rows(a, 1e-5);
        let r = g.relu(n);
        let both = g.add(p, r);
        weighted_sum(g, both, 4)
    });
}

#[test]
fn batch_standardization() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut rng, 5, 3));
    check(&mut s, |g, s| {
        let a = g.param(s, a);
        let z = pvc_core::prosody::graph_loss::standardize_batch(g, a, 1e-6);
        weighted_sum(g, z, 14)
    });
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut rng, 4, 3));
    let b = s.add("b", random(&mut rng, 4, 2));
    let r = s.add("r", random(&mut rng, 1, 5));
    check(&mut s, |g, s| {
        let (a, b, r) = (g.param(s, a), g.param(s, b), g.param(s, r));
        let cat = g.concat_cols(&[a, b]); // 4×5
        let br = g.broadcast_rows(r, 2); // 2×5
        let rows = g.concat_rows(&[cat, br]); // 6×5
        let sc = g.slice_cols(rows, 1, 3);
        let sr = g.slice_rows(sc, 2, 3);
        let ga = g.gather_rows(vec![Some((sr, 2)), None, Some((sc, 0)), Some((sr, 2))], 3);
        let mr = g.mean_rows(rows);
        let masked = g.mask_mul(ga, Matrix::from_vec(4, 3, vec![1.0, 0.0, 2.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 1.0, 0.0, 1.0]));
        let l1 = weighted_sum(g, masked, 5);
        let l2 = weighted_sum(g, mr, 6);
        let l3 = g.mean_all(sr);
        let l = g.add(l1, l2);
        g.add(l, l3)
    });
}

#[test]
fn unfold_with_stride_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut rng, 7, 2));
    check(&mut s, |g, s| {
        let a = g.param(s, a);
        let u = g.unfold(a, 3, 2, 1);
        assert_eq!(g.shape(u), (4, 6));
        weighted_sum(g, u, 7)
    });
}

#[test]
fn gru_cell_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut s = ParamStore::new();
    let x = s.add("x", random(&mut rng, 3, 12));
    let h = s.add("h", random(&mut rng, 3, 4));
    let w = s.add("w", random(&mut rng, 4, 12));
    let b = s.add("b", random(&mut rng, 1, 12));
    check(&mut s, |g, s| {
        let (x, h, w, b) = (g.param(s, x), g.param(s, h), g.param(s, w), g.param(s, b));
        let h1 = g.gru_cell(x, h, w, b, Some(vec![1.0, 0.0, 1.0]));
        let h2 = g.gru_cell(x, h1, w, b, None);
        weighted_sum(g, h2, 8)
    });
}

#[test]
fn layers_compose() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, &mut rng, "lin", 3, 4, true, Init::Glorot);
    let ln = LayerNorm::new(&mut s, "ln", 4);
    let conv = Conv1d::new(&mut s, &mut rng, "conv", 4, 4, 3, 1, Init::Glorot);
    let ff = FeedForward::new(&mut s, &mut rng, "ff", 4, 6, 0.0);
    let att = MultiHeadAttention::new(&mut s, &mut rng, "att", 4, 2, 0.0);
    let gru = Gru::new(&mut s, &mut rng, "gru", 4, 3);
    let x1 = random(&mut rng, 5, 3);
    let x2 = random(&mut rng, 3, 3);
    check(&mut s, |g, s| {
        let mut outs = Vec::new();
        let mut projs = Vec::new();
        for x in [&x1, &x2] {
            let x = g.constant(x.clone());
            let h = lin.forward(g, s, x);
            let h = ln.forward(g, s, h);
            let h = conv.forward(g, s, h);
            let f = ff.forward(g, s, h);
            let h = g.add(h, f);
            let a = att.forward(g, s, h, h);
            outs.push(a);
            projs.push(gru.project_inputs(g, s, a));
        }
        let (seqs, last) = gru.run(g, s, &projs);
        let mut total = weighted_sum(g, last, 10);
        for (i, v) in seqs.into_iter().chain(outs).enumerate() {
            let l = weighted_sum(g, v, 11 + i as u64);
            total = g.add(total, l);
        }
        total
    });
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut s = ParamStore::new();
    let a = s.add("a", random(&mut rng, 2, 2));
    let b = s.add("b", random(&mut rng, 2, 2));
    let mut g = Graph::new(vec![true, false], true, 0);
    let (va, vb) = (g.param(&s, a), g.param(&s, b));
    let d = g.detach(va);
    let p = g.matmul(va, vb);
    let q = g.mul(p, d);
    let l = g.sum_all(q);
    let grads = g.backward(l);
    assert!(grads.get(a).is_some());
    assert!(grads.get(b).is_none());
}

#[test]
fn dropout_is_identity_at_inference_and_scaled_in_training() {
    let s = ParamStore::new();
    let mut g = Graph::inference(&s, 3);
    let x = g.constant(Matrix::filled(10, 10, 1.0));
    let y = g.dropout(x, 0.5);
    assert_eq!(g.value(y), g.value(x));
    let z = g.dropout_always(x, 0.5);
    let vals = g.value(z).data();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    assert!(vals.iter().any(|&v| v == 0.0));
}
