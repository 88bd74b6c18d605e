//! Per-op central finite-difference checks.

use super::*;

/// Builds a scalar from the tape with a fixed random projection of `out`.
fn project(tape: &mut Tape<'_>, out: NodeId, salt: u64) -> NodeId {
    let n = tape.value(out).len();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(salt) % 1000) as f64 / 500.0 - 1.0)
        .collect();
    let flat = tape.reshape(out, vec![1, n]);
    let wn = tape.input(Tensor::new(vec![n, 1], w));
    tape.matmul(flat, false, wn, false)
}

fn check<F>(store: ParamStore, f: F)
where
    F: Fn(&mut Tape<'_>) -> NodeId,
{
    let mut tape = Tape::new(&store);
    let out = f(&mut tape);
    let s = project(&mut tape, out, 17);
    let grads = tape.backward(s, 1.0).unwrap();
    let eval = |st: &ParamStore| {
        let mut t = Tape::new(st);
        let o = f(&mut t);
        let s = project(&mut t, o, 17);
        t.value(s).item()
    };
    let h = 1e-6;
    for pid in store.ids() {
        for e in 0..store.get(pid).len() {
            let mut plus = store.clone();
            plus.get_mut(pid).data_mut()[e] += h;
            let mut minus = store.clone();
            minus.get_mut(pid).data_mut()[e] -= h;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ana = grads.params.get(pid).data()[e];
            let err = (num - ana).abs();
            assert!(
                err <= 1e-8 || err / num.abs().max(ana.abs()) < 1e-5,
                "{}[{e}]: analytic {ana} vs numeric {num}",
                store.name(pid)
            );
        }
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let x = (i as u64 + 1)
                .wrapping_mul(6364136223846793005)
                .wrapping_add(seed.wrapping_mul(1442695040888963407))
                >> 11;
            (x % 20000) as f64 / 10000.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[test]
fn matmul_all_modes() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut s = ParamStore::new();
        let a = s.add("a", rand_tensor(if ta { &[4, 3] } else { &[3, 4] }, 1));
        let b = s.add("b", rand_tensor(if tb { &[5, 4] } else { &[4, 5] }, 2));
        check(s, move |t| {
            let an = t.param(a);
            let bn = t.param(b);
            t.matmul(an, ta, bn, tb)
        });
    }
}

#[test]
fn temporal_conv_with_stride_and_padding() {
    for stride in [1, 2] {
        let mut s = ParamStore::new();
        let x = s.add("x", rand_tensor(&[2, 6, 3], 3));
        let w = s.add("w", rand_tensor(&[3, 2, 3], 4));
        check(s, move |t| {
            let xn = t.param(x);
            let wn = t.param(w);
            t.temporal_conv(xn, wn, stride, 1)
        });
    }
}

#[test]
fn channel_norm_and_bias() {
    let mut s = ParamStore::new();
    let x = s.add("x", rand_tensor(&[3, 4, 2], 5));
    let g = s.add("g", rand_tensor(&[3], 6));
    let b = s.add("b", rand_tensor(&[3], 7));
    let c = s.add("c", rand_tensor(&[3], 8));
    check(s, move |t| {
        let (xn, gn, bn, cn) = (t.param(x), t.param(g), t.param(b), t.param(c));
        let y = t.channel_norm(xn, gn, bn, 1e-5);
        t.channel_bias(y, cn)
    });
}

#[test]
fn attention_single_and_multi_head() {
    for heads in [1, 2] {
        let mut s = ParamStore::new();
        let q = s.add("q", rand_tensor(&[4, 3, 5], 9));
        let k = s.add("k", rand_tensor(&[4, 3, 5], 10));
        let v = s.add("v", rand_tensor(&[6, 3, 5], 11));
        check(s, move |t| {
            let (qn, kn, vn) = (t.param(q), t.param(k), t.param(v));
            t.attention(qn, kn, vn, heads)
        });
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let s = ParamStore::new();
    let mut t = Tape::new(&s);
    let q = t.input(rand_tensor(&[4, 3, 5], 1));
    let k = t.input(rand_tensor(&[4, 3, 5], 2));
    let v = t.input(rand_tensor(&[2, 3, 5], 3));
    let a = t.attention(q, k, v, 2);
    let (heads, w) = t.attention_weights(a).unwrap();
    assert_eq!(heads, 2);
    for row in w.chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&x| x > 0.0));
    }
}

#[test]
fn gather_pool_concat_blockscale() {
    let mut s = ParamStore::new();
    let x = s.add("x", rand_tensor(&[2, 3, 6], 12));
    let al = s.add("alpha", rand_tensor(&[2], 13));
    check(s, move |t| {
        let xn = t.param(x);
        let p1 = t.gather_joints(xn, &[5, 0, 2]);
        let p2 = t.gather_joints(xn, &[1, 2]);
        let m1 = t.mean_channels(p1);
        let m2 = t.mean_channels(p2);
        let c = t.concat(&[m1, m2]);
        let a = t.param(al);
        let a = t.sigmoid(a);
        let y = t.block_scale(c, a);
        t.relu(y)
    });
}

#[test]
fn softmax_rows_normalize_and_cross_entropy() {
    let mut s = ParamStore::new();
    let x = s.add("x", rand_tensor(&[3, 4], 14));
    let y = s.add("y", rand_tensor(&[2, 4], 15));
    check(s.clone(), move |t| {
        let xn = t.param(x);
        let sm = t.row_softmax(xn);
        let m = t.mean_rows(sm);
        let e = t.mul(m, m);
        t.scale(e, 3.0)
    });
    check(s, move |t| {
        let xn = t.param(x);
        let yn = t.param(y);
        let xh = t.l2_normalize_rows(xn).unwrap();
        let yh = t.l2_normalize_rows(yn).unwrap();
        let sims = t.matmul(xh, false, yh, true);
        let logits = t.scale(sims, 5.0);
        t.cross_entropy(logits, &[1, 0, 1])
    });
}

#[test]
fn backward_on_empty_tape_is_an_error() {
    let s = ParamStore::new();
    let t = Tape::new(&s);
    let mut other = Tape::new(&s);
    let id = other.input(Tensor::scalar(1.0));
    assert_eq!(t.backward(id, 1.0).unwrap_err(), TapeError::EmptyTape);
}

#[test]
fn unused_parameter_gets_exact_zero_gradient() {
    let mut s = ParamStore::new();
    let a = s.add("a", rand_tensor(&[3], 1));
    let unused = s.add("unused", rand_tensor(&[4], 2));
    let mut t = Tape::new(&s);
    let an = t.param(a);
    let r = t.reshape(an, vec![1, 3]);
    let sq = t.matmul(r, false, r, true);
    let g = t.backward(sq, 1.0).unwrap();
    assert!(g.params.get(unused).data().iter().all(|&v| v == 0.0));
    let g2 = t.backward(sq, 1.0).unwrap();
    assert_eq!(g.params, g2.params);
}

#[test]
fn zero_norm_row_is_reported() {
    let s = ParamStore::new();
    let mut t = Tape::new(&s);
    let x = t.input(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]));
    assert_eq!(t.l2_normalize_rows(x).unwrap_err(), TapeError::ZeroNorm { row: 1 });
}

#[test]
fn input_gradients_are_reported() {
    let s = ParamStore::new();
    let mut t = Tape::new(&s);
    let x = t.input_with_grad(Tensor::from_vec(vec![1.0, 2.0]));
    let y = t.mul(x, x);
    let seed = Tensor::from_vec(vec![1.0, 1.0]);
    let g = t.backward_with(y, &seed).unwrap();
    assert_eq!(g.input(x).unwrap().data(), &[2.0, 4.0]);
}
