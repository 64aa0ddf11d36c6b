use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::{bilstm, gru_cell, init_bilstm, init_gru};
use super::*;
use crate::error::{Error, Result};

const TOL: f64 = 1e-4;

fn rnd(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Reduces a matrix to a scalar with fixed random weights so that every
/// output coordinate contributes a distinct amount.
fn reduce(t: &mut Tape, v: Var) -> Result<Var> {
    let [r, c] = t.value(v).shape();
    let w = t.constant(rnd(r, c, 999));
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

fn check<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let report = gradcheck(
        |t, x| {
            let out = f(t, x)?;
            reduce(t, out)
        },
        inputs,
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
    assert!(report.checked > 0);
}

#[test]
fn sigmoid_at_zero() {
    assert_eq!(sigmoid(0.0), 0.5);
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(0.0));
    let s = t.sigmoid(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(x).item(), 0.25);
}

#[test]
fn sigmoid_and_tanh_codomains() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::row_vector(vec![-800.0, -3.0, 0.0, 3.0, 800.0]));
    let s = t.sigmoid(x);
    let h = t.tanh(x);
    assert!(t.value(s).data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(t.value(h).data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn cosine_self_is_one() {
    for seed in 0..5 {
        let v = rnd(1, 7, seed);
        assert!((cosine(v.data(), v.data()) - 1.0).abs() < 1e-12);
    }
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
}

#[test]
fn matmul_gradcheck() {
    check(&[rnd(2, 3, 1), rnd(3, 2, 2)], |t, x| t.matmul(x[0], x[1]));
}

#[test]
fn elementwise_gradchecks() {
    let (a, b) = (rnd(3, 4, 1), rnd(3, 4, 2));
    check(&[a.clone(), b.clone()], |t, x| t.add(x[0], x[1]));
    check(&[a.clone(), b.clone()], |t, x| t.sub(x[0], x[1]));
    check(&[a.clone(), b.clone()], |t, x| t.mul(x[0], x[1]));
    check(&[a.clone(), rnd(1, 4, 3)], |t, x| t.add_row(x[0], x[1]));
    check(&[a.clone(), rnd(1, 4, 3)], |t, x| t.mul_row(x[0], x[1]));
    check(std::slice::from_ref(&a), |t, x| Ok(t.scale(x[0], -1.7)));
    check(std::slice::from_ref(&a), |t, x| Ok(t.sigmoid(x[0])));
    check(std::slice::from_ref(&a), |t, x| Ok(t.tanh(x[0])));
    check(&[a], |t, x| Ok(t.transpose(x[0])));
}

#[test]
fn structural_gradchecks() {
    let (a, b) = (rnd(3, 4, 4), rnd(3, 2, 5));
    check(&[a.clone(), b.clone()], |t, x| {
        t.concat_cols(&[x[0], x[1], x[0]])
    });
    check(&[a.clone(), rnd(2, 4, 6)], |t, x| {
        t.concat_rows(&[x[0], x[1]])
    });
    check(std::slice::from_ref(&a), |t, x| t.slice_cols(x[0], 1, 3));
    check(std::slice::from_ref(&a), |t, x| t.slice_rows(x[0], 1, 3));
    check(std::slice::from_ref(&a), |t, x| {
        t.gather_rows(x[0], vec![2, 0, 2])
    });
    let lists = Arc::new(vec![vec![0, 2], vec![], vec![1, 1, 2]]);
    check(std::slice::from_ref(&a), move |t, x| {
        t.gather_mean(x[0], lists.clone())
    });
    check(&[rnd(1, 4, 7)], |t, x| t.repeat_rows(x[0], 3));
    let nb = Arc::new(vec![vec![1], vec![0, 2], vec![]]);
    check(&[a], move |t, x| t.propagate(x[0], nb.clone()));
}

#[test]
fn reduction_gradchecks() {
    let a = rnd(3, 5, 8);
    check(std::slice::from_ref(&a), |t, x| Ok(t.softmax_rows(x[0])));
    check(std::slice::from_ref(&a), |t, x| Ok(t.normalize_rows(x[0])));
    check(std::slice::from_ref(&a), |t, x| Ok(t.sum(x[0])));
    check(std::slice::from_ref(&a), |t, x| Ok(t.mean(x[0])));
    check(std::slice::from_ref(&a), |t, x| t.max_rows(x[0]));
    check(&[a.clone(), rnd(3, 5, 9)], |t, x| t.row_cosine(x[0], x[1]));
    check(std::slice::from_ref(&a), |t, x| {
        t.mse(x[0], (0..15).map(|i| i as f64 / 15.0).collect())
    });
    check(&[a], |t, x| {
        t.bce_with_logits(x[0], (0..15).map(|i| (i % 2) as f64).collect())
    });
}

#[test]
fn multi_perspective_gradchecks() {
    let (x, w) = (rnd(4, 6, 10), rnd(3, 6, 11));
    check(&[x.clone(), rnd(4, 6, 12), w.clone()], |t, v| {
        t.mp_cosine(v[0], v[1], v[2])
    });
    check(&[x.clone(), rnd(1, 6, 13), w.clone()], |t, v| {
        t.mp_cosine(v[0], v[1], v[2])
    });
    check(&[x, rnd(5, 6, 14), w], |t, v| {
        t.mp_cosine_max(v[0], v[1], v[2])
    });
}

#[test]
fn randomized_shape_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for s in 0..6 {
        let (n, k, m) = (
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        check(&[rnd(n, k, s), rnd(k, m, s + 100)], |t, x| {
            let p = t.matmul(x[0], x[1])?;
            let h = t.tanh(p);
            let sm = t.softmax_rows(h);
            t.concat_cols(&[sm, p])
        });
    }
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(2, 3));
    let b = t.constant(Tensor::zeros(2, 2));
    match t.matmul(a, b) {
        Err(Error::Shape { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert!(
                shapes.contains("2x3") || shapes.contains("2×3") || shapes.contains('3'),
                "{shapes}"
            );
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(matches!(t.add(a, b), Err(Error::Shape { op: "add", .. })));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut t = Tape::new();
    let x = t.constant(rnd(6, 9, 3));
    let s = t.softmax_rows(x);
    for r in 0..6 {
        let sum: f64 = t.value(s).row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

#[test]
fn max_pool_gradient_at_argmax_only() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0], vec![2.0, 0.0]]).unwrap());
    let m = t.max_rows(x).unwrap();
    let s = t.sum(m);
    let g = t.backward(s).unwrap().wrt(x);
    assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
}

fn gru_params(width: usize, seed: u64) -> ParameterSet {
    let mut p = ParameterSet::new(seed);
    init_gru(
        &mut p,
        "gru",
        width,
        width,
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    p
}

#[test]
fn gru_zero_weights_halve_state() {
    let mut p = gru_params(3, 1);
    let names: Vec<String> = p.names().map(String::from).collect();
    for n in names {
        p.get_mut(&n)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let mut t = Tape::new();
    let m = t.constant(rnd(1, 3, 2));
    let h = t.constant(Tensor::row_vector(vec![0.4, -0.2, 1.0]));
    let out = gru_cell(&mut t, &p, "gru", m, h).unwrap();
    assert_eq!(t.value(out).data(), &[0.2, -0.1, 0.5]);
}

#[test]
fn gru_gradcheck_eight_wide() {
    let p = gru_params(8, 3);
    let (m, h) = (rnd(1, 8, 4), rnd(1, 8, 5));
    let report = gradcheck_params(
        &p,
        |t, p| {
            let mv = t.constant(m.clone());
            let hv = t.constant(h.clone());
            let out = gru_cell(t, p, "gru", mv, hv)?;
            reduce(t, out)
        },
        None,
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
    check(&[m, h], |t, x| gru_cell(t, &p, "gru", x[0], x[1]));
}

#[test]
fn gru_stays_in_unit_envelope() {
    for seed in 0..10 {
        let p = gru_params(6, seed);
        let mut t = Tape::new();
        let zero = t.constant(Tensor::zeros(1, 6));
        let mut h = t.constant(rnd(1, 6, seed + 50));
        for _ in 0..50 {
            h = gru_cell(&mut t, &p, "gru", zero, h).unwrap();
            assert!(t.value(h).data().iter().all(|v| v.abs() < 1.0));
        }
    }
}

#[test]
fn gru_width_mismatch() {
    let p = gru_params(3, 1);
    let mut t = Tape::new();
    let m = t.constant(Tensor::zeros(1, 4));
    let h = t.constant(Tensor::zeros(1, 3));
    assert!(gru_cell(&mut t, &p, "gru", m, h).is_err());
}

fn lstm_params(input: usize, hidden: usize, seed: u64, tied: bool) -> ParameterSet {
    let mut p = ParameterSet::new(seed);
    init_bilstm(
        &mut p,
        "ctx",
        input,
        hidden,
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    if tied {
        for part in ["w", "u", "b"] {
            let f = p.get(&format!("ctx.fwd.{part}")).unwrap().as_ref().clone();
            p.insert(format!("ctx.bwd.{part}"), f);
        }
    }
    p
}

fn run_bilstm(p: &ParameterSet, seq: Tensor) -> Tensor {
    let mut t = Tape::new();
    let s = t.constant(seq);
    let out = bilstm(&mut t, p, "ctx", s).unwrap();
    t.value(out).clone()
}

#[test]
fn bilstm_single_step() {
    let p = lstm_params(3, 4, 1, true);
    let out = run_bilstm(&p, rnd(1, 3, 2));
    assert_eq!(out.shape(), [1, 8]);
    assert_eq!(&out.row(0)[..4], &out.row(0)[4..]);
}

#[test]
fn bilstm_reversal_swaps_halves() {
    let p = lstm_params(3, 4, 2, true);
    let seq = rnd(5, 3, 3);
    let rev = Tensor::from_rows(
        &(0..5)
            .rev()
            .map(|r| seq.row(r).to_vec())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let (a, b) = (run_bilstm(&p, seq), run_bilstm(&p, rev));
    for t in 0..5 {
        for j in 0..4 {
            assert!((a.get(t, j) - b.get(4 - t, 4 + j)).abs() < 1e-12);
            assert!((a.get(t, 4 + j) - b.get(4 - t, j)).abs() < 1e-12);
        }
    }
}

#[test]
fn bilstm_gradcheck() {
    let p = lstm_params(3, 4, 5, false);
    let seq = rnd(3, 3, 6);
    let report = gradcheck_params(
        &p,
        |t, p| {
            let s = t.constant(seq.clone());
            let out = bilstm(t, p, "ctx", s)?;
            reduce(t, out)
        },
        None,
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
    check(&[seq], |t, x| bilstm(t, &p, "ctx", x[0]));
}

fn scalar_params(v: f64) -> ParameterSet {
    let mut p = ParameterSet::new(0);
    p.insert("x", Tensor::scalar(v));
    p
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut p = ParameterSet::new(0);
    p.insert("w", rnd(3, 3, 1));
    let before = p.get("w").unwrap().as_ref().clone();
    let mut st = AdamState::new(AdamConfig::default());
    let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(3, 3))]);
    for _ in 0..3 {
        st.step(&mut p, &grads).unwrap();
    }
    assert_eq!(p.get("w").unwrap().as_ref(), &before);
    assert_eq!(st.step_count(), 3);
}

#[test]
fn adam_first_step_formula() {
    let cfg = AdamConfig::default();
    let mut p = scalar_params(0.3);
    let mut st = AdamState::new(cfg);
    st.step(
        &mut p,
        &BTreeMap::from([("x".to_string(), Tensor::scalar(1.0))]),
    )
    .unwrap();
    // m_hat = 1, v_hat = 1
    let expected = 0.3 - cfg.lr * 1.0 / (1.0f64.sqrt() + cfg.eps);
    assert!((p.get("x").unwrap().item() - expected).abs() < 1e-15);
}

#[test]
fn adam_rejects_non_finite() {
    let mut p = scalar_params(0.0);
    let mut st = AdamState::new(AdamConfig::default());
    let err = st
        .step(
            &mut p,
            &BTreeMap::from([("x".to_string(), Tensor::scalar(f64::NAN))]),
        )
        .unwrap_err();
    assert!(
        matches!(err, Error::NonFiniteGradient(ref n) if n == "x"),
        "{err}"
    );
}

#[test]
fn adam_skips_frozen_rows() {
    let mut p = ParameterSet::new(0);
    p.insert("e", Tensor::zeros(3, 2));
    p.freeze_rows("e", vec![0, 2]);
    let mut st = AdamState::new(AdamConfig::default());
    st.step(
        &mut p,
        &BTreeMap::from([("e".to_string(), Tensor::filled(3, 2, 1.0))]),
    )
    .unwrap();
    let e = p.get("e").unwrap();
    assert_eq!(e.row(0), &[0.0, 0.0]);
    assert_eq!(e.row(2), &[0.0, 0.0]);
    assert!(e.row(1).iter().all(|&v| v < 0.0));
}

fn train_run(seed: u64) -> Checkpoint {
    let mut p = ParameterSet::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.glorot("w", 4, 3, &mut rng);
    let x = rnd(5, 4, seed + 1);
    let mut st = AdamState::new(AdamConfig::default());
    for _ in 0..10 {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let w = t.param(&p, "w").unwrap();
        let y = t.matmul(xv, w).unwrap();
        let loss = t.mse(y, vec![0.5; 15]).unwrap();
        let grads = t.param_grads(&t.backward(loss).unwrap());
        st.step(&mut p, &grads).unwrap();
    }
    p.to_checkpoint(serde_json::json!({}))
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let (a, b) = (train_run(9), train_run(9));
    assert_eq!(a, b);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn checkpoint_round_trip() {
    let ckpt = train_run(3);
    let json = serde_json::to_string(&ckpt).unwrap();
    let back: Checkpoint = serde_json::from_str(&json).unwrap();
    let p = ParameterSet::from_checkpoint(&back).unwrap();
    assert_eq!(p.to_checkpoint(serde_json::json!({})), ckpt);
    assert_eq!(
        serde_json::to_string(&p.to_checkpoint(serde_json::json!({}))).unwrap(),
        json
    );
}

#[test]
fn gradcheck_linear_is_exact() {
    let report = gradcheck(
        |t, x| {
            let s = t.scale(x[0], 3.0);
            Ok(t.sum(s))
        },
        &[rnd(2, 2, 1)],
        GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9, "{report:?}");
}

#[test]
fn corrupted_gradient_is_caught() {
    let opts = GradcheckOptions {
        corrupt: 1.01,
        ..Default::default()
    };
    let report = gradcheck(
        |t, x| {
            let y = t.matmul(x[0], x[1])?;
            reduce(t, y)
        },
        &[rnd(2, 3, 1), rnd(3, 2, 2)],
        opts,
    )
    .unwrap();
    assert!(!report.passes(TOL), "{report:?}");
}
