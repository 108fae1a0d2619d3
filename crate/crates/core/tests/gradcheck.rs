//! Finite-difference gradient checks for every differentiable graph op.
//!
//! Analytic f32 gradients are compared against central differences taken on
//! the independent f64 oracles in `common`, step h = 1e-3, relative
//! tolerance 1e-4.

mod common;

use common::*;
use disentangle_core::rng;
use disentangle_core::tensor::{Graph, Tensor, Var};
use rand::Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Keep values away from relu/abs kinks so FD is well defined.
fn away_from_zero(v: &mut [f64]) {
    for x in v.iter_mut() {
        if x.abs() < 0.05 {
            *x += 0.1;
        }
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Build loss = sum(w . f(x)) in the graph, backward, return grad of inputs.
fn graph_grad(
    inputs: &[(&[f64], Vec<usize>)],
    weights: &[f64],
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> Vec<Vec<f32>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(data, shape)| g.param(Tensor::new(shape.clone(), to_f32(data)).unwrap()))
        .collect();
    let out = build(&mut g, &vars);
    let w = g.leaf(Tensor::new(
        g.value(out).shape().to_vec(),
        to_f32(weights),
    ).unwrap());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    vars.iter()
        .map(|&v| g.grad(v).unwrap().data().to_vec())
        .collect()
}

fn check_input(
    idx: usize,
    inputs: &[(&[f64], Vec<usize>)],
    weights: &[f64],
    analytic: &[f32],
    oracle: impl Fn(&[&[f64]]) -> Vec<f64>,
    what: &str,
) {
    let numeric = finite_diff(inputs[idx].0, H, |x| {
        let mut datas: Vec<&[f64]> = inputs.iter().map(|(d, _)| *d).collect();
        datas[idx] = x;
        let out = oracle(&datas);
        out.iter().zip(weights).map(|(a, b)| a * b).sum()
    });
    assert_grads_close(analytic, &numeric, TOL, what);
}

#[test]
fn matmul_grads_match_finite_differences() {
    let mut r = rng::stream(101, "gc-matmul");
    for case in 0..5 {
        let (m, k, n) = (3, 4, 2);
        let a = rand_vec(m * k, &mut r);
        let b = rand_vec(k * n, &mut r);
        let w = rand_vec(m * n, &mut r);
        let inputs = [(&a[..], vec![m, k]), (&b[..], vec![k, n])];
        let grads = graph_grad(&inputs, &w, |g, v| g.matmul(v[0], v[1]).unwrap());
        let oracle = |d: &[&[f64]]| matmul64(&(d[0].to_vec(), m, k), &(d[1].to_vec(), k, n)).0;
        check_input(0, &inputs, &w, &grads[0], oracle, &format!("matmul a #{case}"));
        check_input(1, &inputs, &w, &grads[1], oracle, &format!("matmul b #{case}"));
    }
}

#[test]
fn elementwise_grads_match_finite_differences() {
    let mut r = rng::stream(102, "gc-elem");
    for case in 0..3 {
        let n = 5;
        let a = rand_vec(n, &mut r);
        let b = rand_vec(n, &mut r);
        let w = rand_vec(n, &mut r);
        let inputs = [(&a[..], vec![1, n]), (&b[..], vec![1, n])];

        let grads = graph_grad(&inputs, &w, |g, v| g.mul(v[0], v[1]).unwrap());
        let mul_oracle =
            |d: &[&[f64]]| d[0].iter().zip(d[1]).map(|(x, y)| x * y).collect::<Vec<_>>();
        check_input(0, &inputs, &w, &grads[0], mul_oracle, &format!("mul a #{case}"));
        check_input(1, &inputs, &w, &grads[1], mul_oracle, &format!("mul b #{case}"));

        let grads = graph_grad(&inputs, &w, |g, v| g.add(v[0], v[1]).unwrap());
        let add_oracle =
            |d: &[&[f64]]| d[0].iter().zip(d[1]).map(|(x, y)| x + y).collect::<Vec<_>>();
        check_input(0, &inputs, &w, &grads[0], add_oracle, "add a");

        let grads = graph_grad(&inputs, &w, |g, v| g.sub(v[0], v[1]).unwrap());
        let sub_oracle =
            |d: &[&[f64]]| d[0].iter().zip(d[1]).map(|(x, y)| x - y).collect::<Vec<_>>();
        check_input(1, &inputs, &w, &grads[1], sub_oracle, "sub b");
    }
}

#[test]
fn scalar_broadcast_grads_match_finite_differences() {
    let mut r = rng::stream(103, "gc-bcast");
    let n = 6;
    let a = rand_vec(n, &mut r);
    let s = rand_vec(1, &mut r);
    let w = rand_vec(n, &mut r);
    let inputs = [(&a[..], vec![1, n]), (&s[..], vec![1])];
    let grads = graph_grad(&inputs, &w, |g, v| g.mul(v[0], v[1]).unwrap());
    let oracle = |d: &[&[f64]]| d[0].iter().map(|x| x * d[1][0]).collect::<Vec<_>>();
    check_input(0, &inputs, &w, &grads[0], oracle, "bcast mul tensor");
    check_input(1, &inputs, &w, &grads[1], oracle, "bcast mul scalar");
}

#[test]
fn unary_grads_match_finite_differences() {
    let mut r = rng::stream(104, "gc-unary");
    let n = 7;
    let mut a = rand_vec(n, &mut r);
    away_from_zero(&mut a);
    let w = rand_vec(n, &mut r);
    let inputs = [(&a[..], vec![1, n])];

    let grads = graph_grad(&inputs, &w, |g, v| g.relu(v[0]));
    check_input(0, &inputs, &w, &grads[0], |d| relu64(d[0]), "relu");

    let grads = graph_grad(&inputs, &w, |g, v| g.logistic(v[0]));
    check_input(0, &inputs, &w, &grads[0], |d| logistic64(d[0]), "logistic");

    let grads = graph_grad(&inputs, &w, |g, v| g.abs(v[0]));
    check_input(0, &inputs, &w, &grads[0], |d| abs64(d[0]), "abs");

    let grads = graph_grad(&inputs, &w, |g, v| g.scale(v[0], 0.37));
    check_input(
        0,
        &inputs,
        &w,
        &grads[0],
        |d| d[0].iter().map(|x| x * 0.37).collect(),
        "scale",
    );
}

#[test]
fn structural_op_grads_match_finite_differences() {
    let mut r = rng::stream(105, "gc-struct");
    let (rows, cols) = (4, 3);
    let a = rand_vec(rows * cols, &mut r);

    // transpose
    let w = rand_vec(rows * cols, &mut r);
    let inputs = [(&a[..], vec![rows, cols])];
    let grads = graph_grad(&inputs, &w, |g, v| g.transpose(v[0]));
    check_input(
        0,
        &inputs,
        &w,
        &grads[0],
        |d| {
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = d[0][i * cols + j];
                }
            }
            out
        },
        "transpose",
    );

    // gather_rows
    let idx = vec![2, 0, 2];
    let w = rand_vec(idx.len() * cols, &mut r);
    let grads = graph_grad(&inputs, &w, |g, v| g.gather_rows(v[0], idx.clone()).unwrap());
    check_input(
        0,
        &inputs,
        &w,
        &grads[0],
        |d| {
            idx.iter()
                .flat_map(|&i| d[0][i * cols..(i + 1) * cols].to_vec())
                .collect()
        },
        "gather_rows",
    );

    // row/col slices
    let w = rand_vec(2 * cols, &mut r);
    let grads = graph_grad(&inputs, &w, |g, v| g.row_slice(v[0], 1, 2).unwrap());
    check_input(
        0,
        &inputs,
        &w,
        &grads[0],
        |d| d[0][cols..3 * cols].to_vec(),
        "row_slice",
    );

    let w = rand_vec(rows * 2, &mut r);
    let grads = graph_grad(&inputs, &w, |g, v| g.col_slice(v[0], 1, 2).unwrap());
    check_input(
        0,
        &inputs,
        &w,
        &grads[0],
        |d| {
            (0..rows)
                .flat_map(|i| d[0][i * cols + 1..i * cols + 3].to_vec())
                .collect()
        },
        "col_slice",
    );

    // replace_row
    let v = rand_vec(cols, &mut r);
    let w = rand_vec(rows * cols, &mut r);
    let inputs2 = [(&a[..], vec![rows, cols]), (&v[..], vec![1, cols])];
    let grads = graph_grad(&inputs2, &w, |g, vars| {
        g.replace_row(vars[0], 2, vars[1]).unwrap()
    });
    let rep_oracle = |d: &[&[f64]]| {
        let mut out = d[0].to_vec();
        out[2 * cols..3 * cols].copy_from_slice(d[1]);
        out
    };
    check_input(0, &inputs2, &w, &grads[0], rep_oracle, "replace_row x");
    check_input(1, &inputs2, &w, &grads[1], rep_oracle, "replace_row v");

    // concat
    let b = rand_vec(2 * cols, &mut r);
    let w = rand_vec((rows + 2) * cols, &mut r);
    let inputs3 = [(&a[..], vec![rows, cols]), (&b[..], vec![2, cols])];
    let grads = graph_grad(&inputs3, &w, |g, vars| g.concat_rows(&vars.to_vec()).unwrap());
    let cat_oracle = |d: &[&[f64]]| {
        let mut out = d[0].to_vec();
        out.extend_from_slice(d[1]);
        out
    };
    check_input(0, &inputs3, &w, &grads[0], cat_oracle, "concat_rows a");
    check_input(1, &inputs3, &w, &grads[1], cat_oracle, "concat_rows b");

    let c = rand_vec(rows * 2, &mut r);
    let w = rand_vec(rows * (cols + 2), &mut r);
    let inputs4 = [(&a[..], vec![rows, cols]), (&c[..], vec![rows, 2])];
    let grads = graph_grad(&inputs4, &w, |g, vars| g.concat_cols(&vars.to_vec()).unwrap());
    let catc_oracle = |d: &[&[f64]]| {
        let mut out = Vec::new();
        for i in 0..rows {
            out.extend_from_slice(&d[0][i * cols..(i + 1) * cols]);
            out.extend_from_slice(&d[1][i * 2..(i + 1) * 2]);
        }
        out
    };
    check_input(0, &inputs4, &w, &grads[0], catc_oracle, "concat_cols a");
    check_input(1, &inputs4, &w, &grads[1], catc_oracle, "concat_cols c");
}

#[test]
fn softmax_and_norm_grads_match_finite_differences() {
    let mut r = rng::stream(106, "gc-softmax");
    let (rows, cols) = (3, 5);
    let a = rand_vec(rows * cols, &mut r);
    let w = rand_vec(rows * cols, &mut r);
    let inputs = [(&a[..], vec![rows, cols])];
    let grads = graph_grad(&inputs, &w, |g, v| g.row_softmax(v[0]));
    check_input(
        0,
        &inputs,
        &w,
        &grads[0],
        |d| row_softmax64(d[0], rows, cols),
        "row_softmax",
    );

    let gain = rand_vec(cols, &mut r);
    let inputs2 = [(&a[..], vec![rows, cols]), (&gain[..], vec![1, cols])];
    let grads = graph_grad(&inputs2, &w, |g, v| g.rms_norm(v[0], v[1]).unwrap());
    let rms_oracle = |d: &[&[f64]]| rms_norm64(d[0], d[1], rows, cols, 1e-5);
    check_input(0, &inputs2, &w, &grads[0], rms_oracle, "rms_norm x");
    check_input(1, &inputs2, &w, &grads[1], rms_oracle, "rms_norm gain");
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let mut r = rng::stream(107, "gc-ce");
    let (rows, cols) = (2, 5);
    let logits = rand_vec(rows * cols, &mut r);
    let targets = vec![3usize, 1];

    // Value check against the independent log-sum-exp computation.
    let mut g = Graph::new();
    let lv = g.param(Tensor::new(vec![rows, cols], to_f32(&logits)).unwrap());
    let loss = g.softmax_cross_entropy(lv, targets.clone()).unwrap();
    let expect = cross_entropy64(&logits, rows, cols, &targets);
    assert!(
        (g.value(loss).data()[0] as f64 - expect).abs() < 1e-5,
        "value {} vs oracle {}",
        g.value(loss).data()[0],
        expect
    );

    // Gradient check.
    g.backward(loss).unwrap();
    let analytic = g.grad(lv).unwrap().data().to_vec();
    let numeric = finite_diff(&logits, H, |x| cross_entropy64(x, rows, cols, &targets));
    assert_grads_close(&analytic, &numeric, TOL, "cross_entropy");
}

#[test]
fn mean_and_sum_grads() {
    let mut r = rng::stream(108, "gc-reduce");
    let n = 6;
    let a = rand_vec(n, &mut r);
    let w = vec![1.0];
    let inputs = [(&a[..], vec![1, n])];
    let grads = graph_grad(&inputs, &w, |g, v| g.sum(v[0]));
    check_input(0, &inputs, &w, &grads[0], |d| vec![d[0].iter().sum()], "sum");
    let grads = graph_grad(&inputs, &w, |g, v| g.mean(v[0]));
    check_input(
        0,
        &inputs,
        &w,
        &grads[0],
        |d| vec![d[0].iter().sum::<f64>() / n as f64],
        "mean",
    );
}

/// Three-layer MLP: all parameter gradients vs finite differences.
#[test]
fn mlp_grads_match_finite_differences() {
    let mut r = rng::stream(109, "gc-mlp");
    let (din, dh1, dh2, dout) = (4, 6, 5, 3);
    let x = rand_vec(2 * din, &mut r);
    let w1 = rand_vec(din * dh1, &mut r);
    let w2 = rand_vec(dh1 * dh2, &mut r);
    let w3 = rand_vec(dh2 * dout, &mut r);
    let targets = vec![2usize, 0];

    let forward64 = |x: &[f64], w1: &[f64], w2: &[f64], w3: &[f64]| -> f64 {
        let h1 = matmul64(&(x.to_vec(), 2, din), &(w1.to_vec(), din, dh1));
        let h1 = (relu64(&h1.0), 2, dh1);
        let h2 = matmul64(&h1, &(w2.to_vec(), dh1, dh2));
        let h2 = (relu64(&h2.0), 2, dh2);
        let logits = matmul64(&h2, &(w3.to_vec(), dh2, dout));
        cross_entropy64(&logits.0, 2, dout, &targets)
    };

    let mut g = Graph::new();
    let xv = g.param(Tensor::new(vec![2, din], to_f32(&x)).unwrap());
    let w1v = g.param(Tensor::new(vec![din, dh1], to_f32(&w1)).unwrap());
    let w2v = g.param(Tensor::new(vec![dh1, dh2], to_f32(&w2)).unwrap());
    let w3v = g.param(Tensor::new(vec![dh2, dout], to_f32(&w3)).unwrap());
    let h1 = g.matmul(xv, w1v).unwrap();
    let h1 = g.relu(h1);
    let h2 = g.matmul(h1, w2v).unwrap();
    let h2 = g.relu(h2);
    let logits = g.matmul(h2, w3v).unwrap();
    let loss = g.softmax_cross_entropy(logits, targets.clone()).unwrap();
    g.backward(loss).unwrap();

    let checks: Vec<(&str, Vec<f32>, Vec<f64>)> = vec![
        (
            "mlp x",
            g.grad(xv).unwrap().data().to_vec(),
            finite_diff(&x, H, |v| forward64(v, &w1, &w2, &w3)),
        ),
        (
            "mlp w1",
            g.grad(w1v).unwrap().data().to_vec(),
            finite_diff(&w1, H, |v| forward64(&x, v, &w2, &w3)),
        ),
        (
            "mlp w2",
            g.grad(w2v).unwrap().data().to_vec(),
            finite_diff(&w2, H, |v| forward64(&x, &w1, v, &w3)),
        ),
        (
            "mlp w3",
            g.grad(w3v).unwrap().data().to_vec(),
            finite_diff(&w3, H, |v| forward64(&x, &w1, &w2, v)),
        ),
    ];
    for (what, analytic, numeric) in checks {
        assert_grads_close(&analytic, &numeric, TOL, what);
    }
}
