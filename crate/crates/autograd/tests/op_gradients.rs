use msdp_autograd::check::{numerical_grad, relative_error};
use msdp_autograd::ndarray::Array2;
use msdp_autograd::{Tape, Var};

fn matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Array2::from_shape_fn((rows, cols), |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

/// Checks d(sum(w ⊙ f(inputs)))/d(input_k) for every input.
fn check<F>(inputs: &[Array2<f64>], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let (out_rows, out_cols) = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.shape(out)
    };
    let weights = matrix(out_rows, out_cols, 99);
    let eval = |xs: &[Array2<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        (tape.value(out) * &weights).sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = tape.leaf(weights.clone());
    let weighted = tape.mul(out, w);
    let root = tape.sum_all(weighted);
    let grads = tape.backward(root);
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(inputs[k].dim()));
        let numeric = numerical_grad(&inputs[k], 1e-5, |probe| {
            let mut xs = inputs.to_vec();
            xs[k] = probe.clone();
            eval(&xs)
        });
        let a: Vec<f64> = analytic.iter().copied().collect();
        let n: Vec<f64> = numeric.iter().copied().collect();
        let err = relative_error(&a, &n);
        assert!(err < 1e-6, "input {k}: relative error {err}");
    }
}

#[test]
fn matmul_variants() {
    check(&[matrix(3, 4, 1), matrix(4, 2, 2)], |t, v| t.matmul(v[0], v[1]));
    check(&[matrix(3, 4, 1), matrix(5, 4, 2)], |t, v| t.matmul_t(v[0], v[1]));
    check(&[matrix(3, 4, 3)], |t, v| t.transpose(v[0]));
}

#[test]
fn elementwise() {
    check(&[matrix(2, 3, 1), matrix(2, 3, 2)], |t, v| t.add(v[0], v[1]));
    check(&[matrix(2, 3, 1), matrix(2, 3, 2)], |t, v| t.sub(v[0], v[1]));
    check(&[matrix(2, 3, 1), matrix(2, 3, 2)], |t, v| t.mul(v[0], v[1]));
    check(&[matrix(2, 3, 1), matrix(1, 3, 2)], |t, v| t.add_row(v[0], v[1]));
    check(&[matrix(2, 3, 4)], |t, v| t.scale(v[0], -2.5));
    check(&[matrix(2, 3, 4)], |t, v| t.gelu(v[0]));
    check(&[matrix(2, 3, 4)], |t, v| t.exp(v[0]));
    check(&[matrix(2, 3, 4).mapv(|x| x.abs() + 0.5)], |t, v| t.log(v[0]));
    let c = matrix(2, 3, 7);
    check(&[matrix(2, 3, 4)], move |t, v| t.mul_const(v[0], c.clone()));
}

#[test]
fn normalizations() {
    check(&[matrix(3, 5, 1)], |t, v| t.softmax_rows(v[0]));
    check(&[matrix(3, 5, 1)], |t, v| t.log_softmax_rows(v[0]));
    check(&[matrix(3, 5, 1), matrix(1, 5, 2), matrix(1, 5, 3)], |t, v| {
        t.layer_norm(v[0], v[1], v[2])
    });
}

#[test]
fn structural() {
    check(&[matrix(5, 3, 1)], |t, v| t.gather(v[0], &[4, 0, 4, 2]));
    check(&[matrix(2, 3, 1), matrix(2, 2, 2)], |t, v| t.concat_cols(&[v[0], v[1]]));
    check(&[matrix(2, 3, 1), matrix(1, 3, 2)], |t, v| t.concat_rows(&[v[0], v[1]]));
    check(&[matrix(3, 6, 1)], |t, v| t.slice_cols(v[0], 2, 3));
    check(&[matrix(4, 3, 1)], |t, v| t.slice_rows(v[0], 1, 2));
    check(&[matrix(4, 3, 1)], |t, v| t.mean_rows(v[0]));
    check(&[matrix(4, 3, 1)], |t, v| t.sum_all(v[0]));
    check(&[matrix(3, 3, 1)], |t, v| t.pick(v[0], &[(0, 0), (2, 1), (0, 0)]));
}

#[test]
fn reductions() {
    check(&[matrix(3, 4, 1), matrix(2, 4, 2)], |t, v| t.cosine_rows(v[0], v[1]));
    check(&[matrix(3, 4, 5).mapv(|x| 30.0 * x)], |t, v| t.log_one_plus_sum_exp(v[0]));
    check(&[matrix(3, 4, 6).mapv(|x| 5.0 * x)], |t, v| t.log_sum_exp_rows(v[0]));
}

#[test]
fn log_one_plus_sum_exp_is_overflow_safe() {
    let mut tape = Tape::new();
    let x = tape.row(&[800.0, -800.0]);
    let y = tape.log_one_plus_sum_exp(x);
    assert!((tape.scalar(y) - 800.0).abs() < 1e-9);
}

#[test]
fn shared_parameter_gradients_accumulate() {
    use msdp_autograd::ParamStore;
    let mut store = ParamStore::new();
    let w = store.add("w", matrix(2, 2, 1));
    let mut tape = Tape::new();
    let a = tape.param(&store, w);
    let b = tape.param(&store, w);
    assert_eq!(a, b);
    let prod = tape.matmul(a, b);
    let root = tape.sum_all(prod);
    let grads = tape.backward(root);
    let pg = tape.param_grads(&grads);
    assert_eq!(pg.len(), 1);
    let numeric = numerical_grad(store.get(w), 1e-5, |m| m.dot(m).sum());
    let err = relative_error(pg[0].1.as_slice().unwrap(), numeric.as_slice().unwrap());
    assert!(err < 1e-7);
}
