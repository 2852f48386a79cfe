use proptest::prelude::*;

use super::*;

fn vec_param(g: &mut Graph, v: &[f64]) -> NodeId {
    g.param(Tensor::vector(v.to_vec()))
}

#[test]
fn add_is_elementwise() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let c = g.add(a, b);
    assert_eq!(g.forward(c).unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn matmul_with_zero_left_operand_is_zero() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, 4.0, 5.0, 6.0]).unwrap());
    let c = g.matmul(a, b);
    let out = g.forward(c).unwrap();
    assert_eq!(out.shape(), &[2, 2]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_clamps_negatives() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = g.relu(a);
    assert_eq!(g.forward(r).unwrap().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn unbound_input_is_reported() {
    let mut g = Graph::new();
    let x = g.input("x");
    let s = g.sum(x);
    match g.forward(s) {
        Err(GraphError::MissingInput { name, .. }) => assert_eq!(name, "x"),
        other => panic!("expected missing input, got {other:?}"),
    }
    g.bind(x, Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert_eq!(g.forward(s).unwrap().item(), 3.0);
}

#[test]
fn shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let c = g.matmul(a, b);
    let err = g.forward(c).unwrap_err();
    assert_eq!(
        err,
        GraphError::Shape {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn grad_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = vec_param(&mut g, &[1.0, 2.0, 3.0]);
    let loss = g.sum(x);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn grad_of_self_dot_is_twice_x() {
    let mut g = Graph::new();
    let x = vec_param(&mut g, &[3.0]);
    let loss = g.dot(x, x);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn grad_of_distance_matches_central_differences() {
    // Oracle: central differences on a closure, independent of the graph.
    let f = |x: [f64; 2]| (x[0] * x[0] + x[1] * x[1]).sqrt();
    let h = 1e-6;
    let fd = [
        (f([3.0 + h, 4.0]) - f([3.0 - h, 4.0])) / (2.0 * h),
        (f([3.0, 4.0 + h]) - f([3.0, 4.0 - h])) / (2.0 * h),
    ];
    assert!((fd[0] - 0.6).abs() < 1e-8 && (fd[1] - 0.8).abs() < 1e-8);

    let mut g = Graph::new();
    let x = vec_param(&mut g, &[3.0, 4.0]);
    let c = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let d = g.sub(x, c);
    let loss = g.l2_norm(d);
    let grads = g.backward(loss).unwrap();
    let got = grads.get(x).unwrap().data();
    assert!((got[0] - fd[0]).abs() < 1e-8);
    assert!((got[1] - fd[1]).abs() < 1e-8);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = vec_param(&mut g, &[1.0, 2.0]);
    let y = g.exp(x);
    assert_eq!(g.backward(y).unwrap_err(), GraphError::Rank(vec![2]));
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let mut g = Graph::new();
    let x = vec_param(&mut g, &[1.0, 2.0]);
    let unused = g.param(Tensor::zeros(&[2, 2]));
    let loss = g.sum(x);
    let late = g.param(Tensor::vector(vec![5.0]));
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.len(), 3);
    assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    assert_eq!(grads.get(late).unwrap().data(), &[0.0]);
}

#[test]
fn fd_check_on_quadratic_is_tight() {
    let mut g = Graph::new();
    let x = vec_param(&mut g, &[0.3, -1.2, 0.7]);
    let w = g.constant(Tensor::vector(vec![1.5, 0.5, 2.0]));
    let wx = g.mul(w, x);
    let loss = g.dot(wx, x);
    let err = finite_diff_check(&mut g, loss, 1e-6).unwrap();
    assert!(err <= 1e-7, "quadratic fd error {err}");
}

#[test]
fn fd_check_on_linear_is_exact() {
    // dyadic values and power-of-two steps keep every perturbation exact
    for step in [2f64.powi(-20), 2f64.powi(-10), 0.5] {
        let mut g = Graph::new();
        let x = vec_param(&mut g, &[0.25, -0.5, 0.75]);
        let w = g.constant(Tensor::vector(vec![2.0, -4.0, 0.5]));
        let loss = g.dot(w, x);
        let err = finite_diff_check(&mut g, loss, step).unwrap();
        assert!(err <= 1e-12, "linear fd error {err} at step {step}");
    }
}

#[test]
fn fd_check_flags_relu_kink() {
    let mut g = Graph::new();
    let x = vec_param(&mut g, &[0.0, 1.0]);
    let r = g.relu(x);
    let loss = g.sum(r);
    match finite_diff_check(&mut g, loss, 1e-6) {
        Err(GraphError::NonSmooth { op, .. }) => assert_eq!(op, "relu"),
        other => panic!("expected kink rejection, got {other:?}"),
    }
    // parameters are untouched by the rejected check
    assert_eq!(g.value(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = vec_param(&mut g, &[0.0]);
    let r = g.relu(x);
    let loss = g.sum(r);
    assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[0.0]);
}

#[test]
fn grad_reverse_is_identity_forward_and_negated_backward() {
    let mut g = Graph::new();
    let x = vec_param(&mut g, &[0.5, -1.5]);
    let r = g.grad_reverse(x, 1.0);
    let out = g.forward(r).unwrap().clone();
    assert_eq!(&out, g.value(x).unwrap());
    let w = g.constant(Tensor::vector(vec![2.0, 3.0]));
    let loss = g.dot(w, r);
    assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[-2.0, -3.0]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap());
    let s = g.softmax(a);
    let out = g.forward(s).unwrap().clone();
    for r in 0..2 {
        assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let ls = g.log_softmax(a);
    let logs = g.forward(ls).unwrap();
    for (l, p) in logs.data().iter().zip(out.data()) {
        assert!((l.exp() - p).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic_across_rebinds() {
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.param(Tensor::matrix(3, 2, vec![0.1, -0.7, 0.4, 0.9, -0.3, 0.2]).unwrap());
    let h = g.matmul(x, w);
    let s = g.softmax(h);
    let l = g.log(s);
    let loss = g.mean(l);
    let input = Tensor::matrix(2, 3, vec![0.3, 1.1, -0.4, 2.0, -1.0, 0.5]).unwrap();
    g.bind(x, input.clone()).unwrap();
    let first = g.forward(loss).unwrap().item();
    g.bind(x, input).unwrap();
    let second = g.forward(loss).unwrap().item();
    assert_eq!(first.to_bits(), second.to_bits());
}

#[test]
fn log_outside_domain_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 0.0]));
    let l = g.log(a);
    assert!(matches!(g.forward(l), Err(GraphError::Domain { op: "log", .. })));
}

/// Builds a scalar loss exercising one op on parameter inputs.
fn op_loss(op: usize, rows: usize, cols: usize, a: &[f64], b: &[f64]) -> (Graph, NodeId) {
    let mut g = Graph::new();
    let pa = g.param(Tensor::matrix(rows, cols, a.to_vec()).unwrap());
    let pb = g.param(Tensor::matrix(rows, cols, b.to_vec()).unwrap());
    // fixed random-looking weights make every output entry matter
    let weights: Vec<f64> = (0..rows * cols).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = g.constant(Tensor::matrix(rows, cols, weights).unwrap());
    let weigh = |g: &mut Graph, node: NodeId| {
        let m = g.mul(w, node);
        g.sum(m)
    };
    let loss = match op {
        0 => {
            let n = g.add(pa, pb);
            weigh(&mut g, n)
        }
        1 => {
            let n = g.sub(pa, pb);
            weigh(&mut g, n)
        }
        2 => {
            let s = g.scale(pa, -1.7);
            let n = g.mul(s, pb);
            weigh(&mut g, n)
        }
        3 => {
            let bt = g.constant(Tensor::matrix(cols, rows, b.to_vec()).unwrap());
            let m = g.matmul(pa, bt);
            let sq = g.mul(m, m);
            g.mean(sq)
        }
        4 => {
            let n = g.relu(pa);
            weigh(&mut g, n)
        }
        5 => {
            let n = g.exp(pa);
            weigh(&mut g, n)
        }
        6 => {
            let e = g.softplus(pa);
            let n = g.log(e);
            weigh(&mut g, n)
        }
        7 => {
            let n = g.sigmoid(pa);
            weigh(&mut g, n)
        }
        8 => {
            let r = g.mean_rows(pa);
            let n = g.l2_norm(r);
            let d = g.dot(pa, pb);
            g.add(n, d)
        }
        9 => {
            let n = g.softmax(pa);
            weigh(&mut g, n)
        }
        10 => {
            let n = g.log_softmax(pa);
            weigh(&mut g, n)
        }
        11 => {
            let c = g.cosine(pa, pb);
            g.sum(c)
        }
        12 => {
            let r = g.row_norms(pa);
            let c = g.concat_rows(pa, pb);
            let gathered = g.gather_rows(c, vec![0, rows, 0]);
            let gs = g.sum(gathered);
            let rs = g.mean(r);
            g.add(gs, rs)
        }
        13 => {
            let centre = g.mean_rows(pb);
            let n = g.sub_row(pa, centre);
            let back = g.add_row(n, centre);
            weigh(&mut g, back)
        }
        _ => unreachable!(),
    };
    (g, loss)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_op_matches_finite_differences(
        op in 0usize..14,
        rows in 1usize..5,
        cols in 1usize..5,
        seed in proptest::collection::vec(-2.0f64..2.0, 128),
    ) {
        let n = rows * cols;
        let (a, b) = (&seed[..n], &seed[64..64 + n]);
        let (mut g, loss) = op_loss(op, rows, cols, a, b);
        match finite_diff_check(&mut g, loss, 1e-6) {
            Ok(err) => prop_assert!(err <= 1e-4, "op {op}: relative error {err}"),
            // documented exclusions: ReLU kinks and zero norms
            Err(GraphError::NonSmooth { .. }) => {}
            Err(e) => prop_assert!(false, "op {op}: {e}"),
        }
    }

    #[test]
    fn backward_is_linear(
        x in proptest::collection::vec(-2.0f64..2.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let build = |wa: f64, wb: f64| {
            let mut g = Graph::new();
            let p = g.param(Tensor::matrix(2, 3, x.clone()).unwrap());
            let s = g.softmax(p);
            let l1 = g.mean(s);
            let e = g.exp(p);
            let l2 = g.l2_norm(e);
            let s1 = g.scale(l1, wa);
            let s2 = g.scale(l2, wb);
            let loss = g.add(s1, s2);
            let grads = g.backward(loss).unwrap();
            grads.get(p).unwrap().clone()
        };
        let combined = build(a, b);
        let g1 = build(1.0, 0.0);
        let g2 = build(0.0, 1.0);
        for i in 0..6 {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() <= 1e-10);
        }
    }
}
