use gues_tensor::{grad_check, primitive_suite, Attrs, Graph, Primitive, SeededRng, Tensor, TensorError};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

#[test]
fn conv2d_all_ones() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let k = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(3));
    let v = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let y = g.matmul(i, v).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn softmax_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[5]));
    let y = g.softmax(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[2.0, -4.0, 6.0]);
}

#[test]
fn backward_of_mean() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec(vec![4.0, 1.0, -1.0, 7.0]));
    let loss = g.mean(x).unwrap();
    assert_eq!(g.backward(loss).unwrap().wrt(x).unwrap(), &[0.25; 4]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2]));
    assert_eq!(g.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
}

#[test]
fn unknown_primitive_and_shape_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(
        g.apply_named("fft", &[a], &Attrs::new()),
        Err(TensorError::UnknownPrimitive(name)) if name == "fft"
    ));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }), "{err}");
    assert!(err.to_string().contains('3') && err.to_string().contains('4'));
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, k, 1, 0), Err(TensorError::ShapeMismatch { op: "conv2d", .. })));
}

#[test]
fn every_primitive_name_round_trips() {
    for p in Primitive::ALL {
        assert_eq!(p.name().parse::<Primitive>().unwrap(), p);
    }
}

#[test]
fn log_of_nonpositive_is_a_domain_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
    assert!(matches!(g.log(x), Err(TensorError::Domain { op: "log", .. })));
}

#[test]
fn exp_overflow_is_reported() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![1000.0]));
    assert_eq!(g.exp(x).unwrap_err(), TensorError::NonFinite { op: "exp" });
}

#[test]
fn relu_kink_is_excluded() {
    let x = Tensor::from_vec(vec![0.0, 0.5, -0.5]);
    let report = grad_check(
        |g, x| {
            let y = g.relu(x)?;
            g.sum(y)
        },
        &x,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed());
    assert!(report.entries[0].excluded);
    assert!(!report.entries[1].excluded && !report.entries[2].excluded);
}

#[test]
fn sum_of_squares_gradcheck() {
    let x = random(&[10], 1);
    let report = grad_check(
        |g, x| {
            let y = g.mul(x, x)?;
            g.sum(y)
        },
        &x,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max rel {}", report.max_rel_error());
    assert_eq!(report.excluded(), 0);
}

#[test]
fn every_primitive_matches_finite_differences() {
    let reports = primitive_suite(1e-5, 1e-4).unwrap();
    let covered: Vec<&str> = reports.iter().map(|r| r.label.as_str()).collect();
    for p in Primitive::ALL {
        assert!(covered.iter().any(|l| l.starts_with(p.name())), "{} not covered", p.name());
    }
    for r in &reports {
        assert!(r.passed(), "{}: max rel {}", r.label, r.max_rel_error());
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> for the same kernel and geometry
    let x = random(&[1, 2, 8, 8], 21);
    let k = random(&[3, 2, 3, 3], 22);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k.clone());
    let cx = g.conv2d(xv, kv, 2, 1).unwrap();
    let y = random(g.shape(cx), 23);
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let yv = g.constant(y);
    let ty = g.conv2d_transpose(yv, kv, 2, 1, 1).unwrap();
    assert_eq!(g.shape(ty), x.shape());
    let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn backward_accumulates_and_is_linear() {
    let x = random(&[6], 31);
    let grad_of = |a: f64, b: f64| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let sq = g.mul(xv, xv).unwrap();
        let l1 = g.sum(sq).unwrap();
        let th = g.tanh(xv).unwrap();
        let l2 = g.sum(th).unwrap();
        let s1 = g.scale(l1, a).unwrap();
        let s2 = g.scale(l2, b).unwrap();
        let loss = g.add(s1, s2).unwrap();
        g.backward(loss).unwrap().wrt(xv).unwrap().to_vec()
    };
    let g1 = grad_of(1.0, 0.0);
    let g2 = grad_of(0.0, 1.0);
    let combo = grad_of(2.5, -1.5);
    for i in 0..6 {
        assert!((combo[i] - (2.5 * g1[i] - 1.5 * g2[i])).abs() < 1e-12);
    }
}

#[test]
fn dump_lists_edges_in_creation_order() {
    let mut g = Graph::new();
    let a = g.input(Tensor::ones(&[2]));
    let b = g.tanh(a).unwrap();
    let _ = g.add(a, b).unwrap();
    assert_eq!(g.dump_edges(), "0 leaf []\n1 tanh [0]\n2 add [0,1]\n");
}
