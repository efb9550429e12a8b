use gues_tensor::kernels::{conv_out_size, conv_transpose_out_size};
use gues_tensor::{grad_check_params, Graph, ParamStore, SeededRng, Tensor};
use proptest::prelude::*;

fn random(shape: &[usize], rng: &mut SeededRng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.normal())
}

#[test]
fn two_layer_conv_net_parameter_gradients() {
    let mut rng = SeededRng::new(2024);
    let mut store = ParamStore::new();
    let k1 = store.register("conv1.weight", random(&[4, 2, 3, 3], &mut rng, 0.5));
    let b1 = store.register("conv1.bias", random(&[1, 4, 1, 1], &mut rng, 0.1));
    let k2 = store.register("conv2.weight", random(&[3, 4, 3, 3], &mut rng, 0.5));
    let b2 = store.register("conv2.bias", random(&[1, 3, 1, 1], &mut rng, 0.1));
    let x = random(&[2, 2, 8, 8], &mut rng, 1.0);
    let target = random(&[2, 3, 2, 2], &mut rng, 1.0);

    let targets: Vec<_> = store.ids().map(|id| (id, (0..store.get(id).numel()).collect())).collect();
    let reports = grad_check_params(
        &store,
        &targets,
        |g: &mut Graph, s: &ParamStore| {
            let xv = g.constant(x.clone());
            let (k1, b1, k2, b2) = (g.param(s, k1), g.param(s, b1), g.param(s, k2), g.param(s, b2));
            let h = g.conv2d(xv, k1, 2, 1)?;
            let h = g.add(h, b1)?;
            let h = g.tanh(h)?;
            let y = g.conv2d(h, k2, 2, 1)?;
            let y = g.add(y, b2)?;
            let t = g.constant(target.clone());
            let d = g.sub(y, t)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    for r in &reports {
        assert!(r.passed(), "{}: max rel {}", r.label, r.max_rel_error());
        assert_eq!(r.entries.len(), store.get(store.find(&r.label).unwrap()).numel());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn transpose_restores_extent(input in 2usize..80, k in 1usize..5, s in 1usize..4, p in 0usize..3) {
        prop_assume!(input + 2 * p >= k && p < k);
        let down = conv_out_size(input, k, s, p).unwrap();
        // the remainder dropped by the strided conv is what output_padding restores
        let op = (input + 2 * p - k) % s;
        prop_assert_eq!(conv_transpose_out_size(down, k, s, p, op), Some(input));
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut rng = SeededRng::new(seed);
            let mut g = Graph::new();
            let x = g.constant(random(&[2, 3, 8, 8], &mut rng, 1.0));
            let k = g.constant(random(&[5, 3, 3, 3], &mut rng, 1.0));
            let y = g.conv2d(x, k, 2, 1).unwrap();
            let y = g.leaky_relu(y).unwrap();
            let z = g.gaussian_noise_like(y, seed).unwrap();
            let y = g.add(y, z).unwrap();
            let y = g.mean(y).unwrap();
            g.value(y).data()[0].to_bits()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn gradient_is_linear_in_loss_weights(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let x = random(&[5], &mut rng, 1.0);
        let grad = |wa: f64, wb: f64| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let s = g.sigmoid(xv).unwrap();
            let l1 = g.sum(s).unwrap();
            let e = g.mul(xv, xv).unwrap();
            let l2 = g.mean(e).unwrap();
            let l1 = g.scale(l1, wa).unwrap();
            let l2 = g.scale(l2, wb).unwrap();
            let l = g.add(l1, l2).unwrap();
            g.backward(l).unwrap().wrt(xv).unwrap().to_vec()
        };
        let (g1, g2, gc) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..5 {
            prop_assert!((gc[i] - (a * g1[i] + b * g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_outputs_stay_finite(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let mut g = Graph::new();
        let x = g.constant(random(&[4, 6], &mut rng, 10.0));
        for y in [g.tanh(x), g.sigmoid(x), g.softmax(x), g.log_softmax(x), g.leaky_relu(x)] {
            prop_assert!(g.value(y.unwrap()).is_finite());
        }
    }
}
