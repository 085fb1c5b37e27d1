use episteme_core::diffnet::*;
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = (Vec<usize>, Activation, u64)> {
    (
        prop::collection::vec(1usize..6, 2..5),
        prop_oneof![Just(Activation::Tanh), Just(Activation::Relu)],
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tanh_nets_pass_grad_check((sizes, _, seed) in spec_strategy(), batch in 1usize..4) {
        let net: Mlp<f64> = build_mlp(&MlpSpec::new(sizes.clone(), Activation::Tanh, seed)).unwrap();
        let n = batch * sizes[0];
        let input: Vec<f64> = (0..n).map(|i| ((i as f64 + seed as f64 % 7.0) * 0.37).sin()).collect();
        let x = Tensor::matrix(batch, sizes[0], input).unwrap();
        let check = grad_check(&net, &x, 1e-4).unwrap();
        prop_assert!(check.passed, "max relative error {}", check.max_rel_error);
    }

    #[test]
    fn output_shape_follows_spec((sizes, act, seed) in spec_strategy(), batch in 1usize..5) {
        let net: Mlp<f64> = build_mlp(&MlpSpec::new(sizes.clone(), act, seed)).unwrap();
        let x = Tensor::matrix(batch, sizes[0], vec![0.5; batch * sizes[0]]).unwrap();
        let out = net.forward(&x).unwrap();
        prop_assert_eq!(out.shape(), &[batch, *sizes.last().unwrap()][..]);
    }

    #[test]
    fn json_round_trip_is_exact((sizes, act, seed) in spec_strategy()) {
        let net: Mlp<f64> = build_mlp(&MlpSpec::new(sizes, act, seed)).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: Mlp<f64> = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, net);
    }

    #[test]
    fn kl_is_non_negative(
        qm in prop::collection::vec(-5.0f64..5.0, 3),
        qs in prop::collection::vec(0.05f64..5.0, 3),
        pm in prop::collection::vec(-5.0f64..5.0, 3),
        ps in prop::collection::vec(0.05f64..5.0, 3),
    ) {
        prop_assert!(kl_diag_gaussians(&qm, &qs, &pm, &ps).unwrap() >= 0.0);
        prop_assert_eq!(kl_diag_gaussians(&qm, &qs, &qm, &qs).unwrap(), 0.0);
    }

    #[test]
    fn glorot_bounds_hold(fan_in in 1usize..20, fan_out in 1usize..20, seed in any::<u64>()) {
        let net: Mlp<f64> = build_mlp(&MlpSpec::new(vec![fan_in, fan_out], Activation::Tanh, seed)).unwrap();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let layer = &net.layers()[0];
        prop_assert!(layer.weight.values().iter().all(|w| w.abs() <= limit));
        prop_assert!(layer.bias.values().iter().all(|&b| b == 0.0));
    }
}

#[test]
fn same_seed_same_weights() {
    let spec = MlpSpec::new(vec![3, 8, 2], Activation::Tanh, 42);
    let a: Mlp<f64> = build_mlp(&spec).unwrap();
    let b: Mlp<f64> = build_mlp(&spec).unwrap();
    assert_eq!(a, b);
    let c: Mlp<f64> = build_mlp(&MlpSpec::new(vec![3, 8, 2], Activation::Tanh, 43)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn corrupted_gradient_is_caught() {
    let net: Mlp<f64> = build_mlp(&MlpSpec::new(vec![2, 4, 1], Activation::Tanh, 3)).unwrap();
    let x = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
    let out = net.forward(&x).unwrap();
    let fb = net.forward_backward(&x, &out).unwrap();
    let mut grads = fb.grads.clone();
    grads.slices_mut()[0][0] += 0.5;
    let check = compare_gradients(&net, &x, &grads, &fb.input_grad, 1e-4).unwrap();
    assert!(!check.passed);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut params = vec![1.0f64, -2.0];
    let grads = vec![0.5f64, -3.0];
    let mut state = AdamState::new(AdamConfig::with_lr(0.1), &[2]);
    state.update(&mut [&mut params[..]], &[Some(&grads[..])]).unwrap();
    assert!((params[0] - 0.9).abs() < 1e-6);
    assert!((params[1] + 1.9).abs() < 1e-6);
}

#[test]
fn f32_and_f64_forward_agree() {
    let net: Mlp<f64> = build_mlp(&MlpSpec::new(vec![3, 5, 2], Activation::Tanh, 9)).unwrap();
    let small: Mlp<f32> = net.cast();
    let x = vec![0.1, -0.4, 0.9];
    let a = net.forward(&Tensor::vector(x.clone()).unwrap()).unwrap();
    let b = small
        .forward(&Tensor::vector(x.iter().map(|&v| v as f32).collect()).unwrap())
        .unwrap();
    for (p, q) in a.values().iter().zip(b.values()) {
        assert!((p - f64::from(*q)).abs() < 1e-5);
    }
}
