use sparsekit_core::data::{accuracy, synth_blobs};
use sparsekit_core::network::{cross_entropy, DropoutMasks, Gradients, NetworkBuilder};
use sparsekit_core::{Architecture, Network, Rng, Tensor};

fn random_batch(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform() * 2.0 - 1.0)
}

fn loss_at(net: &Network, theta: &[f64], x: &Tensor, y: &[usize], masks: Option<&DropoutMasks>) -> f64 {
    let mut probe = net.clone();
    probe.set_flat_params(theta).unwrap();
    probe.loss(x, y, masks).unwrap()
}

/// Largest relative error between the analytic gradient and a central
/// difference with step 1e-5, over every parameter.
fn max_gradient_error(net: &Network, x: &Tensor, y: &[usize], masks: Option<&DropoutMasks>) -> f64 {
    let (_, grads) = net.backward(x, y, masks).unwrap();
    let analytic = grads.flatten();
    let theta = net.flat_params();
    assert_eq!(analytic.len(), theta.len());
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut t = theta.clone();
        t[i] = theta[i] + eps;
        let up = loss_at(net, &t, x, y, masks);
        t[i] = theta[i] - eps;
        let down = loss_at(net, &t, x, y, masks);
        let fd = (up - down) / (2.0 * eps);
        let scale = fd.abs().max(analytic[i].abs()).max(1e-4);
        worst = worst.max((fd - analytic[i]).abs() / scale);
    }
    worst
}

fn small_dense(rng: &mut Rng) -> Network {
    // 3*3 + 3 + 3*2 + 2 = 20 parameters
    NetworkBuilder::new(&[3]).dense(3).relu().logits(2).build(rng).unwrap()
}

#[test]
fn gradient_check_dense() {
    let mut rng = Rng::new(11);
    let net = small_dense(&mut rng);
    assert_eq!(net.param_count(), 20);
    let x = random_batch(&[5, 3], &mut rng);
    let y = [0, 1, 1, 0, 1];
    let err = max_gradient_error(&net, &x, &y, None);
    assert!(err <= 1e-6, "dense gradient error {err}");
}

#[test]
fn gradient_check_conv_and_flatten() {
    let mut rng = Rng::new(12);
    let net = NetworkBuilder::new(&[2, 4, 4])
        .conv(2, 3, 1, 1)
        .relu()
        .conv(2, 2, 2, 0)
        .relu()
        .flatten()
        .logits(3)
        .build(&mut rng)
        .unwrap();
    let x = random_batch(&[3, 2, 4, 4], &mut rng);
    let err = max_gradient_error(&net, &x, &[0, 2, 1], None);
    assert!(err <= 1e-6, "conv gradient error {err}");
}

#[test]
fn gradient_check_with_weight_and_input_masks() {
    let mut rng = Rng::new(13);
    let mut net = NetworkBuilder::new(&[4]).dense(3).relu().dense(3).relu().logits(2).build(&mut rng).unwrap();
    // a killed column leaves the bias as pre-activation; keep it off the ReLU kink
    for b in net.biases_mut().iter_mut().flatten() {
        *b = 0.1 + rng.uniform();
    }
    let x = random_batch(&[4, 4], &mut rng);
    let mut masks = DropoutMasks::empty(3);
    masks.weight[0] = Some(Tensor::from_fn(&[4, 3], |i| (i % 3 != 1) as u8 as f64));
    masks.input[1] = Some(Tensor::from_fn(&[4, 3], |i| (i % 4 != 0) as u8 as f64));
    let err = max_gradient_error(&net, &x, &[1, 0, 1, 1], Some(&masks));
    assert!(err <= 1e-6, "masked gradient error {err}");
    let (_, g) = net.backward(&x, &[1, 0, 1, 1], Some(&masks)).unwrap();
    for r in 0..4 {
        assert_eq!(g.weights[0].data()[r * 3 + 1], 0.0);
    }
}

#[test]
fn all_ones_masks_are_bit_identical() {
    let mut rng = Rng::new(14);
    let net = Architecture::SmallCnn { hidden: 8 }.build(&[3, 8, 8], 10, &mut rng).unwrap();
    let x = random_batch(&[2, 3, 8, 8], &mut rng);
    let mut masks = DropoutMasks::empty(net.matrices().len());
    for (i, m) in net.matrices().iter().enumerate() {
        masks.weight[i] = Some(Tensor::ones(m.values.shape()));
    }
    masks.input[0] = Some(Tensor::ones(&[2, 3, 8, 8]));
    let plain = net.forward(&x, None).unwrap();
    let masked = net.forward(&x, Some(&masks)).unwrap();
    assert_eq!(plain.data(), masked.data());
}

#[test]
fn killed_column_leaves_only_the_bias() {
    let mut rng = Rng::new(15);
    let mut net = NetworkBuilder::new(&[4]).logits(3).build(&mut rng).unwrap();
    net.biases_mut()[0] = vec![0.5, -1.25, 2.0];
    let mut mask = Tensor::ones(&[4, 3]);
    for r in 0..4 {
        mask.data_mut()[r * 3 + 1] = 0.0;
    }
    let mut masks = DropoutMasks::empty(1);
    masks.weight[0] = Some(mask);
    let x = random_batch(&[6, 4], &mut rng);
    let out = net.forward(&x, Some(&masks)).unwrap();
    for row in out.data().chunks(3) {
        assert_eq!(row[1], -1.25);
    }
}

#[test]
fn unit_mask_zeroes_an_input_column() {
    let mut rng = Rng::new(16);
    let mut net = NetworkBuilder::new(&[2]).logits(2).build(&mut rng).unwrap();
    net.matrices_mut()[0].values = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let x = Tensor::matrix(2, 2, vec![5.0, 6.0, -1.0, 7.0]).unwrap();
    let mut masks = DropoutMasks::empty(1);
    masks.input[0] = Some(Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap());
    let out = net.forward(&x, Some(&masks)).unwrap();
    // [[5,0],[-1,0]] . [[1,2],[3,4]]
    assert_eq!(out.data(), &[5.0, 10.0, -1.0, -2.0]);
}

#[test]
fn mask_shape_mismatch_is_a_configuration_error() {
    let mut rng = Rng::new(17);
    let net = small_dense(&mut rng);
    let mut masks = DropoutMasks::empty(2);
    masks.weight[0] = Some(Tensor::ones(&[3, 2]));
    let x = random_batch(&[1, 3], &mut rng);
    let err = net.forward(&x, Some(&masks)).unwrap_err();
    assert!(matches!(err, sparsekit_core::Error::Config(_)), "{err}");
}

#[test]
fn zero_network_gradient_is_the_softmax_residual() {
    let mut rng = Rng::new(18);
    let mut net = NetworkBuilder::new(&[2]).logits(3).build(&mut rng).unwrap();
    net.set_flat_params(&vec![0.0; net.param_count()]).unwrap();
    let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, -2.0]).unwrap();
    let y = [0, 2];
    let (loss, g) = net.backward(&x, &y, None).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-15);
    // d/dlogits = (1/3 - onehot) / 2
    let r = |s: usize, k: usize| (1.0 / 3.0 - (y[s] == k) as u8 as f64) / 2.0;
    for k in 0..3 {
        let gw0 = r(0, k) - r(1, k);
        let gw1 = 2.0 * (r(0, k) - r(1, k));
        assert!((g.weights[0].data()[k] - gw0).abs() < 1e-15);
        assert!((g.weights[0].data()[3 + k] - gw1).abs() < 1e-15);
        assert!((g.biases[0][k] - (r(0, k) + r(1, k))).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_is_stable_for_large_logits() {
    let logits = Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap();
    let (loss, grad) = cross_entropy(&logits, &[0], true).unwrap();
    assert!(loss.abs() < 1e-12);
    assert!(grad.unwrap().all_finite());
}

#[test]
fn toy_net_parameter_count() {
    let net = Architecture::ToyDense { hidden: 10 }
        .build(&[3, 32, 32], 10, &mut Rng::new(0))
        .unwrap();
    assert_eq!(net.weight_count(), 3072 * 10 + 10 * 10);
    assert_eq!(net.weight_count(), 30_820);
    assert_eq!(net.bias_count(), 20);
    assert_eq!(net.param_count(), 30_840);
    assert_eq!(net.flat_params().len(), net.param_count());
}

#[test]
fn sgd_with_zero_rate_changes_nothing() {
    let mut rng = Rng::new(19);
    let mut net = small_dense(&mut rng);
    let before = net.clone();
    let x = random_batch(&[4, 3], &mut rng);
    let (_, g) = net.backward(&x, &[0, 1, 0, 1], None).unwrap();
    net.sgd_step(&g, 0.0);
    assert_eq!(net, before);
}

/// A single bias fed to a constant-zero input: the network's loss is
/// then a function of the bias alone, and `sgd_step` on a hand-built
/// gradient buffer exercises the update rule directly.
fn bias_only_net() -> Network {
    let mut net = NetworkBuilder::new(&[1]).logits(1).build(&mut Rng::new(0)).unwrap();
    net.set_flat_params(&[0.0, 0.0]).unwrap();
    net
}

#[test]
fn sgd_step_on_a_one_dimensional_quadratic() {
    // loss (theta - 3)^2, gradient 2 (theta - 3)
    let mut net = bias_only_net();
    let mut g = Gradients::zeros_like(&net);
    g.biases[0][0] = 2.0 * (net.biases()[0][0] - 3.0);
    net.sgd_step(&g, 0.1);
    assert!((net.biases()[0][0] - 0.6).abs() < 1e-15);
}

#[test]
fn sgd_converges_on_a_quadratic_bowl() {
    // loss 1/2 sum a_i (theta_i - c_i)^2 over weight and bias
    let a = [1.0, 3.0];
    let c = [-2.0, 5.0];
    let mut net = bias_only_net();
    for _ in 0..200 {
        let theta = net.flat_params();
        let mut g = Gradients::zeros_like(&net);
        g.weights[0].data_mut()[0] = a[0] * (theta[0] - c[0]);
        g.biases[0][0] = a[1] * (theta[1] - c[1]);
        net.sgd_step(&g, 0.3);
    }
    let theta = net.flat_params();
    assert!((theta[0] - c[0]).abs() < 1e-6 && (theta[1] - c[1]).abs() < 1e-6, "{theta:?}");
}

#[test]
fn l1_penalty_examples() {
    let mut net = NetworkBuilder::new(&[3]).logits(1).build(&mut Rng::new(0)).unwrap();
    net.set_flat_params(&[1.0, -2.0, 0.0, 7.0]).unwrap();
    let mut g = Gradients::zeros_like(&net);
    assert_eq!(net.l1_penalty(0.0, &mut g), 0.0);
    assert_eq!(g, Gradients::zeros_like(&net));
    let p = net.l1_penalty(0.5, &mut g);
    assert_eq!(p, 1.5);
    assert_eq!(g.weights[0].data(), &[0.5, -0.5, 0.0]);
    assert_eq!(g.biases[0], vec![0.0]);
}

fn train_blobs(net: &mut Network, beta: f64, steps: usize, lr: f64, seed: u64) -> Vec<f64> {
    let data = synth_blobs(256, 8, 4, 6.0, &mut Rng::new(seed)).unwrap();
    let mut losses = Vec::new();
    for step in 0..steps {
        let start = (step * 32) % 256;
        let (x, y) = data.slice(start, start + 32).unwrap();
        let (loss, mut g) = net.backward(&x, y, None).unwrap();
        net.l1_penalty(beta, &mut g);
        net.sgd_step(&g, lr);
        losses.push(loss);
    }
    losses
}

#[test]
fn loss_decreases_on_separable_blobs() {
    let mut net = Architecture::ToyDense { hidden: 10 }.build(&[8], 4, &mut Rng::new(3)).unwrap();
    let losses = train_blobs(&mut net, 0.0, 50, 0.05, 3);
    let first: f64 = losses[..5].iter().sum();
    let last: f64 = losses[45..].iter().sum();
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn l1_training_yields_more_near_zero_weights() {
    let small = |net: &Network| {
        net.matrices()
            .iter()
            .flat_map(|m| m.values.data())
            .filter(|w| w.abs() < 1e-3)
            .count()
    };
    let init = Architecture::ToyDense { hidden: 10 }.build(&[8], 4, &mut Rng::new(4)).unwrap();
    let mut plain = init.clone();
    let mut sparse = init;
    train_blobs(&mut plain, 0.0, 400, 0.05, 4);
    train_blobs(&mut sparse, 1e-2, 400, 0.05, 4);
    assert!(small(&sparse) > small(&plain), "{} vs {}", small(&sparse), small(&plain));
}

#[test]
fn well_separated_blobs_are_linearly_classifiable() {
    let data = synth_blobs(500, 5, 3, 10.0, &mut Rng::new(5)).unwrap();
    let mut net = NetworkBuilder::new(&[5]).logits(3).build(&mut Rng::new(5)).unwrap();
    for epoch in 0..20 {
        for start in (0..500).step_by(50) {
            let (x, y) = data.slice(start, start + 50).unwrap();
            let (_, g) = net.backward(&x, y, None).unwrap();
            net.sgd_step(&g, 0.05);
        }
        let _ = epoch;
    }
    let acc = accuracy(&net, &data, 128).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
}
