use sparsekit_core::analysis::{
    delta_e, deletion_vector, dependence_block, hvp, network_delta_e, stratified_indices, NetworkObjective, Objective,
    DEFAULT_HVP_EPS,
};
use sparsekit_core::data::{synth_blobs, Dataset};
use sparsekit_core::network::NetworkBuilder;
use sparsekit_core::pruning::weight_prune_mask;
use sparsekit_core::{Granularity, Network, Rng};

fn tiny() -> (Network, Dataset) {
    let data = synth_blobs(120, 3, 3, 1.5, &mut Rng::new(21)).unwrap();
    let mut net = NetworkBuilder::new(&[3]).dense(4).relu().logits(3).build(&mut Rng::new(22)).unwrap();
    for b in net.biases_mut().iter_mut().flatten() {
        *b = 0.05;
    }
    (net, data)
}

/// Full-batch gradient descent until the gradient norm drops below `tol`.
fn converge(net: &mut Network, data: &Dataset, tol: f64) -> f64 {
    let (x, y) = data.slice(0, data.len()).unwrap();
    for _ in 0..20_000 {
        let (_, g) = net.backward(&x, y, None).unwrap();
        if g.norm() < tol {
            return g.norm();
        }
        net.sgd_step(&g, 0.3);
    }
    net.backward(&x, y, None).unwrap().1.norm()
}

#[test]
fn hessian_is_symmetric_on_a_tiny_net() {
    let (net, data) = tiny();
    let obj = NetworkObjective::new(&net, &data);
    let n = obj.dim();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            hvp(&obj, &e, DEFAULT_HVP_EPS).unwrap()
        })
        .collect();
    let scale = cols.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, col_i) in cols.iter().enumerate() {
        for (j, col_j) in cols.iter().enumerate().take(i) {
            let diff = (col_j[i] - col_i[j]).abs();
            assert!(diff <= 1e-5 * scale, "H[{i},{j}] asymmetric by {diff} (scale {scale})");
        }
    }
}

#[test]
fn dependence_block_is_symmetric_and_zero_at_the_origin() {
    let (net, data) = tiny();
    let (idx, keep) = stratified_indices(&net, 0.5, 3, 6, &mut Rng::new(1)).unwrap();
    assert_eq!((idx.len(), keep), (9, 3));
    let block = dependence_block(&NetworkObjective::new(&net, &data), &idx, keep, DEFAULT_HVP_EPS).unwrap();
    assert!(block.asymmetry < 1e-5, "asymmetry {}", block.asymmetry);

    let mut zero = net.clone();
    zero.set_flat_params(&vec![0.0; net.param_count()]).unwrap();
    let block = dependence_block(&NetworkObjective::new(&zero, &data), &idx, keep, DEFAULT_HVP_EPS).unwrap();
    assert!(block.values.iter().all(|&v| v == 0.0));

    let err = dependence_block(&NetworkObjective::new(&net, &data), &[net.param_count()], 0, 1e-4);
    assert!(err.is_err());
}

#[test]
fn prune_block_sum_equals_the_deletion_curvature() {
    // Over the full prune set, sum_ij theta_i H_ij theta_j = d.H.d.
    let (net, data) = tiny();
    let obj = NetworkObjective::new(&net, &data);
    let mask = weight_prune_mask(&net, 0.5).unwrap();
    let d = deletion_vector(&net, &mask);
    let prune: Vec<usize> = d.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
    let block = dependence_block(&obj, &prune, 0, DEFAULT_HVP_EPS).unwrap();
    let change = delta_e(&obj, &d, DEFAULT_HVP_EPS).unwrap();
    let dhd = 2.0 * change.curvature_term;
    assert!(
        (block.prune_block_sum() - dhd).abs() <= 1e-5 * dhd.abs().max(1e-3),
        "{} vs {dhd}",
        block.prune_block_sum()
    );
}

#[test]
fn gradient_term_is_negligible_at_a_converged_minimum() {
    // heavy overlap keeps the minimum at finite weights; many samples
    // smooth out the ReLU kinks
    let data = synth_blobs(4000, 3, 3, 0.5, &mut Rng::new(23)).unwrap();
    let (mut net, _) = tiny();
    let gnorm = converge(&mut net, &data, 1e-3);
    assert!(gnorm < 1e-3, "did not converge: |g| = {gnorm}");
    for f in [0.25, 0.5, 0.75] {
        let change = network_delta_e(&net, &data, Granularity::Weight, f, DEFAULT_HVP_EPS).unwrap();
        assert!(
            change.gradient_term.abs() <= 0.1 * change.curvature_term,
            "fraction {f}: {change:?}"
        );
    }
}

#[test]
fn zero_fraction_has_zero_loss_change() {
    let (net, data) = tiny();
    let change = network_delta_e(&net, &data, Granularity::Unit, 0.0, DEFAULT_HVP_EPS).unwrap();
    assert_eq!(change.delta_e, 0.0);
}

#[test]
fn objective_gradient_matches_a_single_full_batch() {
    let (net, data) = tiny();
    let chunked = NetworkObjective::new(&net, &data).with_chunk(7);
    let (loss, grad) = chunked.loss_and_grad().unwrap();
    let (x, y) = data.slice(0, data.len()).unwrap();
    let (l, g) = net.backward(&x, y, None).unwrap();
    assert!((loss - l).abs() < 1e-12);
    for (a, b) in grad.iter().zip(g.flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}
