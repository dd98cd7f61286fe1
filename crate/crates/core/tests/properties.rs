use proptest::prelude::*;

use sparsekit_core::network::NetworkBuilder;
use sparsekit_core::pruning::{
    apply_prune, magnitude_prune_mask, pruned, random_prune_mask, unit_prune_mask, weight_prune_mask, SparsityReport,
};
use sparsekit_core::targeting::{
    ramping_alpha, ramping_gamma, sample_targeted_masks, select_candidates, Candidates, TargetingSpec,
};
use sparsekit_core::{Granularity, Network, Rng};

/// Two prunable matrices and a logits layer. With `ties` the weights are
/// rounded to a coarse grid so equal magnitudes are common.
fn net(rows: usize, cols: usize, seed: u64, ties: bool) -> Network {
    let mut net = NetworkBuilder::new(&[rows])
        .dense(cols)
        .relu()
        .dense(cols + 1)
        .relu()
        .logits(3)
        .build(&mut Rng::new(seed))
        .unwrap();
    if ties {
        for m in net.matrices_mut() {
            for w in m.values.data_mut() {
                *w = (*w * 2.0).round() / 2.0;
            }
        }
    }
    net
}

/// ceil(num/den * n) in exact integer arithmetic.
fn ceil_count(num: usize, den: usize, n: usize) -> usize {
    (num * n).div_ceil(den)
}

/// Positions of the `k` smallest scores by a full sort on (score, index).
fn sorted_lowest(scores: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut out = vec![false; scores.len()];
    for &i in &order[..k] {
        out[i] = true;
    }
    out
}

fn oracle_weight_keep(values: &[f64], rows: usize, cols: usize, k: usize) -> Vec<bool> {
    let mut keep = vec![true; rows * cols];
    for c in 0..cols {
        let col: Vec<f64> = (0..rows).map(|r| values[r * cols + c].abs()).collect();
        for (r, d) in sorted_lowest(&col, k).into_iter().enumerate() {
            keep[r * cols + c] = !d;
        }
    }
    keep
}

fn oracle_unit_keep(values: &[f64], rows: usize, cols: usize, k: usize) -> Vec<bool> {
    let norms: Vec<f64> = (0..cols)
        .map(|c| (0..rows).map(|r| values[r * cols + c].powi(2)).sum::<f64>().sqrt())
        .collect();
    let dropped = sorted_lowest(&norms, k);
    (0..rows * cols).map(|i| !dropped[i % cols]).collect()
}

fn net_strategy() -> impl Strategy<Value = (usize, usize, u64, bool)> {
    (1usize..14, 1usize..9, any::<u64>(), any::<bool>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn magnitude_masks_match_full_sort((rows, cols, seed, ties) in net_strategy(), tenth in 0usize..=10) {
        let net = net(rows, cols, seed, ties);
        let f = tenth as f64 / 10.0;
        let wm = weight_prune_mask(&net, f).unwrap();
        let um = unit_prune_mask(&net, f).unwrap();
        for (i, m) in net.matrices().iter().enumerate() {
            let (r, c) = (m.rows(), m.cols());
            if m.is_logits {
                prop_assert!(wm.keep[i].iter().all(|&k| k));
                prop_assert!(um.keep[i].iter().all(|&k| k));
                continue;
            }
            prop_assert_eq!(&wm.keep[i], &oracle_weight_keep(m.values.data(), r, c, ceil_count(tenth, 10, r)));
            prop_assert_eq!(&um.keep[i], &oracle_unit_keep(m.values.data(), r, c, ceil_count(tenth, 10, c)));
        }
    }

    #[test]
    fn candidates_are_the_complement_of_the_keep_set(
        (rows, cols, seed, ties) in net_strategy(),
        gamma in 0.0f64..=1.0,
        unit in any::<bool>(),
    ) {
        let net = net(rows, cols, seed, ties);
        let g = if unit { Granularity::Unit } else { Granularity::Weight };
        let spec = TargetingSpec::new(g, gamma, 0.5).unwrap();
        let cand = select_candidates(&net, &spec);
        let keep = magnitude_prune_mask(&net, g, gamma).unwrap();
        for (i, m) in net.matrices().iter().enumerate() {
            match &cand.per_matrix[i] {
                None => prop_assert!(m.is_logits),
                Some(c) => {
                    for r in 0..m.rows() {
                        for col in 0..m.cols() {
                            prop_assert_ne!(c.covers(r, col), keep.keep[i][r * m.cols() + col]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn candidate_sets_grow_with_gamma(
        (rows, cols, seed, ties) in net_strategy(),
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
        unit in any::<bool>(),
    ) {
        let (g1, g2) = if a <= b { (a, b) } else { (b, a) };
        let net = net(rows, cols, seed, ties);
        let g = if unit { Granularity::Unit } else { Granularity::Weight };
        let small = select_candidates(&net, &TargetingSpec::new(g, g1, 1.0).unwrap());
        let large = select_candidates(&net, &TargetingSpec::new(g, g2, 1.0).unwrap());
        for (s, l) in small.per_matrix.iter().zip(&large.per_matrix) {
            let (Some(s), Some(l)) = (s, l) else { continue };
            let (rows, cols) = match s {
                Candidates::Weights { rows, cols, .. } | Candidates::Units { rows, cols, .. } => (*rows, *cols),
            };
            for r in 0..rows {
                for c in 0..cols {
                    prop_assert!(!s.covers(r, c) || l.covers(r, c));
                }
            }
        }
    }

    #[test]
    fn full_drop_rate_reproduces_the_pruning_keep_set(
        (rows, cols, seed, ties) in net_strategy(),
        gamma in 0.0f64..=1.0,
        unit in any::<bool>(),
    ) {
        let net = net(rows, cols, seed, ties);
        let g = if unit { Granularity::Unit } else { Granularity::Weight };
        let cand = select_candidates(&net, &TargetingSpec::new(g, gamma, 1.0).unwrap());
        let masks = sample_targeted_masks(&cand, 1.0, &mut Rng::new(seed)).unwrap();
        let keep = magnitude_prune_mask(&net, g, gamma).unwrap();
        for (i, m) in net.matrices().iter().enumerate() {
            match &masks.weight[i] {
                None => prop_assert!(m.is_logits),
                Some(mask) => {
                    let from_mask: Vec<bool> = mask.data().iter().map(|&v| v == 1.0).collect();
                    prop_assert_eq!(&from_mask, &keep.keep[i]);
                }
            }
        }
    }

    #[test]
    fn zero_drop_rate_keeps_everything((rows, cols, seed, ties) in net_strategy(), gamma in 0.0f64..=1.0) {
        let net = net(rows, cols, seed, ties);
        let cand = select_candidates(&net, &TargetingSpec::new(Granularity::Weight, gamma, 0.0).unwrap());
        let masks = sample_targeted_masks(&cand, 0.0, &mut Rng::new(seed)).unwrap();
        for m in masks.weight.iter().flatten() {
            prop_assert!(m.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn pruning_is_idempotent_and_spares_biases_and_logits(
        (rows, cols, seed, ties) in net_strategy(),
        f in 0.0f64..=1.0,
        unit in any::<bool>(),
    ) {
        let original = net(rows, cols, seed, ties);
        let g = if unit { Granularity::Unit } else { Granularity::Weight };
        let (once, report) = pruned(&original, &magnitude_prune_mask(&original, g, f).unwrap()).unwrap();
        let (twice, _) = pruned(&once, &magnitude_prune_mask(&once, g, f).unwrap()).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(once.biases(), original.biases());
        let logits = original.matrices().iter().position(|m| m.is_logits).unwrap();
        prop_assert_eq!(&once.matrices()[logits], &original.matrices()[logits]);

        let nonzero: usize = once.matrices().iter().filter(|m| m.prunable)
            .map(|m| m.values.data().iter().filter(|&&w| w != 0.0).count()).sum();
        let total: usize = once.matrices().iter().filter(|m| m.prunable).map(|m| m.values.len()).sum();
        prop_assert_eq!(report.global_density(), nonzero as f64 / total as f64);
        for (row, m) in report.matrices.iter().zip(once.matrices()) {
            prop_assert_eq!(row.nonzeros, m.values.data().iter().filter(|&&w| w != 0.0).count());
        }
    }

    #[test]
    fn random_masks_match_magnitude_counts(
        (rows, cols, seed, ties) in net_strategy(),
        f in 0.0f64..=1.0,
        unit in any::<bool>(),
    ) {
        let net = net(rows, cols, seed, ties);
        let g = if unit { Granularity::Unit } else { Granularity::Weight };
        let magnitude = magnitude_prune_mask(&net, g, f).unwrap();
        let random = random_prune_mask(&net, f, g, &mut Rng::new(seed ^ 1)).unwrap();
        for (i, m) in net.matrices().iter().enumerate() {
            let c = m.cols();
            let dropped = |k: &Vec<bool>, col: usize| (0..m.rows()).filter(|&r| !k[r * c + col]).count();
            if unit {
                let dead = |k: &Vec<bool>| (0..c).filter(|&col| dropped(k, col) == m.rows()).count();
                prop_assert_eq!(dead(&magnitude.keep[i]), dead(&random.keep[i]));
                // whole columns only
                for col in 0..c {
                    prop_assert!(dropped(&random.keep[i], col) % m.rows() == 0);
                }
            } else {
                for col in 0..c {
                    prop_assert_eq!(dropped(&magnitude.keep[i], col), dropped(&random.keep[i], col));
                }
            }
        }
    }

    #[test]
    fn ramping_gamma_is_monotone(final_gamma in 0.0f64..=1.0, ramp in 2usize..200) {
        let mut prev = 0.0;
        for e in 0..ramp + 5 {
            let g = ramping_gamma(final_gamma, e, ramp);
            prop_assert!(g >= prev - 1e-15);
            prop_assert!(g <= final_gamma + 1e-15);
            prev = g;
        }
        prop_assert!((0..=ramp + 3).all(|t| (0.0..=1.0).contains(&ramping_alpha(t, ramp))));
    }
}

#[test]
fn ramping_gamma_is_continuous_at_the_phase_boundaries() {
    let g = 0.99;
    let left = 0.95 * g * 48.999_999 / 49.0;
    assert!((ramping_gamma(g, 49, 98) - left).abs() < 1e-7);
    assert!((ramping_gamma(g, 49, 98) - 0.9405).abs() < 1e-12);
    assert!((ramping_gamma(g, 97, 98) + 0.05 * g / 49.0 - g).abs() < 1e-12);
    assert_eq!(ramping_gamma(g, 98, 98), g);
    assert_eq!(ramping_gamma(g, 0, 98), 0.0);
}

#[test]
fn toy_net_density_after_three_quarter_weight_pruning() {
    let mut toy = sparsekit_core::Architecture::ToyDense { hidden: 10 }
        .build(&[3, 32, 32], 10, &mut Rng::new(2))
        .unwrap();
    let mask = weight_prune_mask(&toy, 0.75).unwrap();
    let report = apply_prune(&mut toy, &mask).unwrap();
    // 3072 rows: exactly 768 survive in each of the 10 columns
    assert_eq!(report.global_density(), 0.25);
    assert_eq!(report, SparsityReport::of(&toy));
}

#[test]
fn distinct_seeds_give_distinct_random_masks() {
    let big = NetworkBuilder::new(&[100]).dense(100).relu().logits(2).build(&mut Rng::new(0)).unwrap();
    let a = random_prune_mask(&big, 0.5, Granularity::Weight, &mut Rng::new(1)).unwrap();
    let b = random_prune_mask(&big, 0.5, Granularity::Weight, &mut Rng::new(2)).unwrap();
    assert_ne!(a.keep, b.keep);
}
