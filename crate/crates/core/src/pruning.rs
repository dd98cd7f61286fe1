//! Post hoc magnitude pruning and sparsity accounting.
//!
//! The same fraction is applied independently to every prunable matrix
//! ("greedy layer-wise"). Logits matrices and biases are never touched.
//! Pruned weights become exact zeros; storage stays dense.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::network::{DropoutMasks, Gradients, Network};
use crate::rng::Rng;
use crate::targeting::{check_rate, lowest_columns, lowest_per_column};
use crate::tensor::Tensor;
use crate::{drop_count, Granularity};

/// Keep/drop decision for every weight; `true` keeps.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    pub granularity: Granularity,
    pub fraction: f64,
    /// Row-major per matrix, same order as [`Network::matrices`].
    pub keep: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn keep_all(net: &Network, granularity: Granularity) -> Self {
        Self {
            granularity,
            fraction: 0.0,
            keep: net.matrices().iter().map(|m| vec![true; m.values.len()]).collect(),
        }
    }

    pub fn dropped(&self) -> usize {
        self.keep.iter().flatten().filter(|&&k| !k).count()
    }

    fn check(&self, net: &Network) -> Result<()> {
        let ok = self.keep.len() == net.matrices().len()
            && self
                .keep
                .iter()
                .zip(net.matrices())
                .all(|(k, m)| k.len() == m.values.len());
        if !ok {
            let have: Vec<usize> = self.keep.iter().map(Vec::len).collect();
            let want: Vec<usize> = net.matrices().iter().map(|m| m.values.len()).collect();
            return Err(Error::dim("prune mask", &have, &want));
        }
        Ok(())
    }

    /// Zeroes gradient entries of dropped weights.
    pub fn mask_gradients(&self, grads: &mut Gradients) {
        for (g, keep) in grads.weights.iter_mut().zip(&self.keep) {
            for (v, &k) in g.data_mut().iter_mut().zip(keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }

    /// The mask as forward-pass weight masks (`None` where nothing drops).
    pub fn to_dropout_masks(&self, net: &Network) -> Result<DropoutMasks> {
        self.check(net)?;
        let mut masks = DropoutMasks::empty(net.matrices().len());
        for ((slot, keep), m) in masks.weight.iter_mut().zip(&self.keep).zip(net.matrices()) {
            if keep.iter().all(|&k| k) {
                continue;
            }
            let data = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
            *slot = Some(Tensor::new(m.values.shape().to_vec(), data)?);
        }
        Ok(masks)
    }
}

/// Keeps the `N_row - ceil(fraction * N_row)` largest `|w|` of every column.
pub fn weight_prune_mask(net: &Network, fraction: f64) -> Result<PruneMask> {
    check_rate("fraction", fraction)?;
    let mut scratch = Vec::new();
    let keep = net
        .matrices()
        .iter()
        .map(|m| {
            if !m.prunable || m.is_logits {
                vec![true; m.values.len()]
            } else {
                lowest_per_column(m, fraction, &mut scratch)
                    .into_iter()
                    .map(|low| !low)
                    .collect()
            }
        })
        .collect();
    Ok(PruneMask {
        granularity: Granularity::Weight,
        fraction,
        keep,
    })
}

/// Keeps the `N_col - ceil(fraction * N_col)` columns of largest L2 norm.
pub fn unit_prune_mask(net: &Network, fraction: f64) -> Result<PruneMask> {
    check_rate("fraction", fraction)?;
    let mut scratch = Vec::new();
    let keep = net
        .matrices()
        .iter()
        .map(|m| {
            if !m.prunable || m.is_logits {
                return vec![true; m.values.len()];
            }
            let low = lowest_columns(m, fraction, &mut scratch);
            let mut keep = Vec::with_capacity(m.values.len());
            for _ in 0..m.rows() {
                keep.extend(low.iter().map(|&l| !l));
            }
            keep
        })
        .collect();
    Ok(PruneMask {
        granularity: Granularity::Unit,
        fraction,
        keep,
    })
}

pub fn magnitude_prune_mask(net: &Network, granularity: Granularity, fraction: f64) -> Result<PruneMask> {
    match granularity {
        Granularity::Weight => weight_prune_mask(net, fraction),
        Granularity::Unit => unit_prune_mask(net, fraction),
    }
}

/// Same per-column (weight) or per-matrix (unit) drop counts as the
/// magnitude masks, chosen uniformly at random. Draws matrix by matrix;
/// for weights, column by column.
pub fn random_prune_mask(
    net: &Network,
    fraction: f64,
    granularity: Granularity,
    rng: &mut Rng,
) -> Result<PruneMask> {
    check_rate("fraction", fraction)?;
    let keep = net
        .matrices()
        .iter()
        .map(|m| {
            let (rows, cols) = (m.rows(), m.cols());
            let mut keep = vec![true; rows * cols];
            if !m.prunable || m.is_logits {
                return keep;
            }
            match granularity {
                Granularity::Weight => {
                    let k = drop_count(fraction, rows);
                    for c in 0..cols {
                        for r in sample_without_replacement(rows, k, rng) {
                            keep[r * cols + c] = false;
                        }
                    }
                }
                Granularity::Unit => {
                    let k = drop_count(fraction, cols);
                    for c in sample_without_replacement(cols, k, rng) {
                        for r in 0..rows {
                            keep[r * cols + c] = false;
                        }
                    }
                }
            }
            keep
        })
        .collect();
    Ok(PruneMask {
        granularity,
        fraction,
        keep,
    })
}

/// First `k` positions of a partial Fisher-Yates shuffle of `0..n`.
fn sample_without_replacement(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Sets dropped weights to exactly `0.0`.
pub fn apply_prune(net: &mut Network, mask: &PruneMask) -> Result<SparsityReport> {
    mask.check(net)?;
    for (m, keep) in net.matrices_mut().iter_mut().zip(&mask.keep) {
        for (w, &k) in m.values.data_mut().iter_mut().zip(keep) {
            if !k {
                *w = 0.0;
            }
        }
    }
    Ok(SparsityReport::of(net))
}

/// Pruned copy; the input network is left untouched.
pub fn pruned(net: &Network, mask: &PruneMask) -> Result<(Network, SparsityReport)> {
    let mut copy = net.clone();
    let report = apply_prune(&mut copy, mask)?;
    Ok((copy, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixSparsity {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    pub nonzeros: usize,
    pub density: f64,
    pub prunable: bool,
}

/// Nonzero counts per matrix. Biases are never counted.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub matrices: Vec<MatrixSparsity>,
}

impl SparsityReport {
    pub fn of(net: &Network) -> Self {
        Self {
            matrices: net
                .matrices()
                .iter()
                .map(|m| {
                    let nonzeros = m.values.count_nonzero();
                    MatrixSparsity {
                        id: m.id.clone(),
                        rows: m.rows(),
                        cols: m.cols(),
                        nonzeros,
                        density: nonzeros as f64 / m.values.len() as f64,
                        prunable: m.prunable && !m.is_logits,
                    }
                })
                .collect(),
        }
    }

    fn density_over(&self, include: impl Fn(&MatrixSparsity) -> bool) -> f64 {
        let (nz, total) = self
            .matrices
            .iter()
            .filter(|m| include(m))
            .fold((0, 0), |(nz, t), m| (nz + m.nonzeros, t + m.rows * m.cols));
        if total == 0 {
            1.0
        } else {
            nz as f64 / total as f64
        }
    }

    /// Nonzero prunable weights over all prunable weights (logits excluded
    /// from numerator and denominator).
    pub fn global_density(&self) -> f64 {
        self.density_over(|m| m.prunable)
    }

    /// Same ratio with logits matrices counted.
    pub fn global_density_with_logits(&self) -> f64 {
        self.density_over(|_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkBuilder;

    fn net_with(rows: usize, cols: usize, values: Vec<f64>) -> Network {
        let mut net = NetworkBuilder::new(&[rows])
            .dense(cols)
            .relu()
            .logits(2)
            .build(&mut Rng::new(3))
            .unwrap();
        net.matrices_mut()[0].values = Tensor::matrix(rows, cols, values).unwrap();
        net
    }

    #[test]
    fn fraction_zero_keeps_everything() {
        let net = net_with(3, 2, vec![1.0, -2.0, 3.0, 0.5, -0.1, 4.0]);
        for mask in [
            weight_prune_mask(&net, 0.0).unwrap(),
            unit_prune_mask(&net, 0.0).unwrap(),
            random_prune_mask(&net, 0.0, Granularity::Weight, &mut Rng::new(0)).unwrap(),
        ] {
            assert_eq!(mask.dropped(), 0);
        }
    }

    #[test]
    fn weight_mask_drops_smallest_in_column() {
        let net = net_with(3, 1, vec![3.0, 0.5, -2.0]);
        let mask = weight_prune_mask(&net, 1.0 / 3.0).unwrap();
        assert_eq!(mask.keep[0], vec![true, false, true]);
    }

    #[test]
    fn unit_mask_drops_smallest_norm_column() {
        // column norms 5, 1, 3
        let net = net_with(1, 3, vec![5.0, -1.0, 3.0]);
        let mask = unit_prune_mask(&net, 1.0 / 3.0).unwrap();
        assert_eq!(mask.keep[0], vec![true, false, true]);
    }

    #[test]
    fn full_unit_pruning_spares_logits_and_biases() {
        let mut net = net_with(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        net.biases_mut()[0] = vec![0.1, 0.2, 0.3];
        let logits_before = net.matrices()[1].clone();
        let biases_before = net.biases().to_vec();
        let mask = unit_prune_mask(&net, 1.0).unwrap();
        let report = apply_prune(&mut net, &mask).unwrap();
        assert_eq!(net.matrices()[0].values.count_nonzero(), 0);
        assert_eq!(net.matrices()[1], logits_before);
        assert_eq!(net.biases(), &biases_before[..]);
        assert_eq!(report.global_density(), 0.0);
        assert!(report.global_density_with_logits() > 0.0);
    }

    #[test]
    fn random_mask_matches_magnitude_counts() {
        let mut rng = Rng::new(10);
        let net = NetworkBuilder::new(&[20])
            .dense(7)
            .relu()
            .logits(3)
            .build(&mut rng)
            .unwrap();
        for f in [0.1, 0.33, 0.5, 0.9] {
            let mag = weight_prune_mask(&net, f).unwrap();
            let rnd = random_prune_mask(&net, f, Granularity::Weight, &mut rng).unwrap();
            for c in 0..7 {
                let count = |m: &PruneMask| (0..20).filter(|r| !m.keep[0][r * 7 + c]).count();
                assert_eq!(count(&mag), count(&rnd));
            }
            let umag = unit_prune_mask(&net, f).unwrap();
            let urnd = random_prune_mask(&net, f, Granularity::Unit, &mut rng).unwrap();
            assert_eq!(umag.dropped(), urnd.dropped());
        }
    }

    #[test]
    fn random_masks_differ_across_seeds() {
        let net = NetworkBuilder::new(&[100])
            .dense(100)
            .relu()
            .logits(2)
            .build(&mut Rng::new(0))
            .unwrap();
        let a = random_prune_mask(&net, 0.5, Granularity::Weight, &mut Rng::new(1)).unwrap();
        let b = random_prune_mask(&net, 0.5, Granularity::Weight, &mut Rng::new(2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn all_keep_mask_is_a_no_op() {
        let net = net_with(3, 2, vec![1.0, -2.0, 3.0, 0.5, -0.1, 4.0]);
        let (copy, _) = pruned(&net, &PruneMask::keep_all(&net, Granularity::Weight)).unwrap();
        assert_eq!(copy, net);
    }

    #[test]
    fn reapplying_the_criterion_is_idempotent() {
        let mut rng = Rng::new(4);
        let net = NetworkBuilder::new(&[30]).dense(8).relu().logits(3).build(&mut rng).unwrap();
        for g in [Granularity::Weight, Granularity::Unit] {
            let m1 = magnitude_prune_mask(&net, g, 0.6).unwrap();
            let (once, _) = pruned(&net, &m1).unwrap();
            let m2 = magnitude_prune_mask(&once, g, 0.6).unwrap();
            assert_eq!(m1.keep, m2.keep);
            let (twice, _) = pruned(&once, &m2).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn mask_shape_checked() {
        let mut net = net_with(3, 2, vec![1.0; 6]);
        let mut mask = PruneMask::keep_all(&net, Granularity::Weight);
        mask.keep[0].pop();
        assert!(apply_prune(&mut net, &mask).is_err());
    }

    #[test]
    fn report_density_matches_direct_count() {
        let mut rng = Rng::new(8);
        let mut net = NetworkBuilder::new(&[40]).dense(9).relu().logits(4).build(&mut rng).unwrap();
        let mask = weight_prune_mask(&net, 0.75).unwrap();
        let report = apply_prune(&mut net, &mask).unwrap();
        let nz = net.matrices()[0].values.count_nonzero();
        assert_eq!(report.matrices[0].nonzeros, nz);
        assert_eq!(report.global_density(), nz as f64 / 360.0);
        // 40 rows: drop ceil(30) => 10 kept per column
        assert_eq!(nz, 90);
    }
}
