//! Second-order pruning diagnostics.
//!
//! For a deletion vector `d` (the weights a criterion would remove, zero
//! elsewhere) the loss change of removing them is estimated as
//!
//! ```text
//! dE ~= | -g.d + 1/2 d.H.d |
//! ```
//!
//! with `g` the loss gradient and `H` the Hessian, both over a fixed
//! evaluation set. `H v` is never formed explicitly: [`hvp`] takes a
//! central difference of exact gradients along `v`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::pruning::{magnitude_prune_mask, weight_prune_mask, PruneMask};
use crate::rng::Rng;
use crate::Granularity;

/// Default finite-difference step for [`hvp`], applied along the unit
/// direction `v / |v|`.
pub const DEFAULT_HVP_EPS: f64 = 1e-4;

/// A differentiable scalar loss over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Parameters at which the diagnostics are taken.
    fn point(&self) -> Vec<f64>;

    fn loss_and_grad_at(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn loss_and_grad(&self) -> Result<(f64, Vec<f64>)> {
        self.loss_and_grad_at(&self.point())
    }
}

/// Mean cross-entropy of a network over a whole dataset, evaluated in
/// fixed-size chunks in dataset order.
pub struct NetworkObjective<'a> {
    net: &'a Network,
    data: &'a Dataset,
    chunk: usize,
}

impl<'a> NetworkObjective<'a> {
    pub fn new(net: &'a Network, data: &'a Dataset) -> Self {
        Self { net, data, chunk: 500 }
    }

    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = chunk.max(1);
        self
    }
}

impl Objective for NetworkObjective<'_> {
    fn dim(&self) -> usize {
        self.net.param_count()
    }

    fn point(&self) -> Vec<f64> {
        self.net.flat_params()
    }

    fn loss_and_grad_at(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut net = self.net.clone();
        net.set_flat_params(theta)?;
        let n = self.data.len();
        if n == 0 {
            return Err(Error::Domain("evaluation set is empty".into()));
        }
        let mut loss = 0.0;
        let mut grad = vec![0.0; theta.len()];
        let mut start = 0;
        while start < n {
            let end = (start + self.chunk).min(n);
            let (images, labels) = self.data.slice(start, end)?;
            let (l, g) = net.backward(&images, labels, None)?;
            let w = (end - start) as f64 / n as f64;
            loss += w * l;
            for (acc, x) in grad.iter_mut().zip(g.flatten()) {
                *acc += w * x;
            }
            start = end;
        }
        Ok((loss, grad))
    }
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hessian-vector product at the objective's point:
/// `(g(theta + eps v^) - g(theta - eps v^)) * |v| / (2 eps)`, `v^ = v / |v|`.
/// Returns zeros for `v = 0`.
pub fn hvp(obj: &dyn Objective, v: &[f64], eps: f64) -> Result<Vec<f64>> {
    let theta = obj.point();
    if v.len() != theta.len() {
        return Err(Error::dim("hvp", &[theta.len()], &[v.len()]));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Domain(format!("hvp step {eps} must be > 0")));
    }
    let nv = norm(v);
    if !nv.is_finite() {
        return Err(Error::Domain("hvp direction is not finite".into()));
    }
    if nv == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let step = eps / nv;
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, x)| t + step * x).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, x)| t - step * x).collect();
    let (_, gp) = obj.loss_and_grad_at(&plus)?;
    let (_, gm) = obj.loss_and_grad_at(&minus)?;
    let scale = nv / (2.0 * eps);
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) * scale).collect())
}

/// `d_i = theta_i` where the mask drops weight `i`, else 0; flat over the
/// whole parameter vector (biases are never deleted).
pub fn deletion_vector(net: &Network, mask: &PruneMask) -> Vec<f64> {
    let mut d = vec![0.0; net.param_count()];
    let mut off = 0;
    for (m, keep) in net.matrices().iter().zip(&mask.keep) {
        for (i, (&w, &k)) in m.values.data().iter().zip(keep).enumerate() {
            if !k {
                d[off + i] = w;
            }
        }
        off += m.values.len();
    }
    d
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossChange {
    /// `|-gradient_term + curvature_term|`
    pub delta_e: f64,
    /// `g . d`
    pub gradient_term: f64,
    /// `1/2 d . H d`
    pub curvature_term: f64,
}

/// Second-order estimate of the loss change from subtracting `d`.
pub fn delta_e(obj: &dyn Objective, d: &[f64], eps: f64) -> Result<LossChange> {
    let (_, g) = obj.loss_and_grad()?;
    if d.len() != g.len() {
        return Err(Error::dim("delta_e", &[g.len()], &[d.len()]));
    }
    let gradient_term = dot(&g, d);
    let hd = hvp(obj, d, eps)?;
    let curvature_term = 0.5 * dot(d, &hd);
    Ok(LossChange {
        delta_e: (-gradient_term + curvature_term).abs(),
        gradient_term,
        curvature_term,
    })
}

/// [`delta_e`] for the magnitude criterion at `fraction`, over `data`.
pub fn network_delta_e(
    net: &Network,
    data: &Dataset,
    criterion: Granularity,
    fraction: f64,
    eps: f64,
) -> Result<LossChange> {
    let mask = magnitude_prune_mask(net, criterion, fraction)?;
    let d = deletion_vector(net, &mask);
    delta_e(&NetworkObjective::new(net, data), &d, eps)
}

/// Square block of `theta_i H_ij theta_j` over an ordered index list.
#[derive(Clone, Debug, PartialEq)]
pub struct DependenceBlock {
    pub indices: Vec<usize>,
    /// Leading indices that belong to the kept subnetwork; the rest are
    /// slated for removal.
    pub keep_count: usize,
    /// Row-major `n x n`.
    pub values: Vec<f64>,
    /// `max |B_ij - B_ji| / max |B_ij|` before any symmetrisation.
    pub asymmetry: f64,
}

impl DependenceBlock {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    fn sum_over(&self, rows: core::ops::Range<usize>, cols: core::ops::Range<usize>, f: impl Fn(f64) -> f64) -> f64 {
        let mut s = 0.0;
        for i in rows {
            for j in cols.clone() {
                s += f(self.get(i, j));
            }
        }
        s
    }

    /// Signed sum of the prune x prune (lower-right) block.
    pub fn prune_block_sum(&self) -> f64 {
        let n = self.size();
        self.sum_over(self.keep_count..n, self.keep_count..n, |x| x)
    }

    /// Sum of absolute entries of the prune x prune block.
    pub fn prune_block_mass(&self) -> f64 {
        let n = self.size();
        self.sum_over(self.keep_count..n, self.keep_count..n, f64::abs)
    }

    /// Sum of absolute entries of the keep x keep (upper-left) block.
    pub fn keep_block_mass(&self) -> f64 {
        self.sum_over(0..self.keep_count, 0..self.keep_count, f64::abs)
    }
}

/// `theta_i H_ij theta_j` for `i, j` in `indices`, one [`hvp`] per column.
pub fn dependence_block(
    obj: &dyn Objective,
    indices: &[usize],
    keep_count: usize,
    eps: f64,
) -> Result<DependenceBlock> {
    let theta = obj.point();
    let dim = theta.len();
    if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
        return Err(Error::Domain(format!("parameter index {bad} out of range 0..{dim}")));
    }
    if keep_count > indices.len() {
        return Err(Error::Domain(format!(
            "keep_count {keep_count} exceeds {} indices",
            indices.len()
        )));
    }
    let n = indices.len();
    let mut values = vec![0.0; n * n];
    let mut e = vec![0.0; dim];
    for (j, &pj) in indices.iter().enumerate() {
        if theta[pj] == 0.0 {
            continue;
        }
        e[pj] = 1.0;
        let col = hvp(obj, &e, eps)?;
        e[pj] = 0.0;
        for (i, &pi) in indices.iter().enumerate() {
            values[i * n + j] = theta[pi] * col[pi] * theta[pj];
        }
    }
    let mut max_abs: f64 = 0.0;
    let mut max_diff: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            max_abs = max_abs.max(values[i * n + j].abs());
            max_diff = max_diff.max((values[i * n + j] - values[j * n + i]).abs());
        }
    }
    let asymmetry = if max_abs > 0.0 { max_diff / max_abs } else { 0.0 };
    Ok(DependenceBlock {
        indices: indices.to_vec(),
        keep_count,
        values,
        asymmetry,
    })
}

/// Stratified sample of prunable weight positions for a dependence block:
/// `n_keep` drawn from the weights the weight criterion keeps at
/// `fraction`, `n_prune` from those it removes. Returned keeps-first, each
/// group in ascending flat-index order; the second value is the size of
/// the keep group. Groups smaller than requested are taken whole.
pub fn stratified_indices(
    net: &Network,
    fraction: f64,
    n_keep: usize,
    n_prune: usize,
    rng: &mut Rng,
) -> Result<(Vec<usize>, usize)> {
    let mask = weight_prune_mask(net, fraction)?;
    let mut keep_pool = Vec::new();
    let mut prune_pool = Vec::new();
    let mut off = 0;
    for (m, keep) in net.matrices().iter().zip(&mask.keep) {
        if m.prunable && !m.is_logits {
            for (i, &k) in keep.iter().enumerate() {
                if k {
                    keep_pool.push(off + i);
                } else {
                    prune_pool.push(off + i);
                }
            }
        }
        off += m.values.len();
    }
    let mut pick = |pool: &mut Vec<usize>, k: usize| {
        let k = k.min(pool.len());
        for i in 0..k {
            let j = i + rng.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool.sort_unstable();
    };
    pick(&mut keep_pool, n_keep);
    pick(&mut prune_pool, n_prune);
    let keep_count = keep_pool.len();
    keep_pool.extend(prune_pool);
    Ok((keep_pool, keep_count))
}
