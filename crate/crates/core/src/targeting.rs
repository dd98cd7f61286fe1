//! Targeted dropout: choose low-magnitude candidates, then drop each
//! candidate independently with probability `alpha`.
//!
//! Candidate selection mirrors the post hoc pruning criteria exactly:
//! weight targeting marks the `ceil(gamma * N_row)` smallest `|w|` within
//! each column, unit targeting marks the `ceil(gamma * N_col)` columns of
//! smallest L2 norm. Ties go to the lower index. Logits matrices are never
//! targeted and biases are not part of any candidate set.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::network::{DropoutMasks, Network, WeightMatrix};
use crate::rng::Rng;
use crate::select::mark_lowest;
use crate::tensor::Tensor;
use crate::{drop_count, Granularity};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// `gamma` and `alpha` annealed from zero, see [`ramping_gamma`] and
    /// [`ramping_alpha`].
    Ramping,
    /// Ramping with a per-matrix `gamma` that leaves a fixed number of
    /// weights in every column, see [`xtreme_gammas`].
    Xtreme { weights_per_filter: usize },
}

/// Population over which weight-level candidates are ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TargetScope {
    /// Within each column (matches weight pruning).
    #[default]
    PerColumn,
    /// Across the whole matrix.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetingSpec {
    pub granularity: Granularity,
    pub gamma: f64,
    pub alpha: f64,
    pub schedule: Schedule,
    pub scope: TargetScope,
}

impl TargetingSpec {
    pub fn new(granularity: Granularity, gamma: f64, alpha: f64) -> Result<Self> {
        let spec = Self {
            granularity,
            gamma,
            alpha,
            schedule: Schedule::Constant,
            scope: TargetScope::PerColumn,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_rate("gamma", self.gamma)?;
        check_rate("alpha", self.alpha)?;
        if let Schedule::Xtreme { weights_per_filter: 0 } = self.schedule {
            return Err(Error::Config("weights_per_filter must be >= 1".into()));
        }
        Ok(())
    }

    /// Expected fraction of targeted-layer parameters kept per step.
    pub fn expected_keep(&self) -> f64 {
        1.0 - self.gamma * self.alpha
    }
}

pub(crate) fn check_rate(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Candidates {
    /// Row-major `rows x cols` marks.
    Weights {
        rows: usize,
        cols: usize,
        marked: Vec<bool>,
    },
    /// One mark per column.
    Units {
        rows: usize,
        cols: usize,
        marked: Vec<bool>,
    },
}

impl Candidates {
    pub fn count(&self) -> usize {
        match self {
            Candidates::Weights { marked, .. } | Candidates::Units { marked, .. } => {
                marked.iter().filter(|&&b| b).count()
            }
        }
    }

    /// Whether weight `(row, col)` is covered by a candidate.
    pub fn covers(&self, row: usize, col: usize) -> bool {
        match self {
            Candidates::Weights { cols, marked, .. } => marked[row * cols + col],
            Candidates::Units { marked, .. } => marked[col],
        }
    }
}

/// Candidates per matrix; `None` for matrices that are not prunable.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub granularity: Granularity,
    pub per_matrix: Vec<Option<Candidates>>,
}

impl CandidateSet {
    pub fn count(&self) -> usize {
        self.per_matrix.iter().flatten().map(Candidates::count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Candidate set for a single `gamma` shared by every prunable matrix.
pub fn select_candidates(net: &Network, spec: &TargetingSpec) -> CandidateSet {
    let gammas = vec![spec.gamma; net.matrices().len()];
    select_candidates_with(net, spec.granularity, spec.scope, &gammas)
}

/// Candidate set with one `gamma` per matrix (entries for non-prunable
/// matrices are ignored).
pub fn select_candidates_with(
    net: &Network,
    granularity: Granularity,
    scope: TargetScope,
    gammas: &[f64],
) -> CandidateSet {
    assert_eq!(gammas.len(), net.matrices().len(), "one gamma per matrix");
    let mut scratch = Vec::new();
    let per_matrix = net
        .matrices()
        .iter()
        .zip(gammas)
        .map(|(m, &gamma)| {
            if !m.prunable || m.is_logits {
                return None;
            }
            Some(match granularity {
                Granularity::Weight => match scope {
                    TargetScope::PerColumn => weight_candidates(m, gamma, &mut scratch),
                    TargetScope::Global => global_weight_candidates(m, gamma, &mut scratch),
                },
                Granularity::Unit => unit_candidates(m, gamma, &mut scratch),
            })
        })
        .collect();
    CandidateSet {
        granularity,
        per_matrix,
    }
}

/// Marks the lowest `ceil(fraction * N_row)` entries of every column by `|w|`.
pub(crate) fn lowest_per_column(m: &WeightMatrix, fraction: f64, scratch: &mut Vec<usize>) -> Vec<bool> {
    let (rows, cols) = (m.rows(), m.cols());
    let k = drop_count(fraction, rows);
    let data = m.values.data();
    let mut marked = vec![false; rows * cols];
    let mut scores = vec![0.0; rows];
    let mut col_marks = vec![false; rows];
    for c in 0..cols {
        for r in 0..rows {
            scores[r] = data[r * cols + c].abs();
        }
        mark_lowest(&scores, k, scratch, &mut col_marks);
        for r in 0..rows {
            marked[r * cols + c] = col_marks[r];
        }
    }
    marked
}

/// Marks the `ceil(fraction * N_col)` columns of smallest L2 norm.
pub(crate) fn lowest_columns(m: &WeightMatrix, fraction: f64, scratch: &mut Vec<usize>) -> Vec<bool> {
    let norms = column_norms(m);
    let mut marked = vec![false; norms.len()];
    mark_lowest(&norms, drop_count(fraction, norms.len()), scratch, &mut marked);
    marked
}

pub fn column_norms(m: &WeightMatrix) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    let data = m.values.data();
    (0..cols)
        .map(|c| {
            let mut s = 0.0;
            for r in 0..rows {
                let w = data[r * cols + c];
                s += w * w;
            }
            libm::sqrt(s)
        })
        .collect()
}

fn weight_candidates(m: &WeightMatrix, gamma: f64, scratch: &mut Vec<usize>) -> Candidates {
    Candidates::Weights {
        rows: m.rows(),
        cols: m.cols(),
        marked: lowest_per_column(m, gamma, scratch),
    }
}

fn global_weight_candidates(m: &WeightMatrix, gamma: f64, scratch: &mut Vec<usize>) -> Candidates {
    let scores: Vec<f64> = m.values.data().iter().map(|w| w.abs()).collect();
    let mut marked = vec![false; scores.len()];
    mark_lowest(&scores, drop_count(gamma, scores.len()), scratch, &mut marked);
    Candidates::Weights {
        rows: m.rows(),
        cols: m.cols(),
        marked,
    }
}

fn unit_candidates(m: &WeightMatrix, gamma: f64, scratch: &mut Vec<usize>) -> Candidates {
    Candidates::Units {
        rows: m.rows(),
        cols: m.cols(),
        marked: lowest_columns(m, gamma, scratch),
    }
}

/// Weight masks for one training step: non-candidates are always kept,
/// candidates are kept independently with probability `1 - alpha`.
///
/// Unit candidates are dropped as whole columns of the weight matrix, so
/// a dropped unit contributes only its bias, exactly as after unit pruning.
/// Draw order: matrices in layer order; one draw per candidate weight in
/// row-major order, or one per candidate column in column order.
pub fn sample_targeted_masks(candidates: &CandidateSet, alpha: f64, rng: &mut Rng) -> Result<DropoutMasks> {
    check_rate("alpha", alpha)?;
    let keep = 1.0 - alpha;
    let n = candidates.per_matrix.len();
    let mut masks = DropoutMasks::empty(n);
    for (slot, cand) in masks.weight.iter_mut().zip(&candidates.per_matrix) {
        let Some(cand) = cand else { continue };
        let mask = match cand {
            Candidates::Weights { rows, cols, marked } => {
                let data = marked
                    .iter()
                    .map(|&c| if !c || rng.bernoulli(keep) { 1.0 } else { 0.0 })
                    .collect();
                Tensor::matrix(*rows, *cols, data)?
            }
            Candidates::Units { rows, cols, marked } => {
                let col_keep: Vec<f64> = marked
                    .iter()
                    .map(|&c| if !c || rng.bernoulli(keep) { 1.0 } else { 0.0 })
                    .collect();
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..*rows {
                    data.extend_from_slice(&col_keep);
                }
                Tensor::matrix(*rows, *cols, data)?
            }
        };
        *slot = Some(mask);
    }
    Ok(masks)
}

/// Two-phase linear ramp of the targeting proportion: zero to 95% of
/// `final_gamma` over the first half of `ramp_epochs`, then to 100% over
/// the second half, constant afterwards. With `ramp_epochs = 98` the
/// phases are epochs `[0, 49)` and `[49, 98)`.
pub fn ramping_gamma(final_gamma: f64, epoch: usize, ramp_epochs: usize) -> f64 {
    if ramp_epochs == 0 || epoch >= ramp_epochs {
        return final_gamma;
    }
    let half = ramp_epochs as f64 / 2.0;
    let e = epoch as f64;
    if e < half {
        0.95 * final_gamma * e / half
    } else {
        0.95 * final_gamma + 0.05 * final_gamma * (e - half) / half
    }
}

/// Linear ramp of the drop rate from 0 to 1 over `ramp` units (epochs or
/// optimiser steps, chosen by the caller).
pub fn ramping_alpha(t: usize, ramp: usize) -> f64 {
    if ramp == 0 {
        return 1.0;
    }
    (t as f64 / ramp as f64).min(1.0)
}

/// Per-matrix `gamma = 1 - weights_per_filter / N_row`, so that exactly
/// `weights_per_filter` weights per column survive; 0 for matrices that
/// are not prunable.
pub fn xtreme_gammas(net: &Network, weights_per_filter: usize) -> Result<Vec<f64>> {
    if weights_per_filter == 0 {
        return Err(Error::Config("weights_per_filter must be >= 1".into()));
    }
    net.matrices()
        .iter()
        .map(|m| {
            if !m.prunable || m.is_logits {
                return Ok(0.0);
            }
            if weights_per_filter > m.rows() {
                return Err(Error::Config(format!(
                    "weights_per_filter {weights_per_filter} exceeds N_row = {} of `{}`",
                    m.rows(),
                    m.id
                )));
            }
            Ok(1.0 - weights_per_filter as f64 / m.rows() as f64)
        })
        .collect()
}
