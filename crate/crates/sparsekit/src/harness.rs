//! Training loop, prune sweeps, second-order analysis and the
//! random-prune comparison.

use std::path::{Path, PathBuf};

use sparsekit_core::analysis::{self, dependence_block, stratified_indices, DependenceBlock, NetworkObjective};
use sparsekit_core::data::{accuracy, augment, synth_blobs, Dataset, Split, Standardizer};
use sparsekit_core::network::DropoutMasks;
use sparsekit_core::pruning::{apply_prune, magnitude_prune_mask, pruned, random_prune_mask, PruneMask, SparsityReport};
use sparsekit_core::targeting::{
    ramping_alpha, ramping_gamma, sample_targeted_masks, select_candidates_with, xtreme_gammas, CandidateSet,
};
use sparsekit_core::{Granularity, Network, Rng};

use crate::cifar;
use crate::config::{DatasetKind, ExperimentConfig, RampUnit, Regulariser};
use crate::error::{Error, Result};

/// Environment variable naming the default CIFAR-10 directory.
pub const DATA_ENV: &str = "SPARSEKIT_DATA";

const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// `--data` if given, else `$SPARSEKIT_DATA`.
pub fn data_dir(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
}

/// Loads (or generates) both splits, truncates the training split to
/// `subset_size`, and standardises both with train-split statistics.
pub fn load_data(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Splits> {
    let (mut train, mut test) = match cfg.dataset {
        DatasetKind::Cifar10 => {
            let dir = data_dir(dir).ok_or_else(|| {
                Error::DatasetMissing(format!("CIFAR-10 directory not given (pass --data or set {DATA_ENV})"))
            })?;
            cifar::load_cifar10(&dir)?
        }
        DatasetKind::Blobs => blobs(cfg)?,
    };
    if let Some(n) = cfg.subset_size {
        train = train.head(n);
    }
    let stats = Standardizer::fit(&train);
    stats.apply(&mut train)?;
    stats.apply(&mut test)?;
    Ok(Splits { train, test })
}

fn blobs(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let dims: usize = cfg.blobs_shape.iter().product();
    let n = cfg.blobs_train + cfg.blobs_test;
    let mut rng = Rng::new(cfg.seed).substream_named("blobs");
    let all = synth_blobs(n, dims, cifar::CLASSES, cfg.blobs_separation, &mut rng)?.reshape_samples(&cfg.blobs_shape)?;
    let train_idx: Vec<usize> = (0..cfg.blobs_train).collect();
    let test_idx: Vec<usize> = (cfg.blobs_train..n).collect();
    let split = |idx: &[usize], split| -> Result<Dataset> {
        let (images, labels) = all.gather(idx)?;
        Ok(Dataset::new(images, labels, all.class_count, split)?)
    };
    Ok((split(&train_idx, Split::Train)?, split(&test_idx, Split::Test)?))
}

/// Sample shape the configured dataset produces.
pub fn input_shape(cfg: &ExperimentConfig) -> Vec<usize> {
    match cfg.dataset {
        DatasetKind::Cifar10 => cifar::IMAGE_SHAPE.to_vec(),
        DatasetKind::Blobs => cfg.blobs_shape.clone(),
    }
}

/// The seeded initialisation of the configured architecture.
pub fn init_network(cfg: &ExperimentConfig) -> Result<Network> {
    let mut rng = Rng::new(cfg.seed).substream_named("init");
    Ok(cfg.architecture().build(&input_shape(cfg), cifar::CLASSES, &mut rng)?)
}

/// Standard-dropout rate that matches a targeted run's expected dropped
/// mass: `gamma * alpha`.
pub fn matched_dropout_rate(gamma: f64, alpha: f64) -> Result<f64> {
    for (name, v) in [("gamma", gamma), ("alpha", alpha)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(name, format!("{v} is outside [0, 1]")));
        }
    }
    Ok(gamma * alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    /// Mean targeting proportion over prunable matrices.
    pub gamma: f64,
    pub alpha: f64,
    pub density: f64,
}

/// Targeting proportion per matrix for `epoch` (0 for non-prunable).
pub fn epoch_gammas(cfg: &ExperimentConfig, net: &Network, epoch: usize) -> Result<Vec<f64>> {
    let n = net.matrices().len();
    Ok(match cfg.regulariser {
        Regulariser::None | Regulariser::L1 => vec![0.0; n],
        // standard dropout targets everything
        Regulariser::Dropout => vec![1.0; n],
        Regulariser::Targeted => vec![cfg.gamma; n],
        Regulariser::RampingTargeted => vec![ramping_gamma(cfg.gamma, epoch, cfg.ramp_epochs); n],
        Regulariser::Xtreme => xtreme_gammas(net, cfg.weights_per_filter)?
            .into_iter()
            .map(|g| ramping_gamma(g, epoch, cfg.ramp_epochs))
            .collect(),
    })
}

/// Drop rate applied to candidates at (`epoch`, `global_step`).
pub fn step_alpha(cfg: &ExperimentConfig, epoch: usize, global_step: usize) -> f64 {
    match cfg.regulariser {
        Regulariser::None | Regulariser::L1 => 0.0,
        Regulariser::Dropout => cfg.gamma * cfg.alpha,
        Regulariser::Targeted => cfg.alpha,
        Regulariser::RampingTargeted | Regulariser::Xtreme => match cfg.alpha_ramp_unit {
            RampUnit::Epochs => ramping_alpha(epoch, cfg.alpha_ramp),
            RampUnit::Steps => ramping_alpha(global_step, cfg.alpha_ramp),
        },
    }
}

fn uses_masks(r: Regulariser) -> bool {
    !matches!(r, Regulariser::None | Regulariser::L1)
}

/// Rescales surviving candidates by `1 / (1 - alpha)`.
fn scale_survivors(masks: &mut DropoutMasks, cands: &CandidateSet, alpha: f64) {
    if alpha >= 1.0 {
        return;
    }
    let s = 1.0 / (1.0 - alpha);
    for (mask, cand) in masks.weight.iter_mut().zip(&cands.per_matrix) {
        let (Some(mask), Some(cand)) = (mask.as_mut(), cand) else { continue };
        let cols = mask.shape()[1];
        for (i, v) in mask.data_mut().iter_mut().enumerate() {
            if *v == 1.0 && cand.covers(i / cols, i % cols) {
                *v = s;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub net: Network,
    pub metrics: Vec<MetricsRow>,
}

/// Trains from the seeded initialisation. With `frozen`, the dropped
/// weights are zeroed before the first step and their gradients are
/// discarded on every step, so they stay exactly zero.
///
/// Random streams (all derived from `cfg.seed`): `init`, `shuffle`,
/// `masks`, `augment`. `on_epoch` sees each metrics row as it is made.
pub fn train(
    cfg: &ExperimentConfig,
    data: &Splits,
    frozen: Option<&PruneMask>,
    mut on_epoch: impl FnMut(&MetricsRow) -> Result<()>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let mut net = init_network(cfg)?;
    if let Some(mask) = frozen {
        apply_prune(&mut net, mask)?;
    }
    let root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.substream_named("shuffle");
    let mut mask_rng = root.substream_named("masks");
    let mut aug_rng = root.substream_named("augment");
    let granularity: Granularity = cfg.granularity.into();
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0;
    let image_input = data.train.sample_shape().len() == 3;

    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let gammas = epoch_gammas(cfg, &net, epoch)?;
        let mut loss_sum = 0.0;
        let mut alpha = step_alpha(cfg, epoch, global_step);
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, y) = data.train.gather(idx)?;
            if cfg.augment && image_input {
                x = augment(&x, &mut aug_rng)?;
            }
            alpha = step_alpha(cfg, epoch, global_step);
            let masks = if uses_masks(cfg.regulariser) {
                let cands = select_candidates_with(&net, granularity, cfg.target_scope.into(), &gammas);
                let mut m = sample_targeted_masks(&cands, alpha, &mut mask_rng)?;
                if cfg.scale_dropout {
                    scale_survivors(&mut m, &cands, alpha);
                }
                Some(m)
            } else {
                None
            };
            let (loss, mut grads) = net.backward(&x, &y, masks.as_ref())?;
            if cfg.regulariser == Regulariser::L1 {
                net.l1_penalty(cfg.beta, &mut grads);
            }
            if let Some(mask) = frozen {
                mask.mask_gradients(&mut grads);
            }
            if !loss.is_finite() || !grads.norm().is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    global_step,
                });
            }
            net.sgd_step(&grads, cfg.lr);
            loss_sum += loss;
            steps += 1;
            global_step += 1;
        }
        let prunable: Vec<f64> = net
            .matrices()
            .iter()
            .zip(&gammas)
            .filter(|(m, _)| m.prunable)
            .map(|(_, &g)| g)
            .collect();
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / steps.max(1) as f64,
            test_acc: accuracy(&net, &data.test, EVAL_CHUNK)?,
            gamma: prunable.iter().sum::<f64>() / prunable.len().max(1) as f64,
            alpha,
            density: SparsityReport::of(&net).global_density(),
        };
        on_epoch(&row)?;
        metrics.push(row);
    }
    Ok(TrainRun { net, metrics })
}

pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    Ok(accuracy(net, data, EVAL_CHUNK)?)
}

/// Accuracy with deterministic masks in the forward pass.
pub fn evaluate_masked(net: &Network, data: &Dataset, masks: &DropoutMasks) -> Result<f64> {
    let mut correct = 0;
    let mut start = 0;
    let classes = net.classes();
    while start < data.len() {
        let end = (start + EVAL_CHUNK).min(data.len());
        let (x, y) = data.slice(start, end)?;
        let logits = net.forward(&x, Some(masks))?;
        for (row, &label) in logits.data().chunks(classes).zip(y) {
            let best = (0..classes).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += (best == label) as usize;
        }
        start = end;
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub prune_fraction: f64,
    pub test_accuracy: f64,
    /// Nonzero fraction of prunable weights after pruning.
    pub density_achieved: f64,
}

/// Magnitude-prunes a copy of `net` at each fraction and evaluates it.
pub fn sweep(net: &Network, test: &Dataset, criterion: Granularity, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    fractions
        .iter()
        .map(|&f| {
            let (copy, report) = pruned(net, &magnitude_prune_mask(net, criterion, f)?)?;
            Ok(SweepRow {
                prune_fraction: f,
                test_accuracy: evaluate(&copy, test)?,
                density_achieved: report.global_density(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AnalysisOptions {
    pub criterion: Granularity,
    pub fraction: f64,
    pub hvp_eps: f64,
    pub block_keep: usize,
    pub block_prune: usize,
    pub max_block_indices: usize,
    /// Evaluate on the first N test records only.
    pub eval_subset: Option<usize>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            criterion: Granularity::Weight,
            fraction: 0.75,
            hvp_eps: analysis::DEFAULT_HVP_EPS,
            block_keep: 50,
            block_prune: 150,
            max_block_indices: 400,
            eval_subset: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnalysisReport {
    pub seed: u64,
    pub regulariser: Regulariser,
    pub criterion: Granularity,
    pub fraction: f64,
    pub eval_samples: usize,
    pub delta_e: f64,
    pub gradient_term: f64,
    pub curvature_term: f64,
    pub unpruned_acc: f64,
    pub pruned_acc: f64,
    /// `None` when the index budget is zero.
    pub block: Option<DependenceBlock>,
}

/// Loss-change estimate and dependence block over the test split.
pub fn analyze(net: &Network, test: &Dataset, cfg: &ExperimentConfig, opts: &AnalysisOptions) -> Result<AnalysisReport> {
    let budget = opts.block_keep + opts.block_prune;
    if budget > opts.max_block_indices {
        return Err(Error::invalid(
            "block indices",
            format!("{budget} exceeds the limit of {}", opts.max_block_indices),
        ));
    }
    let eval = match opts.eval_subset {
        Some(n) => test.head(n),
        None => test.clone(),
    };
    let obj = NetworkObjective::new(net, &eval);
    let mask = magnitude_prune_mask(net, opts.criterion, opts.fraction)?;
    let d = analysis::deletion_vector(net, &mask);
    let change = analysis::delta_e(&obj, &d, opts.hvp_eps)?;
    let (pruned_net, _) = pruned(net, &mask)?;
    let block = if budget > 0 {
        let mut rng = Rng::new(cfg.seed).substream_named("dependence");
        let (idx, keep) = stratified_indices(net, opts.fraction, opts.block_keep, opts.block_prune, &mut rng)?;
        Some(dependence_block(&obj, &idx, keep, opts.hvp_eps)?)
    } else {
        None
    };
    Ok(AnalysisReport {
        seed: cfg.seed,
        regulariser: cfg.regulariser,
        criterion: opts.criterion,
        fraction: opts.fraction,
        eval_samples: eval.len(),
        delta_e: change.delta_e,
        gradient_term: change.gradient_term,
        curvature_term: change.curvature_term,
        unpruned_acc: evaluate(net, &eval)?,
        pruned_acc: evaluate(&pruned_net, &eval)?,
        block,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub fraction: f64,
    pub random_prune_acc: f64,
    pub ramping_acc: f64,
}

/// Arm A: a random mask at each fraction, fixed from step 0. Arm B:
/// ramping targeted dropout to `gamma = fraction`, then magnitude pruning
/// at that fraction. Both arms share `cfg` (seed, architecture, data,
/// schedule lengths); `cfg.granularity` picks mask and criterion.
pub fn compare_random_vs_ramping(cfg: &ExperimentConfig, data: &Splits, fractions: &[f64]) -> Result<Vec<CompareRow>> {
    let granularity: Granularity = cfg.granularity.into();
    let init = init_network(cfg)?;
    fractions
        .iter()
        .map(|&f| {
            let mut base = cfg.clone();
            base.regulariser = Regulariser::None;
            let mut rng = Rng::new(cfg.seed).substream_named("random-prune");
            let mask = random_prune_mask(&init, f, granularity, &mut rng)?;
            let arm_a = train(&base, data, Some(&mask), |_| Ok(()))?;

            let mut ramp = cfg.clone();
            ramp.regulariser = Regulariser::RampingTargeted;
            ramp.gamma = f;
            let arm_b = train(&ramp, data, None, |_| Ok(()))?;
            let (arm_b_pruned, _) = pruned(&arm_b.net, &magnitude_prune_mask(&arm_b.net, granularity, f)?)?;
            Ok(CompareRow {
                fraction: f,
                random_prune_acc: evaluate(&arm_a.net, &data.test)?,
                ramping_acc: evaluate(&arm_b_pruned, &data.test)?,
            })
        })
        .collect()
}

/// The deterministic masks a targeted run ends with: final gammas,
/// `alpha = 1`.
pub fn final_targeting_masks(net: &Network, cfg: &ExperimentConfig) -> Result<DropoutMasks> {
    let gammas = epoch_gammas(cfg, net, usize::MAX)?;
    let cands = select_candidates_with(net, cfg.granularity.into(), cfg.target_scope.into(), &gammas);
    Ok(sample_targeted_masks(&cands, 1.0, &mut Rng::new(0))?)
}
