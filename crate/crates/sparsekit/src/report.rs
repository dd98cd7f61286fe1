//! CSV and PGM outputs. Every CSV row starts with the config hash.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use sparsekit_core::analysis::DependenceBlock;
use sparsekit_core::pruning::SparsityReport;
use sparsekit_core::Granularity;

use crate::error::{Error, Result};
use crate::harness::{AnalysisReport, CompareRow, MetricsRow, SweepRow};

pub const METRICS_HEADER: [&str; 7] = ["config_hash", "epoch", "train_loss", "test_acc", "gamma", "alpha", "density"];

/// Row-at-a-time CSV file, flushed after every row.
pub struct CsvSink {
    writer: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header)?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self { writer })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.writer.write_record(fields)?;
        self.writer.flush().map_err(|e| Error::io("<csv>", e))
    }
}

pub fn metrics_fields(hash: &str, r: &MetricsRow) -> Vec<String> {
    vec![
        hash.to_string(),
        r.epoch.to_string(),
        r.train_loss.to_string(),
        r.test_acc.to_string(),
        r.gamma.to_string(),
        r.alpha.to_string(),
        r.density.to_string(),
    ]
}

pub fn write_sweep(path: &Path, hash: &str, criterion: Granularity, rows: &[SweepRow]) -> Result<()> {
    let mut sink = CsvSink::create(
        path,
        &["config_hash", "criterion", "prune_fraction", "test_accuracy", "density_achieved"],
    )?;
    for r in rows {
        sink.row(&[
            hash.to_string(),
            criterion.as_str().to_string(),
            r.prune_fraction.to_string(),
            r.test_accuracy.to_string(),
            r.density_achieved.to_string(),
        ])?;
    }
    Ok(())
}

pub fn write_sparsity(path: &Path, hash: &str, report: &SparsityReport) -> Result<()> {
    let mut sink = CsvSink::create(path, &["config_hash", "matrix_id", "rows", "cols", "nonzeros", "density", "prunable"])?;
    for m in &report.matrices {
        sink.row(&[
            hash.to_string(),
            m.id.clone(),
            m.rows.to_string(),
            m.cols.to_string(),
            m.nonzeros.to_string(),
            m.density.to_string(),
            m.prunable.to_string(),
        ])?;
    }
    Ok(())
}

/// Description of the dependence-block subsample, written next to the
/// numbers it qualifies.
pub fn block_protocol(block: &DependenceBlock) -> String {
    format!(
        "stratified sample (sparsekit): {} kept + {} pruned weights, keeps first",
        block.keep_count,
        block.size() - block.keep_count
    )
}

pub fn write_analysis(path: &Path, hash: &str, r: &AnalysisReport) -> Result<()> {
    let mut sink = CsvSink::create(
        path,
        &[
            "config_hash",
            "seed",
            "regulariser",
            "fraction",
            "delta_e",
            "gradient_term",
            "curvature_term",
            "unpruned_acc",
            "pruned_acc",
            "criterion",
            "eval_samples",
            "block_prune_mass",
            "block_prune_sum",
            "block_keep_mass",
            "block_asymmetry",
            "block_protocol",
        ],
    )?;
    let b = r.block.as_ref();
    let opt = |f: &dyn Fn(&DependenceBlock) -> f64| b.map(|b| f(b).to_string()).unwrap_or_default();
    sink.row(&[
        hash.to_string(),
        r.seed.to_string(),
        r.regulariser.to_string(),
        r.fraction.to_string(),
        r.delta_e.to_string(),
        r.gradient_term.to_string(),
        r.curvature_term.to_string(),
        r.unpruned_acc.to_string(),
        r.pruned_acc.to_string(),
        r.criterion.as_str().to_string(),
        r.eval_samples.to_string(),
        opt(&DependenceBlock::prune_block_mass),
        opt(&DependenceBlock::prune_block_sum),
        opt(&DependenceBlock::keep_block_mass),
        opt(&|b| b.asymmetry),
        b.map(block_protocol).unwrap_or_default(),
    ])
}

/// Long format: one row per entry, with the parameter indices and the
/// keep/prune group of each axis.
pub fn write_dependence_csv(path: &Path, hash: &str, block: &DependenceBlock) -> Result<()> {
    let mut sink = CsvSink::create(path, &["config_hash", "row", "col", "param_row", "param_col", "group_row", "group_col", "value"])?;
    let group = |i: usize| if i < block.keep_count { "keep" } else { "prune" };
    for i in 0..block.size() {
        for j in 0..block.size() {
            sink.row(&[
                hash.to_string(),
                i.to_string(),
                j.to_string(),
                block.indices[i].to_string(),
                block.indices[j].to_string(),
                group(i).to_string(),
                group(j).to_string(),
                block.get(i, j).to_string(),
            ])?;
        }
    }
    Ok(())
}

/// Decades of magnitude mapped onto the gray ramp below the largest entry.
pub const PGM_DECADES: f64 = 6.0;

/// 8-bit gray levels of `log10 |x|`, the largest magnitude at 255 and
/// anything `PGM_DECADES` or more below it (or zero) at 0.
pub fn log_magnitude_pixels(values: &[f64]) -> Vec<u8> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return vec![0; values.len()];
    }
    let top = max.log10();
    values
        .iter()
        .map(|v| {
            if *v == 0.0 {
                return 0;
            }
            let t = ((v.abs().log10() - (top - PGM_DECADES)) / PGM_DECADES).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect()
}

pub fn write_pgm(path: &Path, block: &DependenceBlock) -> Result<()> {
    let n = block.size();
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(log_magnitude_pixels(&block.values));
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn write_compare(path: &Path, hash: &str, seed: u64, granularity: Granularity, rows: &[CompareRow]) -> Result<()> {
    let mut sink = CsvSink::create(
        path,
        &["config_hash", "seed", "granularity", "fraction", "random_prune_acc", "ramping_td_acc"],
    )?;
    for r in rows {
        sink.row(&[
            hash.to_string(),
            seed.to_string(),
            granularity.as_str().to_string(),
            r.fraction.to_string(),
            r.random_prune_acc.to_string(),
            r.ramping_acc.to_string(),
        ])?;
    }
    Ok(())
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_levels() {
        let px = log_magnitude_pixels(&[1.0, -1e-3, 0.0, 1e-9]);
        assert_eq!(px, vec![255, 128, 0, 0]);
        assert_eq!(log_magnitude_pixels(&[0.0, 0.0]), vec![0, 0]);
    }
}
