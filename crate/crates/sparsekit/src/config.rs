//! Experiment configuration: a JSON object whose keys mirror
//! [`ExperimentConfig`]'s fields. Unknown keys are rejected.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use sparsekit_core::targeting::TargetScope;
use sparsekit_core::{Architecture, Granularity};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchitectureKind {
    ToyDense,
    SmallCnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regulariser {
    None,
    Dropout,
    Targeted,
    RampingTargeted,
    Xtreme,
    L1,
}

impl Regulariser {
    pub fn as_str(self) -> &'static str {
        match self {
            Regulariser::None => "none",
            Regulariser::Dropout => "dropout",
            Regulariser::Targeted => "targeted",
            Regulariser::RampingTargeted => "ramping-targeted",
            Regulariser::Xtreme => "xtreme",
            Regulariser::L1 => "l1",
        }
    }
}

impl fmt::Display for Regulariser {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GranularityKind {
    Weight,
    Unit,
}

impl From<GranularityKind> for Granularity {
    fn from(g: GranularityKind) -> Self {
        match g {
            GranularityKind::Weight => Granularity::Weight,
            GranularityKind::Unit => Granularity::Unit,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Cifar10,
    Blobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RampUnit {
    Epochs,
    Steps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeKind {
    PerColumn,
    Global,
}

impl From<ScopeKind> for TargetScope {
    fn from(s: ScopeKind) -> Self {
        match s {
            ScopeKind::PerColumn => TargetScope::PerColumn,
            ScopeKind::Global => TargetScope::Global,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: ArchitectureKind,
    /// Hidden units of the dense layer; `null` picks 10 (toy-dense) or 64
    /// (small-cnn).
    pub hidden: Option<usize>,
    pub regulariser: Regulariser,
    pub granularity: GranularityKind,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetKind,
    /// First N training records; `null` keeps the whole split.
    pub subset_size: Option<usize>,
    pub prune_fractions: Vec<f64>,
    pub criterion: GranularityKind,
    /// Epochs over which the ramping schedule reaches its final gamma.
    pub ramp_epochs: usize,
    /// Length of the alpha ramp, counted in `alpha_ramp_unit`.
    pub alpha_ramp: usize,
    pub alpha_ramp_unit: RampUnit,
    pub weights_per_filter: usize,
    pub target_scope: ScopeKind,
    /// Inverted-dropout scaling of surviving masked elements.
    pub scale_dropout: bool,
    /// Pad-crop-flip augmentation of training batches (image inputs only).
    pub augment: bool,
    pub blobs_train: usize,
    pub blobs_test: usize,
    pub blobs_shape: Vec<usize>,
    pub blobs_separation: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            architecture: ArchitectureKind::ToyDense,
            hidden: None,
            regulariser: Regulariser::None,
            granularity: GranularityKind::Weight,
            gamma: 0.75,
            alpha: 0.5,
            beta: 1e-3,
            epochs: 200,
            lr: 0.001,
            batch_size: 128,
            seed: 0,
            dataset: DatasetKind::Cifar10,
            subset_size: None,
            prune_fractions: (0..10).map(|i| i as f64 / 10.0).collect(),
            criterion: GranularityKind::Weight,
            ramp_epochs: 98,
            alpha_ramp: 98,
            alpha_ramp_unit: RampUnit::Epochs,
            weights_per_filter: 3,
            target_scope: ScopeKind::PerColumn,
            scale_dropout: false,
            augment: false,
            blobs_train: 2000,
            blobs_test: 500,
            blobs_shape: vec![3, 8, 8],
            blobs_separation: 6.0,
        }
    }
}

fn rate(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("{v} is outside [0, 1]")))
    }
}

fn at_least_one(field: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::invalid(field, "must be at least 1"))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        rate("gamma", self.gamma)?;
        rate("alpha", self.alpha)?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta", format!("{} must be finite and >= 0", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be finite and > 0", self.lr)));
        }
        at_least_one("batch_size", self.batch_size)?;
        if let Some(h) = self.hidden {
            at_least_one("hidden", h)?;
        }
        if let Some(n) = self.subset_size {
            at_least_one("subset_size", n)?;
        }
        for (i, &f) in self.prune_fractions.iter().enumerate() {
            rate("prune_fractions", f)?;
            if i > 0 && f < self.prune_fractions[i - 1] {
                return Err(Error::invalid("prune_fractions", "must be sorted ascending"));
            }
        }
        at_least_one("ramp_epochs", self.ramp_epochs)?;
        at_least_one("alpha_ramp", self.alpha_ramp)?;
        at_least_one("weights_per_filter", self.weights_per_filter)?;
        if self.regulariser == Regulariser::Xtreme && self.granularity != GranularityKind::Weight {
            return Err(Error::invalid("granularity", "xtreme fixes weights per filter and needs `weight`"));
        }
        at_least_one("blobs_train", self.blobs_train)?;
        at_least_one("blobs_test", self.blobs_test)?;
        if self.blobs_shape.is_empty() || self.blobs_shape.contains(&0) {
            return Err(Error::invalid("blobs_shape", "dimensions must be >= 1"));
        }
        if self.architecture == ArchitectureKind::SmallCnn && self.dataset == DatasetKind::Blobs && self.blobs_shape.len() != 3 {
            return Err(Error::invalid("blobs_shape", "small-cnn needs a [C, H, W] shape"));
        }
        if self.blobs_separation.is_nan() || self.blobs_separation <= 0.0 {
            return Err(Error::invalid("blobs_separation", "must be > 0"));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        match self.architecture {
            ArchitectureKind::ToyDense => Architecture::ToyDense {
                hidden: self.hidden.unwrap_or(10),
            },
            ArchitectureKind::SmallCnn => Architecture::SmallCnn {
                hidden: self.hidden.unwrap_or(64),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the compact JSON form, hex, first 16 digits. Names the
    /// run directory and tags every output row.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// Parses and validates a JSON config. Errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let field = if path == "." {
                unknown_field(&inner.to_string()).unwrap_or_else(|| "config".into())
            } else {
                path
            };
            Error::invalid(&field, inner.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies `key=value`. The key must be an existing field. The value
    /// is read as JSON when it parses as such, as a bare string otherwise;
    /// `prune_fractions` also accepts the fraction-list syntax of
    /// [`parse_fractions`].
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::invalid(assignment, "override must look like key=value"))?;
        let key = key.trim();
        let mut obj = serde_json::to_value(&*self).expect("config serialises");
        let map = obj.as_object_mut().expect("config is an object");
        if !map.contains_key(key) {
            return Err(Error::invalid(key, "no such config key"));
        }
        let value = if key == "prune_fractions" && !raw.trim_start().starts_with('[') {
            Value::from(parse_fractions(raw).map_err(|m| Error::invalid(key, m))?)
        } else {
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
        };
        map.insert(key.to_string(), value);
        let next: Self = serde_json::from_value(obj).map_err(|e| Error::invalid(key, e.to_string()))?;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// Fraction lists: comma-separated numbers, `start:stop:step` ranges
/// (stop inclusive) and `a,b,...,z` progressions, in any mix.
pub fn parse_fractions(text: &str) -> std::result::Result<Vec<f64>, String> {
    let items: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number"));
    let mut out: Vec<f64> = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let item = items[i];
        if item == "..." {
            let (Some(&b), Some(&a)) = (out.last(), out.len().checked_sub(2).and_then(|k| out.get(k))) else {
                return Err("`...` needs two values before it".into());
            };
            let end = num(items.get(i + 1).ok_or("`...` needs a final value")?)?;
            out.pop();
            out.pop();
            out.extend(progression(a, end, b - a)?);
            i += 2;
            continue;
        }
        let parts: Vec<&str> = item.split(':').collect();
        match parts[..] {
            [v] => out.push(num(v)?),
            [a, b, s] => out.extend(progression(num(a)?, num(b)?, num(s)?)?),
            _ => return Err(format!("`{item}` is neither a number nor start:stop:step")),
        }
        i += 1;
    }
    if out.is_empty() {
        return Err("empty fraction list".into());
    }
    Ok(out)
}

fn progression(start: f64, stop: f64, step: f64) -> std::result::Result<Vec<f64>, String> {
    if step.is_nan() || step <= 0.0 {
        return Err(format!("step {step} must be > 0"));
    }
    let n = ((stop - start) / step + 1e-9).floor();
    if !(0.0..=1e6).contains(&n) {
        return Err(format!("bad range {start}..{stop} by {step}"));
    }
    // round away accumulated binary noise so 0.1 * 3 prints as 0.3
    Ok((0..=n as usize)
        .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_syntaxes() {
        assert_eq!(parse_fractions("0,0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        let ten = parse_fractions("0:0.9:0.1").unwrap();
        assert_eq!(ten.len(), 10);
        assert_eq!(ten[3], 0.3);
        assert_eq!(parse_fractions("0,0.1,...,0.9").unwrap(), ten);
        assert!(parse_fractions("a").is_err());
        assert!(parse_fractions("0:1:0").is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_field() {
        let err = ExperimentConfig::from_json(r#"{"gamma": 0.5, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"gamma": 1.5}"#).unwrap_err();
        assert!(err.to_string().contains("gamma"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"epochs": "many"}"#).unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.set("gamma=0.25").unwrap();
        c.set("architecture=small-cnn").unwrap();
        c.set("prune_fractions=0:0.5:0.25").unwrap();
        assert_eq!(c.gamma, 0.25);
        assert_eq!(c.architecture, ArchitectureKind::SmallCnn);
        assert_eq!(c.prune_fractions, vec![0.0, 0.25, 0.5]);
        assert!(c.set("nope=1").unwrap_err().to_string().contains("nope"));
        assert!(c.set("alpha=2").is_err());
        assert_eq!(c.alpha, 0.5);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
