//! Experiment configuration, the per-round simulation loop and CSV output.
//!
//! A configuration is a TOML document; every field has a default so an empty
//! file is valid. Dotted overrides (`channel.snr=20`) are applied on top of
//! the parsed document before validation.

mod output;
mod presets;
mod sim;

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bound::BoundConstants;
use crate::channel::ChannelConfig;
use crate::coeff_select::{default_theta, SelectionConfig};
use crate::lattice::{LatticeKind, LatticeSpec};
use crate::learning::{BlobSpec, ModelKind, ModelShape, PartitionMode, TrainingConfig};
use crate::{Error, Result};

pub use output::{summarize, write_outputs, SummaryRow, ROUND_COLUMNS, SUMMARY_COLUMNS};
pub use presets::{desk_scale, preset, PRESETS};
pub use sim::{run_experiment, run_seed, ExperimentResult, RoundMetrics, Simulation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Fedcpu,
    IdealFedavg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeConfig {
    pub kind: LatticeKind,
    /// `ρ`.
    pub scale: f64,
    /// Only for `kind = "custom"`; rows of the generator, columns are the basis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<Vec<Vec<f64>>>,
    pub second_moment_samples: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            kind: LatticeKind::E8,
            scale: 0.5,
            generator: None,
            second_moment_samples: 100_000,
        }
    }
}

impl LatticeConfig {
    pub fn build(&self) -> Result<LatticeSpec> {
        match (self.kind, &self.generator) {
            (LatticeKind::Custom, Some(rows)) => {
                let n = rows.len();
                if n == 0 || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::config("lattice.generator must be a non-empty square matrix"));
                }
                let g = DMatrix::from_fn(n, n, |r, c| rows[r][c]);
                LatticeSpec::custom(g, self.scale)
            }
            (LatticeKind::Custom, None) => Err(Error::config("lattice.kind = \"custom\" needs lattice.generator")),
            (kind, _) => LatticeSpec::new(kind, self.scale),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    /// Per-dimension DMSE budget; derived from the lattice when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    pub epsilon: f64,
    pub max_iters: usize,
    pub qp_tolerance: f64,
    pub brute_force_bound: i64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        let d = SelectionConfig::new(1.0);
        Self {
            theta: None,
            epsilon: d.epsilon,
            max_iters: d.max_iters,
            qp_tolerance: d.qp_tolerance,
            brute_force_bound: d.brute_force_bound,
        }
    }
}

impl SelectionSection {
    pub fn resolve(&self, lattice: &LatticeSpec) -> SelectionConfig {
        SelectionConfig {
            theta: self.theta.unwrap_or_else(|| default_theta(lattice)),
            epsilon: self.epsilon,
            max_iters: self.max_iters,
            qp_tolerance: self.qp_tolerance,
            brute_force_bound: self.brute_force_bound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Blobs,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdxFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Seed for generated data and the partition.
    pub seed: u64,
    /// Regenerate blobs from each run seed instead of `seed`.
    pub per_run: bool,
    pub blobs: BlobSpec,
    pub idx: IdxFiles,
    /// Divisor applied to raw IDX values.
    pub pixel_scale: f64,
    pub partition: PartitionMode,
    pub dirichlet_alpha: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            seed: 0,
            per_run: false,
            blobs: BlobSpec::default(),
            idx: IdxFiles::default(),
            pixel_scale: 255.0,
            partition: PartitionMode::Iid,
            dirichlet_alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::SoftmaxLinear,
            hidden: 16,
            init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn shape(&self, features: usize, classes: usize) -> ModelShape {
        match self.kind {
            ModelKind::SoftmaxLinear => ModelShape::softmax(features, classes),
            ModelKind::Mlp1Hidden => ModelShape::mlp(features, self.hidden, classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub channel: ChannelConfig,
    pub lattice: LatticeConfig,
    pub training: TrainingConfig,
    pub selection: SelectionSection,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub bound: BoundConstants,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Fedcpu,
            seeds: (0..20).collect(),
            output: None,
            channel: ChannelConfig::default(),
            lattice: LatticeConfig::default(),
            training: TrainingConfig::default(),
            selection: SelectionSection::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            bound: BoundConstants::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid configuration: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        self.channel.validate()?;
        self.training.validate()?;
        self.bound.validate()?;
        let lattice = self.lattice.build()?;
        if self.scheme == Scheme::Fedcpu {
            self.selection.resolve(&lattice).validate()?;
        }
        if self.lattice.second_moment_samples < crate::lattice::MIN_SECOND_MOMENT_SAMPLES {
            return Err(Error::config(format!(
                "lattice.second_moment_samples must be at least {}",
                crate::lattice::MIN_SECOND_MOMENT_SAMPLES
            )));
        }
        if !(self.model.init_scale >= 0.0) {
            return Err(Error::config("model.init_scale must be non-negative"));
        }
        if self.model.kind == ModelKind::Mlp1Hidden && self.model.hidden == 0 {
            return Err(Error::config("model.hidden must be at least 1"));
        }
        if self.dataset.source == DataSource::Blobs && self.dataset.blobs.train_samples < self.channel.devices {
            return Err(Error::config("dataset.blobs.train_samples must cover every device"));
        }
        if !(self.dataset.pixel_scale > 0.0) {
            return Err(Error::config("dataset.pixel_scale must be positive"));
        }
        Ok(())
    }

    /// Apply `key=value` with a dotted key. The value is read as a TOML value
    /// and falls back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{assignment}' is not key=value")))?;
        let key = key.trim();
        let value = parse_value(raw.trim());
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts
            .pop()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::config(format!("empty override key in '{assignment}'")))?;
        let mut table = doc
            .as_table_mut()
            .ok_or_else(|| Error::config("configuration is not a table"))?;
        for part in parts {
            table = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("'{part}' in '{key}' is not a section")))?;
        }
        table.insert(last.to_string(), value);
        *self = doc
            .try_into()
            .map_err(|e| Error::config(format!("override '{assignment}': {e}")))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, with the output path cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        let json = serde_json::to_string(&c).expect("configuration serializes to JSON");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(
            ExperimentConfig::from_toml_str("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn table_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.channel.devices, 30);
        assert_eq!(c.channel.antennas, 30);
        assert_eq!(c.channel.snr, 10.0);
        assert_eq!(c.training.local_steps, 3);
        assert_eq!(c.training.lr, 0.01);
        assert_eq!(c.training.batch_size, 100);
        c.validate().unwrap();
    }

    #[test]
    fn round_trip_through_toml() {
        let mut c = ExperimentConfig::default();
        c.selection.theta = Some(0.02);
        c.output = Some("out".into());
        let text = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::default();
        c.apply_override("channel.snr=20").unwrap();
        c.apply_override("lattice.kind=identity").unwrap();
        c.apply_override("selection.theta = 0.5").unwrap();
        c.apply_override("seeds=[1, 2]").unwrap();
        c.apply_override("scheme=\"ideal_fedavg\"").unwrap();
        c.apply_override("dataset.per_run=true").unwrap();
        assert!(c.dataset.per_run);
        assert_eq!(c.channel.snr, 20.0);
        assert_eq!(c.lattice.kind, LatticeKind::Identity);
        assert_eq!(c.selection.theta, Some(0.5));
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.scheme, Scheme::IdealFedavg);
        assert!(c.apply_override("channel.nope=1").is_err());
        assert!(c.apply_override("channel.snr").is_err());
        assert!(c.apply_override("channel.snr=\"loud\"").is_err());
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(ExperimentConfig::from_toml_str("[channel]\nantenas = 3").is_err());
    }

    #[test]
    fn hash_ignores_output_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.channel.snr = 11.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn validation_failures() {
        let mut c = ExperimentConfig::default();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.lattice.kind = LatticeKind::Custom;
        assert!(c.validate().is_err());
        c.lattice.generator = Some(vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        c.validate().unwrap();
    }
}
