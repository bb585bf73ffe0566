//! JSON run configuration: dataset block, model spec, regularizer, and
//! training plan, plus the content hash embedded in every output row.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sparsemdl_core::loss::{ByteScheme, LossKind};
use sparsemdl_core::model::{Activation, OutputHead};
use sparsemdl_core::regularizer::RegularizerSpec;
use sparsemdl_core::training::TrainPlan;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum DatasetConfig {
    /// Synthetic regression data from a seeded tanh teacher network.
    Teacher {
        dims: Vec<usize>,
        sigma: f64,
        n: usize,
        seed: u64,
        input_low: f64,
        input_high: f64,
        /// Train and test both get this many samples, the remainder goes
        /// to validation. Mutually exclusive with `fractions`.
        #[serde(default)]
        equal_train_test: Option<usize>,
        #[serde(default)]
        fractions: Option<(f64, f64, f64)>,
    },
    /// MNIST-style IDX image/label pair.
    MnistIdx {
        images: PathBuf,
        labels: PathBuf,
        fractions: (f64, f64, f64),
        seed: u64,
    },
    /// Plain CSV with d_in input columns followed by d_out target columns.
    CsvFile {
        path: PathBuf,
        d_in: usize,
        d_out: usize,
        fractions: (f64, f64, f64),
        seed: u64,
    },
}

impl DatasetConfig {
    pub fn seed(&self) -> u64 {
        match self {
            DatasetConfig::Teacher { seed, .. }
            | DatasetConfig::MnistIdx { seed, .. }
            | DatasetConfig::CsvFile { seed, .. } => *seed,
        }
    }

    pub fn set_seed(&mut self, new: u64) {
        match self {
            DatasetConfig::Teacher { seed, .. }
            | DatasetConfig::MnistIdx { seed, .. }
            | DatasetConfig::CsvFile { seed, .. } => *seed = new,
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            DatasetConfig::Teacher { sigma, .. } => *sigma,
            _ => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model_dims: Vec<usize>,
    pub activation: Activation,
    pub output_head: OutputHead,
    pub loss_kind: LossKind,
    pub regularizer: RegularizerSpec,
    pub plan: TrainPlan,
    pub byte_scheme: ByteScheme,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Collects every violated field instead of stopping at the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.model_dims.len() < 2 || self.model_dims.iter().any(|&d| d == 0) {
            errs.push(format!("model_dims must have length >= 2 with positive entries, got {:?}", self.model_dims));
        }
        if let Err(e) = self.plan.validate() {
            errs.push(format!("plan: {e}"));
        }
        match &self.dataset {
            DatasetConfig::Teacher { dims, sigma, n, input_low, input_high, equal_train_test, fractions, .. } => {
                if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
                    errs.push(format!("teacher dims must have length >= 2 with positive entries, got {dims:?}"));
                }
                if *sigma < 0.0 {
                    errs.push(format!("teacher sigma must be >= 0, got {sigma}"));
                }
                if *n == 0 {
                    errs.push("teacher n must be >= 1".into());
                }
                if input_low >= input_high {
                    errs.push(format!("input domain [{input_low}, {input_high}] is empty"));
                }
                match (equal_train_test, fractions) {
                    (Some(_), Some(_)) => {
                        errs.push("equal_train_test and fractions are mutually exclusive".into())
                    }
                    (None, None) => errs.push("one of equal_train_test or fractions is required".into()),
                    (Some(k), None) if 2 * k >= *n => {
                        errs.push(format!("equal_train_test={k} leaves no validation samples out of n={n}"))
                    }
                    _ => {}
                }
                if let Some((ft, fv, fe)) = fractions {
                    if *ft <= 0.0 || *fv <= 0.0 || *fe <= 0.0 || ft + fv + fe > 1.0 + 1e-12 {
                        errs.push(format!("fractions ({ft}, {fv}, {fe}) must be positive and sum to <= 1"));
                    }
                }
                if self.loss_kind == LossKind::CrossEntropy {
                    errs.push("cross-entropy loss needs a classification dataset".into());
                }
            }
            DatasetConfig::MnistIdx { fractions: (ft, fv, fe), .. } => {
                if *ft <= 0.0 || *fv <= 0.0 || *fe <= 0.0 || ft + fv + fe > 1.0 + 1e-12 {
                    errs.push(format!("fractions ({ft}, {fv}, {fe}) must be positive and sum to <= 1"));
                }
                if self.loss_kind != LossKind::CrossEntropy {
                    errs.push("IDX classification data needs the cross-entropy loss".into());
                }
                if self.output_head != OutputHead::Softmax {
                    errs.push("classification needs the softmax output head".into());
                }
            }
            DatasetConfig::CsvFile { d_in, d_out, fractions: (ft, fv, fe), .. } => {
                if *d_in == 0 || *d_out == 0 {
                    errs.push("CSV d_in and d_out must be >= 1".into());
                }
                if *ft <= 0.0 || *fv <= 0.0 || *fe <= 0.0 || ft + fv + fe > 1.0 + 1e-12 {
                    errs.push(format!("fractions ({ft}, {fv}, {fe}) must be positive and sum to <= 1"));
                }
                if self.loss_kind == LossKind::CrossEntropy {
                    errs.push("cross-entropy loss needs a classification dataset".into());
                }
            }
        }
        errs
    }

    /// Content hash over the canonical JSON serialization; 16 hex chars.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex_prefix(&digest, 16)
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsemdl_core::model::Activation;

    fn teacher_config() -> RunConfig {
        RunConfig {
            dataset: DatasetConfig::Teacher {
                dims: vec![2, 5, 8, 1],
                sigma: 0.08,
                n: 660,
                seed: 3,
                input_low: -1.0,
                input_high: 1.0,
                equal_train_test: Some(300),
                fractions: None,
            },
            model_dims: vec![2, 25, 25, 1],
            activation: Activation::Tanh,
            output_head: OutputHead::Linear,
            loss_kind: LossKind::Mse,
            regularizer: RegularizerSpec::rl1(1e-3),
            plan: TrainPlan::standard(1e-3, 50, 200, 100, 7),
            byte_scheme: ByteScheme::Min,
        }
    }

    #[test]
    fn valid_config_passes_and_hash_is_stable() {
        let cfg = teacher_config();
        assert!(cfg.validate().is_empty());
        let h1 = cfg.hash();
        let h2 = cfg.hash();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 16);
        assert!(h1.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = teacher_config();
        let mut other = base.clone();
        other.regularizer.alpha = 2e-3;
        assert_ne!(base.hash(), other.hash());
        let mut other = base.clone();
        other.plan.seed = 8;
        assert_ne!(base.hash(), other.hash());
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut cfg = teacher_config();
        cfg.model_dims = vec![3];
        cfg.dataset = DatasetConfig::Teacher {
            dims: vec![2],
            sigma: -1.0,
            n: 0,
            seed: 0,
            input_low: 1.0,
            input_high: -1.0,
            equal_train_test: None,
            fractions: None,
        };
        let errs = cfg.validate();
        assert!(errs.len() >= 5, "expected several violations, got {errs:?}");
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = teacher_config();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg.hash(), back.hash());
    }
}
