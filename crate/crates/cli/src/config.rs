//! Experiment configuration, read from a JSON file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ctxnorm::contexts::FeatureMode;
use ctxnorm_train::{NormKind, OptimizerConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// IDX image and label files, optionally gzipped.
    MnistIdx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        subset_n: Option<usize>,
    },
    SyntheticGmm {
        k_true: usize,
        n: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContextConfig {
    Kmeans {
        k: usize,
        #[serde(default)]
        features: FeatureMode,
        #[serde(default = "default_kmeans_iters")]
        max_iters: usize,
    },
    /// Contexts shipped with the data: synthetic components or a CSV
    /// `context` column.
    True,
    /// Sidecar `{"map": {"class": context}}`.
    Superclass { sidecar: PathBuf },
    /// Sidecar `{"domains": [tag per sample in file order]}`.
    Domain { sidecar: PathBuf },
}

fn default_kmeans_iters() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    #[default]
    Mlp,
    SmallCnn,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub contexts: ContextConfig,
    pub methods: Vec<NormKind>,
    #[serde(default)]
    pub model: ModelName,
    /// Hidden widths of the MLP.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Share of samples held out for evaluation; 0 evaluates on the
    /// training set.
    #[serde(default)]
    pub eval_fraction: f64,
    pub out_dir: PathBuf,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub epochs: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetConfig::MnistIdx { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            DatasetConfig::Csv { path } => fix(path),
            DatasetConfig::SyntheticGmm { .. } => {}
        }
        match &mut self.contexts {
            ContextConfig::Superclass { sidecar } | ContextConfig::Domain { sidecar } => fix(sidecar),
            ContextConfig::Kmeans { .. } | ContextConfig::True => {}
        }
        fix(&mut self.out_dir);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out_dir {
            self.out_dir = out.clone();
        }
        if let Some(epochs) = o.epochs {
            self.epochs = epochs;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let mut paths: Vec<&PathBuf> = Vec::new();
        match &self.dataset {
            DatasetConfig::MnistIdx { images, labels, subset_n } => {
                paths.extend([images, labels]);
                if *subset_n == Some(0) {
                    return bad("subset_n must be at least 1".into());
                }
            }
            DatasetConfig::SyntheticGmm { k_true, n, dim, separation, .. } => {
                if *k_true == 0 || *dim < *k_true || *n < *k_true {
                    return bad(format!("synthetic_gmm needs 1 ≤ k_true ≤ dim and k_true ≤ n, got {k_true}, {dim}, {n}"));
                }
                if !separation.is_finite() || *separation < 0.0 {
                    return bad(format!("separation {separation} must be finite and non-negative"));
                }
            }
            DatasetConfig::Csv { path } => paths.push(path),
        }
        match &self.contexts {
            ContextConfig::Kmeans { k, .. } if *k == 0 => return bad("K must be at least 1".into()),
            ContextConfig::True if matches!(self.dataset, DatasetConfig::MnistIdx { .. }) => {
                return bad("MNIST has no true contexts; use kmeans, superclass or domain".into());
            }
            ContextConfig::Superclass { sidecar } | ContextConfig::Domain { sidecar } => paths.push(sidecar),
            _ => {}
        }
        if let Some(missing) = paths.iter().find(|p| !p.exists()) {
            return bad(format!("{} does not exist", missing.display()));
        }
        if self.methods.is_empty() {
            return bad("no methods listed".into());
        }
        let unique: BTreeSet<&str> = self.methods.iter().map(|m| m.name()).collect();
        if unique.len() != self.methods.len() {
            return bad("methods must not repeat".into());
        }
        if self.model == ModelName::Mlp && self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad(format!("eval_fraction {} must lie in [0, 1)", self.eval_fraction));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{"dataset": {"kind": "synthetic_gmm", "k_true": 2, "n": 100, "dim": 4, "separation": 3},
                "contexts": {"strategy": "true"}, "methods": ["bn", "cn"],
                "epochs": 2, "batch_size": 16, "out_dir": "out"}"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = synthetic();
        assert_eq!(cfg.model, ModelName::Mlp);
        assert_eq!(cfg.hidden, vec![64, 64]);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.optimizer, OptimizerConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn flags_override_file_values() {
        let mut cfg = synthetic();
        cfg.apply(&Overrides { seed: Some(7), out_dir: Some("elsewhere".into()), epochs: Some(0) });
        assert_eq!((cfg.seed, cfg.epochs), (7, 0));
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        cfg.apply(&Overrides::default());
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = synthetic();
        cfg.contexts = ContextConfig::Kmeans { k: 0, features: FeatureMode::RawFlatten, max_iters: 10 };
        assert!(cfg.validate().unwrap_err().to_string().contains("K must be at least 1"));

        let mut cfg = synthetic();
        cfg.dataset = DatasetConfig::Csv { path: "/definitely/not/here.csv".into() };
        assert!(cfg.validate().unwrap_err().to_string().contains("does not exist"));

        let mut cfg = synthetic();
        cfg.methods.push(NormKind::Bn);
        assert!(cfg.validate().is_err());

        let mut cfg = synthetic();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"dataset": {"kind": "csv", "path": "x", "oops": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("oops"), "{err}");
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = synthetic();
        cfg.dataset = DatasetConfig::Csv { path: "d.csv".into() };
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.dataset, DatasetConfig::Csv { path: "/base/d.csv".into() });
        assert_eq!(cfg.out_dir, PathBuf::from("/base/out"));
    }
}
