//! Pipeline configuration: one YAML or JSON document, `${VAR}` and
//! `${VAR:-default}` interpolated from the environment before parsing.

use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use tumorseg::augment::AugmentationPolicy;
use tumorseg::infer::{EnsembleConfig, InferenceConfig};
use tumorseg::metrics::MetricsConfig;
use tumorseg::postprocess::PostprocConfig;
use tumorseg::train::TrainConfig;
use tumorseg::RegionMapping;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub mapping: RegionMapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    /// Replaces `train.augmentation` when present.
    pub augmentation: Option<AugmentationPolicy>,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub ensemble: Option<EnsembleConfig>,
    pub postprocess: PostprocConfig,
    pub metrics: MetricsConfig,
    pub output: PathBuf,
    /// Replaces `train.seed` when present.
    pub seed: Option<u64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            augmentation: None,
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            ensemble: None,
            postprocess: PostprocConfig::default(),
            metrics: MetricsConfig::default(),
            output: PathBuf::from("out"),
            seed: None,
        }
    }
}

static VAR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}").expect("valid pattern"));

/// Substitutes `${NAME}` / `${NAME:-fallback}` using `lookup`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, CliError> {
    let mut missing = Vec::new();
    let out = VAR.replace_all(text, |c: &Captures| match (lookup(&c[1]), c.get(2)) {
        (Some(v), _) => v,
        (None, Some(d)) => d.as_str().to_string(),
        (None, None) => {
            missing.push(c[1].to_string());
            String::new()
        }
    });
    if !missing.is_empty() {
        return Err(CliError::Schema(format!("unset environment variable(s): {}", missing.join(", "))));
    }
    Ok(out.into_owned())
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let text = interpolate(text, |k| std::env::var(k).ok())?;
        let cfg: Self = if text.trim().is_empty() {
            Self::default()
        } else {
            serde_yaml::from_str(&text).map_err(|e| CliError::Schema(e.to_string()))?
        };
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Schema(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.data.manifest.as_mut() {
            fix(m);
        }
        fix(&mut cfg.output);
        if let Some(e) = cfg.ensemble.as_mut() {
            e.groups.iter_mut().flatten().for_each(fix);
        }
        Ok(cfg)
    }

    /// Folds the top-level overrides into the training config.
    pub fn resolved_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(a) = &self.augmentation {
            t.augmentation = a.clone();
        }
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let schema = |e: tumorseg::Error| CliError::Schema(e.to_string());
        self.data.mapping.validate().map_err(schema)?;
        self.resolved_train().validate().map_err(schema)?;
        self.postprocess.validate().map_err(schema)?;
        if let Some(e) = &self.ensemble {
            e.validate().map_err(schema)?;
        }
        let inf = &self.inference;
        if !(0.0..1.0).contains(&inf.overlap) || inf.patch_size.contains(&0) {
            return Err(CliError::Schema(format!(
                "inference: patch_size must be positive and overlap in [0, 1), got {:?} / {}",
                inf.patch_size, inf.overlap
            )));
        }
        Ok(())
    }

    pub fn manifest(&self) -> Result<&Path, CliError> {
        self.data.manifest.as_deref().ok_or_else(|| CliError::Schema("data.manifest is required for this command".into()))
    }
}
