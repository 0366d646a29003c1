//! TOML run configuration shared by every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::FEATURE_CHANNELS;
use crate::model::ModelConfig;
use crate::raster::{AugmentPolicy, FlattenSettings};
use crate::seed::{derive_seed, sha256_hex};
use crate::synth::CohortSpec;
use crate::train::{FoldPlan, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub rounds: usize,
    /// Occlusion window side in pixels.
    pub saliency_patch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let plan = FoldPlan::default();
        Self {
            folds: plan.folds,
            rounds: plan.rounds,
            saliency_patch: 16,
        }
    }
}

impl EvalConfig {
    pub fn plan(&self) -> FoldPlan {
        FoldPlan {
            folds: self.folds,
            rounds: self.rounds,
        }
    }
}

/// Sections `[data]`, `[flatten]`, `[augment]`, `[model]`, `[train]` and
/// `[eval]` plus the master `seed`. Missing keys take defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: CohortSpec,
    pub flatten: FlattenSettings,
    pub augment: AugmentPolicy,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn ctx_err(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Config(format!("[{section}] {e}"))
}

impl RunConfig {
    /// Single-core profile: 48×48 rasters and one cross-validation round.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.set_raster_size(48, 48);
        c.eval.rounds = 1;
        c.eval.saliency_patch = 8;
        c
    }

    pub fn set_raster_size(&mut self, height: usize, width: usize) {
        self.flatten.height = height;
        self.flatten.width = width;
        self.model.encoder.height = height;
        self.model.encoder.width = width;
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self =
            toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(ctx_err("model"))?;
        self.train.validate().map_err(ctx_err("train"))?;
        self.augment.validate().map_err(ctx_err("augment"))?;
        for s in &self.data.scans {
            s.validate().map_err(ctx_err("data"))?;
        }
        let f = &self.flatten;
        if f.height == 0 || f.width == 0 || !(f.tol > 0.0) || f.max_iter == 0 {
            return Err(Error::Config(format!(
                "[flatten] needs positive size, tol and max_iter: {f:?}"
            )));
        }
        let e = &self.model.encoder;
        if (e.height, e.width) != (f.height, f.width) {
            return Err(Error::Config(format!(
                "[model.encoder] input {}x{} must match [flatten] raster {}x{}",
                e.height, e.width, f.height, f.width
            )));
        }
        if e.in_channels != FEATURE_CHANNELS.len() {
            return Err(Error::Config(format!(
                "[model.encoder] in_channels must be {}",
                FEATURE_CHANNELS.len()
            )));
        }
        if self.eval.folds < 2 || self.eval.rounds == 0 || self.eval.saliency_patch == 0 {
            return Err(Error::Config(
                "[eval] needs folds >= 2, rounds >= 1 and saliency_patch >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Every value, defaults included, as TOML.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.resolved().as_bytes())
    }

    pub fn cohort_spec(&self) -> CohortSpec {
        CohortSpec {
            seed: derive_seed(self.seed, "synth"),
            ..self.data.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            augment: self.augment,
            seed: derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_dump_reloads_identically() {
        let mut c = RunConfig::desk();
        c.seed = 11;
        c.train.epochs_pretrain = 2;
        let text = c.resolved();
        for key in [
            "[data]",
            "[flatten]",
            "[augment]",
            "[model]",
            "[train]",
            "[eval]",
            "margin",
            "tau",
            "weight_scale",
        ] {
            assert!(text.contains(key), "{key}");
        }
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[train]\nlr = 0.01\n[eval]\nrounds = 2\n").unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.margin, 1.0);
        assert_eq!(
            c.eval.plan(),
            FoldPlan {
                folds: 3,
                rounds: 2
            }
        );
        assert_eq!(c.train_config().augment, c.augment);
        assert_ne!(c.cohort_spec().seed, c.train_config().seed);
    }

    #[test]
    fn mismatched_raster_size_is_rejected() {
        assert!(RunConfig::from_toml("[flatten]\nheight = 32\n").is_err());
        assert!(RunConfig::from_toml(
            "[flatten]\nheight = 32\nwidth = 32\n[model.encoder]\nheight = 32\nwidth = 32\n"
        )
        .is_ok());
    }
}
