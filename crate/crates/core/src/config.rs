//! Run configuration: one JSON file covering every pipeline stage.
//!
//! The master seed can be overridden with the `LTAUG_SEED` environment
//! variable. Each stage draws its own seed from the master seed and a stage
//! tag, so stages can be re-run independently.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cam::CamMode;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fusion::{AugmentConfig, DenoiseConfig};
use crate::seed::{self, Tag};
use crate::store::{PartitionRule, SynthConfig};
use crate::trainer::ILConfig;

pub const SEED_ENV: &str = "LTAUG_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamConfig {
    pub tau_h: f64,
    pub tau_l: f64,
    pub mode: CamMode,
}

impl Default for CamConfig {
    fn default() -> Self {
        CamConfig {
            tau_h: 0.4,
            tau_l: 0.4,
            mode: CamMode::ClassGated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub k: usize,
    pub target_per_tail: usize,
    pub smote_k: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            k: 5,
            target_per_tail: 200,
            smote_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub synth: SynthConfig,
    pub partition: PartitionRule,
    /// `il.seed` is ignored; the training seed derives from `seed`.
    pub il: ILConfig,
    pub cam: CamConfig,
    pub fusion: FusionConfig,
    /// Refinement for the `ours@s` variant; `ours@0` always uses zero steps.
    pub denoise: DenoiseConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            synth: SynthConfig::default(),
            partition: PartitionRule::Threshold(100),
            il: ILConfig::default(),
            cam: CamConfig::default(),
            fusion: FusionConfig::default(),
            denoise: DenoiseConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    /// Reads, applies the seed override and validates. A relative
    /// `output_dir` stays relative to the working directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, path)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: {v:?} is not a u64")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if let PartitionRule::Explicit { head, tail } = &self.partition {
            let k = self.synth.num_classes();
            if let Some(c) = head.iter().chain(tail).find(|&&c| c >= k) {
                return Err(Error::Config(format!(
                    "partition: class {c} out of range (K = {k})"
                )));
            }
        }
        self.il.validate()?;
        self.augment_config().validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m.replacen("fusion.tau", "cam.tau", 1)),
            other => other,
        })?;
        if self.fusion.smote_k < 1 {
            return Err(Error::Config("fusion.smote_k: must be >= 1".into()));
        }
        self.denoise.validate()?;
        self.eval.validate()
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive_seed(self.seed, &[Tag::Str(stage)])
    }

    pub fn il_config(&self) -> ILConfig {
        ILConfig {
            seed: self.stage_seed("train"),
            ..self.il.clone()
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            tau_h: self.cam.tau_h,
            tau_l: self.cam.tau_l,
            k: self.fusion.k,
            target_per_tail: self.fusion.target_per_tail,
            cam_mode: self.cam.mode,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn cam_dir(&self) -> PathBuf {
        self.output_dir.join("cams")
    }

    pub fn augment_dir(&self) -> PathBuf {
        self.output_dir.join("augment")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        let cfg = RunConfig::from_json(text, Path::new("t.json"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn empty_object_is_default() {
        assert_eq!(parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            (r#"{"cam": {"tau_h": 1.5}}"#, "cam.tau_h"),
            (r#"{"il": {"lambda": 2.0}}"#, "il.lambda"),
            (r#"{"synth": {"dims": [2, 8, 4]}}"#, "synth."),
            (r#"{"denoise": {"divisor": 0}}"#, "denoise.divisor"),
            (r#"{"denoise": {"denoiser": "blur"}}"#, "denoise.denoiser"),
            (r#"{"eval": {"epochs": 0}}"#, "eval.epochs"),
            (r#"{"fusion": {"k": 0}}"#, "fusion.k"),
            (r#"{"bogus": 1}"#, "bogus"),
        ];
        for (text, key) in cases {
            let msg = parse(text).unwrap_err().to_string();
            assert!(msg.contains(key), "{text}: {msg}");
        }
    }

    #[test]
    fn stage_seeds_differ() {
        let c = RunConfig::default();
        assert_ne!(c.stage_seed("train"), c.stage_seed("augment"));
        assert_eq!(c.il_config().seed, c.stage_seed("train"));
    }
}
