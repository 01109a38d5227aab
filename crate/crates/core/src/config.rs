//! Run configuration: profile presets merged with JSON overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::nn::{DenoiserConfig, Profile};
use crate::refine::RefineConfig;
use crate::sim::{DetectorSim, SceneSpec};
use crate::train::TrainConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "NBVREFINE_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Root seed; every random stream in a run derives from it.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub scenes: SplitSizes,
    pub scene: SceneSpec,
    pub detector: DetectorSim,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            profile: Profile::Desk,
            seed: 0,
            output_dir: None,
            scenes: SplitSizes { train: 2_000, val: 200 },
            scene: SceneSpec::default(),
            detector: DetectorSim::default(),
            model: DenoiserConfig::desk(),
            train: TrainConfig::desk(),
            refine: RefineConfig::desk(),
            eval: EvalConfig::default(),
        }
    }

    pub fn paper() -> Self {
        RunConfig {
            profile: Profile::Paper,
            model: DenoiserConfig::paper(),
            train: TrainConfig::paper(),
            refine: RefineConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(profile: Profile) -> Result<Self> {
        match profile {
            Profile::Desk => Ok(Self::desk()),
            Profile::Paper => Ok(Self::paper()),
            Profile::Custom => Err(Error::Config("`custom` is not a preset; start from desk or paper".into())),
        }
    }

    /// Builds a config from a JSON document of overrides.
    ///
    /// The document's `profile` (default `desk`) picks the preset; every other
    /// key is merged over it recursively. Unknown keys are rejected.
    pub fn from_overrides(doc: &Value) -> Result<Self> {
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
        let profile: Profile = match obj.get("profile") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => Profile::Desk,
        };
        let mut merged = serde_json::to_value(Self::preset(profile)?)?;
        merge(&mut merged, doc);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        Self::from_overrides(&doc)
    }

    /// Propagates the root seed into the sections that carry their own.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self.refine.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.refine.validate()?;
        self.eval.validate()?;
        if self.scenes.train == 0 && self.scenes.val == 0 {
            return Err(Error::Config("at least one scene must be requested".into()));
        }
        Ok(())
    }

    /// Output root: the environment override, else `output_dir`, else the working directory.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}
