//! Layered run configuration: profile defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use branchgan::trainer::{default_schedule, validate_schedule, AlphaRamp};
use branchgan::{DataSource, DatasetSpec, NetConfig, OptimSpec, Profile, ScheduleStage, SyntheticRecipe};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSettings {
    pub epochs_per_stage: usize,
    /// Fixed steps per stage; replaces the epoch budget when set.
    pub steps_per_stage: Option<usize>,
    pub stage1_fraction: f64,
    pub alpha_ramp: AlphaRamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub source: DataSource,
    pub shuffle_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub net: NetConfig,
    pub data: DataSettings,
    pub optim: OptimSpec,
    pub schedule: ScheduleSettings,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let net = profile.net_config();
        let source = match profile {
            Profile::Desk => DataSource::Synthetic {
                recipe: SyntheticRecipe {
                    resolution: net.output_resolution,
                    ..SyntheticRecipe::default()
                },
                seed: 7,
            },
            _ => DataSource::Directory { path: "data".into() },
        };
        RunConfig {
            profile,
            data: DataSettings { source, shuffle_seed: 0 },
            optim: OptimSpec::for_profile(profile),
            schedule: ScheduleSettings {
                epochs_per_stage: profile.epochs_per_stage(),
                steps_per_stage: None,
                stage1_fraction: 0.25,
                alpha_ramp: AlphaRamp::default(),
            },
            net,
            seed: 0,
            out: PathBuf::from("runs").join(profile.to_string()),
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec::for_config(self.data.source.clone(), &self.net, self.data.shuffle_seed)
    }

    pub fn schedule(&self) -> Vec<ScheduleStage> {
        default_schedule(&self.net, self.schedule.epochs_per_stage)
            .into_iter()
            .map(|s| ScheduleStage {
                steps: self.schedule.steps_per_stage,
                stage1_fraction: self.schedule.stage1_fraction,
                alpha_ramp: self.schedule.alpha_ramp.clone(),
                ..s
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: branchgan::Error| CliError::Config(e.to_string());
        self.net.validate().map_err(cfg)?;
        self.optim.validate().map_err(cfg)?;
        validate_schedule(&self.net, &self.schedule()).map_err(cfg)?;
        self.dataset_spec().validate(&self.net).map_err(cfg)?;
        if let DataSource::Synthetic { recipe, .. } = &self.data.source {
            recipe.validate().map_err(cfg)?;
            if recipe.resolution != self.net.output_resolution {
                return Err(CliError::Config(format!(
                    "synthetic resolution {:?} differs from the network output {:?}",
                    recipe.resolution, self.net.output_resolution
                )));
            }
        }
        Ok(())
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `path` (dot separated) inside `patch`, creating objects as needed.
pub fn set_path(patch: &mut Value, path: &str, value: Value) {
    let mut cur = patch;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("object");
        if parts.peek().is_none() {
            obj.insert(part.into(), value);
            return;
        }
        cur = obj.entry(part).or_insert_with(|| Value::Object(Map::new()));
    }
}

pub fn read_toml(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let parsed: toml::Value =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::to_value(parsed).map_err(|e| CliError::Config(e.to_string()))
}

/// Resolves the three layers. The profile comes from the flag, else the
/// file, else `desk`.
pub fn resolve(profile_flag: Option<Profile>, file: Option<&Path>, flags: Value) -> Result<RunConfig, CliError> {
    let file_value = file.map(read_toml).transpose()?;
    let profile = match (profile_flag, file_value.as_ref().and_then(|v| v.get("profile"))) {
        (Some(p), _) => p,
        (None, Some(v)) => serde_json::from_value(v.clone())
            .map_err(|e| CliError::Config(format!("profile: {e}")))?,
        (None, None) => Profile::Desk,
    };
    let mut value = serde_json::to_value(RunConfig::for_profile(profile)).expect("config serializes");
    if let Some(mut f) = file_value {
        if let Some(obj) = f.as_object_mut() {
            obj.remove("profile");
        }
        merge(&mut value, f);
    }
    merge(&mut value, flags);
    set_path(&mut value, "profile", serde_json::to_value(profile).expect("profile serializes"));
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[optim]\nlearning_rate = 0.001\nbatch_size = 8\n").unwrap();
        let mut flags = json!({});
        set_path(&mut flags, "optim.batch_size", json!(4));
        let cfg = resolve(None, Some(&path), flags).unwrap();
        assert_eq!(cfg.profile, Profile::Desk);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.optim.learning_rate, 0.001);
        assert_eq!(cfg.optim.batch_size, 4);
        assert_eq!(cfg.optim.beta1, 0.5);
    }

    #[test]
    fn paper256_defaults() {
        let cfg = RunConfig::for_profile(Profile::Paper256);
        assert_eq!(cfg.net.subvector_dims, vec![30; 5]);
        assert_eq!(cfg.optim.batch_size, 20);
        assert_eq!(cfg.schedule.epochs_per_stage, 20);
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_values_are_config_errors() {
        let flags = json!({"schedule": {"stage1_fraction": 1.5}});
        assert!(matches!(resolve(None, None, flags), Err(CliError::Config(_))));
        let flags = json!({"optim": {"batch_size": "many"}});
        assert!(matches!(resolve(None, None, flags), Err(CliError::Config(_))));
    }
}
