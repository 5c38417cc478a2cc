//! Run configuration: defaults, then a JSON file, then command-line values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vsemb::datamodel::SynthConfig;
use vsemb::evaluator::Setting;
use vsemb::oracle::OracleConfig;
use vsemb::trainer::TrainConfig;
use vsemb::{seed, Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub setting: Setting,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            setting: Setting::Gzsl,
        }
    }
}

/// Everything a command can be configured with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; module seeds are derived from it when set.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub oracle: OracleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults overlaid with `file`, then with `key=value` overrides.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("serializable");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            // Validate the file on its own so unknown keys are reported against it.
            serde_json::from_value::<RunConfig>(user.clone())
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, user);
        }
        for s in sets {
            apply_set(&mut value, s)?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    /// Derives per-module seeds from the master seed, if any.
    pub fn distribute_seed(&mut self) {
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.oracle.seed = seed::derive(s, "oracle");
            self.train.seed = seed::derive(s, "train");
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

/// Applies `a.b.c=value`; the value is parsed as JSON, or taken as a string.
fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside an object")))?;
        if !obj.contains_key(part) {
            return Err(Error::Config(format!("unknown configuration key {key}")));
        }
        slot = obj.get_mut(part).expect("checked");
    }
    *slot = parsed;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"train": {"epochs": 3, "eta": 0.5}, "seed": 4}"#).unwrap();
        let c = RunConfig::load(Some(&f), &["train.epochs=7".into()]).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.eta, 0.5);
        assert_eq!(c.train.lambda, 5.0);
        assert_eq!(c.seed, Some(4));

        std::fs::write(&f, r#"{"train": {"epochz": 3}}"#).unwrap();
        assert!(matches!(
            RunConfig::load(Some(&f), &[]),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::load(None, &["train.nope=1".into()]).is_err());
        assert!(RunConfig::load(None, &["train.mode=\"visual\"".into()]).is_ok());
        assert!(RunConfig::load(None, &["train.mode=visual".into()]).is_ok());
    }

    #[test]
    fn master_seed_fans_out() {
        let mut c = RunConfig {
            seed: Some(7),
            ..Default::default()
        };
        c.distribute_seed();
        assert_eq!(c.synth.seed, 7);
        assert_ne!(c.oracle.seed, c.train.seed);
    }
}
