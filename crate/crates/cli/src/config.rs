//! Strict JSON run configuration with dotted-path overrides.

use icm_core::codec::CodecArch;
use icm_core::metrics::EvalConfig;
use icm_core::rng::fnv1a;
use icm_core::roi::RoiConfig;
use icm_core::task::{PretrainConfig, RecognizerArch, TaskKind};
use icm_core::training::{DataConfig, LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub recognizer: PretrainConfig,
    pub arch: RecognizerArch,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: TaskKind::Segmentation,
            recognizer: PretrainConfig::default(),
            arch: RecognizerArch::default(),
        }
    }
}

/// The whole experiment configuration. Unknown keys anywhere are rejected.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub task: TaskSection,
    pub codec: CodecArch,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub roi: RoiConfig,
    pub eval: EvalConfig,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            task: TaskSection::default(),
            codec: CodecArch::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            roi: RoiConfig::default(),
            eval: EvalConfig::default(),
            out_dir: "runs".into(),
        }
    }
}

impl RunConfig {
    /// Load from JSON (or defaults when no file is given), then apply
    /// `key.path=value` overrides. The result re-parses through the strict
    /// schema, so unknown keys and bad values fail loudly.
    pub fn load(
        path: Option<&Path>,
        overrides: &[String],
    ) -> Result<RunConfig, icm_core::Error> {
        let mut value: serde_json::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    icm_core::Error::Config(format!("cannot read {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    icm_core::Error::Config(format!("{}: {e}", p.display()))
                })?
            }
            None => serde_json::to_value(RunConfig::default()).expect("default serializes"),
        };

        for ov in overrides {
            let (key, raw) = ov.split_once('=').ok_or_else(|| {
                icm_core::Error::Config(format!("override {ov:?} is not KEY=VALUE"))
            })?;
            let parsed: serde_json::Value = match serde_json::from_str(raw) {
                Ok(v) => v,
                Err(_) => serde_json::Value::String(raw.to_string()),
            };
            set_path(&mut value, key, parsed)?;
        }

        serde_json::from_value(value)
            .map_err(|e| icm_core::Error::Config(format!("config schema violation: {e}")))
    }

    /// Stable digest of the effective configuration.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(canonical.as_bytes()))
    }

    pub fn snapshot_to(&self, path: &Path) -> Result<(), icm_core::Error> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn set_path(
    root: &mut serde_json::Value,
    dotted: &str,
    new: serde_json::Value,
) -> Result<(), icm_core::Error> {
    let mut cur = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cur.as_object_mut().ok_or_else(|| {
            icm_core::Error::Config(format!("override path {dotted:?}: {part:?} is not an object"))
        })?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), new);
            return Ok(());
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}
