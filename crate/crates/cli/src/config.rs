//! Effective run configuration: built-in defaults (per preset), then the
//! JSON config file deep-merged on top, then command-line flags.

use std::path::{Path, PathBuf};

use crce_core::eval::{AmbiguityPolicy, CorefCriterion, EvalOptions};
use crce_core::http::EndpointConfig;
use crce_core::toy::{PretrainConfig, ToyConfig};
use crce_core::trainer::ErasureConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Library defaults: η=1, 500 steps, lr 1e-5, M=5, N=3, SGD.
    #[default]
    Default,
    /// Toy backend: M=3, N=2, Adam at 1e-2, 50 images per prompt.
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    /// Nearest-component classifier of the toy backend.
    #[default]
    Toy,
    /// Recorded answers keyed by prompt (paired with metadata-only images).
    Fixtures,
    /// OpenAI-compatible vision endpoint from the `judge` section.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub images_per_prompt: usize,
    pub workers: usize,
    pub ambiguity: AmbiguityPolicy,
    pub coref_criterion: CorefCriterion,
    pub judge: JudgeKind,
    pub fixtures: Option<PathBuf>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            images_per_prompt: 10,
            workers: 4,
            ambiguity: AmbiguityPolicy::default(),
            coref_criterion: CorefCriterion::default(),
            judge: JudgeKind::default(),
            fixtures: None,
        }
    }
}

impl EvalSettings {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            ambiguity: self.ambiguity,
            coref_criterion: self.coref_criterion,
            workers: self.workers.max(1),
            ..EvalOptions::with_images(self.images_per_prompt)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyBackendConfig {
    /// Pretrained base weights; pretrained in-process when absent.
    pub base_weights: Option<PathBuf>,
    pub world_seed: u64,
    pub model: ToyConfig,
    pub pretrain: PretrainConfig,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            base_weights: None,
            world_seed: 2024,
            model: ToyConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PoolingChoice {
    #[default]
    Eos,
    Mean,
    /// End-of-sequence first; mean of token states if the reference check fails.
    Auto,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipSettings {
    /// Directory with `model.safetensors` and `tokenizer.json`; falls back to `CRCE_CLIP_DIR`.
    pub dir: Option<PathBuf>,
    pub pooling: PoolingChoice,
    pub project: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub preset: Preset,
    pub erasure: ErasureConfig,
    pub evaluation: EvalSettings,
    pub toy: ToyBackendConfig,
    pub clip: ClipSettings,
    pub generator: Option<EndpointConfig>,
    pub judge: Option<EndpointConfig>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Default)
    }
}

impl CliConfig {
    pub fn for_preset(preset: Preset) -> Self {
        let (erasure, images) = match preset {
            Preset::Default => (ErasureConfig::default(), 10),
            Preset::Toy => (ErasureConfig::toy(), 50),
        };
        Self {
            preset,
            erasure,
            evaluation: EvalSettings {
                images_per_prompt: images,
                ..EvalSettings::default()
            },
            toy: ToyBackendConfig::default(),
            clip: ClipSettings::default(),
            generator: None,
            judge: None,
        }
    }

    /// Layers `file` (if any) over the preset defaults. A preset given on the
    /// command line wins over one named in the file.
    pub fn load(file: Option<&Path>, preset_flag: Option<Preset>) -> Result<Self, CliError> {
        let overlay = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::missing(p, e))?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let file_preset = match overlay.get("preset") {
            Some(v) => Some(
                serde_json::from_value::<Preset>(v.clone())
                    .map_err(|e| CliError::Usage(format!("config preset: {e}")))?,
            ),
            None => None,
        };
        let preset = preset_flag.or(file_preset).unwrap_or_default();
        let mut overlay = overlay;
        canonical_erasure_keys(&mut overlay);
        let mut merged = serde_json::to_value(Self::for_preset(preset)).expect("config serializes");
        merge(&mut merged, overlay);
        merged["preset"] = serde_json::to_value(preset).expect("preset serializes");
        serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// `M`/`N` are accepted for `m`/`n`; rename before merging so the alias and
/// the preset's own key don't both end up in the object.
fn canonical_erasure_keys(overlay: &mut Value) {
    if let Some(Value::Object(e)) = overlay.get_mut("erasure") {
        for (alias, key) in [("M", "m"), ("N", "n")] {
            if let Some(v) = e.remove(alias) {
                e.entry(key).or_insert(v);
            }
        }
    }
}

/// Recursive object merge; non-object values in `overlay` replace `base`.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_is_deep() {
        let mut a = json!({"x": {"y": 1, "z": 2}, "w": 3});
        merge(&mut a, json!({"x": {"y": 5}, "v": null}));
        assert_eq!(a, json!({"x": {"y": 5, "z": 2}, "w": 3, "v": null}));
    }

    #[test]
    fn partial_file_keeps_preset_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"preset": "toy", "erasure": {"M": 10}}"#).unwrap();
        let c = CliConfig::load(Some(&p), None).unwrap();
        assert_eq!(c.erasure.m, 10);
        assert_eq!(c.erasure.n, 2);
        assert_eq!(c.erasure.learning_rate, 1e-2);
        let d = CliConfig::load(Some(&p), Some(Preset::Default)).unwrap();
        assert_eq!((d.erasure.m, d.erasure.n, d.erasure.learning_rate), (10, 3, 1e-5));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"erasure": {"etaa": 2}}"#).unwrap();
        assert!(matches!(CliConfig::load(Some(&p), None), Err(CliError::Usage(_))));
        assert!(matches!(
            CliConfig::load(Some(&dir.path().join("nope.json")), None),
            Err(CliError::MissingFile { .. })
        ));
    }
}
