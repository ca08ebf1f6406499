use serde::{Deserialize, Serialize};

use super::{HarnessError, SweepConfig};
use crate::baselines::{ClosedFormConfig, LabelPropConfig};
use crate::inference::InferenceConfig;
use crate::model::ModelConfig;
use crate::prior::PriorConfig;
use crate::training::TrainConfig;

/// Everything a command may read. Each section is a TOML table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prior: PriorConfig,
    pub inference: InferenceConfig,
    pub sweep: SweepConfig,
    pub label_prop: LabelPropConfig,
    pub closed_form: ClosedFormConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            prior: PriorConfig::default(),
            inference: InferenceConfig::default(),
            sweep: SweepConfig::default(),
            label_prop: LabelPropConfig::default(),
            closed_form: ClosedFormConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
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

impl Settings {
    /// Small model and prior sized for a single CPU.
    pub fn desk() -> Self {
        let prior = PriorConfig::desk();
        Self {
            model: ModelConfig::desk(),
            sweep: SweepConfig { prior: prior.clone(), ..SweepConfig::default() },
            prior,
            ..Self::default()
        }
    }

    /// Overlays a TOML document on `self`; keys absent from the document
    /// keep their current values.
    pub fn overlay_toml(&self, text: &str) -> Result<Self, HarnessError> {
        let over: toml::Value =
            toml::from_str(text).map_err(|e| HarnessError::Validation(format!("config file: {e}")))?;
        let mut base = toml::Value::try_from(self).map_err(|e| HarnessError::Validation(e.to_string()))?;
        merge(&mut base, over);
        base.try_into().map_err(|e: toml::de::Error| HarnessError::Validation(format!("config file: {e}")))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("settings serialize")
    }
}
