//! Run configuration: a TOML file merged with dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// Parses TOML text; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// `"default"` selects the reference configuration; anything else is a
    /// file path.
    pub fn load(source: &str) -> Result<Self> {
        if source == "default" {
            return Ok(RunConfig::default());
        }
        let text = std::fs::read_to_string(Path::new(source))
            .map_err(|e| Error::config(format!("cannot read config '{source}': {e}")))?;
        Self::from_toml(&text)
    }

    /// Applies `path=value` overrides in order; the last one wins. Values are
    /// parsed as TOML and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::config(format!("config: {e}")))?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) =
                o.split_once('=').ok_or_else(|| Error::config(format!("override '{o}' is not of the form key.path=value")))?;
            set_path(&mut doc, path.trim(), parse_value(raw.trim()))?;
        }
        doc.try_into().map_err(|e: toml::de::Error| Error::config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    toml::from_str::<Probe>(&format!("v = {raw}")).map(|p| p.v).unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("bad override path '{path}'")));
    }
    let mut cur = doc;
    for (i, k) in keys.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| Error::config(format!("'{}' is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert(k.to_string(), value);
            return Ok(());
        }
        cur = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("non-empty path")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = RunConfig::default()
            .with_overrides(&["train.lr_max=0.01", "model.widths=[4,8,16,32,64]", "train.lr_max=0.02", "train.resize_to=64"])
            .unwrap();
        assert_eq!(c.train.lr_max, 0.02);
        assert_eq!(c.model.widths, vec![4, 8, 16, 32, 64]);
        assert_eq!(c.train.resize_to, Some(64));
        assert_eq!(RunConfig::default().with_overrides(&["train.augment=[\"hflip\"]"]).unwrap().train.augment.len(), 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::default().with_overrides(&["train.lr_maxx=1"]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nfoo = 1\n"), Err(Error::Config(_))));
        assert!(RunConfig::default().with_overrides(&["no_equals"]).is_err());
    }
}
