//! Run configuration: a `[section]` / `key = value` text file (TOML), with
//! dotted `section.key=value` overrides applied on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::datasets::{Aspect, JitterConfig, ProtocolConfig};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::training::{LossConfig, OptimConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSettings {
    pub target: Aspect,
    /// Sub-datasets whose test identities share the common gallery; empty
    /// means just the target.
    pub gallery_aspects: Vec<Aspect>,
    pub repetitions: usize,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        Self {
            target: Aspect::None,
            gallery_aspects: Vec::new(),
            repetitions: 10,
        }
    }
}

impl ProtocolSettings {
    pub fn protocol_config(&self) -> ProtocolConfig {
        if self.gallery_aspects.is_empty() {
            ProtocolConfig::single(self.target)
        } else {
            ProtocolConfig {
                target: self.target,
                gallery_aspects: self.gallery_aspects.clone(),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub jitter: JitterConfig,
    pub protocol: ProtocolSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            jitter: JitterConfig::default(),
            protocol: ProtocolSettings::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::invalid("config", format!("empty key in {key:?}")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::invalid("config", format!("{p} in {key:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses `text`, then applies `overrides` of the form `section.key=value`
    /// (values in the file's syntax; bare words are taken as strings).
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid("config", format!("override {o:?} is not key=value")))?;
            set(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::invalid("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_text(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.protocol.repetitions == 0 {
            return Err(Error::invalid("config", "protocol.repetitions must be at least 1"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            loss: self.loss.clone(),
            optim: self.optim.clone(),
            jitter: self.jitter.clone(),
            seed: self.seed,
        }
    }

    /// Effective configuration in the file syntax.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// `text` as `#`-prefixed comment lines for text artifact headers.
pub fn comment_block(text: &str) -> String {
    text.lines()
        .map(|l| if l.is_empty() { "#\n".to_string() } else { format!("# {l}\n") })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::Components;

    #[test]
    fn comments() {
        assert_eq!(comment_block("a = 1\n\n[b]\n"), "# a = 1\n#\n# [b]\n");
    }

    #[test]
    fn empty_text_gives_defaults() {
        let c = RunConfig::from_text("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.optim.batch_size, 20);
        assert_eq!(c.optim.epochs, 60);
        assert_eq!((c.head.h_parts, c.head.v_parts), (3, 1));
        assert_eq!(c.loss.lambda, 1.0);
        assert_eq!(c.loss.epsilon, 0.1);
    }

    #[test]
    fn sections_and_overrides() {
        let text = "seed = 3\n[optim]\nepochs = 5\n[head]\nh_parts = 2\n";
        let c = RunConfig::from_text(
            text,
            &["head.components=global_only".into(), "optim.base_lr = 0.5".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.optim.epochs, 5);
        assert_eq!(c.optim.base_lr, 0.5);
        assert_eq!(c.head.h_parts, 2);
        assert_eq!(c.head.components, Components::GlobalOnly);
    }

    #[test]
    fn round_trips_through_text() {
        let mut c = RunConfig::default();
        c.protocol.gallery_aspects = vec![Aspect::DorsalRight, Aspect::PalmarLeft];
        c.backbone.last_stage_stride = 2;
        assert_eq!(RunConfig::from_text(&c.to_text(), &[]).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_text("[optim]\nepoch = 3\n", &[]).is_err());
        assert!(RunConfig::from_text("", &["loss.epsilon=1.5".into()]).is_err());
        assert!(RunConfig::from_text("", &["noequals".into()]).is_err());
        assert!(RunConfig::from_text("", &["optim.lr_gamma=0".into()]).is_err());
    }
}
