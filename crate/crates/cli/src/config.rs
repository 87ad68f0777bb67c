use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sdtrack::association::AssociationConfig;
use sdtrack::encoder::EncoderConfig;
use sdtrack::pipeline::FusionOptions;
use sdtrack::sim::SimConfig;

/// Every tunable of a run. `seed` is the master seed: it replaces
/// `sim.seed` and seeds encoder initialization and shuffling.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub encoder: EncoderConfig,
    pub association: AssociationConfig,
    pub fusion: FusionOptions,
}

impl RunConfig {
    /// Reads `path` (or defaults), applies `key.path=value` overrides and
    /// validates the result. Values parse as JSON, falling back to a string.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            let (key, raw) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value).with_context(|| format!("applying override `{o}`"))?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).context("invalid run config")?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.sim.seed = cfg.seed;
        cfg.sim.validate()?;
        cfg.encoder.validate()?;
        if !(cfg.fusion.pad_frac >= 0.0 && cfg.fusion.pad_frac.is_finite()) {
            bail!("fusion.pad_frac must be a finite non-negative number");
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Sets a dotted path inside a JSON object, creating intermediate objects.
/// Unknown leaf keys are caught later by deserialization.
fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("empty segment in key `{key}`");
    }
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else { bail!("`{}` is not an object", parts[..i].join(".")) };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg =
            RunConfig::load(None, &["association.max_age=5".into(), "sim.motion=crossing".into()], Some(9)).unwrap();
        assert_eq!(cfg.association.max_age, 5);
        assert_eq!(cfg.sim.motion, sdtrack::sim::MotionModel::Crossing);
        assert_eq!((cfg.seed, cfg.sim.seed), (9, 9));
        assert!(RunConfig::load(None, &["association.bogus=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["no_equals".into()], None).is_err());
        assert!(RunConfig::load(None, &["encoder.resolution=20".into()], None).is_err());
    }

    #[test]
    fn echoed_config_round_trips() {
        let cfg = RunConfig::load(None, &["fusion.pad_frac=0.2".into()], None).unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
