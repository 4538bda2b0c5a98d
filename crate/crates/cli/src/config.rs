//! Flat `key=value` run configuration. File values are applied first, then
//! `--set` overrides; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Every recognised key with its default. An empty default means "derived
/// from other keys" (see the accessors below).
pub const KEYS: &[(&str, &str)] = &[
    ("seed", ""),
    // dataset
    ("count", "4"),
    ("d", "4"),
    ("ell", "2"),
    ("smoothness", "2"),
    ("bound", "1"),
    ("T", "1"),
    ("support", ""),
    ("dt", "0.125"),
    ("N", "2"),
    ("harmonics", "5"),
    ("amplitude", "1"),
    ("offset", "0"),
    ("decoder", "random"),
    ("decoder_seed", "7"),
    ("D", "16"),
    // flow
    ("s", "2"),
    ("sigma_min", "0.01"),
    ("alpha", "10"),
    ("normalization", "hippo"),
    ("origin_correction", "true"),
    // fit
    ("s_sweep", "2,4,8,16"),
    ("delta", "0.05"),
    ("eps2_samples", "10000"),
    // net
    ("width", "32"),
    ("blocks", "4"),
    ("heads", "2"),
    ("head_dim", "1"),
    ("ff_width", "64"),
    ("net_seed", ""),
    // train
    ("mode", "flow_matching"),
    ("batch", "128"),
    ("steps", "2000"),
    ("lr", "0.003"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("epsilon", "1e-8"),
    ("trainable", "all"),
    // eval
    ("eval_fps", ""),
    ("eval_horizon", ""),
    ("ode_steps", "256"),
    ("eval_noise", "1"),
    ("noise_seed", ""),
    // ablate
    ("ablate_steps", "1000"),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl Settings {
    pub fn parse_text(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut s = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| validation(format!("{origin}:{}: expected key=value, got {line:?}", no + 1)))?;
            s.set(k.trim(), v.trim())
                .map_err(|e| validation(format!("{origin}:{}: {e}", no + 1)))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Missing(format!("config {}: {e}", path.display())))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(validation(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| validation(format!("--set expects key=value, got {kv:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        if let Some(v) = self.values.get(key) {
            return Some(v);
        }
        KEYS.iter()
            .find(|(k, _)| *k == key)
            .map(|(_, d)| *d)
            .filter(|d| !d.is_empty())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self
            .raw(key)
            .ok_or_else(|| validation(format!("config key {key:?} has no value")))?;
        raw.parse()
            .map_err(|_| validation(format!("config key {key:?}: cannot parse {raw:?}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, fallback: T) -> Result<T, CliError> {
        if self.raw(key).is_some() {
            self.get(key)
        } else {
            Ok(fallback)
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.raw(key).unwrap_or("");
        raw.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| validation(format!("config key {key:?}: cannot parse {p:?}")))
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        if self.raw("seed").is_none() {
            return Err(validation("a seed is required (--seed or seed=...)"));
        }
        self.get("seed")
    }

    /// Resolved configuration with defaults filled in, one key per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            if let Some(v) = self.raw(k) {
                writeln!(out, "{k}={v}").unwrap();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_overrides() {
        let mut s = Settings::parse_text("# header\nd = 3 # latent\nlr=0.01\n\n", "test").unwrap();
        assert_eq!(s.get::<usize>("d").unwrap(), 3);
        s.apply_override("d=5").unwrap();
        assert_eq!(s.get::<usize>("d").unwrap(), 5);
        assert_eq!(s.get::<f64>("lr").unwrap(), 0.01);
        assert_eq!(s.get::<usize>("count").unwrap(), 4);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(
            Settings::parse_text("bogus=1", "t"),
            Err(CliError::Validation(_))
        ));
        assert!(Settings::default().apply_override("nope=2").is_err());
        assert!(Settings::default().apply_override("d").is_err());
    }

    #[test]
    fn seed_is_required_and_derived_keys_fall_back() {
        let mut s = Settings::default();
        assert!(s.seed().is_err());
        assert_eq!(s.get_or("support", 4.0).unwrap(), 4.0);
        s.set("seed", "9").unwrap();
        assert_eq!(s.seed().unwrap(), 9);
        assert_eq!(s.get_list::<usize>("s_sweep").unwrap(), vec![2, 4, 8, 16]);
        assert!(s.render().contains("seed=9\n"));
    }
}
