//! Service configuration: a TOML or JSON file plus `FEATPIPE_*` overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use featpipe_core::pipeline::FeatureSource;
use featpipe_core::pixelclf::ClassifierKind;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{BackendParams, BackendSpec};
use crate::error::invalid;

pub const ENV_PREFIX: &str = "FEATPIPE_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiConfig {
    pub bind: String,
    pub session_root: PathBuf,
    /// Featurization jobs running at once.
    pub workers: usize,
    pub backend: String,
    pub patch_size: u32,
    pub stride: u32,
    pub hidden_dim: Option<u32>,
    pub input_multiple: Option<u32>,
    pub model_path: Option<PathBuf>,
    pub input_name: String,
    /// `identity`, `standard`, `shifts`, `flips` or a JSON file.
    pub transform_set: String,
    pub feature_source: FeatureSource,
    pub classifier: ClassifierKind,
    /// Working resolution `[height, width]` images are resized to.
    pub target_size: Option<(usize, usize)>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            session_root: PathBuf::from("sessions"),
            workers: 2,
            backend: "synthetic:patch-mean+center-attention".into(),
            patch_size: 8,
            stride: 4,
            hidden_dim: None,
            input_multiple: None,
            model_path: None,
            input_name: "pixel_values".into(),
            transform_set: "standard".into(),
            feature_source: FeatureSource::Deep,
            classifier: ClassifierKind::Logistic,
            target_size: None,
        }
    }
}

impl ApiConfig {
    /// Reads `path` (by extension: `.json`, otherwise TOML), applies
    /// environment overrides and validates.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> anyhow::Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("config {}: {e}", p.display())))?;
                if p.extension().is_some_and(|e| e == "json") {
                    serde_json::from_str::<Value>(&text).map_err(|e| invalid(format!("config {}: {e}", p.display())))?
                } else {
                    let t: toml::Table = toml::from_str(&text).map_err(|e| invalid(format!("config {}: {e}", p.display())))?;
                    serde_json::to_value(t).expect("toml maps to json")
                }
            }
            None => Value::Object(Default::default()),
        };
        let Value::Object(map) = &mut doc else {
            return Err(invalid("config: top level must be a table"));
        };
        let known = serde_json::to_value(Self::default()).expect("config serializes");
        let known = known.as_object().expect("object");
        for (key, raw) in env {
            let Some(field) = key.strip_prefix(ENV_PREFIX) else { continue };
            let field = field.to_ascii_lowercase();
            if !known.contains_key(&field) {
                continue;
            }
            let value = serde_json::from_str::<Value>(&raw).unwrap_or(Value::String(raw));
            // Quoting a plain string is optional, but a number given for a string field stays a string.
            let value = match (&known[&field], value) {
                (Value::String(_), Value::Number(n)) => Value::String(n.to_string()),
                (_, v) => v,
            };
            map.insert(field, value);
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.bind
            .parse::<SocketAddr>()
            .map_err(|e| invalid(format!("bind: {:?} is not a socket address ({e})", self.bind)))?;
        if self.workers == 0 {
            return Err(invalid("workers: must be at least 1"));
        }
        if self.session_root.as_os_str().is_empty() {
            return Err(invalid("session_root: must not be empty"));
        }
        let spec: BackendSpec = self.backend.parse().map_err(|e| invalid(format!("backend: {e}")))?;
        if matches!(spec, BackendSpec::Precomputed { .. }) {
            return Err(invalid("backend: precomputed features cannot serve uploaded images"));
        }
        self.backend_params().check()?;
        if let BackendSpec::External { .. } = spec {
            if self.hidden_dim.is_none() {
                return Err(invalid("hidden_dim: required for external backends"));
            }
            match &self.model_path {
                None => return Err(invalid("model_path: required for external backends")),
                Some(p) if !p.is_file() => return Err(invalid(format!("model_path: {} is not a file", p.display()))),
                _ => {}
            }
        }
        if let Some((h, w)) = self.target_size {
            let m = self.input_multiple.unwrap_or(self.stride) as usize;
            if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
                return Err(invalid(format!("target_size: {h}x{w} is not a positive multiple of {m}")));
            }
        }
        crate::backend::transform_set(&self.transform_set, self.stride)
            .map_err(|e| invalid(format!("transform_set: {e}")))?;
        Ok(())
    }

    pub fn backend_spec(&self) -> BackendSpec {
        self.backend.parse().expect("validated")
    }

    pub fn backend_params(&self) -> BackendParams {
        BackendParams {
            patch_size: self.patch_size,
            stride: self.stride,
            hidden_dim: self.hidden_dim,
            input_multiple: self.input_multiple,
            model: self.model_path.clone(),
            input_name: self.input_name.clone(),
            args: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_valid() {
        ApiConfig::default().validate().unwrap();
        assert_eq!(ApiConfig::load(None, env(&[])).unwrap(), ApiConfig::default());
    }

    #[test]
    fn toml_json_and_env_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "workers = 3\nstride = 2\npatch_size = 4\ntarget_size = [64, 48]\n").unwrap();
        let cfg = ApiConfig::load(Some(&t), env(&[("FEATPIPE_WORKERS", "5"), ("FEATPIPE_BIND", "0.0.0.0:9"), ("HOME", "/x")])).unwrap();
        assert_eq!((cfg.workers, cfg.stride, cfg.patch_size), (5, 2, 4));
        assert_eq!(cfg.target_size, Some((64, 48)));
        assert_eq!(cfg.bind, "0.0.0.0:9");

        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"feature_source": "hybrid", "classifier": "random_forest"}"#).unwrap();
        let cfg = ApiConfig::load(Some(&j), env(&[])).unwrap();
        assert_eq!(cfg.feature_source, FeatureSource::Hybrid);
        assert_eq!(cfg.classifier, ClassifierKind::RandomForest);
    }

    #[test]
    fn errors_name_the_field() {
        let cases: &[(&[(&str, &str)], &str)] = &[
            (&[("FEATPIPE_WORKERS", "0")], "workers"),
            (&[("FEATPIPE_BIND", "nowhere")], "bind"),
            (&[("FEATPIPE_BACKEND", "magic:x")], "backend"),
            (&[("FEATPIPE_STRIDE", "16")], "stride"),
            (&[("FEATPIPE_TARGET_SIZE", "[30, 32]")], "target_size"),
            (&[("FEATPIPE_TRANSFORM_SET", "bogus")], "transform_set"),
            (&[("FEATPIPE_BACKEND", "external:/bin/true")], "hidden_dim"),
            (&[("FEATPIPE_BACKEND", "external:/bin/true"), ("FEATPIPE_HIDDEN_DIM", "8")], "model_path"),
        ];
        for (vars, field) in cases {
            let err = ApiConfig::load(None, env(vars)).unwrap_err().to_string();
            assert!(err.starts_with(field), "{vars:?}: {err}");
        }
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "wokers = 3\n").unwrap();
        let err = ApiConfig::load(Some(&t), env(&[])).unwrap_err().to_string();
        assert!(err.contains("wokers"), "{err}");
    }
}
