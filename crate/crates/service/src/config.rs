//! TOML run configuration.
//!
//! ```toml
//! [generation]
//! variations_per_region = 4
//! similarity_threshold = 0.75
//!
//! [regions]
//! low = 0.15
//! high = 0.30
//!
//! [backends]
//! mode = "http"
//! [backends.inpaint]
//! endpoint = "http://gpu-box:8000"
//! ```

use std::path::Path;

use augment_core::backend::{BackendConfig, Backends};
use augment_core::engine::GenerationConfig;
use augment_core::{BackendKind, CoverageBand, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub mode: BackendMode,
    pub inpaint: Option<BackendConfig>,
    pub embed: Option<BackendConfig>,
    pub segment: Option<BackendConfig>,
}

impl BackendSettings {
    fn http_config(&self, kind: BackendKind) -> Result<BackendConfig> {
        let section = match kind {
            BackendKind::Inpaint => &self.inpaint,
            BackendKind::Embed => &self.embed,
            BackendKind::Segment => &self.segment,
        };
        match section {
            Some(cfg) => Ok(cfg.clone().with_env_override(kind)),
            None => match std::env::var(kind.env_var()) {
                Ok(url) if !url.is_empty() => Ok(BackendConfig::new(url)),
                _ => Err(Error::Config(format!(
                    "no endpoint for the {kind} backend: add [backends.{kind}] or set {}",
                    kind.env_var()
                ))),
            },
        }
    }

    pub fn build(&self) -> Result<Backends> {
        match self.mode {
            BackendMode::Mock => Ok(Backends::mock()),
            BackendMode::Http => Backends::http(
                self.http_config(BackendKind::Inpaint)?,
                self.http_config(BackendKind::Embed)?,
                self.http_config(BackendKind::Segment)?,
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub generation: GenerationConfig,
    pub regions: CoverageBand,
    pub backends: BackendSettings,
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Settings = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        CoverageBand::new(self.regions.low, self.regions.high)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Settings::from_toml("").unwrap(), Settings::default());
    }

    #[test]
    fn partial_sections() {
        let s = Settings::from_toml(
            "[generation]\nsimilarity_threshold = 0.6\n\n[backends]\nmode = \"http\"\n[backends.inpaint]\nendpoint = \"http://a:1\"\nmax_in_flight = 8\n",
        )
        .unwrap();
        assert_eq!(s.generation.similarity_threshold, 0.6);
        assert_eq!(s.generation.max_attempts, 5);
        let inpaint = s.backends.inpaint.unwrap();
        assert_eq!(inpaint.max_in_flight, 8);
        assert_eq!(inpaint.max_retries, 2);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Settings::from_toml("[generation]\nsimilarity_threshold = 2.0\n").is_err());
        assert!(Settings::from_toml("[regions]\nlow = 0.4\nhigh = 0.3\n").is_err());
        assert!(Settings::from_toml("[nonsense]\n").is_err());
    }
}
