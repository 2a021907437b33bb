//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use usm_core::optimizer::OptimConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// `analytic` or `mlp:<path>`.
    pub decoder: String,
    /// Worker cap; never affects results, so it is not echoed into outputs.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    #[serde(flatten)]
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            decoder: "analytic".into(),
            threads: None,
            optim: OptimConfig::default(),
        }
    }
}

/// Flags that can override file values. `None` leaves the lower layer alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub decoder: Option<String>,
    pub threads: Option<usize>,
    pub iters: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub surface_weight: Option<f64>,
    pub render_weight: Option<f64>,
    pub latent_weight: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
        let known = toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        let mut unknown = Vec::new();
        unknown_keys(&table, &known, "", &mut unknown);
        unknown.retain(|k| k != "threads");
        if !unknown.is_empty() {
            return Err(CliError::Usage(format!("config: unknown keys {}", unknown.join(", "))));
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Default, then the optional file, then the flags.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.decoder {
            self.decoder = d.clone();
        }
        if o.threads.is_some() {
            self.threads = o.threads;
        }
        let opt = &mut self.optim;
        if let Some(v) = o.iters {
            opt.iters = v;
        }
        if let Some(v) = o.lr {
            opt.lr = v;
        }
        if let Some(v) = o.seed {
            opt.seed = v;
        }
        if let Some(v) = o.surface_weight {
            opt.weights.surface = v;
        }
        if let Some(v) = o.render_weight {
            opt.weights.render = v;
        }
        if let Some(v) = o.latent_weight {
            opt.weights.latent = v;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.threads == Some(0) {
            return Err(CliError::Usage("threads must be at least 1".into()));
        }
        if self.decoder != "analytic" && !self.decoder.starts_with("mlp:") {
            return Err(CliError::Usage(format!(
                "decoder {:?} is neither \"analytic\" nor \"mlp:<path>\"",
                self.decoder
            )));
        }
        self.optim.validate().map_err(|e| CliError::Usage(e.to_string()))
    }
}

fn unknown_keys(given: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in given {
        let path = format!("{prefix}{key}");
        match (known.get(key), value) {
            (None, _) => out.push(path),
            (Some(toml::Value::Table(k)), toml::Value::Table(g)) => unknown_keys(g, k, &format!("{path}."), out),
            _ => {}
        }
    }
}
