//! Optional flat key/value configuration file. Command-line flags take
//! precedence over every value read here.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

/// Every key accepted in a configuration file.
#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub restarts: Option<usize>,
    pub perturbation: Option<f64>,
    pub max_iterations: Option<usize>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub grid_count: Option<usize>,
    pub grid_margin: Option<f64>,
    pub lengthscales: Option<Vec<f64>>,
    pub pca_dim: Option<usize>,
    pub downsample: Option<usize>,
    pub parallel: Option<bool>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
