//! `key = value` configuration (TOML). Every key is optional; missing keys
//! take the reference defaults, unknown keys are errors.
//!
//! ```toml
//! [arch]
//! in_channels = 1
//! class_count = 2
//! skip_mode = "concat"
//!
//! [train]
//! seed = 7
//! max_epochs = 50
//! adam = { lr = 1e-3 }
//!
//! [[regions.region]]
//! name = "whole"
//! classes = [1, 2]
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vseg_core::{ArchSpec, RegionMap, TrainConfig};

use crate::error::{io_err, CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub arch: ArchSpec,
    /// `train.seed` is the master seed; every other seed is derived from it.
    pub train: TrainConfig,
    /// Evaluation regions; one region per foreground class when absent.
    pub regions: Option<RegionMap>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::parse(&fs::read_to_string(p).map_err(io_err(p))?),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        if let Some(r) = &self.regions {
            r.validate(self.arch.class_count)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn regions(&self) -> RegionMap {
        self.regions
            .clone()
            .unwrap_or_else(|| RegionMap::per_class(self.arch.class_count))
    }
}

/// Region map file: a list of `[[region]]` tables with `name` and `classes`.
pub fn load_region_map(path: &Path) -> Result<RegionMap> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
