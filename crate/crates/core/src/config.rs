// SPDX-License-Identifier: Apache-2.0

//! Pipeline configuration file (TOML). Every key is optional; missing keys
//! take the defaults shown in `config/default.toml`. Relative paths are
//! resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::DEFAULT_PATCH_SIDE;
use crate::instance::{ClusterParams, GroundParams};
use crate::range_image::{ChannelConfig, ProjectionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceMode {
    /// Angle-criterion clustering of non-ground returns.
    #[default]
    Clustered,
    /// One proposal per labeled instance.
    Gt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub channels: Vec<String>,
    pub patch_side: usize,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            channels: vec!["I".into(), "HNV".into(), "VNV".into()],
            patch_side: DEFAULT_PATCH_SIDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// LCNW weight file. Without one the network is initialized from `seed`.
    pub weights: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory holding `sequences/<seq>/velodyne/*.bin`.
    pub root: Option<PathBuf>,
    /// Raw id to class table; the built-in SemanticKITTI table when unset.
    pub class_map: Option<PathBuf>,
    /// Empty selects every sequence directory.
    pub sequences: Vec<String>,
    /// Scan stems such as `000042`; empty selects all.
    pub scans: Vec<String>,
    pub instances: InstanceMode,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// 0 uses every available core.
    pub workers: usize,
    /// Detections and metrics are written here when set.
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub projection: ProjectionConfig,
    pub ground: GroundParams,
    pub cluster: ClusterParams,
    pub features: FeatureSection,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub run: RunSection,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses and validates `path`, resolving relative paths against its
    /// parent directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.model.weights);
        fix(&mut self.dataset.root);
        fix(&mut self.dataset.class_map);
        fix(&mut self.run.output);
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        self.ground.validate()?;
        self.cluster.validate()?;
        self.channel_config()?;
        if self.features.patch_side < 4 || !self.features.patch_side.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "patch_side {} must be a positive multiple of 4",
                self.features.patch_side
            )));
        }
        Ok(())
    }

    pub fn channel_config(&self) -> Result<ChannelConfig> {
        ChannelConfig::from_names(&self.features.channels)
            .map_err(|e| Error::Config(format!("features.channels: {e}")))
    }

    /// Fails when a configured input path is missing.
    pub fn check_paths(&self) -> Result<()> {
        let inputs = [
            ("model.weights", &self.model.weights),
            ("dataset.root", &self.dataset.root),
            ("dataset.class_map", &self.dataset.class_map),
        ];
        for (key, p) in inputs {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
