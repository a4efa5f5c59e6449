use std::path::Path;

use anyhow::Context as _;
use face3d::candidates::DetectionConfig;
use face3d::pose_regression::PoseRegConfig;
use face3d::psm::PsmTrainConfig;
use face3d::synth::{Proposals, SceneSpec};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeSection {
    pub n_outer: usize,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for ShapeSection {
    fn default() -> Self {
        Self { n_outer: 100, restarts: 4, max_iter: 1000 }
    }
}

/// Parameter sets shared by all commands. Each command reads the sections it
/// needs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub detection: DetectionConfig,
    pub proposals: Proposals,
    pub psm: PsmTrainConfig,
    pub posereg: PoseRegConfig,
    pub shape: ShapeSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> face3d::Result<()> {
        self.scene.validate()?;
        self.detection.validate()?;
        self.psm.validate()?;
        if self.posereg.bins == 0 || self.posereg.epochs == 0 {
            return Err(face3d::Error::InvalidConfig("posereg bins and epochs must be positive".into()));
        }
        if self.shape.n_outer == 0 || self.shape.restarts == 0 || self.shape.max_iter == 0 {
            return Err(face3d::Error::InvalidConfig("shape iteration counts must be positive".into()));
        }
        Ok(())
    }
}
