use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use face3d::candidates::CandidateRecord;
use face3d::keypoints::KeypointType;
use face3d::pose_regression::PoseRegressor;
use face3d::shape::ShapeModel;
use face3d::synth::{Scene, SceneSpec};
use face3d::SCHEMA_VERSION;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;

pub fn error_json(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<face3d::Error>().map(face3d::Error::kind))
        .unwrap_or("error");
    let message = e.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ");
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

/// Fails before any work when an input path is missing.
pub fn check_inputs(paths: &[&Path]) -> anyhow::Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(face3d::Error::InvalidInput(format!("input file {} does not exist", p.display())).into());
        }
    }
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(face3d::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

pub struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn text(&mut self, name: &str, text: &str) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.text(name, &text)
    }

    /// Writes `manifest.json` listing everything needed to rerun the command.
    pub fn finish<A: Serialize>(mut self, command: &str, seed: u64, args: &A, config: &RunConfig) -> anyhow::Result<()> {
        let manifest = json!({
            "schema_version": SCHEMA_VERSION,
            "tool": "face3d",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "seed": seed,
            "args": args,
            "config": config,
            "outputs": self.written,
        });
        self.json("manifest.json", &manifest)
    }
}

#[derive(Serialize, Deserialize)]
pub struct SceneFile {
    pub schema_version: u32,
    pub spec: SceneSpec,
    pub shape: Value,
    pub scenes: Vec<Scene>,
}

impl SceneFile {
    pub fn new(spec: SceneSpec, shape: &ShapeModel, scenes: Vec<Scene>) -> anyhow::Result<Self> {
        Ok(Self { schema_version: SCHEMA_VERSION, spec, shape: serde_json::from_str(&shape.to_json()?)?, scenes })
    }

    pub fn load(path: &Path) -> anyhow::Result<(Self, ShapeModel)> {
        let file: Self = read_json(path)?;
        let shape = ShapeModel::from_json(&file.shape.to_string()).with_context(|| format!("shape in {}", path.display()))?;
        Ok((file, shape))
    }
}

#[derive(Serialize, Deserialize)]
pub struct RegressorFile {
    pub schema_version: u32,
    pub regressors: BTreeMap<KeypointType, PoseRegressor>,
}

impl RegressorFile {
    pub fn load(path: &Path) -> anyhow::Result<BTreeMap<KeypointType, PoseRegressor>> {
        let file: Self = read_json(path)?;
        for r in file.regressors.values() {
            r.validate().with_context(|| format!("regressor in {}", path.display()))?;
        }
        Ok(file.regressors)
    }
}

#[derive(Serialize, Deserialize)]
pub struct SceneDetections {
    pub scene: usize,
    pub generated: usize,
    pub candidates: Vec<CandidateRecord>,
    pub faces: Vec<CandidateRecord>,
}

#[derive(Serialize, Deserialize)]
pub struct DetectFile {
    pub schema_version: u32,
    pub scenes: Vec<SceneDetections>,
}
