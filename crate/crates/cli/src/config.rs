use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use gradient_atoms::{
    CoherenceConfig, DictConfig, ProjectionConfig, SteerConfig, Task, TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub per_task_count: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            per_task_count: 250,
        }
    }
}

/// Steering stage settings: which behaviors to steer and how atoms are picked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteerStageConfig {
    #[serde(flatten)]
    pub sweep: SteerConfig,
    pub tasks: Vec<Task>,
    /// Prompts per evaluation suite.
    pub suite_count: usize,
    /// Minimum share of an atom's top documents that must come from the task.
    pub min_purity: f64,
}

impl Default for SteerStageConfig {
    fn default() -> Self {
        SteerStageConfig {
            sweep: SteerConfig::default(),
            tasks: vec![Task::Refuse, Task::List],
            suite_count: 100,
            min_purity: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub penalties: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            penalties: vec![0.01, 0.1, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub workspace: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            workspace: PathBuf::from("workspace"),
        }
    }
}

/// The whole pipeline configuration. Every field has a desk-scale default,
/// so `{}` is a valid config file.
///
/// `seed` drives corpus generation and the steering evaluation suites; the
/// model and dictionary keep their own seeds under `train` and `dict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub projection: ProjectionConfig,
    pub dict: DictConfig,
    pub coherence: CoherenceConfig,
    pub steer: SteerStageConfig,
    pub sweep: SweepConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            projection: ProjectionConfig::default(),
            dict: DictConfig::default(),
            coherence: CoherenceConfig::default(),
            steer: SteerStageConfig::default(),
            sweep: SweepConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("parsing pipeline config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Applies `key.path=value` overrides. Values are parsed as JSON when
    /// possible and taken as plain strings otherwise, so `dict.penalty=0.2`
    /// and `paths.workspace=/tmp/ws` both work.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut tree = serde_json::to_value(&self)?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| anyhow!("override {raw:?} is not key=value"))?;
            let value =
                serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            set_path(&mut tree, key, value).with_context(|| format!("override {raw:?}"))?;
        }
        serde_json::from_value(tree).context("config after overrides")
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.per_task_count == 0 {
            bail!("corpus.per_task_count must be positive");
        }
        self.train.validate()?;
        self.dict.validate()?;
        self.coherence.validate()?;
        self.steer.sweep.validate()?;
        if !(0.0..=1.0).contains(&self.steer.min_purity) {
            bail!("steer.min_purity must lie in [0, 1]");
        }
        if self
            .sweep
            .penalties
            .iter()
            .any(|p| !(*p >= 0.0) || !p.is_finite())
        {
            bail!("sweep penalties must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn workspace(&self) -> &Path {
        &self.paths.workspace
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("{:?} is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                bail!("unknown config key {key:?}");
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| anyhow!("unknown config key {key:?}"))?;
    }
    unreachable!("split always yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_the_default() {
        assert_eq!(
            PipelineConfig::from_json("{}").unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = PipelineConfig::default()
            .with_overrides(&[
                "dict.penalty=0.25",
                "paths.workspace=/tmp/x",
                "steer.tasks=[\"list\"]",
            ])
            .unwrap();
        assert_eq!(cfg.dict.penalty, 0.25);
        assert_eq!(cfg.paths.workspace, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.steer.tasks, vec![Task::List]);
        assert!(PipelineConfig::default()
            .with_overrides(&["dict.nope=1"])
            .is_err());
        assert!(PipelineConfig::default().with_overrides(&["dict"]).is_err());
    }

    #[test]
    fn flattened_steer_fields_round_trip() {
        let cfg = PipelineConfig::default()
            .with_overrides(&["steer.max_len=5"])
            .unwrap();
        assert_eq!(cfg.steer.sweep.max_len, 5);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
    }
}
