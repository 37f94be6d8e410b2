//! The run configuration: one JSON document plus `--set` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use velopref_core::medirl::TrainConfig;
use velopref_core::rollout::RolloutMode;
use velopref_core::trajectory::{FilterRules, MatchParams};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Where every stage reads and writes its artifacts.
    pub out_dir: PathBuf,
    /// Every stochastic component derives its seed from this one.
    #[serde(default)]
    pub seed: u64,
    pub world: WorldSource,
    #[serde(default)]
    pub trajectories: TrajectorySource,
    #[serde(default)]
    pub filter: FilterRules,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub rollout: RolloutOptions,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default)]
    pub explain: ExplainOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WorldSource {
    Synthetic(SyntheticWorld),
    File(WorldFileSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWorld {
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub blocked_fraction: f64,
    pub feature_dim: usize,
    /// Linear weights of the planted reward before min-max scaling.
    pub planted_weights: Vec<f64>,
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
}

fn default_cell_size() -> f64 {
    velopref_core::env::DEFAULT_CELL_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFileSource {
    /// `.json` world file or `.csv` cell table.
    pub path: PathBuf,
    /// Min-max scale raw feature columns (JSON worlds only).
    #[serde(default)]
    pub normalize: bool,
    /// Cell size for CSV worlds, meters.
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySource {
    /// Simulated demonstrations under the planted reward.
    Synthetic(ExpertOptions),
    /// Recorded GPS trips, map matched and filtered.
    Raw(RawTripOptions),
}

impl Default for TrajectorySource {
    fn default() -> Self {
        TrajectorySource::Synthetic(ExpertOptions::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertOptions {
    pub trips: usize,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    /// Minimum Chebyshev separation of origin and destination, in cells.
    pub min_od_cells: usize,
    /// Planted rewards become `scale * planted + offset`; they must stay
    /// well below zero for agents to head for their goals.
    pub reward_scale: f64,
    pub reward_offset: f64,
    pub gamma: f64,
    pub max_steps: usize,
}

impl Default for ExpertOptions {
    fn default() -> Self {
        ExpertOptions {
            trips: 2000,
            train_pairs: 50,
            holdout_pairs: 200,
            min_od_cells: 5,
            reward_scale: 2.0,
            reward_offset: -5.0,
            gamma: 0.99,
            max_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTripOptions {
    pub path: PathBuf,
    #[serde(default, rename = "match")]
    pub matching: MatchParams,
    /// Share of kept trips held out for evaluation.
    #[serde(default = "default_holdout_fraction")]
    pub holdout_fraction: f64,
}

fn default_holdout_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutOptions {
    pub mode: RolloutMode,
    pub max_steps: usize,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions { mode: RolloutMode::Greedy, max_steps: 1000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Keep pairs whose synthetic rollout never reached its goal.
    pub include_non_terminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainOptions {
    pub background: usize,
    /// Orderings per instance when there are too many features to enumerate.
    pub samples: usize,
    /// Held-out trips to attribute step by step.
    pub local_trips: usize,
    /// Named feature groups for the summary table.
    pub groups: BTreeMap<String, Vec<usize>>,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        ExplainOptions {
            background: velopref_core::explain::DEFAULT_BACKGROUND,
            samples: 1000,
            local_trips: 5,
            groups: BTreeMap::new(),
        }
    }
}

/// Seed for one named component, derived from the global seed.
pub fn derive_seed(global: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(component.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Applies `key=value` to a JSON tree. Dotted keys descend into objects,
/// creating them as needed; the value is parsed as JSON when possible and
/// taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            _ => {
                return Err(CliError::Config(format!(
                    "override key `{key}`: `{}` is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = obj.entry((*part).to_owned()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}

impl RunConfig {
    /// Parses a config document, applies overrides in order, and resolves
    /// relative paths against `base`.
    pub fn from_json(text: &str, overrides: &[String], base: &Path) -> Result<RunConfig> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(format!("reading config {}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_json(&text, overrides, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let WorldSource::File(f) = &mut self.world {
            fix(&mut f.path);
        }
        if let TrajectorySource::Raw(r) = &mut self.trajectories {
            fix(&mut r.path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.world {
            WorldSource::Synthetic(s) => {
                if s.planted_weights.len() != s.feature_dim {
                    return Err(CliError::Config(format!(
                        "world.synthetic.planted_weights has {} entries, feature_dim is {}",
                        s.planted_weights.len(),
                        s.feature_dim
                    )));
                }
            }
            WorldSource::File(f) => {
                if !f.path.is_file() {
                    return Err(CliError::Config(format!("world.file.path {} does not exist", f.path.display())));
                }
            }
        }
        match &self.trajectories {
            TrajectorySource::Synthetic(e) => {
                if matches!(self.world, WorldSource::File(_)) {
                    return Err(CliError::Config(
                        "trajectories.synthetic needs a synthetic world with a planted reward".into(),
                    ));
                }
                if e.train_pairs == 0 || e.holdout_pairs == 0 {
                    return Err(CliError::Config("trajectories.synthetic needs train_pairs and holdout_pairs > 0".into()));
                }
                if !(e.gamma > 0.0 && e.gamma <= 1.0) {
                    return Err(CliError::Config(format!("trajectories.synthetic.gamma must lie in (0, 1], got {}", e.gamma)));
                }
            }
            TrajectorySource::Raw(r) => {
                if !r.path.is_file() {
                    return Err(CliError::Config(format!("trajectories.raw.path {} does not exist", r.path.display())));
                }
                if !(0.0..1.0).contains(&r.holdout_fraction) {
                    return Err(CliError::Config(format!(
                        "trajectories.raw.holdout_fraction must lie in [0, 1), got {}",
                        r.holdout_fraction
                    )));
                }
            }
        }
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        if self.explain.background == 0 || self.explain.samples == 0 {
            return Err(CliError::Config("explain.background and explain.samples must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical config, leaving out the output directory so
    /// that identical runs in different places hash alike.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("out_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "out_dir": "run",
        "world": {"synthetic": {"rows": 4, "cols": 5, "feature_dim": 2, "planted_weights": [1, 0]}}
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_json(MINIMAL, &[], Path::new("/base")).unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("/base/run"));
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.trajectories, TrajectorySource::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let sets = ["train.epochs=3".to_owned(), "seed=9".to_owned(), "world.synthetic.rows=7".to_owned()];
        let cfg = RunConfig::from_json(MINIMAL, &sets, Path::new(".")).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.seed, 9);
        let WorldSource::Synthetic(s) = &cfg.world else { panic!() };
        assert_eq!(s.rows, 7);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(MINIMAL, &["train.epoch=3".to_owned()], Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("`epoch`"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn malformed_override_rejected() {
        assert!(RunConfig::from_json(MINIMAL, &["train.epochs".to_owned()], Path::new(".")).is_err());
        assert!(RunConfig::from_json(MINIMAL, &["seed.x=1".to_owned()], Path::new(".")).is_err());
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = RunConfig::from_json(MINIMAL, &[], Path::new("/a")).unwrap();
        let b = RunConfig::from_json(MINIMAL, &[], Path::new("/b")).unwrap();
        let c = RunConfig::from_json(MINIMAL, &["seed=1".to_owned()], Path::new("/a")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn derived_seeds_differ_by_component() {
        assert_ne!(derive_seed(1, "world"), derive_seed(1, "experts"));
        assert_eq!(derive_seed(1, "world"), derive_seed(1, "world"));
    }
}
