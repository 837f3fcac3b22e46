//! Run configuration, parsed strictly from TOML.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use driftbench_core::eval::EvalConfig;
use driftbench_core::learners::LearnerConfig;
use driftbench_core::world::WorldConfig;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(HarnessError::Config(format!(
                "unknown split `{other}`; expected train, val or test"
            ))),
        }
    }
}

/// Half-open episode-seed ranges per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRanges {
    pub train: [u64; 2],
    pub val: [u64; 2],
    pub test: [u64; 2],
}

impl Default for SplitRanges {
    fn default() -> Self {
        SplitRanges {
            train: [0, 1_000_000],
            val: [1_000_000, 2_000_000],
            test: [2_000_000, 3_000_000],
        }
    }
}

impl SplitRanges {
    pub fn range(&self, split: Split) -> Range<u64> {
        let [start, end] = match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        };
        start..end
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let all = [Split::Train, Split::Val, Split::Test];
        for s in all {
            let r = self.range(s);
            if r.start >= r.end {
                return Err(HarnessError::Config(format!("{s} seed range {r:?} is empty")));
            }
        }
        for (k, &a) in all.iter().enumerate() {
            for &b in &all[k + 1..] {
                let (ra, rb) = (self.range(a), self.range(b));
                if ra.start < rb.end && rb.start < ra.end {
                    return Err(HarnessError::Config(format!(
                        "{a} seeds {ra:?} overlap {b} seeds {rb:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The first `count` seeds of `split`.
    pub fn seeds(&self, split: Split, count: usize) -> Result<Vec<u64>, HarnessError> {
        let r = self.range(split);
        if (r.end - r.start) < count as u64 {
            return Err(HarnessError::Config(format!(
                "{split} split holds {} seeds, {count} requested",
                r.end - r.start
            )));
        }
        Ok((r.start..r.start + count as u64).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub bias: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig { dim: 512, bias: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTrainSettings {
    /// Episode budget; one optimizer step per episode.
    pub episodes: usize,
    pub lr: f64,
}

impl Default for MetaTrainSettings {
    fn default() -> Self {
        MetaTrainSettings {
            episodes: 200,
            lr: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    /// Training-split episodes pooled into the offline dataset.
    pub episodes: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            episodes: 48,
            steps: 500,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Evaluation episodes `K`.
    pub episodes: usize,
    pub split: Split,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub embedding: EmbeddingConfig,
    pub learner: LearnerConfig,
    pub eval: EvalConfig,
    pub splits: SplitRanges,
    pub meta_train: MetaTrainSettings,
    pub pretrain: PretrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            episodes: 20,
            split: Split::Test,
            output_dir: PathBuf::from("out"),
            world: WorldConfig::default(),
            embedding: EmbeddingConfig::default(),
            learner: LearnerConfig::default(),
            eval: EvalConfig::default(),
            splits: SplitRanges::default(),
            meta_train: MetaTrainSettings::default(),
            pretrain: PretrainSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Reads `path` (or starts from defaults) and applies `key.path=value`
    /// overrides; values are TOML literals, bare words are taken as strings.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| {
                HarnessError::Config(format!("override `{item}` has an empty key"))
            })?;
            let mut table = &mut doc;
            for part in parts {
                let entry = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| HarnessError::Config(format!("`{part}` in `{key}` is not a table")))?;
            }
            table.insert(last.to_string(), value);
        }
        doc.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.episodes == 0 {
            return Err(HarnessError::Config("episodes must be positive".into()));
        }
        if self.embedding.dim == 0 {
            return Err(HarnessError::Config("embedding.dim must be positive".into()));
        }
        self.world.validate()?;
        self.learner.validate()?;
        self.splits.validate()?;
        self.splits.seeds(self.split, self.episodes)?;
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("episodes = 3\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[world]\nfeature_dims = 3\n").is_err());
        assert!(RunConfig::from_toml("[learner]\nname = \"oap\"\nlamda = 2.0\n").is_err());
    }

    #[test]
    fn partial_tables_take_defaults() {
        let c = RunConfig::from_toml("[world]\nfeature_dim = 16\n[learner]\nname = \"cpm-lite\"\nalpha_min = \"inverse-count\"\n")
            .unwrap();
        assert_eq!(c.world.feature_dim, 16);
        assert_eq!(c.world.frames_per_env, 100);
        assert_eq!(c.learner.name, driftbench_core::learners::LearnerKind::CpmLite);
        c.validate().unwrap();
    }

    #[test]
    fn overlapping_splits_fail() {
        let c = RunConfig::from_toml("[splits]\ntrain = [0, 100]\ntest = [50, 200]\nval = [300, 400]\n").unwrap();
        assert!(matches!(c.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn too_many_episodes_for_split() {
        let c = RunConfig::from_toml("episodes = 11\n[splits]\ntest = [5000000, 5000010]\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_apply_typed_values() {
        let sets = [
            "world.noise_sigma=0.25".to_string(),
            "learner.name=lwf".to_string(),
            "episodes=3".to_string(),
            "learner.alpha_min=\"inverse-count\"".to_string(),
        ];
        let c = RunConfig::load_with_overrides(None, &sets).unwrap();
        assert_eq!(c.world.noise_sigma, 0.25);
        assert_eq!(c.learner.name, driftbench_core::learners::LearnerKind::Lwf);
        assert_eq!(c.episodes, 3);
        assert!(RunConfig::load_with_overrides(None, &["world.bogus=1".into()]).is_err());
        assert!(RunConfig::load_with_overrides(None, &["episodes".into()]).is_err());
    }
}
