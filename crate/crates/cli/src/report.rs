//! The `summary.json` artifact.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use driftbench_core::eval::{aggregate, EpisodeResult, Stat};
use driftbench_core::learners::LearnerKind;
use serde::{Deserialize, Deserializer, Serialize};

use crate::config::{RunConfig, Split};
use crate::{io_err, HarnessError, Result};

pub const ARTIFACT: &str = "driftbench-summary";

/// Fields excluded when comparing two summaries for determinism.
pub const VOLATILE_FIELDS: [&str; 1] = ["generated_at"];

/// Metrics accepted by [`Summary::metric`].
pub const METRICS: [&str; 3] = ["o_avg", "f_avg", "f_avg_paper_literal"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LastEnvironment {
    pub online: Option<f64>,
    pub forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub artifact: String,
    pub version: String,
    pub learner: LearnerKind,
    pub split: Split,
    pub seed: u64,
    pub episodes: usize,
    pub environments: usize,
    pub o_avg: Option<Stat>,
    pub o_avg_pooled: Option<f64>,
    /// Absent for learners that do not report forgetting, `null` when
    /// undefined (a single environment).
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "present")]
    pub f_avg: Option<Option<Stat>>,
    #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "present")]
    pub f_avg_paper_literal: Option<Option<Stat>>,
    pub online_curve: Vec<Option<f64>>,
    pub forgetting_curve: Vec<Option<f64>>,
    pub last_environment: LastEnvironment,
    pub warnings: Vec<String>,
    pub embedding_sha256: String,
    pub config: serde_json::Value,
    pub generated_at: u64,
}

fn present<'de, D, T>(d: D) -> std::result::Result<Option<Option<T>>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d).map(Some)
}

impl Summary {
    pub fn build(config: &RunConfig, results: &[EpisodeResult], embedding_sha256: String) -> Result<Summary> {
        let m = aggregate(results)?;
        let reports = results.iter().all(|r| r.reports_forgetting);
        let mut echo = serde_json::to_value(config).expect("config serializes");
        if let Some(map) = echo.as_object_mut() {
            map.remove("output_dir");
        }
        Ok(Summary {
            artifact: ARTIFACT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            learner: config.learner.name,
            split: config.split,
            seed: config.world.seed,
            episodes: m.episodes,
            environments: m.online_curve.len(),
            o_avg: m.o_avg,
            o_avg_pooled: m.o_avg_pooled,
            f_avg: reports.then_some(m.f_avg),
            f_avg_paper_literal: reports.then_some(m.f_avg_paper_literal),
            online_curve: m.online_curve,
            forgetting_curve: m.forgetting_curve,
            last_environment: LastEnvironment {
                online: m.last_online,
                forgetting: m.last_forgetting,
            },
            warnings: m.warnings,
            embedding_sha256,
            config: echo,
            generated_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Summary> {
        let summary: Summary = serde_json::from_str(text).map_err(|e| HarnessError::Summary(e.to_string()))?;
        if summary.artifact != ARTIFACT {
            return Err(HarnessError::Summary(format!(
                "not a driftbench summary (artifact = {:?})",
                summary.artifact
            )));
        }
        Ok(summary)
    }

    pub fn load(path: &Path) -> Result<Summary> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Summary(m) => HarnessError::Summary(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// JSON form with the volatile fields removed.
    pub fn stable_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("summary serializes");
        if let Some(map) = v.as_object_mut() {
            for f in VOLATILE_FIELDS {
                map.remove(f);
            }
        }
        v
    }

    pub fn metric(&self, name: &str) -> Result<Stat> {
        let value = match name {
            "o_avg" => Some(self.o_avg),
            "f_avg" => self.f_avg,
            "f_avg_paper_literal" => self.f_avg_paper_literal,
            other => {
                return Err(HarnessError::Usage(format!(
                    "unknown metric `{other}`; expected one of {}",
                    METRICS.join(", ")
                )))
            }
        };
        match value {
            None => Err(HarnessError::Summary(format!("{} does not report {name}", self.learner))),
            Some(None) => Err(HarnessError::Summary(format!("{name} is undefined for {}", self.learner))),
            Some(Some(stat)) => Ok(stat),
        }
    }
}
