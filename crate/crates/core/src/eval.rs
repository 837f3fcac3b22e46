//! Predict-then-update evaluation and the two stream metrics: average online
//! accuracy with seen-class masking, and average forgetting from a matrix of
//! frozen-snapshot accuracies.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::Learner;
use crate::stream::{iterate_episode, ClassId, Episode, SeenPolicy, SeenSet, StreamEvent};

/// How the per-environment forgetting values are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForgettingDenominator {
    /// Mean of `FF_i` over `i = 2..N`.
    #[default]
    Default,
    /// `FF_1 := 0` and the mean runs over `i = 1..N`.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seen_includes_unlabeled: bool,
    pub forgetting_labeled_only: bool,
    pub forgetting_denominator: ForgettingDenominator,
    /// Predict twice per frame and fail if the results differ.
    pub check_purity: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seen_includes_unlabeled: false,
            forgetting_labeled_only: false,
            forgetting_denominator: ForgettingDenominator::Default,
            check_purity: false,
        }
    }
}

impl EvalConfig {
    pub fn seen_policy(&self) -> SeenPolicy {
        if self.seen_includes_unlabeled {
            SeenPolicy::AnyOccurrence
        } else {
            SeenPolicy::LabeledOnly
        }
    }
}

/// A correct/counted pair; undefined when nothing was counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ratio {
    pub correct: usize,
    pub counted: usize,
}

impl Ratio {
    pub fn value(&self) -> Option<f64> {
        (self.counted > 0).then(|| self.correct as f64 / self.counted as f64)
    }

    fn record(&mut self, correct: bool) {
        self.counted += 1;
        self.correct += usize::from(correct);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub t: usize,
    pub env_index: usize,
    pub true_class: ClassId,
    pub predicted: Option<ClassId>,
    /// True class was in the seen set when the prediction was made.
    pub counted: bool,
    pub correct: bool,
}

/// Lower-triangular `C[i][j]` (`j <= i`): accuracy of the snapshot taken
/// after environment `i` on environment `j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForgettingMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl ForgettingMatrix {
    pub fn new(rows: Vec<Vec<Option<f64>>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Shape(format!(
                    "forgetting row {i} has {} entries, expected {}",
                    row.len(),
                    i + 1
                )));
            }
        }
        Ok(ForgettingMatrix { rows })
    }

    /// Convenience for fully defined matrices.
    pub fn from_values(rows: &[&[f64]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect())
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    /// `C_{i,j}` with 0-based indices; `None` above the diagonal or when undefined.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub online: Vec<Ratio>,
    pub forgetting_counts: Vec<Vec<Ratio>>,
    pub log: Vec<LogEntry>,
    pub reports_forgetting: bool,
}

impl EpisodeResult {
    pub fn num_environments(&self) -> usize {
        self.online.len()
    }

    pub fn forgetting_matrix(&self) -> ForgettingMatrix {
        ForgettingMatrix {
            rows: self
                .forgetting_counts
                .iter()
                .map(|r| r.iter().map(Ratio::value).collect())
                .collect(),
        }
    }

    /// Mean of the defined `O_i` of this episode.
    pub fn episode_online_average(&self) -> Option<f64> {
        mean_defined(self.online.iter().map(Ratio::value))
    }
}

/// Streams `episode` through `learner`, scoring each frame before the learner
/// sees it, and evaluates a frozen snapshot on all completed environments at
/// every environment end.
pub fn run_episode<L: Learner + ?Sized>(
    learner: &mut L,
    episode: &Episode,
    config: &EvalConfig,
) -> Result<EpisodeResult> {
    let events: Vec<StreamEvent<'_>> = iterate_episode(episode)?.collect();
    if learner.input_dim() != episode.feature_dim() {
        return Err(Error::Contract(format!(
            "learner expects {}-dimensional frames, episode has {}",
            learner.input_dim(),
            episode.feature_dim()
        )));
    }
    learner.reset_for_episode();

    let n = episode.num_environments();
    let frames_per_env = episode.frames_per_env();
    let mut seen = SeenSet::new(config.seen_policy());
    let mut online = vec![Ratio::default(); n];
    let mut forgetting_counts = Vec::with_capacity(n);
    let mut log = Vec::with_capacity(events.len());

    for (i, env_events) in events.chunks(frames_per_env).enumerate() {
        learner.on_environment_start(i);
        for event in env_events {
            let frame = event.frame;
            let prediction = learner.predict(frame);
            if config.check_purity && learner.predict(frame) != prediction {
                return Err(Error::Contract(format!("predict changed state at frame {}", frame.t)));
            }
            let counted = seen.contains(frame.true_class);
            let correct = counted && prediction.argmax == Some(frame.true_class);
            if counted {
                online[i].record(correct);
            }
            log.push(LogEntry {
                t: frame.t,
                env_index: i,
                true_class: frame.true_class,
                predicted: prediction.argmax,
                counted,
                correct,
            });
            learner.update(event)?;
            seen.observe(event);
        }

        let snapshot = learner.snapshot();
        let row = episode.environments[..=i]
            .iter()
            .map(|env| {
                let mut ratio = Ratio::default();
                for frame in &env.frames {
                    if !seen.contains(frame.true_class) || (config.forgetting_labeled_only && !frame.labeled) {
                        continue;
                    }
                    ratio.record(snapshot.predict(frame).argmax == Some(frame.true_class));
                }
                ratio
            })
            .collect();
        forgetting_counts.push(row);
    }

    Ok(EpisodeResult {
        online,
        forgetting_counts,
        log,
        reports_forgetting: learner.reports_forgetting(),
    })
}

/// `O_i^k` for 0-based environment `i`; `None` when no frame was counted.
pub fn online_accuracy(result: &EpisodeResult, i: usize) -> Result<Option<f64>> {
    result
        .online
        .get(i)
        .map(Ratio::value)
        .ok_or(Error::Range {
            index: i,
            limit: result.online.len(),
        })
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineAverages {
    /// `O_i`: mean over episodes of the defined `O_i^k`.
    pub per_env: Vec<Option<f64>>,
    /// `O_avg`: mean over environments of the defined `O_i`.
    pub o_avg: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn average_online_accuracy(results: &[EpisodeResult]) -> Result<OnlineAverages> {
    let n = results
        .first()
        .ok_or_else(|| Error::UndefinedMean("no episodes to average".into()))?
        .num_environments();
    if results.iter().any(|r| r.num_environments() != n) {
        return Err(Error::Shape("episodes differ in environment count".into()));
    }
    let mut warnings = Vec::new();
    let per_env: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let o = mean_defined(results.iter().map(|r| r.online[i].value()));
            if o.is_none() {
                warnings.push(format!("online accuracy of environment {} undefined in every episode", i + 1));
            }
            o
        })
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(OnlineAverages {
        o_avg: mean_defined(per_env.iter().copied()),
        per_env,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingMetrics {
    /// `FFF[i][j] = C[j][j] − C[i][j]` for `j <= i`.
    pub fff: Vec<Vec<Option<f64>>>,
    /// `FF[i]`: mean over `j < i` of `FFF[i][j]`; `FF[0]` is undefined.
    pub ff: Vec<Option<f64>>,
    pub f_avg: Option<f64>,
}

pub fn forgetting_metrics(c: &ForgettingMatrix, convention: ForgettingDenominator) -> ForgettingMetrics {
    let n = c.size();
    let fff: Vec<Vec<Option<f64>>> = (0..n)
        .map(|i| {
            (0..=i)
                .map(|j| match (c.get(j, j), c.get(i, j)) {
                    (Some(first), Some(later)) => Some(first - later),
                    _ => None,
                })
                .collect()
        })
        .collect();
    let ff: Vec<Option<f64>> = (0..n)
        .map(|i| mean_defined(fff[i][..i].iter().copied()))
        .collect();
    let f_avg = if n < 2 {
        None
    } else {
        match convention {
            ForgettingDenominator::Default => mean_defined(ff[1..].iter().copied()),
            ForgettingDenominator::PaperLiteral => {
                mean_defined(std::iter::once(Some(0.0)).chain(ff[1..].iter().copied()))
            }
        }
    };
    ForgettingMetrics { fff, ff, f_avg }
}

/// Mean with the sample (K − 1) standard deviation; `std` needs two values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
    pub count: usize,
}

impl Stat {
    pub fn from_values(values: &[f64]) -> Option<Stat> {
        let k = values.len();
        if k == 0 {
            return None;
        }
        // Shifted by the first value so identical inputs give exactly zero spread.
        let origin = values[0];
        let shift = values.iter().map(|v| v - origin).sum::<f64>() / k as f64;
        let mean = origin + shift;
        let std = (k >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - origin - shift).powi(2)).sum();
            (ss / (k - 1) as f64).sqrt()
        });
        Some(Stat { mean, std, count: k })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub episodes: usize,
    /// Over episode-level `O_avg` values.
    pub o_avg: Option<Stat>,
    /// `O_avg` averaged over environments of episode-averaged `O_i`.
    pub o_avg_pooled: Option<f64>,
    pub f_avg: Option<Stat>,
    pub f_avg_paper_literal: Option<Stat>,
    pub online_curve: Vec<Option<f64>>,
    pub forgetting_curve: Vec<Option<f64>>,
    pub last_online: Option<f64>,
    pub last_forgetting: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn aggregate(results: &[EpisodeResult]) -> Result<MetricSummary> {
    let online = average_online_accuracy(results)?;
    let n = online.per_env.len();
    let mut warnings = online.warnings.clone();

    let episode_o: Vec<f64> = results.iter().filter_map(EpisodeResult::episode_online_average).collect();
    let mut f_default = Vec::new();
    let mut f_literal = Vec::new();
    let mut ff_rows = Vec::new();
    for r in results {
        let matrix = r.forgetting_matrix();
        let d = forgetting_metrics(&matrix, ForgettingDenominator::Default);
        let l = forgetting_metrics(&matrix, ForgettingDenominator::PaperLiteral);
        f_default.extend(d.f_avg);
        f_literal.extend(l.f_avg);
        ff_rows.push(d.ff);
    }
    let forgetting_curve: Vec<Option<f64>> = (0..n)
        .map(|i| mean_defined(ff_rows.iter().map(|row| row[i])))
        .collect();

    if results.len() < 2 {
        warnings.push("fewer than two episodes: standard deviations omitted".into());
    }
    if n < 2 {
        warnings.push("single environment: forgetting undefined".into());
    }
    for w in &warnings[online.warnings.len()..] {
        log::warn!("{w}");
    }

    Ok(MetricSummary {
        episodes: results.len(),
        o_avg: Stat::from_values(&episode_o),
        o_avg_pooled: online.o_avg,
        f_avg: Stat::from_values(&f_default),
        f_avg_paper_literal: Stat::from_values(&f_literal),
        last_online: online.per_env.last().copied().flatten(),
        last_forgetting: forgetting_curve.last().copied().flatten(),
        online_curve: online.per_env,
        forgetting_curve,
        warnings,
    })
}

/// Writes the prediction log as CSV:
/// `t,env_index,true_class,predicted_class,counted,correct`.
pub fn write_prediction_log(result: &EpisodeResult, mut out: impl Write) -> io::Result<()> {
    writeln!(out, "t,env_index,true_class,predicted_class,counted,correct")?;
    for e in &result.log {
        let predicted = e.predicted.map(|c| c.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.t,
            e.env_index,
            e.true_class,
            predicted,
            u8::from(e.counted),
            u8::from(e.correct)
        )?;
    }
    Ok(())
}
