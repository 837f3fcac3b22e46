//! Experiment orchestration for driftbench: episode generation, embedding
//! training, parallel evaluation, summaries, plots and directional checks.

pub mod compare;
pub mod config;
pub mod plot;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use driftbench_core::eval::{run_episode, EpisodeResult};
use driftbench_core::learners::train::{meta_train, pretrain, MetaTrainConfig, PretrainConfig, TrainOutcome};
use driftbench_core::learners::{EmbeddingParams, LearnerKind};
use driftbench_core::stream::ClassId;
use driftbench_core::world::{format_episode, sample_episode_with_pool, ClassPool};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{RunConfig, Split};
use crate::report::Summary;

pub const THREADS_ENV: &str = "DRIFTBENCH_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] driftbench_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    MissingParams(String),

    #[error("summary error: {0}")]
    Summary(String),

    #[error("plot error: {0}")]
    Plot(String),

    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `--threads`, then `DRIFTBENCH_THREADS`, then the machine's parallelism.
pub fn resolve_threads(flag: Option<usize>) -> usize {
    flag.filter(|&n| n > 0)
        .or_else(|| {
            std::env::var(THREADS_ENV)
                .ok()
                .and_then(|v| v.parse().ok())
                .filter(|&n| n > 0)
        })
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub split: Split,
    pub world_seed: u64,
    pub episodes: Vec<ManifestEntry>,
}

/// Writes `config.episodes` DBENCH1 files of `split` plus `manifest.json`.
pub fn generate(config: &RunConfig, split: Split, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let seeds = config.splits.seeds(split, config.episodes)?;
    let pool = ClassPool::for_world(&config.world)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut episodes = Vec::with_capacity(seeds.len());
    for (k, &seed) in seeds.iter().enumerate() {
        let episode = sample_episode_with_pool(&pool, &config.world, seed)?;
        let text = format_episode(&episode);
        let file = format!("episode_{k:04}.dbench");
        write_file(&out.join(&file), &text)?;
        episodes.push(ManifestEntry {
            file,
            seed,
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let manifest = Manifest {
        format: driftbench_core::world::FORMAT_MAGIC.into(),
        split,
        world_seed: config.world.seed,
        episodes,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

fn initial_embedding(config: &RunConfig) -> EmbeddingParams {
    let mut params = EmbeddingParams::identity(config.world.feature_dim, config.embedding.dim);
    if config.embedding.bias {
        params.bias = Some(vec![0.0; config.embedding.dim]);
    }
    params
}

pub fn meta_train_config(config: &RunConfig) -> MetaTrainConfig {
    MetaTrainConfig {
        lr: config.meta_train.lr,
        objective: config.learner.objective(),
        rule: config.learner.proto_rule(),
        stop_grad_prototypes: config.learner.stop_grad_prototypes,
        logit_scale: config.learner.logit_scale,
    }
}

/// Meta-trains the embedding of a prototype learner on the training split.
pub fn meta_train_embedding(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let seeds = config.splits.seeds(Split::Train, config.meta_train.episodes)?;
    Ok(meta_train(
        initial_embedding(config),
        &config.world,
        &seeds,
        &meta_train_config(config),
    )?)
}

/// Offline supervised pretraining on frames pooled from training episodes.
pub fn pretrain_embedding(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let seeds = config.splits.seeds(Split::Train, config.pretrain.episodes)?;
    let pool = ClassPool::for_world(&config.world)?;
    let mut frames: Vec<(Vec<f64>, ClassId)> = Vec::new();
    for seed in seeds {
        let episode = sample_episode_with_pool(&pool, &config.world, seed)?;
        frames.extend(episode.frames().map(|f| (f.features.clone(), f.true_class)));
    }
    let settings = PretrainConfig {
        steps: config.pretrain.steps,
        batch_size: config.pretrain.batch_size,
        lr: config.pretrain.lr,
        seed: config.world.seed,
    };
    Ok(pretrain(
        initial_embedding(config),
        &frames,
        config.world.pool_size,
        &settings,
    )?)
}

/// Where the frozen embedding of a run comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingSource {
    File(PathBuf),
    /// Meta-train or pretrain inline, matching the learner kind.
    Train,
}

pub fn obtain_embedding(config: &RunConfig, source: &EmbeddingSource) -> Result<EmbeddingParams> {
    let params = match source {
        EmbeddingSource::File(path) => {
            if !path.exists() {
                let (cmd, flag) = if config.learner.name.is_prototype() {
                    ("meta-train", "--meta-train")
                } else {
                    ("pretrain", "--pretrain")
                };
                return Err(HarnessError::MissingParams(format!(
                    "params file {} not found; create it with `driftbench {cmd} --config <file> --learner {} --out {}` or pass {flag}",
                    path.display(),
                    config.learner.name,
                    path.display()
                )));
            }
            EmbeddingParams::load(path)?
        }
        EmbeddingSource::Train if config.learner.name.is_prototype() => meta_train_embedding(config)?.params,
        EmbeddingSource::Train => pretrain_embedding(config)?.params,
    };
    if params.input_dim != config.world.feature_dim {
        return Err(HarnessError::Config(format!(
            "embedding expects {}-dimensional features, world has {}",
            params.input_dim, config.world.feature_dim
        )));
    }
    Ok(params)
}

/// Runs the `K` evaluation episodes of the configured split. Results are in
/// episode order whatever the thread count.
pub fn evaluate(config: &RunConfig, embedding: Arc<EmbeddingParams>, threads: usize) -> Result<Vec<EpisodeResult>> {
    config.validate()?;
    let seeds = config.splits.seeds(config.split, config.episodes)?;
    let pool = ClassPool::for_world(&config.world)?;
    let run_one = |seed: &u64| -> Result<EpisodeResult> {
        let episode = sample_episode_with_pool(&pool, &config.world, *seed)?;
        let mut learner = config.learner.build(embedding.clone())?;
        Ok(run_episode(learner.as_mut(), &episode, &config.eval)?)
    };
    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?;
    workers.install(|| seeds.par_iter().map(run_one).collect())
}

/// Full `run`: obtain the embedding, evaluate, write `summary.json`,
/// per-episode CSV logs and the embedding used.
pub fn run(config: &RunConfig, source: &EmbeddingSource, threads: usize) -> Result<Summary> {
    config.validate()?;
    let embedding = obtain_embedding(config, source)?;
    let embedding_text = embedding.to_text();
    let results = evaluate(config, Arc::new(embedding), threads)?;
    let summary = Summary::build(config, &results, sha256_hex(embedding_text.as_bytes()))?;

    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("summary.json"), summary.to_json())?;
    write_file(&out.join("embedding.params"), embedding_text)?;
    for (k, result) in results.iter().enumerate() {
        let mut csv = Vec::new();
        driftbench_core::eval::write_prediction_log(result, &mut csv).expect("writing to memory");
        write_file(&out.join("episodes").join(format!("episode_{k:04}.csv")), csv)?;
    }
    Ok(summary)
}

/// Default learner for each name, applied to a base config.
pub fn with_learner(config: &RunConfig, kind: LearnerKind) -> RunConfig {
    let mut c = config.clone();
    c.learner.name = kind;
    c
}
