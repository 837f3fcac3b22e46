//! Episodic training of the embedding: the online prototype loss, the
//! Proto-OML replay loss, meta-training and offline supervised pretraining.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::embed::{EmbeddingNodes, EmbeddingParams};
use super::prototype::ProtoRule;
use crate::diff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::stream::{ClassId, Episode};
use crate::world::{sample_episode_with_pool, ClassPool, WorldConfig};

/// On-tape record of one pass over an episode.
#[derive(Debug, Clone)]
pub struct StreamGraph {
    /// Embedding node of every labeled frame, keyed by frame index.
    pub embedded: BTreeMap<usize, NodeId>,
    /// Mean cross-entropy of on-stream predictions at labeled frames whose
    /// class already had a prototype; `None` if there were no such frames.
    pub online_loss: Option<NodeId>,
    pub online_terms: usize,
}

struct TapeProto {
    normalized: NodeId,
    raw: NodeId,
    count: usize,
    last_update: usize,
}

fn cosine_logits(
    tape: &mut Tape,
    query: NodeId,
    prototypes: impl Iterator<Item = NodeId>,
    logit_scale: f64,
) -> Result<Vec<NodeId>> {
    prototypes
        .map(|p| {
            let c = tape.dot(query, p)?;
            Ok(tape.scale(c, logit_scale))
        })
        .collect()
}

fn mean(tape: &mut Tape, terms: &[NodeId]) -> Result<Option<NodeId>> {
    Ok(tape
        .sum(terms)?
        .map(|s| tape.scale(s, 1.0 / terms.len() as f64)))
}

/// Streams the episode through on-tape prototypes, predicting each labeled
/// frame before absorbing it. Unlabeled frames are skipped.
pub fn record_online_loss(
    tape: &mut Tape,
    shape: &EmbeddingParams,
    nodes: EmbeddingNodes,
    episode: &Episode,
    rule: ProtoRule,
    logit_scale: f64,
) -> Result<StreamGraph> {
    let mut table: BTreeMap<ClassId, TapeProto> = BTreeMap::new();
    let mut embedded = BTreeMap::new();
    let mut terms = Vec::new();

    for frame in episode.frames().filter(|f| f.labeled) {
        let e = shape.embed_on_tape(tape, nodes, &frame.features)?;
        embedded.insert(frame.t, e);
        let class = frame.true_class;

        if let Some(target) = table.keys().position(|&c| c == class) {
            let query = tape.normalize(e);
            let protos: Vec<NodeId> = table.values().map(|p| p.normalized).collect();
            let logits = cosine_logits(tape, query, protos.into_iter(), logit_scale)?;
            terms.push(tape.softmax_ce(&logits, target)?);
        }

        let updated = match table.get(&class) {
            None => TapeProto {
                normalized: tape.normalize(e),
                raw: e,
                count: 1,
                last_update: frame.t,
            },
            Some(old) => {
                let raw = match rule {
                    ProtoRule::Oap => {
                        let scaled = tape.scale(old.raw, old.count as f64);
                        let sum = tape.add(e, scaled)?;
                        tape.scale(sum, 1.0 / (old.count + 1) as f64)
                    }
                    ProtoRule::Context(gate) => {
                        let alpha = gate.alpha(old.count, frame.t - old.last_update);
                        let kept = tape.scale(old.raw, 1.0 - alpha);
                        let fresh = tape.scale(e, alpha);
                        tape.add(kept, fresh)?
                    }
                };
                TapeProto {
                    normalized: tape.normalize(raw),
                    raw,
                    count: old.count + 1,
                    last_update: frame.t,
                }
            }
        };
        table.insert(class, updated);
    }

    Ok(StreamGraph {
        embedded,
        online_terms: terms.len(),
        online_loss: mean(tape, &terms)?,
    })
}

/// Replay loss after `envs_seen` environments: prototypes are rebuilt as
/// class means of the embedded labeled frames among the first
/// `envs_seen · T` frames, then every one of those frames is scored again.
pub fn proto_oml_loss(
    tape: &mut Tape,
    graph: &StreamGraph,
    episode: &Episode,
    envs_seen: usize,
    stop_grad_prototypes: bool,
    logit_scale: f64,
) -> Result<NodeId> {
    let horizon = envs_seen * episode.frames_per_env();
    let labeled: Vec<(ClassId, NodeId)> = episode
        .frames()
        .take(horizon)
        .filter(|f| f.labeled)
        .map(|f| {
            graph
                .embedded
                .get(&f.t)
                .map(|&n| (f.true_class, n))
                .ok_or_else(|| Error::Contract(format!("frame {} missing from the stream graph", f.t)))
        })
        .collect::<Result<_>>()?;
    if labeled.is_empty() {
        return Err(Error::UndefinedMean(format!(
            "no labeled frames among the first {horizon}"
        )));
    }

    let mut members: BTreeMap<ClassId, Vec<NodeId>> = BTreeMap::new();
    for &(c, n) in &labeled {
        members.entry(c).or_default().push(n);
    }
    let mut prototypes: BTreeMap<ClassId, NodeId> = BTreeMap::new();
    for (c, nodes) in &members {
        let mut p = mean(tape, nodes)?.expect("class has members");
        if stop_grad_prototypes {
            p = tape.leaf(tape.value(p).to_vec());
        }
        prototypes.insert(*c, tape.normalize(p));
    }

    let mut terms = Vec::with_capacity(labeled.len());
    for &(c, e) in &labeled {
        let target = prototypes.keys().position(|&k| k == c).expect("class has a prototype");
        let query = tape.normalize(e);
        let logits = cosine_logits(tape, query, prototypes.values().copied(), logit_scale)?;
        terms.push(tape.softmax_ce(&logits, target)?);
    }
    Ok(mean(tape, &terms)?.expect("non-empty"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Mean on-stream cross-entropy only.
    OnlineCe,
    /// Online loss plus `lambda · Σ_{i=2..N} L_i`.
    ProtoOml { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaTrainConfig {
    pub lr: f64,
    pub objective: Objective,
    pub rule: ProtoRule,
    pub stop_grad_prototypes: bool,
    pub logit_scale: f64,
}

/// Total training loss of one episode on the tape, `None` if nothing in the
/// episode contributes a term.
pub fn record_episode_objective(
    tape: &mut Tape,
    shape: &EmbeddingParams,
    nodes: EmbeddingNodes,
    episode: &Episode,
    config: &MetaTrainConfig,
) -> Result<Option<NodeId>> {
    let graph = record_online_loss(tape, shape, nodes, episode, config.rule, config.logit_scale)?;
    let mut total = graph.online_loss;
    if let Objective::ProtoOml { lambda } = config.objective {
        let mut replay = Vec::new();
        for envs_seen in 2..=episode.num_environments() {
            replay.push(proto_oml_loss(
                tape,
                &graph,
                episode,
                envs_seen,
                config.stop_grad_prototypes,
                config.logit_scale,
            )?);
        }
        if let Some(sum) = tape.sum(&replay)? {
            let weighted = tape.scale(sum, lambda);
            total = Some(match total {
                Some(online) => tape.add(online, weighted)?,
                None => weighted,
            });
        }
    }
    Ok(total)
}

/// Loss value and flat gradient (weights then bias) of one episode.
pub fn episode_gradient(
    params: &EmbeddingParams,
    episode: &Episode,
    config: &MetaTrainConfig,
) -> Result<Option<(f64, Vec<f64>)>> {
    let mut tape = Tape::new();
    let nodes = params.record(&mut tape);
    let Some(loss) = record_episode_objective(&mut tape, params, nodes, episode, config)? else {
        return Ok(None);
    };
    let grads = tape.backward(loss)?;
    let mut flat = grads.wrt(nodes.weights).to_vec();
    if let Some(b) = nodes.bias {
        flat.extend_from_slice(grads.wrt(b));
    }
    Ok(Some((tape.scalar(loss), flat)))
}

/// Mean on-stream cross-entropy of `params` over one episode.
pub fn online_loss(params: &EmbeddingParams, episode: &Episode, rule: ProtoRule, logit_scale: f64) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let nodes = params.record(&mut tape);
    let graph = record_online_loss(&mut tape, params, nodes, episode, rule, logit_scale)?;
    Ok(graph.online_loss.map(|n| tape.scalar(n)))
}

/// Base rate for the first half of the budget, a tenth of it until three
/// quarters, a hundredth afterwards.
pub fn step_decay_lr(base: f64, step: usize, budget: usize) -> f64 {
    if 2 * step < budget {
        base
    } else if 4 * step < 3 * budget {
        base * 0.1
    } else {
        base * 0.01
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grad[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EmbeddingParams,
    /// Training loss per step (`NaN` for steps without a loss term).
    pub losses: Vec<f64>,
}

/// One Adam step per episode seed, with the step-decay schedule scaled to
/// `episode_seeds.len()`.
pub fn meta_train(
    init: EmbeddingParams,
    world: &WorldConfig,
    episode_seeds: &[u64],
    config: &MetaTrainConfig,
) -> Result<TrainOutcome> {
    if world.feature_dim != init.input_dim {
        return Err(Error::Shape(format!(
            "world feature_dim {} differs from embedding input {}",
            world.feature_dim, init.input_dim
        )));
    }
    let pool = ClassPool::for_world(world)?;
    let mut params = init;
    let mut flat = params.flatten();
    let mut adam = Adam::new(flat.len());
    let budget = episode_seeds.len();
    let mut losses = Vec::with_capacity(budget);

    for (step, &seed) in episode_seeds.iter().enumerate() {
        let episode = sample_episode_with_pool(&pool, world, seed)?;
        match episode_gradient(&params, &episode, config)? {
            None => losses.push(f64::NAN),
            Some((loss, grad)) => {
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Training { episode: step, loss });
                }
                adam.step(&mut flat, &grad, step_decay_lr(config.lr, step, budget));
                params.assign_flat(&flat);
                if !params.is_finite() {
                    return Err(Error::Training { episode: step, loss });
                }
                losses.push(loss);
            }
        }
    }
    Ok(TrainOutcome { params, losses })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Mean cross-entropy of a temporary linear classifier (`num_classes` rows)
/// on top of the embedding, over one batch.
pub fn record_supervised_loss(
    tape: &mut Tape,
    shape: &EmbeddingParams,
    nodes: EmbeddingNodes,
    classifier: NodeId,
    num_classes: usize,
    batch: &[(&[f64], ClassId)],
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(batch.len());
    for &(x, c) in batch {
        let e = shape.embed_on_tape(tape, nodes, x)?;
        let logits = tape.matvec(classifier, num_classes, shape.output_dim, e)?;
        let scalars: Vec<NodeId> = (0..num_classes)
            .map(|k| {
                let mut basis = vec![0.0; num_classes];
                basis[k] = 1.0;
                let basis = tape.leaf(basis);
                tape.dot(logits, basis)
            })
            .collect::<Result<_>>()?;
        terms.push(tape.softmax_ce(&scalars, c.0 as usize)?);
    }
    mean(tape, &terms)?.ok_or_else(|| Error::UndefinedMean("empty pretraining batch".into()))
}

/// Offline supervised pretraining on pooled labeled frames. Returns the
/// trained embedding; the classifier is discarded.
pub fn pretrain(
    init: EmbeddingParams,
    frames: &[(Vec<f64>, ClassId)],
    num_classes: usize,
    config: &PretrainConfig,
) -> Result<TrainOutcome> {
    if frames.is_empty() || config.batch_size == 0 {
        return Err(Error::UndefinedMean("pretraining needs frames and a positive batch size".into()));
    }
    if let Some((_, c)) = frames.iter().find(|(_, c)| c.0 as usize >= num_classes) {
        return Err(Error::Config(format!("class {c} outside the {num_classes}-class pool")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init;
    let classifier_len = num_classes * params.output_dim;
    let mut classifier: Vec<f64> = (0..classifier_len)
        .map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n_embed = params.num_params();
    let mut flat = params.flatten();
    flat.extend_from_slice(&classifier);
    let mut adam = Adam::new(flat.len());
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch: Vec<(&[f64], ClassId)> = (0..config.batch_size)
            .map(|_| {
                let (x, c) = &frames[rng.gen_range(0..frames.len())];
                (x.as_slice(), *c)
            })
            .collect();
        let mut tape = Tape::new();
        let nodes = params.record(&mut tape);
        let head = tape.leaf(classifier.clone());
        let loss = record_supervised_loss(&mut tape, &params, nodes, head, num_classes, &batch)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training { episode: step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let mut grad = grads.wrt(nodes.weights).to_vec();
        if let Some(b) = nodes.bias {
            grad.extend_from_slice(grads.wrt(b));
        }
        grad.extend_from_slice(grads.wrt(head));
        adam.step(&mut flat, &grad, step_decay_lr(config.lr, step, config.steps));
        params.assign_flat(&flat[..n_embed]);
        classifier.copy_from_slice(&flat[n_embed..]);
        losses.push(value);
    }
    Ok(TrainOutcome { params, losses })
}
