//! The online learner contract and the six baselines.
//!
//! | name          | memory                          | embedding source |
//! |---------------|---------------------------------|------------------|
//! | `base`        | linear head, SGD                | pretrained       |
//! | `lwf`         | linear head, SGD + distillation | pretrained       |
//! | `oap`         | running-mean prototypes         | meta-trained     |
//! | `cpm-lite`    | recency-gated prototypes        | meta-trained     |
//! | `proto-oml`   | recency-gated prototypes        | meta-trained with replay loss |
//! | `upper-bound` | running-mean, reset per env     | meta-trained     |

pub mod embed;
pub mod head;
pub mod prototype;
pub mod train;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{FeatureFrame, Prediction, StreamEvent};

pub use embed::EmbeddingParams;
pub use head::{Distillation, HeadLearner, LinearHead};
pub use prototype::{AlphaFloor, ContextGate, NamedFloor, ProtoRule, PrototypeLearner, PrototypeTable};

/// Frozen scorer. `predict` must not change any state.
pub trait Predictor: Send + Sync {
    fn predict(&self, frame: &FeatureFrame) -> Prediction;

    /// Feature dimension the scorer expects.
    fn input_dim(&self) -> usize;
}

/// Online learner driven in predict-then-update order.
pub trait Learner: Predictor {
    fn update(&mut self, event: &StreamEvent<'_>) -> Result<()>;

    fn on_environment_start(&mut self, env_index: usize);

    fn reset_for_episode(&mut self);

    /// Frozen copy, unaffected by later updates of `self`.
    fn snapshot(&self) -> Box<dyn Predictor>;

    /// `false` for learners whose forgetting is not meaningful (Upper bound).
    fn reports_forgetting(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    Base,
    Lwf,
    Oap,
    CpmLite,
    ProtoOml,
    UpperBound,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 6] = [
        LearnerKind::Base,
        LearnerKind::Lwf,
        LearnerKind::Oap,
        LearnerKind::CpmLite,
        LearnerKind::ProtoOml,
        LearnerKind::UpperBound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Base => "base",
            LearnerKind::Lwf => "lwf",
            LearnerKind::Oap => "oap",
            LearnerKind::CpmLite => "cpm-lite",
            LearnerKind::ProtoOml => "proto-oml",
            LearnerKind::UpperBound => "upper-bound",
        }
    }

    /// Prototype learners get their embedding from meta-training; head
    /// learners from offline pretraining.
    pub fn is_prototype(self) -> bool {
        !matches!(self, LearnerKind::Base | LearnerKind::Lwf)
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LearnerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = LearnerKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown learner `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Learner hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub name: LearnerKind,
    /// SGD rate of the Base/LwF heads.
    pub lr: f64,
    /// Weight of the Proto-OML replay loss.
    pub lambda: f64,
    pub distill_weight: f64,
    pub temperature: f64,
    pub alpha_min: AlphaFloor,
    pub decay: f64,
    pub stop_grad_prototypes: bool,
    /// Multiplier on cosine scores inside training losses.
    pub logit_scale: f64,
    /// Feed unit-length embeddings to the Base/LwF heads.
    pub normalize_head_input: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            name: LearnerKind::Oap,
            lr: 0.27,
            lambda: 1.0,
            distill_weight: 1.0,
            temperature: 2.0,
            alpha_min: AlphaFloor::Constant(0.2),
            decay: 0.05,
            stop_grad_prototypes: false,
            logit_scale: 10.0,
            normalize_head_input: false,
        }
    }
}

impl LearnerConfig {
    pub fn gate(&self) -> ContextGate {
        ContextGate {
            alpha_min: self.alpha_min,
            decay: self.decay,
        }
    }

    /// Prototype rule used both online and during meta-training.
    pub fn proto_rule(&self) -> ProtoRule {
        match self.name {
            LearnerKind::CpmLite | LearnerKind::ProtoOml => ProtoRule::Context(self.gate()),
            _ => ProtoRule::Oap,
        }
    }

    pub fn objective(&self) -> train::Objective {
        match self.name {
            LearnerKind::ProtoOml => train::Objective::ProtoOml { lambda: self.lambda },
            _ => train::Objective::OnlineCe,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature = {} must be positive", self.temperature)));
        }
        if !(self.distill_weight >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("distill_weight and lambda must be >= 0".into()));
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::Config("logit_scale must be positive".into()));
        }
        self.gate().validate()
    }

    pub fn build(&self, embedding: Arc<EmbeddingParams>) -> Result<Box<dyn Learner>> {
        self.validate()?;
        Ok(match self.name {
            LearnerKind::Base => {
                Box::new(HeadLearner::base(embedding, self.lr).with_normalized_input(self.normalize_head_input))
            }
            LearnerKind::Lwf => Box::new(
                HeadLearner::lwf(
                    embedding,
                    self.lr,
                    Distillation {
                        weight: self.distill_weight,
                        temperature: self.temperature,
                    },
                )?
                .with_normalized_input(self.normalize_head_input),
            ),
            LearnerKind::Oap => Box::new(PrototypeLearner::oap(embedding)),
            LearnerKind::UpperBound => Box::new(PrototypeLearner::upper_bound(embedding)),
            LearnerKind::CpmLite | LearnerKind::ProtoOml => {
                Box::new(PrototypeLearner::new(embedding, self.proto_rule(), false)?)
            }
        })
    }
}
