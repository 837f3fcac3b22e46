//! Prototype memories scored by cosine similarity: OAP, CPM-lite, Upper bound
//! and the evaluation-time Proto-OML learner.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::embed::EmbeddingParams;
use super::{Learner, Predictor};
use crate::diff::{dot, l2_norm};
use crate::error::{Error, Result};
use crate::stream::{ClassId, FeatureFrame, Prediction, StreamEvent};

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeEntry {
    pub prototype: Vec<f64>,
    pub count: usize,
    /// Frame index of the most recent update.
    pub last_update: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeTable {
    entries: BTreeMap<ClassId, PrototypeEntry>,
}

impl PrototypeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, class: ClassId) -> Option<&PrototypeEntry> {
        self.entries.get(&class)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClassId, &PrototypeEntry)> {
        self.entries.iter()
    }
}

/// `⟨a, b⟩ / (‖a‖·‖b‖)`, defined as 0 when either operand has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = l2_norm(a) * l2_norm(b);
    if denom > 0.0 {
        dot(a, b) / denom
    } else {
        0.0
    }
}

pub fn cosine_scores(embedding: &[f64], table: &PrototypeTable) -> BTreeMap<ClassId, f64> {
    table
        .entries
        .iter()
        .map(|(&c, e)| (c, cosine(embedding, &e.prototype)))
        .collect()
}

fn check_finite(f: &[f64]) -> Result<()> {
    if f.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("prototype update with a non-finite feature".into()))
    }
}

/// Online averaging: `P ← (f + n·P) / (n + 1)`.
pub fn oap_update(table: &mut PrototypeTable, class: ClassId, f: &[f64], t: usize) -> Result<()> {
    check_finite(f)?;
    match table.entries.get_mut(&class) {
        None => {
            table.entries.insert(
                class,
                PrototypeEntry {
                    prototype: f.to_vec(),
                    count: 1,
                    last_update: t,
                },
            );
        }
        Some(entry) => {
            let old = entry.count as f64;
            entry.count += 1;
            let new = entry.count as f64;
            for (p, v) in entry.prototype.iter_mut().zip(f) {
                *p = (v + old * *p) / new;
            }
            entry.last_update = t;
        }
    }
    Ok(())
}

/// Convex update `P ← (1 − α)·P + α·f`; the first observation sets `P = f`.
pub fn context_proto_update(
    table: &mut PrototypeTable,
    class: ClassId,
    f: &[f64],
    alpha: f64,
    t: usize,
) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("gate value {alpha} outside (0, 1]")));
    }
    check_finite(f)?;
    match table.entries.get_mut(&class) {
        None => {
            table.entries.insert(
                class,
                PrototypeEntry {
                    prototype: f.to_vec(),
                    count: 1,
                    last_update: t,
                },
            );
        }
        Some(entry) => {
            for (p, v) in entry.prototype.iter_mut().zip(f) {
                *p = (1.0 - alpha) * *p + alpha * v;
            }
            entry.count += 1;
            entry.last_update = t;
        }
    }
    Ok(())
}

/// Lower bound of the CPM-lite gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaFloor {
    Constant(f64),
    Named(NamedFloor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedFloor {
    /// `1 / count` after the update, i.e. the running-mean weight.
    InverseCount,
}

/// Recency gate `α = max(floor, 1 − 1/(1 + decay·age))`, where `age` is the
/// number of frames since the class prototype was last updated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextGate {
    pub alpha_min: AlphaFloor,
    pub decay: f64,
}

impl ContextGate {
    pub fn validate(&self) -> Result<()> {
        if let AlphaFloor::Constant(a) = self.alpha_min {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("alpha_min = {a} outside (0, 1]")));
            }
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!("decay = {} must be finite and >= 0", self.decay)));
        }
        Ok(())
    }

    /// Gate for the next update of a class already updated `count` times.
    pub fn alpha(&self, count: usize, age: usize) -> f64 {
        let floor = match self.alpha_min {
            AlphaFloor::Constant(a) => a,
            AlphaFloor::Named(NamedFloor::InverseCount) => 1.0 / (count + 1) as f64,
        };
        let recency = 1.0 - 1.0 / (1.0 + self.decay * age as f64);
        floor.max(recency)
    }
}

/// How a prototype absorbs a new labeled embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProtoRule {
    Oap,
    Context(ContextGate),
}

impl ProtoRule {
    pub fn apply(&self, table: &mut PrototypeTable, class: ClassId, f: &[f64], t: usize) -> Result<()> {
        match self {
            ProtoRule::Oap => oap_update(table, class, f, t),
            ProtoRule::Context(gate) => match table.get(class) {
                None => context_proto_update(table, class, f, 1.0, t),
                Some(e) => {
                    let alpha = gate.alpha(e.count, t.saturating_sub(e.last_update));
                    context_proto_update(table, class, f, alpha, t)
                }
            },
        }
    }
}

/// Prototype learner over a frozen embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeLearner {
    embedding: Arc<EmbeddingParams>,
    rule: ProtoRule,
    /// Upper bound: empty the table at every environment start.
    reset_each_environment: bool,
    table: PrototypeTable,
}

impl PrototypeLearner {
    pub fn new(embedding: Arc<EmbeddingParams>, rule: ProtoRule, reset_each_environment: bool) -> Result<Self> {
        if let ProtoRule::Context(gate) = &rule {
            gate.validate()?;
        }
        Ok(PrototypeLearner {
            embedding,
            rule,
            reset_each_environment,
            table: PrototypeTable::new(),
        })
    }

    pub fn oap(embedding: Arc<EmbeddingParams>) -> Self {
        Self::new(embedding, ProtoRule::Oap, false).expect("OAP has no parameters to validate")
    }

    pub fn upper_bound(embedding: Arc<EmbeddingParams>) -> Self {
        Self::new(embedding, ProtoRule::Oap, true).expect("OAP has no parameters to validate")
    }

    pub fn table(&self) -> &PrototypeTable {
        &self.table
    }
}

impl Predictor for PrototypeLearner {
    fn predict(&self, frame: &FeatureFrame) -> Prediction {
        if self.table.is_empty() {
            return Prediction::empty();
        }
        let e = self
            .embedding
            .embed(&frame.features)
            .expect("frame dimension checked against the embedding");
        Prediction::from_scores(cosine_scores(&e, &self.table))
    }

    fn input_dim(&self) -> usize {
        self.embedding.input_dim
    }
}

impl Learner for PrototypeLearner {
    fn update(&mut self, event: &StreamEvent<'_>) -> Result<()> {
        let Some(label) = event.revealed_label else {
            return Ok(());
        };
        let e = self.embedding.embed(&event.frame.features)?;
        self.rule.apply(&mut self.table, label, &e, event.frame.t)
    }

    fn on_environment_start(&mut self, _env_index: usize) {
        if self.reset_each_environment {
            self.table.clear();
        }
    }

    fn reset_for_episode(&mut self) {
        self.table.clear();
    }

    fn snapshot(&self) -> Box<dyn Predictor> {
        Box::new(self.clone())
    }

    fn reports_forgetting(&self) -> bool {
        !self.reset_each_environment
    }
}
