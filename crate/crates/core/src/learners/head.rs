//! Linear classifier heads over a frozen embedding: Base and LwF.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::embed::EmbeddingParams;
use super::{Learner, Predictor};
use crate::diff::{dot, softmax};
use crate::error::{Error, Result};
use crate::stream::{ClassId, FeatureFrame, Prediction, StreamEvent};

/// One weight row per class, activated (zero-initialized) on the first
/// labeled occurrence of the class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub rows: BTreeMap<ClassId, Vec<f64>>,
    pub lr: f64,
    dim: usize,
}

impl LinearHead {
    pub fn new(dim: usize, lr: f64) -> Self {
        LinearHead {
            rows: BTreeMap::new(),
            lr,
            dim,
        }
    }

    pub fn logits(&self, embedding: &[f64]) -> BTreeMap<ClassId, f64> {
        self.rows.iter().map(|(&c, w)| (c, dot(w, embedding))).collect()
    }

    pub fn activate(&mut self, class: ClassId) {
        let dim = self.dim;
        self.rows.entry(class).or_insert_with(|| vec![0.0; dim]);
    }
}

/// Distillation settings for LwF.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distillation {
    pub weight: f64,
    pub temperature: f64,
}

/// Loss and per-class logit gradients of
/// `CE(label) + weight·τ²·KL(softmax(z_old/τ) ‖ softmax(z/τ))`, the KL term
/// restricted to the snapshot's classes. Every class of `rows` must be active.
pub fn head_objective(
    rows: &BTreeMap<ClassId, Vec<f64>>,
    embedding: &[f64],
    label: ClassId,
    teacher: Option<(&LinearHead, Distillation)>,
) -> Result<(f64, BTreeMap<ClassId, f64>)> {
    let classes: Vec<ClassId> = rows.keys().copied().collect();
    let target = classes
        .iter()
        .position(|&c| c == label)
        .ok_or_else(|| Error::Contract(format!("label {label} has no active row")))?;
    let logits: Vec<f64> = rows.values().map(|w| dot(w, embedding)).collect();
    let (mut loss, grad) = crate::diff::softmax_cross_entropy(&logits, target)?;
    let mut coeffs: BTreeMap<ClassId, f64> = classes.iter().copied().zip(grad).collect();

    if let Some((snapshot, distill)) = teacher {
        let tau = distill.temperature;
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature {tau} must be positive")));
        }
        let old: Vec<ClassId> = snapshot.rows.keys().copied().collect();
        if !old.is_empty() {
            let student: Vec<f64> = old.iter().map(|c| dot(&rows[c], embedding) / tau).collect();
            let teacher: Vec<f64> = old
                .iter()
                .map(|c| dot(&snapshot.rows[c], embedding) / tau)
                .collect();
            let q = softmax(&student);
            let p = softmax(&teacher);
            let kl: f64 = p
                .iter()
                .zip(&q)
                .filter(|(pk, _)| **pk > 0.0)
                .map(|(pk, qk)| pk * (pk.ln() - qk.ln()))
                .sum();
            loss += distill.weight * tau * tau * kl;
            for (k, c) in old.iter().enumerate() {
                let g = coeffs.get_mut(c).expect("snapshot classes stay active");
                *g += distill.weight * tau * (q[k] - p[k]);
            }
        }
    }
    Ok((loss, coeffs))
}

fn apply_step(head: &mut LinearHead, embedding: &[f64], coeffs: &BTreeMap<ClassId, f64>) {
    let lr = head.lr;
    for (c, g) in coeffs {
        let row = head.rows.get_mut(c).expect("coefficient for an active row");
        for (w, e) in row.iter_mut().zip(embedding) {
            *w -= lr * g * e;
        }
    }
}

/// One SGD step on softmax cross-entropy over the active rows.
pub fn base_update(head: &mut LinearHead, embedding: &[f64], label: ClassId) -> Result<()> {
    head.activate(label);
    let (_, coeffs) = head_objective(&head.rows, embedding, label, None)?;
    apply_step(head, embedding, &coeffs);
    Ok(())
}

/// One SGD step on cross-entropy plus distillation towards `snapshot`.
pub fn lwf_update(
    head: &mut LinearHead,
    snapshot: Option<&LinearHead>,
    embedding: &[f64],
    label: ClassId,
    distill: Distillation,
) -> Result<()> {
    if !(distill.temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature {} must be positive",
            distill.temperature
        )));
    }
    head.activate(label);
    let (_, coeffs) = head_objective(&head.rows, embedding, label, snapshot.map(|s| (s, distill)))?;
    apply_step(head, embedding, &coeffs);
    Ok(())
}

/// Base (no distillation) or LwF (distillation towards the head captured at
/// the last environment boundary).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLearner {
    embedding: Arc<EmbeddingParams>,
    head: LinearHead,
    distill: Option<Distillation>,
    snapshot: Option<LinearHead>,
    normalize_input: bool,
}

impl HeadLearner {
    pub fn base(embedding: Arc<EmbeddingParams>, lr: f64) -> Self {
        let dim = embedding.output_dim;
        HeadLearner {
            embedding,
            head: LinearHead::new(dim, lr),
            distill: None,
            snapshot: None,
            normalize_input: false,
        }
    }

    /// Scale embeddings to unit length before the head, so the step size
    /// does not depend on the embedding's scale.
    pub fn with_normalized_input(mut self, normalize: bool) -> Self {
        self.normalize_input = normalize;
        self
    }

    fn head_input(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut e = self.embedding.embed(features)?;
        if self.normalize_input {
            let norm = crate::diff::l2_norm(&e);
            if norm > 0.0 {
                e.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(e)
    }

    pub fn lwf(embedding: Arc<EmbeddingParams>, lr: f64, distill: Distillation) -> Result<Self> {
        if !(distill.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                distill.temperature
            )));
        }
        let mut learner = Self::base(embedding, lr);
        learner.distill = Some(distill);
        Ok(learner)
    }

    pub fn head(&self) -> &LinearHead {
        &self.head
    }
}

impl Predictor for HeadLearner {
    fn predict(&self, frame: &FeatureFrame) -> Prediction {
        if self.head.rows.is_empty() {
            return Prediction::empty();
        }
        let e = self
            .head_input(&frame.features)
            .expect("frame dimension checked against the embedding");
        Prediction::from_scores(self.head.logits(&e))
    }

    fn input_dim(&self) -> usize {
        self.embedding.input_dim
    }
}

impl Learner for HeadLearner {
    fn update(&mut self, event: &StreamEvent<'_>) -> Result<()> {
        let Some(label) = event.revealed_label else {
            return Ok(());
        };
        let e = self.head_input(&event.frame.features)?;
        match self.distill {
            None => base_update(&mut self.head, &e, label),
            Some(d) => lwf_update(&mut self.head, self.snapshot.as_ref(), &e, label, d),
        }
    }

    fn on_environment_start(&mut self, env_index: usize) {
        if self.distill.is_some() && env_index > 0 {
            self.snapshot = Some(self.head.clone());
        }
    }

    fn reset_for_episode(&mut self) {
        self.head.rows.clear();
        self.snapshot = None;
    }

    fn snapshot(&self) -> Box<dyn Predictor> {
        Box::new(self.clone())
    }
}
