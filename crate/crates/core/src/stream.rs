//! Stream domain types and the frame-by-frame iteration contract.
//!
//! An [`Episode`] is a concatenation of environments; learners see it one
//! [`StreamEvent`] at a time and the label of a frame is revealed only when
//! the frame is marked as labeled.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class identifier, stable across the environments of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One observation of the stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    /// Frame index within the episode, 0-based.
    pub t: usize,
    pub env_index: usize,
    pub features: Vec<f64>,
    pub true_class: ClassId,
    pub labeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub env_index: usize,
    pub frames: Vec<FeatureFrame>,
    pub class_set: BTreeSet<ClassId>,
    /// Additive shift applied to every class in this environment. Generator
    /// metadata only; `None` for episodes ingested from files.
    pub context_shift: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub environments: Vec<Environment>,
    pub seed: u64,
    pub label_fraction: f64,
}

/// Number of labeled frames per environment for a given label fraction.
pub fn labeled_count(label_fraction: f64, frames_per_env: usize) -> usize {
    (label_fraction * frames_per_env as f64).round() as usize
}

impl Episode {
    /// Builds an episode, rejecting anything that fails [`Episode::validate`].
    pub fn new(environments: Vec<Environment>, seed: u64, label_fraction: f64) -> Result<Self> {
        let episode = Episode {
            environments,
            seed,
            label_fraction,
        };
        episode.validate()?;
        Ok(episode)
    }

    pub fn num_environments(&self) -> usize {
        self.environments.len()
    }

    /// Frames per environment (`T`).
    pub fn frames_per_env(&self) -> usize {
        self.environments.first().map_or(0, |e| e.frames.len())
    }

    pub fn feature_dim(&self) -> usize {
        self.frames().next().map_or(0, |f| f.features.len())
    }

    pub fn total_frames(&self) -> usize {
        self.environments.iter().map(|e| e.frames.len()).sum()
    }

    pub fn frames(&self) -> impl Iterator<Item = &FeatureFrame> {
        self.environments.iter().flat_map(|e| e.frames.iter())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return Err(Error::Validation(format!(
                "label fraction {} outside [0, 1]",
                self.label_fraction
            )));
        }
        let first = self
            .environments
            .first()
            .ok_or_else(|| Error::Validation("episode has no environments".into()))?;
        let frames_per_env = first.frames.len();
        if frames_per_env == 0 {
            return Err(Error::Validation("environment 0 has no frames".into()));
        }
        let dim = first.frames[0].features.len();
        let expected_labeled = labeled_count(self.label_fraction, frames_per_env);

        let mut t = 0;
        for (i, env) in self.environments.iter().enumerate() {
            if env.env_index != i {
                return Err(Error::Validation(format!(
                    "environment at position {i} carries env_index {}",
                    env.env_index
                )));
            }
            if env.frames.len() != frames_per_env {
                return Err(Error::Validation(format!(
                    "environment {i} has {} frames, expected {frames_per_env}",
                    env.frames.len()
                )));
            }
            if let Some(shift) = &env.context_shift {
                if shift.len() != dim {
                    return Err(Error::Validation(format!(
                        "environment {i} context shift has dimension {}, expected {dim}",
                        shift.len()
                    )));
                }
            }
            let mut labeled = 0;
            for frame in &env.frames {
                if frame.t != t {
                    return Err(Error::Validation(format!(
                        "frame at position {t} carries t = {}",
                        frame.t
                    )));
                }
                if frame.env_index != i {
                    return Err(Error::Validation(format!(
                        "frame {t} carries env_index {} inside environment {i}",
                        frame.env_index
                    )));
                }
                if frame.features.len() != dim {
                    return Err(Error::Validation(format!(
                        "frame {t} has dimension {}, expected {dim}",
                        frame.features.len()
                    )));
                }
                if !env.class_set.contains(&frame.true_class) {
                    return Err(Error::Validation(format!(
                        "frame {t} class {} not in environment {i} class set",
                        frame.true_class
                    )));
                }
                labeled += usize::from(frame.labeled);
                t += 1;
            }
            if labeled != expected_labeled {
                return Err(Error::Validation(format!(
                    "environment {i} has {labeled} labeled frames, expected {expected_labeled}"
                )));
            }
        }
        Ok(())
    }
}

/// A frame as presented to a learner: the label is present iff the frame is labeled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamEvent<'a> {
    pub frame: &'a FeatureFrame,
    pub revealed_label: Option<ClassId>,
}

impl<'a> StreamEvent<'a> {
    pub fn from_frame(frame: &'a FeatureFrame) -> Self {
        StreamEvent {
            frame,
            revealed_label: frame.labeled.then_some(frame.true_class),
        }
    }
}

/// Validates the episode and yields its `N × T` events in frame order.
pub fn iterate_episode(episode: &Episode) -> Result<impl Iterator<Item = StreamEvent<'_>>> {
    episode.validate()?;
    Ok(episode.frames().map(StreamEvent::from_frame))
}

/// Class scores for one frame. `argmax` is absent iff no class has been seen.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Prediction {
    pub scores: BTreeMap<ClassId, f64>,
    pub argmax: Option<ClassId>,
}

impl Prediction {
    /// Picks the maximal score; ties go to the smallest class id.
    pub fn from_scores(scores: BTreeMap<ClassId, f64>) -> Self {
        let mut best: Option<(ClassId, f64)> = None;
        for (&class, &score) in &scores {
            match best {
                Some((_, s)) if score <= s => {}
                _ => best = Some((class, score)),
            }
        }
        Prediction {
            argmax: best.map(|(c, _)| c),
            scores,
        }
    }

    pub fn empty() -> Self {
        Prediction::default()
    }
}

/// Which events introduce a class into the seen set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SeenPolicy {
    /// Only labeled occurrences count.
    #[default]
    LabeledOnly,
    /// Any occurrence counts, labeled or not.
    AnyOccurrence,
}

/// Incremental seen-class bookkeeping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeenSet {
    policy: SeenPolicy,
    classes: BTreeSet<ClassId>,
}

impl SeenSet {
    pub fn new(policy: SeenPolicy) -> Self {
        SeenSet {
            policy,
            classes: BTreeSet::new(),
        }
    }

    pub fn observe(&mut self, event: &StreamEvent<'_>) {
        match (self.policy, event.revealed_label) {
            (_, Some(class)) => {
                self.classes.insert(class);
            }
            (SeenPolicy::AnyOccurrence, None) => {
                self.classes.insert(event.frame.true_class);
            }
            (SeenPolicy::LabeledOnly, None) => {}
        }
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.classes.contains(&class)
    }

    pub fn classes(&self) -> &BTreeSet<ClassId> {
        &self.classes
    }
}

/// Classes seen strictly before index `t` of `events`.
pub fn seen_set_after(
    events: &[StreamEvent<'_>],
    t: usize,
    policy: SeenPolicy,
) -> Result<BTreeSet<ClassId>> {
    if t > events.len() {
        return Err(Error::Range {
            index: t,
            limit: events.len(),
        });
    }
    let mut seen = SeenSet::new(policy);
    events[..t].iter().for_each(|e| seen.observe(e));
    Ok(seen.classes)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Builds a well-formed episode from `(class, labeled, features)` rows
    /// split into environments of `frames_per_env`.
    pub fn episode_from_rows(
        rows: &[(u32, bool, Vec<f64>)],
        frames_per_env: usize,
        label_fraction: f64,
    ) -> Episode {
        let environments = rows
            .chunks(frames_per_env)
            .enumerate()
            .map(|(i, chunk)| {
                let frames: Vec<FeatureFrame> = chunk
                    .iter()
                    .enumerate()
                    .map(|(k, (c, labeled, f))| FeatureFrame {
                        t: i * frames_per_env + k,
                        env_index: i,
                        features: f.clone(),
                        true_class: ClassId(*c),
                        labeled: *labeled,
                    })
                    .collect();
                Environment {
                    env_index: i,
                    class_set: frames.iter().map(|f| f.true_class).collect(),
                    frames,
                    context_shift: None,
                }
            })
            .collect();
        Episode::new(environments, 0, label_fraction).expect("fixture episode must be valid")
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::episode_from_rows;
    use super::*;

    fn two_by_three() -> Episode {
        episode_from_rows(
            &[
                (0, true, vec![1.0]),
                (1, false, vec![2.0]),
                (0, false, vec![3.0]),
                (1, true, vec![4.0]),
                (0, false, vec![5.0]),
                (1, false, vec![6.0]),
            ],
            3,
            1.0 / 3.0,
        )
    }

    #[test]
    fn iterates_all_frames_in_order() {
        let episode = two_by_three();
        let ts: Vec<usize> = iterate_episode(&episode).unwrap().map(|e| e.frame.t).collect();
        assert_eq!(ts, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn unlabeled_frames_hide_their_label() {
        let episode = two_by_three();
        let events: Vec<_> = iterate_episode(&episode).unwrap().collect();
        assert_eq!(events[0].revealed_label, Some(ClassId(0)));
        assert_eq!(events[1].revealed_label, None);
        for e in &events {
            if let Some(label) = e.revealed_label {
                assert_eq!(label, e.frame.true_class);
            }
        }
    }

    #[test]
    fn short_environment_is_rejected() {
        let mut episode = two_by_three();
        episode.environments[1].frames.pop();
        assert!(matches!(
            iterate_episode(&episode).err(),
            Some(Error::Validation(_))
        ));
    }

    #[test]
    fn wrong_labeled_count_is_rejected() {
        let mut episode = two_by_three();
        episode.environments[0].frames[1].labeled = true;
        assert!(episode.validate().is_err());
    }

    #[test]
    fn seen_set_traces() {
        let frames = [
            FeatureFrame {
                t: 0,
                env_index: 0,
                features: vec![0.0],
                true_class: ClassId(0),
                labeled: true,
            },
            FeatureFrame {
                t: 1,
                env_index: 0,
                features: vec![0.0],
                true_class: ClassId(1),
                labeled: false,
            },
            FeatureFrame {
                t: 2,
                env_index: 0,
                features: vec![0.0],
                true_class: ClassId(1),
                labeled: true,
            },
        ];
        let events: Vec<_> = frames.iter().map(StreamEvent::from_frame).collect();
        let p = SeenPolicy::LabeledOnly;
        assert!(seen_set_after(&events, 0, p).unwrap().is_empty());
        assert_eq!(
            seen_set_after(&events, 2, p).unwrap(),
            BTreeSet::from([ClassId(0)])
        );
        assert_eq!(
            seen_set_after(&events, 3, p).unwrap(),
            BTreeSet::from([ClassId(0), ClassId(1)])
        );
        assert_eq!(
            seen_set_after(&events, 2, SeenPolicy::AnyOccurrence).unwrap(),
            BTreeSet::from([ClassId(0), ClassId(1)])
        );
        assert!(matches!(
            seen_set_after(&events, 4, p),
            Err(Error::Range { index: 4, limit: 3 })
        ));
    }

    #[test]
    fn argmax_ties_go_to_smallest_class() {
        let scores = BTreeMap::from([(ClassId(7), 0.5), (ClassId(3), 0.5), (ClassId(9), 0.1)]);
        assert_eq!(Prediction::from_scores(scores).argmax, Some(ClassId(3)));
        assert_eq!(Prediction::from_scores(BTreeMap::new()).argmax, None);
    }
}
