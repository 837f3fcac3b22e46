//! Seeded synthetic environments and the DBENCH1 episode file format.
//!
//! A world is a fixed pool of Gaussian class centroids. Each environment
//! keeps some classes from the previous one, refills the rest from the pool,
//! and shifts every class by a shared random context vector.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{labeled_count, ClassId, Environment, Episode, FeatureFrame};

/// Shuffle attempts before the label mask is repaired deterministically.
const LABEL_SHUFFLE_RETRIES: usize = 32;

pub const FORMAT_MAGIC: &str = "DBENCH1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub feature_dim: usize,
    pub pool_size: usize,
    pub classes_per_env: usize,
    /// Probability that a class of one environment carries into the next.
    pub persist_prob: f64,
    pub frames_per_env: usize,
    pub environments: usize,
    pub label_fraction: f64,
    pub noise_sigma: f64,
    pub context_sigma: f64,
    /// Per-class offset redrawn in every environment (a class returns as a
    /// different instance). Zero disables it and draws nothing.
    pub instance_sigma: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            feature_dim: 512,
            pool_size: 40,
            classes_per_env: 8,
            persist_prob: 0.5,
            frames_per_env: 100,
            environments: 4,
            label_fraction: 0.4,
            noise_sigma: 0.5,
            context_sigma: 0.5,
            instance_sigma: 0.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if self.pool_size == 0 {
            return fail("pool_size must be positive".into());
        }
        if self.classes_per_env == 0 || self.classes_per_env > self.pool_size {
            return fail(format!(
                "classes_per_env = {} must lie in [1, pool_size = {}]",
                self.classes_per_env, self.pool_size
            ));
        }
        if self.frames_per_env == 0 || self.environments == 0 {
            return fail("frames_per_env and environments must be positive".into());
        }
        for (name, p) in [
            ("persist_prob", self.persist_prob),
            ("label_fraction", self.label_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} outside [0, 1]"));
            }
        }
        for (name, s) in [
            ("noise_sigma", self.noise_sigma),
            ("context_sigma", self.context_sigma),
            ("instance_sigma", self.instance_sigma),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return fail(format!("{name} = {s} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Class centroids of a world.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPool {
    pub means: Vec<Vec<f64>>,
}

impl ClassPool {
    /// The pool implied by `config.seed`; shared by every episode of the world.
    pub fn for_world(config: &WorldConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        sample_class_pool(config, &mut rng)
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-episode RNG seed: `splitmix64(base ^ index)`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ index)
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn sample_class_pool(config: &WorldConfig, rng: &mut impl Rng) -> Result<ClassPool> {
    if config.pool_size == 0 {
        return Err(Error::Config("pool_size must be positive".into()));
    }
    let means = (0..config.pool_size)
        .map(|_| gaussian_vec(rng, config.feature_dim, 1.0))
        .collect();
    Ok(ClassPool { means })
}

/// Draws one environment. `prev_classes` is `None` for the first environment.
pub fn sample_environment(
    pool: &ClassPool,
    prev_classes: Option<&BTreeSet<ClassId>>,
    config: &WorldConfig,
    env_index: usize,
    rng: &mut impl Rng,
) -> Result<Environment> {
    if config.classes_per_env > pool.len() {
        return Err(Error::Config(format!(
            "classes_per_env = {} exceeds pool size {}",
            config.classes_per_env,
            pool.len()
        )));
    }
    if pool.means.iter().any(|m| m.len() != config.feature_dim) {
        return Err(Error::Config("pool dimension differs from feature_dim".into()));
    }

    let mut class_set = BTreeSet::new();
    if let Some(prev) = prev_classes {
        for &c in prev {
            if rng.gen_bool(config.persist_prob) {
                class_set.insert(c);
            }
        }
    }
    let need = config.classes_per_env.saturating_sub(class_set.len());
    if need > 0 {
        // Classes dropped just now are only eligible when the pool runs short.
        let is_prev = |c: &ClassId| prev_classes.is_some_and(|p| p.contains(c));
        let all = (0..pool.len() as u32).map(ClassId);
        let mut candidates: Vec<ClassId> = all
            .clone()
            .filter(|c| !class_set.contains(c) && !is_prev(c))
            .collect();
        if candidates.len() < need {
            candidates.extend(all.filter(|c| !class_set.contains(c) && is_prev(c)));
        }
        class_set.extend(candidates.choose_multiple(rng, need).copied());
    }

    let dim = config.feature_dim;
    let shift = gaussian_vec(rng, dim, config.context_sigma);
    let classes: Vec<ClassId> = class_set.iter().copied().collect();
    let centres: BTreeMap<ClassId, Vec<f64>> = classes
        .iter()
        .map(|&c| {
            let mean = &pool.means[c.0 as usize];
            let centre = if config.instance_sigma > 0.0 {
                let offset = gaussian_vec(rng, dim, config.instance_sigma);
                (0..dim).map(|d| mean[d] + offset[d]).collect()
            } else {
                mean.clone()
            };
            (c, centre)
        })
        .collect();
    let frames_per_env = config.frames_per_env;
    let mut frames: Vec<FeatureFrame> = (0..frames_per_env)
        .map(|k| {
            let class = classes[rng.gen_range(0..classes.len())];
            let mean = &centres[&class];
            let features = (0..dim)
                .map(|d| {
                    let z: f64 = rng.sample(StandardNormal);
                    (mean[d] + shift[d]) + config.noise_sigma * z
                })
                .collect();
            FeatureFrame {
                t: env_index * frames_per_env + k,
                env_index,
                features,
                true_class: class,
                labeled: false,
            }
        })
        .collect();

    let mask = label_mask(&frames, config.label_fraction, rng);
    for (frame, labeled) in frames.iter_mut().zip(mask) {
        frame.labeled = labeled;
    }

    Ok(Environment {
        env_index,
        frames,
        class_set,
        context_shift: Some(shift),
    })
}

/// Exactly `round(rho * T)` labeled frames, covering every class present in
/// the frames whenever the budget allows it.
fn label_mask(frames: &[FeatureFrame], label_fraction: f64, rng: &mut impl Rng) -> Vec<bool> {
    let n = frames.len();
    let budget = labeled_count(label_fraction, n);
    let present: BTreeSet<ClassId> = frames.iter().map(|f| f.true_class).collect();
    let must_cover = budget >= present.len();
    let covered = |mask: &[bool]| {
        let labeled: BTreeSet<ClassId> = frames
            .iter()
            .zip(mask)
            .filter(|(_, &l)| l)
            .map(|(f, _)| f.true_class)
            .collect();
        labeled.len() == present.len()
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut mask = vec![false; n];
    for _ in 0..LABEL_SHUFFLE_RETRIES {
        order.shuffle(rng);
        mask.iter_mut().for_each(|m| *m = false);
        order[..budget].iter().for_each(|&i| mask[i] = true);
        if !must_cover || covered(&mask) {
            return mask;
        }
    }

    // Move labels from over-represented classes onto uncovered ones.
    for class in &present {
        let has_label = frames
            .iter()
            .zip(&mask)
            .any(|(f, &l)| l && f.true_class == *class);
        if has_label {
            continue;
        }
        let target = frames.iter().position(|f| f.true_class == *class).unwrap();
        let donor = (0..n).rev().find(|&i| {
            mask[i]
                && frames
                    .iter()
                    .zip(&mask)
                    .filter(|(f, &l)| l && f.true_class == frames[i].true_class)
                    .count()
                    > 1
        });
        if let Some(donor) = donor {
            mask[donor] = false;
            mask[target] = true;
        }
    }
    mask
}

/// Samples an episode of the world described by `config`. The class pool is
/// fixed by `config.seed`; everything else by `episode_seed`.
pub fn sample_episode(config: &WorldConfig, episode_seed: u64) -> Result<Episode> {
    config.validate()?;
    let pool = ClassPool::for_world(config)?;
    sample_episode_with_pool(&pool, config, episode_seed)
}

pub fn sample_episode_with_pool(
    pool: &ClassPool,
    config: &WorldConfig,
    episode_seed: u64,
) -> Result<Episode> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, episode_seed));
    let mut environments: Vec<Environment> = Vec::with_capacity(config.environments);
    for i in 0..config.environments {
        let prev = environments.last().map(|e| &e.class_set);
        let env = sample_environment(pool, prev, config, i, &mut rng)?;
        environments.push(env);
    }
    Episode::new(environments, episode_seed, config.label_fraction)
}

/// Serializes an episode in the DBENCH1 text format.
pub fn format_episode(episode: &Episode) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{FORMAT_MAGIC} D={} N={} T={} rho={} seed={}",
        episode.feature_dim(),
        episode.num_environments(),
        episode.frames_per_env(),
        episode.label_fraction,
        episode.seed
    );
    for frame in episode.frames() {
        let _ = write!(
            out,
            "{},{},{},{}",
            frame.t,
            frame.env_index,
            frame.true_class,
            u8::from(frame.labeled)
        );
        for v in &frame.features {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_episode(episode: &Episode, path: impl AsRef<Path>) -> Result<()> {
    episode.validate()?;
    let path = path.as_ref();
    let io_err = |e: std::io::Error| Error::Config(format!("cannot write {}: {e}", path.display()));
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(format_episode(episode).as_bytes())
        .map_err(io_err)
}

pub fn load_episode(path: impl AsRef<Path>) -> Result<Episode> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::format(0, "file", format!("cannot read {}: {e}", path.display())))?;
    parse_episode(&text)
}

fn header_field<T: std::str::FromStr>(token: Option<&str>, key: &str) -> Result<T> {
    let token = token.ok_or_else(|| Error::format(1, key, "missing header field"))?;
    let value = token
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| Error::format(1, key, format!("expected `{key}=<value>`, got `{token}`")))?;
    value
        .parse()
        .map_err(|_| Error::format(1, key, format!("cannot parse `{value}`")))
}

/// Parses DBENCH1 text. Generator metadata is not stored in the format: the
/// class set of each environment is rebuilt from its frames and the context
/// shift is `None`.
pub fn parse_episode(text: &str) -> Result<Episode> {
    let mut lines = text.split('\n');
    let header = lines
        .next()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| Error::format(1, "header", "empty file"))?;
    let mut tokens = header.split(' ');
    if tokens.next() != Some(FORMAT_MAGIC) {
        return Err(Error::format(1, "magic", format!("expected {FORMAT_MAGIC}")));
    }
    let dim: usize = header_field(tokens.next(), "D")?;
    let num_envs: usize = header_field(tokens.next(), "N")?;
    let frames_per_env: usize = header_field(tokens.next(), "T")?;
    let rho: f64 = header_field(tokens.next(), "rho")?;
    let seed: u64 = header_field(tokens.next(), "seed")?;
    if let Some(extra) = tokens.next() {
        return Err(Error::format(1, "header", format!("unexpected token `{extra}`")));
    }
    if dim == 0 || num_envs == 0 || frames_per_env == 0 {
        return Err(Error::format(1, "header", "D, N and T must be positive"));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::format(1, "rho", "must lie in [0, 1]"));
    }

    let total = num_envs * frames_per_env;
    let mut environments: Vec<Environment> = (0..num_envs)
        .map(|i| Environment {
            env_index: i,
            frames: Vec::with_capacity(frames_per_env),
            class_set: BTreeSet::new(),
            context_shift: None,
        })
        .collect();

    for t in 0..total {
        let line_no = t + 2;
        let line = lines
            .next()
            .filter(|l| !l.is_empty())
            .ok_or_else(|| Error::format(line_no, "frame", format!("expected {total} frame rows, found {t}")))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + dim {
            return Err(Error::format(
                line_no,
                "features",
                format!("expected {} values for D={dim}, found {}", dim, fields.len().saturating_sub(4)),
            ));
        }
        let int = |k: usize, name: &str| -> Result<u64> {
            fields[k]
                .parse()
                .map_err(|_| Error::format(line_no, name, format!("cannot parse `{}`", fields[k])))
        };
        let frame_t = int(0, "t")? as usize;
        let env_index = int(1, "env_index")? as usize;
        let class = int(2, "class_id")?;
        let labeled = match fields[3] {
            "0" => false,
            "1" => true,
            other => return Err(Error::format(line_no, "labeled", format!("expected 0 or 1, got `{other}`"))),
        };
        if frame_t != t {
            return Err(Error::format(line_no, "t", format!("expected {t}, got {frame_t}")));
        }
        if env_index != t / frames_per_env {
            return Err(Error::format(
                line_no,
                "env_index",
                format!("expected {}, got {env_index}", t / frames_per_env),
            ));
        }
        let class = u32::try_from(class)
            .map_err(|_| Error::format(line_no, "class_id", "exceeds u32"))?;
        let features = fields[4..]
            .iter()
            .enumerate()
            .map(|(d, s)| {
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::format(line_no, format!("f_{d}"), format!("cannot parse `{s}`")))?;
                if !v.is_finite() {
                    return Err(Error::format(line_no, format!("f_{d}"), "non-finite value"));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        let env = &mut environments[env_index];
        env.class_set.insert(ClassId(class));
        env.frames.push(FeatureFrame {
            t,
            env_index,
            features,
            true_class: ClassId(class),
            labeled,
        });
    }
    for (k, rest) in lines.enumerate() {
        if !rest.is_empty() {
            return Err(Error::format(total + 2 + k, "frame", "unexpected trailing row"));
        }
    }

    Episode::new(environments, seed, rho).map_err(|e| match e {
        Error::Validation(m) => Error::format(1, "episode", m),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            feature_dim: 8,
            pool_size: 12,
            classes_per_env: 4,
            frames_per_env: 20,
            environments: 3,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn pool_shape_and_determinism() {
        let config = WorldConfig {
            pool_size: 5,
            feature_dim: 8,
            ..small()
        };
        let a = ClassPool::for_world(&config).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.means.iter().all(|m| m.len() == 8));
        assert_eq!(a, ClassPool::for_world(&config).unwrap());
    }

    #[test]
    fn empty_pool_is_rejected() {
        let config = WorldConfig {
            pool_size: 0,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_class_pool(&config, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn full_persistence_keeps_class_set() {
        let config = WorldConfig {
            persist_prob: 1.0,
            ..small()
        };
        let pool = ClassPool::for_world(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let first = sample_environment(&pool, None, &config, 0, &mut rng).unwrap();
        let second =
            sample_environment(&pool, Some(&first.class_set), &config, 1, &mut rng).unwrap();
        assert_eq!(first.class_set, second.class_set);
    }

    #[test]
    fn forty_percent_label_budget_is_exact() {
        let config = WorldConfig {
            feature_dim: 4,
            ..WorldConfig::default()
        };
        let episode = sample_episode(&config, 11).unwrap();
        assert_eq!(episode.total_frames(), 400);
        for env in &episode.environments {
            assert_eq!(env.frames.iter().filter(|f| f.labeled).count(), 40);
        }
    }

    #[test]
    fn zero_noise_frames_sit_on_centroids() {
        let config = WorldConfig {
            noise_sigma: 0.0,
            context_sigma: 0.0,
            ..small()
        };
        let pool = ClassPool::for_world(&config).unwrap();
        let episode = sample_episode_with_pool(&pool, &config, 5).unwrap();
        for frame in episode.frames() {
            assert_eq!(frame.features, pool.means[frame.true_class.0 as usize]);
        }
    }

    #[test]
    fn every_present_class_gets_a_label() {
        let config = WorldConfig {
            frames_per_env: 12,
            label_fraction: 0.4,
            classes_per_env: 4,
            ..small()
        };
        for seed in 0..200 {
            let episode = sample_episode(&config, seed).unwrap();
            for env in &episode.environments {
                let present: BTreeSet<_> = env.frames.iter().map(|f| f.true_class).collect();
                let labeled: BTreeSet<_> = env
                    .frames
                    .iter()
                    .filter(|f| f.labeled)
                    .map(|f| f.true_class)
                    .collect();
                assert_eq!(present, labeled, "seed {seed}");
            }
        }
    }

    #[test]
    fn classes_per_env_above_pool_is_rejected() {
        let config = small();
        let pool = ClassPool::for_world(&WorldConfig {
            pool_size: 3,
            ..config.clone()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_environment(&pool, None, &config, 0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_environment_episode() {
        let config = WorldConfig {
            environments: 1,
            ..small()
        };
        assert_eq!(sample_episode(&config, 0).unwrap().num_environments(), 1);
    }

    #[test]
    fn format_rejects_short_rows_and_empty_files() {
        let config = WorldConfig {
            feature_dim: 3,
            frames_per_env: 5,
            environments: 1,
            classes_per_env: 2,
            ..small()
        };
        let text = format_episode(&sample_episode(&config, 0).unwrap());
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let last = lines[3].rfind(',').unwrap();
        lines[3].truncate(last);
        let broken = lines.join("\n");
        match parse_episode(&broken) {
            Err(Error::Format { line, field, .. }) => {
                assert_eq!(line, 4);
                assert_eq!(field, "features");
            }
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(parse_episode(""), Err(Error::Format { line: 1, .. })));
    }

    #[test]
    fn format_rejects_non_finite_values() {
        let text = "DBENCH1 D=1 N=1 T=1 rho=1 seed=0\n0,0,0,1,NaN\n";
        assert!(matches!(parse_episode(text), Err(Error::Format { line: 2, .. })));
    }

    #[test]
    fn header_dimension_mismatch_names_the_row() {
        let mut text = String::from("DBENCH1 D=512 N=1 T=1 rho=1 seed=0\n0,0,0,1");
        for _ in 0..511 {
            text.push_str(",0.5");
        }
        text.push('\n');
        assert!(matches!(parse_episode(&text), Err(Error::Format { line: 2, .. })));
    }
}
