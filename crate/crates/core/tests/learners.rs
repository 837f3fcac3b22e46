use std::collections::BTreeMap;
use std::sync::Arc;

use driftbench_core::eval::{run_episode, EvalConfig};
use driftbench_core::learners::prototype::oap_update;
use driftbench_core::learners::train::{meta_train, online_loss, MetaTrainConfig, Objective};
use driftbench_core::learners::{
    AlphaFloor, ContextGate, Distillation, EmbeddingParams, HeadLearner, LearnerConfig, LearnerKind, NamedFloor,
    ProtoRule, PrototypeLearner, PrototypeTable,
};
use driftbench_core::stream::{iterate_episode, ClassId, Prediction};
use driftbench_core::world::{sample_episode, WorldConfig};
use proptest::prelude::*;

fn world(seed: u64) -> WorldConfig {
    WorldConfig {
        feature_dim: 4,
        pool_size: 8,
        classes_per_env: 3,
        frames_per_env: 30,
        environments: 3,
        seed,
        ..WorldConfig::default()
    }
}

fn skewed_embedding() -> Arc<EmbeddingParams> {
    let w = vec![1.0, 0.5, 0.0, -0.3, 0.2, 1.0, 0.1, 0.0, 0.0, -0.4, 1.0, 0.6];
    Arc::new(EmbeddingParams::new(w, Some(vec![0.1, -0.2, 0.3]), 4, 3).unwrap())
}

#[test]
fn snapshots_ignore_later_updates() {
    let episode = sample_episode(&world(1), 0).unwrap();
    let events: Vec<_> = iterate_episode(&episode).unwrap().collect();
    let probe: Vec<_> = episode.environments[0].frames.iter().take(10).collect();
    for kind in LearnerKind::ALL {
        let mut learner = LearnerConfig {
            name: kind,
            ..LearnerConfig::default()
        }
        .build(skewed_embedding())
        .unwrap();
        learner.reset_for_episode();
        learner.on_environment_start(0);
        for e in &events[..20] {
            learner.update(e).unwrap();
        }
        let snapshot = learner.snapshot();
        let before: Vec<Prediction> = probe.iter().map(|f| snapshot.predict(f)).collect();
        for (k, e) in events[20..].iter().take(100).enumerate() {
            if k == 40 {
                learner.on_environment_start(1);
            }
            learner.update(e).unwrap();
        }
        let after: Vec<Prediction> = probe.iter().map(|f| snapshot.predict(f)).collect();
        assert_eq!(before, after, "{kind}");
    }
}

#[test]
fn meta_training_lowers_the_online_loss() {
    let world = WorldConfig {
        noise_sigma: 0.0,
        context_sigma: 0.0,
        ..world(5)
    };
    let config = MetaTrainConfig {
        lr: 0.05,
        objective: Objective::ProtoOml { lambda: 1.0 },
        rule: ProtoRule::Oap,
        stop_grad_prototypes: false,
        logit_scale: 10.0,
    };
    let init = (*skewed_embedding()).clone();
    let held_out: Vec<_> = (1000..1010).map(|s| sample_episode(&world, s).unwrap()).collect();
    let loss = |p: &EmbeddingParams| {
        held_out
            .iter()
            .filter_map(|e| online_loss(p, e, ProtoRule::Oap, 10.0).unwrap())
            .sum::<f64>()
    };
    let seeds: Vec<u64> = (0..60).collect();
    let trained = meta_train(init.clone(), &world, &seeds, &config).unwrap();
    assert!(loss(&trained.params) < loss(&init), "{} vs {}", loss(&trained.params), loss(&init));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn oap_prototype_is_class_mean(
        events in prop::collection::vec((0u32..5, prop::collection::vec(-100.0f64..100.0, 3)), 1..200)
    ) {
        let mut table = PrototypeTable::new();
        let mut sums: BTreeMap<ClassId, (Vec<f64>, usize)> = BTreeMap::new();
        for (t, (c, f)) in events.iter().enumerate() {
            oap_update(&mut table, ClassId(*c), f, t).unwrap();
            let e = sums.entry(ClassId(*c)).or_insert_with(|| (vec![0.0; 3], 0));
            e.0.iter_mut().zip(f).for_each(|(s, v)| *s += v);
            e.1 += 1;
        }
        for (c, (sum, n)) in sums {
            let p = &table.get(c).unwrap().prototype;
            let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            let err = p.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            prop_assert!(err / norm <= 1e-9 || err <= 1e-12, "class {c}: {err}");
        }
    }

    #[test]
    fn lwf_without_distillation_is_base(seed in 0u64..200, lr in 0.01f64..1.0, temperature in 0.5f64..5.0) {
        let episode = sample_episode(&world(seed), seed).unwrap();
        let mut base = HeadLearner::base(skewed_embedding(), lr);
        let mut lwf = HeadLearner::lwf(skewed_embedding(), lr, Distillation { weight: 0.0, temperature }).unwrap();
        let a = run_episode(&mut base, &episode, &EvalConfig::default()).unwrap();
        let b = run_episode(&mut lwf, &episode, &EvalConfig::default()).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(&base.head().rows, &lwf.head().rows);
    }

    #[test]
    fn undecayed_inverse_count_gate_is_oap(seed in 0u64..200) {
        let episode = sample_episode(&world(seed), seed).unwrap();
        let gate = ContextGate { alpha_min: AlphaFloor::Named(NamedFloor::InverseCount), decay: 0.0 };
        let mut cpm = PrototypeLearner::new(skewed_embedding(), ProtoRule::Context(gate), false).unwrap();
        let mut oap = PrototypeLearner::oap(skewed_embedding());
        let a = run_episode(&mut cpm, &episode, &EvalConfig::default()).unwrap();
        let b = run_episode(&mut oap, &episode, &EvalConfig::default()).unwrap();
        prop_assert_eq!(a, b);
        for ((ca, ea), (cb, eb)) in cpm.table().iter().zip(oap.table().iter()) {
            prop_assert_eq!(ca, cb);
            prop_assert_eq!(ea.count, eb.count);
            for (x, y) in ea.prototype.iter().zip(&eb.prototype) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gate_stays_within_floor_and_one(count in 0usize..1000, age in 0usize..1000, decay in 0.0f64..2.0, floor in 0.0f64..1.0) {
        for gate in [
            ContextGate { alpha_min: AlphaFloor::Constant(floor), decay },
            ContextGate { alpha_min: AlphaFloor::Named(NamedFloor::InverseCount), decay },
        ] {
            let alpha = gate.alpha(count, age);
            prop_assert!(alpha <= 1.0 && alpha >= 0.0);
        }
        let alpha = ContextGate { alpha_min: AlphaFloor::Constant(floor), decay }.alpha(count, age);
        prop_assert!(alpha >= floor);
    }
}
