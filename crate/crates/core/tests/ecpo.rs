use onerec::ecpo::*;
use onerec::numerics::gradcheck::check_inputs;
use onerec::numerics::{Array, Graph};
use onerec::policy::{preset, Policy};
use onerec::rng::{seeded, substream};
use onerec::train::{pretrain, PretrainConfig, Setup};
use onerec::world::{rsft_filter, Objective, WorldConfig};
use proptest::prelude::*;
use rand::Rng;

const CLIP: ClipParams = ClipParams {
    eps: 0.2,
    delta: 0.1,
};

fn col(v: &[f64]) -> Array<f64> {
    Array::matrix(v.len(), 1, v.to_vec()).unwrap()
}

#[test]
fn advantages_of_one_two_three() {
    let a = normalize_advantages(&[1.0, 2.0, 3.0]).unwrap();
    let want = [-1.2247, 0.0, 1.2247];
    for (x, w) in a.iter().zip(want) {
        assert!((x - w).abs() < 1e-4);
    }
    // Population std is sqrt(2/3).
    assert!((a[2] - 1.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(normalize_advantages(&[0.4; 5]).unwrap(), vec![0.0; 5]);
    assert!(normalize_advantages(&[1.0]).is_err());
}

#[test]
fn early_clip_worked_examples() {
    let old = early_clipped_old(0.5, 0.1, 0.2, 0.1);
    assert!((old - 0.38462).abs() < 1e-5);
    assert!((old - 0.5 / 1.3).abs() < 1e-15);
    assert!((0.5 / old - 1.3).abs() < 1e-6);
    let old = early_clipped_old(0.05, 0.1, 0.2, 0.1);
    assert_eq!(old, 0.1);
    assert!((0.05 / old - 0.5).abs() < 1e-6);
}

#[test]
fn graph_ratio_never_exceeds_bound() {
    let mut rng = substream(1, "ratio-bound");
    let n = 100_000;
    let log_pi: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..0.0)).collect();
    let log_old: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..0.0)).collect();
    let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut g = Graph::<f64>::new();
    let lp = g.input(col(&log_pi)).unwrap();
    let s = ecpo_objective(&mut g, lp, &log_old, &adv, CLIP).unwrap();
    let bound = 1.0 + CLIP.eps + CLIP.delta;
    assert!(g
        .value(s.ratio)
        .data()
        .iter()
        .all(|&r| r <= bound * (1.0 + 1e-12)));
    for (a, b) in log_pi.iter().zip(&log_old) {
        let (pi, old) = (a.exp(), b.exp());
        assert!(pi / early_clipped_old(pi, old, CLIP.eps, CLIP.delta) <= bound * (1.0 + 1e-12));
    }
}

#[test]
fn unsqueezed_regime_matches_grpo_bit_for_bit() {
    let mut rng = seeded(4);
    let n = 64;
    let log_old: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..-1.0)).collect();
    // Ratios in [0.5, 1.25]: all below 1 + eps + delta.
    let log_pi: Vec<f64> = log_old
        .iter()
        .map(|o| o + rng.random_range(0.5f64.ln()..1.25f64.ln()))
        .collect();
    let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let run = |ecpo: bool| {
        let mut g = Graph::<f64>::new();
        let lp = g.input(col(&log_pi)).unwrap();
        let s = if ecpo {
            ecpo_objective(&mut g, lp, &log_old, &adv, CLIP).unwrap()
        } else {
            grpo_objective(&mut g, lp, &log_old, &adv, CLIP.eps).unwrap()
        };
        let grads = g.backward(s.objective).unwrap();
        (g.scalar(s.objective), grads.wrt(lp).unwrap().clone())
    };
    let (oe, ge) = run(true);
    let (og, gg) = run(false);
    assert_eq!(oe.to_bits(), og.to_bits());
    assert_eq!(ge, gg);
}

#[test]
fn inside_clip_range_is_plain_policy_gradient() {
    let log_old = [-2.0, -3.0, -1.5];
    let log_pi = [-2.05, -2.9, -1.5];
    let adv = [1.0, -0.5, 0.3];
    let mut g = Graph::<f64>::new();
    let lp = g.input(col(&log_pi)).unwrap();
    let s = ecpo_objective(&mut g, lp, &log_old, &adv, CLIP).unwrap();
    let want: f64 = log_pi
        .iter()
        .zip(&log_old)
        .zip(&adv)
        .map(|((p, o), a)| (p - o).exp() * a)
        .sum::<f64>()
        / 3.0;
    assert!((g.scalar(s.objective) - want).abs() < 1e-14);
    assert_eq!(s.clip_fraction, 0.0);
}

#[test]
fn single_positive_sample_at_ratio_one() {
    let mut g = Graph::<f64>::new();
    let lp = g.input(col(&[-1.7])).unwrap();
    let s = ecpo_objective(&mut g, lp, &[-1.7], &[1.0], CLIP).unwrap();
    assert_eq!(g.scalar(s.objective), 1.0);
    // d(pi / pi_old) / d log pi = ratio = 1.
    let grads = g.backward(s.objective).unwrap();
    assert!((grads.wrt(lp).unwrap().data()[0] - 1.0).abs() < 1e-15);
}

#[test]
fn negative_advantage_gradient_is_bounded_at_ratio_100() {
    let log_old = [-6.0];
    let log_pi = [-6.0 + 100f64.ln()];
    let grad = |ecpo: bool| {
        let mut g = Graph::<f64>::new();
        let lp = g.input(col(&log_pi)).unwrap();
        let s = if ecpo {
            ecpo_objective(&mut g, lp, &log_old, &[-1.0], CLIP).unwrap()
        } else {
            grpo_objective(&mut g, lp, &log_old, &[-1.0], CLIP.eps).unwrap()
        };
        g.backward(s.objective).unwrap().wrt(lp).unwrap().data()[0].abs()
    };
    let (e, r) = (grad(true), grad(false));
    assert!((e - 1.3).abs() < 1e-9, "ecpo {e}");
    assert!((r - 100.0).abs() < 1e-9, "grpo {r}");
    assert!(r >= 10.0 * e);
}

#[test]
fn ecpo_gradient_matches_finite_differences_with_frozen_reference() {
    // The early-clipped reference is a constant coefficient per sample, so
    // the oracle freezes it and differentiates the plain surrogate.
    let mut rng = seeded(12);
    for _ in 0..20 {
        let n = 6;
        let log_old: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..-1.0)).collect();
        let log_pi: Vec<f64> = log_old
            .iter()
            .map(|o| o + rng.random_range(-1.0..2.5))
            .collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let log_ref: Vec<f64> = log_pi
            .iter()
            .zip(&log_old)
            .map(|(p, o)| (p - 1.3f64.ln()).max(*o))
            .collect();
        let near_kink = log_pi.iter().zip(&log_ref).any(|(p, r)| {
            let x = (p - r).exp();
            (x - 0.8).abs() < 1e-3 || (x - 1.2).abs() < 1e-3
        });
        if near_kink {
            continue;
        }
        let frozen = |g: &mut Graph<f64>, v: &[onerec::numerics::Var]| {
            Ok(grpo_objective(g, v[0], &log_ref, &adv, CLIP.eps)?.objective)
        };
        let check = check_inputs(&[col(&log_pi)], frozen, &mut rng, n).unwrap();
        assert!(check.rel_error() < 1e-6, "rel err {}", check.rel_error());

        let mut g = Graph::<f64>::new();
        let lp = g.input(col(&log_pi)).unwrap();
        let s = ecpo_objective(&mut g, lp, &log_old, &adv, CLIP).unwrap();
        let ge = g.backward(s.objective).unwrap().wrt(lp).unwrap().clone();
        let mut h = Graph::<f64>::new();
        let lq = h.input(col(&log_pi)).unwrap();
        let r = grpo_objective(&mut h, lq, &log_ref, &adv, CLIP.eps).unwrap();
        let gr = h.backward(r.objective).unwrap().wrt(lq).unwrap().clone();
        for (a, b) in ge.data().iter().zip(gr.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn invalid_clip_parameters_rejected() {
    assert!(ClipParams {
        eps: 0.0,
        delta: 0.1
    }
    .validate()
    .is_err());
    assert!(ClipParams {
        eps: 0.2,
        delta: 0.0
    }
    .validate()
    .is_err());
    assert!(EcpoConfig {
        group_size: 1,
        ..EcpoConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn default_group_is_four_times_inference_k() {
    let cfg = EcpoConfig::default();
    assert_eq!(cfg.group_size, 4 * cfg.generation.width);
    assert_eq!(cfg.sync_period, 50);
}

proptest! {
    #[test]
    fn normalised_advantages_have_zero_mean_unit_std(r in proptest::collection::vec(-10.0f64..10.0, 2..64)) {
        let a = normalize_advantages(&r).unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() <= 1e-10);
        prop_assert!(std == 0.0 || (std - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn early_clip_caps_ratio(pi in 1e-12f64..1.0, old in 1e-12f64..1.0, eps in 0.01f64..0.5, delta in 0.01f64..1.0) {
        let r = pi / early_clipped_old(pi, old, eps, delta);
        prop_assert!(r <= (1.0 + eps + delta) * (1.0 + 1e-12));
    }
}

fn small_setup() -> (Setup, Policy<f64>) {
    let world = WorldConfig {
        users: 32,
        items: 256,
        history_len: 16,
        ..WorldConfig::default()
    };
    let model = preset("toy-s").unwrap();
    let setup = Setup::build(&world, &model, 2).unwrap();
    let mut policy = Policy::<f64>::new(&model, 3).unwrap();
    let cfg = PretrainConfig {
        steps: 5,
        batch: 8,
        ..PretrainConfig::default()
    };
    pretrain(&mut policy, &setup.corpus, &setup.samples(), &cfg).unwrap();
    (setup, policy)
}

fn rl_cfg() -> EcpoConfig {
    EcpoConfig {
        group_size: 8,
        rl_users: 2,
        sft_batch: 4,
        steps: 3,
        sync_period: 1,
        reward: RewardSource::Truth(Objective::Vtr),
        format_mode: Some(onerec::reward::FormatMode::Random),
        format_k: 2,
        generation: onerec::generation::GenerationRequest {
            constrain_to_trie: true,
            ..Default::default()
        },
        ..EcpoConfig::default()
    }
}

#[test]
fn posttraining_steps_are_finite_and_reproducible() {
    let (setup, base) = small_setup();
    let rsft = onerec::train::session_samples(&rsft_filter(&setup.log.sessions));
    let pool: Vec<usize> = (0..setup.world.users()).collect();
    let data = RlData {
        world: &setup.world,
        pscore: None,
    };
    let run = || {
        let mut p = base.clone();
        let m = posttrain(&mut p, &setup.corpus, &rsft, &pool, &data, &rl_cfg()).unwrap();
        (p, m)
    };
    let (p1, m1) = run();
    let (p2, m2) = run();
    assert_eq!(m1.len(), 3);
    for m in &m1 {
        assert!(m.ntp_loss.is_finite());
        assert!((0.0..=1.0).contains(&m.legality_rate));
        assert!(m.rl_terms > 0);
    }
    assert_eq!(
        serde_json::to_string(&m1).unwrap(),
        serde_json::to_string(&m2).unwrap()
    );
    assert_eq!(p1.store, p2.store);
    assert_ne!(p1.store, base.store);
}

#[test]
fn current_policy_mode_refreshes_sampler() {
    let (setup, mut policy) = small_setup();
    let rsft = onerec::train::session_samples(&rsft_filter(&setup.log.sessions));
    let pool: Vec<usize> = (0..8).collect();
    let data = RlData {
        world: &setup.world,
        pscore: None,
    };
    let mut cfg = rl_cfg();
    cfg.sync_period = 2;
    let mut tr = PostTrainer::new(&policy, &cfg).unwrap();
    posttrain_step(&mut tr, &mut policy, &setup.corpus, &rsft, &pool, &data).unwrap();
    assert_ne!(tr.sampler.store, policy.store);
    posttrain_step(&mut tr, &mut policy, &setup.corpus, &rsft, &pool, &data).unwrap();
    assert_eq!(tr.sampler.store, policy.store);

    cfg.reference = ReferenceMode::Pretrained;
    let frozen = policy.clone();
    let mut tr = PostTrainer::new(&policy, &cfg).unwrap();
    for _ in 0..2 {
        posttrain_step(&mut tr, &mut policy, &setup.corpus, &rsft, &pool, &data).unwrap();
    }
    assert_eq!(tr.sampler.store, frozen.store);
}

#[test]
fn pscore_source_needs_a_model() {
    let (setup, _) = small_setup();
    let data = RlData {
        world: &setup.world,
        pscore: None,
    };
    assert!(data.score(RewardSource::PScore, 0, &[1, 2]).is_err());
    let r = data
        .score(RewardSource::Truth(Objective::Vtr), 0, &[1, 2])
        .unwrap();
    assert_eq!(r[0], setup.world.true_reward(0, 1).get(Objective::Vtr));
}
