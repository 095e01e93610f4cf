use onerec::generation::GeneratedItem;
use onerec::numerics::gradcheck::check_params;
use onerec::reward::*;
use onerec::rng::{seeded, substream};
use onerec::stats::{auc, mean, paired_t_greater};
use onerec::tokenizer::Trie;
use onerec::world::{
    generate_world, simulate_sessions, LoggingPolicy, Objective, World, WorldConfig,
};
use rand::Rng;

fn uniform_world(link_scale: f64) -> WorldConfig {
    WorldConfig {
        users: 128,
        items: 512,
        link_scale,
        viral_fraction: 0.0,
        exploration: 1.0,
        history_len: 48,
        ..WorldConfig::default()
    }
}

fn trained(
    world: &World,
    seed: u64,
    epochs: usize,
) -> (PScoreModel<f64>, PScoreFeatures, Vec<LabeledPair>) {
    let log = simulate_sessions(world, &LoggingPolicy::from_world(world), 2, seed);
    let feats = PScoreFeatures::from_world(world, &log);
    let pairs = pairs_from_log(&log);
    let cfg = PScoreConfig {
        epochs,
        ..PScoreConfig::default()
    };
    let mut m = PScoreModel::for_world(world, &feats, &cfg).unwrap();
    m.train(&feats, &pairs).unwrap();
    (m, feats, pairs)
}

#[test]
fn vtr_tower_ranks_held_out_pairs() {
    let world = generate_world(&uniform_world(6.0)).unwrap();
    let log = simulate_sessions(&world, &LoggingPolicy::from_world(&world), 2, 1);
    let feats = PScoreFeatures::from_world(&world, &log);
    let pairs = pairs_from_log(&log);
    let split = pairs.len() * 4 / 5;
    let mut m = PScoreModel::<f64>::for_world(&world, &feats, &PScoreConfig::default()).unwrap();
    let losses = m.train(&feats, &pairs[..split]).unwrap();
    assert!(losses.last().unwrap() < losses.first().unwrap());
    let test = &pairs[split..];
    let users: Vec<usize> = test.iter().map(|p| p.user).collect();
    let items: Vec<usize> = test.iter().map(|p| p.item).collect();
    let pred = m.predict(&feats, &users, &items).unwrap();
    let scores: Vec<f64> = pred
        .iter()
        .map(|p| p.towers[Objective::Vtr.index()])
        .collect();
    let labels: Vec<bool> = test
        .iter()
        .map(|p| p.label(Objective::Vtr.index()) > 0.5)
        .collect();
    let a = auc(&scores, &labels).unwrap();
    assert!(a > 0.9, "held-out vtr AUC {a}");
    for p in &pred {
        assert!(p.pscore > 0.0 && p.pscore < 1.0 && p.pscore.is_finite());
        assert!(p.towers.iter().all(|t| *t > 0.0 && *t < 1.0));
    }
}

#[test]
fn towers_converge_to_base_rate_on_uninformative_labels() {
    let world = generate_world(&WorldConfig {
        users: 32,
        items: 64,
        ..WorldConfig::default()
    })
    .unwrap();
    let log = simulate_sessions(&world, &LoggingPolicy::from_world(&world), 1, 2);
    let feats = PScoreFeatures::from_world(&world, &log);
    let mut rng = seeded(5);
    // Ltr is noise at rate 0.3, Cmtr is constantly 0.
    let pairs: Vec<LabeledPair> = (0..4000)
        .map(|_| {
            let mut labels = 0u8;
            if rng.random::<f64>() < 0.3 {
                labels |= 1 << Objective::Ltr.index();
            }
            LabeledPair {
                user: rng.random_range(0..32),
                item: rng.random_range(0..64),
                labels,
            }
        })
        .collect();
    let cfg = PScoreConfig {
        epochs: 15,
        ..PScoreConfig::default()
    };
    let mut m = PScoreModel::<f64>::for_world(&world, &feats, &cfg).unwrap();
    m.train(&feats, &pairs).unwrap();
    let users: Vec<usize> = pairs.iter().map(|p| p.user).collect();
    let items: Vec<usize> = pairs.iter().map(|p| p.item).collect();
    let pred = m.predict(&feats, &users, &items).unwrap();
    let base = pairs
        .iter()
        .map(|p| p.label(Objective::Ltr.index()))
        .sum::<f64>()
        / pairs.len() as f64;
    let ltr = mean(
        &pred
            .iter()
            .map(|p| p.towers[Objective::Ltr.index()])
            .collect::<Vec<_>>(),
    );
    let cmtr = mean(
        &pred
            .iter()
            .map(|p| p.towers[Objective::Cmtr.index()])
            .collect::<Vec<_>>(),
    );
    assert!((ltr - base).abs() < 0.03, "ltr {ltr} vs base {base}");
    assert!(cmtr < 0.02, "cmtr {cmtr}");
}

#[test]
fn fusion_and_tower_gradients_match_finite_differences() {
    let world = generate_world(&WorldConfig {
        users: 12,
        items: 20,
        content_tokens: 2,
        content_dim: 4,
        history_len: 8,
        ..WorldConfig::default()
    })
    .unwrap();
    let log = simulate_sessions(&world, &LoggingPolicy::from_world(&world), 1, 3);
    let feats = PScoreFeatures::from_world(&world, &log);
    let cfg = PScoreConfig {
        emb_dim: 3,
        hidden: 5,
        tower_hidden: 4,
        ..PScoreConfig::default()
    };
    let m = PScoreModel::<f64>::for_world(&world, &feats, &cfg).unwrap();
    let pairs: Vec<LabeledPair> = pairs_from_log(&log).into_iter().take(9).collect();
    let users: Vec<usize> = pairs.iter().map(|p| p.user).collect();
    let items: Vec<usize> = pairs.iter().map(|p| p.item).collect();
    let mut rng = substream(4, "pscore-gradcheck");
    for _ in 0..5 {
        let check = check_params(
            &m.store,
            |g, store| {
                let probe = PScoreModel {
                    store: store.clone(),
                    ..m.clone()
                };
                let v = probe.forward(g, &feats, &users, &items)?;
                probe.loss(g, &v, &pairs)
            },
            &mut rng,
            30,
        )
        .unwrap();
        assert!(check.rel_error() < 1e-5, "rel err {}", check.rel_error());
    }
}

#[test]
fn identical_inputs_give_identical_scores() {
    let world = generate_world(&WorldConfig {
        users: 16,
        items: 32,
        ..WorldConfig::default()
    })
    .unwrap();
    let log = simulate_sessions(&world, &LoggingPolicy::from_world(&world), 1, 3);
    let mut feats = PScoreFeatures::from_world(&world, &log);
    let mut m = PScoreModel::<f64>::for_world(&world, &feats, &PScoreConfig::default()).unwrap();
    // Give item 5 the features and id embedding of item 2.
    feats.item[5] = feats.item[2].clone();
    let row: Vec<f64> = m.store.get(m.iid).value().row(2).to_vec();
    let cols = row.len();
    m.store.get_mut(m.iid).value_mut().data_mut()[5 * cols..6 * cols].copy_from_slice(&row);
    for u in 0..16 {
        assert_eq!(
            m.pscore(&feats, u, 2).unwrap(),
            m.pscore(&feats, u, 5).unwrap()
        );
    }
}

#[test]
fn raising_true_engagement_raises_trained_pscore() {
    let cfg = uniform_world(4.0);
    let base = generate_world(&cfg).unwrap();
    let mut boosted = base.clone();
    let targets: Vec<usize> = (0..cfg.items).step_by(16).collect();
    for &i in &targets {
        boosted.item_bias[i] = 2.0;
    }
    let (ma, fa, _) = trained(&base, 7, 6);
    let (mb, fb, _) = trained(&boosted, 7, 6);
    let users: Vec<usize> = (0..cfg.users).collect();
    let avg = |m: &PScoreModel<f64>, f: &PScoreFeatures, i: usize| {
        let preds = m.predict(f, &users, &vec![i; users.len()]).unwrap();
        mean(&preds.iter().map(|p| p.pscore).collect::<Vec<_>>())
    };
    let a: Vec<f64> = targets.iter().map(|&i| avg(&ma, &fa, i)).collect();
    let b: Vec<f64> = targets.iter().map(|&i| avg(&mb, &fb, i)).collect();
    let (_, p) = paired_t_greater(&b, &a).unwrap();
    assert!(p < 0.05, "p = {p}");
}

#[test]
fn checkpoint_round_trip() {
    let world = generate_world(&WorldConfig {
        users: 8,
        items: 16,
        ..WorldConfig::default()
    })
    .unwrap();
    let log = simulate_sessions(&world, &LoggingPolicy::from_world(&world), 1, 3);
    let feats = PScoreFeatures::from_world(&world, &log);
    let m = PScoreModel::<f64>::for_world(&world, &feats, &PScoreConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ps.bin");
    m.save(&path).unwrap();
    let back = PScoreModel::<f64>::load(&path).unwrap();
    assert_eq!(back.store, m.store);
    assert_eq!(
        back.pscore(&feats, 1, 3).unwrap(),
        m.pscore(&feats, 1, 3).unwrap()
    );
}

fn items(legal: &[bool]) -> Vec<GeneratedItem> {
    let mut t = Trie::new(1);
    t.insert(&[0], 0);
    legal
        .iter()
        .enumerate()
        .map(|(k, &l)| GeneratedItem::new(vec![if l { 0 } else { 1 }], -(k as f64) - 0.5, &t))
        .collect()
}

#[test]
fn format_reward_selection() {
    let mut rng = seeded(1);
    let all_legal = items(&[true; 128]);
    let a = format_advantages(&all_legal, FormatMode::TopK, 5, &mut rng).unwrap();
    assert_eq!(a.iter().filter(|x| **x == Some(1.0)).count(), 5);
    // Top-5 by log-prob are the first five.
    assert!(a[..5].iter().all(|x| *x == Some(1.0)));
    let a = format_advantages(&all_legal, FormatMode::Random, 5, &mut rng).unwrap();
    assert_eq!(a.iter().flatten().count(), 5);

    let none_legal = items(&[false; 16]);
    for mode in [FormatMode::TopK, FormatMode::Random] {
        let a = format_advantages(&none_legal, mode, 5, &mut rng).unwrap();
        assert!(a.iter().all(Option::is_none));
    }
    assert!(format_advantages(&none_legal, FormatMode::TopK, 17, &mut rng).is_err());
}

#[test]
fn sir_arithmetic() {
    let r = apply_sir(&[0.8, 0.8], &[true, false], 0.2, 0.5, 0.3).unwrap();
    assert!((r[0] - 0.4).abs() < 1e-15);
    assert_eq!(r[1], 0.8);
    let r = apply_sir(&[0.8, 0.6], &[true, true], 0.3, 0.5, 0.3).unwrap();
    assert_eq!(r, vec![0.8, 0.6]);
    assert!(apply_sir(&[0.8], &[true], 0.2, 1.0, 0.3).is_err());
    assert!(apply_sir(&[0.8], &[true], 1.2, 0.5, 0.3).is_err());
}

#[test]
fn viral_exposure_counts_legal_items() {
    let mut t = Trie::new(1);
    t.insert(&[0], 0);
    t.insert(&[1], 1);
    t.insert(&[1], 2);
    let viral = [true, false, true];
    let gen = vec![
        GeneratedItem::new(vec![0], -1.0, &t),
        GeneratedItem::new(vec![1], -1.0, &t),
        GeneratedItem::new(vec![2], -1.0, &t),
    ];
    // Item 0 is viral, leaf [1] is half viral, [2] is illegal.
    assert!((viral_exposure(&gen, &viral) - 0.75).abs() < 1e-15);
}
