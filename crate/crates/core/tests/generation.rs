use onerec::error::Result;
use onerec::generation::Strategy;
use onerec::generation::*;
use onerec::policy::{preset, Policy};
use onerec::rng::{seeded, substream};
use onerec::stats::paired_t_greater;
use onerec::tokenizer::Trie;
use onerec::train::Setup;
use onerec::world::WorldConfig;
use proptest::prelude::*;
use rand::Rng;

/// Next-code logits as a pure function of the prefix.
struct TableModel<F: Fn(&[usize]) -> Vec<f64>> {
    n_t: usize,
    l_t: usize,
    f: F,
}

impl<F: Fn(&[usize]) -> Vec<f64>> StepModel for TableModel<F> {
    fn n_t(&self) -> usize {
        self.n_t
    }
    fn l_t(&self) -> usize {
        self.l_t
    }
    fn logits(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| (self.f)(p)).collect())
    }
}

// Deterministic pseudo-random logits keyed on the prefix.
fn hashed_logits(prefix: &[usize], n_t: usize, salt: u64) -> Vec<f64> {
    let mut key = salt;
    for &c in prefix {
        key = key.wrapping_mul(1_000_003).wrapping_add(c as u64 + 1);
    }
    let mut rng = seeded(key);
    (0..n_t).map(|_| rng.random_range(-3.0..3.0)).collect()
}

fn full_trie(n_t: usize, l_t: usize) -> Trie {
    let mut t = Trie::new(l_t);
    for (i, codes) in enumerate_all(n_t, l_t).into_iter().enumerate() {
        t.insert(&codes, i);
    }
    t
}

fn enumerate_all(n_t: usize, l_t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..l_t {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..n_t).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out
}

// Brute-force sequence log-probability: independent log-softmax per step.
fn brute_log_prob(model: &mut dyn StepModel, codes: &[usize]) -> f64 {
    let mut lp = 0.0;
    for j in 0..codes.len() {
        let l = &model.logits(&[&codes[..j]]).unwrap()[0];
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
        lp += l[codes[j]] - m - z.ln();
    }
    lp
}

fn two_by_two() -> TableModel<impl Fn(&[usize]) -> Vec<f64>> {
    TableModel {
        n_t: 2,
        l_t: 2,
        f: |p: &[usize]| {
            let probs: [f64; 2] = match p {
                [] => [0.6, 0.4],
                [0] => [0.9, 0.1],
                _ => [0.5, 0.5],
            };
            probs.iter().map(|x| x.ln()).collect()
        },
    }
}

#[test]
fn two_step_example_matches_brute_force() {
    let mut m = two_by_two();
    let out = beam_search(&mut m, &full_trie(2, 2), 4, false).unwrap();
    assert_eq!(out[0].codes, vec![0, 0]);
    assert!((out[0].log_prob - 0.54f64.ln()).abs() < 1e-12);
    let mut brute: Vec<(Vec<usize>, f64)> = enumerate_all(2, 2)
        .into_iter()
        .map(|c| {
            let lp = brute_log_prob(&mut m, &c);
            (c, lp)
        })
        .collect();
    brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let got: Vec<Vec<usize>> = out.iter().map(|i| i.codes.clone()).collect();
    let want: Vec<Vec<usize>> = brute.iter().map(|b| b.0.clone()).collect();
    assert_eq!(got, want);
    assert_eq!(got, vec![vec![0, 0], vec![1, 0], vec![1, 1], vec![0, 1]]);
}

#[test]
fn full_width_beam_equals_exhaustive_ranking() {
    let mut m = TableModel {
        n_t: 8,
        l_t: 3,
        f: |p: &[usize]| hashed_logits(p, 8, 5),
    };
    let trie = full_trie(8, 3);
    let out = beam_search(&mut m, &trie, 512, false).unwrap();
    assert_eq!(out.len(), 512);
    let mut brute: Vec<(Vec<usize>, f64)> = enumerate_all(8, 3)
        .into_iter()
        .map(|c| {
            let lp = brute_log_prob(&mut m, &c);
            (c, lp)
        })
        .collect();
    brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (o, (c, lp)) in out.iter().zip(&brute) {
        assert_eq!(&o.codes, c);
        assert!((o.log_prob - lp).abs() <= 1e-10);
        assert!(o.log_prob <= 0.0);
    }
}

#[test]
fn single_path_trie_forces_that_path() {
    let mut t = Trie::new(3);
    t.insert(&[5, 1, 7], 42);
    let mut m = TableModel {
        n_t: 8,
        l_t: 3,
        f: |p: &[usize]| hashed_logits(p, 8, 1),
    };
    let out = beam_search(&mut m, &t, 4, true).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].codes, vec![5, 1, 7]);
    assert!(out[0].legal);
    assert_eq!(out[0].item_ids, vec![42]);
}

#[test]
fn constrained_beam_on_empty_trie_errors() {
    let mut m = two_by_two();
    assert!(beam_search(&mut m, &Trie::new(2), 2, true).is_err());
    assert!(legality_rate(&[]).is_err());
}

#[test]
fn top_k_one_is_greedy_beam_one() {
    let mut m = TableModel {
        n_t: 8,
        l_t: 3,
        f: |p: &[usize]| hashed_logits(p, 8, 9),
    };
    let trie = full_trie(8, 3);
    let greedy = beam_search(&mut m, &trie, 1, false).unwrap();
    let req = GenerationRequest {
        strategy: Strategy::TopkTopp,
        width: 20,
        top_k: 1,
        ..GenerationRequest::default()
    };
    let samples = sample_topk_topp(&mut m, &trie, &req, &mut seeded(3)).unwrap();
    for s in &samples {
        assert_eq!(s.codes, greedy[0].codes);
        assert!((s.log_prob - greedy[0].log_prob).abs() < 1e-12);
    }
    let cold = GenerationRequest {
        top_k: usize::MAX,
        temperature: 1e-4,
        ..req
    };
    for s in sample_topk_topp(&mut m, &trie, &cold, &mut seeded(4)).unwrap() {
        assert_eq!(s.codes, greedy[0].codes);
    }
}

#[test]
fn untruncated_sampling_matches_sequence_distribution() {
    let mut m = TableModel {
        n_t: 3,
        l_t: 2,
        f: |p: &[usize]| hashed_logits(p, 3, 21),
    };
    let trie = full_trie(3, 2);
    let n = 100_000;
    let req = GenerationRequest {
        strategy: Strategy::TopkTopp,
        width: n,
        top_k: 3,
        top_p: 1.0,
        ..GenerationRequest::default()
    };
    let out = sample_topk_topp(&mut m, &trie, &req, &mut substream(2, "freq")).unwrap();
    for codes in enumerate_all(3, 2) {
        let p = brute_log_prob(&mut m, &codes).exp();
        let hits = out.iter().filter(|s| s.codes == codes).count() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (hits - n as f64 * p).abs() <= 3.0 * sd,
            "{codes:?}: {hits} vs {}",
            n as f64 * p
        );
    }
}

#[test]
fn top_p_keeps_smallest_covering_prefix() {
    let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
    let d = truncated_distribution(&logits, &[0, 1, 2], 1.0, 3, 0.75);
    assert_eq!(d.len(), 2);
    assert!((d[0].1 - 0.625).abs() < 1e-12 && (d[1].1 - 0.375).abs() < 1e-12);
    let d = truncated_distribution(&logits, &[0, 1, 2], 1.0, 1, 1.0);
    assert_eq!(d, vec![(0, 1.0)]);
}

#[test]
fn uniform_policy_hits_a_single_item_at_rate_one_in_512() {
    let mut t = Trie::new(3);
    t.insert(&[3, 3, 3], 0);
    let mut m = TableModel {
        n_t: 8,
        l_t: 3,
        f: |_: &[usize]| vec![0.0; 8],
    };
    let n = 50_000;
    let req = GenerationRequest {
        strategy: Strategy::TopkTopp,
        width: n,
        ..GenerationRequest::default()
    };
    let out = sample_topk_topp(&mut m, &t, &req, &mut substream(1, "legality")).unwrap();
    let rate = legality_rate(&out).unwrap();
    let p = 1.0 / 512.0;
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    assert!((rate - p).abs() <= 3.0 * sd, "rate {rate}");
}

#[test]
fn pass_at_one_is_greedy_reward() {
    let mut m = TableModel {
        n_t: 8,
        l_t: 3,
        f: |p: &[usize]| hashed_logits(p, 8, 33),
    };
    let trie = full_trie(8, 3);
    let reward = |codes: &[usize]| codes.iter().map(|&c| c as f64).sum::<f64>();
    // Greedy chain by hand.
    let mut greedy = Vec::new();
    for _ in 0..3 {
        let l = hashed_logits(&greedy, 8, 33);
        let best = (0..8)
            .max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a)))
            .unwrap();
        greedy.push(best);
    }
    let out = beam_search(&mut m, &trie, 1, false).unwrap();
    let r: Vec<Vec<f64>> = vec![out.iter().map(|i| reward(&i.codes)).collect()];
    let p = pass_at_k(&r, &[1]).unwrap();
    assert_eq!(p.mean[0], reward(&greedy));
}

#[test]
fn item_reward_averages_collisions_and_zeroes_illegal() {
    let mut t = Trie::new(1);
    t.insert(&[0], 4);
    t.insert(&[0], 6);
    let legal = GeneratedItem::new(vec![0], -0.1, &t);
    let illegal = GeneratedItem::new(vec![1], -0.1, &t);
    let mut f = |i: usize| i as f64;
    assert_eq!(item_reward(&legal, &mut f), 5.0);
    assert_eq!(item_reward(&illegal, &mut f), 0.0);
}

proptest! {
    #[test]
    fn best_of_k_is_monotone(rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 16), 1..8)) {
        let p = pass_at_k(&rows, &[1, 2, 4, 8, 16]).unwrap();
        for u in &p.per_user {
            for w in u.windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
        }
    }

    #[test]
    fn constrained_generation_is_always_legal(
        leaves in proptest::collection::btree_set((0usize..6, 0usize..6, 0usize..6), 1..20),
        salt in 0u64..1000,
        width in 1usize..40,
        sample in proptest::bool::ANY,
    ) {
        let mut t = Trie::new(3);
        for (i, (a, b, c)) in leaves.iter().enumerate() {
            t.insert(&[*a, *b, *c], i);
        }
        let mut m = TableModel { n_t: 6, l_t: 3, f: move |p: &[usize]| hashed_logits(p, 6, salt) };
        let req = GenerationRequest {
            strategy: if sample { Strategy::TopkTopp } else { Strategy::Beam },
            width,
            constrain_to_trie: true,
            top_k: 3,
            top_p: 0.9,
            ..GenerationRequest::default()
        };
        let out = generate(&mut m, &t, &req, &mut seeded(salt)).unwrap();
        prop_assert_eq!(legality_rate(&out).unwrap(), 1.0);
        if !sample {
            prop_assert_eq!(out.len(), width.min(leaves.len()));
            for w in out.windows(2) {
                prop_assert!(w[0].log_prob >= w[1].log_prob && w[0].codes != w[1].codes);
            }
        }
    }
}

#[test]
fn larger_k_finds_better_vtr_on_toy_world() {
    let world_cfg = WorldConfig {
        users: 200,
        items: 512,
        history_len: 24,
        ..WorldConfig::default()
    };
    let model = preset("toy-s").unwrap();
    let setup = Setup::build(&world_cfg, &model, 3).unwrap();
    let policy = Policy::<f64>::new(&model, 5).unwrap();
    let (mut best8, mut best64) = (Vec::new(), Vec::new());
    for u in 0..world_cfg.users {
        let mut step = PolicyStep::new(&policy, &setup.corpus.contexts[u]).unwrap();
        let out = beam_search(&mut step, &setup.corpus.trie, 64, true).unwrap();
        let r: Vec<f64> = out
            .iter()
            .map(|i| {
                item_reward(i, &mut |id| {
                    setup
                        .world
                        .true_reward(u, id)
                        .get(onerec::world::Objective::Vtr)
                })
            })
            .collect();
        let p = pass_at_k(&[r], &[8, 64]).unwrap();
        best8.push(p.mean[0]);
        best64.push(p.mean[1]);
    }
    let (_, pval) = paired_t_greater(&best64, &best8).unwrap();
    assert!(pval < 0.05, "p = {pval}");
}
