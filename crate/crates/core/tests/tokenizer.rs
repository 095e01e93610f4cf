use std::collections::BTreeSet;

use onerec::nn::MultiHeadAttention;
use onerec::numerics::gradcheck::{check_inputs, check_params};
use onerec::numerics::{Array, AttnLayout, Graph, ParamStore};
use onerec::rng::{normal_vec, seeded};
use onerec::tokenizer::io::{read_codebook, read_codes_jsonl, write_codebook, write_codes_jsonl};
use onerec::tokenizer::kmeans::{lloyd, nearest, plus_plus_init, sq_dist};
use onerec::tokenizer::metrics::code_stats;
use onerec::tokenizer::pairs::CoEngagement;
use onerec::tokenizer::*;
use proptest::prelude::*;
use rand::Rng;
use std::sync::Arc;

fn blob_corpus(
    n: usize,
    dim: usize,
    centres: usize,
    spread: f64,
    seed: u64,
) -> (Array<f64>, Vec<usize>) {
    let mut rng = seeded(seed);
    let cs: Vec<Vec<f64>> = (0..centres)
        .map(|_| normal_vec(&mut rng, dim, 3.0))
        .collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % centres;
        let z: Vec<f64> = normal_vec(&mut rng, dim, spread);
        data.extend(cs[c].iter().zip(z).map(|(a, b)| a + b));
        labels.push(c);
    }
    (Array::matrix(n, dim, data).unwrap(), labels)
}

#[test]
fn single_token_cross_attention_returns_the_token() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded(3);
    let attn = MultiHeadAttention::new(&mut store, &mut rng, "a", 4, 1);
    for lin in [&attn.wv, &attn.wo] {
        *store.get_mut(lin.w).value_mut() = Array::identity(4);
    }
    let token = Array::row_vector(vec![0.3, -1.0, 2.0, 0.5]).unwrap();
    let mut g = Graph::new();
    let q = g
        .constant(Array::matrix(3, 4, normal_vec(&mut rng, 12, 1.0)).unwrap())
        .unwrap();
    let m = g.constant(token.clone()).unwrap();
    let out = attn
        .forward(&mut g, &store, q, m, Arc::new(AttnLayout::full(3, 1)))
        .unwrap();
    for r in 0..3 {
        for (a, b) in g.value(out).row(r).iter().zip(token.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn default_aligner_output_shape() {
    let cfg = AlignerConfig {
        ffn_hidden: 64,
        ..AlignerConfig::default()
    };
    assert_eq!((cfg.n_queries, cfg.d_t), (4, 512));
    let aligner = ItemAligner::<f64>::new(cfg.clone(), 1);
    let mut rng = seeded(2);
    let item = Array::matrix(
        cfg.n_tokens,
        cfg.d_t,
        normal_vec(&mut rng, cfg.n_tokens * cfg.d_t, 1.0),
    )
    .unwrap();
    let mut g = Graph::new();
    let tokens = g.constant(item).unwrap();
    let q = g.param(&aligner.store, aligner.queries);
    let out = qformer_compress(&mut g, &aligner.store, &aligner.blocks, q, tokens, 1).unwrap();
    assert_eq!(g.shape(out), &[4, 512]);
}

#[test]
fn qformer_two_layer_gradient() {
    let cfg = AlignerConfig {
        n_tokens: 5,
        d_t: 8,
        n_queries: 3,
        layers: 2,
        heads: 2,
        ffn_hidden: 12,
        ..AlignerConfig::default()
    };
    let aligner = ItemAligner::<f64>::new(cfg.clone(), 7);
    let mut rng = seeded(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let items: Vec<Array<f64>> = (0..2)
            .map(|_| Array::matrix(5, 8, normal_vec(&mut rng, 40, 1.0)).unwrap())
            .collect();
        let w = Array::matrix(2, 24, normal_vec(&mut rng, 48, 1.0)).unwrap();
        let res = check_params(
            &aligner.store,
            |g, store| {
                let a = ItemAligner {
                    store: store.clone(),
                    ..aligner.clone()
                };
                let refs: Vec<&Array<f64>> = items.iter().collect();
                let e = a.embed(g, &refs)?;
                let wv = g.constant(w.clone())?;
                let p = g.mul(e, wv)?;
                g.sum(p)
            },
            &mut rng,
            30,
        )
        .unwrap();
        worst = worst.max(res.rel_error());
    }
    assert!(worst < 1e-5, "worst {worst:e}");
}

fn direct_infonce(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |x: &[f64], y: &[f64]| {
        let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        d / (nx * ny)
    };
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let s: Vec<f64> = (0..n).map(|j| cos(&a[i], &b[j]) / tau).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - s[i];
    }
    total / n as f64
}

fn infonce(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> onerec::Result<f64> {
    let mut g = Graph::new();
    let av = g.constant(Array::from_rows(a).unwrap())?;
    let bv = g.constant(Array::from_rows(b).unwrap())?;
    let l = i2i_contrastive_loss(&mut g, av, bv, tau)?;
    Ok(g.scalar(l))
}

#[test]
fn contrastive_loss_examples() {
    let same = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
    assert!((infonce(&same, &same, 0.07).unwrap() - 2f64.ln()).abs() < 1e-12);

    let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert!(infonce(&a, &a, 0.01).unwrap() < 1e-40);

    let mut rng = seeded(5);
    let a: Vec<Vec<f64>> = (0..8).map(|_| normal_vec(&mut rng, 6, 1.0)).collect();
    let b: Vec<Vec<f64>> = (0..8).map(|_| normal_vec(&mut rng, 6, 1.0)).collect();
    assert!((infonce(&a, &b, 0.07).unwrap() - direct_infonce(&a, &b, 0.07)).abs() < 1e-10);

    assert!(infonce(&a[..1], &b[..1], 0.07).is_err());
}

#[test]
fn contrastive_loss_gradient() {
    let mut rng = seeded(9);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = vec![
            Array::matrix(4, 6, normal_vec(&mut rng, 24, 1.0)).unwrap(),
            Array::matrix(4, 6, normal_vec(&mut rng, 24, 1.0)).unwrap(),
        ];
        let res = check_inputs(
            &x,
            |g, v| i2i_contrastive_loss(g, v[0], v[1], 0.5),
            &mut rng,
            20,
        )
        .unwrap();
        worst = worst.max(res.rel_error());
    }
    assert!(worst < 1e-5, "worst {worst:e}");
}

#[test]
fn item_pairs_match_exhaustive_oracle() {
    let mut rng = seeded(21);
    let items = 40;
    let logs: Vec<Vec<usize>> = (0..100)
        .map(|u| {
            let len = 3 + u % 6;
            (0..len).map(|_| rng.random_range(0..items)).collect()
        })
        .collect();
    let cfg = PairConfig {
        threshold: 0.25,
        recent: 4,
    };
    let set = build_item_pairs(&logs, &cfg).unwrap();

    let audience: Vec<BTreeSet<usize>> = (0..items)
        .map(|i| (0..logs.len()).filter(|&u| logs[u].contains(&i)).collect())
        .collect();
    let sim = |a: usize, b: usize| {
        let both = audience[a].intersection(&audience[b]).count() as f64;
        if both == 0.0 {
            0.0
        } else {
            both / ((audience[a].len() * audience[b].len()) as f64).sqrt()
        }
    };
    let mut expected_i2i = BTreeSet::new();
    for a in 0..items {
        for b in a + 1..items {
            let s = sim(a, b);
            if s >= cfg.threshold {
                expected_i2i.insert((a, b));
            }
        }
    }
    let got_i2i: BTreeSet<(usize, usize)> = set
        .pairs
        .iter()
        .filter(|p| p.weight >= cfg.threshold)
        .map(|p| (p.a, p.b))
        .collect();
    assert_eq!(got_i2i, expected_i2i);

    let co = CoEngagement::new(&logs);
    for p in &set.pairs {
        assert!(p.a < p.b && p.weight > 0.0);
        assert!((co.similarity(p.a, p.b) - sim(p.a, p.b)).abs() < 1e-12);
        assert!((p.weight - sim(p.a, p.b)).abs() < 1e-12);
    }
}

#[test]
fn k_equals_n_single_layer_is_lossless() {
    let (emb, _) = blob_corpus(16, 6, 16, 0.5, 4);
    let fit = fit_rq_kmeans(&emb, (2, 3), 16, 1, 3).unwrap();
    let m = tokenizer_metrics(&emb, &fit.codes, &fit.stack);
    assert!(m.recon_loss < 1e-24);
    assert_eq!(m.utilization, vec![1.0]);
    assert!(fit_rq_kmeans(&emb, (2, 3), 17, 1, 3).is_err());
}

#[test]
fn default_depth_is_three_layers() {
    let (emb, _) = blob_corpus(64, 4, 4, 0.5, 4);
    let fit = fit_rq_kmeans(&emb, (1, 4), 8, 3, 1).unwrap();
    assert_eq!(fit.stack.l_t(), 3);
    assert!(fit.codes.iter().all(|c| c.len() == 3));
}

/// Plain Lloyd iterations written independently of the library loop.
fn oracle_lloyd(points: &[Vec<f64>], mut cents: Vec<Vec<f64>>) -> Vec<usize> {
    let mut assign = vec![0; points.len()];
    for _ in 0..200 {
        let new: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut best = 0;
                for c in 1..cents.len() {
                    if sq_dist(p, &cents[c]) < sq_dist(p, &cents[best]) {
                        best = c;
                    }
                }
                best
            })
            .collect();
        if new == assign {
            break;
        }
        assign = new;
        for (c, cen) in cents.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if !members.is_empty() {
                for j in 0..cen.len() {
                    cen[j] = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
    }
    assign
}

#[test]
fn layer_one_matches_independent_lloyd() {
    let (emb, _) = blob_corpus(256, 5, 8, 0.3, 8);
    let mut rng = onerec::rng::substream(77, "rq-layer-0");
    let init = plus_plus_init(emb.data(), 5, 8, &mut rng).unwrap();
    let points: Vec<Vec<f64>> = (0..256).map(|i| emb.row(i).to_vec()).collect();
    let expected = oracle_lloyd(&points, init.chunks(5).map(|c| c.to_vec()).collect());
    let lib = lloyd(emb.data(), 5, init).unwrap();
    assert_eq!(lib.assign, expected);
    let fit = fit_rq_kmeans(&emb, (1, 5), 8, 2, 77).unwrap();
    let layer1: Vec<usize> = fit.codes.iter().map(|c| c[0]).collect();
    assert_eq!(layer1, expected);
}

#[test]
fn quantize_hits_exact_centroid() {
    let (emb, _) = blob_corpus(64, 4, 4, 0.5, 2);
    let fit = fit_rq_kmeans(&emb, (2, 2), 8, 3, 5).unwrap();
    let target = fit.stack.centroid(0, 5).to_vec();
    let q = fit.stack.quantize(&target);
    assert_eq!(q.codes[0], 5);
}

#[test]
fn recon_loss_matches_recomputation() {
    let (emb, _) = blob_corpus(512, 8, 6, 0.7, 12);
    let fit = fit_rq_kmeans(&emb, (2, 4), 16, 3, 1).unwrap();
    let mut direct = 0.0;
    for i in 0..512 {
        let q = fit.stack.quantize(emb.row(i));
        direct += q.residual.iter().map(|r| r * r).sum::<f64>();
    }
    direct /= emb.len() as f64;
    let m = tokenizer_metrics(&emb, &fit.codes, &fit.stack);
    assert!((m.recon_loss - direct).abs() < 1e-12);
}

#[test]
fn telescoping_and_monotone_depth() {
    let (emb, _) = blob_corpus(400, 6, 5, 1.0, 13);
    let fit = fit_rq_kmeans(&emb, (3, 2), 16, 4, 2).unwrap();
    let mut prev = f64::INFINITY;
    for depth in 1..=4 {
        let mut mse = 0.0;
        for i in 0..emb.rows() {
            let q = fit.stack.quantize_depth(emb.row(i), depth);
            for j in 0..6 {
                assert!((emb.row(i)[j] - q.reconstruction[j] - q.residual[j]).abs() <= 1e-10);
            }
            let rnorm = q.residual.iter().map(|r| r * r).sum::<f64>().sqrt();
            let diff = emb
                .row(i)
                .iter()
                .zip(&q.reconstruction)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!((rnorm - diff).abs() <= 1e-10);
            mse += rnorm * rnorm;
        }
        assert!(mse <= prev + 1e-12, "depth {depth}: {mse} > {prev}");
        prev = mse;
    }
    for run in &fit.runs {
        for w in run.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }
}

#[test]
fn utilization_and_entropy_extremes() {
    let uniform: Vec<Vec<usize>> = (0..8192).map(|i| vec![i]).collect();
    let (u, e) = code_stats(&uniform, 8192, 1);
    assert_eq!(u, vec![1.0]);
    assert!((e[0] - 8192f64.ln()).abs() < 1e-9);
    assert!((e[0] - 9.0109).abs() < 1e-4);
    assert!(8.9191 <= 8192f64.ln());

    let single = vec![vec![3]; 50];
    let (u, e) = code_stats(&single, 16, 1);
    assert_eq!(u, vec![1.0 / 16.0]);
    assert_eq!(e, vec![0.0]);
}

#[test]
fn rq_kmeans_beats_random_codebook() {
    let (emb, _) = blob_corpus(600, 8, 10, 1.0, 31);
    let fit = fit_rq_kmeans(&emb, (2, 4), 16, 3, 4).unwrap();
    let (rb, rcodes) = fit_random_rq(&emb, (2, 4), 16, 3, 4).unwrap();
    let ours = tokenizer_metrics(&emb, &fit.codes, &fit.stack);
    let base = tokenizer_metrics(&emb, &rcodes, &rb);
    assert!(ours.recon_loss < base.recon_loss);
    for l in 0..3 {
        assert_eq!(ours.utilization[l], 1.0);
        assert!(ours.utilization[l] >= base.utilization[l]);
        assert!(ours.entropy[l] > base.entropy[l]);
        assert!(ours.entropy[l] <= 16f64.ln() + 1e-12);
    }
}

#[test]
fn codebook_and_codes_round_trip() {
    let (emb, _) = blob_corpus(100, 6, 4, 0.5, 1);
    let fit = fit_rq_kmeans(&emb, (2, 3), 8, 3, 9).unwrap();
    let mut buf = Vec::new();
    write_codebook(&mut buf, &fit.stack).unwrap();
    let back = read_codebook(&mut buf.as_slice()).unwrap();
    assert_eq!(back, fit.stack);
    assert!(read_codebook(&mut &b"nope"[..]).is_err());

    let mut lines = Vec::new();
    write_codes_jsonl(&mut lines, &fit.codes).unwrap();
    let first = String::from_utf8(lines.clone()).unwrap();
    assert!(first.starts_with("{\"item_id\":0,\"codes\":["));
    assert_eq!(read_codes_jsonl(lines.as_slice()).unwrap(), fit.codes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn trie_accepts_exactly_the_corpus(seed in 0u64..1000, n in 20usize..60) {
        let (emb, _) = blob_corpus(n, 3, 3, 1.0, seed);
        let fit = fit_rq_kmeans(&emb, (1, 3), 4, 2, seed).unwrap();
        let set: BTreeSet<Vec<usize>> = fit.codes.iter().cloned().collect();
        for a in 0..4 {
            for b in 0..4 {
                prop_assert_eq!(fit.stack.trie.contains(&[a, b]), set.contains(&vec![a, b]));
            }
        }
        for (i, c) in fit.codes.iter().enumerate() {
            prop_assert!(fit.stack.trie.lookup(c).unwrap().contains(&i));
        }
    }

    #[test]
    fn quantize_is_pure_and_utilization_full(seed in 0u64..1000) {
        let (emb, _) = blob_corpus(48, 4, 6, 0.8, seed);
        let fit = fit_rq_kmeans(&emb, (2, 2), 8, 2, seed).unwrap();
        let (util, ent) = code_stats(&fit.codes, 8, 2);
        prop_assert!(util.iter().all(|&u| u == 1.0));
        prop_assert!(ent.iter().all(|&e| e <= 8f64.ln() + 1e-12));
        for i in 0..emb.rows() {
            prop_assert_eq!(&fit.stack.quantize(emb.row(i)).codes, &fit.codes[i]);
        }
        let (c, _) = nearest(emb.row(0), &fit.stack.layers[0], 4);
        prop_assert_eq!(c, fit.codes[0][0]);
    }
}
