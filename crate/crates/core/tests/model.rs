use std::sync::Arc;

use onerec::decoder::moe::{balance_biases, expert_hidden, MoeLayer, RoutingTrace};
use onerec::decoder::{sequence_nll, Heads};
use onerec::encoder::{build_context, Encoder, Record, Seq, UserContext};
use onerec::encoder::{compress_lifelong, leaf_clusters, step_clusters};
use onerec::nn::QFormerBlock;
use onerec::numerics::gradcheck::check_params;
use onerec::numerics::{Array, AttnLayout, Graph, ParamStore, Var};
use onerec::policy::{preset, ModelConfig, MoeLoc, Policy, Target};
use onerec::rng::{normal_vec, seeded, substream};
use onerec::train::{pretrain, PretrainConfig, Sample, Setup};
use onerec::world::{generate_world, simulate_sessions, LoggingPolicy, World, WorldConfig};
use rand::Rng;

fn tiny_model(d_model: usize) -> ModelConfig {
    ModelConfig {
        d_model,
        heads: 2,
        ffn_hidden: 2 * d_model,
        n_t: 6,
        l_t: 3,
        l_s: 3,
        l_p: 3,
        l_l: 10,
        n_q: 2,
        lifelong_blocks: 1,
        users: 8,
        items: 24,
        authors: 4,
        ..preset("toy-m").unwrap()
    }
}

fn tiny_world() -> World {
    generate_world(&WorldConfig {
        users: 8,
        items: 24,
        content_tokens: 2,
        content_dim: 4,
        history_len: 20,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn contexts(world: &World, cfg: &ModelConfig, users: &[usize]) -> Vec<UserContext> {
    let log = simulate_sessions(world, &LoggingPolicy::from_world(world), 1, 4);
    let content = world.content_matrix();
    users
        .iter()
        .map(|&u| build_context(world, u, &log.history[u], &cfg.encoder(), &content, 1))
        .collect()
}

// Scalar probe: sum of the output against a fixed random weight matrix.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> onerec::Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let w = Array::matrix(
        shape[0],
        shape[1],
        normal_vec(&mut seeded(seed), shape[0] * shape[1], 1.0),
    )?;
    let w = g.constant(w)?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn with_store(policy: &Policy<f64>, store: &ParamStore<f64>) -> Policy<f64> {
    Policy {
        store: store.clone(),
        ..policy.clone()
    }
}

#[test]
fn full_size_presets_match_published_shapes() {
    let small = preset("onerec-0.015b").unwrap();
    assert_eq!(small.enc_layers + small.dec_layers, 4);
    assert_eq!(small.enc_layers, small.dec_layers);
    let moe = preset("onerec-0.935b").unwrap();
    assert_eq!(
        (moe.experts, moe.active_experts, moe.moe_loc),
        (24, 2, MoeLoc::Decoder)
    );
    assert!((small.uniform_loss() - 27.033).abs() < 1e-3);
    assert!((small.uniform_loss() / 3.0 - 9.0109).abs() < 1e-4);
    assert_eq!(expert_hidden(1024, 128), 2816);
}

#[test]
fn pathway_shapes_at_full_lengths() {
    let full = preset("onerec-0.015b").unwrap();
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        ffn_hidden: 16,
        users: 8,
        items: 24,
        authors: 4,
        feature_ratio: 1.0 / 64.0,
        ..full
    };
    let world = tiny_world();
    let ctx = &contexts(&world, &cfg, &[3])[0];
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(&mut store, &mut seeded(1), &cfg.encoder(), 0).unwrap();
    let mut g = Graph::new();
    let (h_s, counts) = enc
        .embed_pathway(
            &mut g,
            &store,
            Seq::Short,
            &[(ctx.short.as_slice(), ctx.now)],
            Some(cfg.l_s),
        )
        .unwrap();
    assert_eq!(g.value(h_s).shape(), &[20, 8]);
    assert_eq!(counts, vec![20]);
    let (v_l, lens) = enc
        .embed_pathway(
            &mut g,
            &store,
            Seq::Lifelong,
            &[(ctx.lifelong.as_slice(), ctx.now)],
            None,
        )
        .unwrap();
    let h_l = enc.lifelong_qformer(&mut g, &store, v_l, &lens).unwrap();
    assert_eq!(g.value(h_l).shape(), &[128, 8]);
    assert_eq!(cfg.encoder().seq_len(), 1 + 20 + 256 + 128);
}

#[test]
fn qformer_over_one_memory_row_gives_identical_queries() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded(2);
    let blk = QFormerBlock::new(&mut store, &mut rng, "q", 6, 2, 12);
    let mut g = Graph::new();
    let q = g
        .input(Array::matrix(5, 6, normal_vec(&mut rng, 30, 1.0)).unwrap())
        .unwrap();
    let m = g
        .input(Array::matrix(1, 6, normal_vec(&mut rng, 6, 1.0)).unwrap())
        .unwrap();
    let out = blk
        .forward(&mut g, &store, q, m, Arc::new(AttnLayout::full(5, 1)))
        .unwrap();
    let v = g.value(out);
    for r in 1..5 {
        for (a, b) in v.row(r).iter().zip(v.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn qformer_and_pathway_gradients() {
    let cfg = tiny_model(8);
    let world = tiny_world();
    let ctxs = contexts(&world, &cfg, &[0, 5]);
    let policy = Policy::<f64>::new(&cfg, 3).unwrap();
    let mut rng = substream(1, "enc-gradcheck");
    for k in 0..3 {
        let pathway = check_params(
            &policy.store,
            |g, store| {
                let p = with_store(&policy, store);
                let seqs: Vec<(&[Record], f64)> = ctxs
                    .iter()
                    .map(|c| (c.positive.as_slice(), c.now))
                    .collect();
                let (h, _) =
                    p.encoder
                        .embed_pathway(g, store, Seq::Positive, &seqs, Some(cfg.l_p))?;
                project(g, h, k)
            },
            &mut rng,
            25,
        )
        .unwrap();
        assert!(
            pathway.rel_error() < 1e-5,
            "pathway {}",
            pathway.rel_error()
        );
        let qformer = check_params(
            &policy.store,
            |g, store| {
                let p = with_store(&policy, store);
                let seqs: Vec<(&[Record], f64)> = ctxs
                    .iter()
                    .map(|c| (c.lifelong.as_slice(), c.now))
                    .collect();
                let (v, lens) = p
                    .encoder
                    .embed_pathway(g, store, Seq::Lifelong, &seqs, None)?;
                let h = p.encoder.lifelong_qformer(g, store, v, &lens)?;
                project(g, h, k + 10)
            },
            &mut rng,
            25,
        )
        .unwrap();
        assert!(
            qformer.rel_error() < 1e-5,
            "qformer {}",
            qformer.rel_error()
        );
    }
}

#[test]
fn full_encoder_gradient_at_d16() {
    let cfg = tiny_model(16);
    let world = tiny_world();
    let ctxs = contexts(&world, &cfg, &[1, 2]);
    let refs: Vec<&UserContext> = ctxs.iter().collect();
    let policy = Policy::<f64>::new(&cfg, 4).unwrap();
    let check = check_params(
        &policy.store,
        |g, store| {
            let p = with_store(&policy, store);
            let z = p.encode(g, &refs, &mut RoutingTrace::new())?;
            project(g, z, 7)
        },
        &mut substream(2, "encoder-gradcheck"),
        30,
    )
    .unwrap();
    assert!(check.rel_error() < 1e-4, "{}", check.rel_error());
}

#[test]
fn identical_rows_with_equal_positions_encode_identically() {
    let cfg = tiny_model(8);
    let world = tiny_world();
    let mut ctx = contexts(&world, &cfg, &[4]).remove(0);
    // Two identical short records, stored at positions 1 and 2 of the input.
    let rec = ctx.short.last().unwrap().clone();
    ctx.short = vec![rec.clone(), rec.clone(), rec];
    let mut policy = Policy::<f64>::new(&cfg, 5).unwrap();
    let pos = policy.encoder.pos;
    let row1 = policy.store.get(pos).value().row(1).to_vec();
    policy
        .store
        .get_mut(pos)
        .value_mut()
        .row_mut(2)
        .copy_from_slice(&row1);
    let mut g = Graph::new();
    let z = policy
        .encode(&mut g, &[&ctx], &mut RoutingTrace::new())
        .unwrap();
    let v = g.value(z);
    assert_eq!(v.row(1), v.row(2));
}

#[test]
fn lifelong_compression_rules() {
    assert_eq!(step_clusters(1000), 10);
    let world = tiny_world();
    let log = simulate_sessions(&world, &LoggingPolicy::from_world(&world), 1, 4);
    let content = world.content_matrix();
    let hist: Vec<Record> = log.history[0]
        .iter()
        .take(6)
        .map(|e| Record::from_event(&world, e))
        .collect();
    let out = compress_lifelong(&hist, &content, 8, 100, &mut seeded(1));
    assert_eq!(out, hist);
}

#[test]
fn leaf_clusters_are_pure_on_separated_blobs() {
    // 512 items in 4 far-apart blobs; every record is one item.
    let dim = 6;
    let mut rng = seeded(8);
    let centres: Vec<Vec<f64>> = (0..4).map(|_| normal_vec(&mut rng, dim, 20.0)).collect();
    let mut data = Vec::new();
    let mut blob = Vec::new();
    for i in 0..512 {
        let c = i % 4;
        let z: Vec<f64> = normal_vec(&mut rng, dim, 0.5);
        data.extend(centres[c].iter().zip(z).map(|(a, b)| a + b));
        blob.push(c);
    }
    let content = Array::matrix(512, dim, data).unwrap();
    let hist: Vec<Record> = (0..512)
        .map(|i| Record {
            item: i,
            author: 0,
            tag: 0.0,
            ts: i as f64,
            playtime: 1.0,
            duration: 2.0,
            labels: 0,
        })
        .collect();
    let leaves = leaf_clusters(&hist, &content, 8, &mut seeded(3));
    let mut seen = vec![false; 512];
    for leaf in &leaves {
        assert!(leaf.len() <= 8);
        let b = blob[hist[leaf[0]].item];
        for &m in leaf {
            assert_eq!(blob[hist[m].item], b);
            assert!(!seen[m]);
            seen[m] = true;
        }
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn decoder_is_causal_and_sized() {
    let cfg = tiny_model(8);
    let world = tiny_world();
    let ctxs = contexts(&world, &cfg, &[2]);
    let policy = Policy::<f64>::new(&cfg, 6).unwrap();
    let logits = |prefix: &[usize]| {
        let mut g = Graph::new();
        let z = policy
            .encode(&mut g, &[&ctxs[0]], &mut RoutingTrace::new())
            .unwrap();
        let out = policy
            .decoder
            .forward(
                &mut g,
                &policy.store,
                z,
                policy.seq_len(),
                &[prefix],
                &[0],
                Heads::All,
                &mut RoutingTrace::new(),
            )
            .unwrap();
        out.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>()
    };
    let a = logits(&[1, 4]);
    let b = logits(&[1, 5]);
    assert_eq!(a.len(), 3);
    for l in &a {
        assert_eq!(l.shape(), &[1, cfg.n_t]);
    }
    // Code at position 1 feeds input row 2, which only logits at position 2 see.
    assert_eq!(a[0], b[0]);
    assert_eq!(a[1], b[1]);
    assert_ne!(a[2], b[2]);
}

#[test]
fn full_decoder_gradient() {
    for moe in [false, true] {
        let cfg = ModelConfig {
            experts: if moe { 3 } else { 0 },
            active_experts: if moe { 2 } else { 0 },
            moe_loc: if moe { MoeLoc::Decoder } else { MoeLoc::None },
            ..tiny_model(8)
        };
        let world = tiny_world();
        let ctxs = contexts(&world, &cfg, &[1, 6]);
        let refs: Vec<&UserContext> = ctxs.iter().collect();
        let targets = vec![
            Target {
                owner: 0,
                codes: vec![1, 2, 3],
            },
            Target {
                owner: 1,
                codes: vec![0, 5, 4],
            },
            Target {
                owner: 0,
                codes: vec![2, 2, 0],
            },
        ];
        let policy = Policy::<f64>::new(&cfg, 7).unwrap();
        let check = check_params(
            &policy.store,
            |g, store| {
                with_store(&policy, store).ntp_loss(g, &refs, &targets, &mut RoutingTrace::new())
            },
            &mut substream(3, "decoder-gradcheck"),
            30,
        )
        .unwrap();
        assert!(check.rel_error() < 1e-4, "moe={moe}: {}", check.rel_error());
    }
}

#[test]
fn sequence_nll_matches_independent_cross_entropy() {
    let mut rng = seeded(9);
    let (n, n_t, l_t) = (5, 7, 3);
    let logits: Vec<Vec<f64>> = (0..l_t)
        .map(|_| normal_vec(&mut rng, n * n_t, 2.0))
        .collect();
    let targets: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..l_t).map(|_| rng.random_range(0..n_t)).collect())
        .collect();
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = logits
        .iter()
        .map(|l| g.input(Array::matrix(n, n_t, l.clone()).unwrap()).unwrap())
        .collect();
    let refs: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
    let nll = sequence_nll(&mut g, &vars, &refs).unwrap();
    for i in 0..n {
        let mut want = 0.0;
        for j in 0..l_t {
            let row = &logits[j][i * n_t..(i + 1) * n_t];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[targets[i][j]];
        }
        assert!((g.value(nll).data()[i] - want).abs() < 1e-10);
    }
}

#[test]
fn moe_with_one_expert_is_that_expert() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded(10);
    let layer = MoeLayer::new(&mut store, &mut rng, "m", 0, 6, 8, 1, 1).unwrap();
    let x = Array::matrix(4, 6, normal_vec(&mut rng, 24, 1.0)).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let y = layer
        .forward(&mut g, &store, xv, &mut RoutingTrace::new())
        .unwrap();
    let mut h = Graph::new();
    let xw = h.input(x).unwrap();
    let e = layer.experts[0].forward(&mut h, &store, xw).unwrap();
    assert_eq!(g.value(y), h.value(e));
}

#[test]
fn moe_matches_dense_evaluation_of_selected_experts() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded(11);
    let (dim, e, k, n) = (6, 4, 2, 16);
    let layer = MoeLayer::new(&mut store, &mut rng, "m", 0, dim, 8, e, k).unwrap();
    // Non-zero routing biases change selection but not the mixing weights.
    let bias: Vec<f64> = vec![0.3, -0.2, 0.0, 0.1];
    store
        .get_mut(layer.bias)
        .value_mut()
        .data_mut()
        .copy_from_slice(&bias);
    let x = Array::matrix(n, dim, normal_vec(&mut rng, n * dim, 1.0)).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x.clone()).unwrap();
    let mut trace = RoutingTrace::new();
    let y = layer.forward(&mut g, &store, xv, &mut trace).unwrap();
    let y = g.value(y).clone();

    let w = store.get(layer.gate.w).value().clone();
    let mut loads = vec![0usize; e];
    for i in 0..n {
        let xi = x.row(i);
        let scores: Vec<f64> = (0..e)
            .map(|j| (0..dim).map(|c| xi[c] * w.get(c, j)).sum())
            .collect();
        let mut order: Vec<usize> = (0..e).collect();
        order.sort_by(|&a, &b| {
            (scores[b] + bias[b])
                .total_cmp(&(scores[a] + bias[a]))
                .then(a.cmp(&b))
        });
        let chosen = &order[..k];
        let z: f64 = chosen.iter().map(|&j| scores[j].exp()).sum();
        let mut want = vec![0.0; dim];
        for &j in chosen {
            loads[j] += 1;
            let mut h = Graph::new();
            let xr = h
                .input(Array::matrix(1, dim, xi.to_vec()).unwrap())
                .unwrap();
            let out = layer.experts[j].forward(&mut h, &store, xr).unwrap();
            for (acc, v) in want.iter_mut().zip(h.value(out).data()) {
                *acc += scores[j].exp() / z * v;
            }
        }
        for (a, b) in y.row(i).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "token {i}: {a} vs {b}");
        }
    }
    assert_eq!(trace.loads[&0], loads);
}

#[test]
fn balancing_bias_sign_rules() {
    assert_eq!(
        balance_biases(&[0.1, -0.2, 0.0], &[5, 5, 5], 0.01).unwrap(),
        vec![0.1, -0.2, 0.0]
    );
    let b = balance_biases(&[0.0; 4], &[12, 0, 0, 0], 0.01).unwrap();
    assert_eq!(b, vec![-0.01, 0.01, 0.01, 0.01]);
    assert!(balance_biases(&[0.0], &[1], 0.0).is_err());
}

#[test]
fn untrained_loss_is_uniform_and_one_item_is_memorised() {
    let world_cfg = WorldConfig {
        users: 32,
        items: 256,
        history_len: 16,
        ..WorldConfig::default()
    };
    let model = preset("toy-s").unwrap();
    let setup = Setup::build(&world_cfg, &model, 1).unwrap();
    let mut policy = Policy::<f64>::new(&model, 2).unwrap();
    let samples = setup.samples();
    let untrained = onerec::train::eval_ntp(&policy, &setup.corpus, &samples).unwrap();
    assert!(
        (untrained / model.uniform_loss() - 1.0).abs() < 0.01,
        "{untrained}"
    );

    let one = vec![Sample { user: 3, item: 17 }];
    let cfg = PretrainConfig {
        steps: 150,
        batch: 4,
        lr_dense: 1e-2,
        lr_sparse: 1e-2,
        ..PretrainConfig::default()
    };
    let m = pretrain(&mut policy, &setup.corpus, &one, &cfg).unwrap();
    assert!(m.last().unwrap().loss < 0.05, "{}", m.last().unwrap().loss);
}

#[test]
fn policy_checkpoint_round_trip_and_f32_cast() {
    let cfg = tiny_model(8);
    let world = tiny_world();
    let ctxs = contexts(&world, &cfg, &[0]);
    let policy = Policy::<f64>::new(&cfg, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.ckpt");
    policy.save(&path).unwrap();
    let back = Policy::<f64>::load(&path).unwrap();
    assert_eq!(back.store, policy.store);
    assert_eq!(back.cfg, policy.cfg);

    let targets = vec![Target {
        owner: 0,
        codes: vec![1, 2, 3],
    }];
    let loss = |p: &Policy<f64>| {
        let mut g = Graph::new();
        let l = p
            .ntp_loss(&mut g, &[&ctxs[0]], &targets, &mut RoutingTrace::new())
            .unwrap();
        g.scalar(l)
    };
    assert_eq!(loss(&back), loss(&policy));
    let narrow: Policy<f32> = policy.cast();
    let mut g = Graph::<f32>::new();
    let l = narrow
        .ntp_loss(&mut g, &[&ctxs[0]], &targets, &mut RoutingTrace::new())
        .unwrap();
    assert!((f64::from(g.scalar(l)) - loss(&policy)).abs() < 1e-4);
}
