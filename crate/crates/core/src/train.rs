//! Training data assembly and the next-token pre-training loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::moe::RoutingTrace;
use crate::encoder::{build_context, EncoderConfig, UserContext};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::numerics::Graph;
use crate::policy::ModelConfig;
use crate::policy::{Policy, Target};
use crate::rng::substream;
use crate::tokenizer::{fit_rq_kmeans, RqFit, Trie};
use crate::world::{
    generate_world, simulate_sessions, InteractionLog, LoggingPolicy, Session, World, WorldConfig,
};
use crate::Scalar;

/// A world, its logged interactions and semantic IDs fitted with RQ-Kmeans
/// directly on item content.
pub struct Setup {
    pub world: World,
    pub log: InteractionLog,
    pub fit: RqFit,
    pub corpus: Corpus,
}

impl Setup {
    pub fn build(world_cfg: &WorldConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        let world = generate_world(world_cfg)?;
        let policy = LoggingPolicy::from_world(&world);
        let log = simulate_sessions(&world, &policy, world_cfg.sessions_per_user, seed);
        let shape = (world_cfg.content_tokens, world_cfg.content_dim);
        let fit = fit_rq_kmeans(&world.content_matrix(), shape, model.n_t, model.l_t, seed)?;
        let corpus = Corpus::build(
            &world,
            &log,
            fit.codes.clone(),
            fit.stack.trie.clone(),
            &model.encoder(),
            seed,
        );
        Ok(Self {
            world,
            log,
            fit,
            corpus,
        })
    }

    /// Pre-training examples: every logged session exposure.
    pub fn samples(&self) -> Vec<Sample> {
        session_samples(&self.log.sessions)
    }
}

/// One (user, target item) next-token example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub user: usize,
    pub item: usize,
}

/// Everything a policy trains and generates against.
#[derive(Clone, Debug)]
pub struct Corpus {
    /// Indexed by user id.
    pub contexts: Vec<UserContext>,
    /// Semantic ID of every item.
    pub item_codes: Vec<Vec<usize>>,
    pub trie: Trie,
}

impl Corpus {
    /// Contexts come from each user's history; targets are later sessions.
    pub fn build(
        world: &World,
        log: &InteractionLog,
        item_codes: Vec<Vec<usize>>,
        trie: Trie,
        enc: &EncoderConfig,
        seed: u64,
    ) -> Self {
        let content = world.content_matrix();
        let contexts = (0..world.users())
            .map(|u| build_context(world, u, &log.history[u], enc, &content, seed))
            .collect();
        Self {
            contexts,
            item_codes,
            trie,
        }
    }

    pub fn users(&self) -> usize {
        self.contexts.len()
    }
}

/// Every exposure in `sessions` as a training example.
pub fn session_samples(sessions: &[Session]) -> Vec<Sample> {
    sessions
        .iter()
        .flat_map(|s| {
            s.events.iter().map(|e| Sample {
                user: e.user,
                item: e.item,
            })
        })
        .collect()
}

/// Groups a batch by user: returns the distinct contexts and one target per
/// sample pointing at its user's encoder block.
pub fn assemble<'a>(corpus: &'a Corpus, batch: &[Sample]) -> (Vec<&'a UserContext>, Vec<Target>) {
    let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
    let mut ctxs = Vec::new();
    let targets = batch
        .iter()
        .map(|s| {
            let owner = *slot.entry(s.user).or_insert_with(|| {
                ctxs.push(&corpus.contexts[s.user]);
                ctxs.len() - 1
            });
            Target {
                owner,
                codes: corpus.item_codes[s.item].clone(),
            }
        })
        .collect();
    (ctxs, targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_dense: f64,
    pub lr_sparse: f64,
    pub clip_norm: f64,
    /// Loss-free balancing rate; `None` leaves routing biases untouched.
    pub balance_rate: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 32,
            lr_dense: 3e-3,
            lr_sparse: 3e-3,
            clip_norm: 1.0,
            balance_rate: Some(1e-3),
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Expert max/mean load for this step, NaN without MoE.
    pub load_max_over_mean: f64,
}

/// Mean NTP loss of `samples`, evaluated in chunks without gradients.
pub fn eval_ntp<T: Scalar>(policy: &Policy<T>, corpus: &Corpus, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let (ctxs, targets) = assemble(corpus, chunk);
        let mut g = Graph::new();
        let loss = policy.ntp_loss(&mut g, &ctxs, &targets, &mut RoutingTrace::new())?;
        total += g.scalar(loss).to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

pub struct Pretrainer<T> {
    pub cfg: PretrainConfig,
    pub opt: Adam<T>,
    rng: crate::rng::SeedRng,
    step: usize,
}

impl<T: Scalar> Pretrainer<T> {
    pub fn new(policy: &Policy<T>, cfg: &PretrainConfig) -> Self {
        let opt = Adam::new(
            &policy.store,
            AdamConfig {
                lr_dense: cfg.lr_dense,
                lr_sparse: cfg.lr_sparse,
                clip_norm: Some(cfg.clip_norm),
                ..AdamConfig::default()
            },
        );
        Self {
            cfg: cfg.clone(),
            opt,
            rng: substream(cfg.seed, "pretrain-batches"),
            step: 0,
        }
    }

    /// One optimiser step on a uniformly drawn batch of `samples`.
    pub fn step(
        &mut self,
        policy: &mut Policy<T>,
        corpus: &Corpus,
        samples: &[Sample],
    ) -> Result<PretrainMetrics> {
        if samples.is_empty() {
            return Err(Error::Empty("pre-training samples"));
        }
        let batch: Vec<Sample> = (0..self.cfg.batch)
            .map(|_| samples[self.rng.random_range(0..samples.len())])
            .collect();
        let (ctxs, targets) = assemble(corpus, &batch);
        let mut g = Graph::new();
        let mut trace = RoutingTrace::new();
        let loss = policy.ntp_loss(&mut g, &ctxs, &targets, &mut trace)?;
        let value = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
        let grads = g.backward(loss)?;
        let grad_norm = self.opt.step(&mut policy.store, &grads, 1.0);
        if let Some(u) = self.cfg.balance_rate {
            policy.balance(&trace, u)?;
        }
        self.step += 1;
        Ok(PretrainMetrics {
            step: self.step,
            loss: value,
            grad_norm,
            load_max_over_mean: if trace.loads.is_empty() {
                f64::NAN
            } else {
                trace.max_over_mean()
            },
        })
    }
}

pub fn pretrain<T: Scalar>(
    policy: &mut Policy<T>,
    corpus: &Corpus,
    samples: &[Sample],
    cfg: &PretrainConfig,
) -> Result<Vec<PretrainMetrics>> {
    let mut trainer = Pretrainer::new(policy, cfg);
    (0..cfg.steps)
        .map(|_| trainer.step(policy, corpus, samples))
        .collect()
}

/// Writes serialisable rows as CSV with a header.
pub fn write_csv<W: Write, S: Serialize>(w: W, rows: &[S]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(crate::reward::csv_err)?;
    }
    out.flush()?;
    Ok(())
}
