//! Joint RSFT + ECPO post-training against a frozen sampling copy.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ecpo_objective, normalize_advantages, ClipParams};
use crate::decoder::moe::RoutingTrace;
use crate::decoder::sequence_nll;
use crate::error::{invalid, Error, Result};
use crate::generation::{generate, item_reward, GeneratedItem, GenerationRequest, PolicyStep};
use crate::nn::{Adam, AdamConfig};
use crate::numerics::Graph;
use crate::policy::{Policy, Target};
use crate::reward::{
    apply_sir, format_advantages, viral_exposure, FormatMode, PScoreFeatures, PScoreModel,
    SirConfig,
};
use crate::rng::substream;
use crate::train::{assemble, Corpus, Sample};
use crate::world::{Objective, World};
use crate::Scalar;

/// Which policy generates RL samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    /// The pre-trained policy, never refreshed.
    Pretrained,
    /// A copy of the live policy refreshed every sync period.
    CurrentPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardSource {
    /// The fused P-Score.
    #[serde(rename = "pscore")]
    PScore,
    /// One auxiliary tower of the P-Score model.
    Tower(Objective),
    /// The world's exact probability for one objective.
    Truth(Objective),
    /// The world's composite reward.
    TrueComposite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcpoConfig {
    pub clip: ClipParams,
    pub group_size: usize,
    pub generation: GenerationRequest,
    pub format_mode: Option<FormatMode>,
    pub format_k: usize,
    pub reference: ReferenceMode,
    pub sync_period: usize,
    /// RL users drawn per step.
    pub rl_users: usize,
    pub sft_batch: usize,
    pub sft_weight: f64,
    pub rl_weight: f64,
    pub lr_dense: f64,
    pub lr_sparse: f64,
    pub reward: RewardSource,
    pub sir: Option<SirConfig>,
    pub balance_rate: Option<f64>,
    pub steps: usize,
    pub seed: u64,
}

impl Default for EcpoConfig {
    fn default() -> Self {
        Self {
            clip: ClipParams {
                eps: 0.2,
                delta: 0.1,
            },
            group_size: 128,
            generation: GenerationRequest::default(),
            format_mode: None,
            format_k: 5,
            reference: ReferenceMode::CurrentPolicy,
            sync_period: 50,
            rl_users: 4,
            sft_batch: 16,
            sft_weight: 1.0,
            rl_weight: 1.0,
            lr_dense: 8e-4,
            lr_sparse: 1e-3,
            reward: RewardSource::PScore,
            sir: None,
            balance_rate: Some(1e-3),
            steps: 100,
            seed: 23,
        }
    }
}

impl EcpoConfig {
    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        if self.group_size < 2 {
            return invalid("group size must be at least 2");
        }
        if self.format_mode.is_some() && self.format_k > self.group_size {
            return invalid("format K exceeds the group size");
        }
        if self.sync_period == 0 {
            return invalid("sync period must be positive");
        }
        self.generation.validate()
    }
}

/// Reward oracles available during post-training.
pub struct RlData<'a> {
    pub world: &'a World,
    pub pscore: Option<(&'a PScoreModel<f64>, &'a PScoreFeatures)>,
}

impl RlData<'_> {
    /// Reward per item id for one user.
    pub fn score(&self, source: RewardSource, user: usize, items: &[usize]) -> Result<Vec<f64>> {
        let need_model = || {
            self.pscore.ok_or(Error::InvalidArgument(
                "reward source needs a P-Score model".into(),
            ))
        };
        Ok(match source {
            RewardSource::Truth(o) => items
                .iter()
                .map(|&i| self.world.true_reward(user, i).get(o))
                .collect(),
            RewardSource::TrueComposite => items
                .iter()
                .map(|&i| self.world.true_reward(user, i).composite)
                .collect(),
            RewardSource::PScore | RewardSource::Tower(_) => {
                let (m, f) = need_model()?;
                let users = vec![user; items.len()];
                m.predict(f, &users, items)?
                    .into_iter()
                    .map(|p| match source {
                        RewardSource::Tower(o) => p.towers[o.index()],
                        _ => p.pscore,
                    })
                    .collect()
            }
        })
    }

    /// Expected reward of each generated item (mean over colliding ids,
    /// 0 for illegal sequences).
    pub fn score_items(
        &self,
        source: RewardSource,
        user: usize,
        items: &[GeneratedItem],
    ) -> Result<Vec<f64>> {
        let mut ids: Vec<usize> = items
            .iter()
            .flat_map(|i| i.item_ids.iter().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let scores = self.score(source, user, &ids)?;
        let lookup = |id: usize| scores[ids.binary_search(&id).expect("scored id")];
        Ok(items
            .iter()
            .map(|i| item_reward(i, &mut |id| lookup(id)))
            .collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub ntp_loss: f64,
    pub ecpo_objective: f64,
    pub mean_reward: f64,
    pub legality_rate: f64,
    pub clip_fraction: f64,
    pub viral_exposure: f64,
    pub rl_terms: usize,
    pub load_max_over_mean: f64,
}

pub struct PostTrainer<T> {
    pub cfg: EcpoConfig,
    pub opt: Adam<T>,
    /// Frozen sampling copy standing in for the external inference service.
    pub sampler: Policy<T>,
    pub step: usize,
    rng: crate::rng::SeedRng,
}

impl<T: Scalar> PostTrainer<T> {
    pub fn new(policy: &Policy<T>, cfg: &EcpoConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(
            &policy.store,
            AdamConfig {
                lr_dense: cfg.lr_dense,
                lr_sparse: cfg.lr_sparse,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            cfg: cfg.clone(),
            opt,
            sampler: policy.clone(),
            step: 0,
            rng: substream(cfg.seed, "posttrain"),
        })
    }
}

struct Term {
    user: usize,
    codes: Vec<usize>,
    log_old: f64,
    adv: f64,
}

/// One joint step: NTP on a batch of RSFT samples plus the ECPO objective on
/// groups generated by the sampling copy for `rl_users` random users.
pub fn posttrain_step<T: Scalar>(
    tr: &mut PostTrainer<T>,
    policy: &mut Policy<T>,
    corpus: &Corpus,
    rsft: &[Sample],
    rl_pool: &[usize],
    data: &RlData,
) -> Result<StepMetrics> {
    let cfg = tr.cfg.clone();
    let mut m = StepMetrics {
        step: tr.step + 1,
        ..StepMetrics::default()
    };

    // Sample generation with the frozen copy.
    let n_rl = cfg.rl_users.min(rl_pool.len());
    let users: Vec<usize> = if cfg.rl_weight > 0.0 && n_rl > 0 {
        sample(&mut tr.rng, rl_pool.len(), n_rl)
            .into_iter()
            .map(|k| rl_pool[k])
            .collect()
    } else {
        Vec::new()
    };
    let req = GenerationRequest {
        width: cfg.group_size,
        ..cfg.generation.clone()
    };
    let mut groups: Vec<(usize, Vec<GeneratedItem>)> = Vec::with_capacity(users.len());
    for &u in &users {
        let mut step_model = PolicyStep::new(&tr.sampler, &corpus.contexts[u])?;
        let mut grng = substream(cfg.seed, &format!("gen-{}-{u}", tr.step));
        groups.push((u, generate(&mut step_model, &corpus.trie, &req, &mut grng)?));
    }
    let all: Vec<GeneratedItem> = groups.iter().flat_map(|(_, g)| g.iter().cloned()).collect();
    m.legality_rate = if all.is_empty() {
        f64::NAN
    } else {
        all.iter().filter(|i| i.legal).count() as f64 / all.len() as f64
    };
    m.viral_exposure = viral_exposure(&all, &data.world.viral);

    let mut terms: Vec<Term> = Vec::new();
    let mut rewards_seen = Vec::new();
    for (u, group) in &groups {
        let legal: Vec<&GeneratedItem> = group.iter().filter(|i| i.legal).collect();
        if legal.len() >= 2 {
            let legal_owned: Vec<GeneratedItem> = legal.iter().map(|&i| i.clone()).collect();
            let mut r = data.score_items(cfg.reward, *u, &legal_owned)?;
            rewards_seen.extend(r.iter().copied());
            if let Some(sir) = &cfg.sir {
                let flagged: Vec<bool> = legal
                    .iter()
                    .map(|i| i.item_ids.iter().any(|&id| data.world.viral[id]))
                    .collect();
                r = apply_sir(&r, &flagged, sir.target, sir.alpha, m.viral_exposure)?;
            }
            let adv = normalize_advantages(&r)?;
            for (item, a) in legal.iter().zip(adv) {
                if a != 0.0 {
                    terms.push(Term {
                        user: *u,
                        codes: item.codes.clone(),
                        log_old: item.log_prob,
                        adv: a,
                    });
                }
            }
        }
        if let Some(mode) = cfg.format_mode {
            let fa = format_advantages(group, mode, cfg.format_k, &mut tr.rng)?;
            for (item, a) in group.iter().zip(fa) {
                if let Some(a) = a {
                    terms.push(Term {
                        user: *u,
                        codes: item.codes.clone(),
                        log_old: item.log_prob,
                        adv: a,
                    });
                }
            }
        }
    }
    m.mean_reward = if rewards_seen.is_empty() {
        f64::NAN
    } else {
        crate::stats::mean(&rewards_seen)
    };
    m.rl_terms = terms.len();

    // Loss on the live policy.
    let mut g = Graph::new();
    let mut trace = RoutingTrace::new();
    let mut parts = Vec::new();
    if cfg.sft_weight > 0.0 && !rsft.is_empty() {
        let batch: Vec<Sample> = (0..cfg.sft_batch)
            .map(|_| rsft[tr.rng.random_range(0..rsft.len())])
            .collect();
        let (ctxs, targets) = assemble(corpus, &batch);
        let ntp = policy.ntp_loss(&mut g, &ctxs, &targets, &mut trace)?;
        m.ntp_loss = g.scalar(ntp).to_f64().unwrap_or(f64::NAN);
        parts.push(g.scale(ntp, T::of(cfg.sft_weight))?);
    } else {
        m.ntp_loss = f64::NAN;
    }
    if !terms.is_empty() {
        let mut owners = std::collections::BTreeMap::new();
        let mut ctxs = Vec::new();
        let targets: Vec<Target> = terms
            .iter()
            .map(|t| Target {
                owner: *owners.entry(t.user).or_insert_with(|| {
                    ctxs.push(&corpus.contexts[t.user]);
                    ctxs.len() - 1
                }),
                codes: t.codes.clone(),
            })
            .collect();
        let z = policy.encode(&mut g, &ctxs, &mut trace)?;
        let logits = policy.target_logits(&mut g, z, &targets, &mut trace)?;
        let codes: Vec<&[usize]> = terms.iter().map(|t| t.codes.as_slice()).collect();
        let nll = sequence_nll(&mut g, &logits, &codes)?;
        let log_pi = g.neg(nll)?;
        let log_old: Vec<f64> = terms.iter().map(|t| t.log_old).collect();
        let adv: Vec<f64> = terms.iter().map(|t| t.adv).collect();
        let s = ecpo_objective(&mut g, log_pi, &log_old, &adv, cfg.clip)?;
        m.ecpo_objective = g.scalar(s.objective).to_f64().unwrap_or(f64::NAN);
        m.clip_fraction = s.clip_fraction;
        parts.push(g.scale(s.objective, T::of(-cfg.rl_weight))?);
    } else {
        m.ecpo_objective = f64::NAN;
    }
    if !parts.is_empty() {
        let stacked = g.concat_rows(&parts)?;
        let loss = g.sum(stacked)?;
        let grads = g.backward(loss)?;
        tr.opt.step(&mut policy.store, &grads, 1.0);
        if let Some(u) = cfg.balance_rate {
            policy.balance(&trace, u)?;
        }
    }
    m.load_max_over_mean = if trace.loads.is_empty() {
        f64::NAN
    } else {
        trace.max_over_mean()
    };

    tr.step += 1;
    if cfg.reference == ReferenceMode::CurrentPolicy && tr.step % cfg.sync_period == 0 {
        tr.sampler = policy.clone();
    }
    Ok(m)
}

/// Runs `cfg.steps` joint steps from `policy`.
pub fn posttrain<T: Scalar>(
    policy: &mut Policy<T>,
    corpus: &Corpus,
    rsft: &[Sample],
    rl_pool: &[usize],
    data: &RlData,
    cfg: &EcpoConfig,
) -> Result<Vec<StepMetrics>> {
    let mut tr = PostTrainer::new(policy, cfg)?;
    (0..cfg.steps)
        .map(|_| posttrain_step(&mut tr, policy, corpus, rsft, rl_pool, data))
        .collect()
}
