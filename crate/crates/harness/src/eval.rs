//! Offline evaluation of a policy against the synthetic world.

use std::collections::BTreeMap;

use onerec::ecpo::{RewardSource, RlData};
use onerec::generation::{
    beam_search, generate, pass_at_k, GeneratedItem, GenerationRecord, PolicyStep,
};
use onerec::policy::Policy;
use onerec::reward::viral_exposure;
use onerec::rng::substream;
use onerec::train::Corpus;
use onerec::world::Objective;
use onerec::Scalar;

use crate::config::EvalConfig;
use crate::error::Result;

/// Per-user metric values keyed like the summary.
#[derive(Clone, Debug, PartialEq)]
pub struct UserEval {
    pub user: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Means over users (NaN entries skipped).
    pub summary: BTreeMap<String, f64>,
    pub per_user: Vec<UserEval>,
    pub generations: Vec<GenerationRecord>,
}

impl EvalReport {
    pub fn get(&self, key: &str) -> f64 {
        self.summary.get(key).copied().unwrap_or(f64::NAN)
    }

    /// One metric's per-user values in user order.
    pub fn column(&self, key: &str) -> Vec<f64> {
        self.per_user
            .iter()
            .map(|u| u.metrics.get(key).copied().unwrap_or(f64::NAN))
            .collect()
    }
}

/// Reward sources reported by name: each true objective, the composite and,
/// when a model is present, the P-Score.
pub fn reward_sources(data: &RlData) -> Vec<(String, RewardSource)> {
    let mut out: Vec<(String, RewardSource)> = Objective::ALL
        .iter()
        .map(|&o| (o.name().to_string(), RewardSource::Truth(o)))
        .collect();
    out.push(("composite".into(), RewardSource::TrueComposite));
    if data.pscore.is_some() {
        out.push(("pscore".into(), RewardSource::PScore));
    }
    out
}

/// Mean reward over the non-viral ids of each legal output; NaN when the
/// list holds none.
fn non_viral_mean(
    items: &[GeneratedItem],
    viral: &[bool],
    score: &mut dyn FnMut(usize) -> f64,
) -> f64 {
    let vals: Vec<f64> = items
        .iter()
        .filter_map(|i| {
            let ids: Vec<usize> = i
                .item_ids
                .iter()
                .copied()
                .filter(|&id| !viral[id])
                .collect();
            (!ids.is_empty())
                .then(|| ids.iter().map(|&id| score(id)).sum::<f64>() / ids.len() as f64)
        })
        .collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub fn evaluate<T: Scalar>(
    policy: &Policy<T>,
    corpus: &Corpus,
    data: &RlData,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let n_users = if cfg.users == 0 {
        corpus.users()
    } else {
        cfg.users.min(corpus.users())
    };
    let sources = reward_sources(data);
    let mut per_user = Vec::with_capacity(n_users);
    let mut generations = Vec::new();
    for u in 0..n_users {
        let mut step = PolicyStep::new(policy, &corpus.contexts[u])?;
        let free = beam_search(&mut step, &corpus.trie, cfg.legality_width, false)?;
        let mut rng = substream(seed, &format!("eval-{u}"));
        let out = generate(&mut step, &corpus.trie, &cfg.generation, &mut rng)?;

        let mut m = BTreeMap::new();
        m.insert(
            "legality".to_string(),
            free.iter().filter(|i| i.legal).count() as f64 / free.len() as f64,
        );
        m.insert(
            "output_legality".to_string(),
            out.iter().filter(|i| i.legal).count() as f64 / out.len() as f64,
        );
        m.insert(
            "viral_exposure".to_string(),
            viral_exposure(&out, &data.world.viral),
        );

        let mut ids: Vec<usize> = out
            .iter()
            .flat_map(|i| i.item_ids.iter().copied())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        let mut rewards_by_source = BTreeMap::new();
        for (name, src) in &sources {
            let scores = if ids.is_empty() {
                Vec::new()
            } else {
                data.score(*src, u, &ids)?
            };
            let mut lookup = |id: usize| scores[ids.binary_search(&id).expect("scored id")];
            let r: Vec<f64> = out
                .iter()
                .map(|i| onerec::generation::item_reward(i, &mut lookup))
                .collect();
            let pk = pass_at_k(std::slice::from_ref(&r), &cfg.ks)?;
            for (k, v) in cfg.ks.iter().zip(&pk.per_user[0]) {
                m.insert(format!("pass@{k}/{name}"), *v);
            }
            m.insert(
                format!("mean/{name}"),
                r.iter().sum::<f64>() / r.len() as f64,
            );
            m.insert(
                format!("nonviral_mean/{name}"),
                non_viral_mean(&out, &data.world.viral, &mut lookup),
            );
            rewards_by_source.insert(name.clone(), r);
        }
        for (k, item) in out.iter().enumerate() {
            generations.push(GenerationRecord {
                user_id: u,
                codes: item.codes.clone(),
                log_prob: item.log_prob,
                legal: item.legal,
                item_ids: item.item_ids.clone(),
                rewards: rewards_by_source
                    .iter()
                    .map(|(n, r)| (n.clone(), r[k]))
                    .collect(),
            });
        }
        per_user.push(UserEval {
            user: u,
            metrics: m,
        });
    }

    let mut summary = BTreeMap::new();
    if let Some(first) = per_user.first() {
        for key in first.metrics.keys() {
            let vals: Vec<f64> = per_user
                .iter()
                .map(|u| u.metrics[key])
                .filter(|v| v.is_finite())
                .collect();
            let mean = if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            summary.insert(key.clone(), mean);
        }
    }
    summary.insert("users".into(), n_users as f64);
    Ok(EvalReport {
        summary,
        per_user,
        generations,
    })
}
