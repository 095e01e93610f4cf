//! Beam search, top-k/top-p sampling, legality and Pass@K over semantic IDs.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::moe::RoutingTrace;
use crate::decoder::Heads;
use crate::encoder::UserContext;
use crate::error::{invalid, Error, Result};
use crate::numerics::{Array, Graph};
use crate::policy::Policy;
use crate::tokenizer::Trie;
use crate::Scalar;

/// Anything that scores the next code given equal-length prefixes.
pub trait StepModel {
    fn n_t(&self) -> usize;
    fn l_t(&self) -> usize;
    /// Raw logits over the next code, one vector per prefix.
    fn logits(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

/// A policy bound to one user: the encoder runs once, each step reruns the
/// decoder over the current prefixes.
pub struct PolicyStep<'a, T: Scalar> {
    policy: &'a Policy<T>,
    z_enc: Array<T>,
}

impl<'a, T: Scalar> PolicyStep<'a, T> {
    pub fn new(policy: &'a Policy<T>, ctx: &UserContext) -> Result<Self> {
        let mut g = Graph::new();
        let z = policy.encode(&mut g, &[ctx], &mut RoutingTrace::new())?;
        Ok(Self {
            policy,
            z_enc: g.value(z).clone(),
        })
    }
}

impl<T: Scalar> StepModel for PolicyStep<'_, T> {
    fn n_t(&self) -> usize {
        self.policy.cfg.n_t
    }

    fn l_t(&self) -> usize {
        self.policy.cfg.l_t
    }

    fn logits(&mut self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let z = g.constant(self.z_enc.clone())?;
        let owners = vec![0; prefixes.len()];
        let out = self.policy.decoder.forward(
            &mut g,
            &self.policy.store,
            z,
            self.policy.seq_len(),
            prefixes,
            &owners,
            Heads::Last,
            &mut RoutingTrace::new(),
        )?;
        let l = g.value(out[0]);
        Ok((0..l.rows())
            .map(|r| {
                l.row(r)
                    .iter()
                    .map(|v| v.to_f64().unwrap_or(f64::NAN))
                    .collect()
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Beam,
    TopkTopp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationRequest {
    pub strategy: Strategy,
    /// Beam width, or number of samples.
    pub width: usize,
    pub constrain_to_trie: bool,
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
}

impl Default for GenerationRequest {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam,
            width: 32,
            constrain_to_trie: false,
            temperature: 1.0,
            top_k: usize::MAX,
            top_p: 1.0,
        }
    }
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.top_k == 0 {
            return invalid("width and top_k must be at least 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0)
            || self.temperature.is_nan()
            || self.temperature <= 0.0
        {
            return invalid("need top_p in (0, 1] and temperature > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedItem {
    pub codes: Vec<usize>,
    /// Sum of per-step log-softmax values under the model (temperature 1).
    pub log_prob: f64,
    pub legal: bool,
    pub item_ids: Vec<usize>,
}

impl GeneratedItem {
    pub fn new(codes: Vec<usize>, log_prob: f64, trie: &Trie) -> Self {
        let item_ids = trie
            .lookup(&codes)
            .map(<[usize]>::to_vec)
            .unwrap_or_default();
        Self {
            legal: !item_ids.is_empty(),
            codes,
            log_prob,
            item_ids,
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

fn allowed(trie: &Trie, constrained: bool, prefix: &[usize], n_t: usize) -> Vec<usize> {
    if constrained {
        trie.children(prefix)
    } else {
        (0..n_t).collect()
    }
}

fn check_constraint(trie: &Trie, constrained: bool, l_t: usize) -> Result<()> {
    if constrained && trie.is_empty() {
        return Err(Error::Empty("constrained decoding over an empty trie"));
    }
    if constrained && trie.depth() != l_t {
        return invalid(format!(
            "trie depth {} differs from L_t {l_t}",
            trie.depth()
        ));
    }
    Ok(())
}

/// Standard beam search; candidates are ranked by log-probability, ties by
/// lexicographic codes. Returns at most `width` sequences, best first.
pub fn beam_search(
    model: &mut dyn StepModel,
    trie: &Trie,
    width: usize,
    constrained: bool,
) -> Result<Vec<GeneratedItem>> {
    if width == 0 {
        return invalid("beam width must be at least 1");
    }
    let (n_t, l_t) = (model.n_t(), model.l_t());
    check_constraint(trie, constrained, l_t)?;
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..l_t {
        let prefixes: Vec<&[usize]> = beams.iter().map(|(p, _)| p.as_slice()).collect();
        let logits = model.logits(&prefixes)?;
        let mut cand: Vec<(Vec<usize>, f64)> = Vec::new();
        for ((prefix, lp), l) in beams.iter().zip(&logits) {
            let ls = log_softmax(l);
            for c in allowed(trie, constrained, prefix, n_t) {
                let mut p = prefix.clone();
                p.push(c);
                cand.push((p, lp + ls[c]));
            }
        }
        cand.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        cand.truncate(width);
        beams = cand;
    }
    Ok(beams
        .into_iter()
        .map(|(c, lp)| GeneratedItem::new(c, lp, trie))
        .collect())
}

/// Applies temperature, then top-k, then top-p truncation to one step's
/// logits over the `allowed` codes. Returns `(code, probability)` pairs.
pub fn truncated_distribution(
    logits: &[f64],
    allowed: &[usize],
    temperature: f64,
    top_k: usize,
    top_p: f64,
) -> Vec<(usize, f64)> {
    let scaled: Vec<f64> = allowed.iter().map(|&c| logits[c] / temperature).collect();
    let probs = {
        let ls = log_softmax(&scaled);
        ls.into_iter().map(f64::exp).collect::<Vec<_>>()
    };
    let mut order: Vec<usize> = (0..allowed.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .total_cmp(&probs[a])
            .then(allowed[a].cmp(&allowed[b]))
    });
    order.truncate(top_k.min(order.len()));
    let z: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for &i in &order {
        let p = probs[i] / z;
        kept.push((allowed[i], p));
        cum += p;
        if cum >= top_p {
            break;
        }
    }
    let z: f64 = kept.iter().map(|(_, p)| p).sum();
    kept.into_iter().map(|(c, p)| (c, p / z)).collect()
}

/// Draws `width` independent sequences; repeats are kept.
pub fn sample_topk_topp<R: Rng + ?Sized>(
    model: &mut dyn StepModel,
    trie: &Trie,
    req: &GenerationRequest,
    rng: &mut R,
) -> Result<Vec<GeneratedItem>> {
    req.validate()?;
    let (n_t, l_t) = (model.n_t(), model.l_t());
    check_constraint(trie, req.constrain_to_trie, l_t)?;
    let mut seqs: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0); req.width];
    for _ in 0..l_t {
        let prefixes: Vec<&[usize]> = seqs.iter().map(|(p, _)| p.as_slice()).collect();
        let logits = model.logits(&prefixes)?;
        for ((prefix, lp), l) in seqs.iter_mut().zip(&logits) {
            let ok = allowed(trie, req.constrain_to_trie, prefix, n_t);
            let dist = truncated_distribution(l, &ok, req.temperature, req.top_k, req.top_p);
            let weights: Vec<f64> = dist.iter().map(|(_, p)| *p).collect();
            let c = dist[crate::rng::categorical(rng, &weights)].0;
            *lp += log_softmax(l)[c];
            prefix.push(c);
        }
    }
    Ok(seqs
        .into_iter()
        .map(|(c, lp)| GeneratedItem::new(c, lp, trie))
        .collect())
}

pub fn generate<R: Rng + ?Sized>(
    model: &mut dyn StepModel,
    trie: &Trie,
    req: &GenerationRequest,
    rng: &mut R,
) -> Result<Vec<GeneratedItem>> {
    req.validate()?;
    match req.strategy {
        Strategy::Beam => beam_search(model, trie, req.width, req.constrain_to_trie),
        Strategy::TopkTopp => sample_topk_topp(model, trie, req, rng),
    }
}

pub fn legality_rate(items: &[GeneratedItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("legality rate of no samples"));
    }
    Ok(items.iter().filter(|i| i.legal).count() as f64 / items.len() as f64)
}

/// Expected reward of an item list entry: the mean over colliding leaf items
/// (uniform pick at serving), 0 for illegal sequences.
pub fn item_reward(item: &GeneratedItem, reward: &mut dyn FnMut(usize) -> f64) -> f64 {
    if item.item_ids.is_empty() {
        return 0.0;
    }
    item.item_ids.iter().map(|&i| reward(i)).sum::<f64>() / item.item_ids.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassAtK {
    pub ks: Vec<usize>,
    /// Mean over users of the best reward among the first `k` outputs.
    pub mean: Vec<f64>,
    /// `per_user[u][i]` is user `u`'s best-of-`ks[i]`.
    pub per_user: Vec<Vec<f64>>,
}

/// Best-of-prefix-K over each user's generated list (generated once at the
/// largest K). `rewards[u][i]` scores user `u`'s `i`-th output.
pub fn pass_at_k(rewards: &[Vec<f64>], ks: &[usize]) -> Result<PassAtK> {
    if ks.is_empty() || ks.windows(2).any(|w| w[1] < w[0]) || ks[0] == 0 {
        return invalid("K values must be positive and ascending");
    }
    if rewards.is_empty() {
        return Err(Error::Empty("pass@k over no users"));
    }
    let per_user: Vec<Vec<f64>> = rewards
        .iter()
        .map(|r| {
            ks.iter()
                .map(|&k| r.iter().take(k).copied().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        })
        .collect();
    let mean = (0..ks.len())
        .map(|i| per_user.iter().map(|u| u[i]).sum::<f64>() / per_user.len() as f64)
        .collect();
    Ok(PassAtK {
        ks: ks.to_vec(),
        mean,
        per_user,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub user_id: usize,
    pub codes: Vec<usize>,
    pub log_prob: f64,
    pub legal: bool,
    pub item_ids: Vec<usize>,
    pub rewards: std::collections::BTreeMap<String, f64>,
}

pub fn write_generation_jsonl(w: &mut dyn Write, records: &[GenerationRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
