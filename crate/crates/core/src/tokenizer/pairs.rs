//! Item-pair construction from engagement logs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairKind {
    /// Target item with the most similar of the user's recent positives.
    UserToItem,
    /// Items whose co-engagement similarity clears the threshold.
    ItemToItem,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemPair {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
    pub kind: PairKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemPairSet {
    pub pairs: Vec<ItemPair>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairConfig {
    /// Minimum co-engagement similarity for an item-to-item pair.
    pub threshold: f64,
    /// How many preceding positives are searched for a user-to-item partner.
    pub recent: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            recent: 8,
        }
    }
}

/// Co-engagement cosine `|U_a ∩ U_b| / sqrt(|U_a| |U_b|)` over user sets.
pub struct CoEngagement {
    users_per_item: HashMap<usize, usize>,
    together: HashMap<(usize, usize), usize>,
}

impl CoEngagement {
    /// `positives[u]` lists the items user `u` engaged with, in time order.
    pub fn new(positives: &[Vec<usize>]) -> Self {
        let mut users_per_item = HashMap::new();
        let mut together = HashMap::new();
        for seq in positives {
            let mut items: Vec<usize> = seq.clone();
            items.sort_unstable();
            items.dedup();
            for (x, &a) in items.iter().enumerate() {
                *users_per_item.entry(a).or_insert(0) += 1;
                for &b in &items[x + 1..] {
                    *together.entry((a, b)).or_insert(0) += 1;
                }
            }
        }
        Self {
            users_per_item,
            together,
        }
    }

    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 1.0;
        }
        let key = (a.min(b), a.max(b));
        let Some(&both) = self.together.get(&key) else {
            return 0.0;
        };
        let na = self.users_per_item[&a] as f64;
        let nb = self.users_per_item[&b] as f64;
        both as f64 / (na * nb).sqrt()
    }

    /// Every co-engaged pair `(a < b)` with its similarity, sorted.
    pub fn pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut out: Vec<_> = self
            .together
            .keys()
            .map(|&(a, b)| (a, b, self.similarity(a, b)))
            .collect();
        out.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        out
    }
}

/// Builds user-to-item and item-to-item pairs. Pairs are unordered and
/// deduplicated, keeping the larger weight; no self pairs, weights positive.
pub fn build_item_pairs(positives: &[Vec<usize>], cfg: &PairConfig) -> Result<ItemPairSet> {
    if positives.iter().all(Vec::is_empty) {
        return Err(Error::Empty("engagement logs"));
    }
    let co = CoEngagement::new(positives);
    let mut best: BTreeMap<(usize, usize), (f64, PairKind)> = BTreeMap::new();
    let mut offer = |a: usize, b: usize, w: f64, kind: PairKind| {
        let key = (a.min(b), a.max(b));
        let slot = best.entry(key).or_insert((w, kind));
        if w > slot.0 {
            *slot = (w, kind);
        }
    };
    for seq in positives {
        for t in 1..seq.len() {
            let target = seq[t];
            let lo = t.saturating_sub(cfg.recent);
            let mut pick: Option<(usize, f64)> = None;
            for &c in &seq[lo..t] {
                if c == target {
                    continue;
                }
                let s = co.similarity(target, c);
                let better = match pick {
                    None => true,
                    Some((pc, ps)) => s > ps || (s == ps && c < pc),
                };
                if better {
                    pick = Some((c, s));
                }
            }
            if let Some((c, s)) = pick.filter(|&(_, s)| s > 0.0) {
                offer(target, c, s, PairKind::UserToItem);
            }
        }
    }
    for (a, b, s) in co.pairs() {
        if s >= cfg.threshold && s > 0.0 {
            offer(a, b, s, PairKind::ItemToItem);
        }
    }
    Ok(ItemPairSet {
        pairs: best
            .into_iter()
            .map(|((a, b), (weight, kind))| ItemPair { a, b, weight, kind })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn universal_co_click_has_similarity_one() {
        let logs = vec![vec![1, 2, 5], vec![2, 1], vec![1, 3, 2]];
        let set = build_item_pairs(&logs, &PairConfig::default()).unwrap();
        let p = set.pairs.iter().find(|p| (p.a, p.b) == (1, 2)).unwrap();
        assert_eq!(p.weight, 1.0);
    }

    #[test]
    fn disjoint_audiences_give_no_pair() {
        let logs = vec![vec![1], vec![2], vec![1], vec![2]];
        let set = build_item_pairs(&logs, &PairConfig::default()).unwrap();
        assert!(set.pairs.is_empty());
    }

    #[test]
    fn empty_logs_error() {
        assert!(build_item_pairs(&[vec![], vec![]], &PairConfig::default()).is_err());
    }
}
