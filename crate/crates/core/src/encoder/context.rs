use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::world::{Event, Objective, World};

/// One interaction as the encoder sees it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub item: usize,
    pub author: usize,
    /// Numeric tag affinity, averaged when records are merged.
    pub tag: f64,
    pub ts: f64,
    pub playtime: f64,
    pub duration: f64,
    pub labels: u8,
}

impl Record {
    pub fn from_event(world: &World, e: &Event) -> Self {
        Self {
            item: e.item,
            author: world.author[e.item],
            tag: world.tag_affinity(e.user, e.item),
            ts: e.ts as f64,
            playtime: e.playtime,
            duration: e.duration,
            labels: e.labels,
        }
    }
}

/// Everything the encoder consumes for one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserContext {
    pub user: usize,
    pub gender: usize,
    pub age: usize,
    /// Reference time for the recency feature.
    pub now: f64,
    pub short: Vec<Record>,
    pub positive: Vec<Record>,
    pub lifelong: Vec<Record>,
}

pub const LABEL_FLAGS: usize = 1 << crate::world::NUM_OBJECTIVES;
/// Slack allowed when checking `playtime <= duration`.
pub const PLAYTIME_TOL: f64 = 1e-9;

impl UserContext {
    pub fn validate(&self) -> Result<()> {
        for seq in [&self.short, &self.positive, &self.lifelong] {
            if seq.windows(2).any(|w| w[1].ts < w[0].ts) {
                return invalid(format!("user {}: sequence not time-ordered", self.user));
            }
            for r in seq {
                if r.playtime > r.duration + PLAYTIME_TOL {
                    return invalid(format!("user {}: playtime exceeds duration", self.user));
                }
                if r.labels as usize >= LABEL_FLAGS {
                    return invalid(format!(
                        "user {}: unknown label bits {}",
                        self.user, r.labels
                    ));
                }
            }
        }
        Ok(())
    }

    /// Builds the three behaviour sequences from a time-ordered history:
    /// the last `l_s` events, the last `l_p` watched events, and the
    /// caller-supplied lifelong sequence.
    pub fn new(
        world: &World,
        user: usize,
        history: &[Event],
        l_s: usize,
        l_p: usize,
        lifelong: Vec<Record>,
    ) -> Self {
        let records: Vec<Record> = history
            .iter()
            .map(|e| Record::from_event(world, e))
            .collect();
        let short = records[records.len().saturating_sub(l_s)..].to_vec();
        let pos: Vec<Record> = history
            .iter()
            .zip(&records)
            .filter(|(e, _)| e.label(Objective::Vtr))
            .map(|(_, r)| r.clone())
            .collect();
        let positive = pos[pos.len().saturating_sub(l_p)..].to_vec();
        let now = history.last().map_or(0.0, |e| e.ts as f64) + 1.0;
        Self {
            user,
            gender: world.gender[user],
            age: world.age[user],
            now,
            short,
            positive,
            lifelong,
        }
    }
}
