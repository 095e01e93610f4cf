use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{Objective, World, NUM_OBJECTIVES};
use crate::numerics::softmax_in_place;
use crate::rng::{categorical, substream};

/// One exposure with its sampled outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub user: usize,
    pub item: usize,
    pub ts: u64,
    pub playtime: f64,
    pub duration: f64,
    /// Bit `o` is set when objective `o` fired.
    pub labels: u8,
}

impl Event {
    pub fn label(&self, o: Objective) -> bool {
        self.labels >> o.index() & 1 == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub user: usize,
    pub events: Vec<Event>,
}

impl Session {
    pub fn playtime(&self) -> f64 {
        self.events.iter().map(|e| e.playtime).sum()
    }

    pub fn items(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.item).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionLog {
    /// Behaviour history per user, oldest first; precedes every session.
    pub history: Vec<Vec<Event>>,
    pub sessions: Vec<Session>,
}

impl InteractionLog {
    /// All events in timestamp order.
    pub fn events(&self) -> Vec<&Event> {
        let mut all: Vec<&Event> = self
            .history
            .iter()
            .flatten()
            .chain(self.sessions.iter().flat_map(|s| &s.events))
            .collect();
        all.sort_by_key(|e| (e.ts, e.user));
        all
    }

    /// Items each user watched (vtr fired) in history, oldest first.
    pub fn positives(&self) -> Vec<Vec<usize>> {
        self.history
            .iter()
            .map(|h| {
                h.iter()
                    .filter(|e| e.label(Objective::Vtr))
                    .map(|e| e.item)
                    .collect()
            })
            .collect()
    }
}

/// Anything that assigns exposure probabilities over the item catalogue.
pub trait ExposurePolicy {
    fn exposure(&self, world: &World, user: usize) -> Vec<f64>;
}

/// Softmax over true vtr mixed with uniform exploration.
#[derive(Clone, Copy, Debug)]
pub struct LoggingPolicy {
    pub temperature: f64,
    pub exploration: f64,
}

impl LoggingPolicy {
    pub fn from_world(world: &World) -> Self {
        Self {
            temperature: world.cfg.logging_temperature,
            exploration: world.cfg.exploration,
        }
    }
}

impl ExposurePolicy for LoggingPolicy {
    fn exposure(&self, world: &World, user: usize) -> Vec<f64> {
        let mut p: Vec<f64> = (0..world.items())
            .map(|i| world.true_reward(user, i).get(Objective::Vtr) / self.temperature)
            .collect();
        softmax_in_place(&mut p);
        let u = self.exploration / world.items() as f64;
        p.iter_mut()
            .for_each(|x| *x = (1.0 - self.exploration) * *x + u);
        p
    }
}

/// Draws labels from the exact probabilities and a playtime that leans long
/// when lvtr fired.
pub fn sample_event<R: Rng + ?Sized>(
    world: &World,
    user: usize,
    item: usize,
    ts: u64,
    rng: &mut R,
) -> Event {
    let truth = world.true_reward(user, item);
    let mut labels = 0u8;
    for o in 0..NUM_OBJECTIVES {
        if rng.random::<f64>() < truth.probs[o] {
            labels |= 1 << o;
        }
    }
    let (a, b) = match (labels & 1 == 1, labels & 2 == 2) {
        (true, _) => (8.0, 1.5),
        (false, true) => (4.0, 3.0),
        (false, false) => (1.0, 6.0),
    };
    let frac: f64 = Beta::new(a, b).expect("positive shape").sample(rng);
    let duration = world.duration[item];
    Event {
        user,
        item,
        ts,
        playtime: (frac * duration).min(duration),
        duration,
        labels,
    }
}

/// Simulates a history and `sessions` sessions per user under `policy`.
/// Each user draws from its own substream, so results do not depend on
/// the order users are processed in.
pub fn simulate_sessions(
    world: &World,
    policy: &dyn ExposurePolicy,
    sessions: usize,
    seed: u64,
) -> InteractionLog {
    let cfg = &world.cfg;
    let mut log = InteractionLog::default();
    for user in 0..world.users() {
        let mut rng = substream(seed, &format!("simulate-user-{user}"));
        let probs = policy.exposure(world, user);
        let mut ts = 0u64;
        let mut draw = |rng: &mut crate::rng::SeedRng| {
            ts += 1;
            let item = categorical(rng, &probs);
            sample_event(world, user, item, ts, rng)
        };
        let history = (0..cfg.history_len).map(|_| draw(&mut rng)).collect();
        log.history.push(history);
        for _ in 0..sessions {
            let events = (0..cfg.session_len).map(|_| draw(&mut rng)).collect();
            log.sessions.push(Session { user, events });
        }
    }
    log
}

/// Drops the lower half of sessions by total playtime (exactly `n / 2`,
/// ties broken by position) and keeps the rest in their original order.
pub fn rsft_filter(sessions: &[Session]) -> Vec<Session> {
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.sort_by(|&a, &b| {
        sessions[a]
            .playtime()
            .total_cmp(&sessions[b].playtime())
            .then(a.cmp(&b))
    });
    let mut keep = vec![true; sessions.len()];
    for &i in &order[..sessions.len() / 2] {
        keep[i] = false;
    }
    sessions
        .iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then(|| s.clone()))
        .collect()
}
