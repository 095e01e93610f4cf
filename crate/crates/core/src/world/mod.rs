//! Synthetic user/item universe with exact engagement probabilities.

mod log;
mod snapshot;

pub use log::{
    rsft_filter, sample_event, simulate_sessions, Event, ExposurePolicy, InteractionLog,
    LoggingPolicy, Session,
};
pub use snapshot::{load_snapshot, save_snapshot};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{sigmoid, Array};
use crate::rng::{normal_vec, substream};

pub const NUM_OBJECTIVES: usize = 5;

/// The xtr family, in label-bit order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Lvtr,
    Vtr,
    Ltr,
    Wtr,
    Cmtr,
}

impl Objective {
    pub const ALL: [Objective; NUM_OBJECTIVES] = [
        Objective::Lvtr,
        Objective::Vtr,
        Objective::Ltr,
        Objective::Wtr,
        Objective::Cmtr,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["lvtr", "vtr", "ltr", "wtr", "cmtr"][self.index()]
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    /// Mixture components for item latents; users lean towards a few of them.
    pub clusters: usize,
    /// Within-cluster standard deviation of item latents (centres have unit scale).
    pub cluster_spread: f64,
    /// Content tokens per item, `N_M`.
    pub content_tokens: usize,
    /// Content token width, `d_t`.
    pub content_dim: usize,
    /// Standard deviation of the noise added to projected content.
    pub content_noise: f64,
    pub viral_fraction: f64,
    /// Logit boost that viral items receive on the watch objectives.
    pub viral_boost: f64,
    pub tags: usize,
    pub authors_per_cluster: usize,
    /// Multiplier on the user-item affinity inside every link.
    pub link_scale: f64,
    /// Per-objective logit offsets.
    pub objective_bias: [f64; NUM_OBJECTIVES],
    /// Weights of the composite ("ideal") reward.
    pub composite_weights: [f64; NUM_OBJECTIVES],
    /// Events per user before the first training session.
    pub history_len: usize,
    pub sessions_per_user: usize,
    pub session_len: usize,
    /// Softmax temperature of the logging policy over true vtr.
    pub logging_temperature: f64,
    /// Uniform exploration mixed into the logging policy.
    pub exploration: f64,
    pub min_duration: f64,
    pub max_duration: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            users: 256,
            items: 1024,
            latent_dim: 8,
            clusters: 16,
            cluster_spread: 0.35,
            content_tokens: 4,
            content_dim: 16,
            content_noise: 0.1,
            viral_fraction: 0.2,
            viral_boost: 1.0,
            tags: 8,
            authors_per_cluster: 4,
            link_scale: 1.5,
            objective_bias: [-1.0, 0.0, -1.5, -2.5, -2.5],
            composite_weights: [0.2; NUM_OBJECTIVES],
            history_len: 48,
            sessions_per_user: 2,
            session_len: 8,
            logging_temperature: 0.1,
            exploration: 0.1,
            min_duration: 10.0,
            max_duration: 120.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.users,
            self.items,
            self.latent_dim,
            self.clusters,
            self.content_tokens,
            self.content_dim,
            self.tags,
            self.authors_per_cluster,
            self.session_len,
        ];
        if counts.contains(&0) {
            return invalid("world counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.viral_fraction) || !(0.0..=1.0).contains(&self.exploration) {
            return invalid("viral fraction and exploration must lie in [0, 1]");
        }
        if self.logging_temperature <= 0.0
            || self.min_duration <= 0.0
            || self.max_duration < self.min_duration
        {
            return invalid("temperature and durations must be positive and ordered");
        }
        Ok(())
    }
}

/// Ground truth for one user-item pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueReward {
    pub probs: [f64; NUM_OBJECTIVES],
    pub composite: f64,
}

impl TrueReward {
    pub fn get(&self, o: Objective) -> f64 {
        self.probs[o.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub cfg: WorldConfig,
    pub user_latent: Vec<Vec<f64>>,
    pub item_latent: Vec<Vec<f64>>,
    pub item_cluster: Vec<usize>,
    pub objective_weights: [Vec<f64>; NUM_OBJECTIVES],
    pub viral: Vec<bool>,
    pub author: Vec<usize>,
    pub tag: Vec<usize>,
    pub tag_centre: Vec<Vec<f64>>,
    pub duration: Vec<f64>,
    pub gender: Vec<usize>,
    pub age: Vec<usize>,
    /// One `content_tokens x content_dim` matrix per item.
    pub content: Vec<Array<f64>>,
    /// Extra per-item logit on every objective; zero unless intervened on.
    pub item_bias: Vec<f64>,
}

pub const GENDER_BUCKETS: usize = 2;
pub const AGE_BUCKETS: usize = 6;

/// Builds a world from its configuration; identical configs give identical worlds.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let k = cfg.latent_dim;
    let mut rng = substream(cfg.seed, "world-latents");
    let centres: Vec<Vec<f64>> = (0..cfg.clusters)
        .map(|_| normal_vec(&mut rng, k, 1.0))
        .collect();
    let mut item_cluster = Vec::with_capacity(cfg.items);
    let mut item_latent = Vec::with_capacity(cfg.items);
    for i in 0..cfg.items {
        let c = i % cfg.clusters;
        let z: Vec<f64> = normal_vec(&mut rng, k, cfg.cluster_spread);
        item_latent.push(
            centres[c]
                .iter()
                .zip(z)
                .map(|(a, b)| a + b)
                .collect::<Vec<f64>>(),
        );
        item_cluster.push(c);
    }
    let user_latent: Vec<Vec<f64>> = (0..cfg.users)
        .map(|_| {
            let a = rng.random_range(0..cfg.clusters);
            let b = rng.random_range(0..cfg.clusters);
            let z: Vec<f64> = normal_vec(&mut rng, k, 0.5);
            (0..k)
                .map(|d| 0.7 * centres[a][d] + 0.3 * centres[b][d] + z[d])
                .collect()
        })
        .collect();
    let objective_weights: [Vec<f64>; NUM_OBJECTIVES] = std::array::from_fn(|_| {
        normal_vec::<f64, _>(&mut rng, k, 0.3)
            .into_iter()
            .map(|w| 1.0 + w)
            .collect()
    });

    let mut rng = substream(cfg.seed, "world-attributes");
    let n_viral = (cfg.viral_fraction * cfg.items as f64).floor() as usize;
    let mut order: Vec<usize> = (0..cfg.items).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut viral = vec![false; cfg.items];
    for &i in &order[..n_viral] {
        viral[i] = true;
    }
    let author = item_cluster
        .iter()
        .map(|&c| c * cfg.authors_per_cluster + rng.random_range(0..cfg.authors_per_cluster))
        .collect();
    let tag = item_cluster.iter().map(|&c| c % cfg.tags).collect();
    let tag_centre = (0..cfg.tags)
        .map(|t| centres[t % cfg.clusters].clone())
        .collect();
    let dur =
        Uniform::new_inclusive(cfg.min_duration, cfg.max_duration).expect("ordered durations");
    let duration = (0..cfg.items).map(|_| dur.sample(&mut rng)).collect();
    let gender = (0..cfg.users)
        .map(|_| rng.random_range(0..GENDER_BUCKETS))
        .collect();
    let age = (0..cfg.users)
        .map(|_| rng.random_range(0..AGE_BUCKETS))
        .collect();

    let mut rng = substream(cfg.seed, "world-content");
    let width = cfg.content_tokens * cfg.content_dim;
    let proj: Vec<f64> = normal_vec(&mut rng, k * width, 1.0 / (k as f64).sqrt());
    let content = item_latent
        .iter()
        .map(|v: &Vec<f64>| {
            let noise: Vec<f64> = normal_vec(&mut rng, width, cfg.content_noise);
            let data = (0..width)
                .map(|j| (0..k).map(|d| v[d] * proj[d * width + j]).sum::<f64>() + noise[j])
                .collect();
            Array::matrix(cfg.content_tokens, cfg.content_dim, data).expect("positive extents")
        })
        .collect();

    Ok(World {
        cfg: cfg.clone(),
        user_latent,
        item_latent,
        item_cluster,
        objective_weights,
        viral,
        author,
        tag,
        tag_centre,
        duration,
        gender,
        age,
        content,
        item_bias: vec![0.0; cfg.items],
    })
}

impl World {
    pub fn users(&self) -> usize {
        self.cfg.users
    }

    pub fn items(&self) -> usize {
        self.cfg.items
    }

    pub fn num_authors(&self) -> usize {
        self.cfg.clusters * self.cfg.authors_per_cluster
    }

    /// Weighted user-item affinity for one objective (before scale and bias).
    pub fn affinity(&self, user: usize, item: usize, o: Objective) -> f64 {
        let (u, v, w) = (
            &self.user_latent[user],
            &self.item_latent[item],
            &self.objective_weights[o.index()],
        );
        let k = self.cfg.latent_dim as f64;
        u.iter()
            .zip(v)
            .zip(w)
            .map(|((a, b), c)| a * b * c)
            .sum::<f64>()
            / k.sqrt()
    }

    /// Probability under the link `sigmoid(scale * affinity + bias [+ viral boost])`.
    pub fn link(&self, affinity: f64, item: usize, o: Objective) -> f64 {
        let boost = match o {
            Objective::Vtr | Objective::Lvtr if self.viral[item] => self.cfg.viral_boost,
            _ => 0.0,
        };
        sigmoid(
            self.cfg.link_scale * affinity
                + self.cfg.objective_bias[o.index()]
                + boost
                + self.item_bias[item],
        )
    }

    pub fn true_reward(&self, user: usize, item: usize) -> TrueReward {
        let probs = Objective::ALL.map(|o| self.link(self.affinity(user, item, o), item, o));
        let composite = self.composite(&probs);
        TrueReward { probs, composite }
    }

    pub fn composite(&self, probs: &[f64; NUM_OBJECTIVES]) -> f64 {
        let w = &self.cfg.composite_weights;
        let total: f64 = w.iter().sum();
        probs.iter().zip(w).map(|(p, w)| w / total * p).sum()
    }

    /// Numeric tag affinity of a user for an item's tag, in (0, 1).
    pub fn tag_affinity(&self, user: usize, item: usize) -> f64 {
        let c = &self.tag_centre[self.tag[item]];
        let k = self.cfg.latent_dim as f64;
        sigmoid(
            self.user_latent[user]
                .iter()
                .zip(c)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / k.sqrt(),
        )
    }

    /// Flattened content matrices, one row per item.
    pub fn content_matrix(&self) -> Array<f64> {
        let width = self.cfg.content_tokens * self.cfg.content_dim;
        let data = self
            .content
            .iter()
            .flat_map(|c| c.data().iter().copied())
            .collect();
        Array::matrix(self.items(), width, data).expect("positive extents")
    }
}
