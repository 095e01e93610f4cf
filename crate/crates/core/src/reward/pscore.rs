//! Multi-tower preference model: one BCE tower per objective and a fusion
//! head over the tower hidden states and the user/item representations.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{invalid, Result};
use crate::nn::{init_param, Adam, AdamConfig, Linear, Mlp, LEAKY_SLOPE};
use crate::numerics::{sigmoid, Array, Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::rng::substream;
use crate::world::{Event, InteractionLog, Objective, World, NUM_OBJECTIVES};
use crate::Scalar;

/// Dense side features for every user and item.
#[derive(Clone, Debug, PartialEq)]
pub struct PScoreFeatures {
    pub user: Vec<Vec<f64>>,
    pub item: Vec<Vec<f64>>,
}

impl PScoreFeatures {
    /// Users: mean content of their watched history plus demographic one-hots.
    /// Items: content plus the viral flag.
    pub fn from_world(world: &World, log: &InteractionLog) -> Self {
        let content = world.content_matrix();
        let width = content.cols();
        let user = (0..world.users())
            .map(|u| {
                let mut f = vec![0.0; width];
                let watched: Vec<&Event> = log
                    .history
                    .get(u)
                    .map(|h| h.iter().filter(|e| e.label(Objective::Vtr)).collect())
                    .unwrap_or_default();
                for e in &watched {
                    for (a, b) in f.iter_mut().zip(content.row(e.item)) {
                        *a += b;
                    }
                }
                if !watched.is_empty() {
                    f.iter_mut().for_each(|a| *a /= watched.len() as f64);
                }
                let mut demo = vec![0.0; crate::world::GENDER_BUCKETS + crate::world::AGE_BUCKETS];
                demo[world.gender[u]] = 1.0;
                demo[crate::world::GENDER_BUCKETS + world.age[u]] = 1.0;
                f.extend(demo);
                f
            })
            .collect();
        let item = (0..world.items())
            .map(|i| {
                let mut f = content.row(i).to_vec();
                f.push(if world.viral[i] { 1.0 } else { 0.0 });
                f
            })
            .collect();
        Self { user, item }
    }
}

/// A logged (user, item) pair with its objective label bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub user: usize,
    pub item: usize,
    pub labels: u8,
}

impl LabeledPair {
    pub fn label(&self, o: usize) -> f64 {
        f64::from(self.labels >> o & 1)
    }
}

pub fn pairs_from_log(log: &InteractionLog) -> Vec<LabeledPair> {
    log.history
        .iter()
        .flatten()
        .chain(log.sessions.iter().flat_map(|s| &s.events))
        .map(|e| LabeledPair {
            user: e.user,
            item: e.item,
            labels: e.labels,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PScoreConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    pub tower_hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub users: usize,
    pub items: usize,
    pub user_feat: usize,
    pub item_feat: usize,
}

impl Default for PScoreConfig {
    fn default() -> Self {
        Self {
            emb_dim: 8,
            hidden: 32,
            tower_hidden: 16,
            epochs: 10,
            batch: 128,
            lr: 3e-3,
            seed: 11,
            users: 0,
            items: 0,
            user_feat: 0,
            item_feat: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tower {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct PScoreModel<T> {
    pub cfg: PScoreConfig,
    pub store: ParamStore<T>,
    pub uid: ParamId,
    pub iid: ParamId,
    pub user_mlp: Mlp,
    pub item_mlp: Mlp,
    pub towers: Vec<Tower>,
    pub fusion: Mlp,
}

/// Node handles of one forward pass.
pub struct PScoreVars {
    pub towers: Vec<Var>,
    pub fusion: Var,
}

/// Predicted probabilities for one pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PScoreOut {
    pub towers: [f64; NUM_OBJECTIVES],
    pub pscore: f64,
}

impl<T: Scalar> PScoreModel<T> {
    /// `cfg.users`, `cfg.items` and the feature widths must be filled in.
    pub fn new(cfg: &PScoreConfig) -> Result<Self> {
        if [
            cfg.users,
            cfg.items,
            cfg.emb_dim,
            cfg.hidden,
            cfg.tower_hidden,
        ]
        .contains(&0)
        {
            return invalid("p-score vocabularies and widths must be positive");
        }
        let mut store = ParamStore::new();
        let mut rng = substream(cfg.seed, "pscore-init");
        let (e, h, th) = (cfg.emb_dim, cfg.hidden, cfg.tower_hidden);
        let uid = init_param(
            &mut store,
            &mut rng,
            "ps.uid",
            ParamGroup::Sparse,
            cfg.users,
            e,
            0.1,
        );
        let iid = init_param(
            &mut store,
            &mut rng,
            "ps.iid",
            ParamGroup::Sparse,
            cfg.items,
            e,
            0.1,
        );
        let user_mlp = Mlp::new(&mut store, &mut rng, "ps.user", e + cfg.user_feat, h, h);
        let item_mlp = Mlp::new(&mut store, &mut rng, "ps.item", e + cfg.item_feat, h, h);
        let towers = Objective::ALL
            .iter()
            .map(|o| Tower {
                hidden: Linear::new(
                    &mut store,
                    &mut rng,
                    &format!("ps.{}.hidden", o.name()),
                    3 * h,
                    th,
                    true,
                ),
                out: Linear::new(
                    &mut store,
                    &mut rng,
                    &format!("ps.{}.out", o.name()),
                    th,
                    1,
                    true,
                ),
            })
            .collect();
        let fusion = Mlp::new(
            &mut store,
            &mut rng,
            "ps.fusion",
            NUM_OBJECTIVES * th + 2 * h,
            th,
            1,
        );
        Ok(Self {
            cfg: cfg.clone(),
            store,
            uid,
            iid,
            user_mlp,
            item_mlp,
            towers,
            fusion,
        })
    }

    pub fn for_world(world: &World, feats: &PScoreFeatures, base: &PScoreConfig) -> Result<Self> {
        Self::new(&PScoreConfig {
            users: world.users(),
            items: world.items(),
            user_feat: feats.user.first().map_or(0, Vec::len),
            item_feat: feats.item.first().map_or(0, Vec::len),
            ..base.clone()
        })
    }

    fn side<'a>(
        &self,
        g: &mut Graph<T>,
        rows: impl Iterator<Item = &'a Vec<f64>>,
        n: usize,
        width: usize,
    ) -> Result<Var> {
        let data: Vec<T> = rows.flat_map(|r| r.iter().map(|&v| T::of(v))).collect();
        if data.len() != n * width {
            return invalid("p-score feature width mismatch");
        }
        g.constant(Array::matrix(n, width, data)?)
    }

    /// Builds the forward pass for a batch of pairs.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        feats: &PScoreFeatures,
        users: &[usize],
        items: &[usize],
    ) -> Result<PScoreVars> {
        let n = users.len();
        let s = &self.store;
        let uid = g.param(s, self.uid);
        let ue = g.gather_rows(uid, users.to_vec())?;
        let uf = self.side(
            g,
            users.iter().map(|&u| &feats.user[u]),
            n,
            self.cfg.user_feat,
        )?;
        let ux = g.concat_cols(&[ue, uf])?;
        let u = self.user_mlp.forward(g, s, ux)?;
        let iid = g.param(s, self.iid);
        let ie = g.gather_rows(iid, items.to_vec())?;
        let itf = self.side(
            g,
            items.iter().map(|&i| &feats.item[i]),
            n,
            self.cfg.item_feat,
        )?;
        let ix = g.concat_cols(&[ie, itf])?;
        let i = self.item_mlp.forward(g, s, ix)?;
        let ui = g.mul(u, i)?;
        let x = g.concat_cols(&[u, i, ui])?;
        let mut hidden = Vec::with_capacity(NUM_OBJECTIVES);
        let mut towers = Vec::with_capacity(NUM_OBJECTIVES);
        for t in &self.towers {
            let h = t.hidden.forward(g, s, x)?;
            let h = g.leaky_relu(h, T::of(LEAKY_SLOPE))?;
            towers.push(t.out.forward(g, s, h)?);
            hidden.push(h);
        }
        hidden.push(u);
        hidden.push(i);
        let f = g.concat_cols(&hidden)?;
        let fusion = self.fusion.forward(g, s, f)?;
        Ok(PScoreVars { towers, fusion })
    }

    /// Sum of per-tower BCE plus the fusion head's BCE averaged over all
    /// objective labels; every term is a batch mean.
    pub fn loss(&self, g: &mut Graph<T>, vars: &PScoreVars, pairs: &[LabeledPair]) -> Result<Var> {
        let n = pairs.len() as f64;
        let mut terms = Vec::with_capacity(2 * NUM_OBJECTIVES);
        for (o, &t) in vars.towers.iter().enumerate() {
            let y = pairs.iter().map(|p| T::of(p.label(o))).collect();
            let b = g.bce_with_logits(t, y)?;
            let b = g.sum(b)?;
            terms.push(g.scale(b, T::of(1.0 / n))?);
        }
        for o in 0..NUM_OBJECTIVES {
            let y = pairs.iter().map(|p| T::of(p.label(o))).collect();
            let b = g.bce_with_logits(vars.fusion, y)?;
            let b = g.sum(b)?;
            terms.push(g.scale(b, T::of(1.0 / (n * NUM_OBJECTIVES as f64)))?);
        }
        let all = g.concat_rows(&terms)?;
        g.sum(all)
    }

    /// Minibatch Adam over shuffled pairs; returns the mean loss per epoch.
    pub fn train(&mut self, feats: &PScoreFeatures, pairs: &[LabeledPair]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Err(crate::Error::Empty("p-score training pairs"));
        }
        let mut opt = Adam::new(
            &self.store,
            AdamConfig {
                lr_dense: self.cfg.lr,
                lr_sparse: self.cfg.lr,
                ..AdamConfig::default()
            },
        );
        let mut rng = substream(self.cfg.seed, "pscore-train");
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut history = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            let (mut total, mut batches) = (0.0, 0);
            for chunk in order.chunks(self.cfg.batch.max(1)) {
                let batch: Vec<LabeledPair> = chunk.iter().map(|&k| pairs[k]).collect();
                let users: Vec<usize> = batch.iter().map(|p| p.user).collect();
                let items: Vec<usize> = batch.iter().map(|p| p.item).collect();
                let mut g = Graph::new();
                let vars = self.forward(&mut g, feats, &users, &items)?;
                let loss = self.loss(&mut g, &vars, &batch)?;
                total += g.scalar(loss).to_f64().unwrap_or(f64::NAN);
                batches += 1;
                let grads = g.backward(loss)?;
                opt.step(&mut self.store, &grads, 1.0);
            }
            history.push(total / batches as f64);
        }
        Ok(history)
    }

    /// Tower probabilities and P-Score for each pair.
    pub fn predict(
        &self,
        feats: &PScoreFeatures,
        users: &[usize],
        items: &[usize],
    ) -> Result<Vec<PScoreOut>> {
        let mut out = Vec::with_capacity(users.len());
        for (us, is) in users.chunks(512).zip(items.chunks(512)) {
            let mut g = Graph::new();
            let v = self.forward(&mut g, feats, us, is)?;
            for r in 0..us.len() {
                let towers = std::array::from_fn(|o| {
                    sigmoid(g.value(v.towers[o]).data()[r].to_f64().unwrap_or(f64::NAN))
                });
                let pscore = sigmoid(g.value(v.fusion).data()[r].to_f64().unwrap_or(f64::NAN));
                out.push(PScoreOut { towers, pscore });
            }
        }
        Ok(out)
    }

    pub fn pscore(&self, feats: &PScoreFeatures, user: usize, item: usize) -> Result<f64> {
        Ok(self.predict(feats, &[user], &[item])?[0].pscore)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, PSCORE_MAGIC, &self.cfg, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(
            path,
            PSCORE_MAGIC,
            |c: &PScoreConfig| Self::new(c),
            |m: &mut Self| &mut m.store,
        )
    }
}

const PSCORE_MAGIC: &[u8; 4] = b"ORPS";
