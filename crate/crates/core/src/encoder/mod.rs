//! User-side encoder: four feature pathways, lifelong query compression and
//! a fully visible transformer stack.

mod compress;
mod context;

pub use compress::{aggregate, compress_lifelong, cube_root_floor, leaf_clusters, step_clusters};
pub use context::{Record, UserContext, LABEL_FLAGS, PLAYTIME_TOL};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::moe::{MoeLayer, RoutingTrace};
use crate::decoder::MoeSpec;
use crate::error::{invalid, Result};
use crate::nn::{init_param, Block, FeedForward, Mlp, QFormerBlock, SwiGlu};
use crate::numerics::{Array, AttnLayout, Graph, ParamGroup, ParamId, ParamStore, Segment, Var};
use crate::Scalar;

pub const GENDER_VOCAB: usize = crate::world::GENDER_BUCKETS;
pub const AGE_VOCAB: usize = crate::world::AGE_BUCKETS;
/// Continuous per-record features: tag, recency, playtime, duration.
pub const CONTINUOUS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    /// Replaces the dense FFN in every encoder block when set.
    pub moe: Option<MoeSpec>,
    pub l_s: usize,
    pub l_p: usize,
    pub l_l: usize,
    pub n_q: usize,
    pub lifelong_blocks: usize,
    /// Leaf size of the lifelong compression.
    pub compress_m: usize,
    /// Scales the full-size feature widths (64 static, 512 author, 128 other).
    pub feature_ratio: f64,
    pub users: usize,
    pub items: usize,
    pub authors: usize,
}

impl EncoderConfig {
    fn scaled(&self, width: usize) -> usize {
        ((width as f64 * self.feature_ratio).round() as usize).max(1)
    }

    pub fn static_dim(&self) -> usize {
        self.scaled(64)
    }

    pub fn author_dim(&self) -> usize {
        self.scaled(512)
    }

    pub fn other_dim(&self) -> usize {
        self.scaled(128)
    }

    /// Width of one concatenated record feature vector.
    pub fn record_dim(&self) -> usize {
        self.d_model + self.author_dim() + (1 + CONTINUOUS) * self.other_dim()
    }

    /// Rows of the encoder output per user.
    pub fn seq_len(&self) -> usize {
        1 + self.l_s + self.l_p + self.n_q
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return invalid(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if [
            self.l_s,
            self.l_p,
            self.n_q,
            self.users,
            self.items,
            self.authors,
        ]
        .contains(&0)
        {
            return invalid("encoder lengths and vocabularies must be positive");
        }
        Ok(())
    }
}

/// Maps an id into a table of `vocab` rows; out-of-range ids are hashed.
pub fn bucket(id: usize, vocab: usize) -> usize {
    if id < vocab {
        return id;
    }
    let mut h = id as u64 ^ 0x9e37_79b9_7f4a_7c15;
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ((h ^ (h >> 31)) % vocab as u64) as usize
}

/// Which behaviour sequence a pathway reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Seq {
    Short,
    Positive,
    Lifelong,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeqPathway {
    /// One `[1, other_dim]` projection per continuous feature.
    pub cont: Vec<ParamId>,
    pub mlp: Mlp,
    /// Output row used for missing positions.
    pub pad: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub uid: ParamId,
    pub gender: ParamId,
    pub age: ParamId,
    pub static_mlp: Mlp,
    pub vid: ParamId,
    pub aid: ParamId,
    pub label: ParamId,
    pub short: SeqPathway,
    pub positive: SeqPathway,
    pub lifelong: SeqPathway,
    pub queries: ParamId,
    pub qformer: Vec<QFormerBlock>,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
}

fn rec_features(r: &crate::encoder::Record, now: f64) -> [f64; CONTINUOUS] {
    [
        r.tag,
        (now - r.ts).max(0.0).ln_1p(),
        r.playtime.max(0.0).ln_1p(),
        r.duration.max(0.0).ln_1p(),
    ]
}

impl Encoder {
    /// `moe_layer0` is the routing-trace index of the first encoder MoE layer.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &EncoderConfig,
        moe_layer0: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let sd = cfg.static_dim();
        let emb = |store: &mut ParamStore<T>, rng: &mut R, name: &str, rows: usize, cols: usize| {
            init_param(
                store,
                rng,
                name,
                ParamGroup::Sparse,
                rows,
                cols,
                1.0 / (cols as f64).sqrt(),
            )
        };
        let uid = emb(store, rng, "enc.uid", cfg.users, sd);
        let gender = emb(store, rng, "enc.gender", GENDER_VOCAB, sd);
        let age = emb(store, rng, "enc.age", AGE_VOCAB, sd);
        let static_mlp = Mlp::new(store, rng, "enc.static", 3 * sd, d, d);
        let vid = emb(store, rng, "enc.vid", cfg.items, d);
        let aid = emb(store, rng, "enc.aid", cfg.authors, cfg.author_dim());
        let label = emb(store, rng, "enc.label", LABEL_FLAGS, cfg.other_dim());
        let mut pathway = |name: &str| SeqPathway {
            cont: (0..CONTINUOUS)
                .map(|c| {
                    init_param(
                        store,
                        rng,
                        format!("enc.{name}.cont{c}"),
                        ParamGroup::Dense,
                        1,
                        cfg.other_dim(),
                        1.0,
                    )
                })
                .collect(),
            mlp: Mlp::new(store, rng, &format!("enc.{name}"), cfg.record_dim(), d, d),
            pad: init_param(
                store,
                rng,
                format!("enc.{name}.pad"),
                ParamGroup::Dense,
                1,
                d,
                0.1,
            ),
        };
        let short = pathway("short");
        let positive = pathway("positive");
        let lifelong = pathway("lifelong");
        let queries = init_param(
            store,
            rng,
            "enc.queries",
            ParamGroup::Dense,
            cfg.n_q,
            d,
            1.0,
        );
        let qformer = (0..cfg.lifelong_blocks)
            .map(|i| {
                QFormerBlock::new(
                    store,
                    rng,
                    &format!("enc.qformer{i}"),
                    d,
                    cfg.heads,
                    cfg.ffn_hidden,
                )
            })
            .collect();
        let pos = init_param(
            store,
            rng,
            "enc.pos",
            ParamGroup::Dense,
            cfg.seq_len(),
            d,
            0.02,
        );
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = format!("enc.block{i}");
            let ffn = match &cfg.moe {
                Some(m) => FeedForward::Moe(MoeLayer::new(
                    store,
                    rng,
                    &format!("{name}.moe"),
                    moe_layer0 + i,
                    d,
                    m.hidden,
                    m.experts,
                    m.active,
                )?),
                None => FeedForward::Dense(SwiGlu::new(
                    store,
                    rng,
                    &format!("{name}.ffn"),
                    d,
                    cfg.ffn_hidden,
                )),
            };
            blocks.push(Block::new(store, rng, &name, d, cfg.heads, false, ffn));
        }
        Ok(Self {
            cfg: cfg.clone(),
            uid,
            gender,
            age,
            static_mlp,
            vid,
            aid,
            label,
            short,
            positive,
            lifelong,
            queries,
            qformer,
            pos,
            blocks,
        })
    }

    fn pathway(&self, which: Seq) -> &SeqPathway {
        match which {
            Seq::Short => &self.short,
            Seq::Positive => &self.positive,
            Seq::Lifelong => &self.lifelong,
        }
    }

    /// `h_u` for a batch, `[B, d_model]`.
    pub fn static_pathway<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ctxs: &[&UserContext],
    ) -> Result<Var> {
        let uid = g.param(store, self.uid);
        let gender = g.param(store, self.gender);
        let age = g.param(store, self.age);
        let u = g.gather_rows(
            uid,
            ctxs.iter()
                .map(|c| bucket(c.user, self.cfg.users))
                .collect(),
        )?;
        let s = g.gather_rows(
            gender,
            ctxs.iter()
                .map(|c| bucket(c.gender, GENDER_VOCAB))
                .collect(),
        )?;
        let a = g.gather_rows(age, ctxs.iter().map(|c| bucket(c.age, AGE_VOCAB)).collect())?;
        let f = g.concat_cols(&[u, s, a])?;
        self.static_mlp.forward(g, store, f)
    }

    /// Concatenated per-record features `[n, record_dim]`.
    pub fn record_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        which: Seq,
        records: &[(&Record, f64)],
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let p = self.pathway(which);
        let vid = g.param(store, self.vid);
        let aid = g.param(store, self.aid);
        let label = g.param(store, self.label);
        let mut parts = vec![
            g.gather_rows(
                vid,
                records
                    .iter()
                    .map(|(r, _)| bucket(r.item, cfg.items))
                    .collect(),
            )?,
            g.gather_rows(
                aid,
                records
                    .iter()
                    .map(|(r, _)| bucket(r.author, cfg.authors))
                    .collect(),
            )?,
            g.gather_rows(
                label,
                records
                    .iter()
                    .map(|(r, _)| bucket(r.labels as usize, LABEL_FLAGS))
                    .collect(),
            )?,
        ];
        let feats: Vec<[f64; CONTINUOUS]> = records
            .iter()
            .map(|(r, now)| rec_features(r, *now))
            .collect();
        for (c, &w) in p.cont.iter().enumerate() {
            let col = Array::matrix(
                records.len(),
                1,
                feats.iter().map(|f| T::of(f[c])).collect(),
            )?;
            let x = g.constant(col)?;
            let w = g.param(store, w);
            parts.push(g.matmul(x, w)?);
        }
        g.concat_cols(&parts)
    }

    /// Runs a pathway over a batch of sequences. With `len = Some(L)` every
    /// sequence is cut to its last `L` records and left-padded to exactly `L`
    /// rows; with `None` each keeps its own length (at least one row).
    /// Returns the stacked rows and the per-sequence row counts.
    pub fn embed_pathway<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        which: Seq,
        seqs: &[(&[Record], f64)],
        len: Option<usize>,
    ) -> Result<(Var, Vec<usize>)> {
        let p = self.pathway(which);
        let mut real: Vec<(&Record, f64)> = Vec::new();
        let mut layout: Vec<Option<usize>> = Vec::new();
        let mut counts = Vec::with_capacity(seqs.len());
        for &(seq, now) in seqs {
            let keep = len.map_or(seq.len(), |l| seq.len().min(l));
            let rows = len.unwrap_or(keep.max(1));
            for _ in keep..rows {
                layout.push(None);
            }
            for r in &seq[seq.len() - keep..] {
                layout.push(Some(real.len()));
                real.push((r, now));
            }
            counts.push(rows);
        }
        let pad = g.param(store, p.pad);
        let n_real = real.len();
        let table = if n_real == 0 {
            pad
        } else {
            let f = self.record_features(g, store, which, &real)?;
            let h = p.mlp.forward(g, store, f)?;
            g.concat_rows(&[h, pad])?
        };
        let idx = layout.into_iter().map(|o| o.unwrap_or(n_real)).collect();
        Ok((g.gather_rows(table, idx)?, counts))
    }

    /// Compresses each user's lifelong rows into `n_q` query rows.
    /// `lens` are the per-user row counts of `v_l`.
    pub fn lifelong_qformer<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        v_l: Var,
        lens: &[usize],
    ) -> Result<Var> {
        let nq = self.cfg.n_q;
        let b = lens.len();
        let queries = g.param(store, self.queries);
        let mut h = g.gather_rows(queries, (0..b).flat_map(|_| 0..nq).collect())?;
        let mut segments = Vec::with_capacity(b);
        let mut off = 0;
        for (u, &l) in lens.iter().enumerate() {
            segments.push(Segment {
                queries: u * nq..(u + 1) * nq,
                keys: off..off + l,
                causal: false,
            });
            off += l;
        }
        let layout = Arc::new(AttnLayout::new(segments));
        for blk in &self.qformer {
            h = blk.forward(g, store, h, v_l, Arc::clone(&layout))?;
        }
        Ok(h)
    }

    /// Encodes a batch of users into `[B * seq_len, d_model]`, user-major.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ctxs: &[&UserContext],
        trace: &mut RoutingTrace,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let b = ctxs.len();
        if b == 0 {
            return invalid("encode needs at least one user");
        }
        let h_u = self.static_pathway(g, store, ctxs)?;
        let short: Vec<(&[Record], f64)> =
            ctxs.iter().map(|c| (c.short.as_slice(), c.now)).collect();
        let (h_s, _) = self.embed_pathway(g, store, Seq::Short, &short, Some(cfg.l_s))?;
        let positive: Vec<(&[Record], f64)> = ctxs
            .iter()
            .map(|c| (c.positive.as_slice(), c.now))
            .collect();
        let (h_p, _) = self.embed_pathway(g, store, Seq::Positive, &positive, Some(cfg.l_p))?;
        let lifelong: Vec<(&[Record], f64)> = ctxs
            .iter()
            .map(|c| {
                (
                    &c.lifelong[c.lifelong.len().saturating_sub(cfg.l_l)..],
                    c.now,
                )
            })
            .collect();
        let (v_l, lens) = self.embed_pathway(g, store, Seq::Lifelong, &lifelong, None)?;
        let h_l = self.lifelong_qformer(g, store, v_l, &lens)?;

        // Interleave the four pieces so that each user's rows are contiguous.
        let all = g.concat_rows(&[h_u, h_s, h_p, h_l])?;
        let (os, op, ol) = (b, b + b * cfg.l_s, b + b * (cfg.l_s + cfg.l_p));
        let mut order = Vec::with_capacity(b * cfg.seq_len());
        for u in 0..b {
            order.push(u);
            order.extend(os + u * cfg.l_s..os + (u + 1) * cfg.l_s);
            order.extend(op + u * cfg.l_p..op + (u + 1) * cfg.l_p);
            order.extend(ol + u * cfg.n_q..ol + (u + 1) * cfg.n_q);
        }
        let z = g.gather_rows(all, order)?;
        let pos = g.param(store, self.pos);
        let pos = g.gather_rows(pos, (0..b).flat_map(|_| 0..cfg.seq_len()).collect())?;
        let mut z = g.add(z, pos)?;
        let layout = Arc::new(AttnLayout::blocks(b, cfg.seq_len(), cfg.seq_len(), false));
        for blk in &self.blocks {
            z = blk.forward(g, store, z, Arc::clone(&layout), None, trace)?;
        }
        Ok(z)
    }
}

/// Builds the encoder input for `user` from a world history, running the
/// lifelong compression with its own seeded stream.
pub fn build_context(
    world: &crate::world::World,
    user: usize,
    history: &[crate::world::Event],
    cfg: &EncoderConfig,
    content: &Array<f64>,
    seed: u64,
) -> UserContext {
    let records: Vec<Record> = history
        .iter()
        .map(|e| Record::from_event(world, e))
        .collect();
    let mut rng = crate::rng::substream(seed, &format!("compress-user-{user}"));
    let lifelong = compress_lifelong(&records, content, cfg.compress_m, cfg.l_l, &mut rng);
    UserContext::new(world, user, history, cfg.l_s, cfg.l_p, lifelong)
}
