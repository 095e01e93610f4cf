//! Point-wise semantic-ID decoder: causal self-attention, cross-attention to
//! the encoder output, dense or MoE feed-forward, one output head per code
//! position.

pub mod moe;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::{init_param, Block, FeedForward, Linear, RmsNorm, SwiGlu};
use crate::numerics::{AttnLayout, Graph, ParamGroup, ParamId, ParamStore, Segment, Var};
use crate::Scalar;
use moe::{MoeLayer, RoutingTrace};

/// Mixture-of-experts shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeSpec {
    pub experts: usize,
    pub active: usize,
    /// Expert SwiGLU hidden width.
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub moe: Option<MoeSpec>,
    pub n_t: usize,
    pub l_t: usize,
}

/// Which positions to produce logits for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Heads {
    All,
    Last,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    /// Row 0 is BOS; position `p >= 1` uses rows `1 + (p-1)*N_t ..`.
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: RmsNorm,
    pub heads: Vec<Linear>,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &DecoderConfig,
        moe_layer0: usize,
    ) -> Result<Self> {
        let d = cfg.d_model;
        if d == 0 || cfg.heads == 0 || d % cfg.heads != 0 || cfg.n_t == 0 || cfg.l_t == 0 {
            return invalid("decoder dims must be positive and d_model divisible by heads");
        }
        let rows = 1 + (cfg.l_t - 1) * cfg.n_t;
        let embed = init_param(store, rng, "dec.embed", ParamGroup::Sparse, rows, d, 1.0);
        let pos = init_param(store, rng, "dec.pos", ParamGroup::Dense, cfg.l_t, d, 0.02);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = format!("dec.block{i}");
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
            blocks.push(Block::new(store, rng, &name, d, cfg.heads, true, ffn));
        }
        let norm = RmsNorm::new(store, "dec.norm", d);
        let heads = (0..cfg.l_t)
            .map(|j| Linear::with_std(store, rng, &format!("dec.head{j}"), d, cfg.n_t, true, 0.02))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            pos,
            blocks,
            norm,
            heads,
        })
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeLayer> {
        self.blocks.iter().filter_map(|b| match &b.ffn {
            FeedForward::Moe(m) => Some(m),
            FeedForward::Dense(_) => None,
        })
    }

    /// Embedding-table rows for `[BOS, prefix...]`.
    pub fn input_rows(&self, prefix: &[usize]) -> Vec<usize> {
        let n_t = self.cfg.n_t;
        std::iter::once(0)
            .chain(prefix.iter().enumerate().map(|(j, &c)| 1 + j * n_t + c))
            .collect()
    }

    /// Logits for a batch of equal-length prefixes. Prefix `i` cross-attends
    /// rows `owners[i] * mem_len ..` of `z_enc`. Returns one `[n, N_t]` block
    /// per requested position; position `j` scores code `j` (0-based).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_enc: Var,
        mem_len: usize,
        prefixes: &[&[usize]],
        owners: &[usize],
        heads: Heads,
        trace: &mut RoutingTrace,
    ) -> Result<Vec<Var>> {
        let n = prefixes.len();
        if n == 0 || owners.len() != n {
            return invalid("decoder needs one owner per prefix and a non-empty batch");
        }
        let p = prefixes[0].len();
        if p >= self.cfg.l_t || prefixes.iter().any(|s| s.len() != p) {
            return shape_err(
                "decoder",
                format!("prefixes must share a length below L_t={}", self.cfg.l_t),
            );
        }
        if prefixes
            .iter()
            .any(|s| s.iter().any(|&c| c >= self.cfg.n_t))
        {
            return invalid("code outside the codebook");
        }
        let rows = p + 1;
        let idx: Vec<usize> = prefixes.iter().flat_map(|s| self.input_rows(s)).collect();
        let table = g.param(store, self.embed);
        let x = g.gather_rows(table, idx)?;
        let pos = g.param(store, self.pos);
        let pos = g.gather_rows(pos, (0..n).flat_map(|_| 0..rows).collect())?;
        let mut x = g.add(x, pos)?;
        let self_layout = Arc::new(AttnLayout::blocks(n, rows, rows, true));
        let cross = Arc::new(AttnLayout::new(
            owners
                .iter()
                .enumerate()
                .map(|(i, &o)| Segment {
                    queries: i * rows..(i + 1) * rows,
                    keys: o * mem_len..(o + 1) * mem_len,
                    causal: false,
                })
                .collect(),
        ));
        for blk in &self.blocks {
            x = blk.forward(
                g,
                store,
                x,
                Arc::clone(&self_layout),
                Some((z_enc, Arc::clone(&cross))),
                trace,
            )?;
        }
        let positions = match heads {
            Heads::All => 0..rows,
            Heads::Last => p..rows,
        };
        let mut out = Vec::with_capacity(rows);
        for j in positions {
            let h = g.gather_rows(x, (0..n).map(|i| i * rows + j).collect())?;
            let h = self.norm.forward(g, store, h)?;
            out.push(self.heads[j].forward(g, store, h)?);
        }
        Ok(out)
    }
}

/// Per-sequence negative log-likelihood `[n, 1]`: the sum over positions of
/// cross-entropy against the target codes.
pub fn sequence_nll<T: Scalar>(
    g: &mut Graph<T>,
    logits: &[Var],
    targets: &[&[usize]],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (j, &l) in logits.iter().enumerate() {
        let t = targets.iter().map(|s| s[j]).collect();
        let ce = g.cross_entropy(l, t)?;
        total = Some(match total {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| crate::Error::Empty("no positions"))
}

/// Next-token loss: sum over code positions, mean over the batch.
pub fn ntp_loss<T: Scalar>(g: &mut Graph<T>, logits: &[Var], targets: &[&[usize]]) -> Result<Var> {
    let nll = sequence_nll(g, logits, targets)?;
    g.mean(nll)
}
