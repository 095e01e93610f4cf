//! Query compression of item content tokens and contrastive item alignment.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::pairs::ItemPairSet;
use crate::error::{invalid, Error, Result};
use crate::nn::{init_param, Adam, AdamConfig, QFormerBlock};
use crate::numerics::{Array, AttnLayout, Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::rng::substream;
use crate::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignerConfig {
    /// Content tokens per item, `N_M`.
    pub n_tokens: usize,
    /// Token width `d_t`.
    pub d_t: usize,
    /// Learnable queries, `N_tilde_M`.
    pub n_queries: usize,
    /// Compression blocks, `N_c`.
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub temperature: f64,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        Self {
            n_tokens: 8,
            d_t: 512,
            n_queries: 4,
            layers: 2,
            heads: 4,
            ffn_hidden: 1024,
            temperature: 0.07,
            batch: 32,
            steps: 200,
            lr: 1e-3,
        }
    }
}

/// Iterated cross-attention then RMS-normed feed-forward over item tokens.
/// `tokens` stacks `batch` items of `n_tokens` rows; the result stacks
/// `batch` blocks of query rows.
pub fn qformer_compress<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    blocks: &[QFormerBlock],
    queries: Var,
    tokens: Var,
    batch: usize,
) -> Result<Var> {
    if blocks.is_empty() {
        return invalid("query compression needs at least one block");
    }
    let nq = g.value(queries).rows();
    let rows = g.value(tokens).rows();
    if batch == 0 || rows % batch != 0 || g.value(queries).cols() != g.value(tokens).cols() {
        return Err(Error::Shape {
            op: "qformer_compress",
            detail: format!(
                "queries {:?}, tokens {:?}, batch {batch}",
                g.shape(queries),
                g.shape(tokens)
            ),
        });
    }
    let layout = Arc::new(AttnLayout::blocks(batch, nq, rows / batch, false));
    let idx: Vec<usize> = (0..batch).flat_map(|_| 0..nq).collect();
    let mut q = g.gather_rows(queries, idx)?;
    for b in blocks {
        q = b.forward(g, store, q, tokens, Arc::clone(&layout))?;
    }
    Ok(q)
}

/// In-batch contrastive loss: row `i` of `a` should match row `i` of `b`
/// against every other row of `b`, on cosine similarity over `temperature`.
pub fn i2i_contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    temperature: f64,
) -> Result<Var> {
    let n = g.value(a).rows();
    if n < 2 {
        return invalid("contrastive loss needs at least two pairs per batch");
    }
    if temperature <= 0.0 {
        return invalid(format!("temperature must be positive, got {temperature}"));
    }
    let an = unit_rows(g, a)?;
    let bn = unit_rows(g, b)?;
    let sim = g.matmul_t(an, bn)?;
    let logits = g.scale(sim, T::of(1.0 / temperature))?;
    let ce = g.cross_entropy(logits, (0..n).collect())?;
    g.mean(ce)
}

fn unit_rows<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    let s = g.sum_rows(sq)?;
    let s = g.add_const(s, T::of(1e-12))?;
    let r = g.sqrt(s)?;
    let inv = g.recip(r)?;
    g.mul_col(x, inv)
}

/// Trainable aligner: learnable queries plus the compression blocks.
#[derive(Clone, Debug)]
pub struct ItemAligner<T> {
    pub cfg: AlignerConfig,
    pub store: ParamStore<T>,
    pub queries: ParamId,
    pub blocks: Vec<QFormerBlock>,
}

impl<T: Scalar> ItemAligner<T> {
    pub fn new(cfg: AlignerConfig, seed: u64) -> Self {
        let mut rng = substream(seed, "aligner-init");
        let mut store = ParamStore::new();
        let queries = init_param(
            &mut store,
            &mut rng,
            "queries",
            ParamGroup::Dense,
            cfg.n_queries,
            cfg.d_t,
            1.0,
        );
        let blocks = (0..cfg.layers)
            .map(|l| {
                QFormerBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("qformer{l}"),
                    cfg.d_t,
                    cfg.heads,
                    cfg.ffn_hidden,
                )
            })
            .collect();
        Self {
            cfg,
            store,
            queries,
            blocks,
        }
    }

    /// Flattened `[batch, n_queries * d_t]` embeddings of the given items.
    pub fn embed(&self, g: &mut Graph<T>, content: &[&Array<T>]) -> Result<Var> {
        let parts = content
            .iter()
            .map(|c| g.constant((*c).clone()))
            .collect::<Result<Vec<_>>>()?;
        let tokens = g.concat_rows(&parts)?;
        let q = g.param(&self.store, self.queries);
        let out = qformer_compress(g, &self.store, &self.blocks, q, tokens, content.len())?;
        g.reshape(out, vec![content.len(), self.cfg.n_queries * self.cfg.d_t])
    }

    /// Embeds the whole corpus in chunks, returning one row per item.
    pub fn embed_all(&self, content: &[Array<T>]) -> Result<Array<f64>> {
        let width = self.cfg.n_queries * self.cfg.d_t;
        let mut data = Vec::with_capacity(content.len() * width);
        for chunk in content.chunks(64) {
            let mut g = Graph::new();
            let refs: Vec<&Array<T>> = chunk.iter().collect();
            let e = self.embed(&mut g, &refs)?;
            data.extend(g.value(e).data().iter().map(|v| v.f64()));
        }
        Array::matrix(content.len(), width, data)
    }

    /// Minimises the contrastive loss over shuffled pair batches; returns the
    /// loss of every step.
    pub fn train(
        &mut self,
        content: &[Array<T>],
        pairs: &ItemPairSet,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let batch = self.cfg.batch.min(pairs.pairs.len());
        if batch < 2 {
            return invalid("alignment needs at least two item pairs");
        }
        let mut rng = substream(seed, "aligner-train");
        let mut opt = Adam::new(
            &self.store,
            AdamConfig {
                lr_dense: self.cfg.lr,
                ..AdamConfig::default()
            },
        );
        let mut order: Vec<usize> = (0..pairs.pairs.len()).collect();
        let mut cursor = order.len();
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            if cursor + batch > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let sel = &order[cursor..cursor + batch];
            cursor += batch;
            let left: Vec<&Array<T>> = sel.iter().map(|&i| &content[pairs.pairs[i].a]).collect();
            let right: Vec<&Array<T>> = sel.iter().map(|&i| &content[pairs.pairs[i].b]).collect();
            let mut g = Graph::new();
            let a = self.embed(&mut g, &left)?;
            let b = self.embed(&mut g, &right)?;
            let loss = i2i_contrastive_loss(&mut g, a, b, self.cfg.temperature)?;
            losses.push(g.scalar(loss).f64());
            let grads = g.backward(loss)?;
            opt.step(&mut self.store, &grads, 1.0);
        }
        Ok(losses)
    }
}
