//! Reconstruction loss, codebook utilisation and token entropy.

use serde::{Deserialize, Serialize};

use super::rq::CodebookStack;
use crate::numerics::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerMetrics {
    /// Mean squared error per embedding coordinate.
    pub recon_loss: f64,
    /// Fraction of centroids used at least once, per layer.
    pub utilization: Vec<f64>,
    /// Shannon entropy in nats of the code distribution, per layer.
    pub entropy: Vec<f64>,
}

/// Per-layer utilisation and entropy of a code table.
pub fn code_stats(codes: &[Vec<usize>], n_t: usize, l_t: usize) -> (Vec<f64>, Vec<f64>) {
    let mut util = Vec::with_capacity(l_t);
    let mut ent = Vec::with_capacity(l_t);
    let n = codes.len() as f64;
    for l in 0..l_t {
        let mut counts = vec![0usize; n_t];
        for c in codes {
            counts[c[l]] += 1;
        }
        util.push(counts.iter().filter(|&&c| c > 0).count() as f64 / n_t as f64);
        ent.push(
            counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    -p * p.ln()
                })
                .sum(),
        );
    }
    (util, ent)
}

/// Mean squared reconstruction error of `codes` against the embeddings.
pub fn recon_loss(emb: &Array<f64>, codes: &[Vec<usize>], cb: &CodebookStack) -> f64 {
    let mut total = 0.0;
    for (i, c) in codes.iter().enumerate() {
        let rec = cb.reconstruct(c);
        total += emb
            .row(i)
            .iter()
            .zip(&rec)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    total / emb.len() as f64
}

pub fn tokenizer_metrics(
    emb: &Array<f64>,
    codes: &[Vec<usize>],
    cb: &CodebookStack,
) -> TokenizerMetrics {
    let (utilization, entropy) = code_stats(codes, cb.n_t, cb.l_t());
    TokenizerMetrics {
        recon_loss: recon_loss(emb, codes, cb),
        utilization,
        entropy,
    }
}
