//! Residual quantisation with per-layer k-means codebooks.

use super::kmeans::{kmeans, nearest, KMeans};
use super::trie::Trie;
use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::rng::{normal, substream};

/// `L_t` codebooks of `N_t` centroids, each centroid an item-shaped matrix
/// stored flattened, plus the trie of the quantised corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookStack {
    pub n_t: usize,
    /// Item matrix shape `(N_tilde_M, d_t)`.
    pub item_shape: (usize, usize),
    /// One `n_t * dim` block per layer.
    pub layers: Vec<Vec<f64>>,
    pub trie: Trie,
}

/// Result of quantising one embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub codes: Vec<usize>,
    pub reconstruction: Vec<f64>,
    pub residual: Vec<f64>,
}

impl CodebookStack {
    pub fn l_t(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.item_shape.0 * self.item_shape.1
    }

    pub fn centroid(&self, layer: usize, code: usize) -> &[f64] {
        let d = self.dim();
        &self.layers[layer][code * d..(code + 1) * d]
    }

    /// Greedy nearest-centroid coding, ties to the lowest index.
    pub fn quantize(&self, e: &[f64]) -> Quantized {
        self.quantize_depth(e, self.l_t())
    }

    /// Quantisation using only the first `depth` layers.
    pub fn quantize_depth(&self, e: &[f64], depth: usize) -> Quantized {
        let d = self.dim();
        let mut residual = e.to_vec();
        let mut reconstruction = vec![0.0; d];
        let mut codes = Vec::with_capacity(depth);
        for layer in &self.layers[..depth] {
            let (c, _) = nearest(&residual, layer, d);
            let cen = &layer[c * d..(c + 1) * d];
            for j in 0..d {
                residual[j] -= cen[j];
                reconstruction[j] += cen[j];
            }
            codes.push(c);
        }
        Quantized {
            codes,
            reconstruction,
            residual,
        }
    }

    /// Sum of the selected centroids.
    pub fn reconstruct(&self, codes: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (l, &c) in codes.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.centroid(l, c)) {
                *o += v;
            }
        }
        out
    }

    fn with_trie(
        n_t: usize,
        item_shape: (usize, usize),
        layers: Vec<Vec<f64>>,
        emb: &Array<f64>,
    ) -> (Self, Vec<Vec<usize>>) {
        let l_t = layers.len();
        let mut stack = Self {
            n_t,
            item_shape,
            layers,
            trie: Trie::new(l_t),
        };
        let codes: Vec<Vec<usize>> = (0..emb.rows())
            .map(|i| stack.quantize(emb.row(i)).codes)
            .collect();
        for (i, c) in codes.iter().enumerate() {
            stack.trie.insert(c, i);
        }
        (stack, codes)
    }
}

fn check_corpus(
    emb: &Array<f64>,
    item_shape: (usize, usize),
    n_t: usize,
    l_t: usize,
) -> Result<()> {
    if item_shape.0 * item_shape.1 != emb.cols() {
        return Err(Error::Shape {
            op: "fit_rq_kmeans",
            detail: format!("item shape {item_shape:?} vs {} columns", emb.cols()),
        });
    }
    if emb.rows() < n_t {
        return Err(Error::InvalidArgument(format!(
            "corpus of {} items is smaller than N_t={n_t}",
            emb.rows()
        )));
    }
    if l_t == 0 || n_t == 0 {
        return Err(Error::InvalidArgument(
            "N_t and L_t must be positive".into(),
        ));
    }
    Ok(())
}

/// Fitted stack plus the per-layer k-means runs and corpus codes.
pub struct RqFit {
    pub stack: CodebookStack,
    pub codes: Vec<Vec<usize>>,
    pub runs: Vec<KMeans>,
}

/// RQ-Kmeans: layer `l` is k-means over the residuals left by layers `< l`.
/// `emb` holds one flattened item matrix per row.
pub fn fit_rq_kmeans(
    emb: &Array<f64>,
    item_shape: (usize, usize),
    n_t: usize,
    l_t: usize,
    seed: u64,
) -> Result<RqFit> {
    check_corpus(emb, item_shape, n_t, l_t)?;
    let dim = emb.cols();
    let mut residual = emb.data().to_vec();
    let mut layers = Vec::with_capacity(l_t);
    let mut runs = Vec::with_capacity(l_t);
    for l in 0..l_t {
        let mut rng = substream(seed, &format!("rq-layer-{l}"));
        let km = kmeans(&residual, dim, n_t, &mut rng)?;
        for (i, r) in residual.chunks_exact_mut(dim).enumerate() {
            let (c, _) = nearest(r, &km.centroids, dim);
            debug_assert_eq!(c, km.assign[i]);
            for (x, v) in r.iter_mut().zip(km.centroid(c)) {
                *x -= v;
            }
        }
        layers.push(km.centroids.clone());
        runs.push(km);
    }
    let (stack, codes) = CodebookStack::with_trie(n_t, item_shape, layers, emb);
    Ok(RqFit { stack, codes, runs })
}

/// Baseline: each layer's codebook is drawn once from a Gaussian matching the
/// per-coordinate mean and spread of the current residuals, never trained.
pub fn fit_random_rq(
    emb: &Array<f64>,
    item_shape: (usize, usize),
    n_t: usize,
    l_t: usize,
    seed: u64,
) -> Result<(CodebookStack, Vec<Vec<usize>>)> {
    check_corpus(emb, item_shape, n_t, l_t)?;
    let dim = emb.cols();
    let n = emb.rows() as f64;
    let mut residual = emb.data().to_vec();
    let mut layers = Vec::with_capacity(l_t);
    for l in 0..l_t {
        let mut rng = substream(seed, &format!("random-rq-layer-{l}"));
        let mut mean = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in residual.chunks_exact(dim) {
            for j in 0..dim {
                mean[j] += r[j] / n;
                sq[j] += r[j] * r[j] / n;
            }
        }
        let book: Vec<f64> = (0..n_t * dim)
            .map(|i| {
                let j = i % dim;
                let sd = (sq[j] - mean[j] * mean[j]).max(0.0).sqrt();
                mean[j] + sd * normal::<f64, _>(&mut rng)
            })
            .collect();
        for r in residual.chunks_exact_mut(dim) {
            let (c, _) = nearest(r, &book, dim);
            for (x, v) in r.iter_mut().zip(&book[c * dim..(c + 1) * dim]) {
                *x -= v;
            }
        }
        layers.push(book);
    }
    Ok(CodebookStack::with_trie(n_t, item_shape, layers, emb))
}
