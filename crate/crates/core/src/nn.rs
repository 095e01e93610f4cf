//! Layer building blocks over [`Graph`] and the Adam optimiser.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::moe::{MoeLayer, RoutingTrace};
use crate::error::Result;
use crate::numerics::{
    Array, AttnLayout, Gradients, Graph, ParamGroup, ParamId, ParamStore, Var, RMS_EPS,
};
use crate::rng::normal_vec;
use crate::Scalar;

/// Slope of the LeakyReLU used by the feature MLPs.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Adds a Gaussian-initialised `[rows, cols]` parameter.
pub fn init_param<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: impl Into<String>,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    std: f64,
) -> ParamId {
    let data = normal_vec(rng, rows * cols, std);
    let value = Array::matrix(rows, cols, data).expect("positive extents");
    store.add(name, group, value)
}

pub fn const_param<T: Scalar>(
    store: &mut ParamStore<T>,
    name: impl Into<String>,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    v: f64,
) -> ParamId {
    store.add(name, group, Array::filled(&[rows, cols], T::of(v)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
    ) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Self::with_std(store, rng, name, input, output, bias, std)
    }

    pub fn with_std<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let w = init_param(
            store,
            rng,
            format!("{name}.w"),
            ParamGroup::Dense,
            input,
            output,
            std,
        );
        let b = bias.then(|| {
            const_param(
                store,
                format!("{name}.b"),
                ParamGroup::Dense,
                1,
                output,
                0.0,
            )
        });
        Self { w, b }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RmsNorm {
    pub gain: ParamId,
}

impl RmsNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: const_param(
                store,
                format!("{name}.gain"),
                ParamGroup::Dense,
                1,
                dim,
                1.0,
            ),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gain = g.param(store, self.gain);
        g.rms_norm(x, gain, T::of(RMS_EPS))
    }
}

/// `Dense(LeakyReLU(Dense(x)))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Self {
            first: Linear::new(store, rng, &format!("{name}.0"), input, hidden, true),
            second: Linear::new(store, rng, &format!("{name}.1"), hidden, output, true),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = g.leaky_relu(h, T::of(LEAKY_SLOPE))?;
        self.second.forward(g, store, h)
    }
}

/// `(silu(x W1) * (x W3)) W2`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwiGlu {
    pub w1: Linear,
    pub w3: Linear,
    pub w2: Linear,
}

impl SwiGlu {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            w1: Linear::new(store, rng, &format!("{name}.w1"), dim, hidden, false),
            w3: Linear::new(store, rng, &format!("{name}.w3"), dim, hidden, false),
            w2: Linear::new(store, rng, &format!("{name}.w2"), hidden, dim, false),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let a = self.w1.forward(g, store, x)?;
        let a = g.silu(a)?;
        let b = self.w3.forward(g, store, x)?;
        let h = g.mul(a, b)?;
        self.w2.forward(g, store, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self {
            wq: Linear::new(store, rng, &format!("{name}.q"), dim, dim, false),
            wk: Linear::new(store, rng, &format!("{name}.k"), dim, dim, false),
            wv: Linear::new(store, rng, &format!("{name}.v"), dim, dim, false),
            wo: Linear::new(store, rng, &format!("{name}.o"), dim, dim, false),
            heads,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        memory: Var,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let q = self.wq.forward(g, store, queries)?;
        let k = self.wk.forward(g, store, memory)?;
        let v = self.wv.forward(g, store, memory)?;
        let a = g.attention(q, k, v, self.heads, layout)?;
        self.wo.forward(g, store, a)
    }
}

/// Feed-forward sublayer: a dense SwiGLU or a mixture of SwiGLU experts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum FeedForward {
    Dense(SwiGlu),
    Moe(MoeLayer),
}

impl FeedForward {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        trace: &mut RoutingTrace,
    ) -> Result<Var> {
        match self {
            FeedForward::Dense(f) => f.forward(g, store, x),
            FeedForward::Moe(m) => m.forward(g, store, x, trace),
        }
    }
}

/// Pre-norm transformer block with residuals around every sublayer:
/// optional self-attention, optional cross-attention, then feed-forward.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Block {
    pub self_norm: RmsNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(RmsNorm, MultiHeadAttention)>,
    pub ffn_norm: RmsNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        cross: bool,
        ffn: FeedForward,
    ) -> Self {
        Self {
            self_norm: RmsNorm::new(store, &format!("{name}.self_norm"), dim),
            self_attn: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.self_attn"),
                dim,
                heads,
            ),
            cross: cross.then(|| {
                (
                    RmsNorm::new(store, &format!("{name}.cross_norm"), dim),
                    MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), dim, heads),
                )
            }),
            ffn_norm: RmsNorm::new(store, &format!("{name}.ffn_norm"), dim),
            ffn,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        self_layout: Arc<AttnLayout>,
        memory: Option<(Var, Arc<AttnLayout>)>,
        trace: &mut RoutingTrace,
    ) -> Result<Var> {
        let h = self.self_norm.forward(g, store, x)?;
        let a = self.self_attn.forward(g, store, h, h, self_layout)?;
        let mut x = g.add(x, a)?;
        if let (Some((norm, attn)), Some((mem, layout))) = (&self.cross, memory) {
            let h = norm.forward(g, store, x)?;
            let a = attn.forward(g, store, h, mem, layout)?;
            x = g.add(x, a)?;
        }
        let h = self.ffn_norm.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h, trace)?;
        g.add(x, f)
    }
}

/// One query-compression block: queries cross-attend to the memory, then an
/// RMS-normed feed-forward transforms them. There is no residual path, so with
/// a single memory row every query becomes a function of that row alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QFormerBlock {
    pub attn: MultiHeadAttention,
    pub norm: RmsNorm,
    pub ffn: Mlp,
}

impl QFormerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm: RmsNorm::new(store, &format!("{name}.norm"), dim),
            ffn: Mlp::new(store, rng, &format!("{name}.ffn"), dim, hidden, dim),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        memory: Var,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let q = self.attn.forward(g, store, queries, memory, layout)?;
        let h = self.norm.forward(g, store, q)?;
        self.ffn.forward(g, store, h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_dense: f64,
    pub lr_sparse: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, disabled when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr_dense: 2e-3,
            lr_sparse: 4e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with separate learning rates for dense and sparse parameters.
/// Buffers are skipped.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = |s: &ParamStore<T>| {
            s.iter()
                .map(|(_, p)| vec![T::zero(); p.value().len()])
                .collect()
        };
        Self {
            cfg,
            m: zeros(store),
            v: zeros(store),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update scaled by `lr_scale` and returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr_scale: f64) -> f64 {
        let sq: f64 = grads
            .params()
            .filter(|(id, _)| store.get(*id).group != ParamGroup::Buffer)
            .map(|(_, g)| g.sq_norm().f64())
            .sum();
        let norm = sq.sqrt();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (id, g) in grads.params() {
            let p = store.get_mut(id);
            let lr = match p.group {
                ParamGroup::Dense => self.cfg.lr_dense,
                ParamGroup::Sparse => self.cfg.lr_sparse,
                ParamGroup::Buffer => continue,
            } * lr_scale;
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let step = T::of(lr / bc1);
            let (b1t, b2t) = (T::of(b1), T::of(b2));
            let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
            let inv_bc2 = T::of(1.0 / bc2);
            let eps = T::of(self.cfg.eps);
            let c = T::of(clip);
            for (((x, &gi), mi), vi) in p
                .value_mut()
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi * c;
                *mi = b1t * *mi + ob1 * gi;
                *vi = b2t * *vi + ob2 * gi * gi;
                *x -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}
