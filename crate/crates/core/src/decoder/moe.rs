//! Top-k mixture of SwiGLU experts with loss-free load balancing.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{const_param, Linear, SwiGlu};
use crate::numerics::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::Scalar;

/// Expert hidden width: `(2/3) * 4 * d_model` rounded up to a multiple of `multiple`.
pub fn expert_hidden(d_model: usize, multiple: usize) -> usize {
    let raw = (8 * d_model).div_ceil(3);
    raw.div_ceil(multiple) * multiple
}

/// Per-layer token counts routed to each expert, accumulated over forwards.
#[derive(Clone, Debug, Default)]
pub struct RoutingTrace {
    pub loads: BTreeMap<usize, Vec<usize>>,
}

impl RoutingTrace {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&mut self, layer: usize, counts: &[usize]) {
        let e = self
            .loads
            .entry(layer)
            .or_insert_with(|| vec![0; counts.len()]);
        for (a, c) in e.iter_mut().zip(counts) {
            *a += c;
        }
    }

    /// Max over layers of `max load / mean load`; 1.0 is perfect balance.
    pub fn max_over_mean(&self) -> f64 {
        self.loads
            .values()
            .map(|l| max_over_mean(l))
            .fold(f64::NAN, f64::max)
    }
}

pub fn max_over_mean(loads: &[usize]) -> f64 {
    let total: usize = loads.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let mean = total as f64 / loads.len() as f64;
    *loads.iter().max().expect("non-empty") as f64 / mean
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MoeLayer {
    /// Index of this layer inside a [`RoutingTrace`].
    pub layer: usize,
    pub gate: Linear,
    /// Routing biases, a non-trainable buffer of shape `[1, experts]`.
    pub bias: ParamId,
    pub experts: Vec<SwiGlu>,
    pub k: usize,
}

impl MoeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        layer: usize,
        dim: usize,
        hidden: usize,
        experts: usize,
        k: usize,
    ) -> Result<Self> {
        if k == 0 || k > experts {
            return invalid(format!(
                "need 1 <= k <= experts, got k={k}, experts={experts}"
            ));
        }
        Ok(Self {
            layer,
            gate: Linear::new(store, rng, &format!("{name}.gate"), dim, experts, false),
            bias: const_param(
                store,
                format!("{name}.route_bias"),
                ParamGroup::Buffer,
                1,
                experts,
                0.0,
            ),
            experts: (0..experts)
                .map(|j| SwiGlu::new(store, rng, &format!("{name}.expert{j}"), dim, hidden))
                .collect(),
            k,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Selected experts per token, in ascending expert order.
    pub fn route<T: Scalar>(&self, scores: &[T], bias: &[T], n: usize) -> Vec<Vec<usize>> {
        let e = self.experts.len();
        (0..n)
            .map(|i| select_top_k(&scores[i * e..(i + 1) * e], bias, self.k))
            .collect()
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        trace: &mut RoutingTrace,
    ) -> Result<Var> {
        let n = g.value(x).rows();
        let e = self.experts.len();
        let scores = self.gate.forward(g, store, x)?;
        let chosen = self.route(g.value(scores).data(), store.value(self.bias).data(), n);
        let mut mask = vec![false; n * e];
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); e];
        for (i, sel) in chosen.iter().enumerate() {
            for &j in sel {
                mask[i * e + j] = true;
                members[j].push(i);
            }
        }
        let counts: Vec<usize> = members.iter().map(Vec::len).collect();
        trace.record(self.layer, &counts);

        let weights = g.masked_softmax(scores, mask)?;
        let mut out: Option<Var> = None;
        for (j, idx) in members.into_iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            let xj = g.gather_rows(x, idx.clone())?;
            let yj = self.experts[j].forward(g, store, xj)?;
            let wcol = g.slice_cols(weights, j, 1)?;
            let wj = g.gather_rows(wcol, idx.clone())?;
            let yj = g.mul_col(yj, wj)?;
            let full = g.scatter_add_rows(yj, idx, n)?;
            out = Some(match out {
                Some(acc) => g.add(acc, full)?,
                None => full,
            });
        }
        Ok(out.expect("every token selects k >= 1 experts"))
    }

    /// Loss-free balancing step on this layer's routing biases.
    pub fn update_bias<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        loads: &[usize],
        u: f64,
    ) -> Result<()> {
        let old: Vec<f64> = store.value(self.bias).to_f64_vec();
        let new = balance_biases(&old, loads, u)?;
        for (b, v) in store
            .get_mut(self.bias)
            .value_mut()
            .data_mut()
            .iter_mut()
            .zip(new)
        {
            *b = T::of(v);
        }
        Ok(())
    }
}

/// Top-`k` indices of `score + bias`, ties to the lower index, returned sorted.
pub fn select_top_k<T: Scalar>(scores: &[T], bias: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (scores[a] + bias[a], scores[b] + bias[b]);
        sb.partial_cmp(&sa).expect("finite scores").then(a.cmp(&b))
    });
    let mut sel = order[..k].to_vec();
    sel.sort_unstable();
    sel
}

/// `b_j <- b_j - u * sign(load_j - mean load)`, with `sign(0) = 0`.
pub fn balance_biases(biases: &[f64], loads: &[usize], u: f64) -> Result<Vec<f64>> {
    if u <= 0.0 {
        return invalid(format!("bias update rate must be positive, got {u}"));
    }
    if biases.len() != loads.len() {
        return invalid("one load per expert required");
    }
    let mean = loads.iter().sum::<usize>() as f64 / loads.len() as f64;
    Ok(biases
        .iter()
        .zip(loads)
        .map(|(&b, &l)| {
            let d = l as f64 - mean;
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            b - u * s
        })
        .collect())
}
