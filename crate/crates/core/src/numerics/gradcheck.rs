//! Central finite-difference checks for graph gradients (double precision).

use rand::seq::index::sample;
use rand::Rng;

use super::{Array, Graph, ParamStore, Var};
use crate::error::Result;
use crate::rng::normal;

pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|, floor)` over the stacked probe vector.
    pub fn rel_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / na.max(nn).max(1e-7)
    }
}

/// Checks gradients of a graph-building loss with respect to explicit inputs.
/// `build` receives one differentiable [`Var`] per input array.
pub fn check_inputs<R, F>(
    inputs: &[Array<f64>],
    build: F,
    rng: &mut R,
    coords: usize,
) -> Result<GradCheck>
where
    R: Rng + ?Sized,
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Array<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = xs
            .iter()
            .map(|x| g.input(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|x| g.input(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Array<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(x, v)| {
            grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Array::zeros(x.shape()))
        })
        .collect();
    probe(inputs.to_vec(), &analytic, eval, rng, coords)
}

/// Checks gradients with respect to every parameter of `store`.
pub fn check_params<R, F>(
    store: &ParamStore<f64>,
    build: F,
    rng: &mut R,
    coords: usize,
) -> Result<GradCheck>
where
    R: Rng + ?Sized,
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let values: Vec<Array<f64>> = store.iter().map(|(_, p)| p.value().clone()).collect();
    let eval = |xs: &[Array<f64>]| -> Result<f64> {
        let mut s = store.clone();
        for ((_, p), x) in s.iter_mut().zip(xs) {
            *p.value_mut() = x.clone();
        }
        let mut g = Graph::new();
        let loss = build(&mut g, &s)?;
        Ok(g.scalar(loss))
    };
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let analytic = grads.dense(store);
    probe(values, &analytic, eval, rng, coords)
}

/// Compares `coords` random single coordinates plus one random direction.
fn probe<R, E>(
    mut xs: Vec<Array<f64>>,
    analytic: &[Array<f64>],
    eval: E,
    rng: &mut R,
    coords: usize,
) -> Result<GradCheck>
where
    R: Rng + ?Sized,
    E: Fn(&[Array<f64>]) -> Result<f64>,
{
    let sizes: Vec<usize> = xs.iter().map(|x| x.len()).collect();
    let total: usize = sizes.iter().sum();
    let locate = |mut flat: usize| {
        for (i, &n) in sizes.iter().enumerate() {
            if flat < n {
                return (i, flat);
            }
            flat -= n;
        }
        unreachable!("index within total")
    };
    let mut out = GradCheck {
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    for flat in sample(rng, total, coords.min(total)).into_iter() {
        let (i, j) = locate(flat);
        let orig = xs[i].data()[j];
        xs[i].data_mut()[j] = orig + FD_STEP;
        let up = eval(&xs)?;
        xs[i].data_mut()[j] = orig - FD_STEP;
        let down = eval(&xs)?;
        xs[i].data_mut()[j] = orig;
        out.numeric.push((up - down) / (2.0 * FD_STEP));
        out.analytic.push(analytic[i].data()[j]);
    }

    let dirs: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&n| (0..n).map(|_| normal::<f64, _>(rng)).collect())
        .collect();
    let norm = dirs.iter().flatten().map(|d| d * d).sum::<f64>().sqrt();
    let shifted = |sign: f64| -> Vec<Array<f64>> {
        xs.iter()
            .zip(&dirs)
            .map(|(x, d)| {
                let mut y = x.clone();
                for (v, dv) in y.data_mut().iter_mut().zip(d) {
                    *v += sign * FD_STEP * dv / norm;
                }
                y
            })
            .collect()
    };
    let num = (eval(&shifted(1.0))? - eval(&shifted(-1.0))?) / (2.0 * FD_STEP);
    let ana: f64 = analytic
        .iter()
        .zip(&dirs)
        .map(|(a, d)| a.data().iter().zip(d).map(|(x, y)| x * y).sum::<f64>())
        .sum::<f64>()
        / norm;
    out.numeric.push(num);
    out.analytic.push(ana);
    Ok(out)
}
