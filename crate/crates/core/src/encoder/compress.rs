//! Hierarchical K-means compression of long behaviour histories.

use rand::Rng;

use super::Record;
use crate::numerics::Array;
use crate::tokenizer::kmeans::{kmeans, sq_dist};

/// Largest `c` with `c^3 <= n`.
pub fn cube_root_floor(n: usize) -> usize {
    let mut c = (n as f64).cbrt().round() as usize;
    while c * c * c > n {
        c -= 1;
    }
    while (c + 1) * (c + 1) * (c + 1) <= n {
        c += 1;
    }
    c
}

/// Cluster count used at one recursion step.
pub fn step_clusters(n: usize) -> usize {
    cube_root_floor(n).max(2)
}

/// Leaf clusters (indices into `history`) from recursive K-means over the
/// items' content rows. A set stops splitting once it holds at most `m`
/// records or all of its content rows coincide.
pub fn leaf_clusters<R: Rng + ?Sized>(
    history: &[Record],
    content: &Array<f64>,
    m: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let all: Vec<usize> = (0..history.len()).collect();
    let mut out = Vec::new();
    split(history, content, m.max(1), all, rng, &mut out);
    out
}

fn split<R: Rng + ?Sized>(
    history: &[Record],
    content: &Array<f64>,
    m: usize,
    members: Vec<usize>,
    rng: &mut R,
    out: &mut Vec<Vec<usize>>,
) {
    if members.len() <= m {
        out.push(members);
        return;
    }
    let row = |i: usize| content.row(history[i].item);
    let mut distinct: Vec<usize> = members.iter().map(|&i| history[i].item).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let rows_differ = distinct
        .windows(2)
        .any(|w| content.row(w[0]) != content.row(w[1]));
    if !rows_differ {
        out.push(members);
        return;
    }
    let k = step_clusters(members.len()).min(distinct.len());
    let dim = content.cols();
    let points: Vec<f64> = members
        .iter()
        .flat_map(|&i| row(i).iter().copied())
        .collect();
    let fit = kmeans(&points, dim, k, rng).expect("k within point count");
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (pos, &c) in fit.assign.iter().enumerate() {
        groups[c].push(members[pos]);
    }
    let n = members.len();
    for g in groups.into_iter().filter(|g| !g.is_empty()) {
        if g.len() == n {
            out.push(g);
        } else {
            split(history, content, m, g, rng, out);
        }
    }
}

/// Merges one cluster: categorical fields come from the record whose item is
/// nearest the cluster's content mean, continuous fields are averaged.
pub fn aggregate(history: &[Record], content: &Array<f64>, members: &[usize]) -> Record {
    let dim = content.cols();
    let mut centre = vec![0.0; dim];
    for &i in members {
        for (c, v) in centre.iter_mut().zip(content.row(history[i].item)) {
            *c += v;
        }
    }
    let n = members.len() as f64;
    centre.iter_mut().for_each(|c| *c /= n);
    let rep = *members
        .iter()
        .min_by(|&&a, &&b| {
            sq_dist(content.row(history[a].item), &centre)
                .total_cmp(&sq_dist(content.row(history[b].item), &centre))
                .then(a.cmp(&b))
        })
        .expect("non-empty cluster");
    let avg = |f: fn(&Record) -> f64| members.iter().map(|&i| f(&history[i])).sum::<f64>() / n;
    Record {
        item: history[rep].item,
        author: history[rep].author,
        labels: history[rep].labels,
        tag: avg(|r| r.tag),
        ts: avg(|r| r.ts),
        playtime: avg(|r| r.playtime),
        duration: avg(|r| r.duration),
    }
}

/// Replaces every record of the last `max_out` by its cluster's merged
/// record, then orders the result by (averaged) timestamp. Histories with at
/// most `m` records come back unchanged.
pub fn compress_lifelong<R: Rng + ?Sized>(
    history: &[Record],
    content: &Array<f64>,
    m: usize,
    max_out: usize,
    rng: &mut R,
) -> Vec<Record> {
    if history.len() <= m {
        return history[history.len().saturating_sub(max_out)..].to_vec();
    }
    let leaves = leaf_clusters(history, content, m, rng);
    let mut merged = vec![None; history.len()];
    for leaf in &leaves {
        let r = aggregate(history, content, leaf);
        for &i in leaf {
            merged[i] = Some(r.clone());
        }
    }
    let start = history.len().saturating_sub(max_out);
    let mut out: Vec<Record> = merged
        .into_iter()
        .skip(start)
        .map(|r| r.expect("every record in a leaf"))
        .collect();
    out.sort_by(|a, b| a.ts.total_cmp(&b.ts));
    out
}
