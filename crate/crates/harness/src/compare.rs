//! Relative-improvement tables between two runs or two sets of seeded runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use onerec::stats::{mean, t_interval};

use crate::error::{HarnessError, Result};
use crate::manifest::{is_complete, read_table, write_json, write_table, Manifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairedOver {
    Seeds,
    Users,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub metric: String,
    pub a_mean: f64,
    pub b_mean: f64,
    /// `mean(b - a) / |mean(a)|`.
    pub relative_improvement: f64,
    /// 95% interval of the relative improvement.
    pub ci_low: f64,
    pub ci_high: f64,
    pub pairs: usize,
    pub paired_over: PairedOver,
}

/// Completed evaluation directories under `dir`, keyed by seed. `dir` may be
/// an evaluation stage itself, a run directory, or a directory of runs.
pub fn find_evals(dir: &Path, eval_stage: &str) -> Result<BTreeMap<u64, PathBuf>> {
    fn consider(d: &Path, out: &mut BTreeMap<u64, PathBuf>) -> Result<()> {
        if is_complete(d) {
            let m = Manifest::read(d)?;
            if m.stage.starts_with("eval-") {
                out.insert(m.seed, d.to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    consider(dir, &mut out)?;
    consider(&dir.join(eval_stage), &mut out)?;
    if out.is_empty() && dir.is_dir() {
        let mut subs: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subs.sort();
        for s in subs {
            consider(&s.join(eval_stage), &mut out)?;
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Incomplete(dir.to_path_buf()));
    }
    Ok(out)
}

fn summary(dir: &Path) -> Result<BTreeMap<String, f64>> {
    let v: BTreeMap<String, Option<f64>> =
        serde_json::from_slice(&fs::read(dir.join("summary.json"))?)?;
    Ok(v.into_iter()
        .map(|(k, x)| (k, x.unwrap_or(f64::NAN)))
        .collect())
}

fn per_user(dir: &Path, metric: &str) -> Result<Vec<f64>> {
    let (header, rows) = read_table(&dir.join("per_user.csv"))?;
    let col =
        header
            .iter()
            .position(|h| h == metric)
            .ok_or_else(|| HarnessError::MissingMetric {
                metric: metric.into(),
                dir: dir.to_path_buf(),
            })?;
    Ok(rows
        .iter()
        .map(|r| r[col].parse::<f64>().unwrap_or(f64::NAN))
        .collect())
}

fn row(metric: &str, a: &[f64], b: &[f64], over: PairedOver) -> Result<CompareRow> {
    let (a, b): (Vec<f64>, Vec<f64>) = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| (*x, *y))
        .unzip();
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y - x).collect();
    let (a_mean, b_mean) = (mean(&a), mean(&b));
    let (rel, lo, hi) = if d.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let (m, half) = t_interval(&d, 0.95)?;
        if a_mean == 0.0 {
            if m == 0.0 && half == 0.0 {
                (0.0, 0.0, 0.0)
            } else {
                (f64::NAN, f64::NAN, f64::NAN)
            }
        } else {
            let s = a_mean.abs();
            (m / s, (m - half) / s, (m + half) / s)
        }
    };
    Ok(CompareRow {
        metric: metric.into(),
        a_mean,
        b_mean,
        relative_improvement: rel,
        ci_low: lo,
        ci_high: hi,
        pairs: d.len(),
        paired_over: over,
    })
}

/// Pairs runs by seed. With two or more shared seeds the interval is over
/// seeds; with one it is over that run's users.
pub fn compare(
    dir_a: &Path,
    dir_b: &Path,
    metrics: &[String],
    eval_stage: &str,
) -> Result<Vec<CompareRow>> {
    let ea = find_evals(dir_a, eval_stage)?;
    let eb = find_evals(dir_b, eval_stage)?;
    let seeds: Vec<u64> = ea.keys().filter(|s| eb.contains_key(s)).copied().collect();
    if seeds.is_empty() {
        return Err(HarnessError::Config(format!(
            "{} and {} share no seeds",
            dir_a.display(),
            dir_b.display()
        )));
    }
    let lookup = |dir: &Path, s: &BTreeMap<String, f64>, m: &str| {
        s.get(m)
            .copied()
            .ok_or_else(|| HarnessError::MissingMetric {
                metric: m.into(),
                dir: dir.to_path_buf(),
            })
    };
    let mut out = Vec::with_capacity(metrics.len());
    for m in metrics {
        if seeds.len() >= 2 {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for s in &seeds {
                a.push(lookup(&ea[s], &summary(&ea[s])?, m)?);
                b.push(lookup(&eb[s], &summary(&eb[s])?, m)?);
            }
            out.push(row(m, &a, &b, PairedOver::Seeds)?);
        } else {
            let (da, db) = (&ea[&seeds[0]], &eb[&seeds[0]]);
            lookup(da, &summary(da)?, m)?;
            lookup(db, &summary(db)?, m)?;
            out.push(row(
                m,
                &per_user(da, m)?,
                &per_user(db, m)?,
                PairedOver::Users,
            )?);
        }
    }
    Ok(out)
}

pub fn table(rows: &[CompareRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let header = [
        "metric",
        "a_mean",
        "b_mean",
        "relative_improvement",
        "ci_low",
        "ci_high",
        "pairs",
        "paired_over",
    ]
    .map(String::from)
    .to_vec();
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.metric.clone(),
                r.a_mean.to_string(),
                r.b_mean.to_string(),
                r.relative_improvement.to_string(),
                r.ci_low.to_string(),
                r.ci_high.to_string(),
                r.pairs.to_string(),
                format!("{:?}", r.paired_over).to_lowercase(),
            ]
        })
        .collect();
    (header, body)
}

/// Writes `comparison.csv` and `comparison.json` into a new directory.
pub fn write_comparison(out: &Path, rows: &[CompareRow]) -> Result<()> {
    if out.exists() {
        return Err(HarnessError::DirExists(out.to_path_buf()));
    }
    fs::create_dir_all(out)?;
    let (h, b) = table(rows);
    write_table(&out.join("comparison.csv"), &h, &b)?;
    write_json(&out.join("comparison.json"), rows)
}
