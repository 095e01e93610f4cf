//! Grid sweeps: every (point, seed) pair runs the stage list in its own
//! directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{hash_value, RunConfig};
use crate::error::{config_err, HarnessError, Result};
use crate::manifest::{
    is_complete, read_table, write_json, write_marker, write_table, DONE, FAILED,
};
use crate::pipeline::{run_pipeline, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<Value>,
}

impl SweepAxis {
    /// `key=v1,v2,...`; use `;` between values when they contain commas
    /// (for example `eval.ks=[1,8];[1,32]`).
    pub fn parse(s: &str) -> Result<Self> {
        let Some((key, raw)) = s.split_once('=') else {
            return config_err(format!("axis {s:?} is not key=v1,v2"));
        };
        let sep = if raw.contains(';') { ';' } else { ',' };
        let values: Vec<Value> = raw
            .split(sep)
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
            .collect();
        if values.is_empty() {
            return config_err(format!("axis {key:?} has no values"));
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axes: Vec<SweepAxis>,
    pub seeds: Vec<u64>,
    pub stages: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub point: String,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub ok: bool,
    pub error: Option<String>,
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn label(assign: &[(String, Value)]) -> String {
    if assign.is_empty() {
        return "base".into();
    }
    assign
        .iter()
        .map(|(k, v)| format!("{k}={}", value_text(v)))
        .collect::<Vec<_>>()
        .join("__")
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-=".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn grid(axes: &[SweepAxis]) -> Vec<Vec<(String, Value)>> {
    let mut points: Vec<Vec<(String, Value)>> = vec![vec![]];
    for a in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                a.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((a.key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

/// Runs the grid sequentially. Failed points keep their partial output; the
/// sweep reports them after writing the aggregate tables.
pub fn run_sweep(out: &Path, base: &RunConfig, spec: &SweepSpec) -> Result<Vec<PointResult>> {
    if out.exists() {
        return Err(HarnessError::DirExists(out.to_path_buf()));
    }
    let stages: Vec<Stage> = spec
        .stages
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    if spec.seeds.is_empty() {
        return config_err("a sweep needs at least one seed");
    }
    let points = grid(&spec.axes);
    let labels: BTreeSet<String> = points.iter().map(|p| label(p)).collect();
    if labels.len() != points.len() {
        return config_err("sweep points do not map to distinct directories");
    }
    // Reject bad overrides before anything runs.
    for p in &points {
        let sets: Vec<String> = p.iter().map(|(k, v)| format!("{k}={v}")).collect();
        base.with_overrides(&sets)?.validate()?;
    }
    fs::create_dir_all(out)?;
    write_json(
        &out.join("sweep.json"),
        &json!({ "spec": spec, "base_config_hash": hash_value(&serde_json::to_value(base)?), "base_config": base }),
    )?;

    let mut results = Vec::new();
    for p in &points {
        let mut sets: Vec<String> = p.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let point = label(p);
        for &seed in &spec.seeds {
            sets.push(format!("seed={seed}"));
            let cfg = base.with_overrides(&sets)?;
            sets.pop();
            let run_dir = out.join("points").join(&point).join(format!("seed-{seed}"));
            let res = run_pipeline(&run_dir, &stages, &cfg);
            results.push(PointResult {
                point: point.clone(),
                seed,
                run_dir: run_dir.strip_prefix(out).unwrap_or(&run_dir).to_path_buf(),
                ok: res.is_ok(),
                error: res
                    .err()
                    .map(|e| serde_json::to_string(&e.record()).unwrap_or_default()),
            });
        }
    }
    write_aggregates(out, &results, &stages)?;
    let failed = results.iter().filter(|r| !r.ok).count();
    if failed > 0 {
        write_marker(
            &out.join(FAILED),
            &format!("{failed} of {} points failed\n", results.len()),
        )?;
        return Err(HarnessError::SweepFailed {
            failed,
            total: results.len(),
        });
    }
    write_marker(&out.join(DONE), "")?;
    Ok(results)
}

/// `points.csv` (status plus the last evaluation's summary) and, when
/// pre-training ran, `scaling.csv` (loss against samples seen).
fn write_aggregates(out: &Path, results: &[PointResult], stages: &[Stage]) -> Result<()> {
    let eval_stage = stages
        .iter()
        .rev()
        .find(|s| matches!(s, Stage::Eval(_)))
        .map(|s| s.to_string());
    let mut keys = BTreeSet::new();
    let mut summaries = Vec::new();
    for r in results {
        let s: std::collections::BTreeMap<String, Option<f64>> = match &eval_stage {
            Some(e) if is_complete(&out.join(&r.run_dir).join(e)) => serde_json::from_slice(
                &fs::read(out.join(&r.run_dir).join(e).join("summary.json"))?,
            )?,
            _ => Default::default(),
        };
        keys.extend(s.keys().cloned());
        summaries.push(s);
    }
    let mut header: Vec<String> = ["point", "seed", "status", "run_dir"]
        .map(String::from)
        .to_vec();
    header.extend(keys.iter().cloned());
    let rows: Vec<Vec<String>> = results
        .iter()
        .zip(&summaries)
        .map(|(r, s)| {
            let mut row = vec![
                r.point.clone(),
                r.seed.to_string(),
                if r.ok { "complete" } else { "failed" }.to_string(),
                r.run_dir.to_string_lossy().into_owned(),
            ];
            row.extend(keys.iter().map(|k| {
                s.get(k)
                    .copied()
                    .flatten()
                    .map(|v| v.to_string())
                    .unwrap_or_default()
            }));
            row
        })
        .collect();
    write_table(&out.join("points.csv"), &header, &rows)?;

    if stages.contains(&Stage::Pretrain) {
        let mut header = vec!["point".to_string(), "seed".to_string()];
        let mut rows = Vec::new();
        for r in results {
            let path = out
                .join(&r.run_dir)
                .join(Stage::Pretrain.to_string())
                .join("checkpoints.csv");
            if !path.is_file() {
                continue;
            }
            let (h, body) = read_table(&path)?;
            if header.len() == 2 {
                header.extend(h);
            }
            for b in body {
                let mut row = vec![r.point.clone(), r.seed.to_string()];
                row.extend(b);
                rows.push(row);
            }
        }
        write_table(&out.join("scaling.csv"), &header, &rows)?;
    }
    Ok(())
}
