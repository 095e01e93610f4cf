//! Preference, format and industrial rewards.

mod pscore;

pub use pscore::{
    pairs_from_log, LabeledPair, PScoreConfig, PScoreFeatures, PScoreModel, PScoreOut, PScoreVars,
    Tower,
};

use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::generation::GeneratedItem;

/// How the format reward picks its K samples from a group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatMode {
    TopK,
    Random,
}

/// Per-sample format advantage: `Some(1.0)` for selected legal samples,
/// `None` (excluded from the loss) for everything else.
pub fn format_advantages<R: Rng + ?Sized>(
    group: &[GeneratedItem],
    mode: FormatMode,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Option<f64>>> {
    if k > group.len() {
        return invalid(format!(
            "format reward selects {k} of only {} samples",
            group.len()
        ));
    }
    let chosen: Vec<usize> = match mode {
        FormatMode::TopK => {
            let mut order: Vec<usize> = (0..group.len()).collect();
            order.sort_by(|&a, &b| {
                group[b]
                    .log_prob
                    .total_cmp(&group[a].log_prob)
                    .then(a.cmp(&b))
            });
            order.truncate(k);
            order
        }
        FormatMode::Random => sample(rng, group.len(), k).into_vec(),
    };
    let mut adv = vec![None; group.len()];
    for i in chosen {
        if group[i].legal {
            adv[i] = Some(1.0);
        }
    }
    Ok(adv)
}

/// Share of legal generated items that are viral; colliding leaves count
/// fractionally.
pub fn viral_exposure(items: &[GeneratedItem], viral: &[bool]) -> f64 {
    let legal: Vec<&GeneratedItem> = items.iter().filter(|i| i.legal).collect();
    if legal.is_empty() {
        return 0.0;
    }
    let hits: f64 = legal
        .iter()
        .map(|i| {
            i.item_ids.iter().filter(|&&id| viral[id]).count() as f64 / i.item_ids.len() as f64
        })
        .sum();
    hits / legal.len() as f64
}

/// Specific industrial reward: flagged items get `alpha * r` when the
/// measured exposure proportion exceeds the target `f`.
pub fn apply_sir(
    rewards: &[f64],
    flagged: &[bool],
    f: f64,
    alpha: f64,
    proportion: f64,
) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return invalid(format!(
            "suppression factor must lie in (0, 1), got {alpha}"
        ));
    }
    if !(0.0..=1.0).contains(&f) {
        return invalid(format!("target proportion must lie in [0, 1], got {f}"));
    }
    if rewards.len() != flagged.len() {
        return invalid("one viral flag per reward required");
    }
    let binds = proportion > f;
    Ok(rewards
        .iter()
        .zip(flagged)
        .map(|(&r, &v)| if binds && v { alpha * r } else { r })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SirConfig {
    pub target: f64,
    pub alpha: f64,
}

/// Rewards attached to one generated item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub user_id: usize,
    pub codes: Vec<usize>,
    pub reward: f64,
    pub adjusted: f64,
    pub format: Option<f64>,
    pub legal: bool,
    pub viral: bool,
}

pub fn write_audit_csv<W: Write>(w: W, rows: &[RewardBundle]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["user_id", "codes", "r", "r_adj", "legal", "viral"])
        .map_err(csv_err)?;
    for r in rows {
        let codes = r
            .codes
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("-");
        out.write_record([
            r.user_id.to_string(),
            codes,
            format!("{}", r.reward),
            format!("{}", r.adjusted),
            r.legal.to_string(),
            r.viral.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Format(e.to_string())
}
