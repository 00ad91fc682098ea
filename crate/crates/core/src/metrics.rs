//! Per-class top-1 accuracy, the seen/unseen harmonic mean and TNR at fixed
//! FNR for the unseen-class detector. Rates are fractions in `[0, 1]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::id3m::calibrate_theta;
use crate::scalar::Scalar;

/// Accuracy averaged over classes, plus the per-class breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    pub acc: f64,
    pub per_class: BTreeMap<u32, f64>,
}

/// Mean over `classes` of the fraction of each class's samples predicted
/// correctly. Classes without samples are left out of the mean.
pub fn per_class_top1(preds: &[u32], labels: &[u32], classes: &[u32]) -> Result<ClassAccuracy> {
    if preds.len() != labels.len() {
        bail!(Shape, "{} predictions for {} labels", preds.len(), labels.len());
    }
    if labels.is_empty() {
        bail!(InvalidInput, "empty evaluation set");
    }
    let mut tally: BTreeMap<u32, (usize, usize)> = classes.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &y) in preds.iter().zip(labels) {
        let Some(entry) = tally.get_mut(&y) else {
            bail!(InvalidInput, "label {y} not among evaluated classes");
        };
        entry.1 += 1;
        if p == y {
            entry.0 += 1;
        }
    }
    let per_class: BTreeMap<u32, f64> = tally
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(c, (hit, n))| (c, hit as f64 / n as f64))
        .collect();
    let acc = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(ClassAccuracy { acc, per_class })
}

/// `2us / (u + s)`, or 0 when both are 0.
pub fn harmonic_mean(unseen: f64, seen: f64) -> Result<f64> {
    for (name, v) in [("unseen", unseen), ("seen", seen)] {
        if !(0.0..=1.0).contains(&v) {
            bail!(InvalidInput, "{name} accuracy {v} outside [0, 1]");
        }
    }
    if unseen + seen == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * unseen * seen / (unseen + seen))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TnrPoint {
    pub fnr: f64,
    pub tnr: f64,
}

/// For each target FNR, calibrates a threshold on the seen-class degrees and
/// reports the fraction of unseen-class degrees strictly below it.
pub fn tnr_at_fnr<T: Scalar>(seen: &[T], unseen: &[T], fnr_grid: &[f64]) -> Result<Vec<TnrPoint>> {
    if seen.is_empty() || unseen.is_empty() {
        bail!(InvalidInput, "TNR needs both seen and unseen degrees");
    }
    fnr_grid
        .iter()
        .map(|&fnr| {
            let theta = calibrate_theta(seen, fnr)?;
            let flagged = unseen.iter().filter(|&&d| d < theta).count();
            Ok(TnrPoint {
                fnr,
                tnr: flagged as f64 / unseen.len() as f64,
            })
        })
        .collect()
}

/// FNR grid used for threshold selection, `{0.05, 0.07, ..., 0.19}`.
pub const DEFAULT_FNR_GRID: [f64; 8] = [0.05, 0.07, 0.09, 0.11, 0.13, 0.15, 0.17, 0.19];

/// Evaluation summary written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub acc: f64,
    pub acc_seen: Option<f64>,
    pub acc_unseen: Option<f64>,
    pub h: Option<f64>,
    pub per_class: BTreeMap<u32, f64>,
    pub tnr_at_fnr: Option<Vec<TnrPoint>>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let rates = [Some(self.acc), self.acc_seen, self.acc_unseen, self.h]
            .into_iter()
            .flatten()
            .chain(self.per_class.values().copied())
            .chain(self.tnr_at_fnr.iter().flatten().flat_map(|p| [p.fnr, p.tnr]));
        for r in rates {
            if !(0.0..=1.0).contains(&r) {
                bail!(Invariant, "rate {r} outside [0, 1]");
            }
        }
        if let (Some(u), Some(s), Some(h)) = (self.acc_unseen, self.acc_seen, self.h) {
            if (harmonic_mean(u, s)? - h).abs() > 1e-9 {
                bail!(Invariant, "h = {h} inconsistent with seen {s} / unseen {u}");
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `fnr,tnr` CSV with a header row.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("fnr,tnr\n");
        for p in self.tnr_at_fnr.iter().flatten() {
            out.push_str(&format!("{},{}\n", p.fnr, p.tnr));
        }
        out
    }
}
