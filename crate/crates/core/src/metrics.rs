//! AUROC, FPR at a target TPR, and threshold selection.
//!
//! All scores are oriented so that higher means more likely OOD, and OOD is
//! the positive class. AUROC counts ties as one half; thresholds are
//! inclusive (`score >= γ` is flagged OOD).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

fn check(scores: &[f64], what: &'static str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NanScore(what));
    }
    Ok(())
}

fn check_rate(x: f64, name: &str) -> Result<()> {
    if !(x > 0.0 && x <= 1.0) {
        return Err(Error::OutOfRange(format!("{name} must lie in (0, 1], got {x}")));
    }
    Ok(())
}

/// Probability that a random OOD score exceeds a random ID score, from the
/// Mann-Whitney U statistic with midranks.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check(id_scores, "ID scores")?;
    check(ood_scores, "OOD scores")?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

    // Ranks are 1-based; a tie block spanning ranks i+1..=j gets (i+1+j)/2.
    // Twice the rank sum stays integral, so the accumulation is exact.
    let mut twice_rank_sum = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let twice_mid = (i + 1 + j) as f64;
        let n_ood = all[i..j].iter().filter(|e| e.1).count() as f64;
        twice_rank_sum += twice_mid * n_ood;
        i = j;
    }
    let n_o = ood_scores.len() as f64;
    let n_i = id_scores.len() as f64;
    let twice_u = twice_rank_sum - n_o * (n_o + 1.0);
    Ok(twice_u / (2.0 * n_o * n_i))
}

fn sorted_desc(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    v
}

fn count_ge(sorted_desc: &[f64], t: f64) -> usize {
    sorted_desc.partition_point(|&s| s >= t)
}

/// Returns `(fpr, γ)`: `γ` is the largest threshold that still flags at least
/// `tpr` of the OOD scores, and `fpr` is the fraction of ID scores `>= γ`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<(f64, f64)> {
    check(id_scores, "ID scores")?;
    check(ood_scores, "OOD scores")?;
    check_rate(tpr, "tpr")?;
    let ood = sorted_desc(ood_scores);
    let n_o = ood.len();
    // Smallest k with k / n_o >= tpr, using the same division as the check.
    let mut k = ((tpr * n_o as f64).ceil() as usize).clamp(1, n_o);
    while k > 1 && (k - 1) as f64 / n_o as f64 >= tpr {
        k -= 1;
    }
    while k < n_o && (k as f64 / n_o as f64) < tpr {
        k += 1;
    }
    let gamma = ood[k - 1];
    let id = sorted_desc(id_scores);
    let fpr = count_ge(&id, gamma) as f64 / id.len() as f64;
    Ok((fpr, gamma))
}

/// FPR at 95% TPR.
pub fn fpr95(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    Ok(fpr_at_tpr(id_scores, ood_scores, 0.95)?.0)
}

/// Smallest `γ` such that at least `keep` of the ID scores are strictly below
/// it. When that needs every ID score below, `γ` is the next float above the
/// maximum.
pub fn threshold_gamma_id(id_scores: &[f64], keep: f64) -> Result<f64> {
    check(id_scores, "ID scores")?;
    check_rate(keep, "keep")?;
    let mut s = id_scores.to_vec();
    s.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    for (i, &v) in s.iter().enumerate() {
        // `i` scores are strictly below the first occurrence of `v`.
        if (i == 0 || s[i - 1] < v) && i as f64 / n >= keep {
            return Ok(v);
        }
    }
    Ok(s[s.len() - 1].next_up())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub detector: String,
    pub params: BTreeMap<String, String>,
    pub auroc: f64,
    pub fpr95: f64,
    pub threshold: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

/// Computes AUROC and FPR at `tpr` in one pass over the inputs.
pub fn evaluate(
    id_scores: &[f64],
    ood_scores: &[f64],
    tpr: f64,
    detector: &str,
    params: BTreeMap<String, String>,
) -> Result<EvalReport> {
    let auroc = auroc(id_scores, ood_scores)?;
    let (fpr95, threshold) = fpr_at_tpr(id_scores, ood_scores, tpr)?;
    Ok(EvalReport {
        detector: detector.to_string(),
        params,
        auroc,
        fpr95,
        threshold,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
    })
}

/// One OOD dataset's report with its group tag (e.g. `near`, `far`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetReport {
    pub name: String,
    pub group: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Mean FPR95 and AUROC over a set of datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Average {
    pub fpr95: f64,
    pub auroc: f64,
    pub count: usize,
}

fn average<'a>(it: impl Iterator<Item = &'a DatasetReport>) -> Option<Average> {
    let (mut f, mut a, mut n) = (0.0, 0.0, 0usize);
    for d in it {
        f += d.report.fpr95;
        a += d.report.auroc;
        n += 1;
    }
    (n > 0).then(|| Average {
        fpr95: f / n as f64,
        auroc: a / n as f64,
        count: n,
    })
}

/// Group names in first-seen order with their averages.
pub fn group_averages(reports: &[DatasetReport]) -> Vec<(String, Average)> {
    let mut groups: Vec<&str> = Vec::new();
    for r in reports {
        if !groups.contains(&r.group.as_str()) {
            groups.push(&r.group);
        }
    }
    groups
        .into_iter()
        .filter_map(|g| average(reports.iter().filter(|r| r.group == g)).map(|a| (g.to_string(), a)))
        .collect()
}

/// Average over all datasets, each weighted equally.
pub fn overall_average(reports: &[DatasetReport]) -> Option<Average> {
    average(reports.iter())
}

/// One-row table in percent: `FPR95`/`AUROC` per dataset, then per group,
/// then the overall average.
pub fn table_csv(detector: &str, reports: &[DatasetReport]) -> String {
    let mut header = vec!["method".to_string()];
    let mut row = vec![detector.to_string()];
    let mut push = |name: &str, fpr: f64, auc: f64| {
        header.push(format!("{name}_fpr95"));
        header.push(format!("{name}_auroc"));
        row.push(format!("{:.2}", 100.0 * fpr));
        row.push(format!("{:.2}", 100.0 * auc));
    };
    for r in reports {
        push(&r.name, r.report.fpr95, r.report.auroc);
    }
    for (g, a) in group_averages(reports) {
        push(&format!("{g}_avg"), a.fpr95, a.auroc);
    }
    if let Some(a) = overall_average(reports) {
        push("average", a.fpr95, a.auroc);
    }
    let mut out = String::new();
    let _ = writeln!(out, "{}", header.join(","));
    let _ = writeln!(out, "{}", row.join(","));
    out
}
