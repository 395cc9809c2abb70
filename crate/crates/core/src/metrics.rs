//! Bias and sensitivity metrics.
//!
//! YGap compares `Yes` rates between men and women. MaxSkew@k measures the
//! gender imbalance among the top-k retrieved images. Δ is the relative
//! percent change of either metric under a perturbation, β folds Δ into a
//! single reliability-aware score.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapters::{PromptSet, ResponseTable, VqaAnswer};
use crate::corpus::{balance_by_gender, Dataset, GenderLabel};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, SeedPart};

/// A YGap whose magnitude is below this has no meaningful relative change.
pub const YGAP_EXCLUSION_THRESHOLD: f64 = 0.005;

/// Balanced resamples averaged by [`max_skew_aggregate`].
pub const MAX_SKEW_RESAMPLES: usize = 5;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_K: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[serde(rename = "ygap")]
    YGap,
    MaxSkew,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::YGap => "ygap",
            MetricKind::MaxSkew => "max_skew",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub metric: MetricKind,
    pub n_samples: usize,
    /// Set for YGap values too close to zero for Δ.
    pub excluded: bool,
}

impl MetricValue {
    pub fn ygap(value: f64, n_samples: usize) -> Self {
        MetricValue {
            value,
            metric: MetricKind::YGap,
            n_samples,
            excluded: value.abs() < YGAP_EXCLUSION_THRESHOLD,
        }
    }

    pub fn max_skew(value: f64, n_samples: usize) -> Self {
        MetricValue {
            value,
            metric: MetricKind::MaxSkew,
            n_samples,
            excluded: false,
        }
    }

    pub fn new(metric: MetricKind, value: f64, n_samples: usize) -> Self {
        match metric {
            MetricKind::YGap => Self::ygap(value, n_samples),
            MetricKind::MaxSkew => Self::max_skew(value, n_samples),
        }
    }
}

/// YGap from `(gender, answer)` pairs.
pub fn ygap_from_answers<I>(answers: I) -> Result<MetricValue>
where
    I: IntoIterator<Item = (GenderLabel, VqaAnswer)>,
{
    let mut yes = [0usize; 2];
    let mut total = [0usize; 2];
    for (g, a) in answers {
        total[g.index()] += 1;
        if a == VqaAnswer::Yes {
            yes[g.index()] += 1;
        }
    }
    for g in GenderLabel::ALL {
        if total[g.index()] == 0 {
            return Err(Error::invalid(format!("no {} images for YGap", g.as_str())));
        }
    }
    let rate = |g: GenderLabel| yes[g.index()] as f64 / total[g.index()] as f64;
    Ok(MetricValue::ygap(
        rate(GenderLabel::Man) - rate(GenderLabel::Woman),
        total[0] + total[1],
    ))
}

/// YGap of one prompt over every record of `ds` under `condition`.
pub fn ygap(table: &ResponseTable, ds: &Dataset, condition: &str, prompt_id: &str) -> Result<MetricValue> {
    let mut answers = Vec::with_capacity(ds.len());
    for r in &ds.records {
        answers.push((r.gender, table.answer(&r.image_id, condition, prompt_id)?));
    }
    ygap_from_answers(answers)
}

/// Unweighted mean of per-prompt YGaps.
pub fn ygap_aggregate(table: &ResponseTable, ds: &Dataset, condition: &str, prompts: &PromptSet) -> Result<MetricValue> {
    if prompts.prompts.is_empty() {
        return Err(Error::invalid("no prompts to aggregate"));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for p in &prompts.prompts {
        let v = ygap(table, ds, condition, &p.prompt_id)?;
        sum += v.value;
        n += v.n_samples;
    }
    Ok(MetricValue::ygap(sum / prompts.prompts.len() as f64, n))
}

/// MaxSkew@k with the smoothing flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkewOutcome {
    pub value: f64,
    /// A gender was absent from the top k and its share was floored.
    pub floored: bool,
}

/// Orders retrieval candidates by score descending, ties by id ascending.
pub fn rank_candidates(items: &mut [(f64, &str, GenderLabel)]) {
    items.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
}

/// MaxSkew@k over `(score, image_id, gender)` candidates.
///
/// Each gender's share of the top k is floored at `1/(2k)` before the log.
pub fn max_skew_from_scores(items: &[(f64, &str, GenderLabel)], k: usize) -> Result<SkewOutcome> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > items.len() {
        return Err(Error::invalid(format!("k = {k} exceeds the {} candidates", items.len())));
    }
    if items.iter().any(|i| !i.0.is_finite()) {
        return Err(Error::invalid("non-finite retrieval score"));
    }
    let mut ranked = items.to_vec();
    rank_candidates(&mut ranked);
    let mut counts = [0usize; 2];
    for item in &ranked[..k] {
        counts[item.2.index()] += 1;
    }
    let floor = 1.0 / (2.0 * k as f64);
    let mut floored = false;
    let mut best = f64::NEG_INFINITY;
    for c in counts {
        let mut phi = c as f64 / k as f64;
        if phi < floor {
            phi = floor;
            floored = true;
        }
        best = best.max((phi / 0.5).ln());
    }
    Ok(SkewOutcome { value: best, floored })
}

/// MaxSkew@k of one prompt over a gender-balanced `ds`.
pub fn max_skew(table: &ResponseTable, ds: &Dataset, condition: &str, prompt_id: &str, k: usize) -> Result<MetricValue> {
    let (w, m) = ds.gender_counts();
    if w != m {
        return Err(Error::invalid(format!(
            "MaxSkew needs a gender-balanced set, got {w} women and {m} men"
        )));
    }
    let mut items = Vec::with_capacity(ds.len());
    for r in &ds.records {
        items.push((table.score(&r.image_id, condition, prompt_id)?, r.image_id.as_str(), r.gender));
    }
    let out = max_skew_from_scores(&items, k)?;
    if out.floored {
        log::debug!("MaxSkew share floor applied for prompt `{prompt_id}` under `{condition}`");
    }
    Ok(MetricValue::max_skew(out.value, ds.len()))
}

/// Mean over prompts, then over [`MAX_SKEW_RESAMPLES`] gender-balanced
/// resamples of `ds`. The resamples depend only on `seed`, so every
/// condition is scored on the same images.
pub fn max_skew_aggregate(
    table: &ResponseTable,
    ds: &Dataset,
    condition: &str,
    prompts: &PromptSet,
    k: usize,
    seed: u64,
) -> Result<MetricValue> {
    if prompts.prompts.is_empty() {
        return Err(Error::invalid("no prompts to aggregate"));
    }
    let mut total = 0.0;
    let mut n = 0;
    for r in 0..MAX_SKEW_RESAMPLES {
        let sub = balance_by_gender(ds, balanced_resample_seed(seed, r))?;
        let mut sum = 0.0;
        for p in &prompts.prompts {
            sum += max_skew(table, &sub, condition, &p.prompt_id, k)?.value;
        }
        total += sum / prompts.prompts.len() as f64;
        n = sub.len();
    }
    Ok(MetricValue::max_skew(total / MAX_SKEW_RESAMPLES as f64, n))
}

pub fn balanced_resample_seed(seed: u64, resample: usize) -> u64 {
    derive_seed(&[
        SeedPart::Str("max-skew-resample"),
        SeedPart::U64(seed),
        SeedPart::U64(resample as u64),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaValue {
    pub original: MetricValue,
    pub perturbed: MetricValue,
    /// `None` when the original value admits no relative change.
    pub delta_percent: Option<f64>,
}

impl DeltaValue {
    pub fn excluded(&self) -> bool {
        self.delta_percent.is_none()
    }
}

/// `Δ = 100 |(M - M') / M|`, undefined for excluded or zero originals.
pub fn relative_delta(original: MetricValue, perturbed: MetricValue) -> Result<DeltaValue> {
    if original.metric != perturbed.metric {
        return Err(Error::invalid(format!(
            "cannot compare {} with {}",
            original.metric, perturbed.metric
        )));
    }
    let delta_percent = if original.excluded || original.value == 0.0 {
        None
    } else {
        Some(100.0 * ((original.value - perturbed.value) / original.value).abs())
    };
    Ok(DeltaValue {
        original,
        perturbed,
        delta_percent,
    })
}

/// Unweighted mean Δ (percent) over non-excluded cells.
pub fn mean_delta<'a, I: IntoIterator<Item = &'a DeltaValue>>(cells: I) -> Option<f64> {
    let vals: Vec<f64> = cells.into_iter().filter_map(|d| d.delta_percent).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// `β = bias (1 + α Δ)`, with Δ as a fraction.
pub fn composite_beta(bias: f64, mean_delta: f64, alpha: f64) -> Result<f64> {
    for (name, v) in [("bias", bias), ("mean delta", mean_delta), ("alpha", alpha)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("{name} must be a finite non-negative number, got {v}")));
        }
    }
    Ok(bias * (1.0 + alpha * mean_delta))
}

/// Sample Pearson correlation.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("pearson_r needs at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("degenerate variance in pearson_r"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Models ordered least biased first, with 1-based ranks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankTable {
    pub order: Vec<String>,
    pub ranks: BTreeMap<String, usize>,
}

impl RankTable {
    /// Ranks by `|value|` ascending, ties by name.
    pub fn from_values(values: &BTreeMap<String, f64>) -> Result<Self> {
        if values.values().any(|v| v.is_nan()) {
            return Err(Error::invalid("NaN metric value in ranking"));
        }
        let mut order: Vec<(&String, f64)> = values.iter().map(|(k, v)| (k, v.abs())).collect();
        order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(b.0)));
        let order: Vec<String> = order.into_iter().map(|(k, _)| k.clone()).collect();
        let ranks = order.iter().enumerate().map(|(i, m)| (m.clone(), i + 1)).collect();
        Ok(RankTable { order, ranks })
    }

    pub fn top(&self) -> Option<&str> {
        self.order.first().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankShift {
    pub original: RankTable,
    pub perturbed: RankTable,
    /// Perturbed rank minus original rank.
    pub changes: BTreeMap<String, i64>,
    pub top1_changed: bool,
}

pub fn rank_shift(original: &BTreeMap<String, f64>, perturbed: &BTreeMap<String, f64>) -> Result<RankShift> {
    if !original.keys().eq(perturbed.keys()) {
        return Err(Error::invalid("model sets differ between original and perturbed rankings"));
    }
    let a = RankTable::from_values(original)?;
    let b = RankTable::from_values(perturbed)?;
    let changes = a
        .ranks
        .iter()
        .map(|(m, &r)| (m.clone(), b.ranks[m] as i64 - r as i64))
        .collect();
    let top1_changed = a.top() != b.top();
    Ok(RankShift {
        original: a,
        perturbed: b,
        changes,
        top1_changed,
    })
}
