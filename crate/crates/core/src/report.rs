//! CSV tables and figure data.
//!
//! All emitters are pure functions of a [`BiasReport`] (plus probe results
//! for the scatter). Output is comma-separated with a header row, LF line
//! endings, and reals at 6 significant digits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{composite_beta, pearson_r, rank_shift, DeltaValue, MetricKind, MetricValue};
use crate::perturb::{condition_id, FeatureKind, Strength};
use crate::probe::ProbeResult;

/// Formats a real with 6 significant digits, without trailing zeros.
pub fn fmt_real(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-5..15).contains(&exp) {
        let s = format!("{x:.5e}");
        let (mant, e) = s.split_once('e').expect("exponent format");
        let mant = trim_zeros(mant);
        return format!("{mant}e{e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{x:.decimals$}");
    // Rounding may carry into a new digit (9.999995 -> 10.00000); re-trim.
    let s = trim_zeros(&s).to_string();
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Display factor for a metric: YGap is shown ×100.
pub fn metric_scale(kind: MetricKind) -> f64 {
    match kind {
        MetricKind::YGap => 100.0,
        MetricKind::MaxSkew => 1.0,
    }
}

/// Band index of a Δ on a 10-step scale over `[0, 50]`, clipped above.
pub fn band_label(delta_percent: f64) -> String {
    let idx = (delta_percent.max(0.0) / 5.0).floor().min(10.0) as u32;
    format!("{idx}/10")
}

pub const EXCLUDED: &str = "excluded";
pub const INCOMPARABLE: &str = "incomparable";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub feature: FeatureKind,
    pub strength: Strength,
    pub delta: DeltaValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub original: MetricValue,
    pub cells: Vec<Cell>,
}

impl ModelReport {
    /// Mean Δ in percent over non-excluded cells.
    pub fn mean_delta(&self) -> Option<f64> {
        crate::metrics::mean_delta(self.cells.iter().map(|c| &c.delta))
    }

    pub fn cell(&self, feature: FeatureKind, strength: Strength) -> Option<&Cell> {
        self.cells.iter().find(|c| c.feature == feature && c.strength == strength)
    }
}

/// One benchmark's metrics for every model and perturbation condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub benchmark: String,
    pub metric: MetricKind,
    /// Sorted by model name.
    pub models: Vec<ModelReport>,
}

impl BiasReport {
    pub fn new(benchmark: impl Into<String>, metric: MetricKind, mut models: Vec<ModelReport>) -> Result<Self> {
        models.sort_by(|a, b| a.model.cmp(&b.model));
        for m in &models {
            if m.original.metric != metric {
                return Err(Error::invalid(format!("model `{}` reports {}", m.model, m.original.metric)));
            }
            for c in &m.cells {
                if c.delta.original != m.original {
                    return Err(Error::invalid(format!(
                        "model `{}`: cell {} has a different original value",
                        m.model,
                        condition_id(c.feature, c.strength)
                    )));
                }
            }
        }
        Ok(BiasReport {
            benchmark: benchmark.into(),
            metric,
            models,
        })
    }

    /// Every (feature, strength) present in any model, sorted.
    pub fn conditions(&self) -> Vec<(FeatureKind, Strength)> {
        let mut out: Vec<_> = self
            .models
            .iter()
            .flat_map(|m| m.cells.iter().map(|c| (c.feature, c.strength)))
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

fn csv_delta(d: &DeltaValue) -> String {
    d.delta_percent.map_or_else(|| EXCLUDED.to_string(), fmt_real)
}

/// Δ heat table: one row per (model, feature, strength).
pub fn emit_delta_table(report: &BiasReport) -> String {
    let mut out = String::from("benchmark,model,feature,strength,metric,delta_percent,band\n");
    for m in &report.models {
        for c in &m.cells {
            let band = c.delta.delta_percent.map(band_label).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                report.benchmark,
                m.model,
                c.feature,
                c.strength,
                report.metric,
                csv_delta(&c.delta),
                band
            );
        }
    }
    out
}

/// Raw metric table: original value and every perturbed value per model,
/// in display units (see the `scale` column).
pub fn emit_raw_table(report: &BiasReport) -> String {
    let conds = report.conditions();
    let scale = metric_scale(report.metric);
    let mut out = String::from("benchmark,model,metric,scale,excluded,orig");
    for (f, s) in &conds {
        let _ = write!(out, ",{}", condition_id(*f, *s));
    }
    out.push('\n');
    for m in &report.models {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            report.benchmark,
            m.model,
            report.metric,
            fmt_real(scale),
            m.original.excluded,
            fmt_real(scale * m.original.value)
        );
        for (f, s) in &conds {
            let v = m.cell(*f, *s).map_or_else(String::new, |c| fmt_real(scale * c.delta.perturbed.value));
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Long-format metric export, one row per (model, feature, strength).
pub fn emit_metrics_csv(report: &BiasReport, alpha: f64) -> Result<String> {
    let summary: BTreeMap<String, SummaryRow> = two_dim_summary(report, alpha)?
        .into_iter()
        .map(|r| (r.model.clone(), r))
        .collect();
    let scale = metric_scale(report.metric);
    let mut out = String::from(
        "benchmark,model,feature,strength,metric,scale,original,perturbed,delta_percent,excluded,beta\n",
    );
    for m in &report.models {
        let beta = summary[&m.model].beta.map_or_else(|| INCOMPARABLE.to_string(), fmt_real);
        for c in &m.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                report.benchmark,
                m.model,
                c.feature,
                c.strength,
                report.metric,
                fmt_real(scale),
                fmt_real(scale * c.delta.original.value),
                fmt_real(scale * c.delta.perturbed.value),
                csv_delta(&c.delta),
                c.delta.excluded(),
                beta
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub model: String,
    /// Magnitude of the original metric.
    pub bias: f64,
    /// Mean Δ as a fraction; `None` when every cell is excluded.
    pub mean_delta: Option<f64>,
    pub beta: Option<f64>,
}

/// Sorts `(model, bias, mean Δ fraction)` entries by β ascending, ties by
/// name. Entries without a mean Δ are incomparable and listed last.
pub fn rank_by_beta(entries: Vec<(String, f64, Option<f64>)>, alpha: f64) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::with_capacity(entries.len());
    for (model, bias, mean_delta) in entries {
        let bias = bias.abs();
        let beta = match mean_delta {
            Some(d) => Some(composite_beta(bias, d, alpha)?),
            None => {
                log::warn!("model `{model}` has no comparable cells; reported as incomparable");
                None
            }
        };
        rows.push(SummaryRow {
            model,
            bias,
            mean_delta,
            beta,
        });
    }
    rows.sort_by(|a, b| match (a.beta, b.beta) {
        (Some(x), Some(y)) => x.total_cmp(&y).then_with(|| a.model.cmp(&b.model)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.model.cmp(&b.model),
    });
    Ok(rows)
}

pub fn two_dim_summary(report: &BiasReport, alpha: f64) -> Result<Vec<SummaryRow>> {
    rank_by_beta(
        report
            .models
            .iter()
            .map(|m| (m.model.clone(), m.original.value, m.mean_delta().map(|d| d / 100.0)))
            .collect(),
        alpha,
    )
}

pub fn emit_summary_rows(benchmark: &str, metric: MetricKind, rows: &[SummaryRow]) -> String {
    let mut out = String::from("benchmark,model,metric,bias,mean_delta,beta\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map_or_else(|| INCOMPARABLE.to_string(), fmt_real);
        let _ = writeln!(
            out,
            "{benchmark},{},{metric},{},{},{}",
            r.model,
            fmt_real(r.bias),
            opt(r.mean_delta),
            opt(r.beta)
        );
    }
    out
}

/// Bias-versus-sensitivity summary sorted by β.
pub fn emit_two_dim_summary(report: &BiasReport, alpha: f64) -> Result<String> {
    Ok(emit_summary_rows(&report.benchmark, report.metric, &two_dim_summary(report, alpha)?))
}

/// Ranking shifts between original and perturbed metrics, per condition.
pub fn emit_rankings(report: &BiasReport) -> Result<String> {
    let mut out = String::from("benchmark,feature,strength,model,original_rank,perturbed_rank,change,top1_changed\n");
    let original: BTreeMap<String, f64> = report.models.iter().map(|m| (m.model.clone(), m.original.value)).collect();
    for (f, s) in report.conditions() {
        let mut perturbed = BTreeMap::new();
        for m in &report.models {
            let c = m.cell(f, s).ok_or_else(|| {
                Error::invalid(format!("model `{}` lacks condition {}", m.model, condition_id(f, s)))
            })?;
            perturbed.insert(m.model.clone(), c.delta.perturbed.value);
        }
        let shift = rank_shift(&original, &perturbed)?;
        for model in &shift.original.order {
            let _ = writeln!(
                out,
                "{},{f},{s},{model},{},{},{},{}",
                report.benchmark,
                shift.original.ranks[model],
                shift.perturbed.ranks[model],
                shift.changes[model],
                shift.top1_changed
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub benchmark: String,
    pub feature: FeatureKind,
    pub model: String,
    pub strength: Strength,
    pub acc_b: f64,
    pub delta_percent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
    pub n: usize,
}

/// Least-squares fit of `ys` on `xs`, cross-checked against
/// `slope = r σy / σx`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    let r = pearson_r(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let via_r = r * (syy / sxx).sqrt();
    if (slope - via_r).abs() > 1e-9 * slope.abs().max(1.0) {
        return Err(Error::invalid(format!("slope cross-check failed: {slope} vs {via_r}")));
    }
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
        r,
        n: xs.len(),
    })
}

/// Pairs each non-excluded Δ cell with the probe accuracy of its feature.
pub fn scatter_points(report: &BiasReport, probes: &[ProbeResult]) -> Vec<ScatterPoint> {
    let acc: BTreeMap<FeatureKind, f64> = probes.iter().map(|p| (p.kind, p.mean)).collect();
    let mut out = Vec::new();
    for m in &report.models {
        for c in &m.cells {
            if let (Some(&a), Some(d)) = (acc.get(&c.feature), c.delta.delta_percent) {
                out.push(ScatterPoint {
                    benchmark: report.benchmark.clone(),
                    feature: c.feature,
                    model: m.model.clone(),
                    strength: c.strength,
                    acc_b: a,
                    delta_percent: d,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        (&a.benchmark, a.feature, &a.model, a.strength).cmp(&(&b.benchmark, b.feature, &b.model, b.strength))
    });
    out
}

/// Scatter rows and the fitted line as two CSV documents.
pub fn emit_scatter(points: &[ScatterPoint]) -> Result<(String, String, LineFit)> {
    if points.len() < 2 {
        return Err(Error::invalid("scatter needs at least two points"));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.acc_b).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.delta_percent).collect();
    let fit = fit_line(&xs, &ys)?;
    let mut rows = String::from("benchmark,feature,model,strength,acc_b,delta_percent\n");
    for p in points {
        let _ = writeln!(
            rows,
            "{},{},{},{},{},{}",
            p.benchmark,
            p.feature,
            p.model,
            p.strength,
            fmt_real(p.acc_b),
            fmt_real(p.delta_percent)
        );
    }
    let fit_csv = format!(
        "n,slope,intercept,pearson_r\n{},{},{},{}\n",
        fit.n,
        fmt_real(fit.slope),
        fmt_real(fit.intercept),
        fmt_real(fit.r)
    );
    Ok((rows, fit_csv, fit))
}

/// Probe accuracy table; per-seed accuracies are kept at full precision so
/// the table can be read back exactly.
pub fn emit_probe_table(benchmark: &str, results: &[ProbeResult]) -> String {
    let mut out = String::from("benchmark,feature,mean_acc,std_acc,cell,per_seed_acc\n");
    for r in results {
        let seeds: Vec<String> = r.per_seed_acc.iter().map(|a| format!("{a:?}")).collect();
        let _ = writeln!(
            out,
            "{benchmark},{},{},{},{},{}",
            r.kind,
            fmt_real(r.mean),
            fmt_real(r.std),
            r.cell(),
            seeds.join(";")
        );
    }
    out
}

/// Reads a table written by [`emit_probe_table`].
pub fn parse_probe_table(text: &str) -> Result<Vec<(String, ProbeResult)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| Error::invalid(format!("probe table line {}: {m}", i + 1));
        if cols.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let kind: FeatureKind = cols[1].parse().map_err(|_| bad("unknown feature"))?;
        let accs = cols[5]
            .split(';')
            .map(|a| a.parse::<f64>().map_err(|_| bad("bad accuracy")))
            .collect::<Result<Vec<_>>>()?;
        out.push((cols[0].to_string(), ProbeResult::from_accuracies(kind, accs)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_real(12.737127371), "12.7371");
        assert_eq!(fmt_real(-3.69), "-3.69");
        assert_eq!(fmt_real(0.055), "0.055");
        assert_eq!(fmt_real(175.77), "175.77");
        assert_eq!(fmt_real(100.0), "100");
        assert_eq!(fmt_real(9.9999996), "10");
        assert_eq!(fmt_real(0.000123456789), "0.000123457");
        assert_eq!(fmt_real(1.5e-9), "1.5e-9");
        assert_eq!(fmt_real(-0.0000001), "-1e-7");
        assert_eq!(fmt_real(0.0), "0");
    }

    #[test]
    fn bands() {
        assert_eq!(band_label(0.0), "0/10");
        assert_eq!(band_label(4.99), "0/10");
        assert_eq!(band_label(12.85), "2/10");
        assert_eq!(band_label(49.9), "9/10");
        assert_eq!(band_label(50.0), "10/10");
        assert_eq!(band_label(175.77), "10/10");
    }

    #[test]
    fn beta_ordering() {
        let rows = rank_by_beta(
            vec![("a".into(), 0.05, Some(0.10)), ("b".into(), 0.03, Some(0.50)), ("c".into(), 0.2, None)],
            1.0,
        )
        .unwrap();
        assert_eq!(rows[0].model, "b");
        assert!((rows[0].beta.unwrap() - 0.045).abs() < 1e-15);
        assert!((rows[1].beta.unwrap() - 0.055).abs() < 1e-15);
        assert_eq!(rows[2].beta, None);
        let plain = rank_by_beta(vec![("a".into(), 0.05, Some(0.10)), ("b".into(), 0.03, Some(0.50))], 0.0).unwrap();
        assert_eq!(plain[0].model, "b");
        assert_eq!(plain[0].beta, Some(0.03));
    }

    #[test]
    fn line_fit() {
        let xs = [0.5, 0.6, 0.7, 0.9];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
        let f = fit_line(&xs, &ys).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12);
        assert!((f.intercept + 1.0).abs() < 1e-12);
        assert!((f.r - 1.0).abs() < 1e-12);
        assert!(fit_line(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn probe_table_round_trip() {
        let r = ProbeResult::from_accuracies(FeatureKind::Color, vec![0.7, 0.72, 0.69999, 0.75, 0.8]);
        let back = parse_probe_table(&emit_probe_table("coco", std::slice::from_ref(&r))).unwrap();
        assert_eq!(back, vec![("coco".to_string(), r)]);
    }
}
