//! End-to-end drivers: collecting responses across perturbation conditions,
//! computing a [`BiasReport`], and writing or verifying a report bundle.
//!
//! A bundle is a directory holding the computed tables together with every
//! input needed to recompute them: prompts, gender labels per condition,
//! the collected response tables and, optionally, probe accuracies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{collect, CollectOptions, Modality, ModelBackend, PromptSet, ResponseTable};
use crate::corpus::{self, BBox, Dataset, GenderLabel, ImageRecord};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::{self, relative_delta, MetricKind, MetricValue};
use crate::perturb::{condition_id, FeatureKind, PerturbationSpec, Strength, ORIGINAL_CONDITION};
use crate::probe::ProbeResult;
use crate::report::{self, BiasReport, Cell, ModelReport};

/// A dataset as seen under one perturbation condition.
#[derive(Debug, Clone)]
pub struct Condition {
    pub id: String,
    /// `None` for the original images.
    pub cell: Option<(FeatureKind, Strength)>,
    pub dataset: Dataset,
}

impl Condition {
    pub fn original(dataset: Dataset) -> Self {
        Condition {
            id: ORIGINAL_CONDITION.into(),
            cell: None,
            dataset,
        }
    }
}

/// Every (feature, strength) pair drawn from the two selections.
pub fn grid(features: &[FeatureKind], strengths: &[Strength]) -> Vec<(FeatureKind, Strength)> {
    let mut out: Vec<_> = features
        .iter()
        .flat_map(|&f| strengths.iter().map(move |&s| (f, s)))
        .collect();
    out.sort();
    out.dedup();
    out
}

/// The original condition followed by the perturbed manifests found in
/// `perturbed_dir` for each cell of `cells`.
pub fn load_conditions(
    original: Dataset,
    perturbed_dir: Option<&Path>,
    cells: &[(FeatureKind, Strength)],
) -> Result<Vec<Condition>> {
    let ids: BTreeSet<&str> = original.records.iter().map(|r| r.image_id.as_str()).collect();
    let mut out = Vec::with_capacity(cells.len() + 1);
    for &(f, s) in cells {
        let dir = perturbed_dir
            .ok_or_else(|| Error::invalid("perturbed conditions requested without a perturbed-image directory"))?;
        let path = dir.join(PerturbationSpec::new(f, s, 0).manifest_name());
        let ds = corpus::load_manifest(&path)?;
        if let Some(r) = ds.records.iter().find(|r| !ids.contains(r.image_id.as_str())) {
            return Err(Error::invalid(format!(
                "{}: image `{}` is not in the original manifest",
                path.display(),
                r.image_id
            )));
        }
        out.push(Condition {
            id: condition_id(f, s),
            cell: Some((f, s)),
            dataset: ds,
        });
    }
    out.insert(0, Condition::original(original));
    Ok(out)
}

/// Collects one backend's responses under every condition into one table.
pub fn collect_conditions(
    backend: &ModelBackend,
    prompts: &PromptSet,
    conditions: &[Condition],
    opts: &CollectOptions,
) -> Result<ResponseTable> {
    let mut table = ResponseTable::new(backend.name());
    let mut missing = Vec::new();
    for c in conditions {
        match collect(backend, &c.dataset, prompts, &c.id, opts) {
            Ok(t) => table.merge(&t)?,
            // Gather misses across conditions so one error lists them all.
            Err(Error::ReplayMiss(keys)) => missing.extend(keys),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::ReplayMiss(missing));
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub benchmark: String,
    /// Top-k depth for MaxSkew; unused for VQA.
    pub k: usize,
    pub alpha: f64,
    /// Seed of the balanced MaxSkew resamples.
    pub seed: u64,
}

/// Largest usable MaxSkew depth for `ds`: `k` clamped to the size of a
/// gender-balanced subset. The flag reports whether clamping happened.
pub fn effective_k(k: usize, ds: &Dataset) -> (usize, bool) {
    let (w, m) = ds.gender_counts();
    let cap = 2 * w.min(m);
    if k > cap {
        (cap, true)
    } else {
        (k, false)
    }
}

pub fn metric_for(modality: Modality) -> MetricKind {
    match modality {
        Modality::Vqa => MetricKind::YGap,
        Modality::Retrieval => MetricKind::MaxSkew,
    }
}

/// Aggregate metric of one model under one condition.
pub fn measure(
    table: &ResponseTable,
    prompts: &PromptSet,
    condition: &Condition,
    settings: &EvalSettings,
) -> Result<MetricValue> {
    match metric_for(prompts.modality()?) {
        MetricKind::YGap => metrics::ygap_aggregate(table, &condition.dataset, &condition.id, prompts),
        MetricKind::MaxSkew => {
            metrics::max_skew_aggregate(table, &condition.dataset, &condition.id, prompts, settings.k, settings.seed)
        }
    }
}

/// Metrics and Δ for every model and condition. `conditions[0]` must be
/// the original condition.
pub fn compute_report(
    settings: &EvalSettings,
    tables: &[ResponseTable],
    prompts: &PromptSet,
    conditions: &[Condition],
) -> Result<BiasReport> {
    let metric = metric_for(prompts.modality()?);
    let (orig, rest) = conditions
        .split_first()
        .ok_or_else(|| Error::invalid("no conditions to evaluate"))?;
    if orig.cell.is_some() {
        return Err(Error::invalid("the first condition must be the original images"));
    }
    let mut names = BTreeSet::new();
    for t in tables {
        if !names.insert(t.model_name.as_str()) {
            return Err(Error::invalid(format!("duplicate model name `{}`", t.model_name)));
        }
    }
    let models = tables
        .par_iter()
        .map(|t| -> Result<ModelReport> {
            let original = measure(t, prompts, orig, settings)?;
            let cells = rest
                .par_iter()
                .map(|c| {
                    let (feature, strength) = c.cell.expect("perturbed condition");
                    let perturbed = measure(t, prompts, c, settings)?;
                    Ok(Cell {
                        feature,
                        strength,
                        delta: relative_delta(original, perturbed)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ModelReport {
                model: t.model_name.clone(),
                original,
                cells,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    BiasReport::new(settings.benchmark.clone(), metric, models)
}

/// Collects responses from every backend and computes the report.
pub fn evaluate(
    backends: &[ModelBackend],
    prompts: &PromptSet,
    conditions: &[Condition],
    settings: &EvalSettings,
    opts: &CollectOptions,
    checkpoint_dir: Option<&Path>,
) -> Result<(BiasReport, Vec<ResponseTable>)> {
    let mut tables = Vec::with_capacity(backends.len());
    for b in backends {
        let opts = CollectOptions {
            checkpoint: checkpoint_dir.map(|d| d.join(format!("{}.partial.jsonl", file_stem_for(b.name())))),
            ..opts.clone()
        };
        log::info!("collecting `{}` over {} conditions", b.name(), conditions.len());
        tables.push(collect_conditions(b, prompts, conditions, &opts)?);
    }
    let report = compute_report(settings, &tables, prompts, conditions)?;
    Ok((report, tables))
}

/// A file-name-safe rendering of a model name.
pub fn file_stem_for(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

/// Every emitted table of a report, as `(file name, contents)`.
pub fn emit_tables(report: &BiasReport, alpha: f64, probes: Option<&[ProbeResult]>) -> Result<Vec<(String, String)>> {
    let mut out = vec![
        ("delta_table.csv".to_string(), report::emit_delta_table(report)),
        ("raw_table.csv".to_string(), report::emit_raw_table(report)),
        ("metrics.csv".to_string(), report::emit_metrics_csv(report, alpha)?),
        ("summary.csv".to_string(), report::emit_two_dim_summary(report, alpha)?),
    ];
    if !report.models.is_empty() {
        out.push(("rankings.csv".to_string(), report::emit_rankings(report)?));
    }
    if let Some(p) = probes {
        let points = report::scatter_points(report, p);
        match report::emit_scatter(&points) {
            Ok((rows, fit, _)) => {
                out.push(("scatter.csv".to_string(), rows));
                out.push(("scatter_fit.csv".to_string(), fit));
            }
            Err(e) => log::warn!("scatter not emitted: {e}"),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub settings: EvalSettings,
    pub metric: MetricKind,
    pub models: Vec<String>,
    pub conditions: Vec<String>,
    pub has_probe: bool,
}

const BUNDLE_FILE: &str = "bundle.json";
const LABELS_FILE: &str = "labels.csv";

pub fn is_bundle(dir: &Path) -> bool {
    dir.join(BUNDLE_FILE).is_file()
}

fn labels_csv(conditions: &[Condition]) -> String {
    let mut out = String::from("condition,image_id,gender\n");
    for c in conditions {
        for r in &c.dataset.records {
            let _ = writeln!(out, "{},{},{}", c.id, r.image_id, r.gender.as_str());
        }
    }
    out
}

fn parse_labels(text: &str, order: &[String]) -> Result<Vec<Condition>> {
    let mut by_cond: BTreeMap<&str, Vec<ImageRecord>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let bad = || Error::invalid(format!("{LABELS_FILE} line {}: malformed", i + 1));
        let mut cols = line.split(',');
        let (cond, id, g) = (cols.next().ok_or_else(bad)?, cols.next().ok_or_else(bad)?, cols.next().ok_or_else(bad)?);
        let gender = match g {
            "woman" => GenderLabel::Woman,
            "man" => GenderLabel::Man,
            _ => return Err(bad()),
        };
        by_cond.entry(cond).or_default().push(ImageRecord {
            image_id: id.to_string(),
            path: PathBuf::from(id),
            gender,
            person_bbox: BBox::new(0, 0, 0, 0),
            person_mask: None,
            objects: Vec::new(),
            provenance: None,
        });
    }
    order
        .iter()
        .map(|id| {
            let records = by_cond
                .remove(id.as_str())
                .ok_or_else(|| Error::invalid(format!("{LABELS_FILE} lacks condition `{id}`")))?;
            Ok(Condition {
                id: id.clone(),
                cell: crate::perturb::parse_condition(id)?,
                dataset: Dataset {
                    name: id.clone(),
                    base_dir: PathBuf::new(),
                    records,
                },
            })
        })
        .collect()
}

/// Writes tables and raw inputs into `dir`.
pub fn write_bundle(
    dir: &Path,
    settings: &EvalSettings,
    report: &BiasReport,
    tables: &[ResponseTable],
    prompts: &PromptSet,
    conditions: &[Condition],
    probe_table: Option<&str>,
) -> Result<()> {
    let probes = probe_table.map(report::parse_probe_table).transpose()?;
    let probe_results: Option<Vec<ProbeResult>> = probes.map(|p| p.into_iter().map(|(_, r)| r).collect());
    let info = BundleInfo {
        settings: settings.clone(),
        metric: report.metric,
        models: tables.iter().map(|t| t.model_name.clone()).collect(),
        conditions: conditions.iter().map(|c| c.id.clone()).collect(),
        has_probe: probe_table.is_some(),
    };
    let inputs = dir.join("inputs");
    fsutil::write_atomic(&inputs.join("prompts.jsonl"), prompts.to_jsonl().as_bytes())?;
    fsutil::write_atomic(&inputs.join(LABELS_FILE), labels_csv(conditions).as_bytes())?;
    for t in tables {
        t.save(&inputs.join("responses").join(format!("{}.jsonl", file_stem_for(&t.model_name))))?;
    }
    if let Some(p) = probe_table {
        fsutil::write_atomic(&inputs.join("probe.csv"), p.as_bytes())?;
    }
    for (name, body) in emit_tables(report, settings.alpha, probe_results.as_deref())? {
        fsutil::write_atomic(&dir.join(name), body.as_bytes())?;
    }
    fsutil::write_atomic(&dir.join("report.json"), (serde_json::to_string_pretty(report)? + "\n").as_bytes())?;
    fsutil::write_atomic(&dir.join(BUNDLE_FILE), (serde_json::to_string_pretty(&info)? + "\n").as_bytes())
}

/// Raw inputs of a bundle.
pub struct BundleInputs {
    pub info: BundleInfo,
    pub prompts: PromptSet,
    pub conditions: Vec<Condition>,
    pub tables: Vec<ResponseTable>,
    pub probe_table: Option<String>,
}

pub fn load_bundle(dir: &Path) -> Result<BundleInputs> {
    let info: BundleInfo = serde_json::from_str(&fsutil::read_to_string(&dir.join(BUNDLE_FILE))?)?;
    let inputs = dir.join("inputs");
    let prompts = PromptSet::load(&inputs.join("prompts.jsonl"))?;
    let conditions = parse_labels(&fsutil::read_to_string(&inputs.join(LABELS_FILE))?, &info.conditions)?;
    let tables = info
        .models
        .iter()
        .map(|m| ResponseTable::load(&inputs.join("responses").join(format!("{}.jsonl", file_stem_for(m))), Some(m)))
        .collect::<Result<Vec<_>>>()?;
    let probe_table = if info.has_probe {
        Some(fsutil::read_to_string(&inputs.join("probe.csv"))?)
    } else {
        None
    };
    Ok(BundleInputs {
        info,
        prompts,
        conditions,
        tables,
        probe_table,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Verification {
    pub files_checked: usize,
    /// Data cells compared against a recomputation.
    pub cells_checked: usize,
    pub mismatches: Vec<String>,
}

impl Verification {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.files_checked > 0
    }
}

/// Recomputes every table of a bundle from its raw inputs and compares the
/// stored files cell by cell. Δ cells of `metrics.csv` are additionally
/// checked against the original and perturbed values printed beside them.
pub fn verify_bundle(dir: &Path) -> Result<Verification> {
    let inputs = load_bundle(dir)?;
    let report = compute_report(&inputs.info.settings, &inputs.tables, &inputs.prompts, &inputs.conditions)?;
    let probes = inputs
        .probe_table
        .as_deref()
        .map(report::parse_probe_table)
        .transpose()?
        .map(|p| p.into_iter().map(|(_, r)| r).collect::<Vec<_>>());
    let mut v = Verification::default();
    for (name, expected) in emit_tables(&report, inputs.info.settings.alpha, probes.as_deref())? {
        let path = dir.join(&name);
        let stored = match fsutil::read_to_string(&path) {
            Ok(s) => s,
            Err(_) => {
                v.mismatches.push(format!("{name}: missing"));
                continue;
            }
        };
        v.files_checked += 1;
        compare_csv(&name, &stored, &expected, &mut v);
        if name == "metrics.csv" {
            check_delta_rows(&stored, &mut v);
        }
    }
    let stored: BiasReport = serde_json::from_str(&fsutil::read_to_string(&dir.join("report.json"))?)?;
    v.files_checked += 1;
    if stored != report {
        v.mismatches.push("report.json: differs from recomputation".into());
    }
    Ok(v)
}

fn compare_csv(name: &str, stored: &str, expected: &str, v: &mut Verification) {
    let s: Vec<&str> = stored.lines().collect();
    let e: Vec<&str> = expected.lines().collect();
    if s.len() != e.len() {
        v.mismatches.push(format!("{name}: {} rows stored, {} recomputed", s.len(), e.len()));
    }
    for (i, (a, b)) in s.iter().zip(&e).enumerate() {
        let (ca, cb): (Vec<&str>, Vec<&str>) = (a.split(',').collect(), b.split(',').collect());
        if ca.len() != cb.len() {
            v.mismatches.push(format!("{name} line {}: column count differs", i + 1));
            continue;
        }
        for (j, (x, y)) in ca.iter().zip(&cb).enumerate() {
            if i > 0 {
                v.cells_checked += 1;
            }
            if x != y {
                v.mismatches.push(format!("{name} line {} column {}: stored `{x}`, recomputed `{y}`", i + 1, j + 1));
            }
        }
    }
    if !stored.ends_with('\n') || stored.contains('\r') {
        v.mismatches.push(format!("{name}: expected LF line endings"));
    }
}

/// Checks `delta_percent` against the printed `original` and `perturbed`,
/// allowing for their 6-digit rounding.
fn check_delta_rows(csv: &str, v: &mut Verification) {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |n: &str| header.iter().position(|h| *h == n);
    let (Some(io), Some(ip), Some(id), Some(ie), Some(im), Some(is)) = (
        col("original"),
        col("perturbed"),
        col("delta_percent"),
        col("excluded"),
        col("metric"),
        col("scale"),
    ) else {
        v.mismatches.push("metrics.csv: missing columns".into());
        return;
    };
    for (i, line) in lines.enumerate() {
        let c: Vec<&str> = line.split(',').collect();
        let num = |k: usize| c.get(k).and_then(|s| s.parse::<f64>().ok());
        let (Some(o), Some(p), Some(scale)) = (num(io), num(ip), num(is)) else {
            v.mismatches.push(format!("metrics.csv line {}: unparseable values", i + 2));
            continue;
        };
        let excluded = c.get(ie) == Some(&"true");
        v.cells_checked += 1;
        if excluded {
            let near_zero = c.get(im) == Some(&"ygap") && (o / scale).abs() < metrics::YGAP_EXCLUSION_THRESHOLD * 1.000001;
            if c.get(id) != Some(&report::EXCLUDED) || !(near_zero || o == 0.0) {
                v.mismatches.push(format!("metrics.csv line {}: exclusion not justified by original {o}", i + 2));
            }
            continue;
        }
        let Some(d) = num(id) else {
            v.mismatches.push(format!("metrics.csv line {}: missing delta", i + 2));
            continue;
        };
        let expect = 100.0 * ((o - p) / o).abs();
        // Each printed value carries relative error up to 5e-6.
        let tol = 1e-5 * (100.0 * (o.abs() + p.abs()) / o.abs()) + 1e-5 * d.abs() + 1e-9;
        if (expect - d).abs() > tol {
            v.mismatches.push(format!("metrics.csv line {}: delta {d} but values give {expect}", i + 2));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{Prompt, PromptCategory, Response, ResponseKey, VqaAnswer};

    fn labels(n: usize) -> Dataset {
        Dataset {
            name: "d".into(),
            base_dir: PathBuf::new(),
            records: (0..n)
                .map(|i| ImageRecord {
                    image_id: format!("img{i}"),
                    path: PathBuf::from(format!("img{i}.png")),
                    gender: if i % 2 == 0 { GenderLabel::Woman } else { GenderLabel::Man },
                    person_bbox: BBox::new(0, 0, 1, 1),
                    person_mask: None,
                    objects: Vec::new(),
                    provenance: None,
                })
                .collect(),
        }
    }

    #[test]
    fn constant_yes_excludes_everything() {
        let ds = labels(6);
        let prompts = PromptSet::new(
            "p",
            vec![Prompt::new("q", PromptCategory::Skill, "Does this person have the ability to cook?").unwrap()],
        )
        .unwrap();
        let conds = vec![
            Condition::original(ds.clone()),
            Condition {
                id: "color:weak".into(),
                cell: Some((FeatureKind::Color, Strength::Weak)),
                dataset: ds.clone(),
            },
        ];
        let mut t = ResponseTable::new("yes-model");
        for c in &conds {
            for r in &ds.records {
                t.insert(ResponseKey::new(&r.image_id, &c.id, "q"), Response::Answer(VqaAnswer::Yes)).unwrap();
            }
        }
        let settings = EvalSettings {
            benchmark: "b".into(),
            k: 2,
            alpha: 1.0,
            seed: 0,
        };
        let rep = compute_report(&settings, &[t], &prompts, &conds).unwrap();
        assert_eq!(rep.models[0].original.value, 0.0);
        assert!(rep.models[0].cells.iter().all(|c| c.delta.excluded()));
        assert_eq!(rep.models[0].mean_delta(), None);
    }

    #[test]
    fn k_clamping() {
        let ds = labels(10);
        assert_eq!(effective_k(1000, &ds), (10, true));
        assert_eq!(effective_k(4, &ds), (4, false));
    }

    #[test]
    fn grid_is_sorted_and_unique() {
        let g = grid(&[FeatureKind::Object, FeatureKind::Color, FeatureKind::Color], &Strength::ALL);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], (FeatureKind::Color, Strength::Weak));
    }
}
