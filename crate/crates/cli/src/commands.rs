use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use biasprobe_core::adapters::{self, CollectOptions, Modality, SyntheticModel, WireClient};
use biasprobe_core::corpus::load_manifest;
use biasprobe_core::features::LightingChannels;
use biasprobe_core::perturb::perturb_dataset;
use biasprobe_core::pipeline::{self, EvalSettings};
use biasprobe_core::probe::{detect_spurious, TrainConfig};
use biasprobe_core::synthlab::{self, Case, ResponseWeights};
use biasprobe_core::{fixture, metrics, report, ModelBackend, PerturbationSpec, PromptSet, ResponseTable};
use serde::Serialize;

use crate::args::{
    BackendArg, CaseArg, Command, Common, DetectArgs, EvalArgs, FixtureArgs, LightingArg, PerturbArgs, ReportArgs,
    SimulateArgs,
};
use crate::config::{self, required, usage, FileConfig};

pub fn run(command: Command, file: FileConfig) -> Result<()> {
    match command {
        Command::Detect(a) => detect(a, file),
        Command::Perturb(a) => perturb(a, file),
        Command::Eval(a) => eval(a, file),
        Command::Simulate(a) => simulate(a, file),
        Command::Report(a) => report_cmd(a, file),
        Command::Fixture(a) => fixture_cmd(a, file),
    }
}

/// Resolved `--out`, `--seed` and `--workers`, with the global thread pool
/// sized to the worker count.
struct Resolved {
    out: PathBuf,
    seed: u64,
    workers: usize,
}

fn resolve_common(c: &Common, file: &FileConfig) -> Result<Resolved> {
    let workers = c.workers.or(file.workers).unwrap_or_else(config::default_workers);
    if workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    // Only the first call in a process can size the global pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    Ok(Resolved {
        out: required(c.out.clone(), file.out.clone(), "out")?,
        seed: c.seed.or(file.seed).unwrap_or(0),
        workers,
    })
}

fn existing(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "benchmark".into(), |s| s.to_string_lossy().into_owned())
}

#[derive(Serialize)]
struct DetectEcho {
    manifest: PathBuf,
    out: PathBuf,
    benchmark: String,
    features: Vec<String>,
    workers: usize,
    lighting: LightingChannels,
    train: TrainConfig,
}

fn detect(a: DetectArgs, file: FileConfig) -> Result<()> {
    let r = resolve_common(&a.common, &file)?;
    let manifest = existing(required(a.manifest, file.manifest.clone(), "manifest")?, "manifest")?;
    let features = config::parse_features(a.features.or(file.features.clone()))?;
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        hidden_size: a.hidden.unwrap_or(defaults.hidden_size),
        learning_rate: a.lr.unwrap_or(defaults.learning_rate),
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        max_epochs: a.max_epochs.unwrap_or(defaults.max_epochs),
        patience: a.patience.unwrap_or(defaults.patience),
        seed: r.seed,
        ..defaults
    };
    train.validate().map_err(|e| usage(e.to_string()))?;
    let lighting = match a.lighting {
        Some(LightingArg::Hsv) => LightingChannels::AllHsv,
        _ => LightingChannels::ValueOnly,
    };
    let benchmark = a.benchmark.or(file.benchmark.clone()).unwrap_or_else(|| stem(&manifest));
    let ds = load_manifest(&manifest)?;

    let mut results = Vec::new();
    for kind in &features {
        log::info!("probing {kind}");
        let res = detect_spurious(&ds, *kind, &train, lighting).with_context(|| format!("probing {kind}"))?;
        println!("{benchmark}\t{kind}\t{}", res.cell());
        results.push(res);
    }
    std::fs::create_dir_all(&r.out)?;
    std::fs::write(r.out.join("table1.csv"), report::emit_probe_table(&benchmark, &results))?;
    config::write_echo(
        &r.out,
        "detect",
        &DetectEcho {
            manifest,
            out: r.out.clone(),
            benchmark,
            features: features.iter().map(|f| f.to_string()).collect(),
            workers: r.workers,
            lighting,
            train,
        },
    )
}

#[derive(Serialize)]
struct PerturbEcho {
    manifest: PathBuf,
    out: PathBuf,
    seed: u64,
    workers: usize,
    conditions: Vec<String>,
}

fn perturb(a: PerturbArgs, file: FileConfig) -> Result<()> {
    let r = resolve_common(&a.common, &file)?;
    let manifest = existing(required(a.manifest, file.manifest.clone(), "manifest")?, "manifest")?;
    let features = config::parse_features(a.selection.features.or(file.features.clone()))?;
    let strengths = config::parse_strengths(a.selection.strengths.or(file.strengths.clone()))?;
    let ds = load_manifest(&manifest)?;
    let mut conditions = Vec::new();
    for (f, s) in pipeline::grid(&features, &strengths) {
        let spec = PerturbationSpec::new(f, s, r.seed);
        let out = perturb_dataset(&ds, &spec, &r.out, r.workers)?;
        log::info!("{}: {} images", spec.condition_id(), out.len());
        conditions.push(spec.condition_id());
    }
    println!("wrote {} perturbed manifests to {}", conditions.len(), r.out.display());
    config::write_echo(
        &r.out,
        "perturb",
        &PerturbEcho {
            manifest,
            out: r.out.clone(),
            seed: r.seed,
            workers: r.workers,
            conditions,
        },
    )
}

#[derive(Serialize)]
struct EvalEcho {
    manifest: PathBuf,
    perturbed: Option<PathBuf>,
    out: PathBuf,
    seed: u64,
    workers: usize,
    conditions: Vec<String>,
    backend: BackendArg,
    endpoint: Option<String>,
    replay: Vec<PathBuf>,
    prompts: Vec<PathBuf>,
    k_requested: usize,
    alpha: f64,
    lenient: bool,
    probe: Option<PathBuf>,
    bundles: BTreeMap<String, EvalSettings>,
}

/// Prompt sets grouped by modality.
fn load_prompt_groups(paths: &[PathBuf]) -> Result<BTreeMap<&'static str, PromptSet>> {
    let sets: Vec<PromptSet> = if paths.is_empty() {
        vec![adapters::builtin_vqa_prompts(), adapters::builtin_retrieval_prompts()]
    } else {
        paths
            .iter()
            .map(|p| PromptSet::load(&existing(p.clone(), "prompt file")?).map_err(Into::into))
            .collect::<Result<_>>()?
    };
    let mut groups: BTreeMap<&'static str, Vec<_>> = BTreeMap::new();
    for s in sets {
        let key = modality_name(s.modality().map_err(|e| usage(e.to_string()))?);
        groups.entry(key).or_default().extend(s.prompts);
    }
    groups
        .into_iter()
        .map(|(k, prompts)| Ok((k, PromptSet::new(k, prompts).map_err(|e| usage(e.to_string()))?)))
        .collect()
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Vqa => "vqa",
        Modality::Retrieval => "retrieval",
    }
}

fn eval(a: EvalArgs, file: FileConfig) -> Result<()> {
    let r = resolve_common(&a.common, &file)?;
    let manifest = existing(required(a.manifest, file.manifest.clone(), "manifest")?, "manifest")?;
    let perturbed = a.perturbed.or(file.perturbed.clone());
    let features = config::parse_features(a.selection.features.or(file.features.clone()))?;
    let strengths = config::parse_strengths(a.selection.strengths.or(file.strengths.clone()))?;
    let backend_kind = a.backend.or(file.backend).unwrap_or(BackendArg::Replay);
    let endpoint = a.endpoint.or(file.endpoint.clone());
    let replay = a.replay.or(file.replay.clone()).unwrap_or_default();
    let prompt_paths = a.prompts.or(file.prompts.clone()).unwrap_or_default();
    let k = a.k.or(file.k).unwrap_or(metrics::DEFAULT_K);
    let alpha = a.alpha.or(file.alpha).unwrap_or(metrics::DEFAULT_ALPHA);
    let lenient = a.lenient || file.lenient.unwrap_or(false);
    let probe = a.probe.or(file.probe.clone());
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(usage("--alpha must be a finite non-negative number"));
    }
    if k == 0 {
        return Err(usage("--k must be positive"));
    }
    let benchmark = a.benchmark.or(file.benchmark.clone()).unwrap_or_else(|| stem(&manifest));

    let ds = load_manifest(&manifest)?;
    let cells = pipeline::grid(&features, &strengths);
    let conditions = pipeline::load_conditions(ds, perturbed.as_deref(), &cells)?;
    let groups = load_prompt_groups(&prompt_paths)?;
    let probe_table = match &probe {
        Some(p) => Some(std::fs::read_to_string(existing(p.clone(), "probe table")?)?),
        None => None,
    };

    let backends: Vec<ModelBackend> = match backend_kind {
        BackendArg::Replay => {
            if replay.is_empty() {
                return Err(usage("--replay is required for the replay backend"));
            }
            replay
                .iter()
                .map(|p| Ok(ModelBackend::Replay(ResponseTable::load(&existing(p.clone(), "replay table")?, None)?)))
                .collect::<Result<_>>()?
        }
        BackendArg::Wire => {
            let url = endpoint.clone().ok_or_else(|| usage("--endpoint is required for the wire backend"))?;
            let timeout = Duration::from_secs_f64(a.timeout.unwrap_or(60.0));
            let client = WireClient::new(url, timeout, a.retries.unwrap_or(3), Duration::from_millis(500))
                .with_name(a.model_name.clone().unwrap_or_else(|| "wire".into()));
            vec![ModelBackend::Wire(client)]
        }
        BackendArg::Synthetic => vec![ModelBackend::Synthetic(SyntheticModel::new(
            a.model_name.clone().unwrap_or_else(|| "synthetic".into()),
            ResponseWeights {
                w_g: 1.0,
                w_b: 2.0,
                bias: -1.0,
            },
            r.seed,
        ))],
    };

    let opts = CollectOptions {
        max_in_flight: a.max_in_flight.unwrap_or(8),
        checkpoint: None,
        lenient,
    };
    let mut bundles = BTreeMap::new();
    for (name, prompts) in &groups {
        let modality = prompts.modality()?;
        let models: Vec<ModelBackend> = backends
            .iter()
            .filter(|b| match b {
                ModelBackend::Replay(t) => t.modality() == Some(modality),
                _ => true,
            })
            .cloned()
            .collect();
        if models.is_empty() {
            log::warn!("no {name} models among the backends; skipping {name} prompts");
            continue;
        }
        let k_eff = if modality == Modality::Retrieval {
            let (k_eff, clamped) = pipeline::effective_k(k, &conditions[0].dataset);
            if clamped {
                log::warn!("k = {k} exceeds the balanced set; using k = {k_eff}");
            }
            k_eff
        } else {
            k
        };
        let settings = EvalSettings {
            benchmark: benchmark.clone(),
            k: k_eff,
            alpha,
            seed: r.seed,
        };
        let dir = r.out.join(name);
        let checkpoints = matches!(backend_kind, BackendArg::Wire).then(|| dir.join("checkpoints"));
        if let Some(c) = &checkpoints {
            std::fs::create_dir_all(c)?;
        }
        let (rep, tables) = pipeline::evaluate(&models, prompts, &conditions, &settings, &opts, checkpoints.as_deref())?;
        pipeline::write_bundle(&dir, &settings, &rep, &tables, prompts, &conditions, probe_table.as_deref())?;
        print_summary(&rep, alpha)?;
        bundles.insert(name.to_string(), settings);
    }
    if bundles.is_empty() {
        return Err(usage("no prompt set matched any model"));
    }
    config::write_echo(
        &r.out,
        "eval",
        &EvalEcho {
            manifest,
            perturbed,
            out: r.out.clone(),
            seed: r.seed,
            workers: r.workers,
            conditions: conditions.iter().map(|c| c.id.clone()).collect(),
            backend: backend_kind,
            endpoint,
            replay,
            prompts: prompt_paths,
            k_requested: k,
            alpha,
            lenient,
            probe,
            bundles,
        },
    )
}

fn print_summary(rep: &report::BiasReport, alpha: f64) -> Result<()> {
    for row in report::two_dim_summary(rep, alpha)? {
        let fmt = |v: Option<f64>| v.map_or_else(|| report::INCOMPARABLE.to_string(), report::fmt_real);
        println!(
            "{}\t{}\t{}\tbias={}\tmean_delta={}\tbeta={}",
            rep.benchmark,
            rep.metric,
            row.model,
            report::fmt_real(row.bias),
            fmt(row.mean_delta),
            fmt(row.beta)
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulateEcho {
    cases: Vec<synthlab::SynthConfig>,
    seeds: u64,
    first_seed: u64,
    workers: usize,
}

fn simulate(a: SimulateArgs, file: FileConfig) -> Result<()> {
    let r = resolve_common(&a.common, &file)?;
    let n = a.n.unwrap_or(20_000);
    let seeds = a.seeds.unwrap_or(20);
    let cases = match a.case {
        CaseArg::Independent => vec![Case::Independent],
        CaseArg::Correlated => vec![Case::Correlated],
        CaseArg::Both => vec![Case::Independent, Case::Correlated],
    };
    let mut rows = Vec::new();
    let mut configs = Vec::new();
    for case in cases {
        let template = case.config(n, r.seed);
        template.validate().map_err(|e| usage(e.to_string()))?;
        let out = (r.seed..r.seed + seeds)
            .map(|s| synthlab::run_case_experiment(&synthlab::SynthConfig { seed: s, ..template.clone() }, case))
            .collect::<biasprobe_core::Result<Vec<_>>>()?;
        let deltas: Vec<f64> = out.iter().filter_map(|o| o.delta.delta_percent).collect();
        let mean = deltas.iter().sum::<f64>() / deltas.len().max(1) as f64;
        let max = deltas.iter().copied().fold(f64::NAN, f64::max);
        println!(
            "{}\tseeds={}\tmean_delta={}\tmax_delta={}\texcluded={}",
            case.as_str(),
            out.len(),
            report::fmt_real(mean),
            report::fmt_real(max),
            out.len() - deltas.len()
        );
        rows.extend(out);
        configs.push(template);
    }
    synthlab::write_summary(&r.out, &rows, &configs)?;
    config::write_echo(
        &r.out,
        "simulate",
        &SimulateEcho {
            cases: configs,
            seeds,
            first_seed: r.seed,
            workers: r.workers,
        },
    )
}

fn report_cmd(a: ReportArgs, file: FileConfig) -> Result<()> {
    let r = resolve_common(&a.common, &file)?;
    let bundles: Vec<PathBuf> = if pipeline::is_bundle(&a.input) {
        vec![a.input.clone()]
    } else {
        let entries = std::fs::read_dir(&a.input)
            .map_err(|e| usage(format!("cannot read {}: {e}", a.input.display())))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| pipeline::is_bundle(p))
            .collect();
        dirs.sort();
        dirs
    };
    if bundles.is_empty() {
        return Err(usage(format!("no evaluation bundles under {}", a.input.display())));
    }
    let mut log_lines = String::from("bundle,files_checked,cells_checked,mismatches,status\n");
    let mut failed = Vec::new();
    for dir in &bundles {
        let name = dir.file_name().map_or_else(|| "bundle".into(), |s| s.to_string_lossy().into_owned());
        let v = pipeline::verify_bundle(dir)?;
        let status = if v.passed() { "ok" } else { "FAILED" };
        println!("{name}: {} files, {} cells checked, {status}", v.files_checked, v.cells_checked);
        for m in &v.mismatches {
            eprintln!("  {name}: {m}");
        }
        log_lines.push_str(&format!(
            "{name},{},{},{},{status}\n",
            v.files_checked,
            v.cells_checked,
            v.mismatches.len()
        ));
        if !v.passed() {
            failed.push(name.clone());
        }
        let inputs = pipeline::load_bundle(dir)?;
        let rep = pipeline::compute_report(&inputs.info.settings, &inputs.tables, &inputs.prompts, &inputs.conditions)?;
        let probes = inputs
            .probe_table
            .as_deref()
            .map(report::parse_probe_table)
            .transpose()?
            .map(|p| p.into_iter().map(|(_, r)| r).collect::<Vec<_>>());
        let out = r.out.join(&name);
        std::fs::create_dir_all(&out)?;
        for (file_name, body) in pipeline::emit_tables(&rep, inputs.info.settings.alpha, probes.as_deref())? {
            std::fs::write(out.join(file_name), body)?;
        }
    }
    std::fs::create_dir_all(&r.out)?;
    std::fs::write(r.out.join("verification.csv"), log_lines)?;
    if failed.is_empty() {
        Ok(())
    } else {
        anyhow::bail!("verification failed for: {}", failed.join(", "))
    }
}

fn fixture_cmd(a: FixtureArgs, file: FileConfig) -> Result<()> {
    let r = resolve_common(&a.common, &file)?;
    match a.corpus {
        Some(n) => {
            fixture::write_corpus(&r.out, n, a.side, r.seed)?;
            println!("wrote {n}-image corpus to {}", r.out.display());
        }
        None => {
            fixture::write_fixture(&r.out, r.seed)?;
            println!("wrote replay fixture to {}", r.out.display());
        }
    }
    Ok(())
}
