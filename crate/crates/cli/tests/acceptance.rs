//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with a custom main so the lines show up in plain `cargo test`
//! output. Reference values are recomputed here by independent code rather
//! than through the library paths under test.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use biasprobe_core::adapters::VqaAnswer;
use biasprobe_core::corpus::{load_manifest, BBox, Dataset, GenderLabel, ImageRecord};
use biasprobe_core::imaging::{hsv_to_rgb, rgb_to_hsv, Image};
use biasprobe_core::metrics::{
    max_skew_from_scores, mean_delta, pearson_r, rank_shift, relative_delta, ygap_from_answers, MetricKind,
    MetricValue,
};
use biasprobe_core::perturb::{
    perturb_color, perturb_image, person_region, sample_shift, FeatureKind, PerturbationSpec, Strength,
};
use biasprobe_core::probe::{
    detect_spurious_with, gradient_check, FeatureSource, GradCheckOptions, HiddenMode, MlpProbe, Sample, TrainConfig,
};
use biasprobe_core::report::{emit_delta_table, two_dim_summary, BiasReport, Cell, ModelReport};
use biasprobe_core::synthlab::{sweep, Case};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("{what} took {t:.2?}, limit {limit:?}"))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 8] = [
        (1, "relative delta golden value", criterion_1),
        (2, "independent/correlated theory", criterion_2),
        (3, "probe correctness", criterion_3),
        (4, "metric oracle equivalence", criterion_4),
        (5, "perturbation invariants", criterion_5),
        (6, "MaxSkew anchors", criterion_6),
        (7, "near-zero exclusion", criterion_7),
        (8, "end-to-end replay pipeline", criterion_8),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {name} ({detail}) [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name} ({why}) [{secs:.2}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Check {
    let start = Instant::now();
    // LLaVA-1.5 / COCO-gender, original and object-weak, x100 scale.
    let (orig, pert) = (-3.69, -3.22);
    let scaled = relative_delta(MetricValue::ygap(orig, 0), MetricValue::ygap(pert, 0))
        .map_err(|e| e.to_string())?
        .delta_percent
        .ok_or("unexpectedly excluded")?;
    let unscaled = relative_delta(MetricValue::ygap(orig / 100.0, 0), MetricValue::ygap(pert / 100.0, 0))
        .map_err(|e| e.to_string())?
        .delta_percent
        .ok_or("unexpectedly excluded")?;
    let oracle = 100.0 * (0.47_f64 / 3.69);
    ensure((scaled - 12.74).abs() <= 0.01, || format!("delta {scaled} not within 12.74 +- 0.01"))?;
    ensure((scaled - oracle).abs() < 1e-9, || format!("delta {scaled} differs from hand value {oracle}"))?;
    ensure((scaled - unscaled).abs() < 1e-9, || format!("scale dependence: {scaled} vs {unscaled}"))?;
    ensure((scaled - 12.85).abs() <= 0.2, || format!("delta {scaled} not within 0.2 of the published 12.85"))?;
    within_time(start, Duration::from_secs(1), "golden delta")?;
    Ok(format!("delta = {scaled:.4}, published 12.85, gap {:.3}", (scaled - 12.85).abs()))
}

// ---------------------------------------------------------------- 2

/// Expected YGap of the correlated case: E[logistic(6b - 3)] under Beta(5, 2)
/// minus under Beta(2, 5), by composite Simpson quadrature.
fn correlated_ygap_quadrature() -> f64 {
    let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
    // Beta(5,2) density 30 b^4 (1-b); Beta(2,5) density 30 b (1-b)^4.
    let man = |b: f64| 30.0 * b.powi(4) * (1.0 - b) * logistic(6.0 * b - 3.0);
    let woman = |b: f64| 30.0 * b * (1.0 - b).powi(4) * logistic(6.0 * b - 3.0);
    let simpson = |f: &dyn Fn(f64) -> f64| {
        let n = 2000;
        let h = 1.0 / n as f64;
        let mut s = f(0.0) + f(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(i as f64 * h);
        }
        s * h / 3.0
    };
    simpson(&man) - simpson(&woman)
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let n = 20_000;
    let seeds = 20;
    let independent = sweep(Case::Independent, n, seeds, None).map_err(|e| e.to_string())?;
    let correlated = sweep(Case::Correlated, n, seeds, None).map_err(|e| e.to_string())?;

    let ind: Vec<f64> = independent
        .iter()
        .map(|o| o.delta.delta_percent.ok_or_else(|| format!("independent seed {} excluded", o.seed)))
        .collect::<Result<_, _>>()?;
    let ind_mean = ind.iter().sum::<f64>() / ind.len() as f64;
    let ind_max = ind.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ensure(ind_mean < 3.0, || format!("independent mean delta {ind_mean:.3}% >= 3%"))?;
    ensure(ind_max < 8.0, || format!("independent max delta {ind_max:.3}% >= 8%"))?;

    let q = correlated_ygap_quadrature();
    let mut cor_min = f64::INFINITY;
    let mut worst_gap: f64 = 0.0;
    for o in &correlated {
        let d = o.delta.delta_percent.ok_or_else(|| format!("correlated seed {} excluded", o.seed))?;
        ensure(d > 80.0, || format!("correlated seed {} delta {d:.2}% <= 80%", o.seed))?;
        cor_min = cor_min.min(d);
        worst_gap = worst_gap.max((o.ygap_orig - q).abs());
    }
    ensure(worst_gap <= 0.02, || format!("ygap_orig deviates from quadrature {q:.5} by {worst_gap:.4}"))?;
    within_time(start, Duration::from_secs(30), "simulation sweeps")?;
    Ok(format!(
        "independent mean {ind_mean:.3}% max {ind_max:.3}%; correlated min {cor_min:.1}%; \
         quadrature ygap {q:.5}, worst gap {worst_gap:.4}"
    ))
}

// ---------------------------------------------------------------- 3

fn synthetic_record(i: usize, gender: GenderLabel) -> ImageRecord {
    ImageRecord {
        image_id: format!("s{i:05}"),
        path: PathBuf::from(format!("s{i:05}.png")),
        gender,
        person_bbox: BBox::new(0, 0, 1, 1),
        person_mask: None,
        objects: Vec::new(),
        provenance: None,
    }
}

/// `n` records with 192 uniform features; when `planted`, feature 0 is 1 for
/// women and 0 for men.
fn probe_world(n: usize, planted: bool, seed: u64) -> (Dataset, std::collections::HashMap<String, Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    let mut feats = std::collections::HashMap::new();
    for i in 0..n {
        let g = if i % 2 == 0 { GenderLabel::Woman } else { GenderLabel::Man };
        let mut v: Vec<f64> = (0..192).map(|_| rng.random::<f64>()).collect();
        if planted {
            v[0] = if g == GenderLabel::Woman { 1.0 } else { 0.0 };
        }
        let r = synthetic_record(i, g);
        feats.insert(r.image_id.clone(), v);
        records.push(r);
    }
    let ds = Dataset {
        name: "synthetic".into(),
        base_dir: PathBuf::from("."),
        records,
    };
    (ds, feats)
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let probe = MlpProbe::init(24, 16, HiddenMode::Relu, &mut rng);
    let batch: Vec<Sample> = (0..32)
        .map(|i| {
            let g = if i % 2 == 0 { GenderLabel::Woman } else { GenderLabel::Man };
            Sample::new((0..24).map(|_| rng.random_range(-1.0..1.0)).collect(), g)
        })
        .collect();
    let grad_err = gradient_check(&probe, &batch, &GradCheckOptions { samples: 200, ..Default::default() })
        .map_err(|e| e.to_string())?;
    ensure(grad_err < 1e-4, || format!("gradient check error {grad_err:e}"))?;

    let cfg = TrainConfig::default();
    let (ds, feats) = probe_world(2000, true, 1);
    let planted = detect_spurious_with(&ds, FeatureKind::Color, &FeatureSource::Precomputed(&feats), &cfg)
        .map_err(|e| e.to_string())?;
    ensure(planted.mean >= 0.99, || format!("planted accuracy {:.4} < 0.99", planted.mean))?;

    let (ds, feats) = probe_world(2000, false, 2);
    let chance = detect_spurious_with(&ds, FeatureKind::Color, &FeatureSource::Precomputed(&feats), &cfg)
        .map_err(|e| e.to_string())?;
    ensure(chance.per_seed_acc.len() == 5, || "expected 5 seeds".into())?;
    ensure((chance.mean - 0.5).abs() <= 0.04, || format!("independent accuracy {:.4} outside 0.50 +- 0.04", chance.mean))?;
    within_time(start, Duration::from_secs(120), "probe checks")?;
    Ok(format!(
        "grad err {grad_err:.2e}; planted {:.4}; independent {:.4} +- {:.4}",
        planted.mean, chance.mean, chance.std
    ))
}

// ---------------------------------------------------------------- 4

fn random_gender(rng: &mut ChaCha8Rng) -> GenderLabel {
    if rng.random_bool(0.5) {
        GenderLabel::Woman
    } else {
        GenderLabel::Man
    }
}

fn ygap_oracle(items: &[(GenderLabel, VqaAnswer)]) -> f64 {
    let (mut men, mut men_yes, mut women, mut women_yes) = (0usize, 0usize, 0usize, 0usize);
    for (g, a) in items {
        let yes = *a == VqaAnswer::Yes;
        match g {
            GenderLabel::Man => {
                men += 1;
                men_yes += yes as usize;
            }
            GenderLabel::Woman => {
                women += 1;
                women_yes += yes as usize;
            }
        }
    }
    men_yes as f64 / men as f64 - women_yes as f64 / women as f64
}

/// Top k by counting, for each candidate, how many others outrank it.
fn max_skew_oracle(items: &[(f64, String, GenderLabel)], k: usize) -> f64 {
    let mut women = 0;
    let mut men = 0;
    for (s, id, g) in items {
        let better = items
            .iter()
            .filter(|(s2, id2, _)| *s2 > *s || (*s2 == *s && id2 < id))
            .count();
        if better < k {
            match g {
                GenderLabel::Woman => women += 1,
                GenderLabel::Man => men += 1,
            }
        }
    }
    let floor = 1.0 / (2.0 * k as f64);
    [women, men]
        .iter()
        .map(|&c| ((c as f64 / k as f64).max(floor) / 0.5).ln())
        .fold(f64::NEG_INFINITY, f64::max)
}

fn pearson_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let z = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
        v.iter().map(|x| (x - m) / sd).collect::<Vec<_>>()
    };
    let (zx, zy) = (z(xs), z(ys));
    zx.iter().zip(&zy).map(|(a, b)| a * b).sum::<f64>() / n
}

fn rank_oracle(values: &BTreeMap<String, f64>) -> BTreeMap<String, i64> {
    values
        .iter()
        .map(|(m, v)| {
            let ahead = values
                .iter()
                .filter(|(m2, v2)| v2.abs() < v.abs() || (v2.abs() == v.abs() && *m2 < m))
                .count();
            (m.clone(), ahead as i64 + 1)
        })
        .collect()
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let instances = 1000;
    let mut worst_real: f64 = 0.0;
    for i in 0..instances {
        // YGap: counting metric, exact.
        let size = rng.random_range(2..=50);
        let mut answers: Vec<(GenderLabel, VqaAnswer)> = (0..size)
            .map(|_| (random_gender(&mut rng), VqaAnswer::ALL[rng.random_range(0..3)]))
            .collect();
        answers[0].0 = GenderLabel::Woman;
        answers[1].0 = GenderLabel::Man;
        let got = ygap_from_answers(answers.iter().copied()).map_err(|e| e.to_string())?.value;
        let want = ygap_oracle(&answers);
        ensure(got == want, || format!("ygap instance {i}: {got} != {want}"))?;

        // MaxSkew with heavy score ties.
        let size = rng.random_range(1..=50);
        let mut ids: Vec<usize> = (0..size).collect();
        for j in (1..ids.len()).rev() {
            ids.swap(j, rng.random_range(0..=j));
        }
        let items: Vec<(f64, String, GenderLabel)> = ids
            .iter()
            .map(|id| (rng.random_range(0..6) as f64 / 4.0, format!("c{id:03}"), random_gender(&mut rng)))
            .collect();
        let k = rng.random_range(1..=size);
        let borrowed: Vec<(f64, &str, GenderLabel)> = items.iter().map(|(s, id, g)| (*s, id.as_str(), *g)).collect();
        let got = max_skew_from_scores(&borrowed, k).map_err(|e| e.to_string())?.value;
        let want = max_skew_oracle(&items, k);
        ensure((got - want).abs() <= 1e-12, || format!("max_skew instance {i}: {got} != {want}"))?;
        worst_real = worst_real.max((got - want).abs());

        // Pearson r.
        let size = rng.random_range(2..=50);
        let xs: Vec<f64> = (0..size).map(|_| rng.random_range(-10.0..10.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.3 * x + rng.random_range(-5.0..5.0)).collect();
        let got = pearson_r(&xs, &ys).map_err(|e| e.to_string())?;
        let want = pearson_oracle(&xs, &ys);
        ensure((got - want).abs() <= 1e-12, || format!("pearson instance {i}: {got} != {want}"))?;
        worst_real = worst_real.max((got - want).abs());

        // Rank shift with sign flips and ties in |value|.
        let size = rng.random_range(1..=50);
        let draw = |rng: &mut ChaCha8Rng| {
            let v = rng.random_range(0..8) as f64 / 8.0;
            if rng.random_bool(0.5) {
                -v
            } else {
                v
            }
        };
        let orig: BTreeMap<String, f64> = (0..size).map(|m| (format!("m{m:02}"), draw(&mut rng))).collect();
        let pert: BTreeMap<String, f64> = orig.keys().map(|m| (m.clone(), draw(&mut rng))).collect();
        let got = rank_shift(&orig, &pert).map_err(|e| e.to_string())?;
        let (ro, rp) = (rank_oracle(&orig), rank_oracle(&pert));
        for (m, r) in &ro {
            let want = rp[m] - r;
            ensure(got.changes[m] == want, || format!("rank_shift instance {i}: {m} change {} != {want}", got.changes[m]))?;
            ensure(got.original.ranks[m] as i64 == *r, || format!("rank_shift instance {i}: rank of {m}"))?;
        }
        let top = |r: &BTreeMap<String, i64>| r.iter().find(|(_, &v)| v == 1).map(|(m, _)| m.clone());
        ensure(got.top1_changed == (top(&ro) != top(&rp)), || format!("rank_shift instance {i}: top-1 flag"))?;
    }
    Ok(format!("{instances} instances per metric, worst real-valued gap {worst_real:.1e}"))
}

// ---------------------------------------------------------------- 5

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_biasprobe")
}

fn run(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`biasprobe {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Relative path -> SHA-256 of every file under `dir`, skipping `skip`.
fn tree_hashes(dir: &Path, skip: &[&str]) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, skip: &[&str], out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, skip, out);
                continue;
            }
            let rel = path.strip_prefix(root).expect("under root").to_path_buf();
            if skip.iter().any(|s| rel == Path::new(s)) {
                continue;
            }
            let bytes = fs::read(&path).expect("readable file");
            out.insert(rel, Sha256::digest(&bytes).to_vec());
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, skip, &mut out);
    out
}

fn criterion_5() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = tmp.path().join("corpus");
    run(&["fixture", "--corpus", "200", "--side", "64", "--seed", "5", "--out", path_str(&corpus)])?;
    let ds = load_manifest(&corpus.join("manifest.jsonl")).map_err(|e| e.to_string())?;
    ensure(ds.len() == 200, || format!("corpus has {} records", ds.len()))?;

    let mut objects_masked = 0;
    for r in &ds.records {
        let img = Image::load(&ds.image_path(r)).map_err(|e| e.to_string())?;
        let person = person_region(&ds, r).map_err(|e| e.to_string())?;
        for s in Strength::ALL {
            // (a) background: person pixels bit-identical.
            let spec = PerturbationSpec::new(FeatureKind::Background, s, 9);
            let out = perturb_image(&spec, r, &img, || Ok(person.clone())).map_err(|e| e.to_string())?.image;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    if person.contains(x, y) && out.pixel(x, y) != img.pixel(x, y) {
                        return Err(format!("(a) {} {s}: person pixel ({x},{y}) changed", r.image_id));
                    }
                }
            }

            // (b) color: the output is the inverse conversion of the input's
            // HSV with only H moved, so S and V pass through untouched.
            let spec = PerturbationSpec::new(FeatureKind::Color, s, 9);
            let out = perturb_image(&spec, r, &img, || Ok(person.clone())).map_err(|e| e.to_string())?.image;
            let delta = sample_shift(s, &mut spec.rng_for(&r.image_id));
            let mut hsv = rgb_to_hsv(&img);
            let before = hsv.pixels().to_vec();
            for px in hsv.pixels_mut().chunks_exact_mut(3) {
                px[0] = (px[0] as i32 + delta).rem_euclid(256) as u8;
            }
            let moved = hsv.pixels();
            for (a, b) in before.chunks_exact(3).zip(moved.chunks_exact(3)) {
                ensure(a[1..] == b[1..], || format!("(b) {}: S/V altered in HSV space", r.image_id))?;
            }
            ensure(hsv_to_rgb(&hsv) == out, || format!("(b) {} {s}: output is not the H-only shift", r.image_id))?;
            // Re-extracted S and V match the plain round trip's.
            let (again, plain) = (rgb_to_hsv(&out), rgb_to_hsv(&hsv_to_rgb(&rgb_to_hsv(&img))));
            for (a, b) in again.pixels().chunks_exact(3).zip(plain.pixels().chunks_exact(3)) {
                ensure(a[1..] == b[1..], || format!("(b) {} {s}: re-extracted S/V differ", r.image_id))?;
            }
            let (lib_out, lib_delta) = perturb_color(&img, s, &mut spec.rng_for(&r.image_id));
            ensure(lib_out == out && lib_delta == delta, || format!("(b) {}: per-image draw differs", r.image_id))?;

            // (c) objects: exactly round(fraction * N) boxes, changes confined.
            let spec = PerturbationSpec::new(FeatureKind::Object, s, 9);
            let res = perturb_image(&spec, r, &img, || Ok(person.clone())).map_err(|e| e.to_string())?;
            let n = r.objects.iter().filter(|o| !o.is_person).count();
            let pct = match s {
                Strength::Weak => 10.0,
                Strength::Middle => 20.0,
                Strength::Strong => 30.0,
            };
            let want = (pct * n as f64 / 100.0).round_ties_even() as usize;
            ensure(res.masked_object_ids.len() == want, || {
                format!("(c) {} {s}: {} boxes masked, expected {want} of {n}", r.image_id, res.masked_object_ids.len())
            })?;
            let boxes: Vec<BBox> = res.masked_object_ids.iter().map(|&i| r.objects[i].bbox).collect();
            ensure(res.masked_object_ids.iter().all(|&i| !r.objects[i].is_person), || "(c) person masked".into())?;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let inside = boxes.iter().any(|b| b.contains(x, y));
                    let px = res.image.pixel(x, y);
                    if inside && px != [0, 0, 0] {
                        return Err(format!("(c) {}: pixel ({x},{y}) in a masked box is not black", r.image_id));
                    }
                    if !inside && px != img.pixel(x, y) {
                        return Err(format!("(c) {}: pixel ({x},{y}) outside masked boxes changed", r.image_id));
                    }
                }
            }
            objects_masked += want;
        }
    }

    // (d) equal seeds, byte-identical files; (e) 1 vs 8 workers.
    let manifest = corpus.join("manifest.jsonl");
    let perturb = |dir: &Path, workers: &str| {
        run(&["perturb", "--manifest", path_str(&manifest), "--seed", "9", "--workers", workers, "--out", path_str(dir)])
    };
    let (parallel_dir, serial_dir) = (tmp.path().join("p8"), tmp.path().join("p1"));
    perturb(&parallel_dir, "8")?;
    let first = tree_hashes(&parallel_dir, &[]);
    ensure(first.len() == 12 * 200 + 12 + 1, || format!("unexpected output file count {}", first.len()))?;
    perturb(&parallel_dir, "8")?;
    ensure(tree_hashes(&parallel_dir, &[]) == first, || "(d) equal-seed rerun changed outputs".into())?;
    perturb(&serial_dir, "1")?;
    // The config echo records the worker count and output path themselves.
    let serial = tree_hashes(&serial_dir, &["config.json"]);
    let parallel = tree_hashes(&parallel_dir, &["config.json"]);
    ensure(serial == parallel, || "(e) --workers 1 and --workers 8 outputs differ".into())?;
    Ok(format!(
        "200 images x 3 strengths; {objects_masked} object boxes masked; {} files identical across reruns and worker counts",
        serial.len()
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Check {
    // 20 candidates; scores place the chosen genders in the top 10.
    let skew = |top_women: usize| -> Result<f64, String> {
        let mut items = Vec::new();
        let ids: Vec<String> = (0..20).map(|i| format!("x{i:02}")).collect();
        for (i, id) in ids.iter().enumerate() {
            let (g, score) = if i < 10 {
                (if i < top_women { GenderLabel::Woman } else { GenderLabel::Man }, 10.0 + i as f64)
            } else {
                (if i - 10 < 10 - top_women { GenderLabel::Woman } else { GenderLabel::Man }, i as f64 - 10.0)
            };
            items.push((score, id.as_str(), g));
        }
        let women = items.iter().filter(|i| i.2 == GenderLabel::Woman).count();
        assert_eq!(women, 10, "candidate pool must be balanced");
        max_skew_from_scores(&items, 10).map(|o| o.value).map_err(|e| e.to_string())
    };
    let balanced = skew(5)?;
    ensure(balanced == 0.0, || format!("balanced top-k gives {balanced}, expected exactly 0"))?;
    for single in [skew(10)?, skew(0)?] {
        ensure((single - 2f64.ln()).abs() <= 1e-12, || format!("single-gender top-k gives {single}"))?;
    }
    for split in [skew(7)?, skew(3)?] {
        ensure((split - 1.4f64.ln()).abs() <= 1e-12, || format!("7/3 split gives {split}"))?;
    }
    Ok(format!("0, ln 2 = {:.15}, ln 1.4 = {:.15}", skew(10)?, skew(7)?))
}

// ---------------------------------------------------------------- 7

/// COCO-gender block of the published YGap table (x100): original, then
/// weak/middle/strong for color, lighting, object, background.
const COCO_YGAP: [(&str, f64, [f64; 12]); 6] = [
    ("LLaVA-1.5-7B", -3.69, [-3.63, -3.58, -3.47, -3.57, -3.65, -3.62, -3.22, -2.70, -2.52, -3.88, -4.15, -4.05]),
    ("LLaVA-OneVision-7B", -1.13, [-1.07, -1.03, -0.99, -1.14, -1.11, -1.04, -1.48, -1.66, -1.76, -3.01, -3.22, -3.12]),
    ("Qwen2-VL-7B", 2.80, [2.89, 2.94, 2.86, 2.78, 2.85, 2.90, 2.25, 2.26, 2.54, 2.56, 2.53, 2.52]),
    ("InternVL-2.5-8B", -0.09, [-0.10, -0.11, 0.11, 0.05, 0.14, 0.04, -0.15, 0.11, 0.03, 0.09, 0.23, 0.14]),
    ("mPLUG-Owl3-7B", -0.92, [-0.93, -0.95, -0.98, -0.90, -0.93, -0.84, -1.19, -1.16, -0.98, -2.53, -2.54, -2.57]),
    ("EAGLE-8B", 0.57, [0.61, 0.58, 0.65, 0.60, 0.58, 0.62, 0.52, 0.46, 0.39, 0.35, 0.38, 0.46]),
];

fn table_report(rows: &[(&str, f64, [f64; 12])]) -> Result<BiasReport, String> {
    let mut models = Vec::new();
    for (name, orig, perturbed) in rows {
        let original = MetricValue::ygap(orig / 100.0, 0);
        let mut cells = Vec::new();
        let mut it = perturbed.iter();
        for f in FeatureKind::ALL {
            for s in Strength::ALL {
                let p = MetricValue::ygap(it.next().expect("12 cells") / 100.0, 0);
                let delta = relative_delta(original, p).map_err(|e| e.to_string())?;
                cells.push(Cell { feature: f, strength: s, delta });
            }
        }
        models.push(ModelReport { model: name.to_string(), original, cells });
    }
    BiasReport::new("coco-gender", MetricKind::YGap, models).map_err(|e| e.to_string())
}

fn criterion_7() -> Check {
    let report = table_report(&COCO_YGAP)?;
    let alpha = 1.0;
    let summary = two_dim_summary(&report, alpha).map_err(|e| e.to_string())?;
    let delta_csv = emit_delta_table(&report);

    for (name, orig, perturbed) in &COCO_YGAP {
        let m = report.models.iter().find(|m| m.model == *name).ok_or("model missing")?;
        let row = summary.iter().find(|r| r.model == *name).ok_or("summary row missing")?;
        let tiny = (orig / 100.0).abs() < 0.005;
        ensure(m.original.excluded == tiny, || format!("{name}: exclusion flag {}", m.original.excluded))?;
        if tiny {
            ensure(m.cells.iter().all(|c| c.delta.excluded()), || format!("{name}: a cell kept a delta"))?;
            ensure(m.mean_delta().is_none() && row.beta.is_none(), || format!("{name}: contributes to mean delta or beta"))?;
            let lines = delta_csv.lines().filter(|l| l.contains(name)).collect::<Vec<_>>();
            ensure(lines.len() == 12 && lines.iter().all(|l| l.contains(",excluded,")), || {
                format!("{name}: delta table does not mark all 12 cells excluded")
            })?;
        } else {
            let want = perturbed.iter().map(|p| 100.0 * ((orig - p) / orig).abs()).sum::<f64>() / 12.0;
            let got = m.mean_delta().ok_or_else(|| format!("{name}: no mean delta"))?;
            ensure((got - want).abs() < 1e-9, || format!("{name}: mean delta {got} != {want}"))?;
            let beta = row.beta.ok_or_else(|| format!("{name}: no beta"))?;
            let want_beta = (orig / 100.0).abs() * (1.0 + alpha * want / 100.0);
            ensure((beta - want_beta).abs() < 1e-12, || format!("{name}: beta {beta} != {want_beta}"))?;
        }
    }
    ensure(summary.last().map(|r| r.model.as_str()) == Some("InternVL-2.5-8B"), || {
        "excluded model is not ranked last".into()
    })?;

    // Dropping the excluded model changes nothing for the others.
    let kept: Vec<_> = COCO_YGAP.iter().filter(|r| r.0 != "InternVL-2.5-8B").cloned().collect();
    let without = two_dim_summary(&table_report(&kept)?, alpha).map_err(|e| e.to_string())?;
    ensure(without[..] == summary[..summary.len() - 1], || "excluded model shifted other rows".into())?;

    // The boundary itself: 0.005 is kept, just below is excluded.
    ensure(!MetricValue::ygap(0.005, 0).excluded && MetricValue::ygap(-0.004999, 0).excluded, || {
        "threshold boundary".into()
    })?;
    let mixed = [
        relative_delta(MetricValue::ygap(0.002, 0), MetricValue::ygap(0.3, 0)).map_err(|e| e.to_string())?,
        relative_delta(MetricValue::ygap(0.1, 0), MetricValue::ygap(0.12, 0)).map_err(|e| e.to_string())?,
    ];
    let md = mean_delta(&mixed).ok_or("mixed mean missing")?;
    ensure((md - 20.0).abs() < 1e-9, || format!("mixed mean delta {md}, expected 20"))?;
    Ok("InternVL-2.5-8B/COCO: 12 cells excluded, no mean delta, incomparable beta; other rows unchanged".into())
}

// ---------------------------------------------------------------- 8

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/replay50")
}

fn criterion_8() -> Check {
    let start = Instant::now();
    let fx = fixture_dir();
    ensure(fx.join("manifest.jsonl").is_file(), || format!("fixture missing at {}", fx.display()))?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = |name: &str| tmp.path().join(name);
    let manifest = fx.join("manifest.jsonl");
    let replay: Vec<String> = ["vqa-warm", "vqa-plain", "clip-warm", "clip-plain"]
        .iter()
        .map(|m| fx.join("replay").join(format!("{m}.jsonl")).display().to_string())
        .collect();
    let prompts = format!(
        "{},{}",
        fx.join("prompts/vqa.jsonl").display(),
        fx.join("prompts/retrieval.jsonl").display()
    );

    let detect = run(&["detect", "--manifest", path_str(&manifest), "--seed", "0", "--out", path_str(&t("detect"))])?;
    ensure(detect.lines().count() == 4, || format!("detect printed {} rows", detect.lines().count()))?;
    run(&["perturb", "--manifest", path_str(&manifest), "--seed", "0", "--out", path_str(&t("perturbed"))])?;
    run(&[
        "eval",
        "--manifest",
        path_str(&manifest),
        "--perturbed",
        path_str(&t("perturbed")),
        "--backend",
        "replay",
        "--replay",
        &replay.join(","),
        "--prompts",
        &prompts,
        "--k",
        "10",
        "--probe",
        path_str(&t("detect").join("table1.csv")),
        "--seed",
        "0",
        "--out",
        path_str(&t("eval")),
    ])?;
    run(&["report", "--input", path_str(&t("eval")), "--out", path_str(&t("report"))])?;

    let verification = fs::read_to_string(t("report").join("verification.csv")).map_err(|e| e.to_string())?;
    let mut cells = 0;
    let mut bundles = 0;
    for line in verification.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        ensure(f.len() == 5 && f[3] == "0" && f[4] == "ok", || format!("verification row `{line}`"))?;
        cells += f[2].parse::<usize>().map_err(|e| e.to_string())?;
        bundles += 1;
    }
    ensure(bundles == 2, || format!("{bundles} bundles verified, expected vqa and retrieval"))?;
    for modality in ["vqa", "retrieval"] {
        let raw = fs::read_to_string(t("eval").join(modality).join("raw_table.csv")).map_err(|e| e.to_string())?;
        let header_cols = raw.lines().next().unwrap_or_default().split(',').count();
        ensure(header_cols == 6 + 12, || format!("{modality} raw table has {header_cols} columns"))?;
        let delta = fs::read_to_string(t("eval").join(modality).join("delta_table.csv")).map_err(|e| e.to_string())?;
        ensure(delta.lines().count() == 1 + 2 * 12, || format!("{modality} delta table has {} lines", delta.lines().count()))?;
    }
    within_time(start, Duration::from_secs(300), "replay pipeline")?;
    Ok(format!("{bundles} bundles, {cells} cells recomputed from raw inputs"))
}
