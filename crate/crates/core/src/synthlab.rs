//! Synthetic gender → feature → output worlds.
//!
//! Each record has a gender `g` and a scalar spurious feature `b ∈ [0, 1]`
//! drawn from a per-gender Beta distribution. A logistic response model
//! answers `Yes` with probability `σ(w_g [g = man] + w_b b + bias)`. The
//! perturbation permutes `b` across all records, which keeps the marginal of
//! `b` and removes its dependence on `g`.
//!
//! When `b` is independent of `g`, the perturbation barely moves YGap. When
//! `b` depends on `g` and the model reads `b`, YGap moves a lot.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::VqaAnswer;
use crate::corpus::GenderLabel;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::{relative_delta, ygap_from_answers, DeltaValue};
use crate::seed::{derived_rng, unit_uniform, SeedPart};

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseWeights {
    pub w_g: f64,
    pub w_b: f64,
    pub bias: f64,
}

impl ResponseWeights {
    pub fn logit(&self, gender: GenderLabel, b: f64) -> f64 {
        let man = if gender == GenderLabel::Man { 1.0 } else { 0.0 };
        self.w_g * man + self.w_b * b + self.bias
    }

    pub fn p_yes(&self, gender: GenderLabel, b: f64) -> f64 {
        logistic(self.logit(gender, b))
    }
}

/// Shape parameters of a Beta distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub const fn new(alpha: f64, beta: f64) -> Self {
        BetaParams { alpha, beta }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub woman_b: BetaParams,
    pub man_b: BetaParams,
    pub weights: ResponseWeights,
    pub seed: u64,
}

impl SynthConfig {
    /// `b` independent of gender: Beta(2, 2) for both, `w_g = 1`, `w_b = 0.5`.
    pub fn independent(n: usize, seed: u64) -> Self {
        SynthConfig {
            n,
            woman_b: BetaParams::new(2.0, 2.0),
            man_b: BetaParams::new(2.0, 2.0),
            weights: ResponseWeights { w_g: 1.0, w_b: 0.5, bias: 0.0 },
            seed,
        }
    }

    /// `b` correlated with gender: Beta(2, 5) for women, Beta(5, 2) for men,
    /// and a model that reads only `b`.
    pub fn correlated(n: usize, seed: u64) -> Self {
        SynthConfig {
            n,
            woman_b: BetaParams::new(2.0, 5.0),
            man_b: BetaParams::new(5.0, 2.0),
            weights: ResponseWeights { w_g: 0.0, w_b: 6.0, bias: -3.0 },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 100 {
            return Err(Error::invalid(format!("synthetic worlds need n >= 100, got {}", self.n)));
        }
        for p in [self.woman_b, self.man_b] {
            if !(p.alpha > 0.0 && p.beta > 0.0 && p.alpha.is_finite() && p.beta.is_finite()) {
                return Err(Error::invalid(format!("Beta parameters must be positive, got {p:?}")));
            }
        }
        let w = self.weights;
        if ![w.w_g, w.w_b, w.bias].iter().all(|x| x.is_finite()) {
            return Err(Error::invalid("response weights must be finite"));
        }
        Ok(())
    }

    fn params(&self, g: GenderLabel) -> BetaParams {
        match g {
            GenderLabel::Woman => self.woman_b,
            GenderLabel::Man => self.man_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: usize,
    pub gender: GenderLabel,
    pub b_value: f64,
}

/// `n / 2` women followed by `n - n / 2` men.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthRecord>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n);
    let half = cfg.n / 2;
    for g in GenderLabel::ALL {
        let p = cfg.params(g);
        let dist = Beta::new(p.alpha, p.beta).map_err(|e| Error::invalid(format!("Beta{p:?}: {e}")))?;
        let mut rng = derived_rng(&[SeedPart::Str("synth-b"), SeedPart::U64(cfg.seed), SeedPart::Str(g.as_str())]);
        let count = if g == GenderLabel::Woman { half } else { cfg.n - half };
        for _ in 0..count {
            let id = out.len();
            out.push(SynthRecord {
                id,
                gender: g,
                b_value: dist.sample(&mut rng),
            });
        }
    }
    Ok(out)
}

/// One `Yes`/`No` draw. The uniform is keyed by `(seed, id, prompt_seed)`
/// only, so a record answers with the same random number before and after
/// its `b` changes.
pub fn synthetic_respond(record: &SynthRecord, cfg: &SynthConfig, prompt_seed: u64) -> VqaAnswer {
    let u = unit_uniform(&[
        SeedPart::Str("synth-respond"),
        SeedPart::U64(cfg.seed),
        SeedPart::U64(record.id as u64),
        SeedPart::U64(prompt_seed),
    ]);
    if u < cfg.weights.p_yes(record.gender, record.b_value) {
        VqaAnswer::Yes
    } else {
        VqaAnswer::No
    }
}

/// Reassigns the `b` values by a seeded uniform permutation over all records.
pub fn marginal_preserving_perturbation(records: &[SynthRecord], seed: u64) -> Result<Vec<SynthRecord>> {
    if records.len() < 2 {
        return Err(Error::invalid("perturbation needs at least two records"));
    }
    let mut bs: Vec<f64> = records.iter().map(|r| r.b_value).collect();
    bs.shuffle(&mut derived_rng(&[SeedPart::Str("synth-permute"), SeedPart::U64(seed)]));
    Ok(records
        .iter()
        .zip(bs)
        .map(|(r, b)| SynthRecord { b_value: b, ..r.clone() })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    Independent,
    Correlated,
}

impl Case {
    pub fn as_str(self) -> &'static str {
        match self {
            Case::Independent => "independent",
            Case::Correlated => "correlated",
        }
    }

    pub fn config(self, n: usize, seed: u64) -> SynthConfig {
        match self {
            Case::Independent => SynthConfig::independent(n, seed),
            Case::Correlated => SynthConfig::correlated(n, seed),
        }
    }
}

impl std::str::FromStr for Case {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Case::Independent),
            "correlated" => Ok(Case::Correlated),
            _ => Err(Error::invalid(format!("unknown case `{s}` (expected independent or correlated)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CaseOutcome {
    pub case: Case,
    pub seed: u64,
    pub n: usize,
    pub ygap_orig: f64,
    pub ygap_pert: f64,
    pub delta: DeltaValue,
}

/// Generate, answer, perturb, answer again, and compare YGaps.
pub fn run_case_experiment(cfg: &SynthConfig, case: Case) -> Result<CaseOutcome> {
    if case == Case::Independent && cfg.woman_b != cfg.man_b {
        return Err(Error::invalid("the independent case needs identical per-gender distributions"));
    }
    let records = generate(cfg)?;
    let perturbed = marginal_preserving_perturbation(&records, cfg.seed)?;
    let answer = |rs: &[SynthRecord]| ygap_from_answers(rs.iter().map(|r| (r.gender, synthetic_respond(r, cfg, 0))));
    let orig = answer(&records)?;
    let pert = answer(&perturbed)?;
    Ok(CaseOutcome {
        case,
        seed: cfg.seed,
        n: cfg.n,
        ygap_orig: orig.value,
        ygap_pert: pert.value,
        delta: relative_delta(orig, pert)?,
    })
}

/// Runs `case` over seeds `0..seeds` in parallel.
pub fn sweep(case: Case, n: usize, seeds: u64, template: Option<&SynthConfig>) -> Result<Vec<CaseOutcome>> {
    (0..seeds)
        .into_par_iter()
        .map(|s| {
            let cfg = match template {
                Some(t) => SynthConfig { seed: s, n, ..t.clone() },
                None => case.config(n, s),
            };
            run_case_experiment(&cfg, case)
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "case,seed,n,ygap_orig,ygap_pert,delta_percent";

pub fn summary_csv(rows: &[CaseOutcome]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let delta = r
            .delta
            .delta_percent
            .map_or_else(|| "excluded".to_string(), crate::report::fmt_real);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.case.as_str(),
            r.seed,
            r.n,
            crate::report::fmt_real(r.ygap_orig),
            crate::report::fmt_real(r.ygap_pert),
            delta
        );
    }
    out
}

/// Writes `summary.csv` and `config.json` into `dir`.
pub fn write_summary(dir: &Path, rows: &[CaseOutcome], configs: &[SynthConfig]) -> Result<()> {
    fsutil::write_atomic(&dir.join("summary.csv"), summary_csv(rows).as_bytes())?;
    let echo = serde_json::to_string_pretty(configs)? + "\n";
    fsutil::write_atomic(&dir.join("config.json"), echo.as_bytes())
}
