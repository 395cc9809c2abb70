//! Gender probes: a two-layer ReLU MLP trained from scratch with mini-batch
//! gradient descent on softmax cross-entropy.
//!
//! The probe predicts gender from one feature-isolated vector. Accuracy well
//! above 50% on a balanced test split indicates that the feature correlates
//! with gender in the benchmark.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Dataset, GenderLabel};
use crate::error::{Error, Result};
use crate::features::{self, LightingChannels, Vocabulary};
use crate::fsutil;
use crate::imaging::Image;
use crate::perturb::FeatureKind;
use crate::seed::{derived_rng, SeedPart};

/// A labeled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub values: Vec<f64>,
    pub label: GenderLabel,
}

impl Sample {
    pub fn new(values: Vec<f64>, label: GenderLabel) -> Self {
        Sample { values, label }
    }
}

/// How the hidden layer is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HiddenMode {
    /// `h = max(0, W1 x + b1)`.
    Relu,
    /// `h = x`; only the output layer is trained (softmax regression).
    Bypass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpProbe {
    input_size: usize,
    hidden_size: usize,
    mode: HiddenMode,
    /// `hidden x input`, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `2 x hidden`, row-major.
    w2: Vec<f64>,
    b2: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: [f64; 2],
}

impl MlpProbe {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        MlpProbe {
            input_size,
            hidden_size,
            mode: HiddenMode::Relu,
            w1: vec![0.0; hidden_size * input_size],
            b1: vec![0.0; hidden_size],
            w2: vec![0.0; 2 * hidden_size],
            b2: [0.0; 2],
        }
    }

    /// Builds a probe from explicit parameters (row-major matrices).
    pub fn from_parts(
        input_size: usize,
        hidden_size: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: [f64; 2],
    ) -> Result<Self> {
        for (got, want) in [
            (w1.len(), hidden_size * input_size),
            (b1.len(), hidden_size),
            (w2.len(), 2 * hidden_size),
        ] {
            if got != want {
                return Err(Error::Dimension {
                    expected: want,
                    actual: got,
                });
            }
        }
        let probe = MlpProbe {
            input_size,
            hidden_size,
            mode: HiddenMode::Relu,
            w1,
            b1,
            w2,
            b2,
        };
        probe.check_finite()?;
        Ok(probe)
    }

    /// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn init<R: Rng + ?Sized>(input_size: usize, hidden_size: usize, mode: HiddenMode, rng: &mut R) -> Self {
        let hidden_size = match mode {
            HiddenMode::Relu => hidden_size,
            HiddenMode::Bypass => input_size,
        };
        let mut uniform = |fan_in: usize, n: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let (w1, b1) = match mode {
            HiddenMode::Relu => (
                uniform(input_size, hidden_size * input_size),
                uniform(input_size, hidden_size),
            ),
            HiddenMode::Bypass => (Vec::new(), Vec::new()),
        };
        let w2 = uniform(hidden_size, 2 * hidden_size);
        let b2v = uniform(hidden_size, 2);
        MlpProbe {
            input_size,
            hidden_size,
            mode,
            w1,
            b1,
            w2,
            b2: [b2v[0], b2v[1]],
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn mode(&self) -> HiddenMode {
        self.mode
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 2
    }

    fn check_finite(&self) -> Result<()> {
        let all = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2);
        if all.into_iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("probe parameters contain non-finite values"))
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_size {
            return Err(Error::Dimension {
                expected: self.input_size,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Returns `(pre-activation, hidden activation)`.
    fn hidden(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self.mode {
            HiddenMode::Bypass => (x.to_vec(), x.to_vec()),
            HiddenMode::Relu => {
                let z: Vec<f64> = self
                    .w1
                    .chunks_exact(self.input_size.max(1))
                    .zip(&self.b1)
                    .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
                    .collect();
                let h = z.iter().map(|&v| v.max(0.0)).collect();
                (z, h)
            }
        }
    }

    fn output(&self, h: &[f64]) -> [f64; 2] {
        let mut logits = self.b2;
        for (k, row) in self.w2.chunks_exact(self.hidden_size.max(1)).enumerate() {
            logits[k] += row.iter().zip(h).map(|(w, hi)| w * hi).sum::<f64>();
        }
        logits
    }

    pub fn logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        self.check_input(x)?;
        Ok(self.output(&self.hidden(x).1))
    }

    /// Logits and predicted gender; ties go to woman (index 0).
    pub fn forward(&self, x: &[f64]) -> Result<([f64; 2], GenderLabel)> {
        let logits = self.logits(x)?;
        Ok((logits, argmax(logits)))
    }

    pub fn predict(&self, x: &[f64]) -> Result<GenderLabel> {
        Ok(self.forward(x)?.1)
    }

    /// Mean softmax cross-entropy over `batch`.
    pub fn loss(&self, batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut total = 0.0;
        for s in batch {
            total += cross_entropy(self.logits(&s.values)?, s.label);
        }
        Ok(total / batch.len() as f64)
    }

    /// Analytic gradients of [`MlpProbe::loss`] by backpropagation.
    pub fn gradients(&self, batch: &[Sample]) -> Result<Gradients> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut g = Gradients {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: [0.0; 2],
        };
        let hs = self.hidden_size;
        let inv = 1.0 / batch.len() as f64;
        for s in batch {
            self.check_input(&s.values)?;
            let (z, h) = self.hidden(&s.values);
            let p = softmax(self.output(&h));
            let mut dz2 = p;
            dz2[s.label.index()] -= 1.0;
            for k in 0..2 {
                g.b2[k] += dz2[k] * inv;
                for j in 0..hs {
                    g.w2[k * hs + j] += dz2[k] * h[j] * inv;
                }
            }
            if self.mode == HiddenMode::Relu {
                for j in 0..hs {
                    if z[j] <= 0.0 {
                        continue;
                    }
                    let dz1 = (dz2[0] * self.w2[j] + dz2[1] * self.w2[hs + j]) * inv;
                    g.b1[j] += dz1;
                    let row = &mut g.w1[j * self.input_size..(j + 1) * self.input_size];
                    for (gw, xi) in row.iter_mut().zip(&s.values) {
                        *gw += dz1 * xi;
                    }
                }
            }
        }
        Ok(g)
    }

    fn apply(&mut self, g: &Gradients, lr: f64) {
        let step = |p: &mut [f64], d: &[f64]| p.iter_mut().zip(d).for_each(|(p, d)| *p -= lr * d);
        step(&mut self.w1, &g.w1);
        step(&mut self.b1, &g.b1);
        step(&mut self.w2, &g.w2);
        step(&mut self.b2, &g.b2);
    }

    /// Flat parameter access in the order W1, b1, W2, b2.
    fn param_mut(&mut self, i: usize) -> &mut f64 {
        let (a, b, c) = (self.w1.len(), self.b1.len(), self.w2.len());
        if i < a {
            &mut self.w1[i]
        } else if i < a + b {
            &mut self.b1[i - a]
        } else if i < a + b + c {
            &mut self.w2[i - a - b]
        } else {
            &mut self.b2[i - a - b - c]
        }
    }

    /// Returns a copy whose predictions are always the opposite class.
    pub fn flipped(&self) -> Self {
        let hs = self.hidden_size;
        let mut out = self.clone();
        out.w2[..hs].copy_from_slice(&self.w2[hs..]);
        out.w2[hs..].copy_from_slice(&self.w2[..hs]);
        out.b2 = [self.b2[1], self.b2[0]];
        out
    }

    const MAGIC: &'static [u8; 8] = b"BPMLP\0v1";

    /// Binary checkpoint: magic, mode byte, input and hidden sizes (u64 LE),
    /// then every parameter as f64 LE in the order W1, b1, W2, b2.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(25 + 8 * self.parameter_count());
        out.extend_from_slice(Self::MAGIC);
        out.push(match self.mode {
            HiddenMode::Relu => 0,
            HiddenMode::Bypass => 1,
        });
        out.extend_from_slice(&(self.input_size as u64).to_le_bytes());
        out.extend_from_slice(&(self.hidden_size as u64).to_le_bytes());
        for v in self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("probe checkpoint: {m}"));
        if bytes.len() < 25 || &bytes[..8] != Self::MAGIC {
            return Err(bad("bad header"));
        }
        let mode = match bytes[8] {
            0 => HiddenMode::Relu,
            1 => HiddenMode::Bypass,
            _ => return Err(bad("unknown hidden mode")),
        };
        let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
        let (input_size, hidden_size) = (read_u64(9), read_u64(17));
        let (n1, nb1) = match mode {
            HiddenMode::Relu => (hidden_size * input_size, hidden_size),
            HiddenMode::Bypass => (0, 0),
        };
        let total = n1 + nb1 + 2 * hidden_size + 2;
        if bytes.len() != 25 + 8 * total {
            return Err(bad("length does not match dimensions"));
        }
        let vals: Vec<f64> = bytes[25..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (w1, rest) = vals.split_at(n1);
        let (b1, rest) = rest.split_at(nb1);
        let (w2, b2) = rest.split_at(2 * hidden_size);
        let probe = MlpProbe {
            input_size,
            hidden_size,
            mode,
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: [b2[0], b2[1]],
        };
        probe.check_finite()?;
        Ok(probe)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn argmax(logits: [f64; 2]) -> GenderLabel {
    if logits[1] > logits[0] {
        GenderLabel::Man
    } else {
        GenderLabel::Woman
    }
}

fn softmax(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

fn cross_entropy(z: [f64; 2], label: GenderLabel) -> f64 {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    lse - z[label.index()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-accuracy improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    #[serde(skip, default = "default_mode")]
    pub mode: HiddenMode,
}

fn default_mode() -> HiddenMode {
    HiddenMode::Relu
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_size: 128,
            learning_rate: 0.05,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            mode: HiddenMode::Relu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("train config sizes must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::invalid("patience must be below max_epochs"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub probe: MlpProbe,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

pub fn train(train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<MlpProbe> {
    Ok(train_with_history(train_set, val_set, cfg)?.probe)
}

/// Mini-batch gradient descent with early stopping on validation accuracy.
///
/// The kept parameters come from the epoch with the best validation accuracy
/// (earliest on ties). Training stops after `patience` epochs without
/// improvement or at `max_epochs`.
pub fn train_with_history(train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let first = train_set[0].label;
    if train_set.iter().all(|s| s.label == first) {
        return Err(Error::invalid(format!("training set contains only `{first}` samples")));
    }
    let input_size = train_set[0].values.len();
    let mut rng = derived_rng(&[SeedPart::Str("train"), SeedPart::U64(cfg.seed)]);
    let mut probe = MlpProbe::init(input_size, cfg.hidden_size, cfg.mode, &mut rng);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (probe.clone(), f64::NEG_INFINITY, 0usize);
    let mut stale = 0;
    let mut history = Vec::new();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let g = probe.gradients(&batch)?;
            probe.apply(&g, cfg.learning_rate);
        }
        let train_loss = probe.loss(train_set)?;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                loss: train_loss,
            });
        }
        let val_accuracy = acc_b(&probe, val_set)?;
        history.push(EpochStats {
            train_loss,
            val_accuracy,
        });
        if val_accuracy > best.1 {
            best = (probe.clone(), val_accuracy, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        probe: best.0,
        best_epoch: best.2,
        history,
    })
}

/// Fraction of samples whose prediction equals the label.
pub fn acc_b(probe: &MlpProbe, test_set: &[Sample]) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let mut correct = 0usize;
    for s in test_set {
        correct += (probe.predict(&s.values)? == s.label) as usize;
    }
    Ok(correct as f64 / test_set.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Parameters to probe (all of them if the model has fewer).
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
    /// Multiplier on analytic gradients; 1.0 except in harness self-tests.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples: 100,
            step: 1e-4,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

/// Gradients smaller than this (in both routes) count as agreeing zeros.
const GRAD_ZERO: f64 = 1e-10;

/// Compares backprop gradients with central finite differences on sampled
/// parameters and returns the largest relative error
/// `|analytic - numeric| / |numeric|`.
pub fn gradient_check(probe: &MlpProbe, batch: &[Sample], opts: &GradCheckOptions) -> Result<f64> {
    let analytic = probe.gradients(batch)?;
    let flat: Vec<f64> = analytic
        .w1
        .iter()
        .chain(&analytic.b1)
        .chain(&analytic.w2)
        .chain(&analytic.b2)
        .map(|g| g * opts.analytic_scale)
        .collect();
    let n = probe.parameter_count();
    let mut rng = derived_rng(&[SeedPart::Str("gradcheck"), SeedPart::U64(opts.seed)]);
    let picks: Vec<usize> = if n <= opts.samples {
        (0..n).collect()
    } else {
        rand::seq::index::sample(&mut rng, n, opts.samples).into_vec()
    };
    let mut work = probe.clone();
    let mut worst: f64 = 0.0;
    for i in picks {
        let orig = *work.param_mut(i);
        *work.param_mut(i) = orig + opts.step;
        let up = work.loss(batch)?;
        *work.param_mut(i) = orig - opts.step;
        let down = work.loss(batch)?;
        *work.param_mut(i) = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        let a = flat[i];
        let err = if a.abs() < GRAD_ZERO && numeric.abs() < GRAD_ZERO {
            0.0
        } else {
            (a - numeric).abs() / numeric.abs().max(GRAD_ZERO)
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Probe accuracy for one feature over the repeated-seed protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub kind: FeatureKind,
    pub per_seed_acc: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `per_seed_acc`.
    pub std: f64,
}

pub const PROTOCOL_SEEDS: usize = 5;

impl ProbeResult {
    pub fn from_accuracies(kind: FeatureKind, per_seed_acc: Vec<f64>) -> Self {
        let n = per_seed_acc.len() as f64;
        let mean = per_seed_acc.iter().sum::<f64>() / n;
        let var = per_seed_acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        ProbeResult {
            kind,
            per_seed_acc,
            mean,
            std: var.sqrt(),
        }
    }

    /// `"76.3 ± 1.6"`: mean and std in percent, one decimal.
    pub fn cell(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Where probe inputs come from.
pub enum FeatureSource<'a> {
    /// Vectors keyed by `image_id`.
    Precomputed(&'a HashMap<String, Vec<f64>>),
    /// Multi-hot object vectors over each run's training-split vocabulary.
    Objects,
}

/// Balance, split 8:1:1, featurize, train and score, for seeds
/// `cfg.seed + 0 .. cfg.seed + 4`.
pub fn detect_spurious_with(
    ds: &Dataset,
    kind: FeatureKind,
    source: &FeatureSource<'_>,
    cfg: &TrainConfig,
) -> Result<ProbeResult> {
    let accs: Vec<Result<f64>> = (0..PROTOCOL_SEEDS as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i);
            let balanced = corpus::balance_by_gender(ds, seed)?;
            let parts = corpus::split(&balanced, seed)?;
            let vocab = match source {
                FeatureSource::Objects => Some(Vocabulary::from_dataset(&parts.train)),
                FeatureSource::Precomputed(_) => None,
            };
            let samples = |part: &Dataset| -> Result<Vec<Sample>> {
                part.records
                    .iter()
                    .map(|r| {
                        let values = match (source, &vocab) {
                            (FeatureSource::Precomputed(map), _) => map
                                .get(&r.image_id)
                                .cloned()
                                .ok_or_else(|| Error::invalid(format!("no features for `{}`", r.image_id)))?,
                            (FeatureSource::Objects, Some(v)) => features::extract_object(r, v)?.0.values,
                            (FeatureSource::Objects, None) => unreachable!("vocabulary built above"),
                        };
                        Ok(Sample::new(values, r.gender))
                    })
                    .collect()
            };
            let run_cfg = TrainConfig { seed, ..*cfg };
            let probe = train(&samples(&parts.train)?, &samples(&parts.val)?, &run_cfg)?;
            acc_b(&probe, &samples(&parts.test)?)
        })
        .collect();
    let accs = accs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ProbeResult::from_accuracies(kind, accs))
}

/// Pixel features of every record, decoded from disk in parallel.
pub fn pixel_features(
    ds: &Dataset,
    kind: FeatureKind,
    lighting: LightingChannels,
) -> Result<HashMap<String, Vec<f64>>> {
    ds.records
        .par_iter()
        .map(|r| {
            let img = Image::load(&ds.image_path(r))?;
            let v = features::extract_pixels(kind, r, &img, lighting)?;
            Ok((r.image_id.clone(), v.values))
        })
        .collect()
}

/// Runs the detection protocol for one feature kind on image files.
pub fn detect_spurious(
    ds: &Dataset,
    kind: FeatureKind,
    cfg: &TrainConfig,
    lighting: LightingChannels,
) -> Result<ProbeResult> {
    match kind {
        FeatureKind::Object => detect_spurious_with(ds, kind, &FeatureSource::Objects, cfg),
        _ => {
            let feats = pixel_features(ds, kind, lighting)?;
            detect_spurious_with(ds, kind, &FeatureSource::Precomputed(&feats), cfg)
        }
    }
}
