//! Mini-batch minimisation of the decomposition objective
//! `Σ ||g - t̂(X; Φ) - β_i||² + λ |Σ_i β_i|₁` and its no-decomposition ablation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dataset::{leave_one_subject_out_splits, Dataset, Sample, SplitOptions, SubjectKey};
use crate::error::{Error, Result};
use crate::estimator::{Architecture, Model, DEG_PER_UNIT};
use crate::geometry::GazeAngle;
use crate::rng;
use crate::stats;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer {other:?} (expected sgd or adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Learning rate is divided by `lr_decay_factor` every `lr_decay_every` epochs.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
    /// `false` trains the no-decomposition ablation (all β fixed at zero).
    pub decomposition: bool,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            epochs: 35,
            batch_size: 64,
            initial_lr: 1e-3,
            lr_decay_every: 10,
            lr_decay_factor: 10.0,
            seed: 1,
            decomposition: true,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda must be a finite nonnegative number");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return bad("initial_lr must be positive");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive");
        }
        if !(self.lr_decay_factor >= 1.0) || !self.lr_decay_factor.is_finite() {
            return bad("lr_decay_factor must be at least 1");
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.initial_lr / self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Model plus the per-subject biases it is evaluated with.
#[derive(Debug, Clone)]
pub struct DecompositionState {
    pub model: Model,
    pub biases: BTreeMap<SubjectKey, GazeAngle>,
    pub lambda: f64,
    /// When false every β is taken as zero and the map is ignored.
    pub decomposition: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    /// Degrees-valued gradient for every β in the state.
    pub biases: BTreeMap<SubjectKey, GazeAngle>,
}

#[derive(Debug, Clone)]
pub struct TrainedDecomposition {
    pub model: Model,
    /// Empty when trained without decomposition.
    pub train_biases: BTreeMap<SubjectKey, GazeAngle>,
    /// Objective divided by sample count, after each epoch.
    pub history: Vec<f64>,
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Resolves each batch sample's β (zero in ablation mode).
fn batch_biases(state: &DecompositionState, batch: &[&Sample]) -> Result<Vec<GazeAngle>> {
    batch
        .iter()
        .map(|s| {
            if !state.decomposition {
                return Ok(GazeAngle::ZERO);
            }
            state
                .biases
                .get(&s.subject)
                .copied()
                .ok_or_else(|| Error::MissingBias(s.subject.to_string()))
        })
        .collect()
}

fn bias_sum(state: &DecompositionState) -> GazeAngle {
    if state.decomposition {
        state.biases.values().copied().sum()
    } else {
        GazeAngle::ZERO
    }
}

/// Batch objective in degrees²; the λ term enters once at full weight.
pub fn decomposition_loss(state: &DecompositionState, batch: &[&Sample]) -> Result<f64> {
    let betas = batch_biases(state, batch)?;
    let mut loss = 0.0;
    for (s, b) in batch.iter().zip(&betas) {
        let r = s.gaze - state.model.forward(&s.features)? - *b;
        loss += r.norm_squared();
    }
    Ok(loss + state.lambda * bias_sum(state).l1_norm())
}

/// Analytic gradients of [`decomposition_loss`] with respect to `Φ` and every β.
pub fn loss_gradients(state: &DecompositionState, batch: &[&Sample]) -> Result<Gradients> {
    let betas = batch_biases(state, batch)?;
    let mut params = vec![0.0; state.model.params.len()];
    let mut biases: BTreeMap<SubjectKey, GazeAngle> = if state.decomposition {
        let sum = bias_sum(state);
        let reg = GazeAngle::new(state.lambda * sign0(sum.yaw), state.lambda * sign0(sum.pitch));
        state.biases.keys().map(|k| (k.clone(), reg)).collect()
    } else {
        BTreeMap::new()
    };
    let mut stage = Vec::new();
    for (s, b) in batch.iter().zip(&betas) {
        if s.features.len() != state.model.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: state.model.arch.input_dim,
                actual: s.features.len(),
            });
        }
        state.model.stage_into(&s.features, &mut stage);
        let y = state.model.output_units(&stage);
        let r = s.gaze - GazeAngle::new(y[0] * DEG_PER_UNIT, y[1] * DEG_PER_UNIT) - *b;
        state
            .model
            .accumulate_gradient(&s.features, &stage, [-2.0 * r.yaw, -2.0 * r.pitch], &mut params);
        if state.decomposition {
            if let Some(g) = biases.get_mut(&s.subject) {
                *g -= r * 2.0;
            }
        }
    }
    Ok(Gradients { params, biases })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BiasMode {
    Learned,
    /// β entries exist for every subject but stay at zero.
    Frozen,
    Absent,
}

/// Trains `t̂` and the training-subject biases.
pub fn train(train: &Dataset, arch: Architecture, cfg: &TrainConfig) -> Result<TrainedDecomposition> {
    let mode = if cfg.decomposition {
        BiasMode::Learned
    } else {
        BiasMode::Absent
    };
    run(train, arch, cfg, mode)
}

/// Decomposition training with every β pinned at zero. Equivalent to the
/// no-decomposition ablation; exposed to check that equivalence.
pub fn train_with_frozen_biases(
    train: &Dataset,
    arch: Architecture,
    cfg: &TrainConfig,
) -> Result<TrainedDecomposition> {
    run(train, arch, cfg, BiasMode::Frozen)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let lr_t = lr * (1.0 - ADAM_BETA2.powi(self.t)).sqrt() / (1.0 - ADAM_BETA1.powi(self.t));
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            theta[i] -= lr_t * self.m[i] / (self.v[i].sqrt() + ADAM_EPS);
        }
    }
}

// Optimisation vector: [Φ | β in output units (radians), two per subject].
fn run(train: &Dataset, arch: Architecture, cfg: &TrainConfig, mode: BiasMode) -> Result<TrainedDecomposition> {
    cfg.validate()?;
    arch.validate()?;
    if train.feature_dim() != arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: arch.input_dim,
            actual: train.feature_dim(),
        });
    }
    if train.is_empty() {
        return Err(Error::Insufficient("empty training set".into()));
    }
    let subjects = train.subjects();
    if mode == BiasMode::Learned && subjects.len() < 2 {
        return Err(Error::Insufficient(
            "decomposition training needs at least two subjects".into(),
        ));
    }
    let samples = train.samples();
    let subject_of: Vec<usize> = {
        let index: BTreeMap<&SubjectKey, usize> = subjects.iter().enumerate().map(|(i, k)| (k, i)).collect();
        samples.iter().map(|s| index[&s.subject]).collect()
    };

    let mut model = Model::init(arch, cfg.seed)?;
    let np = model.params.len();
    let nb = if mode == BiasMode::Learned { 2 * subjects.len() } else { 0 };
    let mut theta = model.params.0.clone();
    theta.resize(np + nb, 0.0);
    let mut grad = vec![0.0; np + nb];
    let mut adam = Adam::new(np + nb);
    let offset = arch.output_offset_start();

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, &[0x5487]);
    let batches = samples.len().div_ceil(cfg.batch_size);
    let k = subjects.len() as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut stage = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut shuffle_rng);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.params.0.copy_from_slice(&theta[..np]);
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &samples[i];
                model.stage_into(&s.features, &mut stage);
                let y = model.output_units(&stage);
                let mut r = [
                    s.gaze.yaw - y[0] * DEG_PER_UNIT,
                    s.gaze.pitch - y[1] * DEG_PER_UNIT,
                ];
                if mode == BiasMode::Learned {
                    let j = np + 2 * subject_of[i];
                    r[0] -= theta[j] * DEG_PER_UNIT;
                    r[1] -= theta[j + 1] * DEG_PER_UNIT;
                    grad[j] -= 2.0 * r[0] * DEG_PER_UNIT;
                    grad[j + 1] -= 2.0 * r[1] * DEG_PER_UNIT;
                }
                batch_loss += r[0] * r[0] + r[1] * r[1];
                model.accumulate_gradient(&s.features, &stage, [-2.0 * r[0], -2.0 * r[1]], &mut grad[..np]);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            if mode == BiasMode::Learned && cfg.lambda > 0.0 {
                let (sy, sp) = sum_pairs(&theta[np..]);
                let reg = [
                    cfg.lambda / batches as f64 * sign0(sy) * DEG_PER_UNIT,
                    cfg.lambda / batches as f64 * sign0(sp) * DEG_PER_UNIT,
                ];
                for pair in grad[np..].chunks_mut(2) {
                    pair[0] += reg[0];
                    pair[1] += reg[1];
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut theta, &grad, lr),
                Optimizer::Sgd => {
                    for (t, g) in theta.iter_mut().zip(&grad) {
                        *t -= lr * g;
                    }
                }
            }
            if mode == BiasMode::Learned && cfg.lambda > 0.0 {
                // Moving a common shift from β into the output offset leaves the
                // squared term unchanged and sets Σβ to zero, the λ-term minimum.
                let (sy, sp) = sum_pairs(&theta[np..]);
                let (my, mp) = (sy / k, sp / k);
                for pair in theta[np..].chunks_mut(2) {
                    pair[0] -= my;
                    pair[1] -= mp;
                }
                theta[offset] += my;
                theta[offset + 1] += mp;
            }
        }
        model.params.0.copy_from_slice(&theta[..np]);
        let state = state_from(&model, &subjects, &theta[np..], cfg.lambda, mode);
        let all: Vec<&Sample> = samples.iter().collect();
        let loss = decomposition_loss(&state, &all)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: batches });
        }
        history.push(loss / samples.len() as f64);
    }

    model.params.0.copy_from_slice(&theta[..np]);
    let train_biases = match mode {
        BiasMode::Learned => betas_from(&subjects, &theta[np..]),
        BiasMode::Frozen | BiasMode::Absent => BTreeMap::new(),
    };
    Ok(TrainedDecomposition {
        model,
        train_biases,
        history,
    })
}

fn sum_pairs(v: &[f64]) -> (f64, f64) {
    v.chunks(2).fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]))
}

fn betas_from(subjects: &[SubjectKey], raw: &[f64]) -> BTreeMap<SubjectKey, GazeAngle> {
    subjects
        .iter()
        .zip(raw.chunks(2))
        .map(|(k, p)| (k.clone(), GazeAngle::new(p[0] * DEG_PER_UNIT, p[1] * DEG_PER_UNIT)))
        .collect()
}

fn state_from(
    model: &Model,
    subjects: &[SubjectKey],
    raw: &[f64],
    lambda: f64,
    mode: BiasMode,
) -> DecompositionState {
    let biases = match mode {
        BiasMode::Learned => betas_from(subjects, raw),
        BiasMode::Frozen => subjects.iter().map(|k| (k.clone(), GazeAngle::ZERO)).collect(),
        BiasMode::Absent => BTreeMap::new(),
    };
    DecompositionState {
        model: model.clone(),
        biases,
        lambda,
        decomposition: mode != BiasMode::Absent,
    }
}

/// Per-axis mean and SD of one subject's β across folds.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasStats {
    pub mean: GazeAngle,
    pub sd: GazeAngle,
    pub folds: usize,
}

/// One view (raw or aligned) of β across folds.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSpread {
    pub per_subject: BTreeMap<SubjectKey, BiasStats>,
    /// Root of the mean (over subjects) across-fold variance, per axis.
    pub intra_sd: GazeAngle,
    /// SD over subjects of the per-subject means, per axis.
    pub inter_sd: GazeAngle,
}

impl BiasSpread {
    /// Intra- over inter-subject variance per axis.
    pub fn variance_ratio(&self) -> GazeAngle {
        GazeAngle::new(
            (self.intra_sd.yaw / self.inter_sd.yaw).powi(2),
            (self.intra_sd.pitch / self.inter_sd.pitch).powi(2),
        )
    }
}

#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    /// β exactly as learned in each fold.
    pub raw: BiasSpread,
    /// β with each fold re-centred over all subjects. Subjects absent from a
    /// fold's training set enter the centring through their offset-calibrated
    /// bias under that fold's estimator.
    pub aligned: BiasSpread,
    pub folds: usize,
}

fn spread(samples: &BTreeMap<SubjectKey, Vec<GazeAngle>>) -> BiasSpread {
    let per_subject: BTreeMap<SubjectKey, BiasStats> = samples
        .iter()
        .map(|(k, v)| {
            let ys: Vec<f64> = v.iter().map(|b| b.yaw).collect();
            let ps: Vec<f64> = v.iter().map(|b| b.pitch).collect();
            let stats = BiasStats {
                mean: GazeAngle::new(stats::mean(&ys), stats::mean(&ps)),
                sd: GazeAngle::new(stats::std_dev(&ys), stats::std_dev(&ps)),
                folds: v.len(),
            };
            (k.clone(), stats)
        })
        .collect();
    let intra = |f: fn(&GazeAngle) -> f64| {
        let vars: Vec<f64> = per_subject.values().map(|s| f(&s.sd).powi(2)).collect();
        stats::mean(&vars).sqrt()
    };
    let inter = |f: fn(&GazeAngle) -> f64| {
        let means: Vec<f64> = per_subject.values().map(|s| f(&s.mean)).collect();
        stats::std_dev(&means)
    };
    BiasSpread {
        intra_sd: GazeAngle::new(intra(|g| g.yaw), intra(|g| g.pitch)),
        inter_sd: GazeAngle::new(inter(|g| g.yaw), inter(|g| g.pitch)),
        per_subject,
    }
}

/// Trains one model per leave-one-subject-out fold and summarises how stable
/// each subject's learned β is across the folds that include it.
pub fn train_biases_consistency(
    d: &Dataset,
    arch: Architecture,
    cfg: &TrainConfig,
    split: SplitOptions,
) -> Result<ConsistencyReport> {
    if !cfg.decomposition {
        return Err(Error::InvalidConfig(
            "bias consistency needs decomposition training".into(),
        ));
    }
    let subjects = d.subjects();
    if subjects.len() < 3 {
        return Err(Error::Insufficient("bias consistency needs at least three subjects".into()));
    }
    let folds = leave_one_subject_out_splits(d, split)?;
    let groups = d.subject_indices();
    let trained: Vec<TrainedDecomposition> = folds
        .par_iter()
        .map(|f| train(&f.train, arch, cfg))
        .collect::<Result<_>>()?;

    let mut raw: BTreeMap<SubjectKey, Vec<GazeAngle>> = BTreeMap::new();
    let mut aligned: BTreeMap<SubjectKey, Vec<GazeAngle>> = BTreeMap::new();
    for t in &trained {
        let mut full = BTreeMap::new();
        for (k, idx) in &groups {
            let b = match t.train_biases.get(k) {
                Some(b) => *b,
                None => {
                    let mut acc = GazeAngle::ZERO;
                    for &i in idx {
                        let s = &d.samples()[i];
                        acc += s.gaze - t.model.forward(&s.features)?;
                    }
                    acc / idx.len() as f64
                }
            };
            full.insert(k.clone(), b);
        }
        let centre = full.values().copied().sum::<GazeAngle>() / full.len() as f64;
        for (k, b) in &t.train_biases {
            raw.entry(k.clone()).or_default().push(*b);
            aligned.entry(k.clone()).or_default().push(full[k] - centre);
            debug_assert_eq!(*b, full[k]);
        }
    }
    Ok(ConsistencyReport {
        raw: spread(&raw),
        aligned: spread(&aligned),
        folds: trained.len(),
    })
}

/// Writes the β table: `subject_id,flipped,beta_yaw,beta_pitch`.
pub fn save_biases(biases: &BTreeMap<SubjectKey, GazeAngle>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("subject_id,flipped,beta_yaw,beta_pitch\n");
    for (k, b) in biases {
        out.push_str(&format!("{},{},{},{}\n", k.id, u8::from(k.flipped), b.yaw, b.pitch));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_biases(path: impl AsRef<Path>) -> Result<BTreeMap<SubjectKey, GazeAngle>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(err(n + 1, format!("expected 4 fields, found {}", f.len())));
        }
        let flipped = match f[1] {
            "0" => false,
            "1" => true,
            other => return Err(err(n + 1, format!("flipped must be 0 or 1, got {other:?}"))),
        };
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| err(n + 1, format!("{s:?}: {e}")))
        };
        out.insert(SubjectKey::new(f[0], flipped), GazeAngle::new(num(f[2])?, num(f[3])?));
    }
    Ok(out)
}
