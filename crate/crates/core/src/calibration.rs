//! Per-subject calibration: the offset rule `b̂ = mean(g - t̂)`, calibration-set
//! construction for single- and multiple-gaze-point protocols, and the
//! last-layer (FC) and linear-adaptation (LA) baselines.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;

use crate::dataset::{Dataset, Sample, SubjectKey};
use crate::error::{Error, Result};
use crate::estimator::{Model, VisualAxisEstimator};
use crate::geometry::{angular_error, GazeAngle};
use crate::rng::Rng;
use crate::stats;

pub const DEFAULT_RADIUS_DEG: f64 = 2.0;
pub const DEFAULT_FC_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Labeling {
    PerImage,
    /// Every image is labelled with one common target.
    SharedTarget(GazeAngle),
}

/// Calibration images of a single subject.
#[derive(Debug, Clone)]
pub struct CalibrationSet<'a> {
    pub subject: SubjectKey,
    pub samples: Vec<&'a Sample>,
    /// Positions of `samples` in the dataset they were drawn from.
    pub indices: Vec<usize>,
    pub labeling: Labeling,
}

impl<'a> CalibrationSet<'a> {
    /// Builds a set from dataset positions; all must belong to `subject`.
    pub fn from_indices(d: &'a Dataset, subject: &SubjectKey, indices: Vec<usize>, labeling: Labeling) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Insufficient("calibration set is empty".into()));
        }
        let samples: Vec<&Sample> = indices.iter().map(|&i| &d.samples()[i]).collect();
        if samples.iter().any(|s| s.subject != *subject) {
            return Err(Error::InvalidDataset(format!(
                "calibration set mixes subjects (expected {subject})"
            )));
        }
        Ok(Self {
            subject: subject.clone(),
            samples,
            indices,
            labeling,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Label used for the `i`-th image.
    pub fn label(&self, i: usize) -> GazeAngle {
        match self.labeling {
            Labeling::PerImage => self.samples[i].gaze,
            Labeling::SharedTarget(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Offset,
    Fc,
    La,
    None,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Offset => "offset",
            Method::Fc => "fc",
            Method::La => "la",
            Method::None => "none",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offset" => Ok(Method::Offset),
            "fc" => Ok(Method::Fc),
            "la" => Ok(Method::La),
            "none" => Ok(Method::None),
            other => Err(Error::InvalidConfig(format!(
                "unknown calibration method {other:?} (expected offset, fc, la or none)"
            ))),
        }
    }
}

/// Statistics of `label - t̂` over a calibration set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualStats {
    pub n: usize,
    pub mean: GazeAngle,
    pub sd: GazeAngle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOutcome {
    /// `b̂`; zero unless the method is an offset.
    pub bias_estimate: GazeAngle,
    pub method: Method,
    pub diagnostics: ResidualStats,
}

fn residual_stats(residuals: &[GazeAngle]) -> ResidualStats {
    let ys: Vec<f64> = residuals.iter().map(|r| r.yaw).collect();
    let ps: Vec<f64> = residuals.iter().map(|r| r.pitch).collect();
    ResidualStats {
        n: residuals.len(),
        mean: GazeAngle::new(stats::mean(&ys), stats::mean(&ps)),
        sd: GazeAngle::new(stats::std_dev(&ys), stats::std_dev(&ps)),
    }
}

fn residuals<E: VisualAxisEstimator + ?Sized>(model: &E, dc: &CalibrationSet) -> Result<Vec<GazeAngle>> {
    (0..dc.len())
        .map(|i| Ok(dc.label(i) - model.estimate(&dc.samples[i].features)?))
        .collect()
}

/// Offset calibration: `b̂ = (1/|D_c|) Σ (label - t̂(X))`.
pub fn estimate_bias_offset<E: VisualAxisEstimator + ?Sized>(model: &E, dc: &CalibrationSet) -> Result<CalibrationOutcome> {
    if dc.is_empty() {
        return Err(Error::Insufficient("calibration set is empty".into()));
    }
    let r = residuals(model, dc)?;
    let diagnostics = residual_stats(&r);
    Ok(CalibrationOutcome {
        bias_estimate: diagnostics.mean,
        method: Method::Offset,
        diagnostics,
    })
}

/// `ĝ = t̂(x) + b̂`.
pub fn predict<E: VisualAxisEstimator + ?Sized>(model: &E, bias: GazeAngle, x: &[f64]) -> Result<GazeAngle> {
    Ok(model.estimate(x)? + bias)
}

/// Single-gaze-point calibration set: `size` images drawn uniformly from the
/// subject's images whose gaze lies strictly within `radius` of `point`,
/// labelled with the mean of their gazes. `None` when too few qualify.
pub fn select_sgpc_set<'a>(
    test: &'a Dataset,
    subject: &SubjectKey,
    point: GazeAngle,
    size: usize,
    radius: f64,
    rng: &mut Rng,
) -> Result<Option<CalibrationSet<'a>>> {
    if size == 0 {
        return Err(Error::InvalidConfig("calibration set size must be at least 1".into()));
    }
    let candidates: Vec<usize> = test
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.subject == *subject && angular_error(point, s.gaze) < radius)
        .map(|(i, _)| i)
        .collect();
    Ok(sgpc_from_candidates(test, subject, &candidates, size, rng))
}

pub(crate) fn sgpc_from_candidates<'a>(
    test: &'a Dataset,
    subject: &SubjectKey,
    candidates: &[usize],
    size: usize,
    rng: &mut Rng,
) -> Option<CalibrationSet<'a>> {
    if candidates.len() < size {
        return None;
    }
    let mut picked: Vec<usize> = index::sample(rng, candidates.len(), size)
        .into_iter()
        .map(|j| candidates[j])
        .collect();
    picked.sort_unstable();
    let samples: Vec<&Sample> = picked.iter().map(|&i| &test.samples()[i]).collect();
    let target = samples.iter().map(|s| s.gaze).sum::<GazeAngle>() / size as f64;
    Some(CalibrationSet {
        subject: subject.clone(),
        samples,
        indices: picked,
        labeling: Labeling::SharedTarget(target),
    })
}

/// Multiple-gaze-point calibration set: `size` of the subject's images drawn
/// uniformly without replacement, each with its own label.
pub fn select_mgpc_set<'a>(
    test: &'a Dataset,
    subject: &SubjectKey,
    size: usize,
    rng: &mut Rng,
) -> Result<CalibrationSet<'a>> {
    let own: Vec<usize> = test
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.subject == *subject)
        .map(|(i, _)| i)
        .collect();
    mgpc_from_candidates(test, subject, &own, size, rng)
}

pub(crate) fn mgpc_from_candidates<'a>(
    test: &'a Dataset,
    subject: &SubjectKey,
    own: &[usize],
    size: usize,
    rng: &mut Rng,
) -> Result<CalibrationSet<'a>> {
    if size == 0 {
        return Err(Error::InvalidConfig("calibration set size must be at least 1".into()));
    }
    if own.len() < size {
        return Err(Error::Insufficient(format!(
            "subject {subject} has {} images, {size} requested",
            own.len()
        )));
    }
    let mut picked: Vec<usize> = index::sample(rng, own.len(), size)
        .into_iter()
        .map(|j| own[j])
        .collect();
    picked.sort_unstable();
    CalibrationSet::from_indices(test, subject, picked, Labeling::PerImage)
}

/// Offset fitted on all of the subject's images (the `E̲` bias).
pub fn lower_bound_bias<E: VisualAxisEstimator + ?Sized>(
    model: &E,
    test: &Dataset,
    subject: &SubjectKey,
) -> Result<CalibrationOutcome> {
    let own: Vec<usize> = test
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.subject == *subject)
        .map(|(i, _)| i)
        .collect();
    if own.is_empty() {
        return Err(Error::InvalidDataset(format!("subject {subject} not in dataset")));
    }
    let dc = CalibrationSet::from_indices(test, subject, own, Labeling::PerImage)?;
    estimate_bias_offset(model, &dc)
}

/// Refits the output stage on the calibration set by ridge least squares,
/// shrinking towards the current output stage. Everything before it is frozen.
pub fn calibrate_fc(model: &Model, dc: &CalibrationSet, ridge: f64) -> Result<Model> {
    if dc.is_empty() {
        return Err(Error::Insufficient("calibration set is empty".into()));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidConfig("ridge must be finite and nonnegative".into()));
    }
    let k = model.arch.stage_dim();
    let p = k + 1;
    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut aty = DMatrix::<f64>::zeros(p, 2);
    let mut row = vec![0.0; p];
    for i in 0..dc.len() {
        let h = model.last_stage_features(&dc.samples[i].features)?;
        row[..k].copy_from_slice(&h);
        row[k] = 1.0;
        let y = dc.label(i);
        for a in 0..p {
            for b in 0..p {
                ata[(a, b)] += row[a] * row[b];
            }
            aty[(a, 0)] += row[a] * y.yaw;
            aty[(a, 1)] += row[a] * y.pitch;
        }
    }
    let (w0, c0) = model.output_stage_deg();
    for a in 0..p {
        ata[(a, a)] += ridge;
        for o in 0..2 {
            let prior = if a < k { w0[o][a] } else { c0[o] };
            aty[(a, o)] += ridge * prior;
        }
    }
    let sol = ata.cholesky().ok_or(Error::RankDeficient)?.solve(&aty);
    let wy: Vec<f64> = (0..k).map(|j| sol[(j, 0)]).collect();
    let wp: Vec<f64> = (0..k).map(|j| sol[(j, 1)]).collect();
    model.with_output_stage([&wy, &wp], [sol[(k, 0)], sol[(k, 1)]])
}

/// `g ≈ A t̂ + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineCorrection {
    pub a: [[f64; 2]; 2],
    pub c: GazeAngle,
}

impl AffineCorrection {
    pub fn apply(&self, t: GazeAngle) -> GazeAngle {
        GazeAngle::new(
            self.a[0][0] * t.yaw + self.a[0][1] * t.pitch + self.c.yaw,
            self.a[1][0] * t.yaw + self.a[1][1] * t.pitch + self.c.pitch,
        )
    }
}

/// Least-squares affine map from estimator outputs to labels. Needs three
/// calibration images whose estimates are not collinear.
pub fn calibrate_la<E: VisualAxisEstimator + ?Sized>(model: &E, dc: &CalibrationSet) -> Result<AffineCorrection> {
    let outputs: Vec<GazeAngle> = dc
        .samples
        .iter()
        .map(|s| model.estimate(&s.features))
        .collect::<Result<_>>()?;
    let labels: Vec<GazeAngle> = (0..dc.len()).map(|i| dc.label(i)).collect();
    fit_affine(&outputs, &labels)
}

pub(crate) fn fit_affine(outputs: &[GazeAngle], labels: &[GazeAngle]) -> Result<AffineCorrection> {
    if outputs.len() < 3 {
        return Err(Error::NotApplicable(format!(
            "linear adaptation needs at least 3 calibration images, got {}",
            outputs.len()
        )));
    }
    // centred 2x2 scatter: singular iff the outputs are collinear
    let n = outputs.len() as f64;
    let mt = outputs.iter().copied().sum::<GazeAngle>() / n;
    let ml = labels.iter().copied().sum::<GazeAngle>() / n;
    let mut s = DMatrix::<f64>::zeros(2, 2);
    let mut sy = DMatrix::<f64>::zeros(2, 2);
    for (t, g) in outputs.iter().zip(labels) {
        let dt = (*t - mt).to_array();
        let dg = (*g - ml).to_array();
        for a in 0..2 {
            for b in 0..2 {
                s[(a, b)] += dt[a] * dt[b];
                sy[(a, b)] += dt[a] * dg[b];
            }
        }
    }
    let eig = SymmetricEigen::new(s.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= 1e-10 * max {
        return Err(Error::NotApplicable(
            "calibration estimates are collinear; linear adaptation undefined".into(),
        ));
    }
    let sol = s.cholesky().ok_or(Error::RankDeficient)?.solve(&sy);
    // sol is 2x2 with sol[(input, output)]
    let a = [[sol[(0, 0)], sol[(1, 0)]], [sol[(0, 1)], sol[(1, 1)]]];
    let c = GazeAngle::new(
        ml.yaw - a[0][0] * mt.yaw - a[0][1] * mt.pitch,
        ml.pitch - a[1][0] * mt.yaw - a[1][1] * mt.pitch,
    );
    Ok(AffineCorrection { a, c })
}

/// A fitted per-subject correction, ready to predict.
#[derive(Debug, Clone)]
pub enum Correction {
    Offset(GazeAngle),
    Fc(Model),
    La(AffineCorrection),
}

impl Correction {
    pub fn predict<E: VisualAxisEstimator + ?Sized>(&self, model: &E, x: &[f64]) -> Result<GazeAngle> {
        match self {
            Correction::Offset(b) => predict(model, *b, x),
            Correction::Fc(m) => m.forward(x),
            Correction::La(a) => Ok(a.apply(model.estimate(x)?)),
        }
    }

    /// Prediction given an already computed `t̂(x)`; `None` for FC, whose
    /// output does not factor through `t̂`.
    pub fn apply_to_estimate(&self, t: GazeAngle) -> Option<GazeAngle> {
        match self {
            Correction::Offset(b) => Some(t + *b),
            Correction::La(a) => Some(a.apply(t)),
            Correction::Fc(_) => None,
        }
    }
}

/// Runs one calibration method. `Method::None` yields a zero offset. FC needs
/// a [`Model`] and is not applicable to other estimators.
pub fn calibrate<E: VisualAxisEstimator + ?Sized>(
    model: &E,
    dc: &CalibrationSet,
    method: Method,
    fc_ridge: f64,
) -> Result<(Correction, CalibrationOutcome)> {
    let r = residuals(model, dc)?;
    let diagnostics = residual_stats(&r);
    let outcome = |bias_estimate| CalibrationOutcome {
        bias_estimate,
        method,
        diagnostics,
    };
    match method {
        Method::None => Ok((Correction::Offset(GazeAngle::ZERO), outcome(GazeAngle::ZERO))),
        Method::Offset => {
            let b = diagnostics.mean;
            Ok((Correction::Offset(b), outcome(b)))
        }
        Method::La => Ok((Correction::La(calibrate_la(model, dc)?), outcome(GazeAngle::ZERO))),
        Method::Fc => {
            let m = model.as_model().ok_or_else(|| {
                Error::NotApplicable("fc calibration needs a parametric model".into())
            })?;
            Ok((Correction::Fc(calibrate_fc(m, dc, fc_ridge)?), outcome(GazeAngle::ZERO)))
        }
    }
}
