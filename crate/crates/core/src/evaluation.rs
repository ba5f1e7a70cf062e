//! Error metrics and the Monte-Carlo calibration protocols: per-subject
//! evaluation, the bias/variance split of estimator residuals, error versus
//! calibration-set size, calibration-location grids and the decomposition
//! ablation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::calibration::{
    calibrate, mgpc_from_candidates, sgpc_from_candidates, CalibrationSet, Correction, Method,
    DEFAULT_FC_RIDGE, DEFAULT_RADIUS_DEG,
};
use crate::dataset::{leave_one_subject_out_splits, Dataset, SplitOptions, SubjectKey};
use crate::error::{Error, Result};
use crate::estimator::{Architecture, VisualAxisEstimator};
use crate::geometry::{angle_between, angular_error, to_unit_vector, GazeAngle};
use crate::rng;
use crate::stats;
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectEval {
    pub n: usize,
    pub mean_error: f64,
    /// Mean of `g - ĝ` per axis.
    pub residual_mean: GazeAngle,
    pub residual_sd: GazeAngle,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Mean angular error over all samples with the supplied biases.
    pub mean_error: f64,
    pub per_subject: BTreeMap<SubjectKey, SubjectEval>,
    /// `Ē`: mean error with zero bias.
    pub calibration_free_error: f64,
    /// `E̲`: mean error with each subject's bias fitted on all its samples.
    pub lower_bound_error: f64,
    pub trials: usize,
}

/// `t̂` for every sample of `d`.
pub fn estimates<E: VisualAxisEstimator + ?Sized>(model: &E, d: &Dataset) -> Result<Vec<GazeAngle>> {
    d.samples().iter().map(|s| model.estimate(&s.features)).collect()
}

fn mean_gaze(v: impl IntoIterator<Item = GazeAngle>) -> GazeAngle {
    let mut n = 0usize;
    let mut acc = GazeAngle::ZERO;
    for g in v {
        acc += g;
        n += 1;
    }
    acc / n as f64
}

/// Per-sample errors of `t̂ + b(subject)`, averaged overall and per subject.
pub fn evaluate<E: VisualAxisEstimator + ?Sized>(
    model: &E,
    biases: &BTreeMap<SubjectKey, GazeAngle>,
    test: &Dataset,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Insufficient("empty test set".into()));
    }
    let t_hat = estimates(model, test)?;
    let samples = test.samples();
    let groups = test.subject_indices();
    let mut per_subject = BTreeMap::new();
    let (mut total, mut free, mut lower) = (0.0, 0.0, 0.0);
    for (k, idx) in &groups {
        let b = *biases
            .get(k)
            .ok_or_else(|| Error::MissingBias(k.to_string()))?;
        let lb = mean_gaze(idx.iter().map(|&i| samples[i].gaze - t_hat[i]));
        let mut errs = Vec::with_capacity(idx.len());
        let mut ry = Vec::with_capacity(idx.len());
        let mut rp = Vec::with_capacity(idx.len());
        for &i in idx {
            let g = samples[i].gaze;
            let e = angular_error(t_hat[i] + b, g);
            total += e;
            free += angular_error(t_hat[i], g);
            lower += angular_error(t_hat[i] + lb, g);
            errs.push(e);
            let r = g - t_hat[i] - b;
            ry.push(r.yaw);
            rp.push(r.pitch);
        }
        per_subject.insert(
            k.clone(),
            SubjectEval {
                n: idx.len(),
                mean_error: stats::mean(&errs),
                residual_mean: GazeAngle::new(stats::mean(&ry), stats::mean(&rp)),
                residual_sd: GazeAngle::new(stats::std_dev(&ry), stats::std_dev(&rp)),
            },
        );
    }
    let n = test.len() as f64;
    Ok(EvalReport {
        mean_error: total / n,
        per_subject,
        calibration_free_error: free / n,
        lower_bound_error: lower / n,
        trials: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectResidual {
    pub n: usize,
    /// Mean of `g - t̂`.
    pub mean: GazeAngle,
    /// Per-axis sample variance of `g - t̂`.
    pub variance: GazeAngle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasVarianceReport {
    /// Mean over subjects of `|mean residual|²` (deg²).
    pub mean_squared_bias: f64,
    /// Mean over subjects of the residual variance summed over axes (deg²).
    pub mean_intra_subject_variance: f64,
    pub squared_bias_per_axis: GazeAngle,
    pub intra_variance_per_axis: GazeAngle,
    pub per_subject: BTreeMap<SubjectKey, SubjectResidual>,
    /// Subjects with fewer than two samples, left out of the averages.
    pub excluded: Vec<SubjectKey>,
}

/// Splits estimator residuals into the between-subject and within-subject parts.
pub fn bias_variance_decomposition<E: VisualAxisEstimator + ?Sized>(
    model: &E,
    test: &Dataset,
) -> Result<BiasVarianceReport> {
    let t_hat = estimates(model, test)?;
    let samples = test.samples();
    let mut per_subject = BTreeMap::new();
    let mut excluded = Vec::new();
    for (k, idx) in test.subject_indices() {
        if idx.len() < 2 {
            excluded.push(k);
            continue;
        }
        let ry: Vec<f64> = idx.iter().map(|&i| samples[i].gaze.yaw - t_hat[i].yaw).collect();
        let rp: Vec<f64> = idx.iter().map(|&i| samples[i].gaze.pitch - t_hat[i].pitch).collect();
        per_subject.insert(
            k,
            SubjectResidual {
                n: idx.len(),
                mean: GazeAngle::new(stats::mean(&ry), stats::mean(&rp)),
                variance: GazeAngle::new(stats::variance(&ry), stats::variance(&rp)),
            },
        );
    }
    if per_subject.is_empty() {
        return Err(Error::Insufficient(
            "no subject has at least two samples".into(),
        ));
    }
    let m = per_subject.len() as f64;
    let sq = per_subject
        .values()
        .map(|s| GazeAngle::new(s.mean.yaw.powi(2), s.mean.pitch.powi(2)))
        .sum::<GazeAngle>()
        / m;
    let var = per_subject.values().map(|s| s.variance).sum::<GazeAngle>() / m;
    Ok(BiasVarianceReport {
        mean_squared_bias: sq.yaw + sq.pitch,
        mean_intra_subject_variance: var.yaw + var.pitch,
        squared_bias_per_axis: sq,
        intra_variance_per_axis: var,
        per_subject,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Single gaze point: images near one random target.
    Sgpc,
    /// Multiple gaze points: images drawn from the whole gaze range.
    Mgpc,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Sgpc => "sgpc",
            Protocol::Mgpc => "mgpc",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgpc" => Ok(Protocol::Sgpc),
            "mgpc" => Ok(Protocol::Mgpc),
            other => Err(Error::InvalidConfig(format!(
                "unknown protocol {other:?} (expected sgpc or mgpc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialConfig {
    pub protocol: Protocol,
    pub dc_sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub radius: f64,
    pub method: Method,
    pub fc_ridge: f64,
    /// Random calibration points tried per subject before it is skipped.
    pub max_point_attempts: usize,
    /// Box `(low, high)` that SGPC points are drawn from. `None` uses each
    /// subject's label bounding box.
    pub point_region: Option<(GazeAngle, GazeAngle)>,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Sgpc,
            dc_sizes: vec![1, 2, 4, 8, 16],
            trials: 5000,
            seed: 1,
            radius: DEFAULT_RADIUS_DEG,
            method: Method::Offset,
            fc_ridge: DEFAULT_FC_RIDGE,
            max_point_attempts: 100,
            point_region: None,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.dc_sizes.is_empty() || self.dc_sizes.contains(&0) {
            return bad("calibration sizes must be nonempty and positive");
        }
        if self.trials == 0 {
            return bad("trials must be positive");
        }
        if !(self.radius > 0.0) {
            return bad("radius must be positive");
        }
        if self.max_point_attempts == 0 {
            return bad("max_point_attempts must be positive");
        }
        if let Some((lo, hi)) = self.point_region {
            if !(lo.is_finite() && hi.is_finite() && lo.yaw < hi.yaw && lo.pitch < hi.pitch) {
                return bad("point region must be a non-degenerate box");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialStatus {
    Calibrated,
    /// No feasible calibration set (no qualifying point, or too few images).
    Skipped,
    /// The method cannot be applied to this calibration set.
    NotApplicable,
}

impl fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialStatus::Calibrated => "ok",
            TrialStatus::Skipped => "skipped",
            TrialStatus::NotApplicable => "NA",
        })
    }
}

/// Outcome of calibrating one subject in one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub dc_size: usize,
    pub trial: usize,
    pub subject: SubjectKey,
    pub status: TrialStatus,
    /// SGPC target point.
    pub point: Option<GazeAngle>,
    pub bias_estimate: GazeAngle,
    /// Mean error on the subject's images outside the calibration set.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub dc_size: usize,
    /// Mean over trials of the per-trial mean (over subjects) error.
    pub mean_error: Option<f64>,
    pub std_error: Option<f64>,
    /// Trials with at least one calibrated subject.
    pub trials: usize,
    pub skipped: usize,
    pub not_applicable: usize,
    /// Mean calibrated error per subject over its calibrated trials.
    pub per_subject: BTreeMap<SubjectKey, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialCurve {
    pub points: Vec<CurvePoint>,
    /// Subject-averaged `Ē` and `E̲` on the same test data.
    pub calibration_free_error: f64,
    pub lower_bound_error: f64,
    pub per_subject_free: BTreeMap<SubjectKey, f64>,
    pub per_subject_lower: BTreeMap<SubjectKey, f64>,
}

/// Test data and cached estimates, grouped by subject.
struct Prepared<'a, E: ?Sized> {
    model: &'a E,
    test: &'a Dataset,
    t_hat: Vec<GazeAngle>,
    subjects: Vec<(SubjectKey, Vec<usize>)>,
    /// Per subject, (pitch, index) sorted by pitch.
    by_pitch: Vec<Vec<(f64, usize)>>,
    /// Unit vector of every label.
    label_dirs: Vec<[f64; 3]>,
}

impl<'a, E: VisualAxisEstimator + ?Sized> Prepared<'a, E> {
    fn new(model: &'a E, test: &'a Dataset) -> Result<Self> {
        if test.is_empty() {
            return Err(Error::Insufficient("empty test set".into()));
        }
        let subjects: Vec<(SubjectKey, Vec<usize>)> = test.subject_indices().into_iter().collect();
        let by_pitch = subjects
            .iter()
            .map(|(_, own)| {
                let mut v: Vec<(f64, usize)> = own.iter().map(|&i| (test.samples()[i].gaze.pitch, i)).collect();
                v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                v
            })
            .collect();
        Ok(Self {
            model,
            test,
            t_hat: estimates(model, test)?,
            subjects,
            by_pitch,
            label_dirs: test.samples().iter().map(|s| to_unit_vector(s.gaze)).collect(),
        })
    }

    fn bounds(&self, own: &[usize]) -> (GazeAngle, GazeAngle) {
        let s = self.test.samples();
        let mut lo = GazeAngle::new(f64::INFINITY, f64::INFINITY);
        let mut hi = GazeAngle::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &i in own {
            let g = s[i].gaze;
            lo = GazeAngle::new(lo.yaw.min(g.yaw), lo.pitch.min(g.pitch));
            hi = GazeAngle::new(hi.yaw.max(g.yaw), hi.pitch.max(g.pitch));
        }
        (lo, hi)
    }

    /// Indices (ascending) of subject `j`'s images strictly within `radius` of `point`.
    fn candidates(&self, j: usize, point: GazeAngle, radius: f64) -> Vec<usize> {
        let u = to_unit_vector(point);
        let cos_r = radius.min(180.0).to_radians().cos();
        let sorted = &self.by_pitch[j];
        // great-circle distance is at least the pitch difference
        let start = sorted.partition_point(|(p, _)| *p <= point.pitch - radius);
        let mut out: Vec<usize> = sorted[start..]
            .iter()
            .take_while(|(p, _)| *p < point.pitch + radius)
            .map(|&(_, i)| i)
            .filter(|&i| {
                let v = &self.label_dirs[i];
                let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
                if dot < cos_r - 1e-9 {
                    false
                } else if dot > cos_r + 1e-9 {
                    true
                } else {
                    angle_between(&u, v) < radius
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    fn mean_error_with(&self, own: &[usize], f: impl Fn(GazeAngle) -> GazeAngle) -> f64 {
        let sum: f64 = own
            .iter()
            .map(|&i| angle_between(&to_unit_vector(f(self.t_hat[i])), &self.label_dirs[i]))
            .sum();
        sum / own.len() as f64
    }

    fn lower_bias(&self, own: &[usize]) -> GazeAngle {
        let s = self.test.samples();
        mean_gaze(own.iter().map(|&i| s[i].gaze - self.t_hat[i]))
    }

    /// Mean error of a correction on `own` minus the calibration images
    /// (on the calibration images themselves when nothing else remains).
    fn held_out_error(&self, own: &[usize], dc: &[usize], c: &Correction) -> Result<f64> {
        let rest: Vec<usize> = own.iter().copied().filter(|i| dc.binary_search(i).is_err()).collect();
        let eval = if rest.is_empty() { dc } else { &rest[..] };
        let s = self.test.samples();
        let mut sum = 0.0;
        for &i in eval {
            let p = match c.apply_to_estimate(self.t_hat[i]) {
                Some(p) => p,
                None => c.predict(self.model, &s[i].features)?,
            };
            sum += angle_between(&to_unit_vector(p), &self.label_dirs[i]);
        }
        Ok(sum / eval.len() as f64)
    }

    fn calibrate_once(
        &self,
        cfg: &TrialConfig,
        dc_size: usize,
        trial: usize,
        subject_index: usize,
        rng: &mut rng::Rng,
    ) -> Result<TrialRecord> {
        let (key, own) = &self.subjects[subject_index];
        let mut record = TrialRecord {
            dc_size,
            trial,
            subject: key.clone(),
            status: TrialStatus::Skipped,
            point: None,
            bias_estimate: GazeAngle::ZERO,
            error: None,
        };
        let dc: Option<CalibrationSet> = match cfg.protocol {
            Protocol::Mgpc => {
                if own.len() < dc_size {
                    None
                } else {
                    Some(mgpc_from_candidates(self.test, key, own, dc_size, rng)?)
                }
            }
            Protocol::Sgpc => {
                let (lo, hi) = cfg.point_region.unwrap_or_else(|| self.bounds(own));
                let mut found = None;
                for _ in 0..cfg.max_point_attempts {
                    let point = GazeAngle::new(
                        lo.yaw + (hi.yaw - lo.yaw) * rng.random::<f64>(),
                        lo.pitch + (hi.pitch - lo.pitch) * rng.random::<f64>(),
                    );
                    let cands = self.candidates(subject_index, point, cfg.radius);
                    if let Some(set) = sgpc_from_candidates(self.test, key, &cands, dc_size, rng) {
                        record.point = Some(point);
                        found = Some(set);
                        break;
                    }
                }
                found
            }
        };
        let Some(dc) = dc else {
            return Ok(record);
        };
        match calibrate(self.model, &dc, cfg.method, cfg.fc_ridge) {
            Ok((correction, outcome)) => {
                record.status = TrialStatus::Calibrated;
                record.bias_estimate = outcome.bias_estimate;
                record.error = Some(self.held_out_error(own, &dc.indices, &correction)?);
            }
            Err(Error::NotApplicable(_)) => record.status = TrialStatus::NotApplicable,
            Err(e) => return Err(e),
        }
        Ok(record)
    }
}

/// Every (size, trial, subject) calibration outcome, in that order.
pub fn calibration_trial_records<E: VisualAxisEstimator + ?Sized>(
    model: &E,
    test: &Dataset,
    cfg: &TrialConfig,
) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    let prep = Prepared::new(model, test)?;
    trial_records(&prep, cfg)
}

fn trial_records<E: VisualAxisEstimator + ?Sized>(prep: &Prepared<E>, cfg: &TrialConfig) -> Result<Vec<TrialRecord>> {
    let items: Vec<(usize, usize)> = (0..cfg.dc_sizes.len())
        .flat_map(|s| (0..cfg.trials).map(move |t| (s, t)))
        .collect();
    let per_item: Vec<Vec<TrialRecord>> = items
        .par_iter()
        .map(|&(s, t)| {
            let mut rng = rng::stream(cfg.seed, &[s as u64, t as u64]);
            (0..prep.subjects.len())
                .map(|j| prep.calibrate_once(cfg, cfg.dc_sizes[s], t, j, &mut rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_item.into_iter().flatten().collect())
}

/// Mean post-calibration error as a function of calibration-set size.
pub fn run_calibration_trials<E: VisualAxisEstimator + ?Sized>(
    model: &E,
    test: &Dataset,
    cfg: &TrialConfig,
) -> Result<TrialCurve> {
    cfg.validate()?;
    let prep = Prepared::new(model, test)?;
    let records = trial_records(&prep, cfg)?;
    let per_subject_free: BTreeMap<SubjectKey, f64> = prep
        .subjects
        .iter()
        .map(|(k, own)| (k.clone(), prep.mean_error_with(own, |t| t)))
        .collect();
    let per_subject_lower: BTreeMap<SubjectKey, f64> = prep
        .subjects
        .iter()
        .map(|(k, own)| {
            let b = prep.lower_bias(own);
            (k.clone(), prep.mean_error_with(own, |t| t + b))
        })
        .collect();
    let points = cfg
        .dc_sizes
        .iter()
        .map(|&size| summarise(size, records.iter().filter(|r| r.dc_size == size)))
        .collect();
    Ok(TrialCurve {
        points,
        calibration_free_error: stats::mean(&per_subject_free.values().copied().collect::<Vec<_>>()),
        lower_bound_error: stats::mean(&per_subject_lower.values().copied().collect::<Vec<_>>()),
        per_subject_free,
        per_subject_lower,
    })
}

fn summarise<'a>(dc_size: usize, records: impl Iterator<Item = &'a TrialRecord>) -> CurvePoint {
    let mut by_trial: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut by_subject: BTreeMap<SubjectKey, Vec<f64>> = BTreeMap::new();
    let (mut skipped, mut not_applicable) = (0, 0);
    for r in records {
        match r.status {
            TrialStatus::Calibrated => {
                let e = r.error.unwrap_or(f64::NAN);
                by_trial.entry(r.trial).or_default().push(e);
                by_subject.entry(r.subject.clone()).or_default().push(e);
            }
            TrialStatus::Skipped => skipped += 1,
            TrialStatus::NotApplicable => not_applicable += 1,
        }
    }
    let trial_means: Vec<f64> = by_trial.values().map(|v| stats::mean(v)).collect();
    let n = trial_means.len();
    CurvePoint {
        dc_size,
        mean_error: (n > 0).then(|| stats::mean(&trial_means)),
        std_error: (n > 1).then(|| stats::std_error(&trial_means)),
        trials: n,
        skipped,
        not_applicable,
        per_subject: by_subject.into_iter().map(|(k, v)| (k, stats::mean(&v))).collect(),
    }
}

/// Count and share of subjects whose calibrated error is strictly below their
/// calibration-free error.
pub fn benefit_fraction(
    calibrated: &BTreeMap<SubjectKey, f64>,
    calibration_free: &BTreeMap<SubjectKey, f64>,
) -> Result<(f64, usize)> {
    if calibrated.is_empty() {
        return Err(Error::Insufficient("no subjects to compare".into()));
    }
    if !calibrated.keys().eq(calibration_free.keys()) {
        return Err(Error::InvalidDataset(
            "calibrated and calibration-free errors cover different subjects".into(),
        ));
    }
    let count = calibrated
        .iter()
        .filter(|(k, e)| **e < calibration_free[*k])
        .count();
    Ok((count as f64 / calibrated.len() as f64, count))
}

/// Calibration-location grid: square regions tiled with calibration points
/// every `step` degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub yaw_extent: (f64, f64),
    pub pitch_extent: (f64, f64),
    pub step: f64,
    pub region: f64,
    pub dc_size: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            yaw_extent: (-20.0, 20.0),
            pitch_extent: (-15.0, 15.0),
            step: 0.5,
            region: 5.0,
            dc_size: 9,
            radius: DEFAULT_RADIUS_DEG,
            seed: 1,
        }
    }
}

fn whole_multiple(len: f64, unit: f64) -> Option<usize> {
    let q = len / unit;
    let r = q.round();
    ((q - r).abs() < 1e-9 && r >= 1.0).then_some(r as usize)
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.step > 0.0) || !(self.region > 0.0) {
            return bad("grid step and region must be positive".into());
        }
        if whole_multiple(self.region, self.step).is_none() {
            return bad(format!("region {} is not a multiple of step {}", self.region, self.step));
        }
        for (name, (lo, hi)) in [("yaw", self.yaw_extent), ("pitch", self.pitch_extent)] {
            if whole_multiple(hi - lo, self.region).is_none() {
                return bad(format!("{name} extent {lo}..{hi} is not a multiple of region {}", self.region));
            }
        }
        if self.dc_size == 0 {
            return bad("grid dc_size must be at least 1".into());
        }
        if !(self.radius > 0.0) {
            return bad("grid radius must be positive".into());
        }
        Ok(())
    }

    pub fn regions(&self) -> (usize, usize) {
        (
            whole_multiple(self.yaw_extent.1 - self.yaw_extent.0, self.region).unwrap_or(0),
            whole_multiple(self.pitch_extent.1 - self.pitch_extent.0, self.region).unwrap_or(0),
        )
    }

    pub fn points_per_side(&self) -> usize {
        whole_multiple(self.region, self.step).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionCell {
    pub yaw: (f64, f64),
    pub pitch: (f64, f64),
    /// Mean over subjects of each subject's mean over feasible points.
    pub mean_error: Option<f64>,
    /// Standard error over subjects.
    pub std_error: Option<f64>,
    /// Subjects whose mean calibrated error beats their calibration-free error.
    pub benefit_count: Option<usize>,
    /// Subjects with at least one feasible point.
    pub subjects: usize,
    pub feasible_points: usize,
    pub infeasible_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub spec: GridSpec,
    pub n_yaw: usize,
    pub n_pitch: usize,
    /// Row-major with pitch rows ascending, yaw columns ascending.
    pub cells: Vec<RegionCell>,
    pub calibration_free_error: f64,
    pub subjects: usize,
}

impl GridMap {
    pub fn cell(&self, yaw_index: usize, pitch_index: usize) -> &RegionCell {
        &self.cells[pitch_index * self.n_yaw + yaw_index]
    }
}

/// SGPC offset calibration at every grid point for every subject, summarised
/// per region.
pub fn grid_robustness_map<E: VisualAxisEstimator + ?Sized>(
    model: &E,
    test: &Dataset,
    spec: &GridSpec,
) -> Result<GridMap> {
    spec.validate()?;
    let prep = Prepared::new(model, test)?;
    let (n_yaw, n_pitch) = spec.regions();
    let side = spec.points_per_side();
    let free: Vec<f64> = prep
        .subjects
        .iter()
        .map(|(_, own)| prep.mean_error_with(own, |t| t))
        .collect();

    let n_sub = prep.subjects.len();
    let items: Vec<(usize, usize)> = (0..n_yaw * n_pitch)
        .flat_map(|r| (0..n_sub).map(move |j| (r, j)))
        .collect();
    // (sum of errors, feasible, infeasible) per (region, subject)
    let results: Vec<(f64, usize, usize)> = items
        .par_iter()
        .map(|&(r, j)| {
            let (ry, rp) = (r % n_yaw, r / n_yaw);
            let yaw0 = spec.yaw_extent.0 + ry as f64 * spec.region;
            let pitch0 = spec.pitch_extent.0 + rp as f64 * spec.region;
            let (key, own) = &prep.subjects[j];
            let mut acc = (0.0, 0, 0);
            for p in 0..side * side {
                let point = GazeAngle::new(
                    yaw0 + ((p % side) as f64 + 0.5) * spec.step,
                    pitch0 + ((p / side) as f64 + 0.5) * spec.step,
                );
                let mut rng = rng::stream(spec.seed, &[r as u64, j as u64, p as u64]);
                let cands = prep.candidates(j, point, spec.radius);
                match sgpc_from_candidates(prep.test, key, &cands, spec.dc_size, &mut rng) {
                    Some(dc) => {
                        let (c, _) = calibrate(prep.model, &dc, Method::Offset, DEFAULT_FC_RIDGE)?;
                        acc.0 += prep.held_out_error(own, &dc.indices, &c)?;
                        acc.1 += 1;
                    }
                    None => acc.2 += 1,
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::with_capacity(n_yaw * n_pitch);
    for r in 0..n_yaw * n_pitch {
        let (ry, rp) = (r % n_yaw, r / n_yaw);
        let yaw0 = spec.yaw_extent.0 + ry as f64 * spec.region;
        let pitch0 = spec.pitch_extent.0 + rp as f64 * spec.region;
        let mut means = Vec::new();
        let mut benefit = 0;
        let (mut feasible, mut infeasible) = (0, 0);
        for j in 0..n_sub {
            let (sum, f, i) = results[r * n_sub + j];
            feasible += f;
            infeasible += i;
            if f > 0 {
                let m = sum / f as f64;
                if m < free[j] {
                    benefit += 1;
                }
                means.push(m);
            }
        }
        let n = means.len();
        cells.push(RegionCell {
            yaw: (yaw0, yaw0 + spec.region),
            pitch: (pitch0, pitch0 + spec.region),
            mean_error: (n > 0).then(|| stats::mean(&means)),
            std_error: (n > 1).then(|| stats::std_error(&means)),
            benefit_count: (n > 0).then_some(benefit),
            subjects: n,
            feasible_points: feasible,
            infeasible_points: infeasible,
        });
    }
    Ok(GridMap {
        spec: spec.clone(),
        n_yaw,
        n_pitch,
        cells,
        calibration_free_error: stats::mean(&free),
        subjects: n_sub,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub dc_size: usize,
    pub trials: usize,
    pub radius: f64,
    pub seed: u64,
    pub split: SplitOptions,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            dc_size: 9,
            trials: 200,
            radius: DEFAULT_RADIUS_DEG,
            seed: 1,
            split: SplitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantSummary {
    pub calibration_free_error: f64,
    pub sgpc_error: f64,
    pub lower_bound_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub decomposition: VariantSummary,
    pub no_decomposition: VariantSummary,
    /// Per held-out subject: (decomposition, no-decomposition).
    pub per_fold: Vec<(SubjectKey, VariantSummary, VariantSummary)>,
}

/// Trains with and without decomposition on the same leave-one-subject-out
/// folds and seeds, and compares the held-out errors.
pub fn ablation_compare(
    d: &Dataset,
    arch: Architecture,
    cfg: &TrainConfig,
    ab: &AblationConfig,
) -> Result<AblationReport> {
    if d.subjects().len() < 3 {
        return Err(Error::Insufficient("ablation needs at least three subjects".into()));
    }
    let folds = leave_one_subject_out_splits(d, ab.split)?;
    let trial_cfg = TrialConfig {
        protocol: Protocol::Sgpc,
        dc_sizes: vec![ab.dc_size],
        trials: ab.trials,
        seed: ab.seed,
        radius: ab.radius,
        ..TrialConfig::default()
    };
    let variant = |fold: &crate::dataset::Fold, decomposition: bool| -> Result<VariantSummary> {
        let cfg = TrainConfig {
            decomposition,
            ..cfg.clone()
        };
        let t = train(&fold.train, arch, &cfg)?;
        let curve = run_calibration_trials(&t.model, &fold.test, &trial_cfg)?;
        Ok(VariantSummary {
            calibration_free_error: curve.calibration_free_error,
            sgpc_error: curve.points[0].mean_error.unwrap_or(f64::NAN),
            lower_bound_error: curve.lower_bound_error,
        })
    };
    let per_fold: Vec<(SubjectKey, VariantSummary, VariantSummary)> = folds
        .par_iter()
        .map(|f| Ok((f.held_out.clone(), variant(f, true)?, variant(f, false)?)))
        .collect::<Result<_>>()?;
    let avg = |pick: fn(&(SubjectKey, VariantSummary, VariantSummary)) -> VariantSummary| {
        let v: Vec<VariantSummary> = per_fold.iter().map(pick).collect();
        let m = |f: fn(&VariantSummary) -> f64| stats::mean(&v.iter().map(f).collect::<Vec<_>>());
        VariantSummary {
            calibration_free_error: m(|s| s.calibration_free_error),
            sgpc_error: m(|s| s.sgpc_error),
            lower_bound_error: m(|s| s.lower_bound_error),
        }
    };
    Ok(AblationReport {
        decomposition: avg(|f| f.1),
        no_decomposition: avg(|f| f.2),
        per_fold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use crate::estimator::Model;
    use crate::synthworld::{flip_dataset, World, WorldConfig};
    use approx::assert_abs_diff_eq;

    /// Estimator returning the first two features as (yaw, pitch).
    struct Direct;

    impl VisualAxisEstimator for Direct {
        fn input_dim(&self) -> usize {
            2
        }
        fn estimate(&self, x: &[f64]) -> Result<GazeAngle> {
            Ok(GazeAngle::new(x[0], x[1]))
        }
    }

    fn key(id: &str) -> SubjectKey {
        SubjectKey::new(id, false)
    }

    fn dataset(rows: &[(&str, [f64; 2], GazeAngle)]) -> Dataset {
        let samples = rows
            .iter()
            .map(|(id, x, g)| Sample {
                subject: key(id),
                features: x.to_vec(),
                gaze: *g,
                latent_visual_axis: None,
            })
            .collect();
        Dataset::new(2, samples).unwrap()
    }

    fn zero_biases(d: &Dataset) -> BTreeMap<SubjectKey, GazeAngle> {
        d.subjects().into_iter().map(|k| (k, GazeAngle::ZERO)).collect()
    }

    #[test]
    fn perfect_predictions_have_zero_error() {
        let d = dataset(&[("a", [1.0, 2.0], GazeAngle::new(1.0, 2.0)), ("b", [-5.0, 3.0], GazeAngle::new(-5.0, 3.0))]);
        let r = evaluate(&Direct, &zero_biases(&d), &d).unwrap();
        assert_eq!(r.mean_error, 0.0);
        assert_eq!(r.per_subject.len(), 2);
    }

    #[test]
    fn pure_yaw_offset_gives_its_size() {
        let rows: Vec<_> = (-5..=5)
            .map(|i| ("a", [i as f64 * 4.0, 0.0], GazeAngle::new(i as f64 * 4.0 - 3.0, 0.0)))
            .collect();
        let d = dataset(&rows);
        let r = evaluate(&Direct, &zero_biases(&d), &d).unwrap();
        assert_abs_diff_eq!(r.mean_error, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.lower_bound_error, 0.0, epsilon = 1e-12);
        assert_eq!(r.calibration_free_error, r.mean_error);
    }

    #[test]
    fn evaluate_matches_loop_oracle() {
        let world = World::new(WorldConfig {
            n_subjects: 3,
            samples_per_subject: 50,
            ..WorldConfig::default()
        })
        .unwrap();
        let (d, profiles) = world.generate_dataset().unwrap();
        let m = Model::init(Architecture::mlp(8, 5), 2).unwrap();
        let biases: BTreeMap<_, _> = profiles.iter().map(|p| (p.key.clone(), p.bias)).collect();
        let r = evaluate(&m, &biases, &d).unwrap();
        let mut total = 0.0;
        for s in d.samples() {
            let p = m.forward(&s.features).unwrap() + biases[&s.subject];
            total += angular_error(p, s.gaze);
        }
        assert!((r.mean_error - total / d.len() as f64).abs() <= 1e-12);
        assert!(r.lower_bound_error <= r.calibration_free_error);
    }

    #[test]
    fn evaluate_needs_every_bias() {
        let d = dataset(&[("a", [0.0, 0.0], GazeAngle::ZERO)]);
        assert!(matches!(evaluate(&Direct, &BTreeMap::new(), &d), Err(Error::MissingBias(_))));
    }

    #[test]
    fn bias_variance_edge_cases() {
        let g = GazeAngle::new(1.0, 2.0);
        let d = dataset(&[
            ("a", [0.0, 0.0], g),
            ("a", [0.0, 0.0], g),
            ("b", [0.0, 0.0], GazeAngle::new(-1.0, 0.0)),
            ("b", [0.0, 0.0], GazeAngle::new(-1.0, 0.0)),
            ("c", [0.0, 0.0], g),
        ]);
        let r = bias_variance_decomposition(&Direct, &d).unwrap();
        assert_eq!(r.mean_intra_subject_variance, 0.0);
        assert_abs_diff_eq!(r.mean_squared_bias, (5.0 + 1.0) / 2.0, epsilon = 1e-12);
        assert_eq!(r.excluded, vec![key("c")]);
    }

    #[test]
    fn zero_bias_world_has_no_squared_bias() {
        let world = World::new(WorldConfig {
            n_subjects: 50,
            samples_per_subject: 200,
            bias_sd: [0.0, 0.0],
            label_noise_sd: 1.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let (d, _) = world.generate_dataset().unwrap();
        let r = bias_variance_decomposition(&world.perfect_estimator(), &d).unwrap();
        // only the sampling error of the mean remains: 2 σ²/n
        assert!(r.mean_squared_bias < 0.05, "{}", r.mean_squared_bias);
        assert_abs_diff_eq!(r.mean_intra_subject_variance, 2.0, epsilon = 0.1);
    }

    #[test]
    fn flip_negates_yaw_bias_and_keeps_pitch() {
        let world = World::new(WorldConfig {
            n_subjects: 4,
            samples_per_subject: 100,
            ..WorldConfig::default()
        })
        .unwrap();
        let (d, _) = world.generate_dataset().unwrap();
        let f = flip_dataset(&d, &world.flip_operator()).unwrap();
        let est = world.perfect_estimator();
        let a = bias_variance_decomposition(&est, &d).unwrap();
        let b = bias_variance_decomposition(&est, &f).unwrap();
        for (k, r) in &a.per_subject {
            let m = &b.per_subject[&k.toggled()];
            assert_abs_diff_eq!(m.mean.yaw, -r.mean.yaw, epsilon = 1e-9);
            assert_abs_diff_eq!(m.mean.pitch, r.mean.pitch, epsilon = 1e-9);
        }
    }

    fn constant_bias_world(seed: u64) -> (World, Dataset) {
        let world = World::new(WorldConfig {
            n_subjects: 4,
            samples_per_subject: 400,
            yaw_range: (-8.0, 8.0),
            pitch_range: (-6.0, 6.0),
            seed,
            ..WorldConfig::default()
        })
        .unwrap();
        let (d, _) = world.generate_dataset().unwrap();
        (world, d)
    }

    #[test]
    fn full_size_mgpc_equals_lower_bound() {
        let (world, d) = constant_bias_world(2);
        let est = world.perfect_estimator();
        let cfg = TrialConfig {
            protocol: Protocol::Mgpc,
            dc_sizes: vec![400],
            trials: 3,
            ..TrialConfig::default()
        };
        let c = run_calibration_trials(&est, &d, &cfg).unwrap();
        assert!((c.points[0].mean_error.unwrap() - c.lower_bound_error).abs() < 1e-9);
    }

    #[test]
    fn trials_are_reproducible_and_ordered() {
        let (world, d) = constant_bias_world(3);
        let est = world.perfect_estimator();
        let cfg = TrialConfig {
            dc_sizes: vec![1, 4, 16],
            trials: 200,
            ..TrialConfig::default()
        };
        let a = run_calibration_trials(&est, &d, &cfg).unwrap();
        let b = run_calibration_trials(&est, &d, &cfg).unwrap();
        assert_eq!(a, b);
        for w in a.points.windows(2) {
            let band = 2.0 * (w[0].std_error.unwrap().powi(2) + w[1].std_error.unwrap().powi(2)).sqrt();
            assert!(w[1].mean_error.unwrap() <= w[0].mean_error.unwrap() + band);
        }
        assert!(a.lower_bound_error < a.points[2].mean_error.unwrap());
        assert!(a.points[0].mean_error.unwrap() < a.calibration_free_error);
    }

    #[test]
    fn records_cover_every_trial_and_subject() {
        let (world, d) = constant_bias_world(4);
        let cfg = TrialConfig {
            dc_sizes: vec![9],
            trials: 5,
            ..TrialConfig::default()
        };
        let r = calibration_trial_records(&world.perfect_estimator(), &d, &cfg).unwrap();
        assert_eq!(r.len(), 5 * 4);
        assert!(r.iter().all(|x| x.status == TrialStatus::Calibrated && x.point.is_some()));
    }

    #[test]
    fn point_region_bounds_the_calibration_points() {
        let (world, d) = constant_bias_world(3);
        let region = (GazeAngle::new(-5.0, -2.0), GazeAngle::new(5.0, 2.0));
        let cfg = TrialConfig {
            dc_sizes: vec![4],
            trials: 40,
            point_region: Some(region),
            ..TrialConfig::default()
        };
        let r = calibration_trial_records(&world.perfect_estimator(), &d, &cfg).unwrap();
        assert!(r.iter().all(|x| {
            let p = x.point.unwrap();
            (-5.0..=5.0).contains(&p.yaw) && (-2.0..=2.0).contains(&p.pitch)
        }));
        let degenerate = TrialConfig {
            point_region: Some((GazeAngle::ZERO, GazeAngle::ZERO)),
            ..cfg
        };
        assert!(degenerate.validate().is_err());
    }

    #[test]
    fn infeasible_points_are_skipped() {
        let d = dataset(&[("a", [0.0, 0.0], GazeAngle::ZERO), ("a", [0.0, 0.0], GazeAngle::new(10.0, 0.0))]);
        let cfg = TrialConfig {
            dc_sizes: vec![2],
            trials: 3,
            ..TrialConfig::default()
        };
        let c = run_calibration_trials(&Direct, &d, &cfg).unwrap();
        assert_eq!(c.points[0].mean_error, None);
        assert_eq!(c.points[0].skipped, 3);
    }

    #[test]
    fn la_with_single_image_is_not_applicable() {
        let (world, d) = constant_bias_world(5);
        let cfg = TrialConfig {
            dc_sizes: vec![1, 5],
            trials: 4,
            method: Method::La,
            ..TrialConfig::default()
        };
        let c = run_calibration_trials(&world.perfect_estimator(), &d, &cfg).unwrap();
        assert_eq!(c.points[0].not_applicable, 16);
        assert_eq!(c.points[0].mean_error, None);
        assert!(c.points[1].mean_error.is_some());
    }

    #[test]
    fn benefit_fraction_rules() {
        let a: BTreeMap<_, _> = [(key("a"), 1.0), (key("b"), 2.0)].into();
        let worse: BTreeMap<_, _> = [(key("a"), 3.0), (key("b"), 4.0)].into();
        assert_eq!(benefit_fraction(&a, &worse).unwrap(), (1.0, 2));
        assert_eq!(benefit_fraction(&a, &a).unwrap(), (0.0, 0));
        let other: BTreeMap<_, _> = [(key("a"), 3.0)].into();
        assert!(benefit_fraction(&a, &other).is_err());
    }

    #[test]
    fn grid_spec_validation() {
        assert!(GridSpec::default().validate().is_ok());
        assert_eq!(GridSpec::default().regions(), (8, 6));
        assert_eq!(GridSpec::default().points_per_side(), 10);
        let bad = GridSpec {
            region: 5.2,
            ..GridSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = GridSpec {
            yaw_extent: (-20.0, 21.0),
            ..GridSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn grid_layout_and_missing_cells() {
        let (world, d) = constant_bias_world(6);
        let spec = GridSpec {
            yaw_extent: (-20.0, 10.0),
            pitch_extent: (-5.0, 5.0),
            step: 2.5,
            region: 5.0,
            ..GridSpec::default()
        };
        let m = grid_robustness_map(&world.perfect_estimator(), &d, &spec).unwrap();
        assert_eq!(m.cells.len(), 6 * 2);
        assert_eq!(m.cell(0, 0).yaw, (-20.0, -15.0));
        assert_eq!(m.cell(5, 1).pitch, (0.0, 5.0));
        // the first yaw column lies beyond the ±8° gaze range
        assert_eq!(m.cell(0, 0).mean_error, None);
        assert_eq!(m.cell(0, 0).subjects, 0);
        for cell in &m.cells {
            match cell.mean_error {
                Some(_) => assert!(cell.benefit_count.is_some() && cell.subjects > 0),
                None => assert_eq!(cell.benefit_count, None),
            }
            assert_eq!(cell.feasible_points + cell.infeasible_points, 4 * 4);
        }
        assert!(m.cell(3, 0).mean_error.is_some());
        assert_eq!(m, grid_robustness_map(&world.perfect_estimator(), &d, &spec).unwrap());
    }

    #[test]
    fn ablation_smoke() {
        let world = World::new(WorldConfig {
            n_subjects: 3,
            samples_per_subject: 150,
            ..WorldConfig::default()
        })
        .unwrap();
        let (d, _) = world.generate_dataset().unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let ab = AblationConfig {
            trials: 5,
            ..AblationConfig::default()
        };
        let r = ablation_compare(&d, Architecture::linear(8), &cfg, &ab).unwrap();
        assert_eq!(r.per_fold.len(), 3);
        assert!(r.decomposition.lower_bound_error.is_finite());
        assert!(r.no_decomposition.lower_bound_error <= r.no_decomposition.calibration_free_error);
    }
}
