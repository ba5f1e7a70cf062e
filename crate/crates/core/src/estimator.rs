//! Subject-independent visual-axis estimator `t̂(X; Φ)`.
//!
//! Two architectures share one output contract: a final affine stage mapping
//! the last-stage features to a yaw/pitch pair. The output stage regresses
//! radians; [`Model::forward`] reports degrees.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;

use crate::dataset::{Dataset, SubjectKey};
use crate::error::{Error, Result};
use crate::geometry::GazeAngle;
use crate::rng;

/// Degrees per output unit.
pub const DEG_PER_UNIT: f64 = 180.0 / std::f64::consts::PI;

/// Anything that maps a feature vector to a visual-axis gaze estimate.
pub trait VisualAxisEstimator: Sync {
    fn input_dim(&self) -> usize;
    fn estimate(&self, x: &[f64]) -> Result<GazeAngle>;

    /// The parametric model behind this estimator, if there is one.
    fn as_model(&self) -> Option<&Model> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Linear,
    Mlp,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::Linear => "linear",
            ArchKind::Mlp => "mlp",
        })
    }
}

impl FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ArchKind::Linear),
            "mlp" => Ok(ArchKind::Mlp),
            other => Err(Error::InvalidConfig(format!(
                "unknown architecture {other:?} (expected linear or mlp)"
            ))),
        }
    }
}

/// Estimator architecture. The MLP has one rectified hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub kind: ArchKind,
    pub input_dim: usize,
    /// Ignored for the linear architecture.
    pub hidden_units: usize,
}

impl Architecture {
    pub fn linear(input_dim: usize) -> Self {
        Self {
            kind: ArchKind::Linear,
            input_dim,
            hidden_units: 0,
        }
    }

    pub fn mlp(input_dim: usize, hidden_units: usize) -> Self {
        Self {
            kind: ArchKind::Mlp,
            input_dim,
            hidden_units,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if self.kind == ArchKind::Mlp && self.hidden_units == 0 {
            return Err(Error::InvalidConfig("mlp needs at least one hidden unit".into()));
        }
        Ok(())
    }

    /// Dimension of the representation feeding the output stage.
    pub fn stage_dim(&self) -> usize {
        match self.kind {
            ArchKind::Linear => self.input_dim,
            ArchKind::Mlp => self.hidden_units,
        }
    }

    /// Index of the first output-stage parameter.
    pub fn output_stage_start(&self) -> usize {
        match self.kind {
            ArchKind::Linear => 0,
            ArchKind::Mlp => self.hidden_units * self.input_dim + self.hidden_units,
        }
    }

    /// Index of the two output offsets (the last two parameters).
    pub fn output_offset_start(&self) -> usize {
        self.output_stage_start() + 2 * self.stage_dim()
    }

    pub fn param_count(&self) -> usize {
        self.output_offset_start() + 2
    }
}

/// Flat parameter vector `Φ`. Layout (row-major weights):
/// mlp `[W1 (h x d), b1 (h), W2 (2 x h), b2 (2)]`, linear `[W (2 x d), b (2)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params(pub Vec<f64>);

impl Params {
    pub fn zeros(arch: &Architecture) -> Self {
        Params(vec![0.0; arch.param_count()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fan-in scaled uniform initialisation with zero offsets. The output stage is
/// scaled down by 10 so initial predictions stay within a few degrees.
pub fn init_params(arch: &Architecture, seed: u64) -> Params {
    let mut rng = rng::stream(seed, &[0x1417]);
    let mut p = Params::zeros(arch);
    let mut fill = |range: std::ops::Range<usize>, bound: f64| {
        for v in &mut p.0[range] {
            *v = rng.random_range(-bound..bound);
        }
    };
    let start = arch.output_stage_start();
    if arch.kind == ArchKind::Mlp {
        let d = arch.input_dim;
        let h = arch.hidden_units;
        fill(0..h * d, (6.0 / d as f64).sqrt());
    }
    let k = arch.stage_dim();
    fill(start..start + 2 * k, 0.1 * (3.0 / k as f64).sqrt());
    p
}

/// An architecture together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: Params,
}

impl Model {
    pub fn new(arch: Architecture, params: Params) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::InvalidConfig(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                arch.param_count()
            )));
        }
        if params.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            params: init_params(&arch, seed),
        })
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Writes the last-stage features of `x` into `stage` (resized as needed).
    pub(crate) fn stage_into(&self, x: &[f64], stage: &mut Vec<f64>) {
        stage.clear();
        match self.arch.kind {
            ArchKind::Linear => stage.extend_from_slice(x),
            ArchKind::Mlp => {
                let d = self.arch.input_dim;
                let h = self.arch.hidden_units;
                let p = &self.params.0;
                let (w1, rest) = p.split_at(h * d);
                let b1 = &rest[..h];
                stage.extend((0..h).map(|j| {
                    let row = &w1[j * d..(j + 1) * d];
                    let z = b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                    z.max(0.0)
                }));
            }
        }
    }

    /// Output stage applied to last-stage features, in output units.
    pub(crate) fn output_units(&self, stage: &[f64]) -> [f64; 2] {
        let k = self.arch.stage_dim();
        let s = self.arch.output_stage_start();
        let p = &self.params.0;
        let w = &p[s..s + 2 * k];
        let b = &p[s + 2 * k..s + 2 * k + 2];
        let y0 = b[0] + w[..k].iter().zip(stage).map(|(a, v)| a * v).sum::<f64>();
        let y1 = b[1] + w[k..].iter().zip(stage).map(|(a, v)| a * v).sum::<f64>();
        [y0, y1]
    }

    /// `t̂(x; Φ)` in degrees.
    pub fn forward(&self, x: &[f64]) -> Result<GazeAngle> {
        self.check_dim(x)?;
        let mut stage = Vec::with_capacity(self.arch.stage_dim());
        self.stage_into(x, &mut stage);
        let y = self.output_units(&stage);
        Ok(GazeAngle::new(y[0] * DEG_PER_UNIT, y[1] * DEG_PER_UNIT))
    }

    /// Representation immediately before the output stage (`x` itself for the
    /// linear architecture).
    pub fn last_stage_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let mut stage = Vec::with_capacity(self.arch.stage_dim());
        self.stage_into(x, &mut stage);
        Ok(stage)
    }

    /// Accumulates `d loss / d Φ` into `grad` given the loss derivative with
    /// respect to the degree-valued outputs. `stage` must hold the last-stage
    /// features of `x` under the current parameters.
    pub(crate) fn accumulate_gradient(&self, x: &[f64], stage: &[f64], d_out_deg: [f64; 2], grad: &mut [f64]) {
        let k = self.arch.stage_dim();
        let s = self.arch.output_stage_start();
        let du = [d_out_deg[0] * DEG_PER_UNIT, d_out_deg[1] * DEG_PER_UNIT];
        for (o, &g) in du.iter().enumerate() {
            let row = &mut grad[s + o * k..s + (o + 1) * k];
            for (r, v) in row.iter_mut().zip(stage) {
                *r += g * v;
            }
            grad[s + 2 * k + o] += g;
        }
        if self.arch.kind == ArchKind::Mlp {
            let d = self.arch.input_dim;
            let p = &self.params.0;
            let w2 = &p[s..s + 2 * k];
            for j in 0..k {
                if stage[j] <= 0.0 {
                    continue;
                }
                let dz = du[0] * w2[j] + du[1] * w2[k + j];
                let row = &mut grad[j * d..(j + 1) * d];
                for (r, v) in row.iter_mut().zip(x) {
                    *r += dz * v;
                }
                grad[k * d + j] += dz;
            }
        }
    }

    /// Replaces the output stage with degree-valued weights and offsets.
    pub fn with_output_stage(&self, weights_deg: [&[f64]; 2], offsets_deg: [f64; 2]) -> Result<Model> {
        let k = self.arch.stage_dim();
        if weights_deg.iter().any(|w| w.len() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: weights_deg[0].len(),
            });
        }
        let mut params = self.params.clone();
        let s = self.arch.output_stage_start();
        for o in 0..2 {
            for j in 0..k {
                params.0[s + o * k + j] = weights_deg[o][j] / DEG_PER_UNIT;
            }
            params.0[s + 2 * k + o] = offsets_deg[o] / DEG_PER_UNIT;
        }
        Model::new(self.arch, params)
    }

    /// Output-stage weights and offsets in degree units.
    pub fn output_stage_deg(&self) -> ([Vec<f64>; 2], [f64; 2]) {
        let k = self.arch.stage_dim();
        let s = self.arch.output_stage_start();
        let p = &self.params.0;
        let w = |o: usize| p[s + o * k..s + (o + 1) * k].iter().map(|v| v * DEG_PER_UNIT).collect();
        (
            [w(0), w(1)],
            [p[s + 2 * k] * DEG_PER_UNIT, p[s + 2 * k + 1] * DEG_PER_UNIT],
        )
    }
}

impl VisualAxisEstimator for Model {
    fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn estimate(&self, x: &[f64]) -> Result<GazeAngle> {
        self.forward(x)
    }

    fn as_model(&self) -> Option<&Model> {
        Some(self)
    }
}

const PARAMS_MAGIC: &str = "gazedecomp-params v1";

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(PARAMS_MAGIC);
    out.push('\n');
    out.push_str(&format!("kind={}\n", model.arch.kind));
    out.push_str(&format!("input_dim={}\n", model.arch.input_dim));
    out.push_str(&format!("hidden_units={}\n", model.arch.hidden_units));
    out.push_str(&format!("count={}\n", model.params.len()));
    for v in &model.params.0 {
        out.push_str(&format!("{v}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let lines: Vec<&str> = text.lines().collect();
    if lines.first().map(|l| l.trim()) != Some(PARAMS_MAGIC) {
        return Err(err(1, format!("expected {PARAMS_MAGIC:?} header")));
    }
    let field = |i: usize, key: &str| -> Result<&str> {
        lines
            .get(i)
            .and_then(|l| l.trim().strip_prefix(key))
            .and_then(|l| l.strip_prefix('='))
            .ok_or_else(|| err(i + 1, format!("expected {key}=<value>")))
    };
    let kind: ArchKind = field(1, "kind")?.parse().map_err(|e: Error| err(2, e.to_string()))?;
    let int = |i: usize, key: &str| -> Result<usize> {
        field(i, key)?
            .parse()
            .map_err(|e| err(i + 1, format!("{key}: {e}")))
    };
    let arch = Architecture {
        kind,
        input_dim: int(2, "input_dim")?,
        hidden_units: int(3, "hidden_units")?,
    };
    let count = int(4, "count")?;
    let values = lines[5..]
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| err(i + 6, format!("parameter: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != count {
        return Err(err(5, format!("count={count} but {} values follow", values.len())));
    }
    Model::new(arch, Params(values)).map_err(|e| err(1, e.to_string()))
}

/// Linear decomposition fitted in closed form.
#[derive(Debug, Clone)]
pub struct ClosedFormFit {
    pub model: Model,
    /// Training biases, centred to sum to zero over subjects.
    pub biases: BTreeMap<SubjectKey, GazeAngle>,
}

/// Exact minimiser of `Σ ||g - W x - w0 - β_i||²` over a linear estimator and
/// per-subject biases with `Σ β_i = 0`.
///
/// `W` comes from the within-subject (demeaned) normal equations; each
/// subject's intercept is `ḡ_i - W x̄_i`, `w0` is their unweighted mean and
/// `β_i` the remainder. A positive `ridge` adds `ridge * I` to the normal
/// matrix; with `ridge == 0` a singular design is an error.
pub fn closed_form_decomposition_fit(train: &Dataset, ridge: f64) -> Result<ClosedFormFit> {
    let d = train.feature_dim();
    let groups = train.subject_indices();
    if groups.is_empty() {
        return Err(Error::Insufficient("empty training set".into()));
    }
    let samples = train.samples();

    let mut means = Vec::with_capacity(groups.len());
    for idx in groups.values() {
        let n = idx.len() as f64;
        let mut xm = vec![0.0; d];
        let mut gm = GazeAngle::ZERO;
        for &i in idx {
            for (m, v) in xm.iter_mut().zip(&samples[i].features) {
                *m += v;
            }
            gm += samples[i].gaze;
        }
        xm.iter_mut().for_each(|m| *m /= n);
        means.push((xm, gm / n));
    }

    let mut sxx = DMatrix::<f64>::zeros(d, d);
    let mut sxg = DMatrix::<f64>::zeros(d, 2);
    let mut xc = vec![0.0; d];
    for (idx, (xm, gm)) in groups.values().zip(&means) {
        for &i in idx {
            let s = &samples[i];
            for k in 0..d {
                xc[k] = s.features[k] - xm[k];
            }
            let gc = s.gaze - *gm;
            for a in 0..d {
                for b in a..d {
                    sxx[(a, b)] += xc[a] * xc[b];
                }
                sxg[(a, 0)] += xc[a] * gc.yaw;
                sxg[(a, 1)] += xc[a] * gc.pitch;
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            sxx[(a, b)] = sxx[(b, a)];
        }
    }

    if ridge > 0.0 {
        for a in 0..d {
            sxx[(a, a)] += ridge;
        }
    } else {
        let eig = SymmetricEigen::new(sxx.clone());
        let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min <= 1e-12 * max {
            return Err(Error::RankDeficient);
        }
    }
    let w = sxx
        .cholesky()
        .ok_or(Error::RankDeficient)?
        .solve(&sxg);

    let intercepts: Vec<GazeAngle> = means
        .iter()
        .map(|(xm, gm)| {
            let wx = GazeAngle::new(
                (0..d).map(|k| w[(k, 0)] * xm[k]).sum(),
                (0..d).map(|k| w[(k, 1)] * xm[k]).sum(),
            );
            *gm - wx
        })
        .collect();
    let w0 = intercepts.iter().copied().sum::<GazeAngle>() / intercepts.len() as f64;

    let arch = Architecture::linear(d);
    let wy: Vec<f64> = (0..d).map(|k| w[(k, 0)]).collect();
    let wp: Vec<f64> = (0..d).map(|k| w[(k, 1)]).collect();
    let model = Model::new(arch, Params::zeros(&arch))?.with_output_stage([&wy, &wp], w0.to_array())?;
    let biases = groups
        .keys()
        .cloned()
        .zip(intercepts.iter().map(|a| *a - w0))
        .collect();
    Ok(ClosedFormFit { model, biases })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use approx::assert_abs_diff_eq;

    #[test]
    fn init_is_deterministic_and_finite() {
        let arch = Architecture::mlp(5, 7);
        let a = init_params(&arch, 3);
        assert_eq!(a, init_params(&arch, 3));
        assert_ne!(a, init_params(&arch, 4));
        assert!(a.0.iter().all(|v| v.is_finite()));
        assert_eq!(Architecture::linear(6).param_count(), 2 * 6 + 2);
        assert_eq!(arch.param_count(), 7 * 5 + 7 + 2 * 7 + 2);
    }

    #[test]
    fn zero_params_give_zero_gaze() {
        for arch in [Architecture::linear(3), Architecture::mlp(3, 4)] {
            let m = Model::new(arch, Params::zeros(&arch)).unwrap();
            assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), GazeAngle::ZERO);
        }
    }

    #[test]
    fn linear_reproduces_affine_map() {
        let base = Model::new(Architecture::linear(2), Params::zeros(&Architecture::linear(2))).unwrap();
        let m = base.with_output_stage([&[1.0, 0.0], &[0.0, 1.0]], [2.0, -3.0]).unwrap();
        let g = m.forward(&[4.5, -1.25]).unwrap();
        assert_abs_diff_eq!(g.yaw, 6.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g.pitch, -4.25, epsilon = 1e-12);
    }

    // independent naive evaluator for the mlp layout
    fn naive_mlp(p: &[f64], d: usize, h: usize, x: &[f64]) -> [f64; 2] {
        let mut hidden = vec![0.0; h];
        for j in 0..h {
            let mut z = p[h * d + j];
            for i in 0..d {
                z += p[j * d + i] * x[i];
            }
            hidden[j] = if z > 0.0 { z } else { 0.0 };
        }
        let off = h * d + h;
        let mut out = [0.0; 2];
        for o in 0..2 {
            let mut y = p[off + 2 * h + o];
            for j in 0..h {
                y += p[off + o * h + j] * hidden[j];
            }
            out[o] = y * 180.0 / std::f64::consts::PI;
        }
        out
    }

    #[test]
    fn mlp_forward_matches_naive_loop() {
        let mut rng = rng::stream(11, &[]);
        for trial in 0..50 {
            let arch = Architecture::mlp(4, 6);
            let mut p = init_params(&arch, trial);
            for v in &mut p.0 {
                *v += rng.random_range(-0.5..0.5);
            }
            let m = Model::new(arch, p.clone()).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = m.forward(&x).unwrap();
            let n = naive_mlp(&p.0, 4, 6, &x);
            assert_abs_diff_eq!(g.yaw, n[0], epsilon = 1e-12 * (1.0 + n[0].abs()));
            assert_abs_diff_eq!(g.pitch, n[1], epsilon = 1e-12 * (1.0 + n[1].abs()));
        }
    }

    #[test]
    fn last_stage_features_contract() {
        let lin = Model::init(Architecture::linear(3), 1).unwrap();
        assert_eq!(lin.last_stage_features(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);

        let m = Model::init(Architecture::mlp(3, 5), 2).unwrap();
        let x = [0.3, -1.2, 2.0];
        let h = m.last_stage_features(&x).unwrap();
        assert_eq!(h.len(), 5);
        let (w, b) = m.output_stage_deg();
        let y: f64 = b[0] + w[0].iter().zip(&h).map(|(a, v)| a * v).sum::<f64>();
        let p: f64 = b[1] + w[1].iter().zip(&h).map(|(a, v)| a * v).sum::<f64>();
        let g = m.forward(&x).unwrap();
        assert_abs_diff_eq!(g.yaw, y, epsilon = 1e-12);
        assert_abs_diff_eq!(g.pitch, p, epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = Model::init(Architecture::mlp(3, 2), 0).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(m.last_stage_features(&[1.0; 4]).is_err());
    }

    #[test]
    fn params_file_round_trip() {
        let m = Model::init(Architecture::mlp(3, 4), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.params");
        save_model(&m, &path).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
        std::fs::write(&path, "garbage\n").unwrap();
        assert!(load_model(&path).is_err());
    }

    fn linear_world(noise: f64, seed: u64) -> (Dataset, Vec<GazeAngle>) {
        // g = A x + b_i + noise, with x varying within subjects
        let mut rng = rng::stream(seed, &[]);
        let a = [[3.0, -1.0, 0.5], [0.25, 2.0, -1.5]];
        let mut samples = Vec::new();
        let mut biases = Vec::new();
        for i in 0..6 {
            let b = GazeAngle::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            biases.push(b);
            for _ in 0..50 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let t = GazeAngle::new(
                    (0..3).map(|k| a[0][k] * x[k]).sum(),
                    (0..3).map(|k| a[1][k] * x[k]).sum(),
                );
                let e = GazeAngle::new(rng.random_range(-noise..=noise), rng.random_range(-noise..=noise));
                samples.push(Sample {
                    subject: SubjectKey::new(format!("s{i}"), false),
                    features: x,
                    gaze: t + b + e,
                    latent_visual_axis: Some(t),
                });
            }
        }
        (Dataset::new(3, samples).unwrap(), biases)
    }

    #[test]
    fn closed_form_recovers_noiseless_world() {
        let (d, biases) = linear_world(0.0, 5);
        let fit = closed_form_decomposition_fit(&d, 0.0).unwrap();
        let mean_b = biases.iter().copied().sum::<GazeAngle>() / biases.len() as f64;
        let mut loss = 0.0;
        for s in d.samples() {
            let r = s.gaze - fit.model.forward(&s.features).unwrap() - fit.biases[&s.subject];
            loss += r.norm_squared();
        }
        assert!(loss < 1e-9, "loss {loss}");
        for (i, b) in biases.iter().enumerate() {
            let est = fit.biases[&SubjectKey::new(format!("s{i}"), false)];
            assert_abs_diff_eq!(est.yaw, b.yaw - mean_b.yaw, epsilon = 1e-6);
            assert_abs_diff_eq!(est.pitch, b.pitch - mean_b.pitch, epsilon = 1e-6);
        }
        let sum: GazeAngle = fit.biases.values().copied().sum();
        assert!(sum.l1_norm() < 1e-9);
    }

    // Dummy-variable least squares over [x, one-hot subject] with β_0 pinned,
    // solved from the full normal equations; an independent route to the fit.
    fn dummy_variable_fit(d: &Dataset) -> (Vec<[f64; 2]>, Vec<GazeAngle>) {
        let subjects = d.subjects();
        let f = d.feature_dim();
        let p = f + subjects.len();
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DMatrix::<f64>::zeros(p, 2);
        for s in d.samples() {
            let mut row = vec![0.0; p];
            row[..f].copy_from_slice(&s.features);
            let si = subjects.iter().position(|k| *k == s.subject).unwrap();
            row[f + si] = 1.0;
            for a in 0..p {
                for b in 0..p {
                    xtx[(a, b)] += row[a] * row[b];
                }
                xty[(a, 0)] += row[a] * s.gaze.yaw;
                xty[(a, 1)] += row[a] * s.gaze.pitch;
            }
        }
        let sol = xtx.lu().solve(&xty).unwrap();
        let w = (0..f).map(|k| [sol[(k, 0)], sol[(k, 1)]]).collect();
        let a: Vec<GazeAngle> = (0..subjects.len())
            .map(|i| GazeAngle::new(sol[(f + i, 0)], sol[(f + i, 1)]))
            .collect();
        let mean = a.iter().copied().sum::<GazeAngle>() / a.len() as f64;
        (w, a.into_iter().map(|v| v - mean).collect())
    }

    #[test]
    fn closed_form_matches_dummy_variable_regression() {
        let (d, _) = linear_world(0.7, 8);
        let fit = closed_form_decomposition_fit(&d, 0.0).unwrap();
        let (w, betas) = dummy_variable_fit(&d);
        let (fw, _) = fit.model.output_stage_deg();
        for k in 0..3 {
            assert_abs_diff_eq!(fw[0][k], w[k][0], epsilon = 1e-8);
            assert_abs_diff_eq!(fw[1][k], w[k][1], epsilon = 1e-8);
        }
        for (est, b) in fit.biases.values().zip(&betas) {
            assert_abs_diff_eq!(est.yaw, b.yaw, epsilon = 1e-8);
            assert_abs_diff_eq!(est.pitch, b.pitch, epsilon = 1e-8);
        }
    }

    #[test]
    fn rank_deficiency_without_ridge() {
        // a feature constant within every subject is collinear with the dummies
        let (d, _) = linear_world(0.1, 2);
        let samples = d
            .samples()
            .iter()
            .map(|s| {
                let mut s = s.clone();
                let tag: f64 = s.subject.id[1..].parse().unwrap();
                s.features.push(tag);
                s
            })
            .collect();
        let d = Dataset::new(4, samples).unwrap();
        assert!(matches!(closed_form_decomposition_fit(&d, 0.0), Err(Error::RankDeficient)));
        assert!(closed_form_decomposition_fit(&d, 1e-8).is_ok());
    }
}
