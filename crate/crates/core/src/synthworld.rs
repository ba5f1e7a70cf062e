//! Generative gaze world with known per-subject biases.
//!
//! Each subject has an appearance vector `c` and a bias `b`. An image of the
//! subject looking along visual axis `t` is summarised by the feature vector
//! `X = F(c, t)` and labelled `g = t + b (+ S t) + noise`.
//!
//! `F` is built from yaw-odd and yaw-even coordinates so that a horizontal
//! flip of the image is a fixed linear operator on the features:
//!
//! - raw yaw coordinate: `(y + k L sin(y / L)) / SCALE` (odd in yaw),
//! - raw pitch coordinate: `(p + k L sin(p / L) + k L (cos(y / L) - 1)) / SCALE`
//!   (even in yaw),
//! - raw appearance coordinates: `c + u`, where `u` is per-image appearance
//!   jitter (illumination, head pose) with no gaze information,
//!
//! followed by a seeded orthogonal mixing inside the odd block and inside the
//! even block, plus a fixed offset on the even block. With `k = 0` the map is
//! affine in `t`. The first `odd_dims` feature coordinates are yaw-odd.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Dataset, Sample, SubjectKey};
use crate::error::{Error, Result};
use crate::estimator::VisualAxisEstimator;
use crate::geometry::{flip_gaze, GazeAngle};
use crate::rng::{self, Rng};

/// Degrees represented by one unit of a raw gaze coordinate.
pub const FEATURE_SCALE_DEG: f64 = 30.0;
/// Length scale of the sinusoidal warp, in degrees.
pub const WARP_SCALE_DEG: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub feature_dim: usize,
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    pub yaw_range: (f64, f64),
    pub pitch_range: (f64, f64),
    /// Per-axis SD of the subject bias across subjects, degrees.
    pub bias_sd: [f64; 2],
    /// Per-axis SD of the gaze-dependent bias slope; zero gives a constant bias.
    pub bias_slope_sd: [f64; 2],
    /// SD of additive noise on every feature coordinate.
    pub feature_noise_sd: f64,
    /// Per-axis SD of the label noise, degrees.
    pub label_noise_sd: f64,
    /// SD of the appearance coordinates across subjects.
    pub appearance_sd: f64,
    /// SD of the per-image appearance jitter within a subject.
    pub appearance_jitter_sd: f64,
    /// Strength `k` of the sinusoidal warp, in `[0, 1)`.
    pub nonlinearity: f64,
    /// Also emit the horizontally flipped copy of every subject.
    pub include_flipped: bool,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            n_subjects: 15,
            samples_per_subject: 3000,
            yaw_range: (-20.0, 20.0),
            pitch_range: (-15.0, 15.0),
            bias_sd: [2.85, 2.85],
            bias_slope_sd: [0.0, 0.0],
            feature_noise_sd: 0.0,
            label_noise_sd: 1.0,
            appearance_sd: 1.0,
            appearance_jitter_sd: 0.3,
            nonlinearity: 0.3,
            include_flipped: false,
            seed: 1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.feature_dim < 2 {
            return bad(format!("feature_dim must be at least 2, got {}", self.feature_dim));
        }
        if self.n_subjects == 0 || self.samples_per_subject == 0 {
            return bad("n_subjects and samples_per_subject must be positive".into());
        }
        for (name, (lo, hi)) in [("yaw", self.yaw_range), ("pitch", self.pitch_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi && lo >= -90.0 && hi <= 90.0) {
                return bad(format!("{name} range [{lo}, {hi}] must be non-degenerate within [-90, 90]"));
            }
        }
        let sds = [
            self.bias_sd[0],
            self.bias_sd[1],
            self.bias_slope_sd[0],
            self.bias_slope_sd[1],
            self.feature_noise_sd,
            self.label_noise_sd,
            self.appearance_sd,
            self.appearance_jitter_sd,
        ];
        if sds.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("standard deviations must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.nonlinearity) {
            return bad(format!("nonlinearity must lie in [0, 1), got {}", self.nonlinearity));
        }
        Ok(())
    }

    /// Number of yaw-odd feature coordinates.
    pub fn odd_dims(&self) -> usize {
        1 + (self.feature_dim - 2) / 2
    }

    pub fn appearance_dim(&self) -> usize {
        self.feature_dim - 2
    }

    pub fn contains(&self, t: GazeAngle) -> bool {
        (self.yaw_range.0..=self.yaw_range.1).contains(&t.yaw)
            && (self.pitch_range.0..=self.pitch_range.1).contains(&t.pitch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectProfile {
    pub key: SubjectKey,
    /// Appearance `c`: odd coordinates first, then even ones.
    pub appearance: Vec<f64>,
    pub bias: GazeAngle,
    /// Gaze-dependent bias component, `[[yy, yp], [py, pp]]`.
    pub bias_slope: [[f64; 2]; 2],
}

impl SubjectProfile {
    /// Bias applied at visual axis `t`.
    pub fn bias_at(&self, t: GazeAngle) -> GazeAngle {
        let s = &self.bias_slope;
        self.bias
            + GazeAngle::new(
                s[0][0] * t.yaw + s[0][1] * t.pitch,
                s[1][0] * t.yaw + s[1][1] * t.pitch,
            )
    }

    /// Profile of the same person seen in mirrored images.
    pub fn flipped(&self, odd_appearance: usize) -> SubjectProfile {
        let mut appearance = self.appearance.clone();
        for c in &mut appearance[..odd_appearance] {
            *c = -*c;
        }
        let s = self.bias_slope;
        SubjectProfile {
            key: self.key.toggled(),
            appearance,
            bias: flip_gaze(self.bias),
            // P S P with P = diag(-1, 1)
            bias_slope: [[s[0][0], -s[0][1]], [-s[1][0], s[1][1]]],
        }
    }
}

/// Negates the yaw-odd feature coordinates of a world's feature layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlipOperator {
    pub feature_dim: usize,
    pub odd_dims: usize,
}

impl FlipOperator {
    pub fn apply(&self, x: &mut [f64]) {
        for v in &mut x[..self.odd_dims] {
            *v = -*v;
        }
    }
}

/// A world instance: the configuration plus the fixed feature map.
#[derive(Debug, Clone)]
pub struct World {
    cfg: WorldConfig,
    mix_odd: DMatrix<f64>,
    mix_even: DMatrix<f64>,
    even_offset: Vec<f64>,
}

fn random_orthogonal(n: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign-fix so the draw does not depend on the QR implementation's sign choice
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn warp(v: f64, k: f64) -> f64 {
    v + k * WARP_SCALE_DEG * (v / WARP_SCALE_DEG).sin()
}

fn unwarp(target: f64, k: f64) -> f64 {
    // warp is strictly increasing for k < 1; Newton from the identity guess
    let mut v = target;
    for _ in 0..100 {
        let f = warp(v, k) - target;
        let df = 1.0 + k * (v / WARP_SCALE_DEG).cos();
        let step = f / df;
        v -= step;
        if step.abs() < 1e-14 * (1.0 + v.abs()) {
            break;
        }
    }
    v
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, &[0]);
        let n_odd = cfg.odd_dims();
        let n_even = cfg.feature_dim - n_odd;
        let mix_odd = random_orthogonal(n_odd, &mut rng);
        let mix_even = random_orthogonal(n_even, &mut rng);
        let even_offset = (0..n_even)
            .map(|_| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        Ok(Self {
            cfg,
            mix_odd,
            mix_even,
            even_offset,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn flip_operator(&self) -> FlipOperator {
        FlipOperator {
            feature_dim: self.cfg.feature_dim,
            odd_dims: self.cfg.odd_dims(),
        }
    }

    /// Draws `n_subjects` profiles; biases are independent of appearance.
    pub fn sample_subjects(&self) -> Vec<SubjectProfile> {
        let cfg = &self.cfg;
        let mut rng = rng::stream(cfg.seed, &[1]);
        let width = cfg.n_subjects.to_string().len().max(2);
        let app_dim = cfg.appearance_dim();
        (0..cfg.n_subjects)
            .map(|i| {
                let mut normal = |sd: f64| sd * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                let bias = GazeAngle::new(normal(cfg.bias_sd[0]), normal(cfg.bias_sd[1]));
                let bias_slope = [
                    [normal(cfg.bias_slope_sd[0]), 0.0],
                    [0.0, normal(cfg.bias_slope_sd[1])],
                ];
                let appearance = (0..app_dim).map(|_| normal(cfg.appearance_sd)).collect();
                SubjectProfile {
                    key: SubjectKey::new(format!("s{:0width$}", i + 1), false),
                    appearance,
                    bias,
                    bias_slope,
                }
            })
            .collect()
    }

    /// Noise-free features of `F(c, t)` given the appearance seen in the image.
    fn features(&self, appearance: &[f64], t: GazeAngle) -> Vec<f64> {
        let k = self.cfg.nonlinearity;
        let n_odd = self.cfg.odd_dims();
        let odd_app = n_odd - 1;

        let mut raw_odd = Vec::with_capacity(n_odd);
        raw_odd.push(warp(t.yaw, k) / FEATURE_SCALE_DEG);
        raw_odd.extend_from_slice(&appearance[..odd_app]);

        let cross = k * WARP_SCALE_DEG * ((t.yaw / WARP_SCALE_DEG).cos() - 1.0);
        let mut raw_even = Vec::with_capacity(self.cfg.feature_dim - n_odd);
        raw_even.push((warp(t.pitch, k) + cross) / FEATURE_SCALE_DEG);
        raw_even.extend_from_slice(&appearance[odd_app..]);

        let mut x = Vec::with_capacity(self.cfg.feature_dim);
        for r in 0..n_odd {
            x.push((0..n_odd).map(|c| self.mix_odd[(r, c)] * raw_odd[c]).sum());
        }
        for r in 0..raw_even.len() {
            let v: f64 = (0..raw_even.len()).map(|c| self.mix_even[(r, c)] * raw_even[c]).sum();
            x.push(v + self.even_offset[r]);
        }
        x
    }

    /// One image of `profile` looking along `t`.
    pub fn generate_sample(&self, profile: &SubjectProfile, t: GazeAngle, rng: &mut Rng) -> Result<Sample> {
        let cfg = &self.cfg;
        let in_range = if profile.key.flipped {
            cfg.contains(flip_gaze(t))
        } else {
            cfg.contains(t)
        };
        if !in_range {
            return Err(Error::OutOfRange {
                yaw: t.yaw,
                pitch: t.pitch,
            });
        }
        let appearance: Vec<f64> = profile
            .appearance
            .iter()
            .map(|c| c + cfg.appearance_jitter_sd * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
            .collect();
        let mut features = self.features(&appearance, t);
        for f in &mut features {
            *f += cfg.feature_noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut *rng);
        }
        let noise = GazeAngle::new(
            cfg.label_noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut *rng),
            cfg.label_noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut *rng),
        );
        let gaze = t + profile.bias_at(t) + noise;
        Ok(Sample {
            subject: profile.key.clone(),
            features,
            gaze: gaze.validated()?,
            latent_visual_axis: Some(t),
        })
    }

    /// Samples for every profile with visual axes uniform over the gaze range.
    pub fn generate_dataset(&self) -> Result<(Dataset, Vec<SubjectProfile>)> {
        let cfg = &self.cfg;
        let profiles = self.sample_subjects();
        let mut samples = Vec::with_capacity(cfg.n_subjects * cfg.samples_per_subject);
        for (i, p) in profiles.iter().enumerate() {
            let mut rng = rng::stream(cfg.seed, &[2, i as u64]);
            for _ in 0..cfg.samples_per_subject {
                let t = uniform_gaze(cfg, &mut rng);
                samples.push(self.generate_sample(p, t, &mut rng)?);
            }
        }
        let d = Dataset::new(cfg.feature_dim, samples)?;
        if !cfg.include_flipped {
            return Ok((d, profiles));
        }
        let flipped = flip_dataset(&d, &self.flip_operator())?;
        let odd_app = cfg.odd_dims() - 1;
        let mut all_profiles = profiles.clone();
        all_profiles.extend(profiles.iter().map(|p| p.flipped(odd_app)));
        all_profiles.sort_by(|a, b| a.key.cmp(&b.key));
        Ok((d.concat(&flipped)?, all_profiles))
    }

    /// Estimator that inverts the world's feature map exactly (up to noise).
    pub fn perfect_estimator(&self) -> WorldInverse<'_> {
        WorldInverse { world: self }
    }
}

/// Draws the subject profiles of `cfg`'s world.
pub fn sample_subjects(cfg: &WorldConfig) -> Result<Vec<SubjectProfile>> {
    Ok(World::new(cfg.clone())?.sample_subjects())
}

/// Generates the dataset of `cfg`'s world together with the ground truth.
pub fn generate_dataset(cfg: &WorldConfig) -> Result<(Dataset, Vec<SubjectProfile>)> {
    World::new(cfg.clone())?.generate_dataset()
}

/// Horizontal mirror of every sample; subject keys toggle their flip flag.
pub fn flip_dataset(d: &Dataset, op: &FlipOperator) -> Result<Dataset> {
    if op.feature_dim != d.feature_dim() || op.odd_dims > op.feature_dim {
        return Err(Error::InvalidDataset(format!(
            "flip operator for {} features does not match dataset with {}",
            op.feature_dim,
            d.feature_dim()
        )));
    }
    let samples = d
        .samples()
        .iter()
        .map(|s| {
            let mut features = s.features.clone();
            op.apply(&mut features);
            Sample {
                subject: s.subject.toggled(),
                features,
                gaze: flip_gaze(s.gaze),
                latent_visual_axis: s.latent_visual_axis.map(flip_gaze),
            }
        })
        .collect();
    Dataset::new(d.feature_dim(), samples)
}

/// Inverse of the world's feature map, ignoring appearance.
#[derive(Debug, Clone, Copy)]
pub struct WorldInverse<'w> {
    world: &'w World,
}

impl VisualAxisEstimator for WorldInverse<'_> {
    fn input_dim(&self) -> usize {
        self.world.cfg.feature_dim
    }

    fn estimate(&self, x: &[f64]) -> Result<GazeAngle> {
        let w = self.world;
        if x.len() != w.cfg.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: w.cfg.feature_dim,
                actual: x.len(),
            });
        }
        let k = w.cfg.nonlinearity;
        let n_odd = w.cfg.odd_dims();
        // orthogonal mixing: the raw gaze coordinate is the first row of M^T x
        let raw_yaw: f64 = (0..n_odd).map(|r| w.mix_odd[(r, 0)] * x[r]).sum();
        let raw_pitch: f64 = (0..w.mix_even.nrows())
            .map(|r| w.mix_even[(r, 0)] * (x[n_odd + r] - w.even_offset[r]))
            .sum();
        let yaw = unwarp(raw_yaw * FEATURE_SCALE_DEG, k);
        let cross = k * WARP_SCALE_DEG * ((yaw / WARP_SCALE_DEG).cos() - 1.0);
        let pitch = unwarp(raw_pitch * FEATURE_SCALE_DEG - cross, k);
        Ok(GazeAngle::new(yaw, pitch))
    }
}

/// Draws a visual axis uniformly over the configured gaze range.
pub fn uniform_gaze(cfg: &WorldConfig, rng: &mut Rng) -> GazeAngle {
    GazeAngle::new(
        rng.random_range(cfg.yaw_range.0..=cfg.yaw_range.1),
        rng.random_range(cfg.pitch_range.0..=cfg.pitch_range.1),
    )
}
