//! Flat `key = value` experiment configuration shared by every subcommand.
//!
//! Precedence, lowest first: built-in defaults, the config file, `--set`
//! overrides, then the dedicated command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::calibration::Method;
use crate::error::{Error, Result};
use crate::estimator::{ArchKind, Architecture};
use crate::evaluation::{AblationConfig, GridSpec, Protocol, TrialConfig};
use crate::geometry::GazeAngle;
use crate::synthworld::WorldConfig;
use crate::trainer::{Optimizer, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Master seed; copied into every stage that draws random numbers.
    pub seed: u64,
    pub world: WorldConfig,
    pub arch: ArchKind,
    pub hidden_units: usize,
    pub train: TrainConfig,
    pub trial: TrialConfig,
    pub grid: GridSpec,
    pub pair_flipped: bool,
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub betas: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            world: WorldConfig::default(),
            arch: ArchKind::Mlp,
            hidden_units: 32,
            train: TrainConfig::default(),
            trial: TrialConfig::default(),
            grid: GridSpec::default(),
            pair_flipped: true,
            dataset: None,
            model: None,
            betas: None,
            out: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("key {key:?}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("key {key:?}: expected true or false, got {value:?}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// `yaw_min,yaw_max,pitch_min,pitch_max`, or empty for none.
fn parse_region(key: &str, value: &str) -> Result<Option<(GazeAngle, GazeAngle)>> {
    if value.is_empty() {
        return Ok(None);
    }
    let v: Vec<f64> = value.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
    match v.as_slice() {
        [y0, y1, p0, p1] => Ok(Some((GazeAngle::new(*y0, *p0), GazeAngle::new(*y1, *p1)))),
        _ => Err(Error::InvalidConfig(format!(
            "key {key:?}: expected yaw_min,yaw_max,pitch_min,pitch_max"
        ))),
    }
}

fn region_text(r: Option<(GazeAngle, GazeAngle)>) -> String {
    r.map_or_else(String::new, |(lo, hi)| format!("{},{},{},{}", lo.yaw, hi.yaw, lo.pitch, hi.pitch))
}

fn path_or_none(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(String::new, |p| p.display().to_string())
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    /// Assigns one key. Unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "feature_dim" => self.world.feature_dim = parse(key, v)?,
            "n_subjects" => self.world.n_subjects = parse(key, v)?,
            "samples_per_subject" => self.world.samples_per_subject = parse(key, v)?,
            "yaw_min" => self.world.yaw_range.0 = parse(key, v)?,
            "yaw_max" => self.world.yaw_range.1 = parse(key, v)?,
            "pitch_min" => self.world.pitch_range.0 = parse(key, v)?,
            "pitch_max" => self.world.pitch_range.1 = parse(key, v)?,
            "bias_sd_yaw" => self.world.bias_sd[0] = parse(key, v)?,
            "bias_sd_pitch" => self.world.bias_sd[1] = parse(key, v)?,
            "bias_slope_sd_yaw" => self.world.bias_slope_sd[0] = parse(key, v)?,
            "bias_slope_sd_pitch" => self.world.bias_slope_sd[1] = parse(key, v)?,
            "feature_noise_sd" => self.world.feature_noise_sd = parse(key, v)?,
            "label_noise_sd" => self.world.label_noise_sd = parse(key, v)?,
            "appearance_sd" => self.world.appearance_sd = parse(key, v)?,
            "appearance_jitter_sd" => self.world.appearance_jitter_sd = parse(key, v)?,
            "nonlinearity" => self.world.nonlinearity = parse(key, v)?,
            "include_flipped" => self.world.include_flipped = parse_bool(key, v)?,
            "arch" => self.arch = v.parse()?,
            "hidden_units" => self.hidden_units = parse(key, v)?,
            "lambda" => self.train.lambda = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "initial_lr" => self.train.initial_lr = parse(key, v)?,
            "lr_decay_every" => self.train.lr_decay_every = parse(key, v)?,
            "lr_decay_factor" => self.train.lr_decay_factor = parse(key, v)?,
            "optimizer" => self.train.optimizer = v.parse::<Optimizer>()?,
            "decomposition" => self.train.decomposition = parse_bool(key, v)?,
            "protocol" => self.trial.protocol = v.parse::<Protocol>()?,
            "dc_sizes" => self.trial.dc_sizes = parse_list(key, v)?,
            "trials" => self.trial.trials = parse(key, v)?,
            "radius" => self.trial.radius = parse(key, v)?,
            "method" => self.trial.method = v.parse::<Method>()?,
            "fc_ridge" => self.trial.fc_ridge = parse(key, v)?,
            "max_point_attempts" => self.trial.max_point_attempts = parse(key, v)?,
            "point_region" => self.trial.point_region = parse_region(key, v)?,
            "grid_yaw_min" => self.grid.yaw_extent.0 = parse(key, v)?,
            "grid_yaw_max" => self.grid.yaw_extent.1 = parse(key, v)?,
            "grid_pitch_min" => self.grid.pitch_extent.0 = parse(key, v)?,
            "grid_pitch_max" => self.grid.pitch_extent.1 = parse(key, v)?,
            "grid_step" => self.grid.step = parse(key, v)?,
            "grid_region" => self.grid.region = parse(key, v)?,
            "grid_dc_size" => self.grid.dc_size = parse(key, v)?,
            "pair_flipped" => self.pair_flipped = parse_bool(key, v)?,
            "dataset" => self.dataset = opt_path(v),
            "model" => self.model = opt_path(v),
            "betas" => self.betas = opt_path(v),
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::InvalidConfig(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = &self.world;
        let t = &self.train;
        let c = &self.trial;
        let g = &self.grid;
        let sizes = c.dc_sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("seed", self.seed.to_string()),
            ("feature_dim", w.feature_dim.to_string()),
            ("n_subjects", w.n_subjects.to_string()),
            ("samples_per_subject", w.samples_per_subject.to_string()),
            ("yaw_min", w.yaw_range.0.to_string()),
            ("yaw_max", w.yaw_range.1.to_string()),
            ("pitch_min", w.pitch_range.0.to_string()),
            ("pitch_max", w.pitch_range.1.to_string()),
            ("bias_sd_yaw", w.bias_sd[0].to_string()),
            ("bias_sd_pitch", w.bias_sd[1].to_string()),
            ("bias_slope_sd_yaw", w.bias_slope_sd[0].to_string()),
            ("bias_slope_sd_pitch", w.bias_slope_sd[1].to_string()),
            ("feature_noise_sd", w.feature_noise_sd.to_string()),
            ("label_noise_sd", w.label_noise_sd.to_string()),
            ("appearance_sd", w.appearance_sd.to_string()),
            ("appearance_jitter_sd", w.appearance_jitter_sd.to_string()),
            ("nonlinearity", w.nonlinearity.to_string()),
            ("include_flipped", w.include_flipped.to_string()),
            ("arch", self.arch.to_string()),
            ("hidden_units", self.hidden_units.to_string()),
            ("lambda", t.lambda.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("initial_lr", t.initial_lr.to_string()),
            ("lr_decay_every", t.lr_decay_every.to_string()),
            ("lr_decay_factor", t.lr_decay_factor.to_string()),
            ("optimizer", t.optimizer.to_string()),
            ("decomposition", t.decomposition.to_string()),
            ("protocol", c.protocol.to_string()),
            ("dc_sizes", sizes),
            ("trials", c.trials.to_string()),
            ("radius", c.radius.to_string()),
            ("method", c.method.to_string()),
            ("fc_ridge", c.fc_ridge.to_string()),
            ("max_point_attempts", c.max_point_attempts.to_string()),
            ("point_region", region_text(c.point_region)),
            ("grid_yaw_min", g.yaw_extent.0.to_string()),
            ("grid_yaw_max", g.yaw_extent.1.to_string()),
            ("grid_pitch_min", g.pitch_extent.0.to_string()),
            ("grid_pitch_max", g.pitch_extent.1.to_string()),
            ("grid_step", g.step.to_string()),
            ("grid_region", g.region.to_string()),
            ("grid_dc_size", g.dc_size.to_string()),
            ("pair_flipped", self.pair_flipped.to_string()),
            ("dataset", path_or_none(&self.dataset)),
            ("model", path_or_none(&self.model)),
            ("betas", path_or_none(&self.betas)),
            ("out", self.out.display().to_string()),
        ]
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, got {line:?}")))?;
            self.set(key.trim(), value).map_err(|e| match e {
                Error::InvalidConfig(m) => parse_err(m),
                other => parse_err(other.to_string()),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// The fully resolved configuration in the same format the parser reads.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            ..self.world.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn trial_config(&self) -> TrialConfig {
        TrialConfig {
            seed: self.seed,
            ..self.trial.clone()
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            seed: self.seed,
            radius: self.trial.radius,
            ..self.grid.clone()
        }
    }

    /// Ablation settings: the first calibration size and the trial count.
    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            dc_size: self.trial.dc_sizes.first().copied().unwrap_or(9),
            trials: self.trial.trials,
            radius: self.trial.radius,
            seed: self.seed,
            split: self.split_options(),
        }
    }

    pub fn split_options(&self) -> crate::dataset::SplitOptions {
        crate::dataset::SplitOptions {
            pair_flipped: self.pair_flipped,
        }
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        match self.arch {
            ArchKind::Linear => Architecture::linear(input_dim),
            ArchKind::Mlp => Architecture::mlp(input_dim, self.hidden_units),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world_config().validate()?;
        self.train_config().validate()?;
        self.trial_config().validate()?;
        self.grid_spec().validate()?;
        self.architecture(self.world.feature_dim).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("dc_sizes", "1, 9,64").unwrap();
        cfg.set("lambda", "0.0001").unwrap();
        cfg.set("arch", "linear").unwrap();
        cfg.set("dataset", "data/x.csv").unwrap();
        cfg.set("point_region", "-10, 10,-5,5").unwrap();
        let mut back = ExperimentConfig::default();
        back.apply_text(&cfg.resolved_text(), Path::new("r")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.trial.dc_sizes, vec![1, 9, 64]);
    }

    #[test]
    fn every_echoed_key_is_settable() {
        let cfg = ExperimentConfig::default();
        let mut other = ExperimentConfig::default();
        for (k, v) in cfg.entries() {
            other.set(k, &v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
        assert_eq!(other, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::default()
            .apply_text("seed = 3\nbogus_knob = 1\n", Path::new("c.cfg"))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_knob") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn malformed_lines_and_values_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply_text("seed 3", Path::new("c")).is_err());
        assert!(cfg.apply_text("epochs = many", Path::new("c")).is_err());
        assert!(cfg.apply_text("protocol = both", Path::new("c")).is_err());
        assert!(cfg.apply_text("include_flipped = maybe", Path::new("c")).is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("# header\n\nn_subjects = 4 # inline\n", Path::new("c")).unwrap();
        assert_eq!(cfg.world.n_subjects, 4);
    }

    #[test]
    fn seed_propagates_to_every_stage() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("seed", "42").unwrap();
        assert_eq!(cfg.world_config().seed, 42);
        assert_eq!(cfg.train_config().seed, 42);
        assert_eq!(cfg.trial_config().seed, 42);
        assert_eq!(cfg.grid_spec().seed, 42);
        assert_eq!(cfg.ablation_config().seed, 42);
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.set("trials", "0").unwrap();
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn float_values_round_trip(lambda in 0.0f64..1.0, radius in 0.01f64..10.0, seed in any::<u64>()) {
            let mut cfg = ExperimentConfig::default();
            cfg.set("lambda", &lambda.to_string()).unwrap();
            cfg.set("radius", &radius.to_string()).unwrap();
            cfg.set("seed", &seed.to_string()).unwrap();
            let mut back = ExperimentConfig::default();
            back.apply_text(&cfg.resolved_text(), Path::new("r")).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
