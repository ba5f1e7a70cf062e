//! Command-line experiment runner.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::dataset::{load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::estimator::{load_model, save_model, Model};
use crate::evaluation::{
    ablation_compare, bias_variance_decomposition, calibration_trial_records, evaluate, grid_robustness_map,
    run_calibration_trials,
};
use crate::geometry::GazeAngle;
use crate::report;
use crate::synthworld::generate_dataset;
use crate::trainer::{load_biases, save_biases, train, train_biases_consistency};

#[derive(Debug, Parser)]
#[command(name = "gazedecomp", version, about = "Gaze decomposition training, calibration and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its subject profiles.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the visual-axis estimator and the training-subject biases.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: TrainingFlags,
    },
    /// Run calibration trials and emit one outcome row per trial and subject.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        protocol: ProtocolFlags,
    },
    /// Per-subject errors plus the calibration curve.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        protocol: ProtocolFlags,
    },
    /// Calibration-location robustness map (CSV and SVG).
    Grid {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        protocol: ProtocolFlags,
    },
    /// Squared bias against intra-subject variance of the residuals.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Leave-one-subject-out bias consistency, or the decomposition ablation.
    Crossval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        training: TrainingFlags,
        #[command(flatten)]
        protocol: ProtocolFlags,
        /// Compare training with and without decomposition instead.
        #[arg(long)]
        ablation: bool,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Per-subject bias table used by `eval`.
    #[arg(long, value_name = "PATH")]
    pub betas: Option<PathBuf>,
    /// Override any config key; applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainingFlags {
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Train with every subject bias fixed at zero.
    #[arg(long)]
    pub no_decomposition: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ProtocolFlags {
    /// sgpc or mgpc.
    #[arg(long)]
    pub protocol: Option<String>,
    /// Calibration-set size; repeat for several sizes.
    #[arg(long = "dc-size", value_name = "N")]
    pub dc_size: Vec<usize>,
    /// SGPC neighbourhood radius in degrees (default 2).
    #[arg(long)]
    pub radius: Option<f64>,
    /// Trials per calibration-set size (default 5000).
    #[arg(long)]
    pub trials: Option<usize>,
    /// offset, fc, la or none.
    #[arg(long)]
    pub method: Option<String>,
}

/// Builds the resolved configuration: defaults, then the config file, then
/// `--set`, then dedicated flags.
fn resolve(
    common: &Common,
    training: Option<&TrainingFlags>,
    protocol: Option<&ProtocolFlags>,
    grid: bool,
) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    for (key, value) in [
        ("out", path(&common.out)),
        ("dataset", path(&common.dataset)),
        ("model", path(&common.model)),
        ("betas", path(&common.betas)),
    ] {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    if let Some(t) = training {
        if let Some(l) = t.lambda {
            cfg.train.lambda = l;
        }
        if t.no_decomposition {
            cfg.train.decomposition = false;
        }
    }
    if let Some(p) = protocol {
        if let Some(v) = &p.protocol {
            cfg.set("protocol", v)?;
        }
        if let Some(v) = &p.method {
            cfg.set("method", v)?;
        }
        if let Some(r) = p.radius {
            cfg.trial.radius = r;
        }
        if let Some(n) = p.trials {
            cfg.trial.trials = n;
        }
        if grid {
            match p.dc_size.as_slice() {
                [] => {}
                [n] => cfg.grid.dc_size = *n,
                _ => return Err(Error::InvalidConfig("grid takes a single --dc-size".into())),
            }
        } else if !p.dc_size.is_empty() {
            cfg.trial.dc_sizes = p.dc_size.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("no {what} given (use --{what} or the {what} key)")))
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<&Path> {
    let out = cfg.out.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report::write_text(out.join("config.resolved"), &cfg.resolved_text())?;
    Ok(out)
}

fn inputs(cfg: &ExperimentConfig, need_model: bool) -> Result<(Dataset, Option<Model>)> {
    let d = require(&cfg.dataset, "dataset")?;
    let m = if need_model {
        Some(require(&cfg.model, "model")?)
    } else {
        None
    };
    let data = load_dataset(d)?;
    let model = m.map(load_model).transpose()?;
    Ok((data, model))
}

fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    let (d, profiles) = generate_dataset(&cfg.world_config())?;
    let out = prepare_out(cfg)?;
    save_dataset(&d, out.join("dataset.csv"))?;
    report::profiles_table(&profiles).write(out.join("profiles.csv"))?;
    let mut t = report::Table::new(&["subject_id", "flipped", "samples"]);
    for (k, idx) in d.subject_indices() {
        t.push(vec![k.id.clone(), u8::from(k.flipped).to_string(), idx.len().to_string()]);
    }
    t.write(out.join("report.csv"))?;
    println!("synth: {} samples from {} subjects in {}", d.len(), profiles.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let (d, _) = inputs(cfg, false)?;
    let out = prepare_out(cfg)?;
    let arch = cfg.architecture(d.feature_dim());
    let tc = cfg.train_config();
    let trained = train(&d, arch, &tc)?;
    save_model(&trained.model, out.join("model.params"))?;
    let betas = if tc.decomposition {
        trained.train_biases.clone()
    } else {
        BTreeMap::new()
    };
    save_biases(&betas, out.join("betas.csv"))?;
    report::history_table(&trained.history).write(out.join("report.csv"))?;
    println!(
        "train: final loss {} after {} epochs, {} subject biases",
        trained.history.last().copied().unwrap_or(f64::NAN),
        trained.history.len(),
        betas.len()
    );
    Ok(())
}

fn cmd_calibrate(cfg: &ExperimentConfig) -> Result<()> {
    let (d, model) = inputs(cfg, true)?;
    let model = model.expect("model is required");
    let out = prepare_out(cfg)?;
    let tc = cfg.trial_config();
    let records = calibration_trial_records(&model, &d, &tc)?;
    report::trial_records_table(&records, &tc.method.to_string(), &tc.protocol.to_string())
        .write(out.join("report.csv"))?;
    println!("calibrate: {} outcome rows", records.len());
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let (d, model) = inputs(cfg, true)?;
    let model = model.expect("model is required");
    let out = prepare_out(cfg)?;
    let biases: BTreeMap<_, _> = match &cfg.betas {
        Some(p) => load_biases(p)?,
        None => d.subjects().into_iter().map(|k| (k, GazeAngle::ZERO)).collect(),
    };
    let eval = evaluate(&model, &biases, &d)?;
    let tc = cfg.trial_config();
    let curve = run_calibration_trials(&model, &d, &tc)?;
    report::curve_table(&curve, &tc.protocol.to_string()).write(out.join("report.csv"))?;
    report::eval_subjects_table(&eval).write(out.join("subjects.csv"))?;
    println!(
        "eval: mean error {:.4}, calibration-free {:.4}, lower bound {:.4}",
        eval.mean_error, eval.calibration_free_error, eval.lower_bound_error
    );
    Ok(())
}

fn cmd_grid(cfg: &ExperimentConfig) -> Result<()> {
    let (d, model) = inputs(cfg, true)?;
    let model = model.expect("model is required");
    let out = prepare_out(cfg)?;
    let map = grid_robustness_map(&model, &d, &cfg.grid_spec())?;
    report::grid_table(&map).write(out.join("report.csv"))?;
    report::write_text(out.join("grid.svg"), &report::grid_svg(&map))?;
    println!("grid: {} x {} regions", map.n_yaw, map.n_pitch);
    Ok(())
}

fn cmd_analyze(cfg: &ExperimentConfig) -> Result<()> {
    let (d, model) = inputs(cfg, true)?;
    let model = model.expect("model is required");
    let out = prepare_out(cfg)?;
    let r = bias_variance_decomposition(&model, &d)?;
    report::bias_variance_table(&r).write(out.join("report.csv"))?;
    println!(
        "analyze: mean squared bias {:.4}, mean intra-subject variance {:.4}",
        r.mean_squared_bias, r.mean_intra_subject_variance
    );
    Ok(())
}

fn cmd_crossval(cfg: &ExperimentConfig, ablation: bool) -> Result<()> {
    let (d, _) = inputs(cfg, false)?;
    let out = prepare_out(cfg)?;
    let arch = cfg.architecture(d.feature_dim());
    if ablation {
        let r = ablation_compare(&d, arch, &cfg.train_config(), &cfg.ablation_config())?;
        report::ablation_table(&r).write(out.join("report.csv"))?;
        println!(
            "crossval --ablation: lower bound {:.4} (decomposition) vs {:.4} (none)",
            r.decomposition.lower_bound_error, r.no_decomposition.lower_bound_error
        );
    } else {
        let r = train_biases_consistency(&d, arch, &cfg.train_config(), cfg.split_options())?;
        report::consistency_table(&r).write(out.join("report.csv"))?;
        println!(
            "crossval: {} folds, aligned intra SD {} vs inter SD {}",
            r.folds, r.aligned.intra_sd, r.aligned.inter_sd
        );
    }
    Ok(())
}

fn execute(cmd: Command) -> std::result::Result<(), (i32, Error)> {
    let usage = |e| (1, e);
    let runtime = |e| (2, e);
    match cmd {
        Command::Synth { common } => cmd_synth(&resolve(&common, None, None, false).map_err(usage)?),
        Command::Train { common, training } => {
            cmd_train(&resolve(&common, Some(&training), None, false).map_err(usage)?)
        }
        Command::Calibrate { common, protocol } => {
            cmd_calibrate(&resolve(&common, None, Some(&protocol), false).map_err(usage)?)
        }
        Command::Eval { common, protocol } => cmd_eval(&resolve(&common, None, Some(&protocol), false).map_err(usage)?),
        Command::Grid { common, protocol } => cmd_grid(&resolve(&common, None, Some(&protocol), true).map_err(usage)?),
        Command::Analyze { common } => cmd_analyze(&resolve(&common, None, None, false).map_err(usage)?),
        Command::Crossval {
            common,
            training,
            protocol,
            ablation,
        } => cmd_crossval(
            &resolve(&common, Some(&training), Some(&protocol), false).map_err(usage)?,
            ablation,
        ),
    }
    .map_err(|e| match e {
        // a missing input path is a usage problem, not a failed run
        Error::InvalidConfig(_) => usage(e),
        other => runtime(other),
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err((code, e)) => {
            eprintln!("error: {e}");
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("gazedecomp").chain(args.iter().copied()))
            .unwrap()
            .command
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("exp.cfg");
        fs::write(&cfg_path, "seed = 5\ntrials = 10\nradius = 3\nlambda = 0.5\n").unwrap();
        let cfg_arg = cfg_path.to_str().unwrap();
        let Command::Crossval {
            common,
            training,
            protocol,
            ..
        } = parse(&["crossval", "--config", cfg_arg, "--seed", "9", "--trials", "20", "--lambda", "0.25"])
        else {
            panic!()
        };
        let cfg = resolve(&common, Some(&training), Some(&protocol), false).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.trial.trials, 20);
        assert_eq!(cfg.trial.radius, 3.0);
        assert_eq!(cfg.train.lambda, 0.25);
    }

    #[test]
    fn set_overrides_file_and_flags_override_set() {
        let Command::Calibrate { common, protocol } =
            parse(&["calibrate", "--set", "trials=7", "--set", "method=la", "--method", "fc"])
        else {
            panic!()
        };
        let cfg = resolve(&common, None, Some(&protocol), false).unwrap();
        assert_eq!(cfg.trial.trials, 7);
        assert_eq!(cfg.trial.method.to_string(), "fc");
    }

    #[test]
    fn repeated_dc_size_builds_the_size_list() {
        let Command::Eval { common, protocol } = parse(&["eval", "--dc-size", "1", "--dc-size", "9"]) else {
            panic!()
        };
        let cfg = resolve(&common, None, Some(&protocol), false).unwrap();
        assert_eq!(cfg.trial.dc_sizes, vec![1, 9]);
        let Command::Grid { common, protocol } = parse(&["grid", "--dc-size", "4"]) else {
            panic!()
        };
        assert_eq!(resolve(&common, None, Some(&protocol), true).unwrap().grid.dc_size, 4);
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let Command::Calibrate { common, protocol } = parse(&["calibrate"]) else {
            panic!()
        };
        let cfg = resolve(&common, None, Some(&protocol), false).unwrap();
        assert_eq!(cfg.trial.trials, 5000);
        assert_eq!(cfg.trial.radius, 2.0);
        assert_eq!(cfg.hidden_units, 32);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["gazedecomp", "frobnicate"]), 1);
        assert_eq!(run(["gazedecomp", "synth", "--set", "nope=1"]), 1);
        assert_eq!(run(["gazedecomp", "train"]), 1);
        assert_eq!(run(["gazedecomp", "eval", "--protocol", "xgpc"]), 1);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let missing = dir.path().join("absent.csv");
        assert_eq!(
            run([
                "gazedecomp",
                "train",
                "--dataset",
                missing.to_str().unwrap(),
                "--out",
                out.to_str().unwrap()
            ]),
            2
        );
    }
}
