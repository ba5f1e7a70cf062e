//! Report tables (CSV) and the grid heatmap (SVG).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::SubjectKey;
use crate::error::{Error, Result};
use crate::evaluation::{AblationReport, BiasVarianceReport, EvalReport, GridMap, TrialCurve, TrialRecord, VariantSummary};
use crate::geometry::GazeAngle;
use crate::synthworld::SubjectProfile;
use crate::trainer::{BiasSpread, ConsistencyReport};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let to_io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(to_io)?;
        w.write_record(&self.header).map_err(to_io)?;
        for r in &self.rows {
            w.write_record(r).map_err(to_io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Shortest round-tripping decimal; empty for a missing value.
pub fn num(x: impl Into<Option<f64>>) -> String {
    x.into().map_or_else(String::new, |v| v.to_string())
}

fn key_cells(k: &SubjectKey) -> [String; 2] {
    [k.id.clone(), u8::from(k.flipped).to_string()]
}

fn row(k: &SubjectKey, rest: impl IntoIterator<Item = String>) -> Vec<String> {
    key_cells(k).into_iter().chain(rest).collect()
}

fn angle(a: GazeAngle) -> [String; 2] {
    [num(a.yaw), num(a.pitch)]
}

pub fn profiles_table(profiles: &[SubjectProfile]) -> Table {
    let app_dim = profiles.first().map_or(0, |p| p.appearance.len());
    let mut header = vec!["subject_id", "flipped", "bias_yaw", "bias_pitch", "slope_yaw", "slope_pitch"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend((0..app_dim).map(|i| format!("appearance_{i}")));
    let mut t = Table { header, rows: Vec::new() };
    for p in profiles {
        let mut r = row(&p.key, angle(p.bias));
        r.push(num(p.bias_slope[0][0]));
        r.push(num(p.bias_slope[1][1]));
        r.extend(p.appearance.iter().map(|&a| num(a)));
        t.push(r);
    }
    t
}

pub fn history_table(history: &[f64]) -> Table {
    let mut t = Table::new(&["epoch", "loss"]);
    for (e, l) in history.iter().enumerate() {
        t.push(vec![(e + 1).to_string(), num(*l)]);
    }
    t
}

pub fn trial_records_table(records: &[TrialRecord], method: &str, protocol: &str) -> Table {
    let mut t = Table::new(&[
        "protocol", "method", "dc_size", "trial", "subject_id", "flipped", "status", "point_yaw", "point_pitch",
        "bias_yaw", "bias_pitch", "error",
    ]);
    for r in records {
        let mut cells = vec![
            protocol.to_string(),
            method.to_string(),
            r.dc_size.to_string(),
            r.trial.to_string(),
        ];
        cells.extend(key_cells(&r.subject));
        cells.push(r.status.to_string());
        cells.push(num(r.point.map(|p| p.yaw)));
        cells.push(num(r.point.map(|p| p.pitch)));
        cells.extend(angle(r.bias_estimate));
        cells.push(num(r.error));
        t.push(cells);
    }
    t
}

pub fn curve_table(curve: &TrialCurve, protocol: &str) -> Table {
    let mut t = Table::new(&["row", "dc_size", "mean_error", "std_error", "trials", "skipped", "not_applicable"]);
    let empty = String::new;
    t.push(vec!["calibration_free".into(), empty(), num(curve.calibration_free_error), empty(), empty(), empty(), empty()]);
    t.push(vec!["lower_bound".into(), empty(), num(curve.lower_bound_error), empty(), empty(), empty(), empty()]);
    for p in &curve.points {
        t.push(vec![
            protocol.to_string(),
            p.dc_size.to_string(),
            num(p.mean_error),
            num(p.std_error),
            p.trials.to_string(),
            p.skipped.to_string(),
            p.not_applicable.to_string(),
        ]);
    }
    t
}

pub fn eval_subjects_table(report: &EvalReport) -> Table {
    let mut t = Table::new(&[
        "subject_id", "flipped", "n", "mean_error", "residual_mean_yaw", "residual_mean_pitch", "residual_sd_yaw",
        "residual_sd_pitch",
    ]);
    for (k, s) in &report.per_subject {
        let mut cells = vec![s.n.to_string(), num(s.mean_error)];
        cells.extend(angle(s.residual_mean));
        cells.extend(angle(s.residual_sd));
        t.push(row(k, cells));
    }
    t
}

pub fn grid_table(map: &GridMap) -> Table {
    let mut t = Table::new(&[
        "yaw_index", "pitch_index", "yaw_min", "yaw_max", "pitch_min", "pitch_max", "mean_error", "std_error",
        "benefit_count", "subjects", "feasible_points", "infeasible_points",
    ]);
    for pi in 0..map.n_pitch {
        for yi in 0..map.n_yaw {
            let c = map.cell(yi, pi);
            t.push(vec![
                yi.to_string(),
                pi.to_string(),
                num(c.yaw.0),
                num(c.yaw.1),
                num(c.pitch.0),
                num(c.pitch.1),
                num(c.mean_error),
                num(c.std_error),
                c.benefit_count.map_or_else(String::new, |b| b.to_string()),
                c.subjects.to_string(),
                c.feasible_points.to_string(),
                c.infeasible_points.to_string(),
            ]);
        }
    }
    t
}

pub fn bias_variance_table(r: &BiasVarianceReport) -> Table {
    let mut t = Table::new(&["row", "flipped", "n", "mean_yaw", "mean_pitch", "variance_yaw", "variance_pitch", "total"]);
    let empty = String::new;
    t.push(vec![
        "mean_squared_bias".into(),
        empty(),
        r.per_subject.len().to_string(),
        num(r.squared_bias_per_axis.yaw),
        num(r.squared_bias_per_axis.pitch),
        empty(),
        empty(),
        num(r.mean_squared_bias),
    ]);
    t.push(vec![
        "mean_intra_subject_variance".into(),
        empty(),
        r.per_subject.len().to_string(),
        empty(),
        empty(),
        num(r.intra_variance_per_axis.yaw),
        num(r.intra_variance_per_axis.pitch),
        num(r.mean_intra_subject_variance),
    ]);
    for (k, s) in &r.per_subject {
        let mut cells = vec![s.n.to_string()];
        cells.extend(angle(s.mean));
        cells.extend(angle(s.variance));
        cells.push(empty());
        t.push(row(k, cells));
    }
    t
}

fn spread_rows(t: &mut Table, label: &str, s: &BiasSpread) {
    for (k, b) in &s.per_subject {
        let mut cells = vec![label.to_string()];
        cells.extend(key_cells(k));
        cells.push(b.folds.to_string());
        cells.extend(angle(b.mean));
        cells.extend(angle(b.sd));
        t.push(cells);
    }
    for (name, v) in [("intra_sd", s.intra_sd), ("inter_sd", s.inter_sd)] {
        let mut cells = vec![label.to_string(), name.to_string(), String::new(), String::new()];
        cells.extend(angle(v));
        cells.extend([String::new(), String::new()]);
        t.push(cells);
    }
}

/// Per-subject mean and SD of the learned training bias across folds.
pub fn consistency_table(r: &ConsistencyReport) -> Table {
    let mut t = Table::new(&[
        "alignment", "subject_id", "flipped", "folds", "mean_yaw", "mean_pitch", "sd_yaw", "sd_pitch",
    ]);
    spread_rows(&mut t, "raw", &r.raw);
    spread_rows(&mut t, "aligned", &r.aligned);
    t
}

fn variant_cells(v: &VariantSummary) -> [String; 3] {
    [num(v.calibration_free_error), num(v.sgpc_error), num(v.lower_bound_error)]
}

pub fn ablation_table(r: &AblationReport) -> Table {
    let mut t = Table::new(&[
        "subject_id", "flipped", "d_calibration_free", "d_sgpc", "d_lower_bound", "nd_calibration_free", "nd_sgpc",
        "nd_lower_bound",
    ]);
    let mean = SubjectKey::new("mean", false);
    for (k, d, nd) in r
        .per_fold
        .iter()
        .map(|(k, d, nd)| (k, d, nd))
        .chain(std::iter::once((&mean, &r.decomposition, &r.no_decomposition)))
    {
        t.push(row(k, variant_cells(d).into_iter().chain(variant_cells(nd))));
    }
    t
}

fn heat(x: f64, lo: f64, hi: f64) -> String {
    let u = if hi > lo { ((x - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    // white to red
    let g = (255.0 * (1.0 - 0.8 * u)).round() as u8;
    format!("rgb(255,{g},{g})")
}

/// Heatmap of region means: yaw left to right, pitch bottom to top. Each
/// populated cell carries its mean error and benefit count.
pub fn grid_svg(map: &GridMap) -> String {
    const CELL: usize = 80;
    const MARGIN: usize = 40;
    let (w, h) = (map.n_yaw * CELL + 2 * MARGIN, map.n_pitch * CELL + 2 * MARGIN);
    let means: Vec<f64> = map.cells.iter().filter_map(|c| c.mean_error).collect();
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN}" y="24" font-size="14">dc_size {} / {} subjects / calibration-free {:.3}</text>"#,
        map.spec.dc_size, map.subjects, map.calibration_free_error
    );
    for pi in 0..map.n_pitch {
        for yi in 0..map.n_yaw {
            let c = map.cell(yi, pi);
            let x = MARGIN + yi * CELL;
            let y = MARGIN + (map.n_pitch - 1 - pi) * CELL;
            let fill = c.mean_error.map_or_else(|| "rgb(220,220,220)".to_string(), |m| heat(m, lo, hi));
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="black"/>"#
            );
            let (cx, cy) = (x + CELL / 2, y + CELL / 2);
            match (c.mean_error, c.benefit_count) {
                (Some(m), Some(b)) => {
                    let _ = writeln!(
                        s,
                        r#"<text x="{cx}" y="{}" font-size="14" text-anchor="middle">{m:.2}</text>"#,
                        cy - 4
                    );
                    let _ = writeln!(
                        s,
                        r#"<text x="{cx}" y="{}" font-size="11" text-anchor="middle">{b}/{}</text>"#,
                        cy + 14,
                        c.subjects
                    );
                }
                _ => {
                    let _ = writeln!(s, r#"<text x="{cx}" y="{cy}" font-size="12" text-anchor="middle">n/a</text>"#);
                }
            }
        }
    }
    let (y0, y1) = map.spec.yaw_extent;
    let (p0, p1) = map.spec.pitch_extent;
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">yaw {y0} to {y1}</text>"#,
        w / 2,
        h - 12
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">pitch {p0} to {p1}</text>"#,
        h / 2,
        h / 2
    );
    s.push_str("</svg>\n");
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
