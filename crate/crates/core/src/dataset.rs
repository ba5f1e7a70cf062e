//! Samples, datasets, the text file format and subject-level splits.
//!
//! File format, one sample per line after the header:
//!
//! ```text
//! feature_dim=<d>
//! subject_id,flipped(0|1),yaw_deg,pitch_deg,latent_yaw|_,latent_pitch|_,f1,...,fd
//! ```
//!
//! `_` marks an absent latent visual-axis value. Numbers are written with the
//! shortest representation that parses back to the same `f64`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::GazeAngle;

/// Subject identity. The horizontally flipped images of a person form a
/// subject of their own.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubjectKey {
    pub id: String,
    pub flipped: bool,
}

impl SubjectKey {
    pub fn new(id: impl Into<String>, flipped: bool) -> Self {
        Self {
            id: id.into(),
            flipped,
        }
    }

    pub fn toggled(&self) -> Self {
        Self::new(self.id.clone(), !self.flipped)
    }
}

impl fmt::Display for SubjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.flipped {
            write!(f, "{}/flip", self.id)
        } else {
            f.write_str(&self.id)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject: SubjectKey,
    pub features: Vec<f64>,
    /// Gaze label `g`.
    pub gaze: GazeAngle,
    /// Visual-axis gaze `t`, known only for synthetic data.
    pub latent_visual_axis: Option<GazeAngle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(feature_dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidDataset("feature_dim must be positive".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::InvalidDataset(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidDataset(format!("sample {i} has non-finite features")));
            }
            s.gaze.validated()?;
            if let Some(t) = s.latent_visual_axis {
                if !t.is_finite() {
                    return Err(Error::InvalidDataset(format!("sample {i} has a non-finite latent")));
                }
            }
        }
        Ok(Self {
            feature_dim,
            samples,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct subject keys in sorted order.
    pub fn subjects(&self) -> Vec<SubjectKey> {
        self.subject_indices().into_keys().collect()
    }

    /// Sample indices grouped by subject, each group in dataset order.
    pub fn subject_indices(&self) -> BTreeMap<SubjectKey, Vec<usize>> {
        let mut map: BTreeMap<SubjectKey, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.subject.clone()).or_default().push(i);
        }
        map
    }

    pub fn samples_of<'a>(&'a self, key: &'a SubjectKey) -> impl Iterator<Item = &'a Sample> + 'a {
        self.samples.iter().filter(move |s| &s.subject == key)
    }

    /// Keeps the samples whose subject satisfies `keep`, preserving order.
    pub fn filter_subjects(&self, mut keep: impl FnMut(&SubjectKey) -> bool) -> Dataset {
        Dataset {
            feature_dim: self.feature_dim,
            samples: self
                .samples
                .iter()
                .filter(|s| keep(&s.subject))
                .cloned()
                .collect(),
        }
    }

    /// Concatenation of two datasets with the same feature dimension.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.feature_dim != other.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: other.feature_dim,
            });
        }
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Ok(Dataset {
            feature_dim: self.feature_dim,
            samples,
        })
    }
}

/// One leave-one-subject-out fold.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: Dataset,
    pub test: Dataset,
    pub held_out: SubjectKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitOptions {
    /// Exclude both flip variants of the held-out person from training.
    pub pair_flipped: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self { pair_flipped: true }
    }
}

/// One fold per distinct subject key. The test set holds exactly that
/// subject's samples; with `pair_flipped` the mirrored variant of the same
/// person is dropped from training as well (and is in neither set).
pub fn leave_one_subject_out_splits(d: &Dataset, opts: SplitOptions) -> Result<Vec<Fold>> {
    let subjects = d.subjects();
    if subjects.len() < 2 {
        return Err(Error::Insufficient(format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    subjects
        .into_iter()
        .map(|held_out| {
            let test = d.filter_subjects(|k| *k == held_out);
            let train = d.filter_subjects(|k| {
                if opts.pair_flipped {
                    k.id != held_out.id
                } else {
                    *k != held_out
                }
            });
            if train.is_empty() {
                return Err(Error::Insufficient(format!(
                    "holding out {held_out} leaves no training data"
                )));
            }
            Ok(Fold {
                train,
                test,
                held_out,
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "_".to_string(), |x| x.to_string())
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for s in &d.samples {
        if s.subject.id.is_empty() || s.subject.id.contains([',', '\n', '\r']) {
            return Err(Error::InvalidDataset(format!(
                "subject id {:?} cannot be stored",
                s.subject.id
            )));
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "feature_dim={}", d.feature_dim)?;
        for s in &d.samples {
            write!(
                w,
                "{},{},{},{},{},{}",
                s.subject.id,
                u8::from(s.subject.flipped),
                s.gaze.yaw,
                s.gaze.pitch,
                fmt_opt(s.latent_visual_axis.map(|t| t.yaw)),
                fmt_opt(s.latent_visual_axis.map(|t| t.pitch)),
            )?;
            for f in &s.features {
                write!(w, ",{f}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub(crate) fn parse_dataset(text: &str, path: &Path) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let feature_dim: usize = header
        .strip_prefix("feature_dim=")
        .ok_or_else(|| err(hline, format!("malformed header {header:?}, expected feature_dim=<d>")))?
        .trim()
        .parse()
        .map_err(|e| err(hline, format!("malformed feature_dim: {e}")))?;
    if feature_dim == 0 {
        return Err(err(hline, "feature_dim must be positive".into()));
    }

    let number = |line: usize, field: &str, what: &str| -> Result<f64> {
        let v: f64 = field
            .parse()
            .map_err(|_| err(line, format!("{what}: cannot parse {field:?} as a number")))?;
        if !v.is_finite() {
            return Err(err(line, format!("{what}: non-finite value {field:?}")));
        }
        Ok(v)
    };

    let mut samples = Vec::new();
    for (line, row) in lines {
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 6 + feature_dim {
            return Err(err(
                line,
                format!(
                    "expected {} fields (6 + feature_dim={feature_dim}), found {}",
                    6 + feature_dim,
                    fields.len()
                ),
            ));
        }
        let id = fields[0];
        if id.is_empty() {
            return Err(err(line, "empty subject id".into()));
        }
        let flipped = match fields[1] {
            "0" => false,
            "1" => true,
            other => return Err(err(line, format!("flipped must be 0 or 1, found {other:?}"))),
        };
        let gaze = GazeAngle::new(number(line, fields[2], "yaw")?, number(line, fields[3], "pitch")?);
        gaze.validated().map_err(|e| err(line, e.to_string()))?;
        let latent = match (fields[4], fields[5]) {
            ("_", "_") => None,
            (y, p) => Some(GazeAngle::new(
                number(line, y, "latent yaw")?,
                number(line, p, "latent pitch")?,
            )),
        };
        let features = fields[6..]
            .iter()
            .enumerate()
            .map(|(k, f)| number(line, f, &format!("feature {}", k + 1)))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            subject: SubjectKey::new(id, flipped),
            features,
            gaze,
            latent_visual_axis: latent,
        });
    }
    Dataset::new(feature_dim, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: &str, flipped: bool, dim: usize, v: f64) -> Sample {
        Sample {
            subject: SubjectKey::new(id, flipped),
            features: (0..dim).map(|k| v + k as f64 * 0.1).collect(),
            gaze: GazeAngle::new(v, -v / 2.0),
            latent_visual_axis: None,
        }
    }

    fn parse(text: &str) -> Result<Dataset> {
        parse_dataset(text, Path::new("mem.csv"))
    }

    #[test]
    fn parses_two_rows() {
        let d = parse("feature_dim=3\na,0,1,2,_,_,0.1,0.2,0.3\nb,1,-1.5,2,-1,2.5,1,2,3\n").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.samples()[1].subject, SubjectKey::new("b", true));
        assert_eq!(d.samples()[1].latent_visual_axis, Some(GazeAngle::new(-1.0, 2.5)));
        assert_eq!(d.samples()[0].latent_visual_axis, None);
    }

    #[test]
    fn width_error_names_line() {
        let e = parse("feature_dim=3\na,0,1,2,_,_,0.1,0.2,0.3\na,0,1,2,_,_,0.1,0.2\n").unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn empty_file_is_missing_header() {
        let e = parse("").unwrap_err();
        assert!(e.to_string().contains("missing header"), "{e}");
    }

    #[test]
    fn rejects_non_finite_and_bad_header() {
        assert!(parse("feature_dim=1\na,0,1,2,_,_,NaN\n").is_err());
        assert!(parse("feature_dim=1\na,0,inf,2,_,_,1\n").is_err());
        assert!(parse("dim=1\n").is_err());
        assert!(parse("feature_dim=1\na,2,1,2,_,_,1\n").is_err());
    }

    #[test]
    fn round_trip_preserves_keys_and_latents() {
        let mut s1 = sample("p06", false, 2, 1.0 / 3.0);
        s1.latent_visual_axis = Some(GazeAngle::new(0.1 + 0.2, -7.0e-12));
        let s2 = sample("p06", true, 2, -2.5);
        let d = Dataset::new(2, vec![s1, s2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);
    }

    #[test]
    fn loso_fold_counts() {
        let mut samples = Vec::new();
        for id in ["a", "b"] {
            for k in 0..10 {
                samples.push(sample(id, false, 2, k as f64));
            }
        }
        let d = Dataset::new(2, samples).unwrap();
        let folds = leave_one_subject_out_splits(&d, SplitOptions::default()).unwrap();
        assert_eq!(folds.len(), 2);
        for f in &folds {
            assert_eq!(f.train.len(), 10);
            assert_eq!(f.test.len(), 10);
        }
    }

    #[test]
    fn loso_needs_two_subjects() {
        let d = Dataset::new(1, vec![sample("a", false, 1, 0.0)]).unwrap();
        assert!(leave_one_subject_out_splits(&d, SplitOptions::default()).is_err());
    }

    #[test]
    fn loso_fifteen_subjects() {
        let samples = (0..15)
            .flat_map(|i| (0..4).map(move |k| sample(&format!("p{i:02}"), false, 1, k as f64)))
            .collect();
        let d = Dataset::new(1, samples).unwrap();
        let folds = leave_one_subject_out_splits(&d, SplitOptions::default()).unwrap();
        assert_eq!(folds.len(), 15);
        for f in &folds {
            assert!(f.train.samples().iter().all(|s| s.subject != f.held_out));
            assert!(f.test.samples().iter().all(|s| s.subject == f.held_out));
        }
    }

    #[test]
    fn pair_flipped_removes_both_variants() {
        let samples = vec![
            sample("p06", false, 1, 1.0),
            sample("p06", true, 1, 2.0),
            sample("p07", false, 1, 3.0),
            sample("p07", true, 1, 4.0),
        ];
        let d = Dataset::new(1, samples).unwrap();
        let folds = leave_one_subject_out_splits(&d, SplitOptions { pair_flipped: true }).unwrap();
        assert_eq!(folds.len(), 4);
        let f = folds
            .iter()
            .find(|f| f.held_out == SubjectKey::new("p06", false))
            .unwrap();
        assert!(f.train.samples().iter().all(|s| s.subject.id != "p06"));
        assert_eq!(f.train.len(), 2);

        let folds = leave_one_subject_out_splits(&d, SplitOptions { pair_flipped: false }).unwrap();
        let f = folds
            .iter()
            .find(|f| f.held_out == SubjectKey::new("p06", false))
            .unwrap();
        assert!(f
            .train
            .samples()
            .iter()
            .any(|s| s.subject == SubjectKey::new("p06", true)));
    }

    proptest! {
        #[test]
        fn unpaired_splits_partition(sizes in proptest::collection::vec(1usize..6, 2..6)) {
            let samples: Vec<Sample> = sizes
                .iter()
                .enumerate()
                .flat_map(|(i, &n)| (0..n).map(move |k| sample(&format!("s{i}"), i % 2 == 1, 1, k as f64)))
                .collect();
            let d = Dataset::new(1, samples).unwrap();
            let folds = leave_one_subject_out_splits(&d, SplitOptions { pair_flipped: false }).unwrap();
            prop_assert_eq!(folds.len(), sizes.len());
            for f in folds {
                prop_assert_eq!(f.train.len() + f.test.len(), d.len());
                for s in f.test.samples() {
                    prop_assert!(!f.train.samples().contains(s));
                }
            }
        }
    }
}
