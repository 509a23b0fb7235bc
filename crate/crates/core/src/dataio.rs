//! Trajectory ingestion, CSV interchange and numerical differentiation.
//!
//! CSV layout: header `t,x0,...,x{n-1}[,dx0,...,dx{n-1}]`, one sample per
//! line, `.` as decimal separator. Floats are written as 17 significant
//! digits so a save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};

const GRID_TOL: f64 = 1e-9;

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    pub xdot: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dt: f64,
    samples: Vec<Sample>,
    source_id: String,
}

impl Trajectory {
    pub fn new(dt: f64, samples: Vec<Sample>, source_id: impl Into<String>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::domain(format!("dt must be positive, got {dt}")));
        }
        let Some(first) = samples.first() else {
            return Err(Error::domain("trajectory has no samples"));
        };
        let n = first.x.len();
        if n == 0 {
            return Err(Error::domain("state dimension must be >= 1"));
        }
        let with_dx = first.xdot.is_some();
        for (k, s) in samples.iter().enumerate() {
            if s.x.len() != n {
                return Err(Error::DimensionMismatch { expected: n, actual: s.x.len() });
            }
            match &s.xdot {
                Some(d) if !with_dx || d.len() != n => {
                    return Err(Error::domain(format!(
                        "inconsistent derivative channel at sample {}",
                        k + 1
                    )))
                }
                None if with_dx => {
                    return Err(Error::domain(format!("missing derivative at sample {}", k + 1)))
                }
                _ => {}
            }
            if k > 0 {
                let step = s.t - samples[k - 1].t;
                if (step - dt).abs() > GRID_TOL * dt {
                    return Err(Error::NonUniformGrid { row: k + 1 });
                }
            }
        }
        Ok(Self {
            dt,
            samples,
            source_id: source_id.into(),
        })
    }

    /// Builds a trajectory on the grid `t_k = k·dt` without derivatives.
    pub fn from_states(dt: f64, states: Vec<Vec<f64>>, source_id: impl Into<String>) -> Result<Self> {
        let samples = states
            .into_iter()
            .enumerate()
            .map(|(k, x)| Sample { t: k as f64 * dt, x, xdot: None })
            .collect();
        Self::new(dt, samples, source_id)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].x.len()
    }

    pub fn has_derivatives(&self) -> bool {
        self.samples[0].xdot.is_some()
    }

    /// Writes the CSV representation.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut out = String::new();
        let n = self.dim();
        out.push('t');
        for i in 0..n {
            let _ = write!(out, ",x{i}");
        }
        if self.has_derivatives() {
            for i in 0..n {
                let _ = write!(out, ",dx{i}");
            }
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&fmt_f64(s.t));
            for v in s.x.iter().chain(s.xdot.iter().flatten()) {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        w.write_all(out.as_bytes())
            .map_err(|e| Error::io(&self.source_id, e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

fn parse_header(line: &str, source_id: &str) -> Result<(usize, bool)> {
    let bad = |message: String| Error::Parse {
        source_id: source_id.to_string(),
        row: 0,
        message,
    };
    let cols: Vec<&str> = line.trim_end_matches('\r').split(',').map(str::trim).collect();
    if cols.first() != Some(&"t") {
        return Err(bad("malformed header: first column must be `t`".into()));
    }
    let names = &cols[1..];
    let n = names.iter().take_while(|c| c.starts_with('x')).count();
    if n == 0 {
        return Err(bad("malformed header: no state columns".into()));
    }
    let with_dx = match names.len() - n {
        0 => false,
        m if m == n => true,
        _ => return Err(bad("malformed header: derivative columns must match state columns".into())),
    };
    for i in 0..n {
        if names[i] != format!("x{i}") {
            return Err(bad(format!("malformed header: expected `x{i}`, found `{}`", names[i])));
        }
        if with_dx && names[n + i] != format!("dx{i}") {
            return Err(bad(format!(
                "malformed header: expected `dx{i}`, found `{}`",
                names[n + i]
            )));
        }
    }
    Ok((n, with_dx))
}

/// Parses a trajectory from CSV text. Rows are numbered from 1 after the header.
pub fn parse_trajectory<R: Read>(reader: R, source_id: &str) -> Result<Trajectory> {
    let mut lines = BufReader::new(reader).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(source_id, e))?,
        None => {
            return Err(Error::Parse {
                source_id: source_id.into(),
                row: 0,
                message: "missing header".into(),
            })
        }
    };
    let (n, with_dx) = parse_header(&header, source_id)?;
    let width = 1 + n * if with_dx { 2 } else { 1 };
    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let row = idx + 1;
        let line = line.map_err(|e| Error::io(source_id, e))?;
        let line = line.trim_end_matches('\r');
        let err = |message: String| Error::Parse {
            source_id: source_id.to_string(),
            row,
            message,
        };
        if line.trim().is_empty() {
            return Err(err("blank line".into()));
        }
        let mut vals = Vec::with_capacity(width);
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| err(format!("non-numeric cell `{cell}`")))?;
            vals.push(v);
        }
        if vals.len() != width {
            return Err(err(format!("expected {width} columns, found {}", vals.len())));
        }
        samples.push(Sample {
            t: vals[0],
            x: vals[1..=n].to_vec(),
            xdot: with_dx.then(|| vals[n + 1..].to_vec()),
        });
    }
    if samples.len() < 2 {
        return Err(Error::Parse {
            source_id: source_id.into(),
            row: samples.len(),
            message: "at least two samples are needed to infer dt".into(),
        });
    }
    let dt = samples[1].t - samples[0].t;
    if !(dt > 0.0) {
        return Err(Error::NonUniformGrid { row: 2 });
    }
    Trajectory::new(dt, samples, source_id)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(file, &path.display().to_string())
}

/// Fills the derivative channel with second-order finite differences:
/// central at interior points, one-sided three-point stencils at the ends.
/// Any existing derivatives are replaced.
pub fn differentiate(traj: &Trajectory) -> Result<Trajectory> {
    let len = traj.len();
    if len < 3 {
        return Err(Error::TooFewSamples(len));
    }
    let n = traj.dim();
    let h2 = 2.0 * traj.dt;
    let x = |k: usize, i: usize| traj.samples[k].x[i];
    let samples = (0..len)
        .map(|k| {
            let d = (0..n)
                .map(|i| match k {
                    0 => (-3.0 * x(0, i) + 4.0 * x(1, i) - x(2, i)) / h2,
                    k if k == len - 1 => {
                        (3.0 * x(k, i) - 4.0 * x(k - 1, i) + x(k - 2, i)) / h2
                    }
                    k => (x(k + 1, i) - x(k - 1, i)) / h2,
                })
                .collect();
            Sample {
                t: traj.samples[k].t,
                x: traj.samples[k].x.clone(),
                xdot: Some(d),
            }
        })
        .collect();
    Ok(Trajectory {
        dt: traj.dt,
        samples,
        source_id: traj.source_id.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    role: Role,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, role: Role) -> Result<Self> {
        let Some(first) = trajectories.first() else {
            return Err(Error::EmptyDataset);
        };
        let n = first.dim();
        for t in &trajectories {
            if t.dim() != n {
                return Err(Error::DimensionMismatch { expected: n, actual: t.dim() });
            }
        }
        Ok(Self { trajectories, role })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.trajectories[0].dim()
    }

    pub fn sample_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn has_derivatives(&self) -> bool {
        self.trajectories.iter().all(Trajectory::has_derivatives)
    }

    /// `(x, ẋ)` pairs in trajectory order, then sample order.
    pub fn pairs(&self) -> Result<Vec<(&[f64], &[f64])>> {
        let mut out = Vec::with_capacity(self.sample_count());
        for t in &self.trajectories {
            for s in &t.samples {
                let d = s.xdot.as_deref().ok_or(Error::MissingDerivatives)?;
                out.push((s.x.as_slice(), d));
            }
        }
        Ok(out)
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

/// Seeded shuffle, then the first `train_count` trajectories form the train split.
pub fn split_dataset(ds: &Dataset, train_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if train_count == 0 || train_count >= ds.len() {
        return Err(Error::domain(format!(
            "train_count must be in 1..{}, got {train_count}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.trajectories[i].clone()).collect();
    Ok((
        Dataset::new(pick(&order[..train_count]), Role::Train)?,
        Dataset::new(pick(&order[train_count..]), Role::Test)?,
    ))
}

/// On-disk dataset description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dt: f64,
    pub files: Vec<PathBuf>,
    pub role: Role,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Loads every file listed in a manifest; relative paths resolve against the
/// manifest's directory.
pub fn load_dataset(manifest_path: impl AsRef<Path>, mode: Execution) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let paths: Vec<PathBuf> = manifest
        .files
        .iter()
        .map(|f| if f.is_absolute() { f.clone() } else { base.join(f) })
        .collect();
    let loaded = map_indexed(paths.len(), mode, |i| load_trajectory(&paths[i]));
    let mut trajectories = Vec::with_capacity(loaded.len());
    for t in loaded {
        let t = t?;
        if (t.dt() - manifest.dt).abs() > GRID_TOL * manifest.dt {
            return Err(Error::domain(format!(
                "{}: dt {} disagrees with manifest dt {}",
                t.source_id(),
                t.dt(),
                manifest.dt
            )));
        }
        trajectories.push(t);
    }
    Dataset::new(trajectories, manifest.role)
}

/// Writes each trajectory as `<prefix>_<index>.csv` plus `manifest.json` under `dir`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>, prefix: &str) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let width = ds.len().to_string().len().max(3);
    let mut files = Vec::with_capacity(ds.len());
    for (i, t) in ds.trajectories.iter().enumerate() {
        let name = PathBuf::from(format!("{prefix}_{i:0width$}.csv"));
        t.save(dir.join(&name))?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        dt: ds.trajectories[0].dt(),
        files,
        role: ds.role,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
