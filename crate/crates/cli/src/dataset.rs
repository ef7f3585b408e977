//! Dataset directories: a `manifest.json` plus one headerless CSV matrix per
//! sequence (rows are timesteps, columns are features).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use avfusion_core::data::{Dataset, Label, Sample, Split};
use avfusion_core::fusion::Task;
use avfusion_core::Tensor;

use crate::error::{CliError, IoContext, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TaskSpec {
    Classification { classes: usize },
    Regression,
}

impl From<Task> for TaskSpec {
    fn from(t: Task) -> Self {
        match t {
            Task::Classification { classes } => TaskSpec::Classification { classes },
            Task::Regression => TaskSpec::Regression,
        }
    }
}

impl From<TaskSpec> for Task {
    fn from(t: TaskSpec) -> Self {
        match t {
            TaskSpec::Classification { classes } => Task::Classification { classes },
            TaskSpec::Regression => Task::Regression,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub id: String,
    pub split: String,
    pub group: usize,
    /// Class index or regression score.
    pub label: serde_json::Number,
    pub audio_path: String,
    pub vision_path: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub task: TaskSpec,
    pub audio_dim: usize,
    pub vision_dim: usize,
    pub entries: Vec<Entry>,
}

/// Formats a matrix with 17 significant digits, which round-trips `f64`.
pub fn matrix_to_csv(t: &Tensor) -> String {
    let cols = t.shape().get(1).copied().unwrap_or(1).max(1);
    let mut out = String::with_capacity(t.numel() * 25);
    for row in t.data().chunks(cols) {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn csv_to_matrix(text: &str, path: &Path) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| CliError::format(path, format!("line {}: bad number `{}`", i + 1, cell.trim())))?;
            data.push(v);
        }
        let width = data.len() - before;
        match cols {
            None => cols = Some(width),
            Some(c) if c != width => {
                return Err(CliError::format(path, format!("line {}: {width} columns, expected {c}", i + 1)))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| CliError::format(path, "empty matrix"))?;
    Ok(Tensor::new([rows, cols], data)?)
}

fn label_number(label: Label) -> serde_json::Number {
    match label {
        Label::Class(c) => serde_json::Number::from(c),
        Label::Score(s) => serde_json::Number::from_f64(s).expect("finite score"),
    }
}

fn parse_label(n: &serde_json::Number, task: Task, path: &Path, id: &str) -> Result<Label> {
    let label = match task {
        Task::Classification { .. } => n
            .as_u64()
            .map(|c| Label::Class(c as usize))
            .ok_or_else(|| CliError::format(path, format!("entry {id}: class label must be a non-negative integer")))?,
        Task::Regression => Label::Score(n.as_f64().expect("json numbers are f64-representable")),
    };
    if !label.fits(task) {
        return Err(CliError::format(path, format!("entry {id}: label {n} outside the task range")));
    }
    Ok(label)
}

/// Writes `ds` under `dir`: `manifest.json` and `<split>/<id>.{audio,vision}.csv`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(ds.len());
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).at(&sub)?;
        for (i, s) in ds.split(split).iter().enumerate() {
            let id = format!("{}-{i:06}", split.name());
            let audio_path = format!("{}/{id}.audio.csv", split.name());
            let vision_path = format!("{}/{id}.vision.csv", split.name());
            let p = dir.join(&audio_path);
            fs::write(&p, matrix_to_csv(&s.audio)).at(&p)?;
            let p = dir.join(&vision_path);
            fs::write(&p, matrix_to_csv(&s.vision)).at(&p)?;
            entries.push(Entry {
                id,
                split: split.name().to_string(),
                group: s.group,
                label: label_number(s.label),
                audio_path,
                vision_path,
            });
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        task: ds.task.into(),
        audio_dim: ds.audio_dim,
        vision_dim: ds.vision_dim,
        entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").at(&path)
}

fn read_matrix(dir: &Path, rel: &str) -> Result<Tensor> {
    let path: PathBuf = dir.join(rel);
    let text = fs::read_to_string(&path).at(&path)?;
    csv_to_matrix(&text, &path)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::format(&path, e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(CliError::format(
            &path,
            format!("schema version {} is not supported (expected {SCHEMA_VERSION})", manifest.schema_version),
        ));
    }
    let task: Task = manifest.task.into();
    let mut ds = Dataset::empty(task, manifest.audio_dim, manifest.vision_dim);
    for e in &manifest.entries {
        let split = Split::parse(&e.split)
            .ok_or_else(|| CliError::format(&path, format!("entry {}: unknown split `{}`", e.id, e.split)))?;
        let sample = Sample {
            audio: read_matrix(dir, &e.audio_path)?,
            vision: read_matrix(dir, &e.vision_path)?,
            label: parse_label(&e.label, task, &path, &e.id)?,
            group: e.group,
        };
        ds.split_mut(split).push(sample);
    }
    ds.validate().map_err(|err| CliError::format(&path, err.to_string()))?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_is_exact() {
        let vals = vec![0.1, -1.0 / 3.0, 1e-300, f64::MAX, -0.0, 5e-324];
        let t = Tensor::new([2, 3], vals).unwrap();
        let text = matrix_to_csv(&t);
        assert!(text.ends_with('\n') && !text.contains("\n\n"));
        let back = csv_to_matrix(&text, Path::new("x")).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ragged_and_bad_rows_are_rejected() {
        assert!(csv_to_matrix("1,2\n3\n", Path::new("x")).is_err());
        assert!(csv_to_matrix("1,abc\n", Path::new("x")).is_err());
        assert!(csv_to_matrix("", Path::new("x")).is_err());
    }
}
