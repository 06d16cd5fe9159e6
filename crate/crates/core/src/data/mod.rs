//! Dataset ingestion: the UCI epileptic seizure CSV, task relabeling,
//! seeded 76/12/12 splitting and per-position standardization.

mod synth;

pub use synth::synthetic_samples;

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::SIGNAL_LEN;
use crate::tensor::Tensor;

pub const TRAIN_PERCENT: usize = 76;
pub const VAL_PERCENT: usize = 12;
pub const STD_FLOOR: f64 = 1e-8;

/// One 178-reading EEG segment with its original 1..=5 label.
#[derive(Debug, Clone, PartialEq)]
pub struct EegSample {
    pub readings: Vec<f32>,
    pub raw_label: u8,
    pub source_id: Option<String>,
}

/// Raw labels 5..1 are the recording sets A..E.
pub fn raw_label_letter(raw: u8) -> char {
    match raw {
        1..=5 => (b'A' + (5 - raw)) as char,
        _ => '?',
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<EegSample>> {
    let path = path.as_ref();
    read_csv(File::open(path)?, path)
}

/// Parses UCI-format rows from any reader; `path` is only used in errors.
pub fn read_csv<R: Read>(reader: R, path: &Path) -> Result<Vec<EegSample>> {
    let expected = SIGNAL_LEN + 2;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let row_err = |line: u64, detail: String| Error::DataRow {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let header = rdr.headers()?.clone();
    // split files written by `Prepared::write_split` carry a trailing task_label
    let has_task = header.len() == expected + 1 && header.get(expected) == Some("task_label");
    if header.len() != expected && !has_task {
        return Err(row_err(
            1,
            format!("header has {} columns, expected {expected}", header.len()),
        ));
    }
    let width = header.len();
    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(row_err(
                line,
                format!(
                    "{} columns, expected {width} ({} readings)",
                    record.len(),
                    record.len().saturating_sub(width - SIGNAL_LEN)
                ),
            ));
        }
        let mut readings = Vec::with_capacity(SIGNAL_LEN);
        for (j, cell) in record.iter().enumerate().skip(1).take(SIGNAL_LEN) {
            let v: f32 = cell
                .trim()
                .parse()
                .map_err(|_| row_err(line, format!("column X{j}: non-numeric value {cell:?}")))?;
            if !v.is_finite() {
                return Err(row_err(line, format!("column X{j}: non-finite value {cell:?}")));
            }
            readings.push(v);
        }
        let cell = record[expected - 1].trim();
        let raw_label = cell
            .parse::<u8>()
            .ok()
            .filter(|l| (1..=5).contains(l))
            .ok_or_else(|| row_err(line, format!("label {cell:?} outside 1..5")))?;
        let id = record[0].trim();
        samples.push(EegSample {
            readings,
            raw_label,
            source_id: (!id.is_empty()).then(|| id.to_string()),
        });
    }
    Ok(samples)
}

pub fn write_csv(path: impl AsRef<Path>, samples: &[EegSample]) -> Result<()> {
    write_rows(path.as_ref(), samples.iter().map(|s| (s, None)))
}

fn write_rows<'a>(path: &Path, rows: impl Iterator<Item = (&'a EegSample, Option<usize>)>) -> Result<()> {
    let mut rows = rows.peekable();
    let with_task = matches!(rows.peek(), Some((_, Some(_))));
    let mut out = std::io::BufWriter::new(File::create(path)?);
    let mut header = String::new();
    for j in 1..=SIGNAL_LEN {
        header.push_str(&format!(",X{j}"));
    }
    header.push_str(",y");
    if with_task {
        header.push_str(",task_label");
    }
    writeln!(out, "{header}")?;
    for (s, task) in rows {
        let mut line = s.source_id.clone().unwrap_or_default();
        for v in &s.readings {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push_str(&format!(",{}", s.raw_label));
        if let Some(t) = task {
            line.push_str(&format!(",{t}"));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Task definitions over the raw labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TaskSpec {
    id: u8,
}

impl TryFrom<u8> for TaskSpec {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        TaskSpec::new(id)
    }
}

impl From<TaskSpec> for u8 {
    fn from(t: TaskSpec) -> u8 {
        t.id
    }
}

impl TaskSpec {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=4).contains(&id) {
            Ok(Self { id })
        } else {
            Err(Error::Config(format!("task id {id} not in 1..4")))
        }
    }

    pub fn all() -> [TaskSpec; 4] {
        [1, 2, 3, 4].map(|id| TaskSpec { id })
    }

    pub fn id(self) -> u8 {
        self.id
    }

    pub fn num_classes(self) -> usize {
        match self.id {
            1 | 2 => 2,
            3 => 3,
            _ => 5,
        }
    }

    /// Task class of a raw label, `None` when the task excludes it.
    pub fn class_of(self, raw: u8) -> Option<usize> {
        match (self.id, raw) {
            (_, 4 | 5) if self.id != 4 => Some(0),
            (1, 1) => Some(1),
            (1, _) => None,
            (2, 1..=3) => Some(1),
            (3, 2 | 3) => Some(1),
            (3, 1) => Some(2),
            (4, 1..=5) => Some(5 - raw as usize),
            _ => None,
        }
    }

    pub fn class_names(self) -> Vec<&'static str> {
        match self.id {
            1 => vec!["healthy(A,B)", "ictal(E)"],
            2 => vec!["healthy(A,B)", "unhealthy(C,D,E)"],
            3 => vec!["healthy(A,B)", "pre-ictal(C,D)", "ictal(E)"],
            _ => vec!["A", "B", "C", "D", "E"],
        }
    }
}

/// Samples kept by a task, with their task class indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: TaskSpec,
    pub samples: Vec<EegSample>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.task.num_classes()
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }
}

pub fn relabel(samples: Vec<EegSample>, task: TaskSpec) -> Dataset {
    let (samples, labels): (Vec<_>, Vec<_>) = samples
        .into_iter()
        .filter_map(|s| task.class_of(s.raw_label).map(|c| (s, c)))
        .unzip();
    Dataset { task, samples, labels }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub stratified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

impl SplitAssignment {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// `(train, val, test)` sizes for a group of `n`: floor of 76% and 12%, the
/// remainder to test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * TRAIN_PERCENT / 100;
    let val = n * VAL_PERCENT / 100;
    (train, val, n - train - val)
}

/// Seeded shuffled split. Stratified mode splits each raw-label group
/// separately, which also stratifies every task class.
pub fn split(data: &Dataset, seed: u64, stratified: bool) -> Result<SplitAssignment> {
    let counts = data.class_counts(&(0..data.len()).collect::<Vec<_>>());
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!(
            "task {} class {c} ({}) has no samples",
            data.task.id(),
            data.task.class_names()[c]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        (1..=5u8)
            .map(|raw| (0..data.len()).filter(|&i| data.samples[i].raw_label == raw).collect())
            .collect()
    } else {
        vec![(0..data.len()).collect()]
    };
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut group in groups {
        group.shuffle(&mut rng);
        let (a, b, _) = split_sizes(group.len());
        train.extend_from_slice(&group[..a]);
        val.extend_from_slice(&group[a..a + b]);
        test.extend_from_slice(&group[a + b..]);
    }
    for part in [&mut train, &mut val, &mut test] {
        part.shuffle(&mut rng);
    }
    Ok(SplitAssignment {
        train,
        val,
        test,
        seed,
        stratified,
    })
}

/// Per-position mean and standard deviation fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    /// Mean 0 and std 1: the transform is a no-op.
    pub fn identity(len: usize) -> Self {
        Self {
            mean: vec![0.0; len],
            std: vec![1.0; len],
        }
    }

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let rows: Vec<&[f32]> = rows.into_iter().collect();
        let len = rows
            .first()
            .map(|r| r.len())
            .ok_or_else(|| Error::Data("cannot fit standardization on an empty split".into()))?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; len];
        for r in &rows {
            for (m, &v) in mean.iter_mut().zip(*r) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; len];
        for r in &rows {
            for ((s, &v), m) in var.iter_mut().zip(*r).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|&s| (s / n).sqrt() as f32).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn apply(&self, row: &[f32], out: &mut [f32]) {
        for (((o, &v), &m), &s) in out.iter_mut().zip(row).zip(&self.mean).zip(&self.std) {
            *o = ((v as f64 - m as f64) / (s as f64).max(STD_FLOOR)) as f32;
        }
    }

    pub fn apply_row(&self, row: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; row.len()];
        self.apply(row, &mut out);
        out
    }
}

/// One split as a flat standardized feature matrix plus labels.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
    pub signal_len: usize,
}

impl SplitData {
    pub fn new(data: &Dataset, indices: &[usize], standardizer: &Standardizer) -> Self {
        let signal_len = standardizer.len();
        let mut features = vec![0.0; indices.len() * signal_len];
        for (chunk, &i) in features.chunks_exact_mut(signal_len).zip(indices) {
            standardizer.apply(&data.samples[i].readings, chunk);
        }
        Self {
            features,
            labels: indices.iter().map(|&i| data.labels[i]).collect(),
            signal_len,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[B x 1 x L]` input tensor and labels for the given rows.
    pub fn batch(&self, rows: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let l = self.signal_len;
        let mut x = Vec::with_capacity(rows.len() * l);
        for &r in rows {
            x.extend_from_slice(&self.features[r * l..(r + 1) * l]);
        }
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        (
            Tensor::from_vec(&[rows.len(), 1, l], x).expect("non-empty batch"),
            labels,
        )
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let l = self.signal_len;
        let mut features = Vec::with_capacity(rows.len() * l);
        for &r in rows {
            features.extend_from_slice(&self.features[r * l..(r + 1) * l]);
        }
        Self {
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            signal_len: l,
        }
    }
}

/// Relabeled, split and standardized data ready for training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub assignment: SplitAssignment,
    pub standardizer: Standardizer,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub seed: u64,
    pub stratified: bool,
    pub standardize: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            stratified: true,
            standardize: true,
        }
    }
}

impl Prepared {
    pub fn new(samples: Vec<EegSample>, task: TaskSpec, opts: PrepareOptions) -> Result<Self> {
        let dataset = relabel(samples, task);
        let assignment = split(&dataset, opts.seed, opts.stratified)?;
        let standardizer = if opts.standardize {
            Standardizer::fit(assignment.train.iter().map(|&i| dataset.samples[i].readings.as_slice()))?
        } else {
            Standardizer::identity(SIGNAL_LEN)
        };
        let train = SplitData::new(&dataset, &assignment.train, &standardizer);
        let val = SplitData::new(&dataset, &assignment.val, &standardizer);
        let test = SplitData::new(&dataset, &assignment.test, &standardizer);
        Ok(Self {
            dataset,
            assignment,
            standardizer,
            train,
            val,
            test,
        })
    }

    pub fn split(&self, name: SplitName) -> &SplitData {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Writes one split with the original readings and a `task_label` column.
    pub fn write_split(&self, name: SplitName, path: impl AsRef<Path>) -> Result<()> {
        let rows = self
            .assignment
            .get(name)
            .iter()
            .map(|&i| (&self.dataset.samples[i], Some(self.dataset.labels[i])));
        write_rows(path.as_ref(), rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(raw: u8, v: f32) -> EegSample {
        EegSample {
            readings: vec![v; SIGNAL_LEN],
            raw_label: raw,
            source_id: None,
        }
    }

    fn stock_like(per_class: usize) -> Vec<EegSample> {
        (0..per_class * 5)
            .map(|i| sample((i % 5) as u8 + 1, i as f32))
            .collect()
    }

    #[test]
    fn task_maps() {
        let t = |id| TaskSpec::new(id).unwrap();
        let map = |id| (1..=5).map(|r| t(id).class_of(r)).collect::<Vec<_>>();
        assert_eq!(map(1), vec![Some(1), None, None, Some(0), Some(0)]);
        assert_eq!(map(2), vec![Some(1), Some(1), Some(1), Some(0), Some(0)]);
        assert_eq!(map(3), vec![Some(2), Some(1), Some(1), Some(0), Some(0)]);
        assert_eq!(map(4), vec![Some(4), Some(3), Some(2), Some(1), Some(0)]);
        for task in TaskSpec::all() {
            assert_eq!(task.class_of(1), Some(task.num_classes() - 1));
            assert_eq!(task.class_names().len(), task.num_classes());
        }
        assert!(TaskSpec::new(0).is_err() && TaskSpec::new(5).is_err());
    }

    #[test]
    fn letters() {
        let s: String = (1..=5).rev().map(raw_label_letter).collect();
        assert_eq!(s, "ABCDE");
    }

    #[test]
    fn stock_split_sizes() {
        let all = stock_like(2300);
        let d4 = relabel(all.clone(), TaskSpec::new(4).unwrap());
        let s = split(&d4, 3, true).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8740, 1380, 1380));
        let u = split(&d4, 3, false).unwrap();
        assert_eq!((u.train.len(), u.val.len(), u.test.len()), (8740, 1380, 1380));

        let d1 = relabel(all, TaskSpec::new(1).unwrap());
        assert_eq!(d1.len(), 6900);
        let s = split(&d1, 3, true).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5244, 828, 828));
        for part in [&s.train, &s.val, &s.test] {
            let mut per_raw = [0usize; 6];
            for &i in part.iter() {
                per_raw[d1.samples[i].raw_label as usize] += 1;
            }
            assert_eq!(per_raw[1], per_raw[4]);
            assert_eq!(per_raw[4], per_raw[5]);
        }
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let d = relabel(stock_like(37), TaskSpec::new(3).unwrap());
        let a = split(&d, 9, true).unwrap();
        assert_eq!(a, split(&d, 9, true).unwrap());
        assert_ne!(a.train, split(&d, 10, true).unwrap().train);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
    }

    #[test]
    fn empty_class_rejected() {
        let only_healthy: Vec<_> = (0..20).map(|i| sample(5, i as f32)).collect();
        let d = relabel(only_healthy, TaskSpec::new(2).unwrap());
        assert!(matches!(split(&d, 0, true), Err(Error::Data(_))));
    }

    #[test]
    fn standardize_cases() {
        let rows = [vec![1.0f32, 5.0, 2.0], vec![3.0, 5.0, 6.0]];
        let st = Standardizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(st.mean, vec![2.0, 5.0, 4.0]);
        assert_eq!(st.std, vec![1.0, 0.0, 2.0]);
        let z: Vec<Vec<f32>> = rows.iter().map(|r| st.apply_row(r)).collect();
        assert_eq!(z[0], vec![-1.0, 0.0, -1.0]);
        assert_eq!(z[1], vec![1.0, 0.0, 1.0]);

        // refitting on standardized data gives (near) identity stats;
        // reapplying the stored stats is not idempotent
        let again = Standardizer::fit(z.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(again.apply_row(&z[1]), z[1]);
        assert_ne!(st.apply_row(&z[1]), z[1]);
    }

    #[test]
    fn header_and_row_validation() {
        let header = std::iter::once(String::new())
            .chain((1..=SIGNAL_LEN).map(|j| format!("X{j}")))
            .chain(std::iter::once("y".into()))
            .collect::<Vec<_>>()
            .join(",");
        let row = |n: usize, label: &str| format!("id,{},{label}", vec!["1.5"; n].join(","));
        let p = Path::new("mem.csv");
        let ok = format!("{header}\n{}\n{}\n", row(178, "1"), row(178, "5"));
        let s = read_csv(ok.as_bytes(), p).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].source_id.as_deref(), Some("id"));
        assert_eq!(s[1].raw_label, 5);

        let short = format!("{header}\n{}\n{}\n", row(178, "1"), row(177, "1"));
        match read_csv(short.as_bytes(), p) {
            Err(Error::DataRow { line, detail, .. }) => {
                assert_eq!(line, 3);
                assert!(detail.contains("177 readings"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
        let bad_label = format!("{header}\n{}\n", row(178, "6"));
        assert!(matches!(
            read_csv(bad_label.as_bytes(), p),
            Err(Error::DataRow { line: 2, .. })
        ));
        let bad_cell = format!("{header}\nid,abc,{},1\n", vec!["0"; 177].join(","));
        assert!(matches!(
            read_csv(bad_cell.as_bytes(), p),
            Err(Error::DataRow { line: 2, .. })
        ));
    }
}
