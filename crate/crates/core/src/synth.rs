//! Synthetic classification tasks with known concept ceilings.
//!
//! Inputs are linear images of signed true concept bits plus a one-hot
//! nuisance index plus Gaussian noise:
//!
//! ```text
//! x = c_signed W_c + onehot(z) W_z + noise
//! ```
//!
//! Three flavors differ in how labels and *observed* concepts relate to the
//! true bits:
//!
//! * `Complete`: y is a function of the true bits alone; observed concepts
//!   are the bits (optionally flipped). A perfect concept user hits 1.0.
//! * `IncompletePerformant`: y = group(bits) * l + z; concepts identify the
//!   group but not the nuisance z, capping concept-only accuracy at 1 / l.
//! * `Nonperformant`: same label structure, but observed concepts are fresh
//!   coin flips carrying no information; concept-only accuracy is the best
//!   constant guess.
//!
//! `concept_ceiling` returns the exact Bayes accuracy of a predictor that
//! sees only the observed concepts, by enumeration when bits are flipped.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Complete,
    IncompletePerformant,
    Nonperformant,
    /// Loaded from a CSV; no generative story, no analytic ceiling.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of concept bits.
    pub k: usize,
    /// Nuisance cardinality; 1 means no nuisance variation.
    pub l: usize,
    /// Groups for the incomplete and nonperformant kinds.
    pub n_groups: usize,
    pub n_classes: usize,
    /// Input dimension.
    pub d: usize,
    pub input_noise: f64,
    pub concept_flip_prob: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn complete(k: usize, n_classes: usize) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Complete,
            k,
            l: 1,
            n_groups: 1,
            n_classes,
            d: 32,
            input_noise: 0.1,
            concept_flip_prob: 0.0,
            n_train: 7000,
            n_val: 1000,
            n_test: 2000,
            seed: 0,
        }
    }

    pub fn grouped(kind: TaskKind, k: usize, n_groups: usize, l: usize) -> TaskSpec {
        TaskSpec {
            kind,
            k,
            l,
            n_groups,
            n_classes: n_groups * l,
            d: 32,
            input_noise: 0.1,
            concept_flip_prob: 0.0,
            n_train: 7000,
            n_val: 1000,
            n_test: 2000,
            seed: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::InvalidConfig(msg));
        if self.kind == TaskKind::External {
            return fail("external tasks are loaded from CSV, not generated".into());
        }
        if self.k == 0 || self.k > 20 {
            return fail(format!("k = {} outside 1..=20", self.k));
        }
        if self.d == 0 {
            return fail("d must be positive".into());
        }
        if self.l == 0 {
            return fail("l must be positive".into());
        }
        if self.n_classes < 2 {
            return fail(format!("n_classes = {} needs at least 2", self.n_classes));
        }
        if !(0.0..=0.5).contains(&self.concept_flip_prob) {
            return fail(format!("concept_flip_prob = {} outside [0, 0.5]", self.concept_flip_prob));
        }
        if self.input_noise < 0.0 || !self.input_noise.is_finite() {
            return fail(format!("input_noise = {}", self.input_noise));
        }
        if self.n_train < 2 {
            return fail("need at least 2 training samples".into());
        }
        match self.kind {
            TaskKind::Complete => {
                if self.k < 64 && self.n_classes > (1 << self.k) {
                    return fail(format!(
                        "complete tasks need n_classes <= 2^k, got {} > 2^{}",
                        self.n_classes, self.k
                    ));
                }
                Ok(())
            }
            TaskKind::IncompletePerformant | TaskKind::Nonperformant => {
                if self.n_groups == 0 {
                    return fail("n_groups must be positive".into());
                }
                if self.n_classes != self.n_groups * self.l {
                    return fail(format!(
                        "grouped tasks need n_classes = n_groups * l, got {} vs {} * {}",
                        self.n_classes, self.n_groups, self.l
                    ));
                }
                Ok(())
            }
            TaskKind::External => unreachable!(),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            TaskKind::Complete => format!("complete_k{}_c{}", self.k, self.n_classes),
            TaskKind::IncompletePerformant => {
                format!("incomplete_k{}_g{}_l{}", self.k, self.n_groups, self.l)
            }
            TaskKind::Nonperformant => {
                format!("nonperformant_k{}_g{}_l{}", self.k, self.n_groups, self.l)
            }
            TaskKind::External => "external".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub x: Matrix,
    pub c: Matrix,
    pub y: Vec<usize>,
    pub split: Vec<Split>,
    pub n_classes: usize,
    /// Exact Bayes accuracy from observed concepts alone, when known.
    pub ceiling: Option<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn concept_dim(&self) -> usize {
        self.c.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Gathered (x, c, y) for one split.
    pub fn part(&self, split: Split) -> Result<(Matrix, Matrix, Vec<usize>)> {
        let idx = self.indices(split);
        let x = self.x.gather_rows(&idx)?;
        let c = self.c.gather_rows(&idx)?;
        let y = idx.iter().map(|&i| self.y[i]).collect();
        Ok((x, c, y))
    }
}

fn code(bits: &[bool]) -> usize {
    bits.iter()
        .enumerate()
        .fold(0usize, |acc, (j, &b)| acc | ((b as usize) << j))
}

pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut wrng = stream_rng(spec.seed, Stream::DataWeights);
    let scale = 1.0 / (spec.d as f64).sqrt();
    let w_c = Matrix::from_fn(spec.k, spec.d, |_, _| {
        let v: f64 = StandardNormal.sample(&mut wrng);
        v * scale
    });
    let w_z = Matrix::from_fn(spec.l, spec.d, |_, _| {
        let v: f64 = StandardNormal.sample(&mut wrng);
        v * scale
    });

    let n = spec.total();
    let mut x = Matrix::zeros(n, spec.d);
    let mut c = Matrix::zeros(n, spec.k);
    let mut y = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    let mut srng = stream_rng(spec.seed, Stream::DataSamples);

    for i in 0..n {
        let bits: Vec<bool> = (0..spec.k).map(|_| srng.gen_bool(0.5)).collect();
        let z = srng.gen_range(0..spec.l);
        let observed: Vec<bool> = match spec.kind {
            TaskKind::Complete | TaskKind::IncompletePerformant => bits
                .iter()
                .map(|&b| {
                    if spec.concept_flip_prob > 0.0 && srng.gen_bool(spec.concept_flip_prob) {
                        !b
                    } else {
                        b
                    }
                })
                .collect(),
            TaskKind::Nonperformant => (0..spec.k).map(|_| srng.gen_bool(0.5)).collect(),
            TaskKind::External => unreachable!(),
        };
        let label = match spec.kind {
            TaskKind::Complete => code(&bits) % spec.n_classes,
            TaskKind::IncompletePerformant | TaskKind::Nonperformant => {
                (code(&bits) % spec.n_groups) * spec.l + z
            }
            TaskKind::External => unreachable!(),
        };

        let row = x.row_mut(i);
        for (j, &b) in bits.iter().enumerate() {
            let signed = if b { 1.0 } else { -1.0 };
            for (dcol, v) in row.iter_mut().enumerate() {
                *v += signed * w_c[(j, dcol)];
            }
        }
        for (dcol, v) in row.iter_mut().enumerate() {
            *v += w_z[(z, dcol)];
        }
        for v in row.iter_mut() {
            let noise: f64 = StandardNormal.sample(&mut srng);
            *v += spec.input_noise * noise;
        }

        for (j, &b) in observed.iter().enumerate() {
            c.set(i, j, if b { 1.0 } else { 0.0 });
        }
        y.push(label);
        split.push(if i < spec.n_train {
            Split::Train
        } else if i < spec.n_train + spec.n_val {
            Split::Val
        } else {
            Split::Test
        });
    }

    Ok(Dataset {
        x,
        c,
        y,
        split,
        n_classes: spec.n_classes,
        ceiling: Some(concept_ceiling(spec)?),
    })
}

/// Exact accuracy of the Bayes-optimal predictor that observes only the
/// concept vector. Closed form when concepts are unflipped; full enumeration
/// over (observed, true) bit pairs otherwise, which caps flipped tasks at
/// k <= 12.
pub fn concept_ceiling(spec: &TaskSpec) -> Result<f64> {
    spec.validate()?;
    let p = spec.concept_flip_prob;
    match spec.kind {
        TaskKind::Complete => {
            if p == 0.0 {
                Ok(1.0)
            } else {
                enumerate_ceiling(spec.k, p, 1.0, |b| code(b) % spec.n_classes)
            }
        }
        TaskKind::IncompletePerformant => {
            // The nuisance z is independent of the concepts, so the best the
            // concept user can do is nail the group and guess z.
            if p == 0.0 {
                Ok(1.0 / spec.l as f64)
            } else {
                enumerate_ceiling(spec.k, p, 1.0 / spec.l as f64, |b| code(b) % spec.n_groups)
            }
        }
        TaskKind::Nonperformant => {
            // Observed concepts are independent noise; the optimum is the
            // most likely class. Groups are not equiprobable when 2^k is not
            // a multiple of n_groups.
            let mut counts = vec![0usize; spec.n_groups];
            for codeval in 0..(1usize << spec.k) {
                counts[codeval % spec.n_groups] += 1;
            }
            let max_count = *counts.iter().max().unwrap();
            let total = (1usize << spec.k) as f64;
            Ok((max_count as f64 / total) / spec.l as f64)
        }
        TaskKind::External => Err(CoreError::InvalidConfig(
            "external tasks have no analytic ceiling".into(),
        )),
    }
}

/// Sum over observed patterns of the best posterior target mass, times a
/// factor for the unpredictable part of the label.
fn enumerate_ceiling(
    k: usize,
    flip: f64,
    factor: f64,
    target: impl Fn(&[bool]) -> usize,
) -> Result<f64> {
    if k > 12 {
        return Err(CoreError::InvalidConfig(format!(
            "exact ceiling enumeration needs k <= 12 with flipped concepts, got k = {k}"
        )));
    }
    let size = 1usize << k;
    let prior = 1.0 / size as f64;
    let mut targets = vec![0usize; size];
    let mut bits = vec![false; k];
    for codeval in 0..size {
        for (j, b) in bits.iter_mut().enumerate() {
            *b = (codeval >> j) & 1 == 1;
        }
        targets[codeval] = target(&bits);
    }
    let n_targets = targets.iter().max().unwrap() + 1;
    let mut total = 0.0;
    for observed in 0..size {
        let mut mass = vec![0.0f64; n_targets];
        for truecode in 0..size {
            let dist = (observed ^ truecode).count_ones() as i32;
            let likelihood = flip.powi(dist) * (1.0 - flip).powi(k as i32 - dist);
            mass[targets[truecode]] += prior * likelihood;
        }
        total += mass.iter().cloned().fold(0.0, f64::max);
    }
    Ok(total * factor)
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let d = ds.input_dim();
    let k = ds.concept_dim();
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "x_{j},");
    }
    for j in 0..k {
        let _ = write!(out, "c_{j},");
    }
    out.push_str("y,split\n");
    for i in 0..ds.len() {
        for j in 0..d {
            let _ = write!(out, "{},", ds.x[(i, j)]);
        }
        for j in 0..k {
            let _ = write!(out, "{},", ds.c[(i, j)]);
        }
        let _ = write!(out, "{},{}\n", ds.y[i], ds.split[i].as_str());
    }
    std::fs::write(path, out).map_err(|e| CoreError::io(path.display().to_string(), e))
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(file.clone(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| CoreError::CsvFormat {
        file: file.clone(),
        line: 1,
        detail: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let d = cols.iter().take_while(|c| c.starts_with("x_")).count();
    let k = cols[d..].iter().take_while(|c| c.starts_with("c_")).count();
    let expected: Vec<String> = (0..d)
        .map(|j| format!("x_{j}"))
        .chain((0..k).map(|j| format!("c_{j}")))
        .chain(["y".to_string(), "split".to_string()])
        .collect();
    if d == 0 || k == 0 || cols.len() != expected.len() || cols.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(CoreError::CsvFormat {
            file,
            line: 1,
            detail: format!("header must be x_0..x_{{d-1}},c_0..c_{{k-1}},y,split; got {header}"),
        });
    }

    let mut xs = Vec::new();
    let mut cs = Vec::new();
    let mut y = Vec::new();
    let mut split = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + k + 2 {
            return Err(CoreError::CsvFormat {
                file,
                line: lineno,
                detail: format!("expected {} fields, got {}", d + k + 2, fields.len()),
            });
        }
        let bad = |what: &str, val: &str| CoreError::CsvFormat {
            file: file.clone(),
            line: lineno,
            detail: format!("bad {what}: {val:?}"),
        };
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|_| bad("x value", f))?;
            if !v.is_finite() {
                return Err(bad("x value", f));
            }
            xs.push(v);
        }
        for f in &fields[d..d + k] {
            let v: f64 = f.parse().map_err(|_| bad("concept value", f))?;
            if !v.is_finite() {
                return Err(bad("concept value", f));
            }
            cs.push(v);
        }
        let label: usize = fields[d + k].parse().map_err(|_| bad("label", fields[d + k]))?;
        y.push(label);
        split.push(Split::parse(fields[d + k + 1]).ok_or_else(|| bad("split", fields[d + k + 1]))?);
    }
    if y.is_empty() {
        return Err(CoreError::CsvFormat {
            file,
            line: 1,
            detail: "no data rows".into(),
        });
    }
    let n = y.len();
    let n_classes = y.iter().max().unwrap() + 1;
    Ok(Dataset {
        x: Matrix::from_vec(n, d, xs)?,
        c: Matrix::from_vec(n, k, cs)?,
        y,
        split,
        n_classes,
        ceiling: None,
    })
}
