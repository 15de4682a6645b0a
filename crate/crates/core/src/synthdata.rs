//! Synthetic datasets, label-noise injection, splits and CSV I/O.
//!
//! Binary data from the contamination model is stored with labels in {0, 1},
//! where class 1 stands for y = +1 and class 0 for y = −1.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{round_count, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub w_star: Vec<f64>,
    pub eta: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn dim(&self) -> usize {
        self.w_star.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_star.is_empty() {
            return Err(Error::config("w_star must have at least one coordinate"));
        }
        if self.n == 0 {
            return Err(Error::config("n must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.w_star.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("w_star must be finite"));
        }
        Ok(())
    }
}

/// Feature rows, integer labels and inlier flags (`true` = drawn from or
/// retained as the inlier distribution).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    n_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    flags: Vec<bool>,
}

impl LabeledDataset {
    pub fn new(
        dim: usize,
        n_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        flags: Vec<bool>,
    ) -> Result<Self> {
        if dim == 0 || n_classes == 0 {
            return Err(Error::Shape("dimension and class count must be positive".into()));
        }
        if features.len() != labels.len() * dim || flags.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature values, {} labels and {} flags do not describe rows of width {dim}",
                features.len(),
                labels.len(),
                flags.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= n_classes) {
            return Err(Error::Shape(format!("label {y} at row {i} is not below K={n_classes}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("features must be finite".into()));
        }
        Ok(Self {
            dim,
            n_classes,
            features,
            labels,
            flags,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn outlier_count(&self) -> usize {
        self.flags.iter().filter(|f| !**f).count()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            n_classes: self.n_classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            flags: indices.iter().map(|&i| self.flags[i]).collect(),
        }
    }

    /// Subset of rows whose flag equals `flag`.
    pub fn filter_flag(&self, flag: bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.flags[i] == flag).collect();
        self.select(&idx)
    }
}

/// Draws `n` points from the binary contamination model: y uniform on {−1, +1};
/// with probability 1 − η, X ~ N(y·w*, I) (flag `true`), otherwise
/// X ~ N(−y·w*, I) (flag `false`).
pub fn sample_contaminated_gmm(cfg: &SynthConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let d = cfg.dim();
    let mut rng = stream(cfg.seed, "synth/gmm");
    let mut features = Vec::with_capacity(cfg.n * d);
    let mut labels = Vec::with_capacity(cfg.n);
    let mut flags = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let positive: bool = rng.random_bool(0.5);
        let inlier = rng.random::<f64>() >= cfg.eta;
        let y = if positive { 1.0 } else { -1.0 };
        let mean_sign = if inlier { y } else { -y };
        for &w in &cfg.w_star {
            let z: f64 = rng.sample(StandardNormal);
            features.push(mean_sign * w + z);
        }
        labels.push(usize::from(positive));
        flags.push(inlier);
    }
    LabeledDataset::new(d, 2, features, labels, flags)
}

/// Gaussian blobs where some classes are held out and their samples are
/// relabeled uniformly into the kept classes.
///
/// This mirrors building an 8-of-10 class benchmark in which the two unused
/// classes are mixed back in under random kept-class labels: the relabeled
/// samples come from their own region of feature space and carry
/// `flag = false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutBlobsConfig {
    /// Centers of the kept classes; class k is `kept_centers[k]`.
    pub kept_centers: Vec<Vec<f64>>,
    /// Centers of the held-out classes.
    pub held_out_centers: Vec<Vec<f64>>,
    pub std_dev: f64,
    pub n: usize,
    /// Fraction of the `n` samples drawn from held-out classes.
    pub held_out_fraction: f64,
    pub seed: u64,
}

impl HeldOutBlobsConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.kept_centers.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::config("at least one kept center of positive dimension is required"));
        }
        if self.held_out_centers.is_empty() && self.held_out_fraction > 0.0 {
            return Err(Error::config("held_out_fraction > 0 needs held-out centers"));
        }
        if self
            .kept_centers
            .iter()
            .chain(&self.held_out_centers)
            .any(|c| c.len() != d || c.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::config("all centers must be finite and share one dimension"));
        }
        if !(self.std_dev > 0.0 && self.std_dev.is_finite()) {
            return Err(Error::config("std_dev must be positive"));
        }
        if !(0.0..=1.0).contains(&self.held_out_fraction) {
            return Err(Error::config("held_out_fraction must lie in [0, 1]"));
        }
        if self.n == 0 {
            return Err(Error::config("n must be at least 1"));
        }
        Ok(())
    }
}

/// Samples the held-out blob construction. Exactly `⌊fraction·n⌉` rows come
/// from held-out centers; row order is shuffled.
pub fn sample_held_out_blobs(cfg: &HeldOutBlobsConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let d = cfg.kept_centers[0].len();
    let k = cfg.kept_centers.len();
    let n_out = round_count(cfg.held_out_fraction * cfg.n as f64);
    let mut rng = stream(cfg.seed, "synth/blobs");

    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.shuffle(&mut rng);
    let mut is_out = vec![false; cfg.n];
    for &i in &order[..n_out] {
        is_out[i] = true;
    }

    let mut features = Vec::with_capacity(cfg.n * d);
    let mut labels = Vec::with_capacity(cfg.n);
    for &out in &is_out {
        let center = if out {
            &cfg.held_out_centers[rng.random_range(0..cfg.held_out_centers.len())]
        } else {
            let y = rng.random_range(0..k);
            labels.push(y);
            &cfg.kept_centers[y]
        };
        for &c in center {
            let z: f64 = rng.sample(StandardNormal);
            features.push(c + cfg.std_dev * z);
        }
        if out {
            labels.push(rng.random_range(0..k));
        }
    }
    let flags = is_out.iter().map(|o| !o).collect();
    LabeledDataset::new(d, k, features, labels, flags)
}

/// Relabels a uniformly chosen subset of `⌊eta·n⌉` samples with a label drawn
/// uniformly from all K classes (the original label may be redrawn).
/// Relabeled samples get `flag = false`, all others `flag = true`.
pub fn inject_label_noise(ds: &LabeledDataset, eta: f64, seed: u64) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config(format!("eta must lie in [0, 1], got {eta}")));
    }
    let n = ds.len();
    let m = round_count(eta * n as f64).min(n);
    let mut rng = stream(seed, "synth/label-noise");
    let chosen = index::sample(&mut rng, n, m).into_vec();
    let mut labels = ds.labels.clone();
    let mut flags = vec![true; n];
    // Redraw in index order so the result does not depend on sampling order.
    let mut sorted = chosen;
    sorted.sort_unstable();
    for i in sorted {
        labels[i] = rng.random_range(0..ds.n_classes);
        flags[i] = false;
    }
    LabeledDataset::new(ds.dim, ds.n_classes, ds.features.clone(), labels, flags)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(format!("split fraction {name} must lie in (0, 1), got {f}")));
            }
        }
        let total = self.train + self.val + self.test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split fractions must sum to 1, got {total}")));
        }
        Ok(())
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Shuffled train/val/test partition. Val and test sizes are `⌊f·n⌉`; the
/// remainder goes to train.
pub fn split(
    ds: &LabeledDataset,
    f: &SplitFractions,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    f.validate()?;
    let n = ds.len();
    if n < 3 {
        return Err(Error::config(format!("need at least 3 samples to split, got {n}")));
    }
    let n_val = round_count(f.val * n as f64);
    let n_test = round_count(f.test * n as f64);
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        return Err(Error::config(format!(
            "fractions ({}, {}, {}) leave an empty split for n={n}",
            f.train, f.val, f.test
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "synth/split"));
    let n_train = n - n_val - n_test;
    let train = ds.select(&order[..n_train]);
    let val = ds.select(&order[n_train..n_train + n_val]);
    let test = ds.select(&order[n_train + n_val..]);
    Ok((train, val, test))
}

/// Writes `f0,…,f{d-1},label,flag` with 17 significant digits per feature.
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    fs::write(path, to_csv_string(ds)).map_err(|e| Error::io(path, e))
}

pub fn to_csv_string(ds: &LabeledDataset) -> String {
    let mut out = String::new();
    for j in 0..ds.dim {
        let _ = write!(out, "f{j},");
    }
    out.push_str("label,flag\n");
    for (i, row) in ds.rows().enumerate() {
        for v in row {
            let _ = write!(out, "{v:.16e},");
        }
        let _ = writeln!(out, "{},{}", ds.labels[i], u8::from(ds.flags[i]));
    }
    out
}

pub fn load_csv(path: &Path, n_classes: usize) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, n_classes)
}

/// Parses the CSV layout written by [`save_csv`]. Line numbers in errors are
/// 1-based and count the header.
pub fn parse_csv(text: &str, n_classes: usize) -> Result<LabeledDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            reason: "no samples".into(),
        });
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let dim = cols.len().saturating_sub(2);
    let header_ok = dim >= 1
        && cols[dim] == "label"
        && cols[dim + 1] == "flag"
        && cols[..dim].iter().enumerate().all(|(j, c)| *c == format!("f{j}"));
    if !header_ok {
        return Err(Error::Parse {
            line: 1,
            reason: format!("expected header f0,...,f{{d-1}},label,flag, got `{header}`"),
        });
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut flags = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 2 {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("expected {} fields, found {}", dim + 2, fields.len()),
            });
        }
        for f in &fields[..dim] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                reason: format!("non-numeric feature `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("non-finite feature `{f}`"),
                });
            }
            features.push(v);
        }
        let label: usize = fields[dim].parse().map_err(|_| Error::Parse {
            line: line_no,
            reason: format!("invalid label `{}`", fields[dim]),
        })?;
        if label >= n_classes {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("label {label} is not below K={n_classes}"),
            });
        }
        let flag = match fields[dim + 1] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    reason: format!("flag must be 0 or 1, got `{other}`"),
                })
            }
        };
        labels.push(label);
        flags.push(flag);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 1,
            reason: "no samples".into(),
        });
    }
    LabeledDataset::new(dim, n_classes, features, labels, flags)
}
