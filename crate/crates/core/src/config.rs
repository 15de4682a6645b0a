//! TOML run configuration for the command-line tool.
//!
//! One file may hold a section per command (`[gen]`, `[noise]`, `[train]`,
//! `[eval]`, `[theory]`); each command reads only its own. Unknown keys are
//! rejected. Relative paths are resolved against the directory of the config
//! file, and the resolved config written next to every output uses absolute
//! paths so it can be replayed from anywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::metrics::DEFAULT_BINS;
use crate::model::Activation;
use crate::synthdata::SplitFractions;
use crate::theory::{InitMode, DEFAULT_MAX_ITERS};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen: Option<GenSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheorySection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Binary contamination model; `eta` is the outlier probability.
    Gmm,
    /// K Gaussian blobs, optionally with held-out blobs mixed in under
    /// random labels; `eta` is the label-noise fraction.
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    pub source: Source,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_star: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub held_out_centers: Vec<Vec<f64>>,
    #[serde(default)]
    pub held_out_fraction: f64,
    #[serde(default = "one")]
    pub std_dev: f64,
    #[serde(default)]
    pub split: SplitFractions,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub input: PathBuf,
    pub n_classes: usize,
    pub eta: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub data: PathBuf,
    pub n_classes: usize,
    /// `ce`, `ls`, `fl`, `edl`, `pc`, `dreg` or `rc`.
    pub loss: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

impl TrainSection {
    /// Builds the loss from the flat keys. Returns warnings for keys the
    /// chosen loss ignores.
    pub fn loss_spec(&self) -> Result<(LossSpec, Vec<String>)> {
        let require = |key: &str, v: Option<f64>| {
            v.ok_or_else(|| Error::config(format!("loss = \"{}\" requires the key `{key}`", self.loss)))
        };
        let (spec, used): (LossSpec, &[&str]) = match self.loss.as_str() {
            "ce" => (LossSpec::Ce, &[]),
            "ls" => (
                LossSpec::Ls {
                    epsilon: require("epsilon", self.epsilon)?,
                },
                &["epsilon"],
            ),
            "fl" => (LossSpec::Fl { gamma: require("gamma", self.gamma)? }, &["gamma"]),
            "edl" => (LossSpec::Edl { gamma: require("gamma", self.gamma)? }, &["gamma"]),
            "pc" => (LossSpec::Pc { gamma: require("gamma", self.gamma)? }, &["gamma"]),
            "dreg" => (
                LossSpec::Dreg {
                    eta: require("eta", self.eta)?,
                    beta: require("beta", self.beta)?,
                },
                &["eta", "beta"],
            ),
            "rc" => (LossSpec::Rc { eta: require("eta", self.eta)? }, &["eta"]),
            other => {
                return Err(Error::config(format!(
                    "unknown loss `{other}`; expected one of ce, ls, fl, edl, pc, dreg, rc"
                )))
            }
        };
        spec.validate()?;
        let warnings = [
            ("eta", self.eta),
            ("beta", self.beta),
            ("epsilon", self.epsilon),
            ("gamma", self.gamma),
        ]
        .into_iter()
        .filter(|(k, v)| v.is_some() && !used.contains(k))
        .map(|(k, _)| format!("loss = \"{}\" ignores the key `{k}`", self.loss))
        .collect();
        Ok((spec, warnings))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub params: PathBuf,
    pub data: PathBuf,
    pub n_classes: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_d")]
    pub d: usize,
    /// Norm of w*, placed along the all-ones direction. Ignored when
    /// `w_star` is given.
    #[serde(default = "default_norm")]
    pub w_star_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_star: Option<Vec<f64>>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_etas")]
    pub etas: Vec<f64>,
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_n")]
    pub n_test: usize,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default = "default_points")]
    pub curve_points: usize,
}

fn default_d() -> usize {
    10
}
fn default_norm() -> f64 {
    0.3
}
fn default_n() -> usize {
    100_000
}
fn default_etas() -> Vec<f64> {
    vec![0.0, 0.1, 0.2]
}
fn default_epsilons() -> Vec<f64> {
    vec![0.0, 0.1, 0.3]
}
fn default_iters() -> usize {
    DEFAULT_MAX_ITERS
}
fn default_points() -> usize {
    99
}

impl Default for TheorySection {
    fn default() -> Self {
        toml::from_str("").expect("all theory keys have defaults")
    }
}

impl TheorySection {
    pub fn w_star(&self) -> Vec<f64> {
        self.w_star
            .clone()
            .unwrap_or_else(|| crate::theory::TheoryParams::isotropic_w_star(self.d, self.w_star_norm))
    }

    /// Cells in row-major order over `etas × epsilons`.
    pub fn grid(&self) -> Vec<(f64, f64)> {
        self.etas
            .iter()
            .flat_map(|&e| self.epsilons.iter().map(move |&s| (e, s)))
            .collect()
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Reads `path` and makes every relative path in it absolute with
    /// respect to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = std::path::absolute(path)
            .map_err(|e| Error::io(path, e))?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(s) = cfg.noise.as_mut() {
            fix(&mut s.input);
        }
        if let Some(s) = cfg.train.as_mut() {
            fix(&mut s.data);
        }
        if let Some(s) = cfg.eval.as_mut() {
            fix(&mut s.params);
            fix(&mut s.data);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Numeric(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train_section(extra: &str) -> TrainSection {
        let text = format!(
            "[train]\ndata = \"d.csv\"\nn_classes = 4\nepochs = 1\nbatch_size = 8\nlr = 0.1\n{extra}"
        );
        RunConfig::parse(&text).unwrap().train.unwrap()
    }

    #[test]
    fn dreg_needs_eta_and_beta() {
        let err = train_section("loss = \"dreg\"\neta = 0.2").loss_spec().unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("`beta`")), "{err}");
        let err = train_section("loss = \"dreg\"\nbeta = 1.0").loss_spec().unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("`eta`")), "{err}");
        let (spec, warnings) = train_section("loss = \"dreg\"\neta = 0.2\nbeta = 1.0").loss_spec().unwrap();
        assert_eq!(spec, LossSpec::Dreg { eta: 0.2, beta: 1.0 });
        assert!(warnings.is_empty());
    }

    #[test]
    fn ce_warns_about_unused_keys() {
        let (spec, warnings) = train_section("loss = \"ce\"\neta = 0.2\nbeta = 1.0").loss_spec().unwrap();
        assert_eq!(spec, LossSpec::Ce);
        assert_eq!(warnings.len(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[theory]\nbogus = 1").is_err());
        assert!(RunConfig::parse("[other]\n").is_err());
    }

    #[test]
    fn theory_defaults_and_round_trip() {
        let cfg = RunConfig::parse("[theory]\n").unwrap();
        let t = cfg.theory.as_ref().unwrap();
        assert_eq!(t.grid().len(), 9);
        assert_eq!(t.w_star().len(), 10);
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
