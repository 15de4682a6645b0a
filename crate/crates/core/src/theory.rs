//! Least-squares estimators under the binary contamination model and the
//! calibration comparison between the smoothed baseline and its
//! outlier-aware counterpart.
//!
//! Labels are read as y = +1 for class 1 and y = −1 for class 0. The
//! estimators are linear, w ∈ R^d, with confidence σ(wᵀx) for class 1.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ece_scores;
use crate::rng::{derive_seed, round_count};
use crate::special::{logit, sigmoid};
use crate::synthdata::{sample_contaminated_gmm, LabeledDataset, SynthConfig};

/// Smallest squared Cholesky pivot, relative to the largest Gram diagonal
/// entry, accepted as full rank.
const RANK_TOL: f64 = 1e-12;

pub const DEFAULT_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub w_star: Vec<f64>,
    pub n: usize,
    pub eta: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl TheoryParams {
    pub fn dim(&self) -> usize {
        self.w_star.len()
    }

    pub fn w_star_norm(&self) -> f64 {
        self.w_star.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_star.iter().any(|w| !w.is_finite()) || !(self.w_star_norm() > 0.0) {
            return Err(Error::config("w_star must be finite with positive norm"));
        }
        check_eta(self.eta)?;
        check_epsilon(self.epsilon)?;
        Ok(())
    }

    /// `w_star` of the given norm along the all-ones direction.
    pub fn isotropic_w_star(d: usize, norm: f64) -> Vec<f64> {
        vec![norm / (d as f64).sqrt(); d]
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..0.5).contains(&eta) {
        return Err(Error::config(format!("eta must lie in [0, 0.5), got {eta}")));
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::config(format!("epsilon must lie in [0, 1), got {epsilon}")));
    }
    Ok(())
}

/// Shrinkage (1−ε)(1−2η)/(1+‖w*‖²) of the population least-squares solution.
pub fn population_scale(tp: &TheoryParams) -> f64 {
    let norm2 = tp.w_star.iter().map(|w| w * w).sum::<f64>();
    (1.0 - tp.epsilon) * (1.0 - 2.0 * tp.eta) / (1.0 + norm2)
}

/// Population least-squares solution of the smoothed baseline.
pub fn population_baseline_w(tp: &TheoryParams) -> Vec<f64> {
    let s = population_scale(tp);
    tp.w_star.iter().map(|w| s * w).collect()
}

fn signed_label(ds: &LabeledDataset, i: usize) -> f64 {
    if ds.labels()[i] == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Smoothed regression target (1−ε)y + ε/2.
fn smoothed_targets(ds: &LabeledDataset, epsilon: f64) -> Vec<f64> {
    (0..ds.len())
        .map(|i| (1.0 - epsilon) * signed_label(ds, i) + epsilon / 2.0)
        .collect()
}

fn check_binary(ds: &LabeledDataset) -> Result<()> {
    if ds.n_classes() != 2 {
        return Err(Error::Shape(format!("expected a binary dataset, got K={}", ds.n_classes())));
    }
    Ok(())
}

/// Solves min_w (1/m)Σ_{i∈rows}(wᵀx_i − t_i)² by Cholesky on the Gram matrix.
fn solve_ls(ds: &LabeledDataset, rows: &[usize], targets: &[f64]) -> Result<Vec<f64>> {
    let d = ds.dim();
    if rows.len() <= d {
        return Err(Error::Numeric(format!("{} rows cannot determine {d} coefficients", rows.len())));
    }
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    for &i in rows {
        let x = ds.row(i);
        let t = targets[i];
        for j in 0..d {
            rhs[j] += x[j] * t;
            for k in 0..=j {
                gram[j * d + k] += x[j] * x[k];
            }
        }
    }
    let m = rows.len() as f64;
    for j in 0..d {
        rhs[j] /= m;
        for k in 0..=j {
            gram[j * d + k] /= m;
            gram[k * d + j] = gram[j * d + k];
        }
    }
    let max_diag = (0..d).map(|j| gram[j * d + j]).fold(0.0, f64::max);
    let gram = DMatrix::from_row_slice(d, d, &gram);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numeric("Gram matrix is not positive definite".into()))?;
    let l = chol.l_dirty();
    if (0..d).any(|j| l[(j, j)] * l[(j, j)] <= RANK_TOL * max_diag) {
        return Err(Error::Numeric("Gram matrix is rank deficient".into()));
    }
    let w = chol.solve(&DVector::from_vec(rhs));
    Ok(w.iter().copied().collect())
}

/// Least-squares fit to the smoothed targets (1−ε)y + ε/2.
pub fn ls_fit(ds: &LabeledDataset, epsilon: f64) -> Result<Vec<f64>> {
    check_binary(ds)?;
    check_epsilon(epsilon)?;
    let rows: Vec<usize> = (0..ds.len()).collect();
    solve_ls(ds, &rows, &smoothed_targets(ds, epsilon))
}

/// Result of an iterative reweighted least-squares procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustFit {
    pub w: Vec<f64>,
    /// Whether the selected index set reached a fixpoint within the budget.
    pub converged: bool,
    pub iterations: usize,
    /// Indices treated as inliers in the final refit, ascending.
    pub retained: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Ascending indices of all rows except the `m` with largest squared
/// residual against `targets` (lower index kept on ties).
fn keep_smallest_residuals(ds: &LabeledDataset, w: &[f64], targets: &[f64], m: usize) -> Vec<usize> {
    let resid: Vec<f64> = (0..ds.len())
        .map(|i| {
            let r = dot(w, ds.row(i)) - targets[i];
            r * r
        })
        .collect();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| resid[b].total_cmp(&resid[a]));
    let mut kept = order.split_off(m);
    kept.sort_unstable();
    kept
}

fn check_theta0(ds: &LabeledDataset, theta0: &[f64]) -> Result<()> {
    if theta0.len() != ds.dim() {
        return Err(Error::Shape(format!("theta0 has {} entries for d={}", theta0.len(), ds.dim())));
    }
    Ok(())
}

/// Trimmed least squares: drop the `⌊eta·n⌉` largest residuals under the
/// current iterate and refit on the rest, until the retained set repeats or
/// `iters` refits were made. With nothing to drop this is [`ls_fit`].
pub fn trimmed_ls_fit(
    ds: &LabeledDataset,
    eta: f64,
    epsilon: f64,
    theta0: &[f64],
    iters: usize,
) -> Result<RobustFit> {
    check_binary(ds)?;
    check_eta(eta)?;
    check_epsilon(epsilon)?;
    check_theta0(ds, theta0)?;
    let m = round_count(eta * ds.len() as f64);
    if m == 0 {
        return Ok(RobustFit {
            w: ls_fit(ds, epsilon)?,
            converged: true,
            iterations: 1,
            retained: (0..ds.len()).collect(),
        });
    }
    let targets = smoothed_targets(ds, epsilon);
    let mut w = theta0.to_vec();
    let mut retained: Vec<usize> = Vec::new();
    for it in 1..=iters {
        let next = keep_smallest_residuals(ds, &w, &targets, m);
        if next == retained {
            return Ok(RobustFit {
                w,
                converged: true,
                iterations: it - 1,
                retained,
            });
        }
        retained = next;
        w = solve_ls(ds, &retained, &targets)?;
    }
    let converged = keep_smallest_residuals(ds, &w, &targets, m) == retained;
    Ok(RobustFit {
        w,
        converged,
        iterations: iters,
        retained,
    })
}

/// Least-squares analog of the dynamic-regularization objective: the
/// `⌊eta·n⌉` samples with the largest residual against their label are
/// regressed to 0, the logit of the uniform prediction, and the rest to y.
/// Iterated to a fixpoint of the selected set.
pub fn dreg_ls_fit(ds: &LabeledDataset, eta: f64, theta0: &[f64], iters: usize) -> Result<RobustFit> {
    check_binary(ds)?;
    check_eta(eta)?;
    check_theta0(ds, theta0)?;
    let labels = smoothed_targets(ds, 0.0);
    let m = round_count(eta * ds.len() as f64);
    let all: Vec<usize> = (0..ds.len()).collect();
    if m == 0 {
        return Ok(RobustFit {
            w: solve_ls(ds, &all, &labels)?,
            converged: true,
            iterations: 1,
            retained: all,
        });
    }
    let mut w = theta0.to_vec();
    let mut retained: Vec<usize> = Vec::new();
    let fit = |kept: &[usize]| {
        let mut targets = vec![0.0; ds.len()];
        for &i in kept {
            targets[i] = labels[i];
        }
        solve_ls(ds, &all, &targets)
    };
    for it in 1..=iters {
        let next = keep_smallest_residuals(ds, &w, &labels, m);
        if next == retained {
            return Ok(RobustFit {
                w,
                converged: true,
                iterations: it - 1,
                retained,
            });
        }
        retained = next;
        w = fit(&retained)?;
    }
    let converged = keep_smallest_residuals(ds, &w, &labels, m) == retained;
    Ok(RobustFit {
        w,
        converged,
        iterations: iters,
        retained,
    })
}

fn check_confidence(p: f64) -> Result<()> {
    if !(p > 0.5 && p < 1.0) {
        return Err(Error::Domain(format!("confidence must lie in (0.5, 1), got {p}")));
    }
    Ok(())
}

fn domain(e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Domain(msg),
        other => other,
    }
}

/// p − σ(σ⁻¹(p) / ((1−ε)(1−2η))).
pub fn signed_error_baseline(p: f64, eta: f64, epsilon: f64) -> Result<f64> {
    check_confidence(p)?;
    check_eta(eta).map_err(domain)?;
    check_epsilon(epsilon).map_err(domain)?;
    Ok(recalibration_gap(p, (1.0 - epsilon) * (1.0 - 2.0 * eta)))
}

/// p − σ(σ⁻¹(p) / (1−η)).
pub fn signed_error_dreg(p: f64, eta: f64) -> Result<f64> {
    check_confidence(p)?;
    check_eta(eta).map_err(domain)?;
    Ok(recalibration_gap(p, 1.0 - eta))
}

/// p − σ(σ⁻¹(p)/scale); exactly 0 at scale 1, where the round trip through
/// the logit would otherwise leave an ulp of noise.
fn recalibration_gap(p: f64, scale: f64) -> f64 {
    if scale == 1.0 {
        0.0
    } else {
        p - sigmoid(logit(p) / scale)
    }
}

/// `n` equally spaced points strictly inside (0.5, 1): 0.5 + k/(2(n+1)).
pub fn confidence_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|k| 0.5 + k as f64 / (2.0 * (n + 1) as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibCurve {
    pub p: Vec<f64>,
    pub err_baseline: Vec<f64>,
    pub err_dreg: Vec<f64>,
    /// Σ_k weight_k·|err(p_k)| for each method; `None` without weights.
    pub ece_baseline: Option<f64>,
    pub ece_dreg: Option<f64>,
}

impl CalibCurve {
    /// CSV `p,err_baseline,err_dreg`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("p,err_baseline,err_dreg\n");
        for ((p, b), r) in self.p.iter().zip(&self.err_baseline).zip(&self.err_dreg) {
            let _ = writeln!(out, "{p},{b},{r}");
        }
        out
    }
}

/// Signed-error curves on `confidence_grid(n_points)`.
pub fn calibration_curve(eta: f64, epsilon: f64, n_points: usize) -> Result<CalibCurve> {
    let p = confidence_grid(n_points);
    let err_baseline = p
        .iter()
        .map(|&q| signed_error_baseline(q, eta, epsilon))
        .collect::<Result<Vec<_>>>()?;
    let err_dreg = p.iter().map(|&q| signed_error_dreg(q, eta)).collect::<Result<Vec<_>>>()?;
    Ok(CalibCurve {
        p,
        err_baseline,
        err_dreg,
        ece_baseline: None,
        ece_dreg: None,
    })
}

/// Histogram weights of `confidences` folded to [0.5, 1] on `n_points`
/// equal cells of (0.5, 1), matching [`confidence_grid`] cell midpoints
/// only approximately; weights sum to 1.
pub fn confidence_weights(confidences: &[f64], n_points: usize) -> Vec<f64> {
    let mut weights = vec![0.0; n_points];
    for &c in confidences {
        let folded = c.max(1.0 - c);
        let cell = (((folded - 0.5) * 2.0 * n_points as f64) as usize).min(n_points - 1);
        weights[cell] += 1.0;
    }
    let total = confidences.len().max(1) as f64;
    weights.iter_mut().for_each(|w| *w /= total);
    weights
}

/// Closed-form ECE companion: integrates both |signed error| curves against
/// the given confidence weights.
pub fn quadrature_ece(eta: f64, epsilon: f64, weights: &[f64]) -> Result<CalibCurve> {
    let mut curve = calibration_curve(eta, epsilon, weights.len())?;
    let integrate = |errs: &[f64]| errs.iter().zip(weights).map(|(e, w)| e.abs() * w).sum::<f64>();
    curve.ece_baseline = Some(integrate(&curve.err_baseline));
    curve.ece_dreg = Some(integrate(&curve.err_dreg));
    Ok(curve)
}

/// Fresh test draw for a cell; shared by every estimator of that cell.
fn test_draw(tp: &TheoryParams, n_test: usize) -> Result<LabeledDataset> {
    if n_test < 1000 {
        return Err(Error::Domain(format!("n_test must be at least 1000, got {n_test}")));
    }
    tp.validate()?;
    sample_contaminated_gmm(&SynthConfig {
        n: n_test,
        w_star: tp.w_star.clone(),
        eta: tp.eta,
        seed: derive_seed(tp.seed, "theory/test", 0),
    })
}

fn binary_ece(w_hat: &[f64], test: &LabeledDataset, n_bins: usize) -> Result<f64> {
    check_theta0(test, w_hat)?;
    let mut conf = Vec::with_capacity(test.len());
    let mut correct = Vec::with_capacity(test.len());
    for (x, &y) in test.rows().zip(test.labels()) {
        let c = sigmoid(dot(w_hat, x));
        // Class 0 wins the tie at c = 0.5.
        let pred = usize::from(c > 0.5);
        conf.push(c.max(1.0 - c));
        correct.push(pred == y);
    }
    Ok(ece_scores(&conf, &correct, n_bins).0)
}

/// ECE of the confidence σ(ŵᵀx) on `n_test` fresh draws from the
/// contaminated mixture, outliers included.
pub fn mc_ece_under_model(w_hat: &[f64], tp: &TheoryParams, n_test: usize, n_bins: usize) -> Result<f64> {
    let test = test_draw(tp, n_test)?;
    binary_ece(w_hat, &test, n_bins)
}

/// Where the outlier-aware estimators start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Unsmoothed least squares on the contaminated sample.
    #[default]
    Ls,
    /// The true w*.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOptions {
    pub n_test: usize,
    pub n_bins: usize,
    pub init: InitMode,
    pub max_iters: usize,
    /// Quadrature cells for the closed-form companion.
    pub n_points: usize,
    /// Worker threads for grid cells; 1 runs them in order on this thread.
    pub parallel: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            n_test: 100_000,
            n_bins: crate::metrics::DEFAULT_BINS,
            init: InitMode::Ls,
            max_iters: DEFAULT_MAX_ITERS,
            n_points: 99,
            parallel: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub eta: f64,
    pub epsilon: f64,
    /// Seed of this cell's training and test draws; replaying the template
    /// with this seed and the single cell reproduces the row.
    pub seed: u64,
    pub ece_baseline: f64,
    /// ECE of the dynamic-regularization estimator from the configured start.
    pub ece_dreg: f64,
    pub ece_dreg_ls_init: f64,
    pub ece_dreg_oracle_init: f64,
    pub dreg_converged: bool,
    pub dreg_iterations: usize,
    /// ECE of plain trimmed least squares from the configured start.
    pub ece_trimmed: f64,
    pub quad_ece_baseline: f64,
    pub quad_ece_dreg: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub template: TheoryParams,
    pub options: CheckOptions,
    pub cells: Vec<CellResult>,
}

impl CheckReport {
    /// CSV `eta,epsilon,ece_baseline,ece_dreg,pass`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eta,epsilon,ece_baseline,ece_dreg,pass\n");
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{},{}", c.eta, c.epsilon, c.ece_baseline, c.ece_dreg, c.pass);
        }
        out
    }
}

/// Seed of grid cell `index` under a template seed.
pub fn cell_seed(template_seed: u64, index: usize) -> u64 {
    derive_seed(template_seed, "theory/cell", index as u64)
}

/// Runs one cell with its own seed.
pub fn run_cell(tp: &TheoryParams, opts: &CheckOptions) -> Result<CellResult> {
    tp.validate()?;
    let train = sample_contaminated_gmm(&SynthConfig {
        n: tp.n,
        w_star: tp.w_star.clone(),
        eta: tp.eta,
        seed: tp.seed,
    })?;
    let test = test_draw(tp, opts.n_test)?;

    let w_baseline = ls_fit(&train, tp.epsilon)?;
    let ls_start = ls_fit(&train, 0.0)?;
    let dreg_ls = dreg_ls_fit(&train, tp.eta, &ls_start, opts.max_iters)?;
    let dreg_oracle = dreg_ls_fit(&train, tp.eta, &tp.w_star, opts.max_iters)?;
    let start = match opts.init {
        InitMode::Ls => &ls_start,
        InitMode::Oracle => &tp.w_star,
    };
    let trimmed = trimmed_ls_fit(&train, tp.eta, 0.0, start, opts.max_iters)?;

    let ece_baseline = binary_ece(&w_baseline, &test, opts.n_bins)?;
    let ece_dreg_ls_init = binary_ece(&dreg_ls.w, &test, opts.n_bins)?;
    let ece_dreg_oracle_init = binary_ece(&dreg_oracle.w, &test, opts.n_bins)?;
    let (ece_dreg, chosen) = match opts.init {
        InitMode::Ls => (ece_dreg_ls_init, &dreg_ls),
        InitMode::Oracle => (ece_dreg_oracle_init, &dreg_oracle),
    };

    let oracle_conf: Vec<f64> = test.rows().map(|x| sigmoid(dot(&tp.w_star, x))).collect();
    let quad = quadrature_ece(tp.eta, tp.epsilon, &confidence_weights(&oracle_conf, opts.n_points))?;

    Ok(CellResult {
        eta: tp.eta,
        epsilon: tp.epsilon,
        seed: tp.seed,
        ece_baseline,
        ece_dreg,
        ece_dreg_ls_init,
        ece_dreg_oracle_init,
        dreg_converged: chosen.converged,
        dreg_iterations: chosen.iterations,
        ece_trimmed: binary_ece(&trimmed.w, &test, opts.n_bins)?,
        quad_ece_baseline: quad.ece_baseline.unwrap_or(f64::NAN),
        quad_ece_dreg: quad.ece_dreg.unwrap_or(f64::NAN),
        pass: ece_dreg < ece_baseline,
    })
}

/// Runs every `(eta, epsilon)` cell of `grid` on a fresh contaminated sample
/// of the template's size, each with the seed `cell_seed(template.seed, i)`.
pub fn theorem_check(grid: &[(f64, f64)], template: &TheoryParams, opts: &CheckOptions) -> Result<CheckReport> {
    template.validate()?;
    let cells: Vec<TheoryParams> = grid
        .iter()
        .enumerate()
        .map(|(i, &(eta, epsilon))| {
            let tp = TheoryParams {
                eta,
                epsilon,
                seed: cell_seed(template.seed, i),
                ..template.clone()
            };
            tp.validate().map(|_| tp)
        })
        .collect::<Result<_>>()?;
    if opts.n_test < 1000 {
        return Err(Error::config(format!("n_test must be at least 1000, got {}", opts.n_test)));
    }
    if opts.n_bins == 0 || opts.n_points == 0 {
        return Err(Error::config("n_bins and n_points must be at least 1"));
    }

    let results = if opts.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(|tp| run_cell(tp, opts)).collect::<Result<Vec<_>>>())?
    } else {
        cells.iter().map(|tp| run_cell(tp, opts)).collect::<Result<Vec<_>>>()?
    };
    Ok(CheckReport {
        template: template.clone(),
        options: opts.clone(),
        cells: results,
    })
}
