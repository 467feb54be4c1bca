//! Competitor trend estimators: a per-coordinate linear trend, a
//! Nadaraya–Watson kernel smoother across curves and a per-row penalized
//! spline tuned by GCV.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quadrature::linspace;
use crate::series::GridFunctionSeries;
use crate::splines::{BSplineBasis, PenaltyFrame};

/// Number of points on the default GCV and bandwidth grids.
pub const DEFAULT_GRID_POINTS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Lin,
    Ker,
    Naiv,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineFit {
    /// `μ̂(s_i) + n f̂(s_i)` in integer time `n`.
    Lin {
        mu: DVector<f64>,
        slope: DVector<f64>,
        num_curves: usize,
    },
    /// Kernel-weighted average of the training curves.
    Ker {
        bandwidth: f64,
        values: DMatrix<f64>,
        t_grid: Vec<f64>,
        cv_error: f64,
    },
    /// One spline in `t` per training row; `coeffs` is `k2 × m`.
    Naiv {
        basis: BSplineBasis,
        coeffs: DMatrix<f64>,
        lambdas: Vec<f64>,
    },
}

/// `f̂(s) = Σ (n − (N+1)/2) Y_n(s) / s_N` with `s_N = Σ (n − (N+1)/2)²` and
/// `μ̂(s) = Ȳ(s) − f̂(s)(N+1)/2`.
pub fn fit_linear(data: &GridFunctionSeries) -> Result<BaselineFit> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InvalidArgument("linear trend needs at least two curves".into()));
    }
    let center = (n as f64 + 1.0) / 2.0;
    let offsets: Vec<f64> = (1..=n).map(|k| k as f64 - center).collect();
    let s_n: f64 = offsets.iter().map(|o| o * o).sum();
    let y = data.values();
    let mut mu = DVector::zeros(y.nrows());
    let mut slope = DVector::zeros(y.nrows());
    for (i, row) in y.row_iter().enumerate() {
        let f: f64 = row.iter().zip(&offsets).map(|(v, o)| v * o).sum::<f64>() / s_n;
        slope[i] = f;
        mu[i] = row.mean() - f * center;
    }
    Ok(BaselineFit::Lin {
        mu,
        slope,
        num_curves: n,
    })
}

/// `0.5/N, ..., 1` on a log scale.
pub fn default_bandwidths(num_curves: usize) -> Vec<f64> {
    let lo = (0.5 / num_curves as f64).ln();
    linspace(lo, 0.0, DEFAULT_GRID_POINTS)
        .into_iter()
        .map(f64::exp)
        .collect()
}

fn kernel_weight(dt: f64, h: f64) -> f64 {
    let u = dt / h;
    (-0.5 * u * u).exp() / (2.0 * PI)
}

/// Normalized kernel weights of every training curve at time `t`, or `None`
/// when they all vanish.
fn kernel_weights(t_grid: &[f64], t: f64, h: f64, skip: Option<usize>) -> Option<Vec<f64>> {
    let mut w: Vec<f64> = t_grid.iter().map(|&tn| kernel_weight(t - tn, h)).collect();
    if let Some(k) = skip {
        w[k] = 0.0;
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    w.iter_mut().for_each(|v| *v /= total);
    Some(w)
}

/// Leave-one-curve-out squared error of bandwidth `h`, `None` if some
/// held-out curve receives no weight.
fn kernel_cv_error(data: &GridFunctionSeries, h: f64) -> Option<f64> {
    let y = data.values();
    let t = data.t_grid();
    let mut total = 0.0;
    for (n, &tn) in t.iter().enumerate() {
        let w = kernel_weights(t, tn, h, Some(n))?;
        let pred = y * DVector::from_vec(w);
        total += (y.column(n) - pred).norm_squared();
    }
    Some(total)
}

/// Bandwidth by leave-one-curve-out cross-validation over `bandwidths`.
pub fn fit_kernel(data: &GridFunctionSeries, bandwidths: &[f64]) -> Result<BaselineFit> {
    if bandwidths.is_empty() || bandwidths.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(Error::InvalidArgument("bandwidths must be positive and finite".into()));
    }
    if data.len() < 2 {
        return Err(Error::InvalidArgument("kernel CV needs at least two curves".into()));
    }
    let scores: Vec<(f64, Option<f64>)> = bandwidths
        .par_iter()
        .map(|&h| (h, kernel_cv_error(data, h)))
        .collect();
    let (bandwidth, cv_error) = scores
        .into_iter()
        .filter_map(|(h, e)| e.filter(|e| e.is_finite()).map(|e| (h, e)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(Error::DegenerateBandwidths)?;
    Ok(kernel_with_bandwidth(data, bandwidth, cv_error))
}

/// Kernel fit at a fixed bandwidth without cross-validation.
pub fn kernel_with_bandwidth(data: &GridFunctionSeries, bandwidth: f64, cv_error: f64) -> BaselineFit {
    BaselineFit::Ker {
        bandwidth,
        values: data.values().clone(),
        t_grid: data.t_grid().to_vec(),
        cv_error,
    }
}

/// `log λ ∈ [−12, 12]`, 25 points.
pub fn default_gcv_lambdas() -> Vec<f64> {
    linspace(-12.0, 12.0, DEFAULT_GRID_POINTS)
        .into_iter()
        .map(f64::exp)
        .collect()
}

pub fn fit_naive(data: &GridFunctionSeries, k2: usize) -> Result<BaselineFit> {
    fit_naive_with_lambdas(data, k2, &default_gcv_lambdas())
}

/// Per-row cubic penalized spline in `t`, each row choosing its own `λ`
/// from `lambdas` by GCV `RSS·N / (N − tr H)²`.
pub fn fit_naive_with_lambdas(
    data: &GridFunctionSeries,
    k2: usize,
    lambdas: &[f64],
) -> Result<BaselineFit> {
    let n = data.len();
    if k2 >= n {
        return Err(Error::InvalidArgument(format!(
            "naive fit needs k2 < N, got k2 = {k2} and N = {n}"
        )));
    }
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument("GCV lambdas must be finite and nonnegative".into()));
    }
    let basis = BSplineBasis::cubic(0.0, 1.0, k2)?;
    let mats = basis.gram_and_penalty()?;
    let frame = PenaltyFrame::new(&basis, &mats);
    let b = basis.evaluate(data.t_grid(), 0)? * &frame.rotation;
    let btb = b.transpose() * &b;
    let yt = data.values().transpose();
    let bty = b.transpose() * &yt;
    let m = data.num_points();

    let per_lambda: Vec<(DMatrix<f64>, Vec<f64>)> = lambdas
        .par_iter()
        .map(|&lambda| {
            let system = &btb + &frame.penalty * lambda;
            let chol = system.cholesky().ok_or_else(|| Error::SingularSystem {
                context: format!("naive spline system at lambda = {lambda}"),
                ridge: 0.0,
            })?;
            let coeffs = chol.solve(&bty);
            let trace = chol.solve(&btb).trace();
            let resid = &yt - &b * &coeffs;
            let denom = (n as f64 - trace).powi(2);
            let gcv = (0..m)
                .map(|i| resid.column(i).norm_squared() * n as f64 / denom)
                .collect();
            Ok((coeffs, gcv))
        })
        .collect::<Result<_>>()?;

    let mut coeffs = DMatrix::zeros(k2, m);
    let mut chosen = Vec::with_capacity(m);
    for i in 0..m {
        let best = (0..lambdas.len())
            .min_by(|&a, &c| per_lambda[a].1[i].total_cmp(&per_lambda[c].1[i]))
            .expect("nonempty lambda grid");
        coeffs.set_column(i, &(&frame.rotation * per_lambda[best].0.column(i)));
        chosen.push(lambdas[best]);
    }
    Ok(BaselineFit::Naiv {
        basis,
        coeffs,
        lambdas: chosen,
    })
}

impl BaselineFit {
    pub fn kind(&self) -> BaselineKind {
        match self {
            BaselineFit::Lin { .. } => BaselineKind::Lin,
            BaselineFit::Ker { .. } => BaselineKind::Ker,
            BaselineFit::Naiv { .. } => BaselineKind::Naiv,
        }
    }

    pub fn num_rows(&self) -> usize {
        match self {
            BaselineFit::Lin { mu, .. } => mu.len(),
            BaselineFit::Ker { values, .. } => values.nrows(),
            BaselineFit::Naiv { coeffs, .. } => coeffs.ncols(),
        }
    }

    fn check_row(&self, s_index: usize) -> Result<()> {
        if s_index < self.num_rows() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "row {s_index} out of range for a fit with {} rows",
                self.num_rows()
            )))
        }
    }

    /// Value at training row `s_index`; `t` is integer time for `Lin` and
    /// rescaled time otherwise.
    pub fn eval(&self, s_index: usize, t: f64) -> Result<f64> {
        self.check_row(s_index)?;
        match self {
            BaselineFit::Lin { mu, slope, .. } => Ok(mu[s_index] + t * slope[s_index]),
            BaselineFit::Ker {
                bandwidth,
                values,
                t_grid,
                ..
            } => {
                let w = kernel_weights(t_grid, t, *bandwidth, None).ok_or(Error::DegenerateBandwidths)?;
                Ok(values.row(s_index).iter().zip(&w).map(|(y, w)| y * w).sum())
            }
            BaselineFit::Naiv { basis, coeffs, .. } => {
                let eta = basis.evaluate_point(t, 0)?;
                Ok(eta.iter().zip(coeffs.column(s_index).iter()).map(|(e, c)| e * c).sum())
            }
        }
    }

    /// Value at rescaled time `t ∈ (0, 1]`, converting to `t·N` for `Lin`.
    pub fn eval_rescaled(&self, s_index: usize, t: f64) -> Result<f64> {
        match self {
            BaselineFit::Lin { num_curves, .. } => self.eval(s_index, t * *num_curves as f64),
            _ => self.eval(s_index, t),
        }
    }

    /// `m × |t|` matrix at rescaled times.
    pub fn eval_rescaled_grid(&self, t: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.num_rows(), t.len());
        for (j, &tj) in t.iter().enumerate() {
            for i in 0..self.num_rows() {
                out[(i, j)] = self.eval_rescaled(i, tj)?;
            }
        }
        Ok(out)
    }

    /// Training data minus the fit at the observed times.
    pub fn detrend(&self, data: &GridFunctionSeries) -> Result<GridFunctionSeries> {
        if data.num_points() != self.num_rows() {
            return Err(Error::DimensionMismatch(format!(
                "fit has {} rows but data has {}",
                self.num_rows(),
                data.num_points()
            )));
        }
        let fitted = self.eval_rescaled_grid(data.t_grid())?;
        data.with_values(data.values() - fitted)
    }
}
