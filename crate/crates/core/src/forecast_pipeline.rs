//! Forecasting with and without the trend component: FPCA of the
//! (detrended) curves, one AR(p) model per score series, and an L1
//! comparison against held-out curves.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{trapezoid, trapezoid_weights};
use crate::series::GridFunctionSeries;
use crate::smoothing::{select_lambdas_scaled, MarginalScaling};
use crate::splines::BSplineBasis;
use crate::tensor_trend::{fit_trend_with_bases, ForecastStep};

/// Components whose eigenvalue falls below this fraction of the largest are
/// outside the numerical rank.
const FPCA_RANK_TOL: f64 = 1e-10;
/// Residual sums of squares are floored at this fraction of the total sum.
const RSS_FLOOR: f64 = 1e-14;
/// Spectral radii within this margin of 1 are flagged as near unit roots.
pub const UNIT_ROOT_MARGIN: f64 = 1e-3;
pub const DEFAULT_DIFF_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct FPCAModel {
    pub mean_curve: DVector<f64>,
    /// `m × r`, orthonormal under the trapezoid inner product of the grid.
    pub components: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// `r × N`.
    pub scores: DMatrix<f64>,
    pub weights: Vec<f64>,
    /// Number of eigenvalues above the rank tolerance.
    pub numerical_rank: usize,
    /// Sum of all eigenvalues of the weighted covariance.
    pub total_variance: f64,
}

impl FPCAModel {
    pub fn r(&self) -> usize {
        self.components.ncols()
    }

    pub fn explained_variance(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.eigenvalues.iter().sum::<f64>() / self.total_variance
        } else {
            1.0
        }
    }

    /// Curves `mean + components · scores` for an `r × h` score matrix.
    pub fn reconstruct(&self, scores: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.components * scores;
        for mut col in out.column_iter_mut() {
            col += &self.mean_curve;
        }
        out
    }
}

/// Eigen-decomposition of the grid-weighted covariance `W^½ C W^½` of the
/// centered curves, with `C = X_c X_cᵀ / N`.
pub fn fpca(series: &GridFunctionSeries, r: usize) -> Result<FPCAModel> {
    let (m, n) = series.values().shape();
    if r > m.min(n) {
        return Err(Error::RankExceeded {
            requested: r,
            rank: m.min(n),
        });
    }
    let x = series.values();
    let mean_curve = DVector::from_fn(m, |i, _| x.row(i).mean());
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean_curve;
    }
    let weights = trapezoid_weights(series.s_grid());
    let root: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let scaled = DMatrix::from_fn(m, n, |i, j| centered[(i, j)] * root[i]);
    let cov = &scaled * scaled.transpose() / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let numerical_rank = order
        .iter()
        .filter(|&&i| top > 0.0 && eig.eigenvalues[i] > FPCA_RANK_TOL * top)
        .count();
    if r > numerical_rank {
        return Err(Error::RankExceeded {
            requested: r,
            rank: numerical_rank,
        });
    }
    let mut components = DMatrix::zeros(m, r);
    let mut eigenvalues = Vec::with_capacity(r);
    for (c, &idx) in order.iter().take(r).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        // fix the sign so the largest loading is positive
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v = -v;
        }
        for i in 0..m {
            components[(i, c)] = v[i] / root[i];
        }
        eigenvalues.push(eig.eigenvalues[idx].max(0.0));
    }
    let wc = DMatrix::from_fn(m, n, |i, j| centered[(i, j)] * weights[i]);
    let scores = components.transpose() * wc;
    Ok(FPCAModel {
        mean_curve,
        components,
        eigenvalues,
        scores,
        weights,
        numerical_rank,
        total_variance: eig.eigenvalues.iter().map(|e| e.max(0.0)).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub order: usize,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub innovation_variance: f64,
    pub aic: f64,
    pub spectral_radius: f64,
    pub near_unit_root: bool,
    /// The series was constant; the model is its level with zero variance.
    pub degenerate: bool,
}

fn lagged_design(y: &[f64], p: usize, start: usize) -> (DMatrix<f64>, DVector<f64>) {
    let rows = y.len() - start;
    let x = DMatrix::from_fn(rows, p + 1, |r, c| if c == 0 { 1.0 } else { y[start + r - c] });
    let target = DVector::from_fn(rows, |r, _| y[start + r]);
    (x, target)
}

fn least_squares(x: DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let svd = x.clone().svd(true, true);
    let beta = svd
        .solve(y, 1e-12 * svd.singular_values.max())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let rss = (y - x * &beta).norm_squared();
    Ok((beta, rss))
}

fn companion_radius(coeffs: &[f64]) -> f64 {
    let p = coeffs.len();
    if p == 0 {
        return 0.0;
    }
    let companion = DMatrix::from_fn(p, p, |i, j| {
        if i == 0 {
            coeffs[j]
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    companion
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// AR(p) by least squares for `p = 0..=p_max`, order chosen by
/// `AIC = M log(RSS/M) + 2(p + 1)` on the common sample `y[p_max..]`,
/// coefficients refitted on all usable observations.
pub fn fit_score_model(scores: &[f64], p_max: usize) -> Result<ScoreModel> {
    let len = scores.len();
    if len <= p_max + 2 {
        return Err(Error::InvalidArgument(format!(
            "score series of length {len} is too short for p_max = {p_max}"
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidSeries("non-finite score".into()));
    }
    let mean = scores.iter().sum::<f64>() / len as f64;
    let tss: f64 = scores[p_max..].iter().map(|v| (v - mean).powi(2)).sum();
    let scale = scores.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if tss <= (f64::EPSILON * scale).powi(2) * len as f64 {
        return Ok(ScoreModel {
            order: 0,
            coefficients: Vec::new(),
            intercept: mean,
            innovation_variance: 0.0,
            aic: f64::NEG_INFINITY,
            spectral_radius: 0.0,
            near_unit_root: false,
            degenerate: true,
        });
    }
    let m = (len - p_max) as f64;
    let floor = RSS_FLOOR * tss;
    let mut best = (0, f64::INFINITY);
    for p in 0..=p_max {
        let (x, y) = lagged_design(scores, p, p_max);
        let (_, rss) = least_squares(x, &y)?;
        let aic = m * (rss.max(floor) / m).ln() + 2.0 * (p + 1) as f64;
        if aic < best.1 {
            best = (p, aic);
        }
    }
    let (order, aic) = best;
    let (x, y) = lagged_design(scores, order, order);
    let rows = y.len() as f64;
    let (beta, rss) = least_squares(x, &y)?;
    let coefficients: Vec<f64> = beta.iter().skip(1).copied().collect();
    let spectral_radius = companion_radius(&coefficients);
    Ok(ScoreModel {
        order,
        intercept: beta[0],
        innovation_variance: rss / rows,
        aic,
        near_unit_root: spectral_radius >= 1.0 - UNIT_ROOT_MARGIN,
        spectral_radius,
        coefficients,
        degenerate: false,
    })
}

impl ScoreModel {
    /// Iterated point forecasts for `h` steps after `history`.
    pub fn forecast(&self, history: &[f64], h: usize) -> Vec<f64> {
        let mut path = history.to_vec();
        for _ in 0..h {
            let next = self.intercept
                + self
                    .coefficients
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c * path[path.len() - 1 - i])
                    .sum::<f64>();
            path.push(next);
        }
        path.split_off(history.len())
    }
}

/// Lag-1 sample autocorrelation.
pub fn lag1_autocorrelation(y: &[f64]) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let denom: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if denom == 0.0 {
        return 0.0;
    }
    (1..n).map(|i| (y[i] - mean) * (y[i - 1] - mean)).sum::<f64>() / denom
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k1: usize,
    pub k2: usize,
    pub r: usize,
    pub p_max: usize,
    pub lambda_s: Option<f64>,
    pub lambda_t: Option<f64>,
    pub scaling: MarginalScaling,
    pub step: ForecastStep,
    pub diff_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k1: 10,
            k2: 15,
            r: 4,
            p_max: 5,
            lambda_s: None,
            lambda_t: None,
            scaling: MarginalScaling::default(),
            step: ForecastStep::default(),
            diff_threshold: DEFAULT_DIFF_THRESHOLD,
        }
    }
}

/// Forecast curves with the per-score models behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineForecast {
    /// `m × h`.
    pub curves: DMatrix<f64>,
    pub score_models: Vec<ScoreModel>,
    pub differenced: Vec<bool>,
    pub components_used: usize,
    /// Selected or overridden `(λ_s, λ_t)` of the trend fit.
    pub lambdas: Option<(f64, f64)>,
    /// `m × h` trend part of `curves`.
    pub trend: Option<DMatrix<f64>>,
}

fn check_horizon(h: usize) -> Result<()> {
    if h == 0 {
        Err(Error::InvalidArgument("forecast horizon must be at least 1".into()))
    } else {
        Ok(())
    }
}

struct ScoreForecast {
    curves: DMatrix<f64>,
    models: Vec<ScoreModel>,
    differenced: Vec<bool>,
    used: usize,
}

/// FPCA with `r` clamped to the numerical rank, then one score model per
/// component; scores with lag-1 autocorrelation above `diff_threshold` are
/// modelled in first differences.
fn forecast_scores(
    series: &GridFunctionSeries,
    r: usize,
    p_max: usize,
    h: usize,
    diff_threshold: Option<f64>,
) -> Result<ScoreForecast> {
    let (m, n) = series.values().shape();
    let full = fpca(series, 0)?;
    let r = r.min(full.numerical_rank).min(m.min(n));
    let model = fpca(series, r)?;
    let fitted: Vec<(ScoreModel, bool, Vec<f64>)> = (0..r)
        .into_par_iter()
        .map(|j| {
            let y: Vec<f64> = model.scores.row(j).iter().copied().collect();
            let diff = diff_threshold.is_some_and(|thr| lag1_autocorrelation(&y) > thr);
            if diff {
                let d: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
                let sm = fit_score_model(&d, p_max)?;
                let mut level = *y.last().expect("nonempty scores");
                let path = sm
                    .forecast(&d, h)
                    .into_iter()
                    .map(|step| {
                        level += step;
                        level
                    })
                    .collect();
                Ok((sm, true, path))
            } else {
                let sm = fit_score_model(&y, p_max)?;
                let path = sm.forecast(&y, h);
                Ok((sm, false, path))
            }
        })
        .collect::<Result<_>>()?;
    let mut future = DMatrix::zeros(r, h);
    let mut models = Vec::with_capacity(r);
    let mut differenced = Vec::with_capacity(r);
    for (j, (sm, d, path)) in fitted.into_iter().enumerate() {
        for (k, v) in path.into_iter().enumerate() {
            future[(j, k)] = v;
        }
        models.push(sm);
        differenced.push(d);
    }
    Ok(ScoreForecast {
        curves: model.reconstruct(&future),
        models,
        differenced,
        used: r,
    })
}

/// Trend forecast plus FPCA/AR forecast of the detrended curves.
pub fn forecast_with_trend(data: &GridFunctionSeries, cfg: &PipelineConfig, h: usize) -> Result<PipelineForecast> {
    check_horizon(h)?;
    let (lo, hi) = data.s_domain();
    let basis_s = BSplineBasis::cubic(lo, hi, cfg.k1)?;
    let basis_t = BSplineBasis::cubic(0.0, 1.0, cfg.k2)?;
    let (ls, lt) = match (cfg.lambda_s, cfg.lambda_t) {
        (Some(ls), Some(lt)) => (ls, lt),
        (ls, lt) => {
            let (rs, rt) = select_lambdas_scaled(data, &basis_s, &basis_t, cfg.scaling)?;
            (ls.unwrap_or(rs), lt.unwrap_or(rt))
        }
    };
    let fit = fit_trend_with_bases(data, basis_s, basis_t, ls, lt)?;
    let residual = fit.detrend(data)?;
    let trend = fit.forecast(data.s_grid(), data.len(), h, cfg.step)?;
    let scores = forecast_scores(&residual, cfg.r, cfg.p_max, h, None)?;
    Ok(PipelineForecast {
        curves: &trend + scores.curves,
        score_models: scores.models,
        differenced: scores.differenced,
        components_used: scores.used,
        lambdas: Some((ls, lt)),
        trend: Some(trend),
    })
}

/// FPCA/AR forecast of the raw curves, differencing persistent scores.
pub fn forecast_without_trend(data: &GridFunctionSeries, cfg: &PipelineConfig, h: usize) -> Result<PipelineForecast> {
    check_horizon(h)?;
    let scores = forecast_scores(data, cfg.r, cfg.p_max, h, Some(cfg.diff_threshold))?;
    Ok(PipelineForecast {
        curves: scores.curves,
        score_models: scores.models,
        differenced: scores.differenced,
        components_used: scores.used,
        lambdas: None,
        trend: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastComparison {
    pub horizon: usize,
    pub truth: DMatrix<f64>,
    pub with_trend: DMatrix<f64>,
    pub without_trend: DMatrix<f64>,
    pub l1_with: f64,
    pub l1_without: f64,
}

/// `Σ_h ∫ |a_h − b_h|` with the trapezoid rule on `grid`.
pub fn summed_l1(grid: &[f64], a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() || a.nrows() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "cannot compare {:?} with {:?} on {} grid points",
            a.shape(),
            b.shape(),
            grid.len()
        )));
    }
    Ok((0..a.ncols())
        .map(|j| {
            let diff: Vec<f64> = (0..a.nrows()).map(|i| (a[(i, j)] - b[(i, j)]).abs()).collect();
            trapezoid(grid, &diff)
        })
        .sum())
}

/// Holds out the last `holdout` curves and scores two forecasters on them.
pub fn compare_with<F, G>(data: &GridFunctionSeries, holdout: usize, with: F, without: G) -> Result<ForecastComparison>
where
    F: FnOnce(&GridFunctionSeries, usize) -> Result<DMatrix<f64>>,
    G: FnOnce(&GridFunctionSeries, usize) -> Result<DMatrix<f64>>,
{
    let n = data.len();
    if holdout == 0 {
        return Err(Error::InvalidArgument("holdout must be at least 1".into()));
    }
    if holdout + 3 > n {
        return Err(Error::InvalidArgument(format!(
            "holdout {holdout} leaves too few of the {n} curves for fitting"
        )));
    }
    let train = data.head(n - holdout)?;
    let truth = data.values().columns(n - holdout, holdout).into_owned();
    let with_trend = with(&train, holdout)?;
    let without_trend = without(&train, holdout)?;
    let grid = data.s_grid();
    Ok(ForecastComparison {
        horizon: holdout,
        l1_with: summed_l1(grid, &truth, &with_trend)?,
        l1_without: summed_l1(grid, &truth, &without_trend)?,
        truth,
        with_trend,
        without_trend,
    })
}

pub fn compare_forecasts(data: &GridFunctionSeries, holdout: usize, cfg: &PipelineConfig) -> Result<ForecastComparison> {
    compare_with(
        data,
        holdout,
        |train, h| forecast_with_trend(train, cfg, h).map(|f| f.curves),
        |train, h| forecast_without_trend(train, cfg, h).map(|f| f.curves),
    )
}
