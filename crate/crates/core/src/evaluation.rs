//! ISE metrics, estimation of the FAR(1) kernel, and the Monte Carlo runner
//! comparing trend estimators.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{default_bandwidths, fit_kernel, fit_linear, fit_naive, BaselineFit};
use crate::error::{Error, Result};
use crate::fts_sim::{add_trend, simulate_far1, FARProcessSpec, TrendSurfaceId};
use crate::quadrature::{linspace, trapezoid_weights};
use crate::series::GridFunctionSeries;
use crate::smoothing::{select_lambdas_scaled, MarginalScaling};
use crate::splines::BSplineBasis;
use crate::linalg::{kron, unvec, vec_of};
use crate::tensor_trend::{fit_trend_with_bases, TrendFit};

pub const DEFAULT_RESOLUTION: usize = 101;
pub const DEFAULT_KERNEL_BASIS: usize = 15;
pub const DEFAULT_KERNEL_RIDGE: f64 = 1e-8;
pub const DEFAULT_KERNEL_ROUGHNESS: f64 = 10.0;
pub const DEFAULT_REPLICATIONS: usize = 100;

/// Relative eigenvalue level below which an unridged kernel regression is
/// reported as rank deficient.
const KERNEL_RANK_TOL: f64 = 1e-12;

fn weighted_sq_sum(diff: &DMatrix<f64>, wr: &[f64], wc: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (j, wj) in wc.iter().enumerate() {
        for (i, wi) in wr.iter().enumerate() {
            acc += wi * wj * diff[(i, j)].powi(2);
        }
    }
    acc
}

/// `∫∫ (T − T̂)²` on `[0, 1]²` by the tensor trapezoidal rule.
pub fn ise_trend<F, G>(truth: F, fitted: G, resolution: usize) -> f64
where
    F: Fn(f64, f64) -> f64,
    G: Fn(f64, f64) -> f64,
{
    let g = linspace(0.0, 1.0, resolution);
    let w = trapezoid_weights(&g);
    let diff = DMatrix::from_fn(resolution, resolution, |i, j| truth(g[i], g[j]) - fitted(g[i], g[j]));
    weighted_sq_sum(&diff, &w, &w)
}

/// ISE from surfaces already evaluated on `s_grid × t_grid`, trapezoidal in
/// both directions.
pub fn ise_on_grid(truth: &DMatrix<f64>, fitted: &DMatrix<f64>, s_grid: &[f64], t_grid: &[f64]) -> Result<f64> {
    if truth.shape() != fitted.shape() || truth.shape() != (s_grid.len(), t_grid.len()) {
        return Err(Error::DimensionMismatch(format!(
            "surfaces {:?} and {:?} on a {}×{} grid",
            truth.shape(),
            fitted.shape(),
            s_grid.len(),
            t_grid.len()
        )));
    }
    Ok(weighted_sq_sum(
        &(truth - fitted),
        &trapezoid_weights(s_grid),
        &trapezoid_weights(t_grid),
    ))
}

/// `β(u, v) = φ(u)ᵀ C φ(v)` over a shared cubic basis.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorKernelFit {
    pub coeffs: DMatrix<f64>,
    pub basis: BSplineBasis,
    pub ridge: f64,
}

impl OperatorKernelFit {
    pub fn eval(&self, u: f64, v: f64) -> Result<f64> {
        let pu = self.basis.evaluate_point(u, 0)?;
        let pv = self.basis.evaluate_point(v, 0)?;
        let mut acc = 0.0;
        for (a, x) in pu.iter().enumerate() {
            for (b, y) in pv.iter().enumerate() {
                acc += x * self.coeffs[(a, b)] * y;
            }
        }
        Ok(acc)
    }

    /// Kernel values on `grid × grid`.
    pub fn eval_grid(&self, grid: &[f64]) -> Result<DMatrix<f64>> {
        let phi = self.basis.evaluate(grid, 0)?;
        Ok(&phi * &self.coeffs * phi.transpose())
    }

    /// `(∫∫ β̂²)^{1/2}` from the Gram matrix of the basis.
    pub fn hilbert_schmidt_norm(&self) -> Result<f64> {
        let g = self.basis.gram_and_penalty()?.gram;
        Ok((&g * &self.coeffs * &g * self.coeffs.transpose()).trace().max(0.0).sqrt())
    }
}

/// Settings of the kernel regression; identical settings must be used for
/// every pair of fits that is compared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelRegression {
    pub num_basis: usize,
    /// Ridge on the coefficient matrix.
    pub ridge: f64,
    /// Weight of the second-derivative roughness penalty in `u` and in `v`,
    /// relative to the average per-curve variance of the lagged design.
    pub roughness: f64,
}

impl Default for KernelRegression {
    fn default() -> Self {
        Self {
            num_basis: DEFAULT_KERNEL_BASIS,
            ridge: DEFAULT_KERNEL_RIDGE,
            roughness: DEFAULT_KERNEL_ROUGHNESS,
        }
    }
}

/// Ridge-only least-squares kernel, see [`fit_far_kernel_with`].
pub fn fit_far_kernel(series: &GridFunctionSeries, num_basis: usize, ridge: f64) -> Result<OperatorKernelFit> {
    fit_far_kernel_with(
        series,
        &KernelRegression {
            num_basis,
            ridge,
            roughness: 0.0,
        },
    )
}

/// Penalized least-squares kernel of `X_n(s) ≈ ∫ β(u, s) X_{n−1}(u) du`,
/// integrals trapezoidal on the data grid.
///
/// With `β(u, v) = φ(v)ᵀ E φ(u)`, `G = Φᵀ W Φ`, `A = Φᵀ W X₋`, `P` the basis
/// roughness matrix and `ρ = roughness · tr(A Aᵀ)/(N − 1)`, the normal
/// equations are `G E (A Aᵀ + ρP) + ρ P E G + ridge·E = Φᵀ W X₊ Aᵀ`.
pub fn fit_far_kernel_with(series: &GridFunctionSeries, cfg: &KernelRegression) -> Result<OperatorKernelFit> {
    let n = series.len();
    let k = cfg.num_basis;
    if n < 3 {
        return Err(Error::InvalidArgument(format!("kernel fit needs at least 3 curves, got {n}")));
    }
    if !(cfg.ridge >= 0.0 && cfg.ridge.is_finite() && cfg.roughness >= 0.0 && cfg.roughness.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "ridge and roughness must be nonnegative, got {} and {}",
            cfg.ridge, cfg.roughness
        )));
    }
    let (lo, hi) = series.s_domain();
    let basis = BSplineBasis::cubic(lo, hi, k)?;
    let grid = series.s_grid();
    let w = trapezoid_weights(grid);
    let phi = basis.evaluate(grid, 0)?;
    let phi_w = DMatrix::from_fn(k, phi.nrows(), |a, i| phi[(i, a)] * w[i]);
    let x = series.values();
    let a = &phi_w * x.columns(0, n - 1);
    let gram = &phi_w * &phi;
    let cov = &a * a.transpose();
    let rhs = &phi_w * x.columns(1, n - 1) * a.transpose();
    let rank_deficient = || Error::RankDeficient("lagged design is rank deficient; use a positive ridge".into());

    let e = if cfg.roughness == 0.0 {
        // G and A Aᵀ are symmetric, so the system diagonalizes in their eigenbases
        let g = SymmetricEigen::new(gram);
        let c = SymmetricEigen::new(cov);
        let rotated_rhs = g.eigenvectors.transpose() * rhs * &c.eigenvectors;
        let scale = g.eigenvalues.amax() * c.eigenvalues.amax();
        let mut rotated = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                let d = g.eigenvalues[i].max(0.0) * c.eigenvalues[j].max(0.0) + cfg.ridge;
                if cfg.ridge == 0.0 && !(d > KERNEL_RANK_TOL * scale) {
                    return Err(rank_deficient());
                }
                rotated[(i, j)] = rotated_rhs[(i, j)] / d;
            }
        }
        &g.eigenvectors * rotated * c.eigenvectors.transpose()
    } else {
        let p = basis.gram_and_penalty()?.penalty;
        let rho = cfg.roughness * cov.trace() / (n - 1) as f64;
        let system = kron(&(&cov + &p * rho), &gram)
            + kron(&gram, &p) * rho
            + DMatrix::identity(k * k, k * k) * cfg.ridge;
        let chol = system.cholesky().ok_or_else(rank_deficient)?;
        unvec(&chol.solve(&vec_of(&rhs)), k, k)
    };
    let coeffs = e.transpose();
    if coeffs.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem {
            context: "operator kernel regression".into(),
            ridge: cfg.ridge,
        });
    }
    Ok(OperatorKernelFit {
        coeffs,
        basis,
        ridge: cfg.ridge,
    })
}

/// `∫∫ (β̂_a − β̂_b)²` by the tensor trapezoidal rule on the basis domain.
pub fn ise_beta(a: &OperatorKernelFit, b: &OperatorKernelFit, resolution: usize) -> Result<f64> {
    if a.basis != b.basis {
        return Err(Error::DimensionMismatch(
            "kernel fits use different bases".into(),
        ));
    }
    let (lo, hi) = a.basis.domain();
    let grid = linspace(lo, hi, resolution);
    let w = trapezoid_weights(&grid);
    let diff = a.eval_grid(&grid)? - b.eval_grid(&grid)?;
    Ok(weighted_sq_sum(&diff, &w, &w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorId {
    #[serde(rename = "TPS")]
    Tps,
    Lin,
    Naiv,
    Ker,
    /// Returns the true surface; used to validate the harness.
    Truth,
}

impl EstimatorId {
    pub const COMPETITORS: [EstimatorId; 4] =
        [EstimatorId::Tps, EstimatorId::Lin, EstimatorId::Naiv, EstimatorId::Ker];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorId::Tps => "TPS",
            EstimatorId::Lin => "Lin",
            EstimatorId::Naiv => "Naiv",
            EstimatorId::Ker => "Ker",
            EstimatorId::Truth => "Truth",
        }
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tps" => Ok(Self::Tps),
            "lin" => Ok(Self::Lin),
            "naiv" | "naive" => Ok(Self::Naiv),
            "ker" | "kernel" => Ok(Self::Ker),
            "truth" => Ok(Self::Truth),
            other => Err(Error::Config(format!("unknown estimator '{other}'"))),
        }
    }
}

/// A fitted trend of any estimator, evaluable on the training rows.
#[derive(Debug, Clone)]
pub enum FittedTrend {
    Tps(TrendFit),
    Baseline(BaselineFit),
    Truth(TrendSurfaceId),
}

impl FittedTrend {
    /// `m × |t|` values on the training s-grid at rescaled times `t`.
    pub fn eval_rows(&self, data: &GridFunctionSeries, t: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            FittedTrend::Tps(fit) => fit.eval(data.s_grid(), t),
            FittedTrend::Baseline(fit) => fit.eval_rescaled_grid(t),
            FittedTrend::Truth(id) => {
                let s = data.s_grid();
                Ok(DMatrix::from_fn(s.len(), t.len(), |i, j| id.eval(s[i], t[j])))
            }
        }
    }

    pub fn detrend(&self, data: &GridFunctionSeries) -> Result<GridFunctionSeries> {
        let fitted = self.eval_rows(data, data.t_grid())?;
        data.with_values(data.values() - fitted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub trends: Vec<TrendSurfaceId>,
    pub estimators: Vec<EstimatorId>,
    pub n_values: Vec<usize>,
    pub replications: usize,
    pub base_seed: u64,
    pub k1: usize,
    pub k2: usize,
    pub kernel: KernelRegression,
    pub resolution: usize,
    pub scaling: MarginalScaling,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            trends: TrendSurfaceId::ALL.to_vec(),
            estimators: EstimatorId::COMPETITORS.to_vec(),
            n_values: vec![300],
            replications: DEFAULT_REPLICATIONS,
            base_seed: 0,
            k1: 10,
            k2: 15,
            kernel: KernelRegression::default(),
            resolution: DEFAULT_RESOLUTION,
            scaling: MarginalScaling::default(),
        }
    }
}

pub fn fit_estimator(
    id: EstimatorId,
    data: &GridFunctionSeries,
    truth: TrendSurfaceId,
    k1: usize,
    k2: usize,
    scaling: MarginalScaling,
) -> Result<FittedTrend> {
    Ok(match id {
        EstimatorId::Tps => {
            let (lo, hi) = data.s_domain();
            let basis_s = BSplineBasis::cubic(lo, hi, k1)?;
            let basis_t = BSplineBasis::cubic(0.0, 1.0, k2)?;
            let (ls, lt) = select_lambdas_scaled(data, &basis_s, &basis_t, scaling)?;
            FittedTrend::Tps(fit_trend_with_bases(data, basis_s, basis_t, ls, lt)?)
        }
        EstimatorId::Lin => FittedTrend::Baseline(fit_linear(data)?),
        EstimatorId::Naiv => FittedTrend::Baseline(fit_naive(data, k2)?),
        EstimatorId::Ker => FittedTrend::Baseline(fit_kernel(data, &default_bandwidths(data.len()))?),
        EstimatorId::Truth => FittedTrend::Truth(truth),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub trend: TrendSurfaceId,
    pub estimator: EstimatorId,
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub ise_t: f64,
    pub ise_beta: f64,
    /// Empty when the replication succeeded.
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub trend: TrendSurfaceId,
    pub estimator: EstimatorId,
    pub n: usize,
    pub count: usize,
    pub failures: usize,
    pub ise_t_mean: f64,
    pub ise_t_sd: f64,
    pub ise_t_median: f64,
    pub ise_beta_mean: f64,
    pub ise_beta_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub summary: Vec<CellSummary>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Per-cell means, standard deviations and medians over successful rows.
pub fn summarize(rows: &[BenchmarkRow]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(TrendSurfaceId, EstimatorId, usize), Vec<&BenchmarkRow>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.trend, r.estimator, r.n)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((trend, estimator, n), rs)| {
            let ok: Vec<&&BenchmarkRow> = rs.iter().filter(|r| r.error.is_empty()).collect();
            let t: Vec<f64> = ok.iter().map(|r| r.ise_t).collect();
            let b: Vec<f64> = ok.iter().map(|r| r.ise_beta).collect();
            let (ise_t_mean, ise_t_sd) = mean_sd(&t);
            let (ise_beta_mean, ise_beta_sd) = mean_sd(&b);
            CellSummary {
                trend,
                estimator,
                n,
                count: ok.len(),
                failures: rs.len() - ok.len(),
                ise_t_mean,
                ise_t_sd,
                ise_t_median: median(&t),
                ise_beta_mean,
                ise_beta_sd,
            }
        })
        .collect()
}

fn run_cell(
    cfg: &BenchmarkConfig,
    x: &GridFunctionSeries,
    beta_x: &OperatorKernelFit,
    trend: TrendSurfaceId,
    estimator: EstimatorId,
    t_eval: &[f64],
) -> Result<(f64, f64)> {
    let y = add_trend(trend, x)?;
    let fit = fit_estimator(estimator, &y, trend, cfg.k1, cfg.k2, cfg.scaling)?;
    let s = y.s_grid();
    let truth = DMatrix::from_fn(s.len(), t_eval.len(), |i, j| trend.eval(s[i], t_eval[j]));
    let ise_t = ise_on_grid(&truth, &fit.eval_rows(&y, t_eval)?, s, t_eval)?;
    let beta_y = fit_far_kernel_with(&fit.detrend(&y)?, &cfg.kernel)?;
    let ise_b = ise_beta(beta_x, &beta_y, cfg.resolution)?;
    Ok((ise_t, ise_b))
}

fn run_replication(cfg: &BenchmarkConfig, rep: usize, t_eval: &[f64]) -> Vec<BenchmarkRow> {
    let seed = cfg.base_seed.wrapping_add(rep as u64);
    let spec = FARProcessSpec::new(seed);
    let mut rows = Vec::new();
    for &n in &cfg.n_values {
        let pristine = simulate_far1(&spec, n)
            .and_then(|x| fit_far_kernel_with(&x, &cfg.kernel).map(|b| (x, b)));
        for &trend in &cfg.trends {
            for &estimator in &cfg.estimators {
                let outcome = pristine
                    .as_ref()
                    .map_err(|e| Error::Config(e.to_string()))
                    .and_then(|(x, bx)| run_cell(cfg, x, bx, trend, estimator, t_eval));
                let (ise_t, ise_beta, error) = match outcome {
                    Ok((a, b)) => (a, b, String::new()),
                    Err(e) => (f64::NAN, f64::NAN, e.to_string()),
                };
                rows.push(BenchmarkRow {
                    trend,
                    estimator,
                    n,
                    replication: rep,
                    seed,
                    ise_t,
                    ise_beta,
                    error,
                });
            }
        }
    }
    rows
}

/// Monte Carlo comparison of trend estimators.
///
/// Replication `r` simulates one FAR(1) path per sample size from seed
/// `base_seed + r`, shared by every trend and estimator, so paired
/// comparisons see the same noise. ISE_T is integrated over the training
/// s-grid and `resolution` equispaced times in `[0, 1]`.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if cfg.replications == 0 {
        return Err(Error::InvalidArgument("replications must be at least 1".into()));
    }
    if cfg.trends.is_empty() || cfg.estimators.is_empty() || cfg.n_values.is_empty() {
        return Err(Error::InvalidArgument(
            "benchmark needs at least one trend, estimator and sample size".into(),
        ));
    }
    if cfg.resolution < 2 {
        return Err(Error::InvalidArgument("resolution must be at least 2".into()));
    }
    let t_eval = linspace(0.0, 1.0, cfg.resolution);
    let rows: Vec<BenchmarkRow> = (0..cfg.replications)
        .into_par_iter()
        .flat_map_iter(|rep| run_replication(cfg, rep, &t_eval))
        .collect();
    let summary = summarize(&rows);
    Ok(BenchmarkReport { rows, summary })
}

impl BenchmarkReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Vec<BenchmarkRow>> {
        let mut r = csv::Reader::from_reader(reader);
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }

    pub fn cell(&self, trend: TrendSurfaceId, estimator: EstimatorId, n: usize) -> Option<&CellSummary> {
        self.summary
            .iter()
            .find(|c| c.trend == trend && c.estimator == estimator && c.n == n)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BenchmarkRow> {
        self.rows.iter().filter(|r| !r.error.is_empty())
    }
}
