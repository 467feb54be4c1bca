//! Penalized tensor-product spline estimate of the trend surface.
//!
//! With `V` (m × k₁) and `Z` (N × k₂) the bases evaluated on the s- and
//! t-grids, the coefficient matrix `Θ` solves
//!
//! ```text
//! [ZᵀZ ⊗ VᵀV + λ₁ J_η ⊗ P₁ + λ₂ P₂ ⊗ J_ν] vec(Θ) = vec(Vᵀ Y Z)
//! ```
//!
//! where `J` are Gram matrices and `P` second-derivative penalties. The
//! system lives in the k₁k₂ coefficient space; the mN-row design is never
//! formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{kron, unvec, vec_of};
pub use crate::series::GridFunctionSeries;
use crate::splines::{BSplineBasis, PenaltyFrame};

/// Ridge factor applied to `trace / k₁k₂` when the first factorization fails.
pub const RIDGE_FACTOR: f64 = 1e-10;

/// Fitted surface `T(s, t) = ν(s)ᵀ Θ η(t)`.
#[derive(Debug, Clone)]
pub struct TrendFit {
    theta: DMatrix<f64>,
    basis_s: BSplineBasis,
    basis_t: BSplineBasis,
    lambda_s: f64,
    lambda_t: f64,
    edf: f64,
    ridge: Option<f64>,
}

/// Time step used when extrapolating the trend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum ForecastStep {
    /// Step `j` advances by `1/(N + j)`.
    #[default]
    Harmonic,
    /// Every step advances by `1/N`, one rescaled-time unit.
    Uniform,
}

/// The pieces of the penalized least-squares objective at a fitted `Θ`.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    /// `‖Y − V Θ Zᵀ‖²_F`
    pub residual: f64,
    /// `∫ (P₁T)(t) dt`
    pub roughness_s: f64,
    /// `∫ (P₂T)(s) ds`
    pub roughness_t: f64,
}

impl ObjectiveTerms {
    pub fn penalized(&self, lambda_s: f64, lambda_t: f64) -> f64 {
        self.residual + lambda_s * self.roughness_s + lambda_t * self.roughness_t
    }
}

/// Fits with cubic bases of `k1` functions on the s-domain and `k2` on `[0, 1]`.
pub fn fit_trend(
    data: &GridFunctionSeries,
    k1: usize,
    k2: usize,
    lambda_s: f64,
    lambda_t: f64,
) -> Result<TrendFit> {
    let (lo, hi) = data.s_domain();
    let basis_s = BSplineBasis::cubic(lo, hi, k1)?;
    let basis_t = BSplineBasis::cubic(0.0, 1.0, k2)?;
    fit_trend_with_bases(data, basis_s, basis_t, lambda_s, lambda_t)
}

pub fn fit_trend_with_bases(
    data: &GridFunctionSeries,
    basis_s: BSplineBasis,
    basis_t: BSplineBasis,
    lambda_s: f64,
    lambda_t: f64,
) -> Result<TrendFit> {
    for (name, l) in [("lambda_s", lambda_s), ("lambda_t", lambda_t)] {
        if !l.is_finite() || l < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{name} must be finite and nonnegative, got {l}"
            )));
        }
    }
    let (m, n) = data.values().shape();
    let k1 = basis_s.num_basis();
    let k2 = basis_t.num_basis();
    if k1 * k2 > m * n {
        return Err(Error::InvalidArgument(format!(
            "{k1}x{k2} coefficients exceed the {m}x{n} observations"
        )));
    }
    if lambda_s == 0.0 && lambda_t == 0.0 && (k1 > m || k2 > n) {
        return Err(Error::RankDeficient(format!(
            "unpenalized fit with k1={k1} on {m} s-points and k2={k2} on {n} time points; \
             the design has rank below k1*k2, use a positive lambda"
        )));
    }

    // Work in rotated coefficients so the penalty null space is exact; the
    // factorization then stays accurate for very large lambdas.
    let frame_s = PenaltyFrame::new(&basis_s, &basis_s.gram_and_penalty()?);
    let frame_t = PenaltyFrame::new(&basis_t, &basis_t.gram_and_penalty()?);
    let v = basis_s.evaluate(data.s_grid(), 0)? * &frame_s.rotation;
    let z = basis_t.evaluate(data.t_grid(), 0)? * &frame_t.rotation;

    let design = kron(&(z.transpose() * &z), &(v.transpose() * &v));
    let penalty = penalty_matrix(&frame_s, &frame_t, lambda_s, lambda_t);
    let rhs = vec_of(&(v.transpose() * data.values() * &z));

    let system = &design + &penalty;
    let (chol, ridge) = factor_with_ridge(system, "tensor-product normal equations")?;
    let rotated = unvec(&chol.solve(&rhs), k1, k2);
    let theta = &frame_s.rotation * rotated * frame_t.rotation.transpose();
    let edf = chol.solve(&design).trace();

    Ok(TrendFit {
        theta,
        basis_s,
        basis_t,
        lambda_s,
        lambda_t,
        edf,
        ridge,
    })
}

/// `λ₁ J_η ⊗ P₁ + λ₂ P₂ ⊗ J_ν`.
pub(crate) fn penalty_matrix(
    mats_s: &PenaltyFrame,
    mats_t: &PenaltyFrame,
    lambda_s: f64,
    lambda_t: f64,
) -> DMatrix<f64> {
    let k = mats_s.gram.nrows() * mats_t.gram.nrows();
    let mut p = DMatrix::zeros(k, k);
    if lambda_s != 0.0 {
        p += kron(&mats_t.gram, &mats_s.penalty) * lambda_s;
    }
    if lambda_t != 0.0 {
        p += kron(&mats_t.penalty, &mats_s.gram) * lambda_t;
    }
    p
}

/// Cholesky factorization, retried once with a small diagonal ridge.
pub(crate) fn factor_with_ridge(
    system: DMatrix<f64>,
    context: &str,
) -> Result<(Cholesky<f64, Dyn>, Option<f64>)> {
    let k = system.nrows();
    let trace = system.trace();
    if let Some(chol) = Cholesky::new(system.clone()) {
        return Ok((chol, None));
    }
    let ridge = RIDGE_FACTOR * trace.abs().max(f64::MIN_POSITIVE) / k as f64;
    let mut ridged = system;
    for i in 0..k {
        ridged[(i, i)] += ridge;
    }
    Cholesky::new(ridged)
        .map(|c| (c, Some(ridge)))
        .ok_or_else(|| Error::SingularSystem {
            context: context.to_string(),
            ridge,
        })
}

impl TrendFit {
    /// Wraps a coefficient matrix as a fit, e.g. for testing or injecting a known surface.
    pub fn from_coefficients(
        theta: DMatrix<f64>,
        basis_s: BSplineBasis,
        basis_t: BSplineBasis,
    ) -> Result<Self> {
        if theta.shape() != (basis_s.num_basis(), basis_t.num_basis()) {
            return Err(Error::DimensionMismatch(format!(
                "theta is {:?} but bases have {} and {} functions",
                theta.shape(),
                basis_s.num_basis(),
                basis_t.num_basis()
            )));
        }
        Ok(Self {
            theta,
            basis_s,
            basis_t,
            lambda_s: 0.0,
            lambda_t: 0.0,
            edf: f64::NAN,
            ridge: None,
        })
    }

    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn basis_s(&self) -> &BSplineBasis {
        &self.basis_s
    }

    pub fn basis_t(&self) -> &BSplineBasis {
        &self.basis_t
    }

    pub fn lambda_s(&self) -> f64 {
        self.lambda_s
    }

    pub fn lambda_t(&self) -> f64 {
        self.lambda_t
    }

    /// `trace{(A + P)⁻¹ A}`.
    pub fn edf(&self) -> f64 {
        self.edf
    }

    /// Diagonal ridge added when the unridged system failed to factor.
    pub fn ridge(&self) -> Option<f64> {
        self.ridge
    }

    /// `|s| × |t|` matrix of surface values.
    pub fn eval(&self, s: &[f64], t: &[f64]) -> Result<DMatrix<f64>> {
        let v = self.basis_s.evaluate(s, 0)?;
        let z = self.basis_t.evaluate(t, 0)?;
        Ok(v * &self.theta * z.transpose())
    }

    pub fn eval_point(&self, s: f64, t: f64) -> Result<f64> {
        Ok(self.eval(&[s], &[t])?[(0, 0)])
    }

    /// `∂T/∂t` at a fixed time for every `s`.
    pub fn time_derivative(&self, s: &[f64], t: f64) -> Result<DVector<f64>> {
        let v = self.basis_s.evaluate(s, 0)?;
        let dz = self.basis_t.evaluate(&[t], 1)?;
        Ok((v * &self.theta * dz.transpose()).column(0).into_owned())
    }

    /// `h` steps of first-order extrapolation from `t = 1` with the slope
    /// frozen at `t = 1`. Column `j` is the forecast for curve `N + j + 1`.
    pub fn forecast(
        &self,
        s: &[f64],
        n: usize,
        h: usize,
        step: ForecastStep,
    ) -> Result<DMatrix<f64>> {
        if h == 0 {
            return Err(Error::InvalidArgument("forecast horizon must be at least 1".into()));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("sample size must be positive".into()));
        }
        let level = self.eval(s, &[1.0])?.column(0).into_owned();
        let slope = self.time_derivative(s, 1.0)?;
        let mut out = DMatrix::zeros(s.len(), h);
        let mut current = level;
        for j in 1..=h {
            let factor = match step {
                ForecastStep::Harmonic => 1.0 / (n + j) as f64,
                ForecastStep::Uniform => 1.0 / n as f64,
            };
            current += &slope * factor;
            out.set_column(j - 1, &current);
        }
        Ok(out)
    }

    /// Surface on the series' own grids (`m × N`).
    pub fn fitted_values(&self, data: &GridFunctionSeries) -> Result<DMatrix<f64>> {
        self.check_compatible(data)?;
        self.eval(data.s_grid(), data.t_grid())
    }

    /// `Y_n(s_i) − T̂(s_i, n/N)`.
    pub fn detrend(&self, data: &GridFunctionSeries) -> Result<GridFunctionSeries> {
        let fitted = self.fitted_values(data)?;
        data.with_values(data.values() - fitted)
    }

    /// Residual and roughness terms of the penalized objective on `data`.
    pub fn objective_terms(&self, data: &GridFunctionSeries) -> Result<ObjectiveTerms> {
        let resid = data.values() - self.fitted_values(data)?;
        let ms = self.basis_s.gram_and_penalty()?;
        let mt = self.basis_t.gram_and_penalty()?;
        let th = &self.theta;
        let roughness_s = (th.transpose() * &ms.penalty * th * &mt.gram).trace();
        let roughness_t = (th.transpose() * &ms.gram * th * &mt.penalty).trace();
        Ok(ObjectiveTerms {
            residual: resid.norm_squared(),
            roughness_s,
            roughness_t,
        })
    }

    fn check_compatible(&self, data: &GridFunctionSeries) -> Result<()> {
        let (lo, hi) = self.basis_s.domain();
        let (dlo, dhi) = data.s_domain();
        let tol = 1e-9 * (hi - lo).abs().max(1.0);
        if (lo - dlo).abs() > tol || (hi - dhi).abs() > tol {
            return Err(Error::DimensionMismatch(format!(
                "fit s-domain [{lo}, {hi}] differs from data s-domain [{dlo}, {dhi}]"
            )));
        }
        Ok(())
    }
}
