//! REML selection of the two smoothing parameters from marginal reductions.
//!
//! `λ₁` comes from the mean curve `(1/N) Σ Y_n` on the s-grid and `λ₂` from
//! the scalar series `∫ Y_n(s) ds`. Each is a one-dimensional penalized
//! spline problem solved under a Gaussian REML criterion with `σ²` profiled
//! out:
//!
//! ```text
//! V(λ) = (M − d)/2 · log r(λ) + ½ log det(BᵀB + λS) − ½ log det₊(λS)
//! r(λ) = ‖y − Bθ̂‖² + λ θ̂ᵀSθ̂
//! ```

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::quadrature::trapezoid;
use crate::series::GridFunctionSeries;
use crate::splines::{BSplineBasis, PenaltyFrame, PENALTY_NULL_DIM};

pub const LOG_LAMBDA_MIN: f64 = -12.0;
pub const LOG_LAMBDA_MAX: f64 = 12.0;
pub const GRID_POINTS: usize = 25;
pub const LOG_LAMBDA_TOL: f64 = 1e-3;
/// `r(λ)` is floored at this fraction of `‖y‖²` so exact fits do not send
/// `log r` into rounding noise.
const RESIDUAL_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Margin {
    S,
    T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalProfile {
    pub responses: Vec<f64>,
    pub locations: Vec<f64>,
    pub which: Margin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingSelection {
    pub lambda: f64,
    pub reml_value: f64,
    /// Every `(log λ, V)` pair evaluated, grid scan first.
    pub trace: Vec<(f64, f64)>,
}

/// How marginal lambdas are carried over to the joint tensor fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum MarginalScaling {
    /// Use the marginal lambdas unchanged.
    Literal,
    /// Multiply `λ₁` by `N` and `λ₂` by `m / |D|`, the replication factors
    /// of each margin inside the joint least-squares term. With this factor
    /// a surface that is constant along one axis is fitted exactly as the
    /// corresponding marginal smoother would fit it.
    #[default]
    SampleSize,
}

/// Row means of the data; summation order does not depend on curve order.
pub fn s_margin(data: &GridFunctionSeries) -> MarginalProfile {
    let n = data.len() as f64;
    let responses = data
        .values()
        .row_iter()
        .map(|row| {
            let mut vals: Vec<f64> = row.iter().copied().collect();
            vals.sort_by(f64::total_cmp);
            vals.iter().sum::<f64>() / n
        })
        .collect();
    MarginalProfile {
        responses,
        locations: data.s_grid().to_vec(),
        which: Margin::S,
    }
}

/// Trapezoidal integral of each curve over the s-grid.
pub fn t_margin(data: &GridFunctionSeries) -> MarginalProfile {
    let s = data.s_grid();
    let responses = data
        .values()
        .column_iter()
        .map(|col| trapezoid(s, col.as_slice()))
        .collect();
    MarginalProfile {
        responses,
        locations: data.t_grid().to_vec(),
        which: Margin::T,
    }
}

/// The REML criterion for one response vector and basis.
#[derive(Debug, Clone)]
pub struct RemlCriterion {
    rotation: DMatrix<f64>,
    btb: DMatrix<f64>,
    bty: DVector<f64>,
    penalty: DMatrix<f64>,
    b: DMatrix<f64>,
    y: DVector<f64>,
    log_pdet_penalty: f64,
    rank: usize,
    floor: f64,
    num_obs: usize,
}

impl RemlCriterion {
    pub fn new(profile: &MarginalProfile, basis: &BSplineBasis) -> Result<Self> {
        let m = profile.responses.len();
        if m != profile.locations.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} responses but {} locations",
                m,
                profile.locations.len()
            )));
        }
        if m <= PENALTY_NULL_DIM {
            return Err(Error::InvalidArgument(format!(
                "REML needs more than {PENALTY_NULL_DIM} observations, got {m}"
            )));
        }
        let mats = basis.gram_and_penalty()?;
        let frame = PenaltyFrame::new(basis, &mats);
        let b = basis.evaluate(&profile.locations, 0)? * &frame.rotation;
        let y = DVector::from_column_slice(&profile.responses);
        let k = basis.num_basis();
        let rank = k - PENALTY_NULL_DIM;
        let range = frame
            .penalty
            .view((PENALTY_NULL_DIM, PENALTY_NULL_DIM), (rank, rank))
            .into_owned();
        let eig = SymmetricEigen::new(range).eigenvalues;
        let log_pdet_penalty = eig.iter().map(|e| e.ln()).sum();
        Ok(Self {
            btb: b.transpose() * &b,
            bty: b.transpose() * &y,
            floor: (RESIDUAL_FLOOR * y.norm_squared()).max(f64::MIN_POSITIVE),
            penalty: frame.penalty,
            rotation: frame.rotation,
            b,
            y,
            log_pdet_penalty,
            rank,
            num_obs: m,
        })
    }

    fn system(&self, lambda: f64) -> DMatrix<f64> {
        &self.btb + &self.penalty * lambda
    }

    /// Penalized coefficients in the original B-spline coordinates.
    pub fn coefficients(&self, lambda: f64) -> Option<DVector<f64>> {
        let chol = self.system(lambda).cholesky()?;
        Some(&self.rotation * chol.solve(&self.bty))
    }

    pub fn evaluate(&self, log_lambda: f64) -> Result<f64> {
        let lambda = log_lambda.exp();
        let bad = || Error::NonFiniteCriterion { log_lambda };
        let chol = self.system(lambda).cholesky().ok_or_else(bad)?;
        let theta = chol.solve(&self.bty);
        let resid = &self.y - &self.b * &theta;
        let rough = (theta.transpose() * &self.penalty * &theta)[(0, 0)];
        let r = (resid.norm_squared() + lambda * rough).max(self.floor);
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_pdet = self.rank as f64 * log_lambda + self.log_pdet_penalty;
        let dof = (self.num_obs - PENALTY_NULL_DIM) as f64;
        let v = 0.5 * dof * r.ln() + 0.5 * log_det - 0.5 * log_pdet;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(bad())
        }
    }
}

/// Grid scan over `log λ ∈ [−12, 12]` followed by golden-section refinement
/// around the best grid point.
pub fn reml_select(profile: &MarginalProfile, basis: &BSplineBasis) -> Result<SmoothingSelection> {
    let crit = RemlCriterion::new(profile, basis)?;
    let step = (LOG_LAMBDA_MAX - LOG_LAMBDA_MIN) / (GRID_POINTS - 1) as f64;
    let mut trace = Vec::with_capacity(GRID_POINTS + 40);
    for i in 0..GRID_POINTS {
        let rho = LOG_LAMBDA_MIN + step * i as f64;
        trace.push((rho, crit.evaluate(rho)?));
    }
    let best = (0..GRID_POINTS)
        .min_by(|&a, &b| trace[a].1.total_cmp(&trace[b].1))
        .expect("non-empty grid");
    let lo = trace[best.saturating_sub(1)].0;
    let hi = trace[(best + 1).min(GRID_POINTS - 1)].0;
    let (rho, value) = golden_section(|r| crit.evaluate(r), lo, hi, LOG_LAMBDA_TOL, &mut trace)?;
    let (rho, value) = if value <= trace[best].1 {
        (rho, value)
    } else {
        trace[best]
    };
    Ok(SmoothingSelection {
        lambda: rho.exp(),
        reml_value: value,
        trace,
    })
}

fn golden_section<F>(
    f: F,
    mut a: f64,
    mut b: f64,
    tol: f64,
    trace: &mut Vec<(f64, f64)>,
) -> Result<(f64, f64)>
where
    F: Fn(f64) -> Result<f64>,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    trace.push((c, fc));
    trace.push((d, fd));
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
            trace.push((c, fc));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
            trace.push((d, fd));
        }
    }
    Ok(if fc <= fd { (c, fc) } else { (d, fd) })
}

pub fn select_lambdas(
    data: &GridFunctionSeries,
    basis_s: &BSplineBasis,
    basis_t: &BSplineBasis,
) -> Result<(f64, f64)> {
    select_lambdas_scaled(data, basis_s, basis_t, MarginalScaling::Literal)
}

pub fn select_lambdas_scaled(
    data: &GridFunctionSeries,
    basis_s: &BSplineBasis,
    basis_t: &BSplineBasis,
    scaling: MarginalScaling,
) -> Result<(f64, f64)> {
    let (ls, lt) = rayon::join(
        || reml_select(&s_margin(data), basis_s),
        || reml_select(&t_margin(data), basis_t),
    );
    let (ls, lt) = (ls?.lambda, lt?.lambda);
    Ok(match scaling {
        MarginalScaling::Literal => (ls, lt),
        MarginalScaling::SampleSize => {
            let (lo, hi) = data.s_domain();
            (
                ls * data.len() as f64,
                lt * data.num_points() as f64 / (hi - lo),
            )
        }
    })
}
