//! Simulation scenarios: six closed-form trend surfaces over a stationary
//! FAR(1) process driven by Brownian-motion innovations.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{linspace, trapezoid_weights, GaussLegendre};
use crate::series::GridFunctionSeries;

pub const DEFAULT_GRID_POINTS: usize = 50;
pub const DEFAULT_BURN_IN: usize = 200;
pub const DEFAULT_TARGET_NORM: f64 = 0.7;

const T6_SIGMA_S: f64 = 0.3;
const T6_SIGMA_T: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrendSurfaceId {
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
}

impl TrendSurfaceId {
    pub const ALL: [TrendSurfaceId; 6] = [
        TrendSurfaceId::T1,
        TrendSurfaceId::T2,
        TrendSurfaceId::T3,
        TrendSurfaceId::T4,
        TrendSurfaceId::T5,
        TrendSurfaceId::T6,
    ];

    pub fn eval(self, s: f64, t: f64) -> f64 {
        match self {
            TrendSurfaceId::T1 => 2.0 * s + 30.0 * t,
            TrendSurfaceId::T2 => 25.0 * t * (2.0 * PI * s).sin(),
            TrendSurfaceId::T3 => 20.0 * t * t - 5.0 * t + 5.0,
            TrendSurfaceId::T4 => {
                let u = 0.5 * s + 4.0 * t;
                2.0 * u * u
            }
            TrendSurfaceId::T5 => 28.0 * (2.0 * PI * t + s).sin(),
            TrendSurfaceId::T6 => {
                let norm = PI * T6_SIGMA_S * T6_SIGMA_T;
                let bump = |cs: f64, ct: f64| {
                    (-(s - cs).powi(2) / (T6_SIGMA_S * T6_SIGMA_S)
                        - (t - ct).powi(2) / (T6_SIGMA_T * T6_SIGMA_T))
                        .exp()
                };
                4.5 / norm * bump(0.2, 0.3) + 2.7 / norm * bump(0.7, 0.8)
            }
        }
    }
}

impl fmt::Display for TrendSurfaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for TrendSurfaceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T1" => Ok(Self::T1),
            "T2" => Ok(Self::T2),
            "T3" => Ok(Self::T3),
            "T4" => Ok(Self::T4),
            "T5" => Ok(Self::T5),
            "T6" => Ok(Self::T6),
            other => Err(Error::Config(format!("unknown trend surface '{other}'"))),
        }
    }
}

/// Integral kernel `β(u, v)` of the autoregressive operator.
#[derive(Debug, Clone, Copy)]
pub enum FarKernel {
    /// `exp{−(u² + v²)/2}`
    Gaussian,
    Constant(f64),
    Custom(fn(f64, f64) -> f64),
}

impl FarKernel {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            FarKernel::Gaussian => (-(u * u + v * v) / 2.0).exp(),
            FarKernel::Constant(c) => *c,
            FarKernel::Custom(f) => f(u, v),
        }
    }

    /// `(∫₀¹∫₀¹ β²)^{1/2}` by a 64-point tensor Gauss–Legendre rule.
    pub fn hilbert_schmidt_norm(&self) -> f64 {
        let rule = GaussLegendre::new(64);
        let pts: Vec<(f64, f64)> = rule.mapped(0.0, 1.0).collect();
        let mut acc = 0.0;
        for &(u, wu) in &pts {
            for &(v, wv) in &pts {
                acc += wu * wv * self.eval(u, v).powi(2);
            }
        }
        acc.sqrt()
    }
}

/// Configuration of the stationary FAR(1) component.
#[derive(Debug, Clone)]
pub struct FARProcessSpec {
    pub kernel: FarKernel,
    pub target_norm: f64,
    pub c1: f64,
    pub grid: Vec<f64>,
    pub burn_in: usize,
    pub seed: u64,
    /// Diffusion scale of the Brownian innovations (1 for standard motion).
    pub noise_scale: f64,
}

impl FARProcessSpec {
    /// Gaussian kernel scaled to operator norm 0.7 on 50 equispaced points.
    pub fn new(seed: u64) -> Self {
        Self::with_kernel(FarKernel::Gaussian, DEFAULT_TARGET_NORM, seed)
    }

    pub fn with_kernel(kernel: FarKernel, target_norm: f64, seed: u64) -> Self {
        let mut spec = Self {
            kernel,
            target_norm,
            c1: 0.0,
            grid: linspace(0.0, 1.0, DEFAULT_GRID_POINTS),
            burn_in: DEFAULT_BURN_IN,
            seed,
            noise_scale: 1.0,
        };
        spec.c1 = calibrate_c1(&spec);
        spec
    }

    pub fn seeded(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// `target_norm / ‖β‖_HS`.
pub fn calibrate_c1(spec: &FARProcessSpec) -> f64 {
    if spec.target_norm == 0.0 {
        return 0.0;
    }
    spec.target_norm / spec.kernel.hilbert_schmidt_norm()
}

/// Zero-mean FAR(1) curves `X_1..X_N` on `spec.grid`, started from `X₀ ≡ 0`
/// and run `burn_in` extra steps.
pub fn simulate_far1(spec: &FARProcessSpec, n: usize) -> Result<GridFunctionSeries> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one curve".into()));
    }
    let grid = &spec.grid;
    let m = grid.len();
    if m < 2 || grid.windows(2).any(|w| !(w[0] < w[1])) || grid[0] < 0.0 || grid[m - 1] > 1.0 {
        return Err(Error::InvalidArgument(
            "FAR grid must be strictly increasing inside [0, 1]".into(),
        ));
    }
    let w = trapezoid_weights(grid);
    // operator[i, l] = c1 · w_l · β(u_l, s_i)
    let operator = DMatrix::from_fn(m, m, |i, l| spec.c1 * w[l] * spec.kernel.eval(grid[l], grid[i]));
    let steps: Vec<f64> = std::iter::once(grid[0])
        .chain(grid.windows(2).map(|p| p[1] - p[0]))
        .map(|d| (d * spec.noise_scale * spec.noise_scale).sqrt())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut current = DVector::zeros(m);
    let mut out = DMatrix::zeros(m, n);
    for step in 0..spec.burn_in + n {
        let mut next = &operator * &current;
        let mut level = 0.0;
        for (i, sd) in steps.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            level += sd * z;
            next[i] += level;
        }
        current = next;
        if step >= spec.burn_in {
            out.set_column(step - spec.burn_in, &current);
        }
    }
    GridFunctionSeries::new(out, grid.clone(), (0.0, 1.0))
}

/// Adds the trend surface at `(s_i, n/N)` to a zero-trend series.
pub fn add_trend(id: TrendSurfaceId, stationary: &GridFunctionSeries) -> Result<GridFunctionSeries> {
    let s = stationary.s_grid();
    let t = stationary.t_grid();
    let values = DMatrix::from_fn(stationary.num_points(), stationary.len(), |i, j| {
        stationary.values()[(i, j)] + id.eval(s[i], t[j])
    });
    stationary.with_values(values)
}

pub fn simulate_scenario(
    id: TrendSurfaceId,
    spec: &FARProcessSpec,
    n: usize,
) -> Result<GridFunctionSeries> {
    add_trend(id, &simulate_far1(spec, n)?)
}
