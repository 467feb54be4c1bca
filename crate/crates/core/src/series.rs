use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Curves observed on a common grid: column `n` of `values` is curve `Y_n`
/// evaluated at `s_grid`, observed at rescaled time `t_grid[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunctionSeries {
    values: DMatrix<f64>,
    s_grid: Vec<f64>,
    t_grid: Vec<f64>,
    s_domain: (f64, f64),
}

/// `[1/N, 2/N, ..., 1]`.
pub fn rescaled_time(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / n as f64).collect()
}

impl GridFunctionSeries {
    /// Builds a series whose time grid is `n/N`.
    pub fn new(values: DMatrix<f64>, s_grid: Vec<f64>, s_domain: (f64, f64)) -> Result<Self> {
        let t_grid = rescaled_time(values.ncols());
        Self::with_time_grid(values, s_grid, t_grid, s_domain)
    }

    /// Series on `s_domain = [s_grid[0], s_grid[m-1]]`.
    pub fn on_grid_span(values: DMatrix<f64>, s_grid: Vec<f64>) -> Result<Self> {
        let domain = match (s_grid.first(), s_grid.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(Error::InvalidSeries("empty s grid".into())),
        };
        Self::new(values, s_grid, domain)
    }

    pub fn with_time_grid(
        values: DMatrix<f64>,
        s_grid: Vec<f64>,
        t_grid: Vec<f64>,
        s_domain: (f64, f64),
    ) -> Result<Self> {
        let (m, n) = values.shape();
        if m == 0 || n == 0 {
            return Err(Error::InvalidSeries("series has no observations".into()));
        }
        if s_grid.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "s grid has {} points but values have {m} rows",
                s_grid.len()
            )));
        }
        if t_grid.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "t grid has {} points but values have {n} columns",
                t_grid.len()
            )));
        }
        if !(s_domain.0 < s_domain.1) {
            return Err(Error::InvalidSeries(format!(
                "degenerate s domain [{}, {}]",
                s_domain.0, s_domain.1
            )));
        }
        if s_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidSeries("s grid must be strictly increasing".into()));
        }
        if s_grid[0] < s_domain.0 || s_grid[m - 1] > s_domain.1 {
            return Err(Error::InvalidSeries("s grid leaves the s domain".into()));
        }
        if t_grid.windows(2).any(|w| !(w[0] < w[1])) || !(t_grid[0] > 0.0) || t_grid[n - 1] > 1.0
        {
            return Err(Error::InvalidSeries(
                "t grid must be strictly increasing inside (0, 1]".into(),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSeries(format!(
                "non-finite value at row {}, column {}",
                pos % m,
                pos / m
            )));
        }
        Ok(Self {
            values,
            s_grid,
            t_grid,
            s_domain,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn s_grid(&self) -> &[f64] {
        &self.s_grid
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn s_domain(&self) -> (f64, f64) {
        self.s_domain
    }

    /// Number of grid points `m`.
    pub fn num_points(&self) -> usize {
        self.values.nrows()
    }

    /// Number of curves `N`.
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// First `n` curves, with time rescaled to `k/n`.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot take {n} curves out of {}",
                self.len()
            )));
        }
        Self::new(
            self.values.columns(0, n).into_owned(),
            self.s_grid.clone(),
            self.s_domain,
        )
    }

    /// Same grids, new values.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::with_time_grid(
            values,
            self.s_grid.clone(),
            self.t_grid.clone(),
            self.s_domain,
        )
    }
}
