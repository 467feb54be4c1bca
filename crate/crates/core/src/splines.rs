//! Clamped B-spline bases on equidistant knots.
//!
//! Each basis carries its knot vector and evaluates values and derivatives
//! through the Cox–de Boor triangular scheme. Gram and second-derivative
//! penalty matrices are integrated span by span with Gauss–Legendre rules
//! that are exact for the piecewise-polynomial integrands.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::quadrature::GaussLegendre;

pub const DEFAULT_ORDER: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("spline order must be at least 2, got {0}")]
    OrderTooLow(usize),

    #[error("number of basis functions ({num_basis}) must be at least the order ({order})")]
    TooFewBasis { num_basis: usize, order: usize },

    #[error("degenerate interval [{lo}, {hi}]")]
    DegenerateInterval { lo: f64, hi: f64 },

    #[error("point {x} lies outside the basis domain [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },

    #[error("derivative order {deriv} must be below the spline order {order}")]
    DerivativeTooHigh { deriv: usize, order: usize },

    #[error("second-derivative penalty needs spline order at least 3, got {0}")]
    PenaltyNeedsOrder3(usize),
}

/// A clamped B-spline basis of fixed order on `[domain_lo, domain_hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    domain_lo: f64,
    domain_hi: f64,
    order: usize,
    num_basis: usize,
    knots: Vec<f64>,
}

/// Gram matrix `∫ b bᵀ` and roughness matrix `∫ b'' b''ᵀ` of a basis.
#[derive(Debug, Clone)]
pub struct BasisMatrices {
    pub gram: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
}

impl BSplineBasis {
    /// `num_basis` functions of the given order; the `num_basis - order`
    /// interior knots split the domain into equal spans and each endpoint
    /// knot is repeated `order` times.
    pub fn new(
        domain_lo: f64,
        domain_hi: f64,
        num_basis: usize,
        order: usize,
    ) -> Result<Self, SplineError> {
        if order < 2 {
            return Err(SplineError::OrderTooLow(order));
        }
        if num_basis < order {
            return Err(SplineError::TooFewBasis { num_basis, order });
        }
        if !(domain_lo.is_finite() && domain_hi.is_finite() && domain_lo < domain_hi) {
            return Err(SplineError::DegenerateInterval {
                lo: domain_lo,
                hi: domain_hi,
            });
        }
        let spans = num_basis - order + 1;
        let width = domain_hi - domain_lo;
        let mut knots = Vec::with_capacity(num_basis + order);
        knots.extend(std::iter::repeat_n(domain_lo, order));
        for i in 1..spans {
            knots.push(domain_lo + width * i as f64 / spans as f64);
        }
        knots.extend(std::iter::repeat_n(domain_hi, order));
        Ok(Self {
            domain_lo,
            domain_hi,
            order,
            num_basis,
            knots,
        })
    }

    pub fn cubic(domain_lo: f64, domain_hi: f64, num_basis: usize) -> Result<Self, SplineError> {
        Self::new(domain_lo, domain_hi, num_basis, DEFAULT_ORDER)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.domain_lo, self.domain_hi)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn degree(&self) -> usize {
        self.order - 1
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_spans(&self) -> usize {
        self.num_basis - self.order + 1
    }

    /// Greville abscissae: the coefficient vector reproducing `x ↦ x`.
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree();
        (0..self.num_basis)
            .map(|j| self.knots[j + 1..=j + p].iter().sum::<f64>() / p as f64)
            .collect()
    }

    fn check_point(&self, x: f64) -> Result<f64, SplineError> {
        let slack = 1e-12 * (self.domain_hi - self.domain_lo);
        if !x.is_finite() || x < self.domain_lo - slack || x > self.domain_hi + slack {
            return Err(SplineError::OutOfDomain {
                x,
                lo: self.domain_lo,
                hi: self.domain_hi,
            });
        }
        Ok(x.clamp(self.domain_lo, self.domain_hi))
    }

    /// Knot index `mu` with `knots[mu] <= x < knots[mu + 1]`; the right
    /// endpoint belongs to the last span.
    fn span_index(&self, x: f64) -> usize {
        let p = self.degree();
        let last = self.num_basis - 1;
        if x >= self.knots[last + 1] {
            return last;
        }
        let upper = self.knots[p + 1..=last + 1].partition_point(|&k| k <= x);
        p + upper
    }

    /// Nonzero basis functions at `x` and their derivatives up to `deriv`.
    /// Returns the span index `mu`; row `k` of the result holds the `k`-th
    /// derivatives of basis functions `mu - degree ..= mu`.
    fn local_derivatives(&self, x: f64, deriv: usize) -> (usize, Vec<Vec<f64>>) {
        let p = self.degree();
        let u = &self.knots;
        let mu = self.span_index(x);

        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[mu + 1 - j];
            right[j] = u[mu + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let mut ders = vec![vec![0.0; p + 1]; deriv + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let pi = p as isize;
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=pi {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=deriv as isize {
                let mut d = 0.0;
                let rk = r - k;
                let pk = pi - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk as usize];
                }
                let j1 = if rk >= -1 { 1 } else { -rk };
                let j2 = if r - 1 <= pk { k - 1 } else { pi - r };
                let mut j = j1;
                while j <= j2 {
                    let ju = j as usize;
                    a[s2][ju] = (a[s1][ju] - a[s1][ju - 1])
                        / ndu[(pk + 1) as usize][(rk + j) as usize];
                    d += a[s2][ju] * ndu[(rk + j) as usize][pk as usize];
                    j += 1;
                }
                if r <= pk {
                    let ku = k as usize;
                    a[s2][ku] = -a[s1][ku - 1] / ndu[(pk + 1) as usize][r as usize];
                    d += a[s2][ku] * ndu[r as usize][pk as usize];
                }
                ders[k as usize][r as usize] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for (k, row) in ders.iter_mut().enumerate().skip(1) {
            for v in row.iter_mut() {
                *v *= factor;
            }
            factor *= (p as f64) - k as f64;
        }
        (mu, ders)
    }

    /// `|points| × num_basis` matrix of `deriv`-th derivatives.
    pub fn evaluate(&self, points: &[f64], deriv: usize) -> Result<DMatrix<f64>, SplineError> {
        if deriv >= self.order {
            return Err(SplineError::DerivativeTooHigh {
                deriv,
                order: self.order,
            });
        }
        let p = self.degree();
        let mut out = DMatrix::zeros(points.len(), self.num_basis);
        for (row, &raw) in points.iter().enumerate() {
            let x = self.check_point(raw)?;
            let (mu, ders) = self.local_derivatives(x, deriv);
            for (r, &v) in ders[deriv].iter().enumerate() {
                out[(row, mu - p + r)] = v;
            }
        }
        Ok(out)
    }

    /// Values (or derivatives) of all basis functions at one point.
    pub fn evaluate_point(&self, x: f64, deriv: usize) -> Result<Vec<f64>, SplineError> {
        let m = self.evaluate(&[x], deriv)?;
        Ok(m.row(0).iter().copied().collect())
    }

    /// Gram and penalty matrices with the default exact node counts.
    pub fn gram_and_penalty(&self) -> Result<BasisMatrices, SplineError> {
        let gram_degree = 2 * (self.order - 1);
        let penalty_degree = 2 * self.order.saturating_sub(3);
        self.gram_and_penalty_with_nodes(
            nodes_for_degree(gram_degree),
            nodes_for_degree(penalty_degree),
        )
    }

    /// Same as [`gram_and_penalty`](Self::gram_and_penalty) with explicit
    /// per-span node counts.
    pub fn gram_and_penalty_with_nodes(
        &self,
        gram_nodes: usize,
        penalty_nodes: usize,
    ) -> Result<BasisMatrices, SplineError> {
        if self.order < 3 {
            return Err(SplineError::PenaltyNeedsOrder3(self.order));
        }
        let k = self.num_basis;
        let p = self.degree();
        let gram_rule = GaussLegendre::new(gram_nodes.max(1));
        let penalty_rule = GaussLegendre::new(penalty_nodes.max(1));
        let mut gram = DMatrix::zeros(k, k);
        let mut penalty = DMatrix::zeros(k, k);
        for span in 0..self.num_spans() {
            let a = self.knots[p + span];
            let b = self.knots[p + span + 1];
            for (x, w) in gram_rule.mapped(a, b) {
                let (mu, ders) = self.local_derivatives(x, 0);
                accumulate_outer(&mut gram, mu - p, &ders[0], w);
            }
            for (x, w) in penalty_rule.mapped(a, b) {
                let (mu, ders) = self.local_derivatives(x, 2);
                accumulate_outer(&mut penalty, mu - p, &ders[2], w);
            }
        }
        Ok(BasisMatrices { gram, penalty })
    }
}

/// Gram and penalty matrices expressed in an orthogonal coefficient frame
/// whose first two columns span the penalty null space (constants and linear
/// functions). The null block of `penalty` is exactly zero.
#[derive(Debug, Clone)]
pub struct PenaltyFrame {
    pub rotation: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
}

/// Dimension of the second-derivative penalty null space.
pub const PENALTY_NULL_DIM: usize = 2;

impl PenaltyFrame {
    pub fn new(basis: &BSplineBasis, mats: &BasisMatrices) -> Self {
        let k = basis.num_basis();
        let mut aug = DMatrix::zeros(k, k + PENALTY_NULL_DIM);
        for (i, g) in basis.greville().into_iter().enumerate() {
            aug[(i, 0)] = 1.0;
            aug[(i, 1)] = g;
            aug[(i, i + PENALTY_NULL_DIM)] = 1.0;
        }
        let rotation = aug.qr().q();
        let gram = rotation.transpose() * &mats.gram * &rotation;
        let mut penalty = rotation.transpose() * &mats.penalty * &rotation;
        for i in 0..k {
            for j in 0..PENALTY_NULL_DIM {
                penalty[(i, j)] = 0.0;
                penalty[(j, i)] = 0.0;
            }
        }
        let gram = (&gram + gram.transpose()) * 0.5;
        let penalty = (&penalty + penalty.transpose()) * 0.5;
        Self {
            rotation,
            gram,
            penalty,
        }
    }
}

/// `ceil((degree + 1) / 2)` nodes, at least 2.
pub fn nodes_for_degree(degree: usize) -> usize {
    (degree + 1).div_ceil(2).max(2)
}

fn accumulate_outer(target: &mut DMatrix<f64>, offset: usize, vals: &[f64], w: f64) {
    for (a, &va) in vals.iter().enumerate() {
        if va == 0.0 {
            continue;
        }
        for (b, &vb) in vals.iter().enumerate() {
            target[(offset + a, offset + b)] += w * va * vb;
        }
    }
}
