//! Discrete scaled-Legendre (LegS) memory.
//!
//! The operator pair `(A, B)` drives the streaming update
//!
//! ```text
//! H_τ = H_{τ-1} (I - A/τ)^T + (1/τ) u_τ B^T,    H_0 = 0
//! ```
//!
//! where `H` is a `d × s` coefficient matrix (one row per latent channel).
//! After `N` samples, `H g(t)` reconstructs the whole history on the window
//! `[0, T]` through the scaled Legendre basis `g`. Indices are 0-based, so
//! the diagonal of `A` is `1, 2, …, s`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, check_finite, Error, Result};

/// The `A` (lower-triangular, `s × s`) and `B` (`s`) matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LegSOperator {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl LegSOperator {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Domain("LegS order must be at least 1".into()));
        }
        let a = DMatrix::from_fn(order, order, |i, j| {
            if i > j {
                (((2 * i + 1) * (2 * j + 1)) as f64).sqrt()
            } else if i == j {
                (i + 1) as f64
            } else {
                0.0
            }
        });
        let b = DVector::from_fn(order, |i, _| ((2 * i + 1) as f64).sqrt());
        Ok(Self { a, b })
    }

    pub fn order(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }
}

/// Coefficient matrix accumulated by the streaming recurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct LegSState {
    h: DMatrix<f64>,
    step: usize,
}

impl LegSState {
    pub fn zeros(latent_dim: usize, order: usize) -> Self {
        Self {
            h: DMatrix::zeros(latent_dim, order),
            step: 0,
        }
    }

    /// Builds a state directly from a coefficient matrix, e.g. one read back
    /// from disk or produced by a least-squares fit.
    pub fn from_coefficients(h: DMatrix<f64>, step: usize) -> Result<Self> {
        check_finite("LegS coefficients", h.as_slice())?;
        Ok(Self { h, step })
    }

    /// Runs the recurrence over every row of `samples` starting from `H_0 = 0`.
    pub fn fit<'a, I>(op: &LegSOperator, latent_dim: usize, samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut state = Self::zeros(latent_dim, op.order());
        for u in samples {
            state.absorb(op, u)?;
        }
        Ok(state)
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Number of absorbed samples.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn latent_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn order(&self) -> usize {
        self.h.ncols()
    }

    /// One recurrence step; `self` is left untouched.
    pub fn advance(&self, op: &LegSOperator, u: &[f64]) -> Result<Self> {
        let mut next = self.clone();
        next.absorb(op, u)?;
        Ok(next)
    }

    /// In-place recurrence step. The divisor is the new step count, so the
    /// first absorbed sample uses divisor 1.
    pub fn absorb(&mut self, op: &LegSOperator, u: &[f64]) -> Result<()> {
        check_dim("LegS order", self.order(), op.order())?;
        check_dim("LegS sample", self.latent_dim(), u.len())?;
        check_finite("LegS sample", u)?;

        let tau = (self.step + 1) as f64;
        let s = self.order();
        let a = &op.a;
        let b = &op.b;
        let mut row = vec![0.0; s];
        for r in 0..self.latent_dim() {
            for (j, out) in row.iter_mut().enumerate() {
                // (I - A/τ) is lower triangular: only k <= j contributes.
                let mut acc = 0.0;
                for k in 0..=j {
                    acc += a[(j, k)] * self.h[(r, k)];
                }
                *out = self.h[(r, j)] + (u[r] * b[j] - acc) / tau;
            }
            for (j, v) in row.iter().enumerate() {
                self.h[(r, j)] = *v;
            }
        }
        check_finite("LegS state", self.h.as_slice())?;
        self.step += 1;
        Ok(())
    }

    /// `μ = H g`.
    pub fn reconstruct_mu(&self, basis: &BasisSample) -> Result<DVector<f64>> {
        check_dim("basis length", self.order(), basis.g.len())?;
        Ok(&self.h * &basis.g)
    }

    /// `μ' = H g'`.
    pub fn reconstruct_mu_prime(&self, basis: &BasisSample) -> Result<DVector<f64>> {
        check_dim("basis length", self.order(), basis.g_prime.len())?;
        Ok(&self.h * &basis.g_prime)
    }
}

/// Values `P_i(x)` and derivatives `P_i'(x)` for `i < order`.
///
/// Uses the Bonnet recurrence for values and `P'_{n+1} = P'_{n-1} + (2n+1) P_n`
/// for derivatives, which stays valid outside `[-1, 1]`. At `x = ±1` the
/// derivative is taken from the closed form `(±1)^{n+1} n(n+1)/2`.
pub fn legendre_eval(order: usize, x: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if order == 0 {
        return Err(Error::Domain("Legendre order must be at least 1".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("Legendre abscissa".into()));
    }
    let mut p = vec![0.0; order];
    let mut dp = vec![0.0; order];
    p[0] = 1.0;
    if order > 1 {
        p[1] = x;
        dp[1] = 1.0;
    }
    for n in 1..order.saturating_sub(1) {
        let nf = n as f64;
        p[n + 1] = ((2.0 * nf + 1.0) * x * p[n] - nf * p[n - 1]) / (nf + 1.0);
        dp[n + 1] = dp[n - 1] + (2.0 * nf + 1.0) * p[n];
    }
    if x == 1.0 || x == -1.0 {
        for (n, d) in dp.iter_mut().enumerate() {
            let mag = (n * (n + 1)) as f64 / 2.0;
            *d = if x > 0.0 || n % 2 == 1 { mag } else { -mag };
        }
    }
    Ok((p, dp))
}

/// Per-index scaling applied to `P_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// `√(2i+1)`: matches `B`, so constants reconstruct exactly.
    #[default]
    Hippo,
    /// `√((2i+1)/2)`, the orthonormal-on-`[-1,1]` scaling.
    PaperLiteral,
}

impl Normalization {
    fn scale(self, i: usize) -> f64 {
        let r = (2 * i + 1) as f64;
        match self {
            Normalization::Hippo => r.sqrt(),
            Normalization::PaperLiteral => (r / 2.0).sqrt(),
        }
    }
}

/// Basis vector `g(t)` and its time derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSample {
    pub t: f64,
    pub x: f64,
    pub g: DVector<f64>,
    pub g_prime: DVector<f64>,
}

/// Evaluates the scaled Legendre basis at time `t` on the window `[0, window]`,
/// mapped to the abscissa `x = 2t/window - 1`. Times past the window give
/// `|x| > 1` (extrapolation).
pub fn basis_g(
    op: &LegSOperator,
    t: f64,
    window: f64,
    normalization: Normalization,
) -> Result<BasisSample> {
    basis_for_order(op.order(), t, window, normalization)
}

pub(crate) fn basis_for_order(
    order: usize,
    t: f64,
    window: f64,
    normalization: Normalization,
) -> Result<BasisSample> {
    if !(window > 0.0) || !window.is_finite() {
        return Err(Error::Domain(format!("window must be positive, got {window}")));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("basis time".into()));
    }
    let x = 2.0 * t / window - 1.0;
    let (p, dp) = legendre_eval(order, x)?;
    let chain = 2.0 / window;
    let g = DVector::from_fn(order, |i, _| normalization.scale(i) * p[i]);
    let g_prime = DVector::from_fn(order, |i, _| normalization.scale(i) * dp[i] * chain);
    Ok(BasisSample { t, x, g, g_prime })
}
