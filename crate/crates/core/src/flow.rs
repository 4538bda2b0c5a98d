//! Conditional latent flow `ψ_t = σ_t z + μ_t`.
//!
//! `μ_t` comes from a fitted [`LegSState`]; `σ_t` follows a periodic schedule
//! that dips towards `σ_min` at every observed frame time and starts at 1.

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::error::{check_dim, check_finite, Error, Result};
use crate::legs::{basis_for_order, LegSOperator, LegSState, Normalization};

pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
pub const DEFAULT_ALPHA: f64 = 10.0;

/// Noise schedule
/// `σ(t) = (1 - σ_min)[sin²(π N t / T) + e^{-αt}] + σ_min`, clamped to `≤ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSchedule {
    sigma_min: f64,
    alpha: f64,
    observed: usize,
    horizon: f64,
}

impl FlowSchedule {
    pub fn new(sigma_min: f64, alpha: f64, observed: usize, horizon: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < 1.0) {
            return Err(Error::Domain(format!("sigma_min must lie in (0,1), got {sigma_min}")));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
        }
        if observed == 0 {
            return Err(Error::Domain("observed frame count must be positive".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            sigma_min,
            alpha,
            observed,
            horizon,
        })
    }

    pub fn with_defaults(observed: usize, horizon: f64) -> Result<Self> {
        Self::new(DEFAULT_SIGMA_MIN, DEFAULT_ALPHA, observed, horizon)
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn omega(&self) -> f64 {
        PI * self.observed as f64 / self.horizon
    }

    /// `sin² + e^{-αt} - 1`; the schedule is clamped wherever this is positive.
    fn excess(&self, t: f64) -> f64 {
        let s = (self.omega() * t).sin();
        s * s + (-self.alpha * t).exp() - 1.0
    }

    fn check_time(t: f64) -> Result<()> {
        if t.is_nan() || t < 0.0 {
            Err(Error::Domain(format!("schedule time must be non-negative, got {t}")))
        } else {
            Ok(())
        }
    }

    /// Unclamped formula. Written as `1 + (1-σ_min)·excess` so that `t = 0`
    /// gives exactly 1.
    pub fn sigma_raw(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        Ok(1.0 + (1.0 - self.sigma_min) * self.excess(t))
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.sigma_raw(t)?.min(1.0))
    }

    pub fn sigma_prime_raw(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        let w = self.omega();
        Ok((1.0 - self.sigma_min) * (w * (2.0 * w * t).sin() - self.alpha * (-self.alpha * t).exp()))
    }

    /// Derivative of the clamped schedule: zero wherever the clamp is active.
    pub fn sigma_prime(&self, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        if self.excess(t) > 0.0 {
            Ok(0.0)
        } else {
            self.sigma_prime_raw(t)
        }
    }

    pub fn is_clamped(&self, t: f64) -> bool {
        t >= 0.0 && self.excess(t) > 0.0
    }

    /// Times in `(0, end)` where the clamp switches on or off. `σ'` jumps at
    /// these points, so fixed-step integrators should place knots on them.
    pub fn clamp_breakpoints(&self, end: f64) -> Vec<f64> {
        let mut out = Vec::new();
        if !(end > 0.0) {
            return out;
        }
        // Past this time e^{-αt} no longer moves sin² + e^{-αt} off 1.0.
        let last = end.min(40.0 / self.alpha);
        let half = 0.5 * self.horizon / self.observed as f64;
        const PER_HALF: usize = 256;
        let h = half / PER_HALF as f64;
        let mut t0 = 0.0;
        let mut f0 = self.excess(t0);
        let mut k = 1usize;
        loop {
            let t1 = (k as f64 * h).min(last);
            let f1 = self.excess(t1);
            if k > 1 && (f0 > 0.0) != (f1 > 0.0) {
                out.push(self.bisect(t0, t1, f0 > 0.0));
            }
            if t1 >= last {
                break;
            }
            t0 = t1;
            f0 = f1;
            k += 1;
        }
        out.retain(|&t| t > 0.0 && t < end);
        out
    }

    fn bisect(&self, mut lo: f64, mut hi: f64, lo_positive: bool) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if (self.excess(mid) > 0.0) == lo_positive {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// How `g(t)` is evaluated for a flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisConfig {
    pub normalization: Normalization,
    /// Legendre window; `t ∈ [0, window]` maps to `x ∈ [-1, 1]`.
    pub window: f64,
    /// Replace `g(t)` by `g(t) - e^{-αt} g(0)` so that `μ_0 = 0` exactly.
    pub origin_correction: bool,
}

impl BasisConfig {
    pub fn new(window: f64) -> Self {
        Self {
            normalization: Normalization::Hippo,
            window,
            origin_correction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    pub z: DVector<f64>,
    pub psi: DVector<f64>,
    pub dpsi_dt: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatentFlow {
    state: LegSState,
    schedule: FlowSchedule,
    basis: BasisConfig,
    origin_basis: DVector<f64>,
}

impl VideoLatentFlow {
    pub fn new(state: LegSState, schedule: FlowSchedule, basis: BasisConfig) -> Result<Self> {
        let origin_basis =
            basis_for_order(state.order(), 0.0, basis.window, basis.normalization)?.g;
        Ok(Self {
            state,
            schedule,
            basis,
            origin_basis,
        })
    }

    /// Fits `H_N` from observed latents (one row per observed frame, in
    /// time order) and wraps it with the schedule and basis.
    pub fn from_observed(
        op: &LegSOperator,
        observed: &[DVector<f64>],
        schedule: FlowSchedule,
        basis: BasisConfig,
    ) -> Result<Self> {
        let d = observed
            .first()
            .map(|u| u.len())
            .ok_or_else(|| Error::Domain("no observed latents".into()))?;
        let state = LegSState::fit(op, d, observed.iter().map(|u| u.as_slice()))?;
        Self::new(state, schedule, basis)
    }

    pub fn state(&self) -> &LegSState {
        &self.state
    }

    pub fn schedule(&self) -> &FlowSchedule {
        &self.schedule
    }

    pub fn basis_config(&self) -> &BasisConfig {
        &self.basis
    }

    pub fn latent_dim(&self) -> usize {
        self.state.latent_dim()
    }

    pub fn order(&self) -> usize {
        self.state.order()
    }

    /// Effective basis row and its derivative at `t` (origin-corrected when
    /// enabled).
    pub fn basis_at(&self, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let b = basis_for_order(self.order(), t, self.basis.window, self.basis.normalization)?;
        if !self.basis.origin_correction {
            return Ok((b.g, b.g_prime));
        }
        let alpha = self.schedule.alpha;
        let decay = (-alpha * t).exp();
        let g = b.g - &self.origin_basis * decay;
        let g_prime = b.g_prime + &self.origin_basis * (alpha * decay);
        Ok((g, g_prime))
    }

    pub fn mu(&self, t: f64) -> Result<DVector<f64>> {
        let (g, _) = self.basis_at(t)?;
        Ok(self.state.coefficients() * g)
    }

    pub fn mu_prime(&self, t: f64) -> Result<DVector<f64>> {
        let (_, gp) = self.basis_at(t)?;
        Ok(self.state.coefficients() * gp)
    }

    pub fn mu_and_prime(&self, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let (g, gp) = self.basis_at(t)?;
        let h = self.state.coefficients();
        Ok((h * g, h * gp))
    }

    pub fn sample(&self, z: &DVector<f64>, t: f64) -> Result<FlowSample> {
        check_dim("flow noise", self.latent_dim(), z.len())?;
        check_finite("flow noise", z.as_slice())?;
        let sigma = self.schedule.sigma(t)?;
        let dsigma = self.schedule.sigma_prime(t)?;
        let (mu, dmu) = self.mu_and_prime(t)?;
        Ok(FlowSample {
            t,
            z: z.clone(),
            psi: z * sigma + mu,
            dpsi_dt: z * dsigma + dmu,
        })
    }

    /// Minimiser of the flow-matching objective:
    /// `(σ'/σ)(y - μ_t) + μ'_t`.
    pub fn closed_form_field(&self, y: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        check_dim("field state", self.latent_dim(), y.len())?;
        let sigma = self.schedule.sigma(t)?;
        if sigma <= 0.0 {
            return Err(Error::Domain(format!("sigma vanished at t = {t}")));
        }
        let ratio = self.schedule.sigma_prime(t)? / sigma;
        let (mu, dmu) = self.mu_and_prime(t)?;
        Ok((y - mu) * ratio + dmu)
    }
}
