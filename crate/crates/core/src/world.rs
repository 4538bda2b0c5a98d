//! Synthetic ground truth: bounded smooth latent trajectories, an injective
//! affine decoder into frame space, discretisation and observation masks.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, check_finite, Error, Result};

/// Points used when rescaling a trajectory onto its bound.
const BOUND_GRID: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryConfig {
    pub latent_dim: usize,
    pub caption_dim: usize,
    /// Harmonic `j` has amplitude scale `j^{-k}`.
    pub smoothness: u32,
    /// Entry bound `U`.
    pub bound: f64,
    /// Training window `T`.
    pub horizon: f64,
    /// Time range `[0, support]` on which the trajectory is defined and bounded.
    /// At least `horizon`; larger values allow extrapolation queries.
    pub support: f64,
    pub harmonics: usize,
    /// Fraction in `[0, 1]` of the headroom filled by the oscillating part;
    /// zero gives the constant trajectory `offset`.
    pub amplitude: f64,
    /// Constant added to every entry. `|offset| ≤ bound`; the oscillating part
    /// is scaled to the remaining headroom.
    pub offset: f64,
}

impl TrajectoryConfig {
    pub fn new(latent_dim: usize, caption_dim: usize, horizon: f64) -> Self {
        Self {
            latent_dim,
            caption_dim,
            smoothness: 2,
            bound: 1.0,
            horizon,
            support: horizon,
            harmonics: 5,
            amplitude: 1.0,
            offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.caption_dim == 0 {
            return Err(Error::Domain("latent and caption dimensions must be positive".into()));
        }
        if !(self.bound > 0.0) || !self.bound.is_finite() {
            return Err(Error::Domain(format!("bound must be positive, got {}", self.bound)));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Domain(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.support >= self.horizon) || !self.support.is_finite() {
            return Err(Error::Domain(format!(
                "support {} must be at least the horizon {}",
                self.support, self.horizon
            )));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::Domain(format!("amplitude must lie in [0, 1], got {}", self.amplitude)));
        }
        if !(self.offset.abs() <= self.bound) {
            return Err(Error::Domain(format!("offset {} exceeds bound {}", self.offset, self.bound)));
        }
        Ok(())
    }
}

/// `u_i(t) = offset + Σ_j a_ij cos(ω_j t + φ_ij)` with `ω_j = jπ/T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    config: TrajectoryConfig,
    seed: u64,
    frequencies: Vec<f64>,
    amplitudes: DMatrix<f64>,
    phases: DMatrix<f64>,
    caption: DVector<f64>,
}

pub fn gen_trajectory(seed: u64, config: &TrajectoryConfig) -> Result<LatentTrajectory> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, h) = (config.latent_dim, config.harmonics);
    let mut amplitudes = DMatrix::zeros(d, h);
    let mut phases = DMatrix::zeros(d, h);
    for i in 0..d {
        for j in 0..h {
            let z: f64 = StandardNormal.sample(&mut rng);
            amplitudes[(i, j)] = z / ((j + 1) as f64).powi(config.smoothness as i32);
            phases[(i, j)] = rng.random_range(0.0..2.0 * PI);
        }
    }
    let caption = DVector::from_fn(config.caption_dim, |_, _| StandardNormal.sample(&mut rng));
    let mut traj = LatentTrajectory {
        config: *config,
        seed,
        frequencies: (1..=h).map(|j| j as f64 * PI / config.horizon).collect(),
        amplitudes,
        phases,
        caption,
    };
    traj.rescale();
    Ok(traj)
}

impl LatentTrajectory {
    /// Constant trajectory, mainly for exactness checks.
    pub fn constant(value: &DVector<f64>, caption: DVector<f64>, horizon: f64) -> Result<Self> {
        check_finite("constant trajectory", value.as_slice())?;
        let mut config = TrajectoryConfig::new(value.len(), caption.len(), horizon);
        config.bound = value.amax().max(f64::MIN_POSITIVE);
        config.harmonics = 1;
        config.amplitude = 0.0;
        config.validate()?;
        // One zero-frequency term with phase 0 carries the value.
        Ok(Self {
            config,
            seed: 0,
            frequencies: vec![0.0],
            amplitudes: DMatrix::from_column_slice(value.len(), 1, value.as_slice()),
            phases: DMatrix::zeros(value.len(), 1),
            caption,
        })
    }

    fn frequency(&self, j: usize) -> f64 {
        self.frequencies[j]
    }

    fn series(&self, t: f64) -> DVector<f64> {
        let (d, h) = self.amplitudes.shape();
        DVector::from_fn(d, |i, _| {
            (0..h)
                .map(|j| self.amplitudes[(i, j)] * (self.frequency(j) * t + self.phases[(i, j)]).cos())
                .sum()
        })
    }

    fn series_derivative(&self, t: f64) -> DVector<f64> {
        let (d, h) = self.amplitudes.shape();
        DVector::from_fn(d, |i, _| {
            (0..h)
                .map(|j| {
                    let w = self.frequency(j);
                    -self.amplitudes[(i, j)] * w * (w * t + self.phases[(i, j)]).sin()
                })
                .sum()
        })
    }

    /// Scales the oscillating part so that the bound holds everywhere on the
    /// support: grid maximum plus a Lipschitz allowance for the gaps.
    fn rescale(&mut self) {
        let headroom = self.config.bound - self.config.offset.abs();
        if self.config.amplitude == 0.0 || headroom <= 0.0 {
            self.amplitudes.fill(0.0);
            return;
        }
        let support = self.config.support;
        let step = support / BOUND_GRID as f64;
        let mut peak: f64 = 0.0;
        for k in 0..=BOUND_GRID {
            peak = peak.max(self.series(k as f64 * step).amax());
        }
        let lipschitz = (0..self.amplitudes.nrows())
            .map(|i| {
                (0..self.amplitudes.ncols())
                    .map(|j| self.amplitudes[(i, j)].abs() * self.frequency(j))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        let envelope = peak + 0.5 * lipschitz * step;
        if envelope > 0.0 {
            self.amplitudes *= self.config.amplitude * headroom / envelope;
        }
    }

    pub fn config(&self) -> &TrajectoryConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn caption(&self) -> &DVector<f64> {
        &self.caption
    }

    pub fn latent_dim(&self) -> usize {
        self.amplitudes.nrows()
    }

    pub fn horizon(&self) -> f64 {
        self.config.horizon
    }

    pub fn support(&self) -> f64 {
        self.config.support
    }

    fn check_support(&self, t: f64) -> Result<()> {
        let support = self.config.support;
        if t.is_nan() || t < 0.0 || t > support * (1.0 + 1e-12) {
            Err(Error::OutsideSupport { time: t, support })
        } else {
            Ok(())
        }
    }

    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        self.check_support(t)?;
        Ok(self.series(t).add_scalar(self.config.offset))
    }

    pub fn derivative(&self, t: f64) -> Result<DVector<f64>> {
        self.check_support(t)?;
        Ok(self.series_derivative(t))
    }
}

/// Injective affine decoder `x ↦ W x + b` from latent space into frame space.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDecoder {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
    pinv: DMatrix<f64>,
    lipschitz: f64,
}

/// Largest residual `invert` accepts before declaring a frame corrupt.
pub const OFF_IMAGE_TOLERANCE: f64 = 1e-6;

impl SyntheticDecoder {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        let (frame_dim, latent_dim) = weight.shape();
        check_dim("decoder bias", frame_dim, bias.len())?;
        if latent_dim == 0 || frame_dim < latent_dim {
            return Err(Error::Domain(format!(
                "decoder needs frame dim >= latent dim >= 1, got {frame_dim}x{latent_dim}"
            )));
        }
        check_finite("decoder weight", weight.as_slice())?;
        check_finite("decoder bias", bias.as_slice())?;
        let svd = weight.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-10 * smax) {
            let rank = svd.rank(1e-10 * smax);
            return Err(Error::RankDeficient {
                rank,
                required: latent_dim,
            });
        }
        let pinv = svd.pseudo_inverse(0.0).map_err(|e| Error::Domain(e.to_string()))?;
        Ok(Self {
            weight,
            bias,
            pinv,
            lipschitz: smax,
        })
    }

    pub fn identity(d: usize) -> Result<Self> {
        Self::new(DMatrix::identity(d, d), DVector::zeros(d))
    }

    /// Gaussian weights scaled by `1/√D` and a small Gaussian bias.
    pub fn random(seed: u64, latent_dim: usize, frame_dim: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (frame_dim as f64).sqrt();
        let weight = DMatrix::from_fn(frame_dim, latent_dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        });
        let bias = DVector::from_fn(frame_dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.1 * z
        });
        Self::new(weight, bias)
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn latent_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn frame_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Largest singular value of `W`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz
    }

    pub fn decode(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("decode input", self.latent_dim(), x.len())?;
        Ok(&self.weight * x + &self.bias)
    }

    pub fn invert(&self, frame: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("invert input", self.frame_dim(), frame.len())?;
        let centred = frame - &self.bias;
        let x = &self.pinv * &centred;
        let residual = (&self.weight * &x - centred).norm();
        if !(residual <= OFF_IMAGE_TOLERANCE) {
            return Err(Error::OffImage { residual });
        }
        Ok(x)
    }
}

/// Selection of observed frames out of `total` frames `1..=total` (stored as
/// 0-based row indices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationPlan {
    total: usize,
    indices: Vec<usize>,
}

impl ObservationPlan {
    pub fn full(total: usize) -> Result<Self> {
        Self::from_indices(total, (0..total).collect())
    }

    /// Rows `0, stride, 2·stride, …`.
    pub fn every(total: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Domain("stride must be positive".into()));
        }
        Self::from_indices(total, (0..total).step_by(stride).collect())
    }

    /// Rows `stride-1, 2·stride-1, …`, so observation `k` sits at time
    /// `k·stride·Δt`, which is the LegS node `(T/N)·k` when `stride` divides
    /// the frame count.
    pub fn every_aligned(total: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Domain("stride must be positive".into()));
        }
        Self::from_indices(total, (stride - 1..total).step_by(stride).collect())
    }

    pub fn from_indices(total: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Domain("observation plan selects no frames".into()));
        }
        if indices.len() > total {
            return Err(Error::Domain(format!(
                "observed count {} exceeds frame count {total}",
                indices.len()
            )));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Domain("plan indices must be strictly increasing".into()));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= total {
                return Err(Error::Domain(format!("plan index {last} out of range for {total} frames")));
            }
        }
        Ok(Self { total, indices })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn observed(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.total
    }

    pub fn contains(&self, row: usize) -> bool {
        self.indices.binary_search(&row).is_ok()
    }

    /// Boolean mask over all rows.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }

    /// Real times `(row+1)·Δt` of the observed frames.
    pub fn observed_times(&self, dt: f64) -> Vec<f64> {
        self.indices.iter().map(|&i| (i + 1) as f64 * dt).collect()
    }
}

/// Number of frames `T/Δt`, rejecting steps that do not divide the window.
pub fn frame_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!("frame step must be positive, got {dt}")));
    }
    let ratio = horizon / dt;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Domain(format!("frame step {dt} does not divide horizon {horizon}")));
    }
    Ok(n as usize)
}

/// Row `τ-1` holds `decode(u(τ·Δt))` for `τ = 1..=T/Δt`.
pub fn discretize(traj: &LatentTrajectory, decoder: &SyntheticDecoder, dt: f64) -> Result<DMatrix<f64>> {
    check_dim("discretize latent dim", decoder.latent_dim(), traj.latent_dim())?;
    let frames = frame_count(traj.horizon(), dt)?;
    let mut table = DMatrix::zeros(frames, decoder.frame_dim());
    for tau in 1..=frames {
        let v = decoder.decode(&traj.eval(tau as f64 * dt)?)?;
        table.set_row(tau - 1, &v.transpose());
    }
    Ok(table)
}

pub fn observe(table: &DMatrix<f64>, plan: &ObservationPlan) -> Result<DMatrix<f64>> {
    check_dim("observation plan frame count", plan.total(), table.nrows())?;
    Ok(table.select_rows(plan.indices()))
}

/// Latents recovered from each row of a frame table.
pub fn invert_frames(decoder: &SyntheticDecoder, table: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    table
        .row_iter()
        .map(|row| decoder.invert(&row.transpose()))
        .collect()
}
