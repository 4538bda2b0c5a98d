//! ODE sampling, PSNR, the masked least-squares oracle, the error-budget
//! decomposition and the harnesses built on them.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::flow::VideoLatentFlow;
use crate::legs::{basis_for_order, LegSOperator, LegSState};
use crate::sig17;
use crate::train::ConditionalField;
use crate::world::{LatentTrajectory, ObservationPlan, SyntheticDecoder};

pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeConfig {
    /// Uniform RK4 steps on `[0, end]`; query times and breakpoints are
    /// inserted as extra knots.
    pub steps: usize,
    pub end: f64,
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Domain("ODE step count must be at least 1".into()));
        }
        if !(self.end > 0.0) || !self.end.is_finite() {
            return Err(Error::Domain(format!("ODE end time must be positive, got {}", self.end)));
        }
        Ok(())
    }
}

/// Classical RK4 for `dy/dt = f(y, t)`, `y(0) = z`, returning `y` at each
/// query time (in the order given).
///
/// `breakpoints` mark discontinuities of `f` in `t` (for instance where the
/// noise schedule's clamp switches). They become knots, and the field is
/// evaluated just inside each sub-interval there so every RK4 step sees a
/// smooth `f`.
pub fn integrate_field<F>(
    field: F,
    z: &DVector<f64>,
    cfg: &OdeConfig,
    queries: &[f64],
    breakpoints: &[f64],
) -> Result<Vec<DVector<f64>>>
where
    F: Fn(&DVector<f64>, f64) -> Result<DVector<f64>>,
{
    cfg.validate()?;
    check_finite("ODE initial state", z.as_slice())?;
    for &q in queries {
        if !(0.0..=cfg.end).contains(&q) {
            return Err(Error::Domain(format!("query time {q} outside [0, {}]", cfg.end)));
        }
    }
    #[derive(Clone, Copy)]
    struct Knot {
        t: f64,
        kink: bool,
    }
    let h = cfg.end / cfg.steps as f64;
    let mut knots: Vec<Knot> = (0..=cfg.steps)
        .map(|k| Knot {
            t: if k == cfg.steps { cfg.end } else { k as f64 * h },
            kink: false,
        })
        .collect();
    knots.extend(queries.iter().map(|&t| Knot { t, kink: false }));
    knots.extend(
        breakpoints
            .iter()
            .filter(|&&b| b > 0.0 && b < cfg.end)
            .map(|&t| Knot { t, kink: true }),
    );
    knots.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut merged: Vec<Knot> = Vec::with_capacity(knots.len());
    for k in knots {
        match merged.last_mut() {
            Some(last) if (k.t - last.t).abs() <= 1e-14 * cfg.end.max(1.0) => last.kink |= k.kink,
            _ => merged.push(k),
        }
    }

    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.sort_by(|&a, &b| queries[a].total_cmp(&queries[b]));
    let mut out = vec![DVector::zeros(z.len()); queries.len()];
    let mut next = 0;
    let mut y = z.clone();
    let record = |y: &DVector<f64>, t: f64, next: &mut usize, out: &mut Vec<DVector<f64>>| {
        while *next < order.len() && (queries[order[*next]] - t).abs() <= 1e-14 * cfg.end.max(1.0) {
            out[order[*next]] = y.clone();
            *next += 1;
        }
    };
    record(&y, merged[0].t, &mut next, &mut out);
    for w in merged.windows(2) {
        let (a, b) = (w[0], w[1]);
        let dt = b.t - a.t;
        let nudge = 1e-9 * dt;
        let ta = if a.kink { a.t + nudge } else { a.t };
        let tb = if b.kink { b.t - nudge } else { b.t };
        let tm = a.t + 0.5 * dt;
        let k1 = field(&y, ta)?;
        let k2 = field(&(&y + &k1 * (0.5 * dt)), tm)?;
        let k3 = field(&(&y + &k2 * (0.5 * dt)), tm)?;
        let k4 = field(&(&y + &k3 * dt), tb)?;
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::IntegrationFailed { time: b.t });
        }
        record(&y, b.t, &mut next, &mut out);
    }
    Ok(out)
}

/// `10 log10(r_max² / MSE)`, capped at [`PSNR_CAP_DB`] once
/// `MSE < 1e-16 r_max²`.
pub fn psnr(x: &[f64], y: &[f64], r_max: f64) -> Result<f64> {
    check_dim("psnr operands", x.len(), y.len())?;
    if x.is_empty() {
        return Err(Error::Domain("psnr of empty images".into()));
    }
    if !(r_max > 0.0) {
        return Err(Error::Domain(format!("psnr range must be positive, got {r_max}")));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    let peak = r_max * r_max;
    if mse < 1e-16 * peak {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Dynamic range `2 U L0` of decoded toy frames.
pub fn frame_range(bound: f64, decoder: &SyntheticDecoder) -> f64 {
    2.0 * bound * decoder.lipschitz_bound()
}

/// Minimum-norm solution `H` (`d × s`) of `min ‖M (G Hᵀ − u)‖`, where `M`
/// keeps the rows with `mask[i] == true`.
pub fn masked_lsq_oracle(g: &DMatrix<f64>, mask: &[bool], u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("oracle mask", g.nrows(), mask.len())?;
    check_dim("oracle targets", g.nrows(), u.nrows())?;
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let s = g.ncols();
    let gm = g.select_rows(&rows);
    let um = u.select_rows(&rows);
    let svd = gm.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = smax * f64::EPSILON * rows.len().max(s) as f64;
    let rank = svd.singular_values.iter().filter(|&&v| v > tol).count();
    if rank < s {
        return Err(Error::RankDeficient { rank, required: s });
    }
    let h_t = svd.solve(&um, tol).map_err(|e| Error::Domain(e.to_string()))?;
    Ok(h_t.transpose())
}

/// Basis matrix with row `τ-1` equal to `g(τ Δt)ᵀ` for `τ = 1..=frames`.
pub fn basis_matrix(flow: &VideoLatentFlow, dt: f64, frames: usize) -> Result<DMatrix<f64>> {
    let cfg = flow.basis_config();
    let mut g = DMatrix::zeros(frames, flow.order());
    for tau in 1..=frames {
        let b = basis_for_order(flow.order(), tau as f64 * dt, cfg.window, cfg.normalization)?;
        g.set_row(tau - 1, &b.g.transpose());
    }
    Ok(g)
}

/// `(1−δ)` empirical quantile of `‖σ z‖₂` for `z ~ N(0, I_d)`.
pub fn gaussian_norm_quantile(d: usize, sigma: f64, delta: f64, samples: usize, seed: u64) -> Result<f64> {
    if d == 0 || samples == 0 {
        return Err(Error::Domain("quantile needs positive dimension and sample count".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0,1), got {delta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut norms: Vec<f64> = (0..samples)
        .map(|_| {
            let sq: f64 = (0..d)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    v * v
                })
                .sum();
            sigma * sq.sqrt()
        })
        .collect();
    norms.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&norms, 1.0 - delta))
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub time: f64,
    pub residual: f64,
    pub satisfied: bool,
}

/// Measured error budget and the per-time check of
/// `‖D(û_t) − V_t‖₂ ≤ ε0 + L0 (ε1 + ε2 + ε3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub eps0: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub lambda_star: f64,
    pub delta: f64,
    pub lipschitz: f64,
    pub bound_rhs: f64,
    pub satisfaction: f64,
    /// Largest gap between the streaming reconstruction and the masked
    /// oracle fit; diagnostic only, not part of the bound.
    pub streaming_gap: f64,
    pub rows: Vec<BoundRow>,
}

impl ErrorReport {
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("eps0", self.eps0),
            ("eps1", self.eps1),
            ("eps2", self.eps2),
            ("eps3", self.eps3),
            ("lambda_star", self.lambda_star),
            ("delta", self.delta),
            ("lipschitz", self.lipschitz),
            ("bound_rhs", self.bound_rhs),
            ("satisfaction", self.satisfaction),
            ("streaming_gap", self.streaming_gap),
        ] {
            writeln!(s, "{k}={}", sig17(v)).unwrap();
        }
        s
    }
}

pub struct DecompositionInput<'a> {
    pub flow: &'a VideoLatentFlow,
    pub trajectory: &'a LatentTrajectory,
    pub decoder: &'a SyntheticDecoder,
    pub plan: &'a ObservationPlan,
    pub dt: f64,
    pub delta: f64,
    /// Monte Carlo draws for `ε2`.
    pub samples: usize,
    pub seed: u64,
    pub eps0: f64,
    /// Generated latents `û` at grid times `τ Δt`, `τ = 1..=frames`.
    pub estimates: &'a [DVector<f64>],
}

pub fn error_decomposition(input: &DecompositionInput<'_>) -> Result<ErrorReport> {
    let frames = input.plan.total();
    check_dim("estimates per grid time", frames, input.estimates.len())?;
    if !(input.eps0 >= 0.0) {
        return Err(Error::Domain("eps0 must be non-negative".into()));
    }
    let d = input.flow.latent_dim();
    let g = basis_matrix(input.flow, input.dt, frames)?;
    let svals = g.clone().svd(false, false).singular_values;
    let lambda_star = svals.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lambda_star >= 1e-12) {
        return Err(Error::RankDeficient {
            rank: svals.iter().filter(|&&v| v >= 1e-12).count(),
            required: g.ncols(),
        });
    }
    let times: Vec<f64> = (1..=frames).map(|tau| tau as f64 * input.dt).collect();
    let mut u = DMatrix::zeros(frames, d);
    for (r, &t) in times.iter().enumerate() {
        u.set_row(r, &input.trajectory.eval(t)?.transpose());
    }
    let h_full = masked_lsq_oracle(&g, &vec![true; frames], &u)?;
    let h_mask = masked_lsq_oracle(&g, &input.plan.mask(), &u)?;
    let fit_full = &g * h_full.transpose();
    let fit_mask = &g * h_mask.transpose();
    let row_max = |m: &DMatrix<f64>| m.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let eps1 = row_max(&(&fit_full - &u));
    let eps3 = row_max(&(&fit_mask - &fit_full));
    let mut streaming_gap: f64 = 0.0;
    for (r, &t) in times.iter().enumerate() {
        let mu = input.flow.mu(t)?;
        streaming_gap = streaming_gap.max((mu - fit_mask.row(r).transpose()).norm());
    }

    let schedule = input.flow.schedule();
    let mut sigma_max: f64 = 0.0;
    for &t in &times {
        sigma_max = sigma_max.max(schedule.sigma(t)?);
    }
    let eps2 = gaussian_norm_quantile(d, sigma_max, input.delta, input.samples, input.seed)?;

    let lipschitz = input.decoder.lipschitz_bound();
    let bound_rhs = input.eps0 + lipschitz * (eps1 + eps2 + eps3);
    let mut rows = Vec::with_capacity(frames);
    for (r, &t) in times.iter().enumerate() {
        let frame = input.decoder.decode(&u.row(r).transpose())?;
        let generated = input.decoder.decode(&input.estimates[r])?;
        let residual = (generated - frame).norm();
        rows.push(BoundRow {
            time: t,
            residual,
            satisfied: residual <= bound_rhs,
        });
    }
    let satisfaction = rows.iter().filter(|r| r.satisfied).count() as f64 / frames as f64;
    Ok(ErrorReport {
        eps0: input.eps0,
        eps1,
        eps2,
        eps3,
        lambda_star,
        delta: input.delta,
        lipschitz,
        bound_rhs,
        satisfaction,
        streaming_gap,
        rows,
    })
}

/// Relative Frobenius change of `H` when every sample is held for `beta`
/// consecutive steps.
pub fn timescale_check(samples: &[DVector<f64>], op: &LegSOperator, beta: usize) -> Result<f64> {
    if beta < 2 {
        return Err(Error::Domain(format!("dilation factor must be at least 2, got {beta}")));
    }
    let d = samples
        .first()
        .map(|u| u.len())
        .ok_or_else(|| Error::Domain("timescale check needs samples".into()))?;
    let base = LegSState::fit(op, d, samples.iter().map(|u| u.as_slice()))?;
    let dilated = LegSState::fit(
        op,
        d,
        samples
            .iter()
            .flat_map(|u| std::iter::repeat_n(u.as_slice(), beta)),
    )?;
    let norm = base.coefficients().norm();
    if norm == 0.0 {
        return Err(Error::Domain("coefficient matrix is zero; relative deviation undefined".into()));
    }
    Ok((dilated.coefficients() - base.coefficients()).norm() / norm)
}

/// How generated latents are produced from `(z, c, t)`.
#[derive(Clone, Copy)]
pub enum Generator<'a> {
    /// Integrate `dy/dt = F(y, c, t)` from `y(0) = z`.
    Flow {
        field: &'a dyn ConditionalField,
        steps: usize,
        breakpoints: &'a [f64],
    },
    /// Read `F(z, c, t)` directly.
    Direct { field: &'a dyn ConditionalField },
}

impl Generator<'_> {
    pub fn generate(&self, z: &DVector<f64>, caption: &DVector<f64>, queries: &[f64]) -> Result<Vec<DVector<f64>>> {
        match *self {
            Generator::Flow {
                field,
                steps,
                breakpoints,
            } => {
                let end = queries.iter().cloned().fold(0.0, f64::max);
                if end <= 0.0 {
                    return Ok(vec![z.clone(); queries.len()]);
                }
                integrate_field(
                    |y, t| field.eval(y, caption, t),
                    z,
                    &OdeConfig { steps, end },
                    queries,
                    breakpoints,
                )
            }
            Generator::Direct { field } => queries.iter().map(|&t| field.eval(z, caption, t)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessRow {
    pub query_time: f64,
    pub psnr_db: f64,
    pub l2_residual: f64,
    pub bound_rhs: f64,
    pub satisfied: bool,
    pub in_window: bool,
    pub observed: bool,
}

pub struct HarnessSpec<'a> {
    pub trajectory: &'a LatentTrajectory,
    pub decoder: &'a SyntheticDecoder,
    /// Real times of the observed training frames.
    pub observed_times: &'a [f64],
    pub eval_fps: f64,
    /// Last query time; may exceed the training window.
    pub eval_horizon: f64,
    /// Right-hand side reported per row; `f64::INFINITY` when no bound is
    /// being checked.
    pub bound_rhs: f64,
    pub z: &'a DVector<f64>,
}

/// Query times `k / eval_fps` for `k = 1..=eval_horizon·eval_fps`.
pub fn query_times(eval_fps: f64, eval_horizon: f64) -> Result<Vec<f64>> {
    if !(eval_fps > 0.0) || !(eval_horizon > 0.0) {
        return Err(Error::Domain("evaluation rate and horizon must be positive".into()));
    }
    let count = (eval_horizon * eval_fps + 1e-9).floor() as usize;
    Ok((1..=count).map(|k| k as f64 / eval_fps).collect())
}

/// Generates latents at every query time, decodes them and compares against
/// the ground-truth frames.
pub fn interpolation_harness(generator: &Generator<'_>, spec: &HarnessSpec<'_>) -> Result<Vec<HarnessRow>> {
    let traj = spec.trajectory;
    let queries = query_times(spec.eval_fps, spec.eval_horizon)?;
    if let Some(&last) = queries.last() {
        if last > traj.support() * (1.0 + 1e-12) {
            return Err(Error::OutsideSupport {
                time: last,
                support: traj.support(),
            });
        }
    }
    let r_max = frame_range(traj.config().bound, spec.decoder);
    let generated = generator.generate(spec.z, traj.caption(), &queries)?;
    let window = traj.horizon();
    queries
        .iter()
        .zip(generated)
        .map(|(&t, u_hat)| {
            let truth = spec.decoder.decode(&traj.eval(t)?)?;
            let frame = spec.decoder.decode(&u_hat)?;
            let residual = (&frame - &truth).norm();
            Ok(HarnessRow {
                query_time: t,
                psnr_db: psnr(frame.as_slice(), truth.as_slice(), r_max)?,
                l2_residual: residual,
                bound_rhs: spec.bound_rhs,
                satisfied: residual <= spec.bound_rhs,
                in_window: t <= window * (1.0 + 1e-12),
                observed: spec
                    .observed_times
                    .iter()
                    .any(|&o| (o - t).abs() <= 1e-9 * window.max(1.0)),
            })
        })
        .collect()
}

pub fn write_harness_csv<W: Write>(out: &mut W, trajectory: usize, rows: &[HarnessRow]) -> Result<()> {
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            sig17(r.query_time),
            sig17(r.psnr_db),
            sig17(r.l2_residual),
            sig17(r.bound_rhs),
            u8::from(r.satisfied),
            trajectory,
            if r.in_window { "in" } else { "out" },
            u8::from(r.observed),
        )?;
    }
    Ok(())
}

pub const HARNESS_CSV_HEADER: &str = "query_time,psnr_db,l2_residual,bound_rhs,satisfied,trajectory,window,observed";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{BasisConfig, FlowSchedule};
    use crate::legs::LegSOperator;
    use crate::world::{gen_trajectory, TrajectoryConfig};
    use rand::Rng;

    fn flow_for(n: usize, s: usize, seed: u64) -> (VideoLatentFlow, LatentTrajectory) {
        let traj = gen_trajectory(seed, &TrajectoryConfig::new(3, 2, 1.0)).unwrap();
        let op = LegSOperator::new(s).unwrap();
        let obs: Vec<_> = (1..=n).map(|k| traj.eval(k as f64 / n as f64).unwrap()).collect();
        let sched = FlowSchedule::with_defaults(n, 1.0).unwrap();
        let flow = VideoLatentFlow::from_observed(&op, &obs, sched, BasisConfig::new(1.0)).unwrap();
        (flow, traj)
    }

    #[test]
    fn rk4_exact_on_constant_field() {
        let z = DVector::from_vec(vec![1.0, -2.0]);
        let v = DVector::from_vec(vec![0.5, 0.25]);
        let q = [0.3, 1.0, 0.0, 0.77];
        let out = integrate_field(|_, _| Ok(v.clone()), &z, &OdeConfig { steps: 7, end: 1.0 }, &q, &[]).unwrap();
        for (y, &t) in out.iter().zip(&q) {
            assert!((y - (&z + &v * t)).amax() < 1e-14);
        }
    }

    #[test]
    fn rk4_recovers_flow_path() {
        let (flow, _) = flow_for(2, 4, 3);
        let z = DVector::from_vec(vec![0.4, -1.3, 0.8]);
        let q: Vec<f64> = (1..=40).map(|k| k as f64 / 40.0).collect();
        let bps = flow.schedule().clamp_breakpoints(1.0);
        let out = integrate_field(
            |y, t| flow.closed_form_field(y, t),
            &z,
            &OdeConfig { steps: 512, end: 1.0 },
            &q,
            &bps,
        )
        .unwrap();
        for (y, &t) in out.iter().zip(&q) {
            let exact = flow.sample(&z, t).unwrap().psi;
            assert!((y - exact).amax() < 1e-5, "t={t}");
        }
    }

    #[test]
    fn rk4_fourth_order() {
        let (flow, _) = flow_for(2, 4, 5);
        let z = DVector::from_vec(vec![1.0, 0.5, -0.5]);
        let bps = flow.schedule().clamp_breakpoints(1.0);
        let q: Vec<f64> = (1..=16).map(|k| k as f64 / 16.0).collect();
        let err = |steps: usize| {
            let out = integrate_field(
                |y, t| flow.closed_form_field(y, t),
                &z,
                &OdeConfig { steps, end: 1.0 },
                &q,
                &bps,
            )
            .unwrap();
            out.iter()
                .zip(&q)
                .map(|(y, &t)| (y - flow.sample(&z, t).unwrap().psi).amax())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(512), err(1024));
        assert!(e1 / e2 >= 12.0, "ratio {}", e1 / e2);
        let order = (e1 / e2).log2();
        assert!((3.5..=4.5).contains(&order), "order {order}");
    }

    #[test]
    fn rk4_rejects_bad_config() {
        let z = DVector::zeros(1);
        let f = |_: &DVector<f64>, _: f64| Ok(DVector::zeros(1));
        assert!(integrate_field(f, &z, &OdeConfig { steps: 0, end: 1.0 }, &[0.5], &[]).is_err());
        assert!(integrate_field(f, &z, &OdeConfig { steps: 4, end: 1.0 }, &[1.5], &[]).is_err());
        let blow = |y: &DVector<f64>, _: f64| Ok(y * 1e300);
        let err = integrate_field(blow, &DVector::from_element(1, 1.0), &OdeConfig { steps: 4, end: 1.0 }, &[1.0], &[])
            .unwrap_err();
        assert!(matches!(err, Error::IntegrationFailed { .. }));
    }

    #[test]
    fn psnr_cases() {
        let x = [0.0, 0.0, 0.0, 0.0];
        assert!((psnr(&x, &[2.0; 4], 2.0).unwrap()).abs() < 1e-12);
        assert!((psnr(&x, &[0.2; 4], 2.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&x, &x, 2.0).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&x, &[0.0; 3], 1.0).is_err());
    }

    #[test]
    fn oracle_consistent_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = DMatrix::from_fn(20, 4, |_, _| rng.random_range(-1.0..1.0));
        let h = DMatrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
        let u = &g * h.transpose();
        let fit = masked_lsq_oracle(&g, &[true; 20], &u).unwrap();
        assert!((&g * fit.transpose() - u).amax() < 1e-10);
    }

    #[test]
    fn oracle_ones_column_gives_means() {
        let g = DMatrix::from_element(5, 1, 1.0);
        let u = DMatrix::from_row_slice(5, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let h = masked_lsq_oracle(&g, &[true; 5], &u).unwrap();
        assert!((h[(0, 0)] - 5.0).abs() < 1e-12 && (h[(1, 0)] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = DMatrix::from_fn(30, 5, |_, _| rng.random_range(-1.0..1.0));
        let u = DMatrix::from_fn(30, 3, |_, _| rng.random_range(-1.0..1.0));
        let mask: Vec<bool> = (0..30).map(|i| i % 3 != 1).collect();
        let h = masked_lsq_oracle(&g, &mask, &u).unwrap();
        let rows: Vec<usize> = (0..30).filter(|&i| mask[i]).collect();
        let (gm, um) = (g.select_rows(&rows), u.select_rows(&rows));
        let ne = (gm.transpose() * &gm).cholesky().unwrap().solve(&(gm.transpose() * um));
        assert!((h.transpose() - ne).amax() < 1e-8);
    }

    #[test]
    fn oracle_reports_rank() {
        let g = DMatrix::from_fn(6, 3, |r, _| r as f64);
        let u = DMatrix::zeros(6, 1);
        assert_eq!(
            masked_lsq_oracle(&g, &[true; 6], &u).unwrap_err(),
            Error::RankDeficient { rank: 1, required: 3 }
        );
        let g = DMatrix::from_fn(6, 3, |r, c| ((r + 1) as f64).powi(c as i32));
        let mask = [true, true, false, false, false, false];
        assert!(matches!(
            masked_lsq_oracle(&g, &mask, &u),
            Err(Error::RankDeficient { rank: 2, .. })
        ));
    }

    fn analytic_estimates(flow: &VideoLatentFlow, z: &DVector<f64>, times: &[f64]) -> Vec<DVector<f64>> {
        times.iter().map(|&t| flow.sample(z, t).unwrap().psi).collect()
    }

    #[test]
    fn full_plan_has_zero_eps3() {
        let (flow, traj) = flow_for(16, 6, 2);
        let plan = ObservationPlan::full(16).unwrap();
        let dec = SyntheticDecoder::random(1, 3, 6).unwrap();
        let times: Vec<f64> = (1..=16).map(|k| k as f64 / 16.0).collect();
        let z = DVector::from_vec(vec![0.1, 0.2, -0.3]);
        let est = analytic_estimates(&flow, &z, &times);
        let report = error_decomposition(&DecompositionInput {
            flow: &flow,
            trajectory: &traj,
            decoder: &dec,
            plan: &plan,
            dt: 1.0 / 16.0,
            delta: 0.05,
            samples: 2000,
            seed: 1,
            eps0: 0.0,
            estimates: &est,
        })
        .unwrap();
        assert!(report.eps3 < 1e-12);
        assert!(report.lambda_star > 0.0);
        assert!((0.0..=1.0).contains(&report.satisfaction));
        assert!(report.to_key_value().contains("eps3="));
    }

    #[test]
    fn representable_trajectory_has_tiny_eps1() {
        let c = DVector::from_vec(vec![0.3, -0.2]);
        let traj = LatentTrajectory::constant(&c, DVector::zeros(1), 1.0).unwrap();
        let op = LegSOperator::new(1).unwrap();
        let obs = vec![c.clone(); 8];
        let sched = FlowSchedule::with_defaults(8, 1.0).unwrap();
        let flow = VideoLatentFlow::from_observed(&op, &obs, sched, BasisConfig::new(1.0)).unwrap();
        let plan = ObservationPlan::full(8).unwrap();
        let dec = SyntheticDecoder::identity(2).unwrap();
        let est: Vec<_> = (1..=8).map(|k| flow.mu(k as f64 / 8.0).unwrap()).collect();
        let report = error_decomposition(&DecompositionInput {
            flow: &flow,
            trajectory: &traj,
            decoder: &dec,
            plan: &plan,
            dt: 0.125,
            delta: 0.05,
            samples: 100,
            seed: 0,
            eps0: 0.0,
            estimates: &est,
        })
        .unwrap();
        assert!(report.eps1 < 1e-8);
        assert_eq!(report.satisfaction, 1.0);
    }

    #[test]
    fn gaussian_quantile_respects_tail_bound() {
        let d = 64;
        let q = gaussian_norm_quantile(d, 1.0, 0.01, 100_000, 7).unwrap();
        assert!(q <= 2.0 * (d as f64 * (d as f64 / 0.01).ln()).sqrt());
        assert!(q > (d as f64).sqrt());
    }

    #[test]
    fn timescale_constant_is_invariant() {
        let op = LegSOperator::new(1).unwrap();
        let samples = vec![DVector::from_element(2, 0.6); 10];
        for beta in 2..5 {
            assert_eq!(timescale_check(&samples, &op, beta).unwrap(), 0.0);
        }
        assert!(timescale_check(&[DVector::zeros(2)], &op, 2).is_err());
        assert!(timescale_check(&samples, &op, 1).is_err());
    }

    #[test]
    fn timescale_smooth_trajectory() {
        let traj = gen_trajectory(1, &TrajectoryConfig::new(3, 1, 1.0)).unwrap();
        let op = LegSOperator::new(8).unwrap();
        let dev = |n: usize| {
            let s: Vec<_> = (1..=n).map(|k| traj.eval(k as f64 / n as f64).unwrap()).collect();
            timescale_check(&s, &op, 2).unwrap()
        };
        let (a, b) = (dev(128), dev(256));
        assert!(a < 0.05, "{a}");
        assert!(b < a);
    }

    struct Analytic<'a>(&'a VideoLatentFlow);
    impl ConditionalField for Analytic<'_> {
        fn latent_dim(&self) -> usize {
            self.0.latent_dim()
        }
        fn eval(&self, y: &DVector<f64>, _: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
            self.0.closed_form_field(y, t)
        }
    }

    #[test]
    fn harness_observed_nodes_and_rates() {
        let n = 16;
        let (flow, traj) = flow_for(n, 10, 4);
        let dec = SyntheticDecoder::random(2, 3, 8).unwrap();
        let observed: Vec<f64> = (1..=n).map(|k| k as f64 / n as f64).collect();
        let bps = flow.schedule().clamp_breakpoints(1.0);
        let field = Analytic(&flow);
        let gen = Generator::Flow {
            field: &field,
            steps: 1024,
            breakpoints: &bps,
        };
        let z = DVector::zeros(3);
        let spec = |fps: f64| HarnessSpec {
            trajectory: &traj,
            decoder: &dec,
            observed_times: &observed,
            eval_fps: fps,
            eval_horizon: 1.0,
            bound_rhs: f64::INFINITY,
            z: &z,
        };
        let base = interpolation_harness(&gen, &spec(16.0)).unwrap();
        assert_eq!(base.len(), 16);
        assert!(base.iter().all(|r| r.observed && r.in_window));
        let double = interpolation_harness(&gen, &spec(32.0)).unwrap();
        assert_eq!(double.len(), 32);
        for r in &base {
            let m = double.iter().find(|d| (d.query_time - r.query_time).abs() < 1e-12).unwrap();
            assert!((m.psnr_db - r.psnr_db).abs() < 1e-6);
        }
        assert_eq!(double.iter().filter(|r| !r.observed).count(), 16);
    }
}
