//! Pure trajectory, schedule and time-grid math. No learned parameters.
//!
//! The data-to-noise path is the straight interpolation
//! `x_t = (1-t)*x0 + t*eps`, optionally with the signal component scaled by
//! `gamma` (which lowers the signal-to-noise ratio while keeping the path
//! shape). Network inputs are divided by `sqrt(gamma^2 (1-t)^2 + t^2)` so
//! unit-variance data stays unit variance at every `t`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Trajectory parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    RectifiedFlow,
    DdpmLinear,
}

/// Noise/trajectory schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Signal scale in `(0, 1]`; 1 disables scaling.
    pub gamma: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Discrete step count `T` (DDPM mode only).
    pub num_discrete_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::RectifiedFlow,
            gamma: 1.0,
            beta_start: 1e-4,
            beta_end: 0.02,
            num_discrete_steps: 1000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid_argument(format!(
                "gamma must lie in (0,1], got {}",
                self.gamma
            )));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::invalid_argument(format!(
                "need 0 < beta_start <= beta_end < 1, got {} / {}",
                self.beta_start, self.beta_end
            )));
        }
        if self.num_discrete_steps < 1 {
            return Err(Error::invalid_argument("num_discrete_steps must be >= 1"));
        }
        Ok(())
    }
}

/// Training-time distribution of `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSamplerKind {
    Uniform,
    LogitNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSamplerConfig {
    pub kind: TimeSamplerKind,
    /// Logit-space mean.
    pub loc: f64,
    /// Logit-space standard deviation, > 0.
    pub scale: f64,
    /// Sampled times are clamped to `[clamp_eps, 1 - clamp_eps]`; keeps the
    /// `1/(1-t)` weighting equivalence finite.
    pub clamp_eps: f64,
}

impl Default for TimeSamplerConfig {
    fn default() -> Self {
        Self {
            kind: TimeSamplerKind::LogitNormal,
            loc: 0.0,
            scale: 1.0,
            clamp_eps: 1e-5,
        }
    }
}

impl TimeSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale <= 0.0 {
            return Err(Error::invalid_argument("time sampler scale must be > 0"));
        }
        if !(0.0..0.5).contains(&self.clamp_eps) {
            return Err(Error::invalid_argument("clamp_eps must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// Descending inference time grid from 1 to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceGrid {
    pub times: Vec<f64>,
    pub m: f64,
    pub n: f64,
    pub num_steps: usize,
}

impl InferenceGrid {
    /// Reversed-logarithmic spacing: a uniform grid mapped through
    /// [`rho_log`], denser near `t = 1`.
    pub fn rho_log(num_steps: usize, m: f64, n: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid_argument("inference grid needs N >= 1"));
        }
        let times = (0..=num_steps)
            .map(|i| rho_log(i as f64 / num_steps as f64, m, n))
            .collect::<Result<Vec<_>>>()?;
        let grid = Self {
            times,
            m,
            n,
            num_steps,
        };
        grid.check_invariants()?;
        Ok(grid)
    }

    /// Uniform spacing `1, (N-1)/N, ..., 0` (the `m = n` fallback).
    pub fn uniform(num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid_argument("inference grid needs N >= 1"));
        }
        let times = (0..=num_steps)
            .map(|i| 1.0 - i as f64 / num_steps as f64)
            .collect();
        Ok(Self {
            times,
            m: 1.0,
            n: 1.0,
            num_steps,
        })
    }

    fn check_invariants(&self) -> Result<()> {
        if self.times.len() != self.num_steps + 1 {
            return Err(Error::invalid_argument("grid length must be N + 1"));
        }
        if self.times[0] != 1.0 || *self.times.last().unwrap() != 0.0 {
            return Err(Error::invalid_argument("grid must run from 1 to 0"));
        }
        for w in self.times.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::invalid_argument("grid times must strictly descend"));
            }
        }
        Ok(())
    }

    /// Consecutive `(t_from, t_to)` pairs.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[0], w[1]))
    }
}

/// A training-side point on the trajectory together with what generated it.
#[derive(Clone, Debug)]
pub struct FlowState<T> {
    pub x0: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: f64,
    /// Trajectory point `gamma*(1-t)*x0 + t*eps`.
    pub xt: Tensor<T>,
    /// Network input: `xt` divided by the variance normalizer.
    pub xt_normalized: Tensor<T>,
}

impl<T: Scalar> FlowState<T> {
    pub fn new(x0: Tensor<T>, eps: Tensor<T>, t: f64, schedule: &ScheduleConfig) -> Result<Self> {
        schedule.validate()?;
        let (xt, divisor) = scaled_point(&x0, &eps, t, schedule.gamma)?;
        let inv = T::of_f64(1.0 / divisor);
        let xt_normalized = xt.map(|v| v * inv);
        Ok(Self {
            x0,
            eps,
            t,
            xt,
            xt_normalized,
        })
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid_argument(format!(
            "t must lie in [0,1], got {t}"
        )));
    }
    Ok(())
}

/// Straight-path point `(1-t)*x0 + t*eps`.
pub fn rf_point<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_time(t)?;
    let a = T::of_f64(1.0 - t);
    let b = T::of_f64(t);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Gamma-scaled trajectory point and the variance normalizer
/// `sqrt(gamma^2 (1-t)^2 + t^2)` for unit-variance data.
pub fn scaled_point<T: Scalar>(
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    t: f64,
    gamma: f64,
) -> Result<(Tensor<T>, f64)> {
    check_time(t)?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid_argument(format!(
            "gamma must lie in (0,1], got {gamma}"
        )));
    }
    let a = T::of_f64(gamma * (1.0 - t));
    let b = T::of_f64(t);
    let xt = x0.zip_map(eps, |x, e| a * x + b * e)?;
    Ok((xt, norm_divisor(t, gamma)))
}

/// `sqrt(gamma^2 (1-t)^2 + t^2)`.
pub fn norm_divisor(t: f64, gamma: f64) -> f64 {
    (gamma * gamma * (1.0 - t) * (1.0 - t) + t * t).sqrt()
}

/// Velocity of the gamma-scaled path: `eps - gamma*x0`.
pub fn velocity<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, gamma: f64) -> Result<Tensor<T>> {
    let g = T::of_f64(gamma);
    eps.zip_map(x0, |e, x| e - g * x)
}

/// DDPM linear-beta coefficients: per-step `alpha_t` (cumulative, already the
/// square root) and `sigma_t = sqrt(1 - alpha_t^2)`.
pub fn ddpm_coefficients(config: &ScheduleConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    config.validate()?;
    if config.kind != ScheduleKind::DdpmLinear {
        return Err(Error::invalid_argument(
            "ddpm_coefficients needs kind = ddpm_linear",
        ));
    }
    let t_count = config.num_discrete_steps;
    if t_count < 2 {
        return Err(Error::invalid_argument("ddpm schedule needs T >= 2"));
    }
    let mut alpha = Vec::with_capacity(t_count);
    let mut sigma = Vec::with_capacity(t_count);
    let mut prod = 1.0f64;
    for i in 0..t_count {
        let beta = config.beta_start
            + (i as f64 / (t_count - 1) as f64) * (config.beta_end - config.beta_start);
        prod *= 1.0 - beta;
        let a = prod.sqrt();
        alpha.push(a);
        sigma.push((1.0 - a * a).sqrt());
    }
    Ok((alpha, sigma))
}

/// Per-step betas of the linear DDPM schedule (used by the ancestral sampler).
pub fn ddpm_betas(config: &ScheduleConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let t_count = config.num_discrete_steps;
    if t_count < 2 {
        return Err(Error::invalid_argument("ddpm schedule needs T >= 2"));
    }
    Ok((0..t_count)
        .map(|i| {
            config.beta_start
                + (i as f64 / (t_count - 1) as f64) * (config.beta_end - config.beta_start)
        })
        .collect())
}

/// Signal-to-noise ratio `gamma^2 ((1-t)/t)^2` of the gamma-scaled path.
pub fn snr(t: f64, gamma: f64) -> Result<f64> {
    check_time(t)?;
    if t == 0.0 {
        return Err(Error::invalid_argument("snr is unbounded at t = 0"));
    }
    let r = gamma * (1.0 - t) / t;
    Ok(r * r)
}

/// Draw one training time from the configured distribution; always in (0,1).
pub fn sample_train_time<R: Rng>(rng: &mut R, config: &TimeSamplerConfig) -> f64 {
    let raw = match config.kind {
        TimeSamplerKind::Uniform => rng.gen::<f64>(),
        TimeSamplerKind::LogitNormal => {
            let u: f64 = rng.sample(StandardNormal);
            let logit = config.loc + config.scale * u;
            1.0 / (1.0 + (-logit).exp())
        }
    };
    raw.clamp(
        config.clamp_eps.max(f64::MIN_POSITIVE),
        1.0 - config.clamp_eps.max(f64::EPSILON),
    )
}

/// Reversed-logarithm time mapping
/// `(log m - log(t (m - n) + n)) / (log m - log n)`.
pub fn rho_log(t: f64, m: f64, n: f64) -> Result<f64> {
    check_time(t)?;
    if m <= 0.0 || n <= 0.0 || m == n {
        return Err(Error::invalid_argument(format!(
            "rho_log needs m, n > 0 and m != n, got m={m} n={n}"
        )));
    }
    let arg = t * (m - n) + n;
    if arg <= 0.0 {
        return Err(Error::invalid_argument(format!(
            "rho_log log argument must be > 0, got {arg}"
        )));
    }
    Ok((m.ln() - arg.ln()) / (m.ln() - n.ln()))
}

/// One-step data estimate `xt - t*v` (the model's reconstruction at time t).
pub fn estimate_x0<T: Scalar>(xt: &Tensor<T>, t: f64, v: &Tensor<T>) -> Result<Tensor<T>> {
    check_time(t)?;
    let tv = T::of_f64(t);
    xt.zip_map(v, |x, vv| x - tv * vv)
}

/// Noise recovered from a velocity prediction: `xt + (1-t)*v`.
pub fn eps_from_velocity<T: Scalar>(xt: &Tensor<T>, t: f64, v: &Tensor<T>) -> Result<Tensor<T>> {
    let a = T::of_f64(1.0 - t);
    xt.zip_map(v, |x, vv| x + a * vv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, &mut rng)
    }

    #[test]
    fn rf_point_boundaries() {
        let x0 = randn(&[2, 3], 1);
        let eps = randn(&[2, 3], 2);
        assert_eq!(rf_point(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(rf_point(&x0, &eps, 1.0).unwrap(), eps);
        let mid = rf_point(&Tensor::scalar(2.0), &Tensor::scalar(0.0), 0.5).unwrap();
        assert_eq!(mid.item(), 1.0);
        let bad = Tensor::<f64>::zeros(&[3]);
        assert!(rf_point(&x0, &bad, 0.5).is_err());
        assert!(rf_point(&x0, &eps, 1.5).is_err());
    }

    #[test]
    fn scaled_point_divisor_and_gamma_one_reduction() {
        let x0 = randn(&[8], 3);
        let eps = randn(&[8], 4);
        let (_, d) = scaled_point(&x0, &eps, 0.5, 0.6).unwrap();
        assert!((d - 0.34f64.sqrt()).abs() < 1e-12);
        assert!((d - 0.58310).abs() < 1e-5);

        let (xt, d1) = scaled_point(&x0, &eps, 0.3, 1.0).unwrap();
        let plain = rf_point(&x0, &eps, 0.3).unwrap();
        assert_eq!(xt, plain);
        assert!((d1 - (0.49f64 + 0.09).sqrt()).abs() < 1e-12);

        assert!(scaled_point(&x0, &eps, 0.5, 0.0).is_err());
        assert!(scaled_point(&x0, &eps, 0.5, -1.0).is_err());
    }

    #[test]
    fn normalized_input_variance_is_unit_monte_carlo() {
        // 1e5 unit-variance samples through the gamma path at t=0.5.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let x0: Tensor<f64> = Tensor::randn(&[n], &mut rng);
        let eps: Tensor<f64> = Tensor::randn(&[n], &mut rng);
        let (xt, d) = scaled_point(&x0, &eps, 0.5, 0.6).unwrap();
        let normed = xt.map(|v| v / d);
        let mean = normed.mean();
        let var = normed.map(|v| (v - mean) * (v - mean)).mean();
        assert!((0.9..=1.1).contains(&var), "variance {var}");
    }

    #[test]
    fn ddpm_coefficients_match_brute_force_product() {
        let cfg = ScheduleConfig {
            kind: ScheduleKind::DdpmLinear,
            num_discrete_steps: 1000,
            ..ScheduleConfig::default()
        };
        let (alpha, sigma) = ddpm_coefficients(&cfg).unwrap();
        assert_eq!(alpha.len(), 1000);
        assert!((alpha[0] - (1.0f64 - 1e-4).sqrt()).abs() < 1e-12);
        // independent loop oracle
        let betas = ddpm_betas(&cfg).unwrap();
        let mut prod = 1.0f64;
        for (i, &b) in betas.iter().enumerate() {
            prod *= 1.0 - b;
            assert!((alpha[i] - prod.sqrt()).abs() < 1e-10, "step {i}");
            let a2s2 = alpha[i] * alpha[i] + sigma[i] * sigma[i];
            assert!((a2s2 - 1.0).abs() < 1e-12);
        }
        // alpha strictly decreasing, sigma strictly increasing
        for w in alpha.windows(2) {
            assert!(w[1] < w[0]);
        }
        for w in sigma.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn ddpm_constant_beta_closed_form() {
        let cfg = ScheduleConfig {
            kind: ScheduleKind::DdpmLinear,
            beta_start: 0.1,
            beta_end: 0.1,
            num_discrete_steps: 3,
            ..ScheduleConfig::default()
        };
        let (alpha, _) = ddpm_coefficients(&cfg).unwrap();
        for (i, a) in alpha.iter().enumerate() {
            let want = 0.9f64.powf((i as f64 + 1.0) / 2.0);
            assert!((a - want).abs() < 1e-12);
        }
        let small = ScheduleConfig {
            num_discrete_steps: 1,
            kind: ScheduleKind::DdpmLinear,
            ..cfg
        };
        assert!(ddpm_coefficients(&small).is_err());
    }

    #[test]
    fn snr_golden_values_and_monotonicity() {
        assert!((snr(0.5, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((snr(0.5, 0.6).unwrap() - 0.36).abs() < 1e-15);
        assert_eq!(snr(1.0, 0.3).unwrap(), 0.0);
        assert!(snr(0.0, 1.0).is_err());
        let mut last = f64::INFINITY;
        for i in 1..=100 {
            let t = i as f64 / 100.0;
            let s = snr(t, 0.8).unwrap();
            assert!(s < last, "snr must strictly decrease");
            // gamma^2 pointwise scaling
            assert!((s - 0.64 * snr(t, 1.0).unwrap()).abs() < 1e-12);
            last = s;
        }
    }

    #[test]
    fn train_time_sampler_statistics_and_determinism() {
        let cfg = TimeSamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let t = sample_train_time(&mut rng, &cfg);
            assert!(t > 0.0 && t < 1.0);
            sum += t;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");

        // fixed seed reproduces bit-identically
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            assert_eq!(
                sample_train_time(&mut r1, &cfg).to_bits(),
                sample_train_time(&mut r2, &cfg).to_bits()
            );
        }
    }

    #[test]
    fn logit_normal_emphasizes_intermediate_times() {
        // histogram over 1e6 draws: density near 0.5 far exceeds density near 0.05
        let cfg = TimeSamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut bins = [0u32; 100];
        for _ in 0..1_000_000 {
            let t = sample_train_time(&mut rng, &cfg);
            bins[((t * 100.0) as usize).min(99)] += 1;
        }
        let at_half = bins[50] as f64;
        let at_edge = bins[5] as f64;
        assert!(at_half > at_edge, "bin(0.5)={at_half} bin(0.05)={at_edge}");
        // closed-form logit-normal density ratio as a sanity anchor
        let pdf = |t: f64| {
            let l = (t / (1.0 - t)).ln();
            (-0.5 * l * l).exp() / (t * (1.0 - t) * (2.0 * std::f64::consts::PI).sqrt())
        };
        assert!(pdf(0.505) > pdf(0.055));
        let uniform = TimeSamplerConfig {
            kind: TimeSamplerKind::Uniform,
            ..cfg
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = sample_train_time(&mut rng, &uniform);
        assert!(t > 0.0 && t < 1.0);
    }

    #[test]
    fn rho_log_golden_values() {
        assert!((rho_log(0.0, 1.0, 100.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((rho_log(1.0, 1.0, 100.0).unwrap() - 0.0).abs() < 1e-15);
        let mid = rho_log(0.5, 1.0, 100.0).unwrap();
        assert!((mid - 50.5f64.ln() / 100.0f64.ln()).abs() < 1e-15);
        assert!((mid - 0.85166).abs() < 1e-4);
        assert!(rho_log(0.5, 1.0, 1.0).is_err());
        assert!(rho_log(0.5, -1.0, 2.0).is_err());
    }

    #[test]
    fn inference_grid_shapes_and_gap_growth() {
        let g = InferenceGrid::rho_log(2, 1.0, 100.0).unwrap();
        assert_eq!(g.times.len(), 3);
        assert!((g.times[0] - 1.0).abs() < 1e-15);
        assert!((g.times[1] - 0.85166).abs() < 1e-4);
        assert!((g.times[2] - 0.0).abs() < 1e-15);

        let g1 = InferenceGrid::rho_log(1, 1.0, 100.0).unwrap();
        assert_eq!(g1.times, vec![1.0, 0.0]);

        let g10 = InferenceGrid::rho_log(10, 1.0, 100.0).unwrap();
        let gaps: Vec<f64> = g10.times.windows(2).map(|w| w[0] - w[1]).collect();
        for w in gaps.windows(2) {
            assert!(
                w[1] > w[0],
                "gaps must strictly increase toward t=0: {gaps:?}"
            );
        }
        assert!(InferenceGrid::rho_log(0, 1.0, 100.0).is_err());

        let u = InferenceGrid::uniform(4).unwrap();
        for (i, (a, b)) in u.steps().enumerate() {
            assert!((a - b - 0.25).abs() < 1e-12, "step {i}");
        }
    }

    #[test]
    fn estimate_and_eps_round_trips() {
        let x0 = randn(&[2, 2, 2, 2], 11);
        let eps = randn(&[2, 2, 2, 2], 12);
        for &t in &[0.0, 0.13, 0.5, 0.77, 1.0] {
            let xt = rf_point(&x0, &eps, t).unwrap();
            let v = velocity(&x0, &eps, 1.0).unwrap();
            let rec = estimate_x0(&xt, t, &v).unwrap();
            let err = rec.zip_map(&x0, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(err < 1e-12, "t={t} err={err}");
            let eh = eps_from_velocity(&xt, t, &v).unwrap();
            let err = eh.zip_map(&eps, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(err < 1e-12, "t={t} err={err}");
        }
        // t=0 leaves xt unchanged
        let xt = rf_point(&x0, &eps, 0.4).unwrap();
        let v = randn(&[2, 2, 2, 2], 13);
        assert_eq!(estimate_x0(&xt, 0.0, &v).unwrap(), xt);
        assert_eq!(eps_from_velocity(&xt, 1.0, &v).unwrap(), xt);
    }

    #[test]
    fn weighting_equivalence_ratio_is_inverse_one_minus_t_squared() {
        let x0 = randn(&[64], 14);
        let eps = randn(&[64], 15);
        let v_true = velocity(&x0, &eps, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..20 {
            let t = 0.01 + 0.98 * rng.gen::<f64>();
            let xt = rf_point(&x0, &eps, t).unwrap();
            let v_hat: Tensor<f64> = {
                let noise = Tensor::randn(&[64], &mut rng);
                v_true.zip_map(&noise, |a, b| a + b).unwrap()
            };
            let v_err: f64 = v_hat
                .zip_map(&v_true, |a, b| (a - b) * (a - b))
                .unwrap()
                .sum();
            let eps_hat = eps_from_velocity(&xt, t, &v_hat).unwrap();
            let e_err: f64 = eps_hat
                .zip_map(&eps, |a, b| (a - b) * (a - b))
                .unwrap()
                .sum();
            let want = (1.0 / (1.0 - t)) * (1.0 / (1.0 - t));
            let got = v_err / e_err;
            assert!(
                (got - want).abs() / want < 1e-9,
                "t={t} got={got} want={want}"
            );
        }
    }

    #[test]
    fn gamma_path_velocity_identities() {
        // the gamma-path analogue of the round trip: with v = eps - gamma*x0,
        // xt - t*v recovers gamma*x0 and xt + (1-t)*v recovers eps
        let x0 = randn(&[32], 17);
        let eps = randn(&[32], 18);
        let gamma = 0.6;
        for &t in &[0.1, 0.5, 0.9] {
            let (xt, _) = scaled_point(&x0, &eps, t, gamma).unwrap();
            let v = velocity(&x0, &eps, gamma).unwrap();
            let gx0 = estimate_x0(&xt, t, &v).unwrap();
            let err = gx0
                .zip_map(&x0, |a, b| (a - gamma * b).abs())
                .unwrap()
                .max_abs();
            assert!(err < 1e-12);
            let eh = eps_from_velocity(&xt, t, &v).unwrap();
            let err = eh.zip_map(&eps, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn flow_state_consistency() {
        let x0 = randn(&[1, 3, 4, 4], 19);
        let eps = randn(&[1, 3, 4, 4], 20);
        let sched = ScheduleConfig {
            gamma: 0.6,
            ..ScheduleConfig::default()
        };
        let fs = FlowState::new(x0.clone(), eps.clone(), 0.25, &sched).unwrap();
        let (xt, d) = scaled_point(&x0, &eps, 0.25, 0.6).unwrap();
        assert_eq!(fs.xt, xt);
        let err = fs
            .xt_normalized
            .zip_map(&xt, |a, b| (a - b / d).abs())
            .unwrap()
            .max_abs();
        assert!(err < 1e-15);
    }
}
