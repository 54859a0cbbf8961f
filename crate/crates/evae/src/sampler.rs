//! Few-step conditional decoding: Euler integration of the probability-flow
//! ODE from noise to image, guided by the encoder latent.

use crate::decoder::Decoder;
use crate::encoder::LatentCode;
use crate::error::{Error, Result};
use crate::flowmath::{self, InferenceGrid, ScheduleConfig, ScheduleKind};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Inference time spacing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    RhoLog,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Euler step count N; the validated regime is 1 to 3.
    pub num_steps: usize,
    pub grid: GridKind,
    pub m: f64,
    pub n: f64,
    /// Must match the training schedule's gamma.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 3,
            grid: GridKind::RhoLog,
            m: 1.0,
            n: 100.0,
            gamma: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::invalid_argument("num_steps must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid_argument("gamma must lie in (0,1]"));
        }
        Ok(())
    }

    pub fn build_grid(&self) -> Result<InferenceGrid> {
        match self.grid {
            GridKind::RhoLog => InferenceGrid::rho_log(self.num_steps, self.m, self.n),
            GridKind::Uniform => InferenceGrid::uniform(self.num_steps),
        }
    }

    /// Fails when the sampler disagrees with the training schedule.
    pub fn check_against(&self, schedule: &ScheduleConfig) -> Result<()> {
        if (self.gamma - schedule.gamma).abs() > 1e-12 {
            return Err(Error::config_mismatch(format!(
                "sampler gamma {} does not match training gamma {}",
                self.gamma, schedule.gamma
            )));
        }
        Ok(())
    }
}

/// One Euler update `xt + (t_to - t_from) * v`; dt is negative when
/// integrating from noise toward data.
pub fn euler_step<T: Scalar>(
    xt: &Tensor<T>,
    v: &Tensor<T>,
    t_from: f64,
    t_to: f64,
) -> Result<Tensor<T>> {
    if t_to >= t_from {
        return Err(Error::invalid_argument(format!(
            "euler_step needs t_to < t_from, got {t_to} >= {t_from}"
        )));
    }
    let dt = T::of_f64(t_to - t_from);
    xt.zip_map(v, |x, vv| x + dt * vv)
}

/// Marginal velocity `(xt - target) / t` of a point-mass data distribution;
/// the analytic oracle for sampler tests.
pub fn oracle_velocity<T: Scalar>(xt: &Tensor<T>, t: f64, target: &Tensor<T>) -> Result<Tensor<T>> {
    if t <= 0.0 {
        return Err(Error::invalid_argument("oracle_velocity needs t > 0"));
    }
    let inv = T::of_f64(1.0 / t);
    xt.zip_map(target, |x, c| (x - c) * inv)
}

/// What a velocity source sees at each step: the raw trajectory state and
/// the variance-normalized copy the network was trained on.
pub struct StepInput<'a, T> {
    pub xt: &'a Tensor<T>,
    pub xt_normalized: &'a Tensor<T>,
    pub t: f64,
}

/// Decode result with its function-evaluation count.
#[derive(Clone, Debug)]
pub struct Decoded<T> {
    pub image: Tensor<T>,
    pub nfe: usize,
}

/// Euler-decodes from seeded noise using an arbitrary velocity source.
///
/// The integration state follows the raw trajectory; each velocity query
/// additionally receives the gamma-normalized input exactly as in training.
/// The final state is `gamma * x0`, so it is divided by gamma before the
/// clamp to `[-1, 1]`.
pub fn decode_with<T: Scalar>(
    shape: &[usize],
    config: &SamplerConfig,
    mut velocity_fn: impl FnMut(StepInput<'_, T>) -> Result<Tensor<T>>,
) -> Result<Decoded<T>> {
    config.validate()?;
    let grid = config.build_grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x: Tensor<T> = Tensor::randn(shape, &mut rng);
    let mut nfe = 0;
    for (t_from, t_to) in grid.steps() {
        let divisor = flowmath::norm_divisor(t_from, config.gamma);
        let inv = T::of_f64(1.0 / divisor);
        let normalized = x.map(|v| v * inv);
        let v = velocity_fn(StepInput {
            xt: &x,
            xt_normalized: &normalized,
            t: t_from,
        })?;
        if v.shape() != x.shape() {
            return Err(Error::shape_mismatch(v.shape(), x.shape()));
        }
        x = euler_step(&x, &v, t_from, t_to)?;
        nfe += 1;
    }
    let inv_gamma = T::of_f64(1.0 / config.gamma);
    let one = T::one();
    let image = x.map(|v| (v * inv_gamma).max(-one).min(one));
    Ok(Decoded { image, nfe })
}

/// Decoder + parameters bound for sampling, with cumulative NFE accounting.
pub struct ModelSampler<'a, T: Scalar> {
    pub decoder: &'a Decoder,
    pub params: &'a ParamStore<T>,
    nfe_total: u64,
}

impl<'a, T: Scalar> ModelSampler<'a, T> {
    pub fn new(decoder: &'a Decoder, params: &'a ParamStore<T>) -> Self {
        Self {
            decoder,
            params,
            nfe_total: 0,
        }
    }

    /// Decoder forward passes across all decodes so far.
    pub fn nfe_total(&self) -> u64 {
        self.nfe_total
    }

    /// Conditional decode of one latent batch.
    pub fn decode(&mut self, z: &LatentCode<T>, config: &SamplerConfig) -> Result<Decoded<T>> {
        let (b, _, _, _) = z.z.dims4();
        let (h, w) = z.source_resolution;
        let decoder = self.decoder;
        let params = self.params;
        let out = decode_with(&[b, 3, h, w], config, |step: StepInput<'_, T>| {
            let mut tape = crate::autodiff::Tape::new();
            let bound = Bound::new(&mut tape, params);
            let xid = tape.leaf(step.xt_normalized.clone());
            let zid = tape.leaf(z.z.clone());
            let ts = vec![step.t; b];
            let v = decoder.forward(&mut tape, &bound, xid, &ts, zid)?;
            Ok(tape.value(v).clone())
        })?;
        self.nfe_total += out.nfe as u64;
        Ok(out)
    }

    /// Ancestral DDPM decode for the discrete-time baseline configuration.
    /// NFE equals the schedule's discrete step count.
    pub fn decode_ddpm(
        &mut self,
        z: &LatentCode<T>,
        schedule: &ScheduleConfig,
        seed: u64,
    ) -> Result<Decoded<T>> {
        if schedule.kind != ScheduleKind::DdpmLinear {
            return Err(Error::invalid_argument(
                "decode_ddpm needs a ddpm_linear schedule",
            ));
        }
        let (alpha, sigma) = flowmath::ddpm_coefficients(schedule)?;
        let betas = flowmath::ddpm_betas(schedule)?;
        let t_count = schedule.num_discrete_steps;
        let (b, _, _, _) = z.z.dims4();
        let (h, w) = z.source_resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Tensor<T> = Tensor::randn(&[b, 3, h, w], &mut rng);
        let mut nfe = 0;
        for tau in (0..t_count).rev() {
            let t_cont = tau as f64 / (t_count - 1) as f64;
            let mut tape = crate::autodiff::Tape::new();
            let bound = Bound::new(&mut tape, self.params);
            let xid = tape.leaf(x.clone());
            let zid = tape.leaf(z.z.clone());
            let ts = vec![t_cont; b];
            let eps_hat_id = self.decoder.forward(&mut tape, &bound, xid, &ts, zid)?;
            let eps_hat = tape.value(eps_hat_id);
            nfe += 1;

            let beta = betas[tau];
            let inv_sqrt = 1.0 / (1.0 - beta).sqrt();
            let coef = beta / sigma[tau];
            let mut next = x.zip_map(eps_hat, |xv, ev| {
                T::of_f64(inv_sqrt * (xv.to_f64_() - coef * ev.to_f64_()))
            })?;
            if tau > 0 {
                let abar_prev = alpha[tau - 1] * alpha[tau - 1];
                let abar = alpha[tau] * alpha[tau];
                let post_var = beta * (1.0 - abar_prev) / (1.0 - abar);
                let std = T::of_f64(post_var.sqrt());
                let noise: Tensor<T> = Tensor::randn(&[b, 3, h, w], &mut rng);
                next = next.zip_map(&noise, |n, z| n + std * z)?;
            }
            x = next;
        }
        let one = T::one();
        let image = x.map(|v| v.max(-one).min(one));
        self.nfe_total += nfe as u64;
        Ok(Decoded { image, nfe })
    }
}
