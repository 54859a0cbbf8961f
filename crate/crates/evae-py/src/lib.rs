//! Python bindings over the core library: schedule and trajectory math,
//! few-step decoding against analytic fields, metrics, and the synthetic
//! corpus generator. Images cross the boundary as flat `f64` lists plus
//! shape tuples.

use evae::error::Error;
use evae::flowmath::{self, InferenceGrid, TimeSamplerConfig, TimeSamplerKind};
use evae::metrics::{self, FrechetStats};
use evae::sampler::{self, GridKind, SamplerConfig};
use evae::tensor::Tensor;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor_from(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor<f64>> {
    Tensor::new(shape, data).map_err(err)
}

/// `(1-t)*x0 + t*eps`, elementwise.
#[pyfunction]
fn rf_point(x0: Vec<f64>, eps: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    let n = x0.len();
    let a = tensor_from(x0, vec![n])?;
    let b = tensor_from(eps, vec![n])?;
    Ok(flowmath::rf_point(&a, &b, t).map_err(err)?.into_data())
}

/// Gamma-scaled trajectory point and its variance normalizer.
#[pyfunction]
fn scaled_point(x0: Vec<f64>, eps: Vec<f64>, t: f64, gamma: f64) -> PyResult<(Vec<f64>, f64)> {
    let n = x0.len();
    let a = tensor_from(x0, vec![n])?;
    let b = tensor_from(eps, vec![n])?;
    let (xt, d) = flowmath::scaled_point(&a, &b, t, gamma).map_err(err)?;
    Ok((xt.into_data(), d))
}

/// One-step data estimate `xt - t*v`.
#[pyfunction]
fn estimate_x0(xt: Vec<f64>, t: f64, v: Vec<f64>) -> PyResult<Vec<f64>> {
    let n = xt.len();
    let a = tensor_from(xt, vec![n])?;
    let b = tensor_from(v, vec![n])?;
    Ok(flowmath::estimate_x0(&a, t, &b).map_err(err)?.into_data())
}

/// Noise recovered from a velocity prediction, `xt + (1-t)*v`.
#[pyfunction]
fn eps_from_velocity(xt: Vec<f64>, t: f64, v: Vec<f64>) -> PyResult<Vec<f64>> {
    let n = xt.len();
    let a = tensor_from(xt, vec![n])?;
    let b = tensor_from(v, vec![n])?;
    Ok(flowmath::eps_from_velocity(&a, t, &b).map_err(err)?.into_data())
}

/// Signal-to-noise ratio `gamma^2 ((1-t)/t)^2`.
#[pyfunction]
fn snr(t: f64, gamma: f64) -> PyResult<f64> {
    flowmath::snr(t, gamma).map_err(err)
}

/// Reversed-logarithm time mapping.
#[pyfunction]
fn rho_log(t: f64, m: f64, n: f64) -> PyResult<f64> {
    flowmath::rho_log(t, m, n).map_err(err)
}

/// Descending inference times through the rho-log mapping.
#[pyfunction]
fn inference_grid(num_steps: usize, m: f64, n: f64) -> PyResult<Vec<f64>> {
    Ok(InferenceGrid::rho_log(num_steps, m, n).map_err(err)?.times)
}

#[pyfunction]
fn uniform_grid(num_steps: usize) -> PyResult<Vec<f64>> {
    Ok(InferenceGrid::uniform(num_steps).map_err(err)?.times)
}

/// DDPM linear-schedule `(alpha, sigma)` lists.
#[pyfunction]
fn ddpm_coefficients(beta_start: f64, beta_end: f64, num_steps: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let cfg = flowmath::ScheduleConfig {
        kind: flowmath::ScheduleKind::DdpmLinear,
        beta_start,
        beta_end,
        num_discrete_steps: num_steps,
        gamma: 1.0,
    };
    flowmath::ddpm_coefficients(&cfg).map_err(err)
}

/// Draws training times; `kind` is "uniform" or "logit_normal".
#[pyfunction]
fn sample_train_times(seed: u64, count: usize, kind: &str, loc: f64, scale: f64) -> PyResult<Vec<f64>> {
    let kind = match kind {
        "uniform" => TimeSamplerKind::Uniform,
        "logit_normal" => TimeSamplerKind::LogitNormal,
        other => return Err(PyValueError::new_err(format!("unknown sampler kind {other:?}"))),
    };
    let cfg = TimeSamplerConfig { kind, loc, scale, ..TimeSamplerConfig::default() };
    cfg.validate().map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| flowmath::sample_train_time(&mut rng, &cfg)).collect())
}

/// One Euler update `xt + (t_to - t_from) * v`.
#[pyfunction]
fn euler_step(xt: Vec<f64>, v: Vec<f64>, t_from: f64, t_to: f64) -> PyResult<Vec<f64>> {
    let n = xt.len();
    let a = tensor_from(xt, vec![n])?;
    let b = tensor_from(v, vec![n])?;
    Ok(sampler::euler_step(&a, &b, t_from, t_to).map_err(err)?.into_data())
}

/// Euler-decodes seeded noise under the analytic point-mass velocity field
/// `(x - target) / t`; returns the flat image and the NFE spent.
#[pyfunction]
#[pyo3(signature = (target, shape, num_steps, seed, grid="rholog", gamma=1.0))]
fn decode_point_mass(
    target: Vec<f64>,
    shape: Vec<usize>,
    num_steps: usize,
    seed: u64,
    grid: &str,
    gamma: f64,
) -> PyResult<(Vec<f64>, usize)> {
    let t = tensor_from(target, shape.clone())?;
    let grid = match grid {
        "rholog" => GridKind::RhoLog,
        "uniform" => GridKind::Uniform,
        other => return Err(PyValueError::new_err(format!("unknown grid {other:?}"))),
    };
    let cfg = SamplerConfig { num_steps, grid, gamma, seed, ..SamplerConfig::default() };
    let out = sampler::decode_with(&shape, &cfg, |step| {
        let inv = 1.0 / step.t;
        step.xt.zip_map(&t, |x, c| (x - gamma * c) * inv)
    })
    .map_err(err)?;
    Ok((out.image.into_data(), out.nfe))
}

/// Non-saturating GAN losses `(d_loss, g_loss)` from scalar logits.
#[pyfunction]
fn gan_losses(logit_real: f64, logit_fake: f64) -> PyResult<(f64, f64)> {
    evae::adversary::gan_losses(logit_real, logit_fake).map_err(err)
}

/// PSNR in dB between two images of the given shape.
#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>, shape: Vec<usize>, peak: f64) -> PyResult<f64> {
    let ta = tensor_from(a, shape.clone())?;
    let tb = tensor_from(b, shape)?;
    metrics::psnr(&ta, &tb, peak).map_err(err)
}

/// SSIM between two `(N,C,H,W)` images.
#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    let ta = tensor_from(a, shape.clone())?;
    let tb = tensor_from(b, shape)?;
    metrics::ssim(&ta, &tb).map_err(err)
}

/// Frechet distance between two feature sets, each a list of equal-length
/// feature vectors.
#[pyfunction]
fn frechet_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let dim = a.first().map(|r| r.len()).unwrap_or(0);
    let mut pa = FrechetStats::new(dim);
    for row in &a {
        pa.push(row).map_err(err)?;
    }
    let mut pb = FrechetStats::new(dim);
    for row in &b {
        pb.push(row).map_err(err)?;
    }
    metrics::frechet_distance(&pa, &pb).map_err(err)
}

/// Generates the procedural shapes corpus; returns flat images
/// `(count, 3, h, w)` and their class labels.
#[pyfunction]
fn synthetic_shapes(seed: u64, count: usize, h: usize, w: usize) -> PyResult<(Vec<f64>, Vec<u8>)> {
    let (imgs, labels) = evae::data_io::synthetic_shapes(seed, count, (h, w)).map_err(err)?;
    let mut flat = Vec::with_capacity(count * 3 * h * w);
    for img in imgs {
        flat.extend_from_slice(img.data());
    }
    Ok((flat, labels))
}

/// Digest of a TOML run configuration (with optional dotted overrides).
#[pyfunction]
#[pyo3(signature = (toml_text, overrides=vec![]))]
fn config_digest(toml_text: &str, overrides: Vec<(String, String)>) -> PyResult<String> {
    let cfg = evae::config::RunConfig::from_toml(toml_text, &overrides).map_err(err)?;
    Ok(cfg.digest())
}

#[pymodule]
fn evae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(rf_point, m)?)?;
    m.add_function(wrap_pyfunction!(scaled_point, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_x0, m)?)?;
    m.add_function(wrap_pyfunction!(eps_from_velocity, m)?)?;
    m.add_function(wrap_pyfunction!(snr, m)?)?;
    m.add_function(wrap_pyfunction!(rho_log, m)?)?;
    m.add_function(wrap_pyfunction!(inference_grid, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_grid, m)?)?;
    m.add_function(wrap_pyfunction!(ddpm_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(sample_train_times, m)?)?;
    m.add_function(wrap_pyfunction!(euler_step, m)?)?;
    m.add_function(wrap_pyfunction!(decode_point_mass, m)?)?;
    m.add_function(wrap_pyfunction!(gan_losses, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_shapes, m)?)?;
    m.add_function(wrap_pyfunction!(config_digest, m)?)?;
    Ok(())
}
