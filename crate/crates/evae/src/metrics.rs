//! Reconstruction quality measurement: PSNR, SSIM, Frechet feature distance
//! with a pluggable extractor, and the evaluation protocol that ties them
//! together (including cross-resolution evaluation).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Peak signal-to-noise ratio in dB; identical images return infinity
/// (the documented cap for zero MSE).
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch(a.shape(), b.shape()));
    }
    if peak <= 0.0 {
        return Err(Error::invalid_argument("peak must be > 0"));
    }
    let mut mse = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64_() - y.to_f64_();
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity with an 11x11 Gaussian window and the standard
/// stabilizers, averaged over valid windows and channels. The dynamic range
/// is 2 (images live in `[-1, 1]`).
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch(a.shape(), b.shape()));
    }
    let (n, c, h, w) = a.dims4();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid_argument(format!(
            "images {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let range = 2.0f64;
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let win = gaussian_window();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..=(h - SSIM_WINDOW) {
                for ox in 0..=(w - SSIM_WINDOW) {
                    let mut mu_a = 0.0;
                    let mut mu_b = 0.0;
                    let mut aa = 0.0;
                    let mut bb = 0.0;
                    let mut ab = 0.0;
                    for ky in 0..SSIM_WINDOW {
                        for kx in 0..SSIM_WINDOW {
                            let wgt = win[ky] * win[kx];
                            let va = a.at4(ni, ci, oy + ky, ox + kx).to_f64_();
                            let vb = b.at4(ni, ci, oy + ky, ox + kx).to_f64_();
                            mu_a += wgt * va;
                            mu_b += wgt * vb;
                            aa += wgt * va * va;
                            bb += wgt * vb * vb;
                            ab += wgt * va * vb;
                        }
                    }
                    let var_a = aa - mu_a * mu_a;
                    let var_b = bb - mu_b * mu_b;
                    let cov = ab - mu_a * mu_b;
                    let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                    total += s;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// First and second moments of a feature distribution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrechetStats {
    dim: usize,
    count: usize,
    sum: Vec<f64>,
    /// Centered co-moment matrix (sum of outer products of deviations),
    /// row-major.
    comoment: Vec<f64>,
}

impl FrechetStats {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            count: 0,
            sum: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_count(&self) -> usize {
        self.count
    }

    /// Adds one feature vector (stable incremental co-moment update).
    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid_argument(format!(
                "feature dim {} does not match stats dim {}",
                x.len(),
                self.dim
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        // deviations from the mean before this sample
        let mut delta_pre = vec![0.0; self.dim];
        for i in 0..self.dim {
            let prev_mean = if self.count > 1 {
                self.sum[i] / (n - 1.0)
            } else {
                0.0
            };
            delta_pre[i] = x[i] - prev_mean;
            self.sum[i] += x[i];
        }
        let scale = (n - 1.0) / n;
        for i in 0..self.dim {
            for j in 0..self.dim {
                self.comoment[i * self.dim + j] += scale * delta_pre[i] * delta_pre[j];
            }
        }
        Ok(())
    }

    /// Adds a `(B, dim)` batch of features.
    pub fn push_batch<T: Scalar>(&mut self, feats: &Tensor<T>) -> Result<()> {
        let shape = feats.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::invalid_argument(format!(
                "expected (B, {}) features, got {:?}",
                self.dim, shape
            )));
        }
        for bi in 0..shape[0] {
            let row: Vec<f64> = feats.data()[bi * self.dim..(bi + 1) * self.dim]
                .iter()
                .map(|v| v.to_f64_())
                .collect();
            self.push(&row)?;
        }
        Ok(())
    }

    /// Count-weighted merge of shard statistics.
    pub fn merge(&mut self, other: &FrechetStats) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::invalid_argument(
                "cannot merge stats of different dims",
            ));
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (n1, n2) = (self.count as f64, other.count as f64);
        let n = n1 + n2;
        for i in 0..self.dim {
            for j in 0..self.dim {
                let d_i = self.sum[i] / n1 - other.sum[i] / n2;
                let d_j = self.sum[j] / n1 - other.sum[j] / n2;
                self.comoment[i * self.dim + j] +=
                    other.comoment[i * self.dim + j] + n1 * n2 / n * d_i * d_j;
            }
        }
        for i in 0..self.dim {
            self.sum[i] += other.sum[i];
        }
        self.count += other.count;
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum
            .iter()
            .map(|s| s / self.count.max(1) as f64)
            .collect()
    }

    /// Unbiased covariance (n - 1 divisor).
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.count < 2 {
            return Err(Error::invalid_argument(
                "need at least 2 samples for covariance",
            ));
        }
        let n = (self.count - 1) as f64;
        Ok(DMatrix::from_fn(self.dim, self.dim, |i, j| {
            // symmetrize against round-off
            0.5 * (self.comoment[i * self.dim + j] + self.comoment[j * self.dim + i]) / n
        }))
    }
}

const EIG_CLIP_TOL: f64 = -1e-8;

/// Square root of a symmetric PSD matrix via eigendecomposition; eigenvalues
/// in `[-1e-8, 0)` are clipped to zero, anything lower is an error.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < EIG_CLIP_TOL * scale {
            return Err(Error::numerical(format!(
                "matrix square root failed: eigenvalue {v} below tolerance"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let d = DMatrix::from_diagonal(&roots);
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Frechet distance between two Gaussians summarized by `FrechetStats`:
/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
pub fn frechet_distance(p: &FrechetStats, q: &FrechetStats) -> Result<f64> {
    if p.dim != q.dim {
        return Err(Error::invalid_argument("feature dims differ"));
    }
    let mu1 = p.mean();
    let mu2 = q.mean();
    let s1 = p.covariance()?;
    let s2 = q.covariance()?;
    let mean_term: f64 = mu1.iter().zip(&mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    // Tr sqrt(S1 S2) computed via the symmetric form sqrt(A) S2 sqrt(A)
    let a = sqrtm_psd(&s1)?;
    let inner = &a * &s2 * &a;
    let cross = sqrtm_psd(&inner)?;
    let dist = mean_term + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(dist.max(0.0))
}

/// Evaluation output for one dataset pass.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub rfid_proxy: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub nfe: usize,
    pub resolution: (usize, usize),
    pub config_digest: String,
}

impl EvalReport {
    pub fn is_finite(&self) -> bool {
        self.rfid_proxy.is_finite() && self.psnr.is_finite() && self.ssim.is_finite()
    }
}

/// Runs the reconstruction protocol: every image is reconstructed by
/// `reconstruct` (receiving a `(B,3,H,W)` batch, returning the images and
/// the NFE spent per image), feature statistics of originals and
/// reconstructions are accumulated through `features`, and the report
/// carries the Frechet proxy plus mean PSNR/SSIM.
///
/// PSNR of a perfect reconstruction is infinite; the report stores the mean
/// over finite samples, or infinity if every sample was exact.
pub fn eval_reconstruction<T: Scalar>(
    originals: &Tensor<T>,
    batch_size: usize,
    config_digest: &str,
    mut reconstruct: impl FnMut(&Tensor<T>) -> Result<(Tensor<T>, usize)>,
    mut features: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<EvalReport> {
    let (n, c, h, w) = originals.dims4();
    if n == 0 {
        return Err(Error::invalid_argument("empty evaluation set"));
    }
    let probe = features(&slice_batch(originals, 0, 1.min(n))?)?;
    let dim = probe.shape()[1];
    let mut stats_real = FrechetStats::new(dim);
    let mut stats_fake = FrechetStats::new(dim);
    let mut psnr_sum = 0.0;
    let mut psnr_finite = 0usize;
    let mut ssim_sum = 0.0;
    let mut nfe_per_image = None;
    let mut done = 0;
    while done < n {
        let take = batch_size.min(n - done);
        let batch = slice_batch(originals, done, take)?;
        let (recon, nfe) = reconstruct(&batch)?;
        if recon.shape() != batch.shape() {
            return Err(Error::shape_mismatch(recon.shape(), batch.shape()));
        }
        match nfe_per_image {
            None => nfe_per_image = Some(nfe),
            Some(prev) if prev != nfe => {
                return Err(Error::invalid_argument("inconsistent NFE across batches"))
            }
            _ => {}
        }
        stats_real.push_batch(&features(&batch)?)?;
        stats_fake.push_batch(&features(&recon)?)?;
        for bi in 0..take {
            let a = slice_batch(&batch, bi, 1)?;
            let b = slice_batch(&recon, bi, 1)?;
            let p = psnr(&a, &b, 2.0)?;
            if p.is_finite() {
                psnr_sum += p;
                psnr_finite += 1;
            }
            ssim_sum += ssim(&a, &b)?;
        }
        done += take;
        let _ = (c, w, h);
    }
    let psnr_mean = if psnr_finite == 0 {
        f64::INFINITY
    } else {
        psnr_sum / psnr_finite as f64
    };
    Ok(EvalReport {
        rfid_proxy: frechet_distance(&stats_real, &stats_fake)?,
        psnr: psnr_mean,
        ssim: ssim_sum / n as f64,
        nfe: nfe_per_image.unwrap_or(0),
        resolution: (h, w),
        config_digest: config_digest.to_string(),
    })
}

/// Full reconstruction evaluation of an encoder/decoder pair: encodes and
/// Euler-decodes every image at the configured step count, with per-batch
/// decode noise derived from the sampler seed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model<T: Scalar>(
    encoder: &crate::encoder::Encoder,
    enc_params: &crate::nn::ParamStore<T>,
    decoder: &crate::decoder::Decoder,
    dec_params: &crate::nn::ParamStore<T>,
    sampler_cfg: &crate::sampler::SamplerConfig,
    images: &Tensor<T>,
    extractor: &crate::objectives::RandomPyramid<T>,
    batch_size: usize,
    config_digest: &str,
) -> Result<EvalReport> {
    let mut ms = crate::sampler::ModelSampler::new(decoder, dec_params);
    let mut batch_index = 0u64;
    eval_reconstruction(
        images,
        batch_size,
        config_digest,
        |batch| {
            let z = encoder.encode(enc_params, batch)?;
            let cfg = crate::sampler::SamplerConfig {
                seed: crate::trainer::derive_seed(sampler_cfg.seed, 0x5a317e ^ batch_index),
                ..*sampler_cfg
            };
            batch_index += 1;
            let out = ms.decode(&z, &cfg)?;
            Ok((out.image, out.nfe))
        },
        |batch| extractor.pooled_features(batch),
    )
}

/// Copies `count` samples starting at `start` out of a `(N,C,H,W)` tensor.
pub fn slice_batch<T: Scalar>(t: &Tensor<T>, start: usize, count: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4();
    if start + count > n {
        return Err(Error::invalid_argument("batch slice out of range"));
    }
    let plane = c * h * w;
    let mut out = Tensor::zeros(&[count, c, h, w]);
    out.data_mut()
        .copy_from_slice(&t.data()[start * plane..(start + count) * plane]);
    Ok(out)
}
