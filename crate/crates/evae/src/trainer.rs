//! Training loop: Adam with linear warmup, EMA shadows, alternating
//! generator/discriminator updates from one shared forward graph, and
//! deterministic checkpointing.
//!
//! Determinism contract: every random draw is derived from
//! `(master seed, purpose, step)`, so a resumed run consumes exactly the
//! same streams as an uninterrupted one.

use crate::adversary::{r1_penalty_node, Discriminator, MatchingMode};
use crate::autodiff::{NodeId, Tape};
use crate::config::RunConfig;
use crate::data_io::Dataset;
use crate::decoder::Decoder;
use crate::encoder::{Encoder, LatentMode};
use crate::error::{Error, Result};
use crate::flowmath::{self, ScheduleKind};
use crate::nn::{Bound, ParamStore};
use crate::objectives::{self, LossBundle, RandomPyramid};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Ablation ladder stages; later stages include all earlier changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationStage {
    /// Discrete-time denoising decoder, additive-time UNet, score loss only.
    Baseline,
    /// Rectified-flow parameterization.
    A,
    /// Logit-normal training times.
    B,
    /// Scale-shift (ADM) UNet conditioning.
    C,
    /// Perceptual matching on the one-step estimate.
    D,
    /// Adversarial trajectory matching.
    E,
    /// Signal scaling gamma (0.6 unless configured otherwise).
    F,
    /// Reversed-logarithmic inference grid.
    G,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub ablation_stage: AblationStage,
    pub seed: u64,
    /// Discriminator updates per generator update.
    pub d_steps_per_g: usize,
    /// Steps before the adversarial terms switch on.
    pub adv_warmup_steps: usize,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    /// Use EMA weights for sampling/eval.
    pub ema_for_eval: bool,
    pub zero_init_decoder_out: bool,
    /// Checkpoint interval in steps; 0 writes only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 5000,
            total_steps: 10_000,
            batch_size: 64,
            adam_beta1: 0.0,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            ablation_stage: AblationStage::G,
            seed: 0,
            d_steps_per_g: 1,
            adv_warmup_steps: 0,
            grad_clip: None,
            ema_for_eval: true,
            zero_init_decoder_out: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid_argument("ema_decay must lie in [0, 1)"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid_argument(
                "warmup_steps must not exceed total_steps",
            ));
        }
        if self.batch_size == 0 || self.d_steps_per_g == 0 {
            return Err(Error::invalid_argument(
                "batch_size and d_steps_per_g must be positive",
            ));
        }
        Ok(())
    }
}

/// Learning rate at a step: linear ramp to `lr` over the warmup, constant
/// afterwards. Step 0 is exactly zero.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    if config.warmup_steps == 0 {
        return config.lr;
    }
    config.lr * (step.min(config.warmup_steps) as f64 / config.warmup_steps as f64)
}

/// One EMA step: `shadow <- decay * shadow + (1 - decay) * current`.
pub fn ema_update<T: Scalar>(
    shadow: &mut ParamStore<T>,
    current: &ParamStore<T>,
    decay: f64,
) -> Result<()> {
    shadow.same_tree(current)?;
    let d = T::of_f64(decay);
    let one_minus = T::of_f64(1.0 - decay);
    for ((_, s), (_, c)) in shadow.iter_mut().zip(current.iter()) {
        for (sv, &cv) in s.data_mut().iter_mut().zip(c.data()) {
            *sv = d * *sv + one_minus * cv;
        }
    }
    Ok(())
}

/// Adam with bias correction; state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update over any number of (params, grads) trees that
    /// together form one optimization group.
    pub fn update(
        &mut self,
        groups: &mut [(&mut ParamStore<T>, &BTreeMap<String, Tensor<T>>)],
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let b1 = T::of_f64(self.beta1);
        let b2 = T::of_f64(self.beta2);
        let ob1 = T::of_f64(1.0 - self.beta1);
        let ob2 = T::of_f64(1.0 - self.beta2);
        for (params, grads) in groups.iter_mut() {
            let names = params.names();
            for name in names {
                let p = params.get_mut(&name);
                let zero;
                let g = match grads.get(&name) {
                    Some(g) => g,
                    None => {
                        zero = Tensor::zeros(p.shape());
                        &zero
                    }
                };
                let m = self
                    .m
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(p.shape()));
                let v = self
                    .v
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(p.shape()));
                for i in 0..p.len() {
                    let gi = g.data()[i];
                    let mi = b1 * m.data()[i] + ob1 * gi;
                    let vi = b2 * v.data()[i] + ob2 * gi * gi;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let mhat = mi.to_f64_() / bc1;
                    let vhat = vi.to_f64_() / bc2;
                    let upd = lr * mhat / (vhat.sqrt() + self.eps);
                    p.data_mut()[i] = p.data()[i] - T::of_f64(upd);
                }
            }
        }
    }

    fn state_archive(&self) -> ParamStore<T> {
        let mut s = ParamStore::new();
        for (k, t) in &self.m {
            s.insert(format!("m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            s.insert(format!("v/{k}"), t.clone());
        }
        s
    }

    fn restore_state(&mut self, archive: &ParamStore<T>, step: usize) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (name, t) in archive.iter() {
            if let Some(k) = name.strip_prefix("m/") {
                self.m.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix("v/") {
                self.v.insert(k.to_string(), t.clone());
            }
        }
    }
}

/// Global-norm gradient clip across one or more grad maps.
fn clip_grads<T: Scalar>(maps: &mut [&mut BTreeMap<String, Tensor<T>>], max_norm: f64) {
    let mut norm2 = 0.0f64;
    for m in maps.iter() {
        for t in m.values() {
            for &v in t.data() {
                let f = v.to_f64_();
                norm2 += f * f;
            }
        }
    }
    let norm = norm2.sqrt();
    if norm > max_norm {
        let scale = T::of_f64(max_norm / norm);
        for m in maps.iter_mut() {
            for t in m.values_mut() {
                for v in t.data_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
}

const ARCHIVE_MAGIC: &[u8; 4] = b"EVPS";
const ARCHIVE_VERSION: u32 = 1;

/// Writes a parameter tree as a deterministic little-endian archive.
pub fn write_params<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    let dtype = T::DTYPE.as_bytes();
    buf.extend_from_slice(&(dtype.len() as u32).to_le_bytes());
    buf.extend_from_slice(dtype);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_params<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::io("truncated parameter archive"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != ARCHIVE_MAGIC {
        return Err(Error::io("not a parameter archive"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != ARCHIVE_VERSION {
        return Err(Error::io(format!("unsupported archive version {version}")));
    }
    let dlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let dtype = String::from_utf8_lossy(take(&mut pos, dlen)?).to_string();
    if dtype != T::DTYPE {
        return Err(Error::config_mismatch(format!(
            "archive dtype {dtype} does not match requested {}",
            T::DTYPE
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8_lossy(take(&mut pos, nlen)?).to_string();
        let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::read_le(take(&mut pos, T::BYTES)?));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Checkpoint directory metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub step: usize,
    pub config_digest: String,
    pub dtype: String,
    pub networks: BTreeMap<String, String>,
    pub optimizer_steps: BTreeMap<String, usize>,
    pub metrics: Option<LossBundle>,
}

/// Random draws consumed by one training step; a pure function of
/// `(seed, step)` so training can resume mid-stream.
pub struct StepDraws<T> {
    pub t: Vec<f64>,
    pub eps: Tensor<T>,
    pub dt_back: Vec<f64>,
    pub ddpm_tau: Vec<usize>,
    pub kl_noise: Tensor<T>,
}

/// Splitmix64-style sub-seed derivation.
pub fn derive_seed(master: u64, purpose: u64) -> u64 {
    // splitmix64
    let mut z = master ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(master: u64, purpose: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, purpose));
    rng.set_stream(step.wrapping_add(1));
    rng
}

/// Nodes of one step's loss graph.
pub struct StepGraph {
    pub score: NodeId,
    pub lpips: Option<NodeId>,
    pub adv_g: Option<NodeId>,
    pub adv_d: Option<NodeId>,
    pub r1: Option<NodeId>,
    pub reg: Option<NodeId>,
    pub total_g: NodeId,
    pub total_d: Option<NodeId>,
    pub enc_bound: Bound,
    pub dec_bound: Bound,
    pub disc_bound: Option<Bound>,
}

/// Builds the full loss graph for one batch on a fresh tape.
///
/// Both totals come from the same forward pass; the discriminator update
/// uses `total_d` (which ignores generator parameters) and the generator
/// uses `total_g` (which treats the discriminator as fixed).
#[allow(clippy::too_many_arguments)]
pub fn build_step_graph<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &RunConfig,
    encoder: &Encoder,
    enc_params: &ParamStore<T>,
    decoder: &Decoder,
    dec_params: &ParamStore<T>,
    disc: Option<(&Discriminator, &ParamStore<T>)>,
    extractor: Option<&RandomPyramid<T>>,
    batch: &Tensor<T>,
    draws: &StepDraws<T>,
    adv_on: bool,
) -> Result<StepGraph> {
    let (b, _, h, w) = batch.dims4();
    let gamma = cfg.schedule.gamma;
    let enc_bound = Bound::new(tape, enc_params);
    let dec_bound = Bound::new(tape, dec_params);
    let x0 = tape.leaf(batch.clone());
    let eps = tape.leaf(draws.eps.clone());

    // encode (and regularize) the latent
    let enc_out = encoder.forward(tape, &enc_bound, x0)?;
    let n_z = encoder.cfg.latent_channels;
    let (z, reg) = match encoder.cfg.latent_mode {
        LatentMode::None => (enc_out, None),
        LatentMode::Kl => {
            let mean = tape.slice(enc_out, 1, 0, n_z);
            let logvar = tape.slice(enc_out, 1, n_z, n_z);
            let half = tape.scale(logvar, 0.5);
            let std = tape.exp(half);
            let xi = tape.leaf(draws.kl_noise.clone());
            let noise = tape.mul(std, xi);
            let zs = tape.add(mean, noise);
            // KL = 0.5 (mu^2 + e^logvar - 1 - logvar), summed over latents,
            // averaged over batch
            let mu2 = tape.square(mean);
            let var = tape.exp(logvar);
            let sum1 = tape.add(mu2, var);
            let sum2 = tape.add_scalar(sum1, -1.0);
            let inner = tape.sub(sum2, logvar);
            let total = tape.sum_all(inner);
            let kl = tape.scale(total, 0.5 / b as f64);
            (zs, Some(tape.scale(kl, encoder.cfg.kl_weight)))
        }
    };

    let per_sample = |vals: Vec<f64>| -> Tensor<T> {
        Tensor::new(vec![b, 1, 1, 1], vals.into_iter().map(T::of_f64).collect())
            .expect("coef shape")
    };
    let img_shape = vec![b, 3, h, w];

    let graph = if cfg.schedule.kind == ScheduleKind::DdpmLinear {
        // discrete-time baseline: x_tau = alpha x0 + sigma eps, predict eps
        let (alpha, sigma) = flowmath::ddpm_coefficients(&cfg.schedule)?;
        let t_max = cfg.schedule.num_discrete_steps - 1;
        let sig: Vec<f64> = draws.ddpm_tau.iter().map(|&tau| alpha[tau]).collect();
        let noi: Vec<f64> = draws.ddpm_tau.iter().map(|&tau| sigma[tau]).collect();
        let ts: Vec<f64> = draws
            .ddpm_tau
            .iter()
            .map(|&tau| tau as f64 / t_max as f64)
            .collect();
        let sig_l = tape.leaf(per_sample(sig));
        let noi_l = tape.leaf(per_sample(noi));
        let sig_b = tape.broadcast(sig_l, &img_shape);
        let noi_b = tape.broadcast(noi_l, &img_shape);
        let xs = tape.mul(x0, sig_b);
        let es = tape.mul(eps, noi_b);
        let xt = tape.add(xs, es);
        let eps_hat = decoder.forward(tape, &dec_bound, xt, &ts, z)?;
        let score = objectives::mse_node(tape, eps_hat, eps);
        let total_g = match reg {
            Some(r) => tape.add(score, r),
            None => score,
        };
        StepGraph {
            score,
            lpips: None,
            adv_g: None,
            adv_d: None,
            r1: None,
            reg,
            total_g,
            total_d: None,
            enc_bound,
            dec_bound,
            disc_bound: None,
        }
    } else {
        // rectified flow on the gamma-scaled path
        let ts = draws.t.clone();
        let sig: Vec<f64> = ts.iter().map(|&t| gamma * (1.0 - t)).collect();
        let noi: Vec<f64> = ts.clone();
        let inv_div: Vec<f64> = ts
            .iter()
            .map(|&t| 1.0 / flowmath::norm_divisor(t, gamma))
            .collect();
        let sig_l = tape.leaf(per_sample(sig));
        let noi_l = tape.leaf(per_sample(noi));
        let inv_l = tape.leaf(per_sample(inv_div));
        let sig_b = tape.broadcast(sig_l, &img_shape);
        let noi_b = tape.broadcast(noi_l, &img_shape);
        let inv_b = tape.broadcast(inv_l, &img_shape);
        let xs = tape.mul(x0, sig_b);
        let es = tape.mul(eps, noi_b);
        let xt = tape.add(xs, es);
        let u = tape.mul(xt, inv_b);
        let v_hat = decoder.forward(tape, &dec_bound, u, &ts, z)?;
        // velocity target on the gamma path: eps - gamma * x0
        let gx0 = tape.scale(x0, gamma);
        let target = tape.sub(eps, gx0);
        let score = objectives::mse_node(tape, v_hat, target);

        let need_x0_hat = cfg.objectives.lambda_lpips > 0.0 || adv_on;
        let x0_hat = if need_x0_hat {
            let t_l = tape.leaf(per_sample(ts.clone()));
            let t_b = tape.broadcast(t_l, &img_shape);
            let tv = tape.mul(t_b, v_hat);
            let est = tape.sub(xt, tv);
            Some(tape.scale(est, 1.0 / gamma))
        } else {
            None
        };

        let lpips = if cfg.objectives.lambda_lpips > 0.0 {
            let ex = extractor.ok_or_else(|| {
                Error::invalid_argument("perceptual loss enabled without an extractor")
            })?;
            Some(objectives::perceptual_loss_node(
                tape,
                ex,
                x0_hat.unwrap(),
                x0,
            )?)
        } else {
            None
        };

        let (adv_g, adv_d, r1, disc_bound) = if adv_on {
            let (disc, disc_params) = disc.ok_or_else(|| {
                Error::invalid_argument("adversarial loss enabled without a discriminator")
            })?;
            let disc_bound = Bound::new(tape, disc_params);
            let x0h = x0_hat.unwrap();
            let (real_ep, fake_ep, anchor, pair_ts): (NodeId, NodeId, NodeId, Vec<f64>) =
                match disc.cfg.matching_mode {
                    MatchingMode::StartToEnd => (x0, x0h, xt, ts.clone()),
                    MatchingMode::Plain => {
                        let zeros = tape.leaf(Tensor::zeros(&img_shape));
                        (x0, x0h, zeros, vec![0.0; b])
                    }
                    MatchingMode::Stepwise => {
                        let s_back = &draws.dt_back;
                        // eps estimate from the prediction, on the tape
                        let omt: Vec<f64> = ts.iter().map(|&t| 1.0 - t).collect();
                        let omt_l = tape.leaf(per_sample(omt));
                        let omt_b = tape.broadcast(omt_l, &img_shape);
                        let vscaled = tape.mul(omt_b, v_hat);
                        let eps_hat = tape.add(xt, vscaled);
                        let c_sig: Vec<f64> = s_back.iter().map(|&s| gamma * (1.0 - s)).collect();
                        let c_noi: Vec<f64> = s_back.clone();
                        let cs = tape.leaf(per_sample(c_sig));
                        let cn = tape.leaf(per_sample(c_noi));
                        let cs_b = tape.broadcast(cs, &img_shape);
                        let cn_b = tape.broadcast(cn, &img_shape);
                        // fake endpoint from (x0_hat, eps_hat)
                        let f1 = tape.mul(x0h, cs_b);
                        let f2 = tape.mul(eps_hat, cn_b);
                        let fake = tape.add(f1, f2);
                        // real endpoint from (x0, eps), same coefficients
                        let r1n = tape.mul(x0, cs_b);
                        let r2n = tape.mul(eps, cn_b);
                        let real = tape.add(r1n, r2n);
                        (real, fake, xt, s_back.clone())
                    }
                };
            // real and fake run as one batched forward; the discriminator
            // has no cross-sample coupling, so the logits are identical to
            // two separate passes. A single input node lets R1 take the
            // input gradient of the real rows.
            let real_in = tape.concat(&[real_ep, anchor], 1);
            let real_e = tape.slice(real_in, 1, 0, 3);
            let real_a = tape.slice(real_in, 1, 3, 3);
            let both_e = tape.concat(&[real_e, fake_ep], 0);
            let both_a = tape.concat(&[real_a, anchor], 0);
            let mut both_ts = pair_ts.clone();
            both_ts.extend_from_slice(&pair_ts);
            let logits = disc.forward(tape, &disc_bound, both_e, both_a, &both_ts)?;
            let logit_real = tape.slice(logits, 0, 0, b);
            let logit_fake = tape.slice(logits, 0, b, b);

            let neg_real = tape.neg(logit_real);
            let sp_nr = tape.softplus(neg_real);
            let d_real = tape.mean_all(sp_nr);
            let sp_f = tape.softplus(logit_fake);
            let d_fake = tape.mean_all(sp_f);
            let adv_d = tape.add(d_real, d_fake);

            let neg_fake = tape.neg(logit_fake);
            let sp_nf = tape.softplus(neg_fake);
            let adv_g = tape.mean_all(sp_nf);

            let r1 = if disc.cfg.r1_weight > 0.0 {
                Some(r1_penalty_node(
                    tape,
                    logit_real,
                    real_in,
                    disc.cfg.r1_weight,
                )?)
            } else {
                None
            };
            (Some(adv_g), Some(adv_d), r1, Some(disc_bound))
        } else {
            (None, None, None, None)
        };

        let mut total_g = score;
        if let Some(l) = lpips {
            let lw = tape.scale(l, cfg.objectives.lambda_lpips);
            total_g = tape.add(total_g, lw);
        }
        if let Some(a) = adv_g {
            let aw = tape.scale(a, cfg.objectives.lambda_adv);
            total_g = tape.add(total_g, aw);
        }
        if let Some(r) = reg {
            total_g = tape.add(total_g, r);
        }
        let total_d = match (adv_d, r1) {
            (Some(d), Some(r)) => Some(tape.add(d, r)),
            (Some(d), None) => Some(d),
            _ => None,
        };
        StepGraph {
            score,
            lpips,
            adv_g,
            adv_d,
            r1,
            reg,
            total_g,
            total_d,
            enc_bound,
            dec_bound,
            disc_bound,
        }
    };
    Ok(graph)
}

fn grads_to_map<T: Scalar>(
    entries: &[(String, NodeId)],
    grads: Vec<Option<Tensor<T>>>,
) -> BTreeMap<String, Tensor<T>> {
    entries
        .iter()
        .zip(grads)
        .filter_map(|((name, _), g)| g.map(|t| (name.clone(), t)))
        .collect()
}

/// Training state: models, optimizers, EMA shadows and the step counter.
pub struct Trainer<T: Scalar> {
    pub cfg: RunConfig,
    pub dataset: Dataset,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub disc: Option<Discriminator>,
    pub enc_params: ParamStore<T>,
    pub dec_params: ParamStore<T>,
    pub disc_params: Option<ParamStore<T>>,
    pub ema_enc: ParamStore<T>,
    pub ema_dec: ParamStore<T>,
    pub extractor: Option<RandomPyramid<T>>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    pub step: usize,
    digest: String,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = Dataset::load(&cfg.data)?;
        let encoder = Encoder::new(&cfg.encoder)?;
        let train_res = cfg.data.resolution.0.min(cfg.data.resolution.1);
        let decoder = Decoder::new(
            &cfg.decoder,
            cfg.encoder.latent_channels,
            train_res,
            cfg.adm_unet(),
        )?;
        let master = cfg.trainer.seed;
        let enc_params = encoder.init_params(derive_seed(master, 10));
        let dec_params =
            decoder.init_params(derive_seed(master, 11), cfg.trainer.zero_init_decoder_out);
        let (disc, disc_params) = if cfg.adversarial_active() {
            let d = Discriminator::new(&cfg.discriminator)?;
            let p = d.init_params(derive_seed(master, 12));
            (Some(d), Some(p))
        } else {
            (None, None)
        };
        let extractor =
            (cfg.objectives.lambda_lpips > 0.0).then(|| RandomPyramid::new(cfg.extractor.seed));
        let tc = &cfg.trainer;
        let ema_enc = enc_params.clone();
        let ema_dec = dec_params.clone();
        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            encoder,
            decoder,
            disc,
            enc_params,
            dec_params,
            disc_params,
            ema_enc,
            ema_dec,
            extractor,
            opt_g: Adam::new(tc.adam_beta1, tc.adam_beta2, tc.adam_eps),
            opt_d: Adam::new(tc.adam_beta1, tc.adam_beta2, tc.adam_eps),
            step: 0,
            digest: cfg.digest(),
        })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Draws for a given step; pure in `(seed, step)`.
    pub fn draws_for_step(&self, step: usize) -> StepDraws<T> {
        let master = self.cfg.trainer.seed;
        let b = self.cfg.trainer.batch_size;
        let (h, w) = self.cfg.data.resolution;
        let mut t_rng = stream_rng(master, 2, step as u64);
        let t: Vec<f64> = (0..b)
            .map(|_| flowmath::sample_train_time(&mut t_rng, &self.cfg.time_sampler))
            .collect();
        let mut eps_rng = stream_rng(master, 3, step as u64);
        let eps = Tensor::randn(&[b, 3, h, w], &mut eps_rng);
        let mut dt_rng = stream_rng(master, 4, step as u64);
        let dt_back: Vec<f64> = t.iter().map(|&ti| ti - dt_rng.gen::<f64>() * ti).collect();
        let mut tau_rng = stream_rng(master, 5, step as u64);
        let t_count = self.cfg.schedule.num_discrete_steps;
        let ddpm_tau: Vec<usize> = (0..b).map(|_| tau_rng.gen_range(0..t_count)).collect();
        let mut kl_rng = stream_rng(master, 6, step as u64);
        let zs = self.cfg.data.resolution.0 / self.cfg.encoder.downsample_factor;
        let zs_w = self.cfg.data.resolution.1 / self.cfg.encoder.downsample_factor;
        let kl_noise = Tensor::randn(
            &[b, self.cfg.encoder.latent_channels, zs, zs_w],
            &mut kl_rng,
        );
        StepDraws {
            t,
            eps,
            dt_back,
            ddpm_tau,
            kl_noise,
        }
    }

    fn batch_for_step(&self, step: usize) -> Result<Tensor<T>> {
        let b = self.cfg.trainer.batch_size;
        let steps_per_epoch = self.dataset.len().div_ceil(b);
        let epoch = (step / steps_per_epoch) as u64;
        let step_in_epoch = step % steps_per_epoch;
        self.dataset.load_batch(epoch, step_in_epoch, b)
    }

    pub fn adv_on_at(&self, step: usize) -> bool {
        self.cfg.adversarial_active() && step >= self.cfg.trainer.adv_warmup_steps
    }

    /// One optimization step: forward, both backward passes, discriminator
    /// update, generator update, EMA. Returns the per-term losses.
    pub fn train_step(&mut self) -> Result<LossBundle> {
        let step = self.step;
        let batch = self.batch_for_step(step)?;
        let draws = self.draws_for_step(step);
        let adv_on = self.adv_on_at(step);
        let mut tape = Tape::new();
        let graph = build_step_graph(
            &mut tape,
            &self.cfg,
            &self.encoder,
            &self.enc_params,
            &self.decoder,
            &self.dec_params,
            self.disc
                .as_ref()
                .map(|d| (d, self.disc_params.as_ref().unwrap())),
            self.extractor.as_ref(),
            &batch,
            &draws,
            adv_on,
        )?;

        let scalar = |id: Option<NodeId>| id.map_or(0.0, |i| tape.value(i).item().to_f64_());
        let bundle = LossBundle {
            score: scalar(Some(graph.score)),
            lpips: scalar(graph.lpips),
            adv_g: scalar(graph.adv_g),
            adv_d: scalar(graph.adv_d),
            r1: scalar(graph.r1),
            reg: scalar(graph.reg),
            total_g: scalar(Some(graph.total_g)),
            total_d: scalar(graph.total_d),
        };
        if !bundle.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite loss at step {step}: {bundle:?}"
            )));
        }

        let lr = lr_at(step, &self.cfg.trainer);

        // discriminator first, from the shared graph
        if let (Some(total_d), Some(disc_bound)) = (graph.total_d, graph.disc_bound.as_ref()) {
            let entries = disc_bound.entries();
            let ids: Vec<NodeId> = entries.iter().map(|(_, id)| *id).collect();
            let gd = tape.grad_values(total_d, &ids)?;
            let mut dmap = grads_to_map(&entries, gd);
            if let Some(c) = self.cfg.trainer.grad_clip {
                clip_grads(&mut [&mut dmap], c);
            }
            let dp = self.disc_params.as_mut().unwrap();
            self.opt_d.update(&mut [(dp, &dmap)], lr);
        }

        // then the generator (encoder + decoder)
        let enc_entries = graph.enc_bound.entries();
        let dec_entries = graph.dec_bound.entries();
        let mut all_ids: Vec<NodeId> = enc_entries.iter().map(|(_, id)| *id).collect();
        all_ids.extend(dec_entries.iter().map(|(_, id)| *id));
        let mut gg = tape.grad_values(graph.total_g, &all_ids)?;
        let g_dec: Vec<_> = gg.split_off(enc_entries.len());
        let mut emap = grads_to_map(&enc_entries, gg);
        let mut dmap = grads_to_map(&dec_entries, g_dec);
        if let Some(c) = self.cfg.trainer.grad_clip {
            clip_grads(&mut [&mut emap, &mut dmap], c);
        }
        self.opt_g.update(
            &mut [(&mut self.enc_params, &emap), (&mut self.dec_params, &dmap)],
            lr,
        );

        let decay = self.cfg.trainer.ema_decay;
        ema_update(&mut self.ema_enc, &self.enc_params, decay)?;
        ema_update(&mut self.ema_dec, &self.dec_params, decay)?;

        self.step += 1;

        // extra discriminator-only passes when configured
        for extra in 1..self.cfg.trainer.d_steps_per_g {
            if !adv_on {
                break;
            }
            self.extra_disc_step(step, extra, lr)?;
        }
        Ok(bundle)
    }

    fn extra_disc_step(&mut self, step: usize, extra: usize, lr: f64) -> Result<()> {
        let batch = self.batch_for_step(step)?;
        let mut draws = self.draws_for_step(step);
        // fresh noise stream per extra pass
        let mut eps_rng = stream_rng(self.cfg.trainer.seed, 7 + extra as u64, step as u64);
        draws.eps = Tensor::randn(draws.eps.shape(), &mut eps_rng);
        let mut tape = Tape::new();
        let graph = build_step_graph(
            &mut tape,
            &self.cfg,
            &self.encoder,
            &self.enc_params,
            &self.decoder,
            &self.dec_params,
            self.disc
                .as_ref()
                .map(|d| (d, self.disc_params.as_ref().unwrap())),
            self.extractor.as_ref(),
            &batch,
            &draws,
            true,
        )?;
        if let (Some(total_d), Some(disc_bound)) = (graph.total_d, graph.disc_bound.as_ref()) {
            let entries = disc_bound.entries();
            let ids: Vec<NodeId> = entries.iter().map(|(_, id)| *id).collect();
            let gd = tape.grad_values(total_d, &ids)?;
            let dmap = grads_to_map(&entries, gd);
            let dp = self.disc_params.as_mut().unwrap();
            self.opt_d.update(&mut [(dp, &dmap)], lr);
        }
        Ok(())
    }

    /// Runs to `total_steps`, reporting each step's losses to the sink.
    pub fn run(&mut self, mut sink: impl FnMut(usize, &LossBundle)) -> Result<()> {
        while self.step < self.cfg.trainer.total_steps {
            let at = self.step;
            let bundle = self.train_step()?;
            sink(at, &bundle);
        }
        Ok(())
    }

    /// Parameters used for sampling/evaluation (EMA by default).
    pub fn eval_params(&self) -> (&ParamStore<T>, &ParamStore<T>) {
        if self.cfg.trainer.ema_for_eval {
            (&self.ema_enc, &self.ema_dec)
        } else {
            (&self.enc_params, &self.dec_params)
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<CheckpointManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("{}: {e}", dir.display())))?;
        let mut networks = BTreeMap::new();
        let mut write = |name: &str, store: &ParamStore<T>| -> Result<()> {
            let file = format!("{name}.bin");
            write_params(&dir.join(&file), store)?;
            networks.insert(name.to_string(), file);
            Ok(())
        };
        write("encoder", &self.enc_params)?;
        write("decoder", &self.dec_params)?;
        if let Some(dp) = &self.disc_params {
            write("discriminator", dp)?;
        }
        write("ema_encoder", &self.ema_enc)?;
        write("ema_decoder", &self.ema_dec)?;
        write("optimizer_g", &self.opt_g.state_archive())?;
        write("optimizer_d", &self.opt_d.state_archive())?;
        let manifest = CheckpointManifest {
            schema_version: 1,
            step: self.step,
            config_digest: self.digest.clone(),
            dtype: T::DTYPE.to_string(),
            networks,
            optimizer_steps: BTreeMap::from([
                ("g".to_string(), self.opt_g.step),
                ("d".to_string(), self.opt_d.step),
            ]),
            metrics: None,
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::io(format!("manifest: {e}")))?;
        std::fs::write(dir.join("manifest.json"), json)
            .map_err(|e| Error::io(format!("{}: {e}", dir.display())))?;
        Ok(manifest)
    }

    pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::io(format!("manifest: {e}")))
    }

    /// Restores a trainer from a checkpoint written with the same config.
    pub fn load_checkpoint(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let digest = cfg.digest();
        if manifest.config_digest != digest {
            return Err(Error::config_mismatch(format!(
                "checkpoint digest {} does not match config digest {digest}",
                manifest.config_digest
            )));
        }
        let mut trainer = Self::new(cfg)?;
        trainer.enc_params = read_params(&dir.join("encoder.bin"))?;
        trainer.dec_params = read_params(&dir.join("decoder.bin"))?;
        if trainer.disc.is_some() {
            trainer.disc_params = Some(read_params(&dir.join("discriminator.bin"))?);
        }
        trainer.ema_enc = read_params(&dir.join("ema_encoder.bin"))?;
        trainer.ema_dec = read_params(&dir.join("ema_decoder.bin"))?;
        let og = read_params(&dir.join("optimizer_g.bin"))?;
        trainer
            .opt_g
            .restore_state(&og, manifest.optimizer_steps["g"]);
        let od = read_params(&dir.join("optimizer_d.bin"))?;
        trainer
            .opt_d
            .restore_state(&od, manifest.optimizer_steps["d"]);
        trainer.step = manifest.step;
        Ok(trainer)
    }
}
