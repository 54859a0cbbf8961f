//! Time-dependent discriminator and adversarial trajectory matching.
//!
//! The discriminator sees an endpoint image and a trajectory anchor
//! concatenated channel-wise (6 input channels) with the time injected
//! through adaptive group norm, and is trained with the non-saturating GAN
//! loss plus an R1 gradient penalty on real pairs.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Bound, Conv2d, EmbedMlp, GroupNorm, ParamStore};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which trajectory pairs the adversary contrasts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    /// Real `(x0, xt)` vs fake `(x0_hat, xt)`.
    StartToEnd,
    /// One random step back: endpoints at `t - dt`, `dt ~ U(0, t)`.
    Stepwise,
    /// Plain image discriminator: anchor zeroed, time ignored.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    pub num_downsample_layers: usize,
    /// Inject `t` via adaptive group norm when set.
    pub time_conditioning: bool,
    pub r1_weight: f64,
    pub matching_mode: MatchingMode,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            num_downsample_layers: 3,
            time_conditioning: true,
            r1_weight: 10.0,
            matching_mode: MatchingMode::StartToEnd,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r1_weight < 0.0 {
            return Err(Error::invalid_argument("r1_weight must be >= 0"));
        }
        if self.base_width == 0 || self.num_downsample_layers == 0 {
            return Err(Error::invalid_argument(
                "discriminator needs positive width and depth",
            ));
        }
        Ok(())
    }
}

/// One (endpoint, anchor) sample pair with its per-sample times.
#[derive(Clone, Debug)]
pub struct TrajectoryPair<T> {
    pub endpoint: Tensor<T>,
    pub anchor: Tensor<T>,
    pub t: Vec<f64>,
}

impl<T: Scalar> TrajectoryPair<T> {
    pub fn new(endpoint: Tensor<T>, anchor: Tensor<T>, t: Vec<f64>) -> Result<Self> {
        if endpoint.shape() != anchor.shape() {
            return Err(Error::shape_mismatch(endpoint.shape(), anchor.shape()));
        }
        if endpoint.dims4().0 != t.len() {
            return Err(Error::invalid_argument("one time per sample required"));
        }
        Ok(Self {
            endpoint,
            anchor,
            t,
        })
    }
}

struct DiscLayer {
    conv: Conv2d,
    gn: Option<GroupNorm>,
    tproj: Option<Conv2d>,
}

/// Patch-style convolutional discriminator with AdaGN time injection.
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    time_mlp: Option<EmbedMlp>,
    layers: Vec<DiscLayer>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let emb_dim = 2 * w;
        let time_mlp = cfg
            .time_conditioning
            .then(|| EmbedMlp::new("disc.time", w, emb_dim));
        let mut layers = Vec::new();
        let mut cin = 6;
        for i in 0..cfg.num_downsample_layers {
            let cout = (w << i).min(w * 8);
            let conv = Conv2d::new(format!("disc.l{i}.conv"), cin, cout, 4, 2, 1);
            // first layer stays norm-free, as in patch discriminators
            let gn = (i > 0).then(|| GroupNorm::new(format!("disc.l{i}.gn"), cout));
            let tproj = (i > 0 && cfg.time_conditioning)
                .then(|| Conv2d::linear(format!("disc.l{i}.tproj"), emb_dim, 2 * cout));
            layers.push(DiscLayer { conv, gn, tproj });
            cin = cout;
        }
        let head = Conv2d::new("disc.head", cin, 1, 3, 1, 1);
        Ok(Self {
            cfg: cfg.clone(),
            time_mlp,
            layers,
            head,
        })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if let Some(mlp) = &self.time_mlp {
            mlp.init(&mut store, &mut rng);
        }
        for l in &self.layers {
            l.conv.init(&mut store, &mut rng, 1.0);
            if let Some(gn) = &l.gn {
                gn.init(&mut store);
            }
            if let Some(tp) = &l.tproj {
                tp.init(&mut store, &mut rng, 1.0);
            }
        }
        self.head.init(&mut store, &mut rng, 1.0);
        store
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.time_mlp.as_ref().map_or(0, |m| m.param_count());
        for l in &self.layers {
            n += l.conv.param_count();
            n += l.gn.as_ref().map_or(0, |g| g.param_count());
            n += l.tproj.as_ref().map_or(0, |t| t.param_count());
        }
        n + self.head.param_count()
    }

    /// Tape-level forward to per-sample logits `(B, 1)`.
    ///
    /// `endpoint` and `anchor` are concatenated channel-wise; patch logits
    /// are averaged into one logit per sample.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        endpoint: NodeId,
        anchor: NodeId,
        ts: &[f64],
    ) -> Result<NodeId> {
        let (b, c, ..) = tape.value(endpoint).dims4();
        if tape.shape(endpoint) != tape.shape(anchor) {
            return Err(Error::shape_mismatch(
                tape.shape(endpoint),
                tape.shape(anchor),
            ));
        }
        if c != 3 {
            return Err(Error::invalid_argument(
                "discriminator expects 3-channel images",
            ));
        }
        if ts.len() != b {
            return Err(Error::invalid_argument("one time per sample required"));
        }
        let emb = self.time_mlp.as_ref().map(|mlp| {
            let raw = tape.leaf(sinusoidal_embedding(ts, self.cfg.base_width));
            mlp.forward(tape, p, raw)
        });

        let mut h = tape.concat(&[endpoint, anchor], 1);
        for l in &self.layers {
            h = l.conv.forward(tape, p, h);
            if let Some(gn) = &l.gn {
                h = gn.forward(tape, p, h);
                if let (Some(tp), Some(e)) = (&l.tproj, emb) {
                    let cout = l.conv.cout;
                    let mods = tp.forward(tape, p, e);
                    let scale = tape.slice(mods, 1, 0, cout);
                    let shift = tape.slice(mods, 1, cout, cout);
                    let s1 = tape.add_scalar(scale, 1.0);
                    h = tape.channel_affine(h, s1, Some(shift));
                }
            }
            h = tape.leaky_relu(h, 0.2);
        }
        let patches = self.head.forward(tape, p, h);
        let (pb, pc, ph, pw) = tape.value(patches).dims4();
        debug_assert_eq!(pc, 1);
        let flat = tape.reshape(patches, &[pb, pc * ph * pw]);
        let summed = tape.reduce_sum(flat, &[1]);
        Ok(tape.scale(summed, 1.0 / (pc * ph * pw) as f64))
    }

    /// Value-level logits for a pair; `plain` matching zeroes the anchor and
    /// ignores the time, reducing to a standard image discriminator.
    pub fn discriminate<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        pair: &TrajectoryPair<T>,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params);
        let e = tape.leaf(pair.endpoint.clone());
        let (a, ts) = if self.cfg.matching_mode == MatchingMode::Plain {
            let zeros = tape.leaf(Tensor::zeros(pair.anchor.shape()));
            (zeros, vec![0.0; pair.t.len()])
        } else {
            (tape.leaf(pair.anchor.clone()), pair.t.clone())
        };
        let logits = self.forward(&mut tape, &bound, e, a, &ts)?;
        Ok(tape
            .value(logits)
            .data()
            .iter()
            .map(|v| v.to_f64_())
            .collect())
    }
}

/// Non-saturating GAN losses from scalar logits.
///
/// `d_loss = -log s(r) - log(1 - s(f))`, `g_loss = -log s(f)` where `s` is
/// the sigmoid; written with softplus for stability.
pub fn gan_losses(logit_real: f64, logit_fake: f64) -> Result<(f64, f64)> {
    if !logit_real.is_finite() || !logit_fake.is_finite() {
        return Err(Error::numerical("gan_losses got non-finite logits"));
    }
    let softplus = |x: f64| {
        if x > 0.0 {
            x + (-x).exp().ln_1p()
        } else {
            x.exp().ln_1p()
        }
    };
    let d = softplus(-logit_real) + softplus(logit_fake);
    let g = softplus(-logit_fake);
    Ok((d, g))
}

/// R1 penalty as a tape node: `(weight/2) * mean_b ||d logits / d input||^2`.
///
/// `logits` must be per-sample `(B, 1)` and `input` the tensor the gradient
/// is taken against (the concatenated pair images). The returned node still
/// depends on the discriminator parameters, so it can be differentiated
/// again for the discriminator update.
pub fn r1_penalty_node<T: Scalar>(
    tape: &mut Tape<T>,
    logits: NodeId,
    input: NodeId,
    weight: f64,
) -> Result<NodeId> {
    let b = tape.shape(input)[0];
    let s = tape.sum_all(logits);
    let g = tape
        .grad(s, &[input])?
        .pop()
        .flatten()
        .ok_or_else(|| Error::invalid_argument("logits do not depend on the input"))?;
    let g2 = tape.square(g);
    let flat_len = tape.value(g2).len() / b;
    let flat = tape.reshape(g2, &[b, flat_len]);
    let per_sample = tape.reduce_sum(flat, &[1]);
    let mean = tape.mean_all(per_sample);
    Ok(tape.scale(mean, weight / 2.0))
}

/// Value-level R1 penalty of a discriminator at a real pair.
pub fn r1_penalty<T: Scalar>(
    disc: &Discriminator,
    params: &ParamStore<T>,
    pair_real: &TrajectoryPair<T>,
) -> Result<f64> {
    if disc.cfg.r1_weight == 0.0 {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let both = tape.leaf(concat_channels(&pair_real.endpoint, &pair_real.anchor)?);
    let e = tape.slice(both, 1, 0, 3);
    let a = tape.slice(both, 1, 3, 3);
    let logits = disc.forward(&mut tape, &bound, e, a, &pair_real.t)?;
    let r1 = r1_penalty_node(&mut tape, logits, both, disc.cfg.r1_weight)?;
    Ok(tape.value(r1).item().to_f64_())
}

fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch(a.shape(), b.shape()));
    }
    let (n, c, h, w) = a.dims4();
    let mut out = Tensor::zeros(&[n, 2 * c, h, w]);
    let plane = c * h * w;
    for ni in 0..n {
        out.data_mut()[ni * 2 * plane..ni * 2 * plane + plane]
            .copy_from_slice(&a.data()[ni * plane..(ni + 1) * plane]);
        out.data_mut()[ni * 2 * plane + plane..(ni + 1) * 2 * plane]
            .copy_from_slice(&b.data()[ni * plane..(ni + 1) * plane]);
    }
    Ok(out)
}

/// Builds the real/fake pairs for the configured matching mode.
///
/// `gamma` is the signal scale of the active schedule (1 when unscaled).
/// Stepwise mode draws `dt ~ U(0, t)` per sample and moves both endpoints to
/// `t - dt` along their respective straight paths.
pub fn build_pairs<T: Scalar, R: Rng>(
    x0: &Tensor<T>,
    xt: &Tensor<T>,
    x0_hat: &Tensor<T>,
    t: &[f64],
    mode: MatchingMode,
    gamma: f64,
    rng: &mut R,
) -> Result<(TrajectoryPair<T>, TrajectoryPair<T>)> {
    if x0.shape() != xt.shape() || x0.shape() != x0_hat.shape() {
        return Err(Error::shape_mismatch(x0.shape(), xt.shape()));
    }
    let (b, c, h, w) = x0.dims4();
    if t.len() != b {
        return Err(Error::invalid_argument("one time per sample required"));
    }
    match mode {
        MatchingMode::StartToEnd => Ok((
            TrajectoryPair::new(x0.clone(), xt.clone(), t.to_vec())?,
            TrajectoryPair::new(x0_hat.clone(), xt.clone(), t.to_vec())?,
        )),
        MatchingMode::Plain => {
            let zeros = Tensor::zeros(&[b, c, h, w]);
            let ts = vec![0.0; b];
            Ok((
                TrajectoryPair::new(x0.clone(), zeros.clone(), ts.clone())?,
                TrajectoryPair::new(x0_hat.clone(), zeros, ts)?,
            ))
        }
        MatchingMode::Stepwise => {
            if t.iter().any(|&ti| ti <= 0.0) {
                return Err(Error::invalid_argument("stepwise matching needs t > 0"));
            }
            let plane = c * h * w;
            let mut real = Tensor::zeros(&[b, c, h, w]);
            let mut fake = Tensor::zeros(&[b, c, h, w]);
            let mut t_back = Vec::with_capacity(b);
            for bi in 0..b {
                let dt = rng.gen::<f64>() * t[bi];
                let s = t[bi] - dt;
                t_back.push(s);
                // endpoint(x, s) = gamma (1-s) x + s * eps(x), with
                // eps(x) = (xt - gamma (1-t) x) / t for both real x0 and
                // estimated x0_hat (the Eq.-9 inversion collapses to this).
                let ti = t[bi];
                for (dst, src) in [(&mut real, x0), (&mut fake, x0_hat)] {
                    for i in 0..plane {
                        let idx = bi * plane + i;
                        let xv = src.data()[idx].to_f64_();
                        let xtv = xt.data()[idx].to_f64_();
                        let eps = (xtv - gamma * (1.0 - ti) * xv) / ti;
                        dst.data_mut()[idx] = T::of_f64(gamma * (1.0 - s) * xv + s * eps);
                    }
                }
            }
            Ok((
                TrajectoryPair::new(real, xt.clone(), t_back.clone())?,
                TrajectoryPair::new(fake, xt.clone(), t_back)?,
            ))
        }
    }
}
