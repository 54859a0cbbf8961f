//! Training objective assembly: velocity matching, perceptual matching on
//! the one-step estimate, and the adversarial terms, combined with fixed
//! weights into generator- and discriminator-side totals.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Weights of the perceptual and adversarial terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_lpips: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lpips: 0.5,
            lambda_adv: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_lpips < 0.0 || self.lambda_adv < 0.0 {
            return Err(Error::invalid_argument("loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// Per-term scalars for one step, plus the weighted totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub score: f64,
    pub lpips: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub r1: f64,
    pub reg: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [
            self.score,
            self.lpips,
            self.adv_g,
            self.adv_d,
            self.r1,
            self.reg,
            self.total_g,
            self.total_d,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean squared error over all elements, as a tape node.
pub fn mse_node<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> NodeId {
    let d = tape.sub(a, b);
    let sq = tape.square(d);
    tape.mean_all(sq)
}

/// Velocity-matching loss `||v_pred - (eps - x0)||^2`, averaged over batch
/// and pixels (value level).
pub fn velocity_loss<T: Scalar>(
    v_pred: &Tensor<T>,
    x0: &Tensor<T>,
    eps: &Tensor<T>,
) -> Result<f64> {
    if v_pred.shape() != x0.shape() || x0.shape() != eps.shape() {
        return Err(Error::shape_mismatch(v_pred.shape(), x0.shape()));
    }
    if !v_pred.all_finite() || !x0.all_finite() || !eps.all_finite() {
        return Err(Error::numerical("velocity_loss got non-finite input"));
    }
    let mut acc = 0.0f64;
    for ((&v, &x), &e) in v_pred.data().iter().zip(x0.data()).zip(eps.data()) {
        let d = v.to_f64_() - (e.to_f64_() - x.to_f64_());
        acc += d * d;
    }
    Ok(acc / v_pred.len() as f64)
}

/// Pluggable perceptual feature extractor.
///
/// Implementations return one feature map per layer; the perceptual loss
/// unit-normalizes each across channels and sums per-layer mean squared
/// distances. Pretrained backbones plug in behind this same trait.
pub trait FeatureExtractor<T: Scalar> {
    fn features(&self, tape: &mut Tape<T>, x: NodeId) -> Result<Vec<NodeId>>;
    fn layer_weights(&self) -> Vec<f64>;
}

/// Fixed, seeded, randomly initialized conv pyramid. Random features give a
/// usable perceptual distance at small scale and keep the metric independent
/// of any pretrained weights.
pub struct RandomPyramid<T> {
    convs: Vec<Conv2d>,
    params: ParamStore<T>,
    min_input: usize,
}

impl<T: Scalar> RandomPyramid<T> {
    pub fn new(seed: u64) -> Self {
        Self::with_channels(seed, &[16, 32, 64, 64])
    }

    pub fn with_channels(seed: u64, widths: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            let conv = Conv2d::new(format!("feat.l{i}"), cin, cout, 3, 2, 1);
            conv.init(&mut params, &mut rng, 1.0);
            convs.push(conv);
            cin = cout;
        }
        let min_input = 1 << (widths.len() - 1);
        Self {
            convs,
            params,
            min_input,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.convs.last().map_or(3, |c| c.cout)
    }

    /// Value-level final-stage features pooled to one vector per sample,
    /// used for Frechet statistics.
    pub fn pooled_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let feats = self.features(&mut tape, xid)?;
        let last = *feats.last().expect("pyramid has layers");
        let (b, c, h, w) = tape.value(last).dims4();
        let flat = tape.reshape(last, &[b * c, h * w]);
        let sum = tape.reduce_sum(flat, &[1]);
        let mean = tape.scale(sum, 1.0 / (h * w) as f64);
        let pooled = tape.reshape(mean, &[b, c]);
        Ok(tape.value(pooled).clone())
    }
}

impl<T: Scalar> FeatureExtractor<T> for RandomPyramid<T> {
    fn features(&self, tape: &mut Tape<T>, x: NodeId) -> Result<Vec<NodeId>> {
        let (_, c, h, w) = tape.value(x).dims4();
        if c != 3 {
            return Err(Error::invalid_argument(
                "extractor expects 3-channel images",
            ));
        }
        if h < self.min_input || w < self.min_input {
            return Err(Error::invalid_argument(format!(
                "input {h}x{w} below extractor minimum {}",
                self.min_input
            )));
        }
        let bound = Bound::new(tape, &self.params);
        let mut feats = Vec::new();
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(tape, &bound, h);
            h = tape.silu(h);
            feats.push(h);
        }
        Ok(feats)
    }

    fn layer_weights(&self) -> Vec<f64> {
        vec![1.0; self.convs.len()]
    }
}

/// Uses the raw image as its single feature map; reduces the perceptual loss
/// to a normalized-pixel MSE (test oracle).
pub struct IdentityExtractor;

impl<T: Scalar> FeatureExtractor<T> for IdentityExtractor {
    fn features(&self, _tape: &mut Tape<T>, x: NodeId) -> Result<Vec<NodeId>> {
        Ok(vec![x])
    }

    fn layer_weights(&self) -> Vec<f64> {
        vec![1.0]
    }
}

const FEAT_NORM_EPS: f64 = 1e-8;

fn unit_normalize<T: Scalar>(tape: &mut Tape<T>, f: NodeId) -> NodeId {
    let shape = tape.shape(f).to_vec();
    let sq = tape.square(f);
    let norm2 = tape.reduce_sum(sq, &[1]);
    let norm2e = tape.add_scalar(norm2, FEAT_NORM_EPS);
    let norm = tape.sqrt(norm2e);
    let inv = tape.recip(norm);
    let invb = tape.broadcast(inv, &shape);
    tape.mul(f, invb)
}

/// Perceptual distance as a tape node: per layer, mean squared distance
/// between channel-unit-normalized feature maps, weighted and summed.
pub fn perceptual_loss_node<T: Scalar>(
    tape: &mut Tape<T>,
    extractor: &dyn FeatureExtractor<T>,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape_mismatch(tape.shape(a), tape.shape(b)));
    }
    let fa = extractor.features(tape, a)?;
    let fb = extractor.features(tape, b)?;
    let weights = extractor.layer_weights();
    let mut total: Option<NodeId> = None;
    for ((&na, &nb), w) in fa.iter().zip(&fb).zip(weights) {
        let ua = unit_normalize(tape, na);
        let ub = unit_normalize(tape, nb);
        let d = mse_node(tape, ua, ub);
        let dw = tape.scale(d, w);
        total = Some(match total {
            None => dw,
            Some(t) => tape.add(t, dw),
        });
    }
    Ok(total.expect("extractor returned no layers"))
}

/// Value-level perceptual loss.
pub fn perceptual_loss<T: Scalar>(
    x0_hat: &Tensor<T>,
    x0: &Tensor<T>,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(x0_hat.clone());
    let b = tape.leaf(x0.clone());
    let node = perceptual_loss_node(&mut tape, extractor, a, b)?;
    Ok(tape.value(node).item().to_f64_())
}

/// Combines per-term scalars into the generator/discriminator totals.
pub fn compose_generator_loss(
    score: f64,
    lpips: f64,
    adv_g: f64,
    adv_d: f64,
    r1: f64,
    reg: f64,
    weights: &LossWeights,
) -> Result<LossBundle> {
    weights.validate()?;
    for (name, v) in [
        ("score", score),
        ("lpips", lpips),
        ("adv_g", adv_g),
        ("adv_d", adv_d),
        ("r1", r1),
        ("reg", reg),
    ] {
        if !v.is_finite() {
            return Err(Error::numerical(format!(
                "loss part {name} is not finite: {v}"
            )));
        }
    }
    Ok(LossBundle {
        score,
        lpips,
        adv_g,
        adv_d,
        r1,
        reg,
        total_g: score + weights.lambda_lpips * lpips + weights.lambda_adv * adv_g + reg,
        total_d: adv_d + r1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, &mut rng)
    }

    #[test]
    fn velocity_loss_oracle() {
        let x0 = randn(&[2, 3, 4, 4], 1);
        let eps = randn(&[2, 3, 4, 4], 2);
        let target = eps.zip_map(&x0, |e, x| e - x).unwrap();
        assert_eq!(velocity_loss(&target, &x0, &eps).unwrap(), 0.0);
        let off = target.map(|v| v + 1.0);
        assert!((velocity_loss(&off, &x0, &eps).unwrap() - 1.0).abs() < 1e-12);
        // independent scalar-loop oracle on random tensors
        let v = randn(&[2, 3, 4, 4], 3);
        let got = velocity_loss(&v, &x0, &eps).unwrap();
        let mut want = 0.0;
        for i in 0..v.len() {
            let d = v.data()[i] - (eps.data()[i] - x0.data()[i]);
            want += d * d;
        }
        want /= v.len() as f64;
        assert!((got - want).abs() < 1e-12);
        let nan = Tensor::full(&[2, 3, 4, 4], f64::NAN);
        assert!(velocity_loss(&nan, &x0, &eps).is_err());
    }

    #[test]
    fn perceptual_loss_zero_symmetric_nonnegative() {
        let ext = RandomPyramid::<f64>::new(7);
        let a = randn(&[1, 3, 16, 16], 4);
        let b = randn(&[1, 3, 16, 16], 5);
        assert_eq!(perceptual_loss(&a, &a, &ext).unwrap(), 0.0);
        let ab = perceptual_loss(&a, &b, &ext).unwrap();
        let ba = perceptual_loss(&b, &a, &ext).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
        // resolution below the pyramid minimum errors out
        let tiny = randn(&[1, 3, 4, 4], 6);
        assert!(perceptual_loss(&tiny, &tiny, &ext).is_err());
    }

    #[test]
    fn identity_extractor_reduces_to_normalized_pixel_mse() {
        let a = randn(&[2, 3, 5, 5], 7);
        let b = randn(&[2, 3, 5, 5], 8);
        let got = perceptual_loss(&a, &b, &IdentityExtractor).unwrap();
        // direct pixel-space oracle
        let (n, c, h, w) = a.dims4();
        let mut want = 0.0;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let mut na = 0.0;
                    let mut nb = 0.0;
                    for ci in 0..c {
                        na += a.at4(ni, ci, hi, wi).powi(2);
                        nb += b.at4(ni, ci, hi, wi).powi(2);
                    }
                    na = (na + FEAT_NORM_EPS).sqrt();
                    nb = (nb + FEAT_NORM_EPS).sqrt();
                    for ci in 0..c {
                        let d = a.at4(ni, ci, hi, wi) / na - b.at4(ni, ci, hi, wi) / nb;
                        want += d * d;
                    }
                }
            }
        }
        want /= (n * c * h * w) as f64;
        assert!((got - want).abs() < 1e-12, "got={got} want={want}");
    }

    #[test]
    fn perceptual_gradients_flow_to_input() {
        let ext = RandomPyramid::<f64>::new(9);
        let a = randn(&[1, 3, 16, 16], 10);
        let b = randn(&[1, 3, 16, 16], 11);
        let mut tape = Tape::new();
        let aid = tape.leaf(a.clone());
        let bid = tape.leaf(b.clone());
        let loss = perceptual_loss_node(&mut tape, &ext, aid, bid).unwrap();
        let g = tape.grad(loss, &[aid]).unwrap()[0].expect("gradient exists");
        let gv = tape.value(g).clone();
        assert!(gv.max_abs() > 0.0);
        // finite-difference spot check
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let idx = rng.gen_range(0..a.len());
            let h = 1e-6;
            let mut ap = a.clone();
            ap.data_mut()[idx] += h;
            let mut am = a.clone();
            am.data_mut()[idx] -= h;
            let fd = (perceptual_loss(&ap, &b, &ext).unwrap()
                - perceptual_loss(&am, &b, &ext).unwrap())
                / (2.0 * h);
            let ad = gv.data()[idx];
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            assert!((ad - fd).abs() / denom < 1e-4, "idx {idx}: ad={ad} fd={fd}");
        }
    }

    #[test]
    fn pyramid_is_seed_deterministic() {
        let a = randn(&[1, 3, 16, 16], 13);
        let e1 = RandomPyramid::<f64>::new(42);
        let e2 = RandomPyramid::<f64>::new(42);
        assert_eq!(
            perceptual_loss(&a, &a.map(|v| v * 0.5), &e1).unwrap(),
            perceptual_loss(&a, &a.map(|v| v * 0.5), &e2).unwrap()
        );
        let e3 = RandomPyramid::<f64>::new(43);
        assert_ne!(
            perceptual_loss(&a, &a.map(|v| v * 0.5), &e1).unwrap(),
            perceptual_loss(&a, &a.map(|v| v * 0.5), &e3).unwrap()
        );
    }

    #[test]
    fn compose_totals() {
        let w = LossWeights::default();
        let zero = compose_generator_loss(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, &w).unwrap();
        assert_eq!(zero.total_g, 0.0);
        assert_eq!(zero.total_d, 0.0);

        let b = compose_generator_loss(1.0, 2.0, 4.0, 0.3, 0.2, 0.0, &w).unwrap();
        assert!((b.total_g - 4.0).abs() < 1e-15);
        assert!((b.total_d - 0.5).abs() < 1e-15);

        // zero weights reduce to the pure flow-matching objective
        let off = LossWeights {
            lambda_lpips: 0.0,
            lambda_adv: 0.0,
        };
        let c = compose_generator_loss(1.5, 2.0, 4.0, 0.0, 0.0, 0.25, &off).unwrap();
        assert!((c.total_g - 1.75).abs() < 1e-15);

        assert!(compose_generator_loss(f64::INFINITY, 0.0, 0.0, 0.0, 0.0, 0.0, &w).is_err());
        let e = compose_generator_loss(0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0, &w).unwrap_err();
        assert!(e.to_string().contains("lpips"));
    }
}
