//! Convolutional encoder mapping images to continuous latents.
//!
//! A stack of residual blocks with strided-conv downsampling, fully
//! convolutional: any input resolution divisible by the downsampling factor
//! produces a latent of exactly `(H/f, W/f)` spatial size.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, GroupNorm, ParamStore};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Preset parameter budgets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamBudgetTag {
    /// ~6M parameters, f=16, 8 latent channels.
    Lite,
    /// ~34M parameters, f=8, 4 latent channels.
    Sd,
    /// Whatever the explicit fields say.
    Custom,
}

/// How the latent is regularized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    None,
    Kl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Downsampling factor, a power of two in {4, 8, 16, 32}.
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub base_width: usize,
    pub param_budget_tag: ParamBudgetTag,
    /// Per-level width multipliers; length must be `log2(f) + 1`.
    pub ch_mult: Vec<usize>,
    pub num_res_blocks: usize,
    pub latent_mode: LatentMode,
    /// KL weight when `latent_mode = kl`.
    pub kl_weight: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            downsample_factor: 4,
            latent_channels: 4,
            base_width: 16,
            param_budget_tag: ParamBudgetTag::Custom,
            ch_mult: vec![1, 1, 2],
            num_res_blocks: 1,
            latent_mode: LatentMode::None,
            kl_weight: 1e-6,
        }
    }
}

impl EncoderConfig {
    pub fn lite() -> Self {
        Self {
            downsample_factor: 16,
            latent_channels: 8,
            base_width: 64,
            param_budget_tag: ParamBudgetTag::Lite,
            ch_mult: vec![1, 1, 2, 2, 4],
            num_res_blocks: 2,
            latent_mode: LatentMode::None,
            kl_weight: 1e-6,
        }
    }

    pub fn sd() -> Self {
        Self {
            downsample_factor: 8,
            latent_channels: 4,
            base_width: 128,
            param_budget_tag: ParamBudgetTag::Sd,
            ch_mult: vec![1, 2, 4, 4],
            num_res_blocks: 2,
            latent_mode: LatentMode::None,
            kl_weight: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![4, 8, 16, 32].contains(&self.downsample_factor) {
            return Err(Error::invalid_argument(format!(
                "downsample_factor must be one of 4/8/16/32, got {}",
                self.downsample_factor
            )));
        }
        if ![4, 8, 16, 32].contains(&self.latent_channels) {
            return Err(Error::invalid_argument(format!(
                "latent_channels must be one of 4/8/16/32, got {}",
                self.latent_channels
            )));
        }
        let levels = (self.downsample_factor as f64).log2() as usize + 1;
        if self.ch_mult.len() != levels {
            return Err(Error::invalid_argument(format!(
                "ch_mult needs {} entries for f={}, got {}",
                levels,
                self.downsample_factor,
                self.ch_mult.len()
            )));
        }
        if self.base_width == 0 || self.num_res_blocks == 0 {
            return Err(Error::invalid_argument(
                "base_width and num_res_blocks must be positive",
            ));
        }
        if self.kl_weight < 0.0 {
            return Err(Error::invalid_argument("kl_weight must be >= 0"));
        }
        Ok(())
    }
}

/// Encoder output: latent plus the resolution it came from.
#[derive(Clone, Debug)]
pub struct LatentCode<T> {
    /// `(B, n_z, H/f, W/f)`.
    pub z: Tensor<T>,
    pub source_resolution: (usize, usize),
}

/// Residual block without time conditioning.
#[derive(Clone, Debug)]
struct EncBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl EncBlock {
    fn new(name: &str, cin: usize, cout: usize) -> Self {
        Self {
            gn1: GroupNorm::new(format!("{name}.gn1"), cin),
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3, 1, 1),
            gn2: GroupNorm::new(format!("{name}.gn2"), cout),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3, 1, 1),
            skip: (cin != cout).then(|| Conv2d::linear(format!("{name}.skip"), cin, cout)),
        }
    }

    fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.gn1.init(store);
        self.conv1.init(store, rng, 1.0);
        self.gn2.init(store);
        self.conv2.init(store, rng, 1.0);
        if let Some(s) = &self.skip {
            s.init(store, rng, 1.0);
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: NodeId) -> NodeId {
        let h = self.gn1.forward(tape, p, x);
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, p, h);
        let h = self.gn2.forward(tape, p, h);
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, p, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(tape, p, x),
            None => x,
        };
        tape.add(s, h)
    }

    fn param_count(&self) -> usize {
        self.gn1.param_count()
            + self.conv1.param_count()
            + self.gn2.param_count()
            + self.conv2.param_count()
            + self.skip.as_ref().map_or(0, |s| s.param_count())
    }
}

/// The encoder network.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    conv_in: Conv2d,
    levels: Vec<Vec<EncBlock>>,
    downs: Vec<Conv2d>,
    mid: EncBlock,
    out_gn: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let widths: Vec<usize> = cfg.ch_mult.iter().map(|&m| cfg.base_width * m).collect();
        let conv_in = Conv2d::new("enc.in", 3, widths[0], 3, 1, 1);
        let mut levels = Vec::new();
        let mut downs = Vec::new();
        let mut cin = widths[0];
        for (l, &cout) in widths.iter().enumerate() {
            let blocks = (0..cfg.num_res_blocks)
                .map(|b| {
                    let block = EncBlock::new(&format!("enc.l{l}.b{b}"), cin, cout);
                    cin = cout;
                    block
                })
                .collect();
            levels.push(blocks);
            if l + 1 < widths.len() {
                downs.push(Conv2d::new(format!("enc.down{l}"), cout, cout, 3, 2, 1));
            }
        }
        let top = *widths.last().unwrap();
        let mid = EncBlock::new("enc.mid", top, top);
        let out_gn = GroupNorm::new("enc.out_gn", top);
        let out_channels = match cfg.latent_mode {
            LatentMode::None => cfg.latent_channels,
            LatentMode::Kl => 2 * cfg.latent_channels,
        };
        let conv_out = Conv2d::new("enc.out", top, out_channels, 3, 1, 1);
        Ok(Self {
            cfg: cfg.clone(),
            conv_in,
            levels,
            downs,
            mid,
            out_gn,
            conv_out,
        })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.conv_in.init(&mut store, &mut rng, 1.0);
        for blocks in &self.levels {
            for b in blocks {
                b.init(&mut store, &mut rng);
            }
        }
        for d in &self.downs {
            d.init(&mut store, &mut rng, 1.0);
        }
        self.mid.init(&mut store, &mut rng);
        self.out_gn.init(&mut store);
        self.conv_out.init(&mut store, &mut rng, 1.0);
        store
    }

    pub fn param_count(&self) -> usize {
        self.conv_in.param_count()
            + self
                .levels
                .iter()
                .flat_map(|blocks| blocks.iter().map(|b| b.param_count()))
                .sum::<usize>()
            + self.downs.iter().map(|d| d.param_count()).sum::<usize>()
            + self.mid.param_count()
            + self.out_gn.param_count()
            + self.conv_out.param_count()
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4();
        if c != 3 {
            return Err(Error::invalid_argument(format!(
                "encoder expects 3 channels, got {c}"
            )));
        }
        let f = self.cfg.downsample_factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::invalid_argument(format!(
                "resolution {h}x{w} not divisible by downsample factor {f}"
            )));
        }
        Ok(())
    }

    /// Tape-level forward; output has `n_z` channels (`2 n_z` in KL mode).
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        self.check_input(tape.value(x))?;
        let mut h = self.conv_in.forward(tape, p, x);
        for (l, blocks) in self.levels.iter().enumerate() {
            for b in blocks {
                h = b.forward(tape, p, h);
            }
            if l < self.downs.len() {
                h = self.downs[l].forward(tape, p, h);
            }
        }
        h = self.mid.forward(tape, p, h);
        h = self.out_gn.forward(tape, p, h);
        h = tape.silu(h);
        Ok(self.conv_out.forward(tape, p, h))
    }

    /// Value-level encode; in KL mode returns the distribution mean
    /// (the deterministic evaluation path).
    pub fn encode<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<LatentCode<T>> {
        let (_, _, h, w) = x.dims4();
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params);
        let xid = tape.leaf(x.clone());
        let out = self.forward(&mut tape, &bound, xid)?;
        let z_id = match self.cfg.latent_mode {
            LatentMode::None => out,
            LatentMode::Kl => tape.slice(out, 1, 0, self.cfg.latent_channels),
        };
        Ok(LatentCode {
            z: tape.value(z_id).clone(),
            source_resolution: (h, w),
        })
    }
}

/// Latent regularization, value level.
///
/// `none` is the identity with zero loss; `kl` interprets `raw` as
/// mean/log-variance halves, samples via the reparameterization trick and
/// returns the Gaussian KL (summed over latent dims, averaged over batch)
/// times `weight`.
pub fn regularize_latent<T: Scalar, R: Rng>(
    raw: &Tensor<T>,
    mode: LatentMode,
    weight: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, f64)> {
    if weight < 0.0 {
        return Err(Error::invalid_argument(
            "regularization weight must be >= 0",
        ));
    }
    match mode {
        LatentMode::None => Ok((raw.clone(), 0.0)),
        LatentMode::Kl => {
            let (b, c2, h, w) = raw.dims4();
            if c2 % 2 != 0 {
                return Err(Error::invalid_argument(
                    "kl mode needs mean/logvar channel halves",
                ));
            }
            let c = c2 / 2;
            let mut z = Tensor::zeros(&[b, c, h, w]);
            let mut kl_total = 0.0f64;
            let noise: Tensor<T> = Tensor::randn(&[b, c, h, w], rng);
            for bi in 0..b {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            let mean = raw.at4(bi, ci, hi, wi).to_f64_();
                            let logvar = raw.at4(bi, c + ci, hi, wi).to_f64_();
                            let std = (0.5 * logvar).exp();
                            let xi = noise.at4(bi, ci, hi, wi).to_f64_();
                            z.set4(bi, ci, hi, wi, T::of_f64(mean + std * xi));
                            kl_total += 0.5 * (mean * mean + logvar.exp() - 1.0 - logvar);
                        }
                    }
                }
            }
            Ok((z, weight * kl_total / b as f64))
        }
    }
}
