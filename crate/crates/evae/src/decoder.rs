//! The conditional diffusion decoder: a UNet predicting velocity from the
//! normalized trajectory point, the time and the encoder latent.
//!
//! Conditioning is channel concatenation by default (latents upsampled with
//! nearest-neighbor interpolation to the image resolution); AdaGN injection
//! with bilinear-resized latents is the alternative mode.

use crate::autodiff::{NodeId, Tape};
use crate::encoder::LatentCode;
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{
    sinusoidal_embedding, AttentionBlock, Bound, Conv2d, EmbedMlp, GroupNorm, ParamStore, ResBlock,
};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Decoder size variants with fixed width/depth bindings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderVariant {
    B,
    M,
    L,
    XL,
    H,
}

impl DecoderVariant {
    /// `(channel_dim, depth_multipliers, blocks_per_resolution)` binding.
    pub fn binding(self) -> (usize, [usize; 5], usize) {
        match self {
            DecoderVariant::B => (64, [1, 1, 2, 2, 4], 2),
            DecoderVariant::M => (96, [1, 1, 2, 2, 4], 2),
            DecoderVariant::L => (128, [1, 1, 2, 2, 4], 2),
            DecoderVariant::XL => (128, [1, 1, 2, 2, 4], 4),
            DecoderVariant::H => (256, [1, 1, 2, 2, 4], 2),
        }
    }
}

/// How the latent reaches the UNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    ChannelConcat,
    Adagn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub variant: DecoderVariant,
    /// Must equal the variant binding (Table of variants).
    pub channel_dim: usize,
    pub depth_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    pub conditioning: Conditioning,
    /// Desk-scale width multiplier applied at construction; widths are
    /// rounded to multiples of 4. 1.0 reproduces the variant as bound.
    pub width_scale: f64,
    /// Level indices (0 = full resolution) that get self-attention.
    /// Empty means "deepest level only".
    pub attention_levels: Vec<usize>,
    pub mid_attention: bool,
}

impl DecoderConfig {
    pub fn variant(v: DecoderVariant) -> Self {
        let (ch, mult, blocks) = v.binding();
        Self {
            variant: v,
            channel_dim: ch,
            depth_multipliers: mult.to_vec(),
            blocks_per_resolution: blocks,
            conditioning: Conditioning::ChannelConcat,
            width_scale: 1.0,
            attention_levels: Vec::new(),
            mid_attention: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (ch, mult, blocks) = self.variant.binding();
        if self.channel_dim != ch
            || self.depth_multipliers != mult
            || self.blocks_per_resolution != blocks
        {
            return Err(Error::invalid_argument(format!(
                "variant {:?} binds (channel_dim, multipliers, blocks) = ({ch}, {mult:?}, {blocks})",
                self.variant
            )));
        }
        if self.width_scale <= 0.0 {
            return Err(Error::invalid_argument("width_scale must be > 0"));
        }
        Ok(())
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::variant(DecoderVariant::B)
    }
}

/// A velocity prediction plus the time features that conditioned it.
#[derive(Clone, Debug)]
pub struct VelocityPrediction<T> {
    pub v: Tensor<T>,
    pub t_embedding: Tensor<T>,
}

/// Nearest-neighbor upsampling of a latent to the image resolution
/// (value level; the tape op is used inside the decoder forward).
pub fn upsample_condition<T: Scalar>(
    z: &LatentCode<T>,
    target_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let (_, _, zh, zw) = z.z.dims4();
    let (th, tw) = target_hw;
    if th % zh != 0 || tw % zw != 0 || th / zh != tw / zw || th / zh == 0 {
        return Err(Error::invalid_argument(format!(
            "target {th}x{tw} is not an integer multiple of latent {zh}x{zw}"
        )));
    }
    let factor = th / zh;
    Ok(if factor == 1 {
        z.z.clone()
    } else {
        kernels::upsample_nearest(&z.z, factor)
    })
}

struct UpBlock {
    block: ResBlock,
    zproj: Option<Conv2d>,
}

struct LevelBlocks {
    down: Vec<(ResBlock, Option<Conv2d>)>,
    up: Vec<UpBlock>,
    attn_down: Vec<AttentionBlock>,
    attn_up: Vec<AttentionBlock>,
}

/// The UNet.
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub latent_channels: usize,
    widths: Vec<usize>,
    attention: Vec<bool>,
    time_mlp: EmbedMlp,
    conv_in: Conv2d,
    levels: Vec<LevelBlocks>,
    downs: Vec<Conv2d>,
    ups: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: Option<AttentionBlock>,
    mid2: ResBlock,
    mid_zproj: Option<Conv2d>,
    out_gn: GroupNorm,
    conv_out: Conv2d,
    /// Whether time enters via scale-shift (ADM) or additively (DDPM UNet).
    pub scale_shift: bool,
}

fn round_to_multiple_of_4(x: f64) -> usize {
    (((x / 4.0).round() as usize) * 4).max(4)
}

impl Decoder {
    /// Builds the UNet for a given latent width and training resolution.
    ///
    /// Depth multipliers beyond what the resolution supports (bottleneck
    /// below 8x8) are truncated; the full five-level table applies from
    /// 128x128 upward.
    pub fn new(
        cfg: &DecoderConfig,
        latent_channels: usize,
        train_resolution: usize,
        scale_shift: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        if train_resolution < 8 || train_resolution % 4 != 0 {
            return Err(Error::invalid_argument(format!(
                "train resolution {train_resolution} too small for the UNet"
            )));
        }
        let feasible = ((train_resolution / 8) as f64).log2().floor() as usize + 1;
        let num_levels = cfg.depth_multipliers.len().min(feasible.max(1));
        let stride_total = 1usize << (num_levels - 1);
        if train_resolution % stride_total != 0 {
            return Err(Error::invalid_argument(format!(
                "train resolution {train_resolution} not divisible by UNet stride {stride_total}"
            )));
        }
        let widths: Vec<usize> = cfg.depth_multipliers[..num_levels]
            .iter()
            .map(|&m| round_to_multiple_of_4(cfg.channel_dim as f64 * m as f64 * cfg.width_scale))
            .collect();
        let mut attention = vec![false; num_levels];
        if cfg.attention_levels.is_empty() {
            attention[num_levels - 1] = true;
        } else {
            for &l in &cfg.attention_levels {
                if l >= num_levels {
                    return Err(Error::invalid_argument(format!(
                        "attention level {l} out of range for {num_levels} levels"
                    )));
                }
                attention[l] = true;
            }
        }

        let ch0 = widths[0];
        let emb_dim = 4 * ch0;
        let time_mlp = EmbedMlp::new("dec.time", ch0, emb_dim);
        let adagn = cfg.conditioning == Conditioning::Adagn;
        let cin = if adagn { 3 } else { 3 + latent_channels };
        let conv_in = Conv2d::new("dec.in", cin, ch0, 3, 1, 1);

        let blocks = cfg.blocks_per_resolution;
        let mut levels = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();

        // simulate the skip stack to derive up-path input channels
        let mut stack: Vec<usize> = vec![ch0];
        let mut cur = ch0;
        for (l, &cw) in widths.iter().enumerate() {
            let mut down = Vec::new();
            let mut attn_down = Vec::new();
            for b in 0..blocks {
                let rb = ResBlock::new(&format!("dec.d{l}.b{b}"), cur, cw, emb_dim, scale_shift);
                let zp = adagn.then(|| {
                    Conv2d::linear(format!("dec.d{l}.b{b}.zmod"), latent_channels, 2 * cw)
                });
                down.push((rb, zp));
                cur = cw;
                stack.push(cur);
                if attention[l] {
                    attn_down.push(AttentionBlock::new(&format!("dec.d{l}.b{b}.attn"), cw));
                }
            }
            if l + 1 < num_levels {
                downs.push(Conv2d::new(format!("dec.down{l}"), cw, cw, 3, 2, 1));
                stack.push(cw);
            }
            levels.push(LevelBlocks {
                down,
                up: Vec::new(),
                attn_down,
                attn_up: Vec::new(),
            });
        }

        let top = *widths.last().unwrap();
        let mid1 = ResBlock::new("dec.mid1", top, top, emb_dim, scale_shift);
        let mid_attn = cfg
            .mid_attention
            .then(|| AttentionBlock::new("dec.mid_attn", top));
        let mid2 = ResBlock::new("dec.mid2", top, top, emb_dim, scale_shift);
        let mid_zproj = adagn.then(|| Conv2d::linear("dec.mid.zmod", latent_channels, 2 * top));

        cur = top;
        for l in (0..num_levels).rev() {
            let cw = widths[l];
            for b in 0..blocks + 1 {
                let skip_ch = stack.pop().expect("skip stack underflow");
                let rb = ResBlock::new(
                    &format!("dec.u{l}.b{b}"),
                    cur + skip_ch,
                    cw,
                    emb_dim,
                    scale_shift,
                );
                let zp = adagn.then(|| {
                    Conv2d::linear(format!("dec.u{l}.b{b}.zmod"), latent_channels, 2 * cw)
                });
                levels[l].up.push(UpBlock {
                    block: rb,
                    zproj: zp,
                });
                cur = cw;
                if attention[l] {
                    levels[l]
                        .attn_up
                        .push(AttentionBlock::new(&format!("dec.u{l}.b{b}.attn"), cw));
                }
            }
            if l > 0 {
                ups.push(Conv2d::new(format!("dec.up{l}"), cw, cw, 3, 1, 1));
            }
        }
        assert!(stack.is_empty(), "unbalanced skip connections");
        ups.reverse(); // index by level-1

        let out_gn = GroupNorm::new("dec.out_gn", ch0);
        let conv_out = Conv2d::new("dec.out", ch0, 3, 3, 1, 1);

        Ok(Self {
            cfg: cfg.clone(),
            latent_channels,
            widths,
            attention,
            time_mlp,
            conv_in,
            levels,
            downs,
            ups,
            mid1,
            mid_attn,
            mid2,
            mid_zproj,
            out_gn,
            conv_out,
            scale_shift,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.widths.len()
    }

    /// Total spatial stride of the UNet; inputs must be divisible by it.
    pub fn stride_total(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    /// Final conv is zero-initialized so early velocity predictions are tame;
    /// `zero_init_out = false` keeps it random (used by gradient checks).
    pub fn init_params<T: Scalar>(&self, seed: u64, zero_init_out: bool) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.time_mlp.init(&mut store, &mut rng);
        self.conv_in.init(&mut store, &mut rng, 1.0);
        for level in &self.levels {
            for (rb, zp) in &level.down {
                rb.init(&mut store, &mut rng);
                if let Some(zp) = zp {
                    zp.init(&mut store, &mut rng, 1.0);
                }
            }
            for ub in &level.up {
                ub.block.init(&mut store, &mut rng);
                if let Some(zp) = &ub.zproj {
                    zp.init(&mut store, &mut rng, 1.0);
                }
            }
            for a in level.attn_down.iter().chain(&level.attn_up) {
                a.init(&mut store, &mut rng);
            }
        }
        for d in &self.downs {
            d.init(&mut store, &mut rng, 1.0);
        }
        for u in &self.ups {
            u.init(&mut store, &mut rng, 1.0);
        }
        self.mid1.init(&mut store, &mut rng);
        if let Some(a) = &self.mid_attn {
            a.init(&mut store, &mut rng);
        }
        self.mid2.init(&mut store, &mut rng);
        if let Some(zp) = &self.mid_zproj {
            zp.init(&mut store, &mut rng, 1.0);
        }
        self.out_gn.init(&mut store);
        self.conv_out
            .init(&mut store, &mut rng, if zero_init_out { 0.0 } else { 1.0 });
        store
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.time_mlp.param_count() + self.conv_in.param_count();
        for level in &self.levels {
            for (rb, zp) in &level.down {
                n += rb.param_count() + zp.as_ref().map_or(0, |z| z.param_count());
            }
            for ub in &level.up {
                n += ub.block.param_count() + ub.zproj.as_ref().map_or(0, |z| z.param_count());
            }
            for a in level.attn_down.iter().chain(&level.attn_up) {
                n += a.param_count();
            }
        }
        n += self.downs.iter().map(|d| d.param_count()).sum::<usize>();
        n += self.ups.iter().map(|u| u.param_count()).sum::<usize>();
        n += self.mid1.param_count() + self.mid2.param_count();
        n += self.mid_attn.as_ref().map_or(0, |a| a.param_count());
        n += self.mid_zproj.as_ref().map_or(0, |z| z.param_count());
        n += self.out_gn.param_count() + self.conv_out.param_count();
        n
    }

    fn z_mod<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        zproj: &Option<Conv2d>,
        z: NodeId,
        hw: (usize, usize),
    ) -> Option<NodeId> {
        zproj.as_ref().map(|proj| {
            let zshape = tape.shape(z);
            let resized = if (zshape[2], zshape[3]) == hw {
                z
            } else {
                tape.bilinear_resize(z, hw.0, hw.1)
            };
            proj.forward(tape, p, resized)
        })
    }

    /// Tape-level forward: `xt_normalized (B,3,H,W)`, per-sample times and the
    /// latent node `(B,n_z,H/f,W/f)` to a velocity `(B,3,H,W)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        xt_norm: NodeId,
        ts: &[f64],
        z: NodeId,
    ) -> Result<NodeId> {
        let (b, c, h, w) = tape.value(xt_norm).dims4();
        if c != 3 {
            return Err(Error::invalid_argument(format!(
                "decoder expects 3 image channels, got {c}"
            )));
        }
        if ts.len() != b {
            return Err(Error::invalid_argument(
                "one time per batch sample required",
            ));
        }
        let stride = self.stride_total();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::invalid_argument(format!(
                "resolution {h}x{w} not divisible by UNet stride {stride}"
            )));
        }
        let (zb, zc, zh, zw) = tape.value(z).dims4();
        if zb != b || zc != self.latent_channels {
            return Err(Error::invalid_argument(format!(
                "latent shape ({zb},{zc},..) does not match batch {b} with {} channels",
                self.latent_channels
            )));
        }

        let emb_raw = tape.leaf(sinusoidal_embedding(ts, self.widths[0]));
        let emb = self.time_mlp.forward(tape, p, emb_raw);

        let adagn = self.cfg.conditioning == Conditioning::Adagn;
        let mut hcur = if adagn {
            self.conv_in.forward(tape, p, xt_norm)
        } else {
            if h % zh != 0 || w % zw != 0 || h / zh != w / zw {
                return Err(Error::invalid_argument(format!(
                    "image {h}x{w} is not an integer multiple of latent {zh}x{zw}"
                )));
            }
            let factor = h / zh;
            let cond = if factor == 1 {
                z
            } else {
                tape.upsample_nearest(z, factor)
            };
            let stacked = tape.concat(&[xt_norm, cond], 1);
            self.conv_in.forward(tape, p, stacked)
        };

        let mut skips = vec![hcur];
        for (l, level) in self.levels.iter().enumerate() {
            for (b_i, (rb, zp)) in level.down.iter().enumerate() {
                let hw_cur = {
                    let s = tape.shape(hcur);
                    (s[2], s[3])
                };
                let zmod = self.z_mod(tape, p, zp, z, hw_cur);
                hcur = rb.forward_mod(tape, p, hcur, emb, zmod);
                if self.attention[l] {
                    hcur = level.attn_down[b_i].forward(tape, p, hcur);
                }
                skips.push(hcur);
            }
            if l < self.downs.len() {
                hcur = self.downs[l].forward(tape, p, hcur);
                skips.push(hcur);
            }
        }

        let hw_mid = {
            let s = tape.shape(hcur);
            (s[2], s[3])
        };
        let zmod = self.z_mod(tape, p, &self.mid_zproj, z, hw_mid);
        hcur = self.mid1.forward_mod(tape, p, hcur, emb, zmod);
        if let Some(a) = &self.mid_attn {
            hcur = a.forward(tape, p, hcur);
        }
        let zmod = self.z_mod(tape, p, &self.mid_zproj, z, hw_mid);
        hcur = self.mid2.forward_mod(tape, p, hcur, emb, zmod);

        for l in (0..self.levels.len()).rev() {
            let level = &self.levels[l];
            for (b_i, ub) in level.up.iter().enumerate() {
                let skip = skips.pop().expect("skip stack underflow");
                let cat = tape.concat(&[hcur, skip], 1);
                let hw_cur = {
                    let s = tape.shape(cat);
                    (s[2], s[3])
                };
                let zmod = self.z_mod(tape, p, &ub.zproj, z, hw_cur);
                hcur = ub.block.forward_mod(tape, p, cat, emb, zmod);
                if self.attention[l] {
                    hcur = level.attn_up[b_i].forward(tape, p, hcur);
                }
            }
            if l > 0 {
                hcur = tape.upsample_nearest(hcur, 2);
                hcur = self.ups[l - 1].forward(tape, p, hcur);
            }
        }
        debug_assert!(skips.is_empty());

        hcur = self.out_gn.forward(tape, p, hcur);
        hcur = tape.silu(hcur);
        Ok(self.conv_out.forward(tape, p, hcur))
    }

    /// Value-level prediction for a whole batch at one shared time.
    pub fn predict_velocity<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        xt_normalized: &Tensor<T>,
        t: f64,
        z: &LatentCode<T>,
    ) -> Result<VelocityPrediction<T>> {
        let b = xt_normalized.dims4().0;
        let ts = vec![t; b];
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params);
        let xid = tape.leaf(xt_normalized.clone());
        let zid = tape.leaf(z.z.clone());
        let v = self.forward(&mut tape, &bound, xid, &ts, zid)?;
        Ok(VelocityPrediction {
            v: tape.value(v).clone(),
            t_embedding: sinusoidal_embedding(&ts, self.widths[0]),
        })
    }
}
