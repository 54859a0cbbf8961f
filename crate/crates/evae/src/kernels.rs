//! Value-level compute kernels behind the autodiff ops.
//!
//! Loops are arranged so the innermost dimension walks contiguous memory
//! (vectorizes) and rayon splits work over disjoint output chunks, which
//! keeps results bit-deterministic regardless of thread count.

use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[inline]
fn valid_range(
    out_len: usize,
    in_len: usize,
    k_off: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    // indices o with 0 <= o*stride + k_off - pad < in_len
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi_excl = {
        let max_i = in_len + pad;
        if max_i <= k_off {
            0
        } else {
            (((max_i - k_off) - 1) / stride + 1).min(out_len)
        }
    };
    (lo.min(out_len), hi_excl)
}

/// Cross-correlation: `x (N,Ci,H,W) * w (Co,Ci,kh,kw) -> (N,Co,Ho,Wo)`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    conv2d_with_bias(x, w, None, stride, pad)
}

/// Convolution with the per-channel bias folded into the accumulator init.
pub fn conv2d_with_bias<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4();
    let (co, ci_w, kh, kw) = w.dims4();
    assert_eq!(ci, ci_w, "conv2d channel mismatch");
    if let Some(b) = bias {
        assert_eq!(b.len(), co, "conv bias must have one entry per out channel");
    }
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wd, kw, stride, pad);
    let mut y = Tensor::zeros(&[n, co, ho, wo]);
    let xs = x.data();
    let ws = w.data();
    let bs = bias.map(|b| b.data());
    let work = n * co * ci * kh * kw * ho * wo;
    let sample = |ni: usize, sample_out: &mut [T]| {
        for (coi, out) in sample_out.chunks_mut(ho * wo).enumerate() {
            if let Some(b) = bs {
                out.fill(b[coi]);
            }
            for cii in 0..ci {
                let x_plane = &xs[(ni * ci + cii) * h * wd..(ni * ci + cii + 1) * h * wd];
                let w_plane = &ws[(coi * ci + cii) * kh * kw..(coi * ci + cii + 1) * kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, stride, pad);
                    for kx in 0..kw {
                        let wv = w_plane[ky * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(wo, wd, kx, stride, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = &x_plane[iy * wd..(iy + 1) * wd];
                            let orow = &mut out[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let xseg = &xrow[ix0..ix0 + (ox_hi - ox_lo)];
                                for (o, &xv) in orow[ox_lo..ox_hi].iter_mut().zip(xseg) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    orow[ox] += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if work < 400_000 {
        for (ni, sample_out) in y.data_mut().chunks_mut(co * ho * wo).enumerate() {
            sample(ni, sample_out);
        }
    } else {
        y.data_mut()
            .par_chunks_mut(co * ho * wo)
            .enumerate()
            .for_each(|(ni, sample_out)| sample(ni, sample_out));
    }
    y
}

/// Adjoint of [`conv2d`] w.r.t. its input: scatters `g (N,Co,Ho,Wo)` back to
/// the input shape `(N,Ci,H,W)`.
pub fn conv2d_input_grad<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    in_hw: (usize, usize),
) -> Tensor<T> {
    let (n, co, ho, wo) = g.dims4();
    let (co_w, ci, kh, kw) = w.dims4();
    assert_eq!(co, co_w, "conv2d_input_grad channel mismatch");
    let (h, wd) = in_hw;
    let mut gx = Tensor::zeros(&[n, ci, h, wd]);
    let gs = g.data();
    let ws = w.data();
    let work = n * co * ci * kh * kw * ho * wo;
    let sample = |ni: usize, sample_out: &mut [T]| {
        for (cii, out) in sample_out.chunks_mut(h * wd).enumerate() {
            for coi in 0..co {
                let g_plane = &gs[(ni * co + coi) * ho * wo..(ni * co + coi + 1) * ho * wo];
                let w_plane = &ws[(coi * ci + cii) * kh * kw..(coi * ci + cii + 1) * kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, stride, pad);
                    for kx in 0..kw {
                        let wv = w_plane[ky * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(wo, wd, kx, stride, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &g_plane[oy * wo..(oy + 1) * wo];
                            let xrow = &mut out[iy * wd..(iy + 1) * wd];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let xseg = &mut xrow[ix0..ix0 + (ox_hi - ox_lo)];
                                for (xv, &gv) in xseg.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                    *xv += wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    xrow[ix] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    if work < 400_000 {
        for (ni, sample_out) in gx.data_mut().chunks_mut(ci * h * wd).enumerate() {
            sample(ni, sample_out);
        }
    } else {
        gx.data_mut()
            .par_chunks_mut(ci * h * wd)
            .enumerate()
            .for_each(|(ni, sample_out)| sample(ni, sample_out));
    }
    gx
}

/// Adjoint of [`conv2d`] w.r.t. its weights: correlates `x` with `g` into
/// `(Co,Ci,kh,kw)`.
pub fn conv2d_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    k_hw: (usize, usize),
) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4();
    let (n_g, co, ho, wo) = g.dims4();
    assert_eq!(n, n_g, "conv2d_weight_grad batch mismatch");
    let (kh, kw) = k_hw;
    let mut gw = Tensor::zeros(&[co, ci, kh, kw]);
    let xs = x.data();
    let gs = g.data();
    let work = n * co * ci * kh * kw * ho * wo;
    let per_out_channel = |coi: usize, out: &mut [T]| {
        for ni in 0..n {
            let g_plane = &gs[(ni * co + coi) * ho * wo..(ni * co + coi + 1) * ho * wo];
            for cii in 0..ci {
                let x_plane = &xs[(ni * ci + cii) * h * wd..(ni * ci + cii + 1) * h * wd];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ho, h, ky, stride, pad);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_range(wo, wd, kx, stride, pad);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &g_plane[oy * wo..(oy + 1) * wo];
                            let xrow = &x_plane[iy * wd..(iy + 1) * wd];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let xseg = &xrow[ix0..ix0 + (ox_hi - ox_lo)];
                                for (&gv, &xv) in grow[ox_lo..ox_hi].iter().zip(xseg) {
                                    acc += gv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    acc += grow[ox] * xrow[ix];
                                }
                            }
                        }
                        out[(cii * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    };
    if work < 400_000 {
        for (coi, out) in gw.data_mut().chunks_mut(ci * kh * kw).enumerate() {
            per_out_channel(coi, out);
        }
    } else {
        gw.data_mut()
            .par_chunks_mut(ci * kh * kw)
            .enumerate()
            .for_each(|(coi, out)| per_out_channel(coi, out));
    }
    gw
}

/// Per-channel affine `y = x * scale + shift`; factors are `(1|N, C, 1, 1)`.
pub fn channel_affine<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: Option<&Tensor<T>>,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (sn, sc, ..) = scale.dims4();
    assert_eq!(sc, c, "channel_affine channel mismatch");
    assert!(sn == 1 || sn == n, "channel_affine batch mismatch");
    if let Some(b) = shift {
        assert_eq!(b.shape(), scale.shape(), "scale/shift shapes must match");
    }
    let plane = h * w;
    let mut y = Tensor::zeros(&[n, c, h, w]);
    let xs = x.data();
    let ss = scale.data();
    let bs = shift.map(|b| b.data());
    for (idx, out) in y.data_mut().chunks_mut(plane).enumerate() {
        let ni = idx / c;
        let ci = idx % c;
        let fi = if sn == 1 { ci } else { ni * c + ci };
        let sv = ss[fi];
        let bv = bs.map_or(T::zero(), |b| b[fi]);
        let xrow = &xs[idx * plane..(idx + 1) * plane];
        for (o, &xv) in out.iter_mut().zip(xrow) {
            *o = xv * sv + bv;
        }
    }
    y
}

/// Nearest-neighbor upsampling by an integer factor; each source pixel
/// becomes a `factor x factor` block.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (h * factor, w * factor);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let xs = x.data();
    y.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(plane, out)| {
            let x_plane = &xs[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                let xrow = &x_plane[(oy / factor) * w..(oy / factor + 1) * w];
                let orow = &mut out[oy * wo..(oy + 1) * wo];
                for (ox, o) in orow.iter_mut().enumerate() {
                    *o = xrow[ox / factor];
                }
            }
        });
    y
}

/// Sums `factor x factor` blocks; the adjoint of [`upsample_nearest`].
pub fn sum_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(
        h % factor == 0 && w % factor == 0,
        "sum_pool needs divisible dims"
    );
    let (ho, wo) = (h / factor, w / factor);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let xs = x.data();
    y.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(plane, out)| {
            let x_plane = &xs[plane * h * w..(plane + 1) * h * w];
            for iy in 0..h {
                let xrow = &x_plane[iy * w..(iy + 1) * w];
                let orow = &mut out[(iy / factor) * wo..(iy / factor + 1) * wo];
                for (ix, &xv) in xrow.iter().enumerate() {
                    orow[ix / factor] += xv;
                }
            }
        });
    y
}

fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    // (lo, hi, weight of hi) per output index, align_corners = false
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Bilinear resize to `(oh, ow)`; a fixed linear map, so it has an exact
/// adjoint ([`bilinear_resize_adjoint`]).
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let ytaps = bilinear_taps(oh, h);
    let xtaps = bilinear_taps(ow, w);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let xs = x.data();
    y.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane, out)| {
            let xp = &xs[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, wy)) in ytaps.iter().enumerate() {
                let r0 = &xp[y0 * w..(y0 + 1) * w];
                let r1 = &xp[y1 * w..(y1 + 1) * w];
                let orow = &mut out[oy * ow..(oy + 1) * ow];
                for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                    let top = r0[x0].to_f64_() * (1.0 - wx) + r0[x1].to_f64_() * wx;
                    let bot = r1[x0].to_f64_() * (1.0 - wx) + r1[x1].to_f64_() * wx;
                    orow[ox] = T::of_f64(top * (1.0 - wy) + bot * wy);
                }
            }
        });
    y
}

/// Adjoint of [`bilinear_resize`]: scatters gradients back to `(ih, iw)`.
pub fn bilinear_resize_adjoint<T: Scalar>(g: &Tensor<T>, ih: usize, iw: usize) -> Tensor<T> {
    let (n, c, oh, ow) = g.dims4();
    let ytaps = bilinear_taps(oh, ih);
    let xtaps = bilinear_taps(ow, iw);
    let mut gx = Tensor::zeros(&[n, c, ih, iw]);
    let gs = g.data();
    gx.data_mut()
        .par_chunks_mut(ih * iw)
        .enumerate()
        .for_each(|(plane, out)| {
            let gp = &gs[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, wy)) in ytaps.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                    let gv = gp[oy * ow + ox].to_f64_();
                    out[y0 * iw + x0] += T::of_f64(gv * (1.0 - wy) * (1.0 - wx));
                    out[y0 * iw + x1] += T::of_f64(gv * (1.0 - wy) * wx);
                    out[y1 * iw + x0] += T::of_f64(gv * wy * (1.0 - wx));
                    out[y1 * iw + x1] += T::of_f64(gv * wy * wx);
                }
            }
        });
    gx
}

/// Batched matmul: `(B,M,K) x (B,K,N) -> (B,M,N)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ba, m, k) = {
        let s = a.shape();
        assert_eq!(s.len(), 3, "matmul lhs must be rank-3");
        (s[0], s[1], s[2])
    };
    let (bb, k2, nn) = {
        let s = b.shape();
        assert_eq!(s.len(), 3, "matmul rhs must be rank-3");
        (s[0], s[1], s[2])
    };
    assert_eq!(ba, bb, "matmul batch mismatch");
    assert_eq!(k, k2, "matmul inner-dim mismatch");
    let mut y = Tensor::zeros(&[ba, m, nn]);
    let asd = a.data();
    let bsd = b.data();
    let per_matrix = |bi: usize, out: &mut [T]| {
        let bmat = &bsd[bi * k * nn..(bi + 1) * k * nn];
        for (mi, orow) in out.chunks_mut(nn).enumerate() {
            let arow = &asd[(bi * m + mi) * k..(bi * m + mi + 1) * k];
            for (ki, &av) in arow.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let brow = &bmat[ki * nn..(ki + 1) * nn];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if ba * m * k * nn < 400_000 {
        for (bi, out) in y.data_mut().chunks_mut(m * nn).enumerate() {
            per_matrix(bi, out);
        }
    } else {
        y.data_mut()
            .par_chunks_mut(m * nn)
            .enumerate()
            .for_each(|(bi, out)| per_matrix(bi, out));
    }
    y
}

/// Permute tensor axes (generic rank).
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    assert_eq!(perm.len(), rank);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = Tensor::zeros(&out_shape);
    let src = x.data();
    let dst = out.data_mut();
    // walk output linearly, computing the source index from permuted coords
    let mut coords = vec![0usize; rank];
    for o in dst.iter_mut() {
        let mut src_idx = 0;
        for (d, &c) in coords.iter().enumerate() {
            src_idx += c * in_strides[perm[d]];
        }
        *o = src[src_idx];
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv2d_naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let ho = conv_out_len(h, kh, stride, pad);
        let wo = conv_out_len(wd, kw, stride, pad);
        let mut y = Tensor::zeros(&[n, co, ho, wo]);
        for ni in 0..n {
            for coi in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for cii in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x.at4(ni, cii, iy as usize, ix as usize)
                                            * w.at4(coi, cii, ky, kx);
                                    }
                                }
                            }
                        }
                        y.set4(ni, coi, oy, ox, acc);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (2, 1, 4), (1, 0, 1)] {
            let x: Tensor<f64> = Tensor::randn(&[2, 3, 9, 7], &mut rng);
            let w: Tensor<f64> = Tensor::randn(&[4, 3, k, k], &mut rng);
            let fast = conv2d(&x, &w, stride, pad);
            let slow = conv2d_naive(&x, &w, stride, pad);
            let diff = fast.zip_map(&slow, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(diff < 1e-12, "stride={stride} pad={pad} k={k} diff={diff}");
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <conv(x,w), g> == <x, input_grad(g,w)> == <w, weight_grad(x,g)>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
            let x: Tensor<f64> = Tensor::randn(&[2, 3, 8, 8], &mut rng);
            let w: Tensor<f64> = Tensor::randn(&[5, 3, 3, 3], &mut rng);
            let y = conv2d(&x, &w, stride, pad);
            let g: Tensor<f64> = Tensor::randn(y.shape(), &mut rng);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let gx = conv2d_input_grad(&g, &w, stride, pad, (8, 8));
            let mid: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
            let gw = conv2d_weight_grad(&x, &g, stride, pad, (3, 3));
            let rhs: f64 = w.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - mid).abs() < 1e-10, "{lhs} vs {mid}");
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn upsample_and_sum_pool_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f64> = Tensor::randn(&[1, 2, 3, 3], &mut rng);
        let y = upsample_nearest(&x, 2);
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        assert_eq!(y.at4(0, 0, 1, 1), x.at4(0, 0, 0, 0));
        let g: Tensor<f64> = Tensor::randn(&[1, 2, 6, 6], &mut rng);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gp = sum_pool(&g, 2);
        let rhs: f64 = x.data().iter().zip(gp.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_pair_is_adjoint_and_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = Tensor::randn(&[2, 3, 5, 4], &mut rng);
        for &(oh, ow) in &[(10usize, 8usize), (3, 2), (5, 4)] {
            let y = bilinear_resize(&x, oh, ow);
            let g: Tensor<f64> = Tensor::randn(&[2, 3, oh, ow], &mut rng);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let gx = bilinear_resize_adjoint(&g, 5, 4);
            let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{oh}x{ow}: {lhs} vs {rhs}");
        }
        // constant input stays constant
        let c = Tensor::full(&[1, 1, 3, 3], 2.5);
        let up = bilinear_resize(&c, 6, 6);
        assert!(up.data().iter().all(|&v| (v - 2.5f64).abs() < 1e-12));
    }

    #[test]
    fn matmul_and_permute() {
        let a = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![1, 3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        let at = permute(&a, &[0, 2, 1]);
        assert_eq!(at.shape(), &[1, 3, 2]);
        assert_eq!(at.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
