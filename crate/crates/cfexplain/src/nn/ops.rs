//! Functional array ops shared by the layers: im2col lowering, activations,
//! pooling, resampling, feature-wise modulation, and embeddings.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis, Zip};

/// Output spatial size of a conv with the given geometry.
pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Transposed im2col: returns `[C*k*k, N*OH*OW]` so that
/// `weight [OC, C*k*k] . cols` is a single GEMM.
pub fn im2col(x: &ArrayView4<f32>, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let m = n * oh * ow;
    let mut cols = Array2::<f32>::zeros((c * k * k, m));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let cs = cols.as_slice_mut().unwrap();

    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out_base = row * m;
                for ni in 0..n {
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        let col0 = (ni * oh + oy) * ow;
                        if iy < pad || iy >= h + pad {
                            continue; // zero padding row
                        }
                        let iy = iy - pad;
                        let src_base = ((ni * c + ci) * h + iy) * w;
                        if stride == 1 {
                            // contiguous run, clipped at the padded borders
                            let ox_lo = pad.saturating_sub(kx);
                            let ox_hi = (w + pad - kx).min(ow);
                            if ox_lo < ox_hi {
                                let src0 = src_base + ox_lo + kx - pad;
                                let dst0 = out_base + col0 + ox_lo;
                                let len = ox_hi - ox_lo;
                                cs[dst0..dst0 + len]
                                    .copy_from_slice(&xs[src0..src0 + len]);
                            }
                        } else {
                            for ox in 0..ow {
                                let ix = ox * stride + kx;
                                if ix < pad || ix >= w + pad {
                                    continue;
                                }
                                cs[out_base + col0 + ox] = xs[src_base + ix - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`].
pub fn col2im(
    cols: &ArrayView2<f32>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let oh = conv_out_size(h, k, stride, pad);
    let ow = conv_out_size(w, k, stride, pad);
    let m = n * oh * ow;
    let mut x = Array4::<f32>::zeros((n, c, h, w));
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let xs = x.as_slice_mut().unwrap();

    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let in_base = row * m;
                for ni in 0..n {
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let col0 = (ni * oh + oy) * ow;
                        let dst_base = ((ni * c + ci) * h + iy) * w;
                        for ox in 0..ow {
                            let ix = ox * stride + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            xs[dst_base + ix - pad] += cs[in_base + col0 + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Permute `[N, C, OH, OW]` into the GEMM-facing `[C, N*OH*OW]` layout.
pub fn nchw_to_mat(y: &ArrayView4<f32>) -> Array2<f32> {
    let (n, c, oh, ow) = y.dim();
    let hw = oh * ow;
    let mut out = Array2::<f32>::zeros((c, n * hw));
    let ys = y.as_standard_layout();
    let ys = ys.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for ci in 0..c {
        for ni in 0..n {
            let src = ((ni * c + ci) * hw)..((ni * c + ci) * hw + hw);
            let dst = (ci * n * hw + ni * hw)..(ci * n * hw + ni * hw + hw);
            os[dst].copy_from_slice(&ys[src]);
        }
    }
    out
}

/// Inverse of [`nchw_to_mat`], optionally adding a per-channel bias.
pub fn mat_to_nchw(m: &ArrayView2<f32>, n: usize, oh: usize, ow: usize, bias: Option<&Array1<f32>>) -> Array4<f32> {
    let c = m.dim().0;
    let hw = oh * ow;
    let mut out = Array4::<f32>::zeros((n, c, oh, ow));
    let ms = m.as_standard_layout();
    let ms = ms.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let b = bias.map_or(0.0, |b| b[ci]);
            let src = &ms[(ci * n * hw + ni * hw)..(ci * n * hw + ni * hw + hw)];
            let dst = &mut os[((ni * c + ci) * hw)..((ni * c + ci) * hw + hw)];
            if b == 0.0 {
                dst.copy_from_slice(src);
            } else {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
    }
    out
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU activation `x * sigmoid(x)`.
pub fn silu<D: ndarray::Dimension>(x: &ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of SiLU given the forward input.
pub fn silu_backward<D: ndarray::Dimension>(
    x: &ndarray::Array<f32, D>,
    gy: &ndarray::Array<f32, D>,
) -> ndarray::Array<f32, D> {
    let mut gx = gy.clone();
    Zip::from(&mut gx).and(x).for_each(|g, &v| {
        let s = sigmoid(v);
        *g *= s * (1.0 + v * (1.0 - s));
    });
    gx
}

/// Mean over the spatial dims: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(x: &ArrayView4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut out = Array2::<f32>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = 0.0f32;
            for v in x.index_axis(Axis(0), ni).index_axis(Axis(0), ci) {
                acc += v;
            }
            out[[ni, ci]] = acc * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward(gy: &ArrayView2<f32>, h: usize, w: usize) -> Array4<f32> {
    let (n, c) = gy.dim();
    let scale = 1.0 / (h * w) as f32;
    let mut gx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            gx.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(gy[[ni, ci]] * scale);
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(x: &ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x[[ni, ci, iy, ix]];
                    y[[ni, ci, 2 * iy, 2 * ix]] = v;
                    y[[ni, ci, 2 * iy, 2 * ix + 1]] = v;
                    y[[ni, ci, 2 * iy + 1, 2 * ix]] = v;
                    y[[ni, ci, 2 * iy + 1, 2 * ix + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward(gy: &ArrayView4<f32>) -> Array4<f32> {
    let (n, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    gx[[ni, ci, iy, ix]] = gy[[ni, ci, 2 * iy, 2 * ix]]
                        + gy[[ni, ci, 2 * iy, 2 * ix + 1]]
                        + gy[[ni, ci, 2 * iy + 1, 2 * ix]]
                        + gy[[ni, ci, 2 * iy + 1, 2 * ix + 1]];
                }
            }
        }
    }
    gx
}

/// Concatenate two feature maps along the channel axis.
pub fn concat_channels(a: &ArrayView4<f32>, b: &ArrayView4<f32>) -> Array4<f32> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("channel concat")
}

/// Split a gradient back into the two channel blocks of a concat.
pub fn split_channels(gy: &ArrayView4<f32>, c_first: usize) -> (Array4<f32>, Array4<f32>) {
    let a = gy.slice(ndarray::s![.., ..c_first, .., ..]).to_owned();
    let b = gy.slice(ndarray::s![.., c_first.., .., ..]).to_owned();
    (a, b)
}

/// Feature-wise affine modulation `y = x * (1 + scale) + shift`
/// with per-(sample, channel) parameters.
pub fn scale_shift(x: &ArrayView4<f32>, scale: &ArrayView2<f32>, shift: &ArrayView2<f32>) -> Array4<f32> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let s = 1.0 + scale[[ni, ci]];
            let t = shift[[ni, ci]];
            Zip::from(y.index_axis_mut(Axis(0), ni).index_axis_mut(Axis(0), ci))
                .and(x.index_axis(Axis(0), ni).index_axis(Axis(0), ci))
                .for_each(|yo, &xi| *yo = xi * s + t);
        }
    }
    y
}

/// Backward of [`scale_shift`]: returns `(gx, gscale, gshift)`.
pub fn scale_shift_backward(
    x: &ArrayView4<f32>,
    scale: &ArrayView2<f32>,
    gy: &ArrayView4<f32>,
) -> (Array4<f32>, Array2<f32>, Array2<f32>) {
    let (n, c, h, w) = x.dim();
    let mut gx = Array4::<f32>::zeros((n, c, h, w));
    let mut gs = Array2::<f32>::zeros((n, c));
    let mut gt = Array2::<f32>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let s = 1.0 + scale[[ni, ci]];
            let mut acc_s = 0.0f32;
            let mut acc_t = 0.0f32;
            let xs = x.index_axis(Axis(0), ni);
            let xs = xs.index_axis(Axis(0), ci);
            let gys = gy.index_axis(Axis(0), ni);
            let gys = gys.index_axis(Axis(0), ci);
            let mut gxs = gx.index_axis_mut(Axis(0), ni);
            let mut gxs = gxs.index_axis_mut(Axis(0), ci);
            for iy in 0..h {
                for ix in 0..w {
                    let g = gys[[iy, ix]];
                    let xv = xs[[iy, ix]];
                    gxs[[iy, ix]] = g * s;
                    acc_s += g * xv;
                    acc_t += g;
                }
            }
            gs[[ni, ci]] = acc_s;
            gt[[ni, ci]] = acc_t;
        }
    }
    (gx, gs, gt)
}

/// Sinusoidal timestep embedding, `[N, dim]` with sin/cos halves.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Array2<f32> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array2::<f32>::zeros((ts.len(), dim));
    for (ni, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[[ni, i]] = arg.sin() as f32;
            out[[ni, half + i]] = arg.cos() as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen::<f32>() - 0.5)
    }

    #[test]
    fn im2col_matches_naive_gather() {
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let x = rand4((2, 3, 6, 6), 7);
            let k = 3;
            let cols = im2col(&x.view(), k, stride, pad);
            let oh = conv_out_size(6, k, stride, pad);
            let ow = conv_out_size(6, k, stride, pad);
            for ni in 0..2 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let col = (ni * oh + oy) * ow + ox;
                        for ci in 0..3 {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let row = (ci * k + ky) * k + kx;
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    let want = if iy >= 0 && iy < 6 && ix >= 0 && ix < 6 {
                                        x[[ni, ci, iy as usize, ix as usize]]
                                    } else {
                                        0.0
                                    };
                                    assert_eq!(cols[[row, col]], want, "s{stride} p{pad}");
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random c: the pair is adjoint.
        let x = rand4((2, 2, 5, 5), 3);
        for (stride, pad) in [(1, 1), (2, 1)] {
            let cols = im2col(&x.view(), 3, stride, pad);
            let c = {
                let mut rng = ChaCha20Rng::seed_from_u64(9);
                cols.mapv(|_| rng.gen::<f32>() - 0.5)
            };
            let lhs: f64 = cols
                .iter()
                .zip(c.iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum();
            let back = col2im(&c.view(), 2, 2, 5, 5, 3, stride, pad);
            let rhs: f64 = x
                .iter()
                .zip(back.iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum();
            assert!((lhs - rhs).abs() < 1e-4, "adjoint: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn mat_roundtrip() {
        let y = rand4((3, 4, 2, 2), 5);
        let m = nchw_to_mat(&y.view());
        let back = mat_to_nchw(&m.view(), 3, 2, 2, None);
        assert_eq!(y, back);
    }

    #[test]
    fn upsample_shapes_and_adjoint() {
        let x = rand4((1, 2, 3, 3), 1);
        let y = upsample_nearest2(&x.view());
        assert_eq!(y.dim(), (1, 2, 6, 6));
        assert_eq!(y[[0, 1, 4, 5]], x[[0, 1, 2, 2]]);
        let g = rand4((1, 2, 6, 6), 2);
        let gx = upsample_nearest2_backward(&g.view());
        let lhs: f32 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(gx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3);
    }

    #[test]
    fn timestep_embedding_basic() {
        let e = timestep_embedding(&[0, 10], 8);
        assert_eq!(e.dim(), (2, 8));
        // t = 0: all sines 0, all cosines 1
        for i in 0..4 {
            assert_eq!(e[[0, i]], 0.0);
            assert_eq!(e[[0, 4 + i]], 1.0);
        }
        assert!(e.iter().all(|v| v.is_finite()));
    }
}
