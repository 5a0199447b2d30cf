//! Trainable layers with explicit forward/backward passes. Each forward
//! returns the output plus a cache owning whatever the backward needs;
//! backward consumes the cache and accumulates into the layer's `grad`s.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand_chacha::ChaCha20Rng;

use super::ops::{col2im, conv_out_size, im2col, mat_to_nchw, nchw_to_mat};
use super::{uniform_fan_in, Param};

/// 2-D convolution over NCHW tensors, lowered to a single GEMM via im2col.
pub struct Conv2d {
    pub weight: Param, // [OC, IC*k*k]
    pub bias: Param,   // [OC]
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    x: Array4<f32>,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha20Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        Conv2d {
            weight: uniform_fan_in(rng, &format!("{name}.w"), &[out_ch, fan_in], fan_in),
            bias: uniform_fan_in(rng, &format!("{name}.b"), &[out_ch], fan_in),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    /// Zeroes the parameters; used for the final output conv so the
    /// network starts as the identity contribution.
    pub fn zero_init(mut self) -> Self {
        self.weight.value.fill(0.0);
        self.bias.value.fill(0.0);
        self
    }

    pub fn forward(&self, x: Array4<f32>) -> (Array4<f32>, ConvCache) {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let oh = conv_out_size(h, self.k, self.stride, self.pad);
        let ow = conv_out_size(w, self.k, self.stride, self.pad);
        let cols = im2col(&x.view(), self.k, self.stride, self.pad);
        let w2 = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let out = w2.dot(&cols); // [OC, N*OH*OW]
        let bias = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let y = mat_to_nchw(&out.view(), n, oh, ow, Some(&bias));
        (y, ConvCache { x })
    }

    /// Accumulates parameter grads and returns the input grad.
    pub fn backward(&mut self, cache: ConvCache, gy: &ArrayView4<f32>) -> Array4<f32> {
        let (n, _c, h, w) = cache.x.dim();
        let gy_mat = nchw_to_mat(gy); // [OC, N*OH*OW]

        // bias grad: row sums
        {
            let gb = gy_mat.sum_axis(Axis(1));
            let mut b = self
                .bias
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            b += &gb;
        }

        // weight grad: gy_mat . colsᵀ (im2col recomputed from the cached input)
        let cols = im2col(&cache.x.view(), self.k, self.stride, self.pad);
        {
            let gw = gy_mat.dot(&cols.t());
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            wg += &gw;
        }

        // input grad: wᵀ . gy_mat scattered back
        let w2 = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let gcols = w2.t().dot(&gy_mat);
        col2im(&gcols.view(), n, self.in_ch, h, w, self.k, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer over `[N, IN]`.
pub struct Linear {
    pub weight: Param, // [OUT, IN]
    pub bias: Param,   // [OUT]
    pub in_dim: usize,
    pub out_dim: usize,
}

pub struct LinearCache {
    x: Array2<f32>,
}

impl Linear {
    pub fn new(rng: &mut ChaCha20Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: uniform_fan_in(rng, &format!("{name}.w"), &[out_dim, in_dim], in_dim),
            bias: uniform_fan_in(rng, &format!("{name}.b"), &[out_dim], in_dim),
            in_dim,
            out_dim,
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.fill(0.0);
        self.bias.value.fill(0.0);
        self
    }

    pub fn forward(&self, x: Array2<f32>) -> (Array2<f32>, LinearCache) {
        debug_assert_eq!(x.dim().1, self.in_dim);
        let w2 = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let mut y = x.dot(&w2.t());
        y += &b;
        (y, LinearCache { x })
    }

    pub fn backward(&mut self, cache: LinearCache, gy: &ArrayView2<f32>) -> Array2<f32> {
        {
            let gb = gy.sum_axis(Axis(0));
            let mut b = self
                .bias
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            b += &gb;
        }
        {
            let gw = gy.t().dot(&cache.x);
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            wg += &gw;
        }
        let w2 = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        gy.dot(&w2)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// GroupNorm over NCHW: statistics per (sample, group), affine per channel.
pub struct GroupNorm {
    pub gamma: Param, // [C]
    pub beta: Param,  // [C]
    pub groups: usize,
    pub channels: usize,
    pub eps: f32,
}

pub struct GroupNormCache {
    xhat: Array4<f32>,
    inv_std: Array2<f32>, // [N, G]
}

impl GroupNorm {
    pub fn new(name: &str, groups: usize, channels: usize) -> Self {
        assert!(channels % groups == 0, "channels must divide into groups");
        let mut gamma = Param::new(&format!("{name}.g"), &[channels]);
        gamma.value.fill(1.0);
        let beta = Param::new(&format!("{name}.bt"), &[channels]);
        GroupNorm {
            gamma,
            beta,
            groups,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: Array4<f32>) -> (Array4<f32>, GroupNormCache) {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let m = (cg * h * w) as f32;
        let mut xhat = x;
        let mut inv_std = Array2::<f32>::zeros((n, self.groups));
        for ni in 0..n {
            for gi in 0..self.groups {
                let mut mean = 0.0f32;
                for ci in gi * cg..(gi + 1) * cg {
                    for v in xhat.index_axis(Axis(0), ni).index_axis(Axis(0), ci) {
                        mean += v;
                    }
                }
                mean /= m;
                let mut var = 0.0f32;
                for ci in gi * cg..(gi + 1) * cg {
                    for v in xhat.index_axis(Axis(0), ni).index_axis(Axis(0), ci) {
                        let d = v - mean;
                        var += d * d;
                    }
                }
                var /= m;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[[ni, gi]] = istd;
                for ci in gi * cg..(gi + 1) * cg {
                    for v in xhat
                        .index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), ci)
                        .iter_mut()
                    {
                        *v = (*v - mean) * istd;
                    }
                }
            }
        }

        let gamma = self
            .gamma
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let beta = self
            .beta
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let mut y = xhat.clone();
        for ni in 0..n {
            for ci in 0..c {
                let g = gamma[ci];
                let b = beta[ci];
                for v in y
                    .index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .iter_mut()
                {
                    *v = *v * g + b;
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: GroupNormCache, gy: &ArrayView4<f32>) -> Array4<f32> {
        let (n, c, h, w) = cache.xhat.dim();
        let cg = c / self.groups;
        let m = (cg * h * w) as f32;

        // affine grads
        {
            let mut gg = self
                .gamma
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            let mut gb = self
                .beta
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            for ci in 0..c {
                let mut acc_g = 0.0f32;
                let mut acc_b = 0.0f32;
                for ni in 0..n {
                    let xh = cache.xhat.index_axis(Axis(0), ni);
                    let xh = xh.index_axis(Axis(0), ci);
                    let g = gy.index_axis(Axis(0), ni);
                    let g = g.index_axis(Axis(0), ci);
                    for (a, b) in xh.iter().zip(g.iter()) {
                        acc_g += a * b;
                        acc_b += b;
                    }
                }
                gg[ci] += acc_g;
                gb[ci] += acc_b;
            }
        }

        // input grad: gxhat = gy * gamma, then the standard normalization backward
        let gamma = self
            .gamma
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let mut gx = Array4::<f32>::zeros((n, c, h, w));
        for ni in 0..n {
            for gi in 0..self.groups {
                let mut sum_g = 0.0f32;
                let mut sum_gx = 0.0f32;
                for ci in gi * cg..(gi + 1) * cg {
                    let gm = gamma[ci];
                    let xh = cache.xhat.index_axis(Axis(0), ni);
                    let xh = xh.index_axis(Axis(0), ci);
                    let g = gy.index_axis(Axis(0), ni);
                    let g = g.index_axis(Axis(0), ci);
                    for (a, b) in xh.iter().zip(g.iter()) {
                        let gh = b * gm;
                        sum_g += gh;
                        sum_gx += gh * a;
                    }
                }
                let istd = cache.inv_std[[ni, gi]];
                for ci in gi * cg..(gi + 1) * cg {
                    let gm = gamma[ci];
                    let xh = cache.xhat.index_axis(Axis(0), ni);
                    let xh = xh.index_axis(Axis(0), ci).to_owned();
                    let g = gy.index_axis(Axis(0), ni);
                    let g = g.index_axis(Axis(0), ci).to_owned();
                    let mut gxs = gx.index_axis_mut(Axis(0), ni);
                    let mut gxs = gxs.index_axis_mut(Axis(0), ci);
                    for iy in 0..h {
                        for ix in 0..w {
                            let gh = g[[iy, ix]] * gm;
                            gxs[[iy, ix]] =
                                istd * (gh - (sum_g + xh[[iy, ix]] * sum_gx) / m);
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen::<f32>() - 0.5)
    }

    #[test]
    fn conv_gradcheck() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut conv = Conv2d::new(&mut rng, "c", 2, 3, 3, 1, 1);
        let x = rand4((2, 2, 4, 4), 20);
        let r = rand4((2, 3, 4, 4), 21);

        let loss = |conv: &Conv2d, x: &Array4<f32>| -> f64 {
            let (y, _) = conv.forward(x.clone());
            y.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };

        conv.weight.grad.fill(0.0);
        conv.bias.grad.fill(0.0);
        let (y, cache) = conv.forward(x.clone());
        assert_eq!(y.dim(), (2, 3, 4, 4));
        let gx = conv.backward(cache, &r.view());

        // input grad at a few positions
        for idx in [[0, 0, 0, 0], [1, 1, 3, 2], [0, 1, 2, 2]] {
            let mut xp = x.clone();
            let eps = 1e-3f32;
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let lp = loss(&conv, &xp);
            xp[idx] = orig - eps;
            let lm = loss(&conv, &xp);
            let num = (lp - lm) / (2.0 * eps as f64);
            let ana = gx[idx] as f64;
            assert!((num - ana).abs() < 1e-2 * (1.0 + ana.abs()), "gx {num} vs {ana}");
        }

        // weight grads at a few positions: perturb in place, restore after
        let eps = 1e-3f32;
        for idx in [[0usize, 0], [2, 17], [1, 5]] {
            let orig = conv.weight.value[IxDyn(&idx)];
            conv.weight.value[IxDyn(&idx)] = orig + eps;
            let lp = loss(&conv, &x);
            conv.weight.value[IxDyn(&idx)] = orig - eps;
            let lm = loss(&conv, &x);
            conv.weight.value[IxDyn(&idx)] = orig;
            let num = (lp - lm) / (2.0 * eps as f64);
            let ana = conv.weight.grad[IxDyn(&idx)] as f64;
            assert!((num - ana).abs() < 1e-2 * (1.0 + ana.abs()), "gw {num} vs {ana}");
        }
        for ci in 0..3 {
            let ana = conv.bias.grad[IxDyn(&[ci])] as f64;
            let num: f64 = r
                .index_axis(Axis(1), ci)
                .iter()
                .map(|v| *v as f64)
                .sum();
            assert!((num - ana).abs() < 1e-3 * (1.0 + ana.abs()));
        }
    }

    #[test]
    fn conv_stride2_shapes() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let conv = Conv2d::new(&mut rng, "c", 3, 5, 3, 2, 1);
        let x = rand4((1, 3, 8, 8), 2);
        let (y, _) = conv.forward(x);
        assert_eq!(y.dim(), (1, 5, 4, 4));
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut lin = Linear::new(&mut rng, "l", 5, 4);
        let x = {
            let mut r = ChaCha20Rng::seed_from_u64(30);
            Array2::from_shape_fn((3, 5), |_| r.gen::<f32>() - 0.5)
        };
        let r = {
            let mut r = ChaCha20Rng::seed_from_u64(31);
            Array2::from_shape_fn((3, 4), |_| r.gen::<f32>() - 0.5)
        };

        lin.weight.grad.fill(0.0);
        lin.bias.grad.fill(0.0);
        let (_, cache) = lin.forward(x.clone());
        let gx = lin.backward(cache, &r.view());

        let eps = 1e-3f32;
        for idx in [[0usize, 0], [2, 4], [1, 2]] {
            let mut xp = x.clone();
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let (yp, _) = lin.forward(xp.clone());
            let lp: f64 = yp.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            xp[idx] = orig - eps;
            let (ym, _) = lin.forward(xp);
            let lm: f64 = ym.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let num = (lp - lm) / (2.0 * eps as f64);
            let ana = gx[idx] as f64;
            assert!((num - ana).abs() < 1e-2 * (1.0 + ana.abs()));
        }

        // weight grad analytic check: gW = rᵀ x
        let gw_expect = r.t().dot(&x);
        let gw = lin
            .weight
            .grad
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        for (a, b) in gw.iter().zip(gw_expect.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn groupnorm_normalizes_and_gradchecks() {
        let mut gn = GroupNorm::new("gn", 2, 4);
        let x = rand4((2, 4, 3, 3), 40);
        let (y, cache) = gn.forward(x.clone());

        // per-(sample, group) statistics of the normalized output: mean 0, var 1
        for ni in 0..2 {
            for gi in 0..2 {
                let mut vals = Vec::new();
                for ci in gi * 2..(gi + 1) * 2 {
                    for v in y.index_axis(Axis(0), ni).index_axis(Axis(0), ci) {
                        vals.push(*v as f64);
                    }
                }
                let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
                let var: f64 =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-5, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }

        // gradcheck against <y, r>
        let r = rand4((2, 4, 3, 3), 41);
        gn.gamma.grad.fill(0.0);
        gn.beta.grad.fill(0.0);
        let gx = gn.backward(cache, &r.view());
        let eps = 1e-3f32;
        for idx in [[0, 0, 0, 0], [1, 3, 2, 1], [0, 2, 1, 1]] {
            let mut xp = x.clone();
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let (yp, _) = gn.forward(xp.clone());
            let lp: f64 = yp.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            xp[idx] = orig - eps;
            let (ym, _) = gn.forward(xp);
            let lm: f64 = ym.iter().zip(r.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let num = (lp - lm) / (2.0 * eps as f64);
            let ana = gx[idx] as f64;
            assert!(
                (num - ana).abs() < 2e-2 * (1.0 + ana.abs()),
                "gx {num} vs {ana}"
            );
        }
    }
}
