//! Conditional U-Net noise predictor and the semantic encoder.
//!
//! The U-Net conditions every residual block on concat(timestep features,
//! semantic code z) through feature-wise scale-and-shift; skip connections
//! concatenate channels across matching resolutions. The encoder compresses
//! an image to z through strided convolutions and a linear head over the
//! flattened coarsest feature map (spatial layout is kept, not pooled away,
//! so z can carry feature positions to the decoder).

use ndarray::{s, Array2, Array4, Axis};
use rand_chacha::ChaCha20Rng;

use super::DiffAEConfig;
use crate::nn::{
    concat_channels, silu, silu_backward, split_channels, timestep_embedding, upsample_nearest2,
    upsample_nearest2_backward, Conv2d, ConvCache, GroupNorm, GroupNormCache, Linear, LinearCache,
    Param,
};
use crate::nn::{scale_shift, scale_shift_backward};

const TEMB_DIM: usize = 64;
const NORM_GROUPS: usize = 4;

/// Residual block `x -> conv/norm/FiLM/silu/conv/norm/silu + skip(x)`,
/// conditioned per (sample, channel) on the shared conditioning vector.
struct CondResBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    film: Linear,
    conv2: Conv2d,
    gn2: GroupNorm,
    skip: Option<Conv2d>,
    c_out: usize,
}

struct CondResCache {
    c1: ConvCache,
    g1: GroupNormCache,
    filmc: LinearCache,
    h_norm: Array4<f32>,
    scale: Array2<f32>,
    modulated: Array4<f32>,
    c2: ConvCache,
    g2: GroupNormCache,
    n2: Array4<f32>,
    skipc: Option<ConvCache>,
}

impl CondResBlock {
    fn new(rng: &mut ChaCha20Rng, name: &str, c_in: usize, c_out: usize, cond_dim: usize) -> Self {
        CondResBlock {
            conv1: Conv2d::new(rng, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1),
            gn1: GroupNorm::new(&format!("{name}.gn1"), NORM_GROUPS, c_out),
            film: Linear::new(rng, &format!("{name}.film"), cond_dim, 2 * c_out),
            conv2: Conv2d::new(rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1),
            gn2: GroupNorm::new(&format!("{name}.gn2"), NORM_GROUPS, c_out),
            skip: (c_in != c_out)
                .then(|| Conv2d::new(rng, &format!("{name}.skip"), c_in, c_out, 1, 1, 0)),
            c_out,
        }
    }

    fn forward(&self, x: Array4<f32>, cond: &Array2<f32>) -> (Array4<f32>, CondResCache) {
        let x_skip = x.clone();
        let (h, c1) = self.conv1.forward(x);
        let (h_norm, g1) = self.gn1.forward(h);
        let (st, filmc) = self.film.forward(cond.clone());
        let scale = st.slice(s![.., ..self.c_out]).to_owned();
        let shift = st.slice(s![.., self.c_out..]).to_owned();
        let modulated = scale_shift(&h_norm.view(), &scale.view(), &shift.view());
        let a1 = silu(&modulated);
        let (h2, c2) = self.conv2.forward(a1);
        let (n2, g2) = self.gn2.forward(h2);
        let a2 = silu(&n2);
        let (skip_out, skipc) = match &self.skip {
            Some(conv) => {
                let (y, c) = conv.forward(x_skip);
                (y, Some(c))
            }
            None => (x_skip, None),
        };
        let y = a2 + skip_out;
        (
            y,
            CondResCache { c1, g1, filmc, h_norm, scale, modulated, c2, g2, n2, skipc },
        )
    }

    /// Returns (grad wrt x, grad wrt cond).
    fn backward(&mut self, cache: CondResCache, gy: &Array4<f32>) -> (Array4<f32>, Array2<f32>) {
        let gn2_in = silu_backward(&cache.n2, gy);
        let gh2 = self.gn2.backward(cache.g2, &gn2_in.view());
        let ga1 = self.conv2.backward(cache.c2, &gh2.view());
        let gm = silu_backward(&cache.modulated, &ga1);
        let (gh_norm, gs, gt) =
            scale_shift_backward(&cache.h_norm.view(), &cache.scale.view(), &gm.view());
        let gst = ndarray::concatenate(Axis(1), &[gs.view(), gt.view()]).expect("film grad");
        let gcond = self.film.backward(cache.filmc, &gst.view());
        let gh = self.gn1.backward(cache.g1, &gh_norm.view());
        let gx_main = self.conv1.backward(cache.c1, &gh.view());
        let gx = match (&mut self.skip, cache.skipc) {
            (Some(conv), Some(skipc)) => gx_main + conv.backward(skipc, &gy.view()),
            _ => gx_main + gy,
        };
        (gx, gcond)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv1.params();
        p.extend(self.gn1.params());
        p.extend(self.film.params());
        p.extend(self.conv2.params());
        p.extend(self.gn2.params());
        if let Some(skip) = &self.skip {
            p.extend(skip.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.gn1.params_mut());
        p.extend(self.film.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.gn2.params_mut());
        if let Some(skip) = &mut self.skip {
            p.extend(skip.params_mut());
        }
        p
    }
}

/// Conditional U-Net over [N, 1, S, S]: stem, two strided downsamplings
/// with residual blocks, middle block, mirrored upsampling path with
/// channel-concat skips, zero-initialized output convolution.
pub struct UNet {
    lin_t: Linear,
    stem: Conv2d,
    down1: CondResBlock,
    ds1: Conv2d,
    down2: CondResBlock,
    ds2: Conv2d,
    mid: CondResBlock,
    up1_conv: Conv2d,
    up1: CondResBlock,
    up2_conv: Conv2d,
    up2: CondResBlock,
    out_gn: GroupNorm,
    out_conv: Conv2d,
    c0: usize,
    c1: usize,
}

pub struct UNetCache {
    lin_t_c: LinearCache,
    temb_f: Array2<f32>,
    stemc: ConvCache,
    d1c: CondResCache,
    ds1c: ConvCache,
    d2c: CondResCache,
    ds2c: ConvCache,
    midc: CondResCache,
    up1cc: ConvCache,
    up1c: CondResCache,
    up2cc: ConvCache,
    up2c: CondResCache,
    ogc: GroupNormCache,
    out_g: Array4<f32>,
    occ: ConvCache,
}

impl UNet {
    pub fn new(rng: &mut ChaCha20Rng, cfg: &DiffAEConfig) -> Self {
        let bc = cfg.base_channels;
        let m = &cfg.channel_mults;
        assert!(m.len() >= 3, "U-Net needs at least 3 stages");
        let (c0, c1, c2) = (bc * m[0], bc * m[1], bc * m[2]);
        let cond_dim = TEMB_DIM + cfg.code_dim;
        UNet {
            lin_t: Linear::new(rng, "unet.lin_t", TEMB_DIM, TEMB_DIM),
            stem: Conv2d::new(rng, "unet.stem", 1, c0, 3, 1, 1),
            down1: CondResBlock::new(rng, "unet.down1", c0, c0, cond_dim),
            ds1: Conv2d::new(rng, "unet.ds1", c0, c1, 3, 2, 1),
            down2: CondResBlock::new(rng, "unet.down2", c1, c1, cond_dim),
            ds2: Conv2d::new(rng, "unet.ds2", c1, c2, 3, 2, 1),
            mid: CondResBlock::new(rng, "unet.mid", c2, c2, cond_dim),
            up1_conv: Conv2d::new(rng, "unet.up1_conv", c2, c1, 3, 1, 1),
            up1: CondResBlock::new(rng, "unet.up1", 2 * c1, c1, cond_dim),
            up2_conv: Conv2d::new(rng, "unet.up2_conv", c1, c0, 3, 1, 1),
            up2: CondResBlock::new(rng, "unet.up2", 2 * c0, c0, cond_dim),
            out_gn: GroupNorm::new("unet.out_gn", NORM_GROUPS, c0),
            out_conv: Conv2d::new(rng, "unet.out_conv", c0, 1, 3, 1, 1).zero_init(),
            c0,
            c1,
        }
    }

    fn conditioning(&self, ts: &[usize], z: &Array2<f32>) -> (Array2<f32>, Array2<f32>, LinearCache) {
        let temb = timestep_embedding(ts, TEMB_DIM);
        let (temb_f, lin_t_c) = self.lin_t.forward(temb);
        let temb_a = silu(&temb_f);
        let cond = ndarray::concatenate(Axis(1), &[temb_a.view(), z.view()]).expect("cond concat");
        (cond, temb_f, lin_t_c)
    }

    pub fn forward(&self, x: Array4<f32>, ts: &[usize], z: Array2<f32>) -> (Array4<f32>, UNetCache) {
        let (cond, temb_f, lin_t_c) = self.conditioning(ts, &z);

        let (h0, stemc) = self.stem.forward(x);
        let (d1, d1c) = self.down1.forward(h0, &cond);
        let (h, ds1c) = self.ds1.forward(d1.clone());
        let (d2, d2c) = self.down2.forward(h, &cond);
        let (h, ds2c) = self.ds2.forward(d2.clone());
        let (m, midc) = self.mid.forward(h, &cond);

        let u = upsample_nearest2(&m.view());
        let (u, up1cc) = self.up1_conv.forward(u);
        let cat1 = concat_channels(&u.view(), &d2.view());
        let (u, up1c) = self.up1.forward(cat1, &cond);
        let u = upsample_nearest2(&u.view());
        let (u, up2cc) = self.up2_conv.forward(u);
        let cat0 = concat_channels(&u.view(), &d1.view());
        let (u, up2c) = self.up2.forward(cat0, &cond);

        let (out_g, ogc) = self.out_gn.forward(u);
        let a = silu(&out_g);
        let (eps, occ) = self.out_conv.forward(a);
        (
            eps,
            UNetCache {
                lin_t_c, temb_f, stemc, d1c, ds1c, d2c, ds2c, midc, up1cc, up1c, up2cc, up2c,
                ogc, out_g, occ,
            },
        )
    }

    /// Inference without gradient bookkeeping.
    pub fn infer(&self, x: &Array4<f32>, ts: &[usize], z: &Array2<f32>) -> Array4<f32> {
        self.forward(x.clone(), ts, z.clone()).0
    }

    /// Accumulates parameter grads; returns the grad wrt z.
    pub fn backward(&mut self, cache: UNetCache, gy: &Array4<f32>) -> Array2<f32> {
        let ga = self.out_conv.backward(cache.occ, &gy.view());
        let gg = silu_backward(&cache.out_g, &ga);
        let gu = self.out_gn.backward(cache.ogc, &gg.view());

        let (gcat0, gcond_up2) = self.up2.backward(cache.up2c, &gu);
        let (g_up2out, g_d1_a) = split_channels(&gcat0.view(), self.c0);
        let g_up2in = self.up2_conv.backward(cache.up2cc, &g_up2out.view());
        let g_up1_out = upsample_nearest2_backward(&g_up2in.view());

        let (gcat1, gcond_up1) = self.up1.backward(cache.up1c, &g_up1_out);
        let (g_up1out, g_d2_a) = split_channels(&gcat1.view(), self.c1);
        let g_up1in = self.up1_conv.backward(cache.up1cc, &g_up1out.view());
        let g_mid = upsample_nearest2_backward(&g_up1in.view());

        let (g_ds2_out, gcond_mid) = self.mid.backward(cache.midc, &g_mid);
        let g_d2_b = self.ds2.backward(cache.ds2c, &g_ds2_out.view());
        let g_d2 = g_d2_a + g_d2_b;

        let (g_ds1_out, gcond_d2) = self.down2.backward(cache.d2c, &g_d2);
        let g_d1_b = self.ds1.backward(cache.ds1c, &g_ds1_out.view());
        let g_d1 = g_d1_a + g_d1_b;

        let (g_h0, gcond_d1) = self.down1.backward(cache.d1c, &g_d1);
        let _gx = self.stem.backward(cache.stemc, &g_h0.view());

        let gcond = gcond_up2 + gcond_up1 + gcond_mid + gcond_d2 + gcond_d1;
        let gtemb_a = gcond.slice(s![.., ..TEMB_DIM]).to_owned();
        let gz = gcond.slice(s![.., TEMB_DIM..]).to_owned();
        let gtemb_f = silu_backward(&cache.temb_f, &gtemb_a);
        let _gsin = self.lin_t.backward(cache.lin_t_c, &gtemb_f.view());
        gz
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.lin_t.params();
        p.extend(self.stem.params());
        p.extend(self.down1.params());
        p.extend(self.ds1.params());
        p.extend(self.down2.params());
        p.extend(self.ds2.params());
        p.extend(self.mid.params());
        p.extend(self.up1_conv.params());
        p.extend(self.up1.params());
        p.extend(self.up2_conv.params());
        p.extend(self.up2.params());
        p.extend(self.out_gn.params());
        p.extend(self.out_conv.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.lin_t.params_mut();
        p.extend(self.stem.params_mut());
        p.extend(self.down1.params_mut());
        p.extend(self.ds1.params_mut());
        p.extend(self.down2.params_mut());
        p.extend(self.ds2.params_mut());
        p.extend(self.mid.params_mut());
        p.extend(self.up1_conv.params_mut());
        p.extend(self.up1.params_mut());
        p.extend(self.up2_conv.params_mut());
        p.extend(self.up2.params_mut());
        p.extend(self.out_gn.params_mut());
        p.extend(self.out_conv.params_mut());
        p
    }
}

/// Semantic encoder: stem + three strided conv/norm/silu stages + linear
/// head over the flattened (S/8)^2 feature map.
pub struct Encoder {
    stem: Conv2d,
    c1: Conv2d,
    g1: GroupNorm,
    c2: Conv2d,
    g2: GroupNorm,
    c3: Conv2d,
    g3: GroupNorm,
    head: Linear,
    c3_ch: usize,
    spatial: usize,
}

pub struct EncoderCache {
    stemc: ConvCache,
    stem_out: Array4<f32>,
    c1c: ConvCache,
    g1c: GroupNormCache,
    n1: Array4<f32>,
    c2c: ConvCache,
    g2c: GroupNormCache,
    n2: Array4<f32>,
    c3c: ConvCache,
    g3c: GroupNormCache,
    n3: Array4<f32>,
    headc: LinearCache,
}

impl Encoder {
    pub fn new(rng: &mut ChaCha20Rng, cfg: &DiffAEConfig) -> Self {
        let bc = cfg.base_channels;
        let m = &cfg.channel_mults;
        let (c0, c1, c2) = (bc * m[0], bc * m[1], bc * m[2]);
        let c3 = bc * 4;
        let spatial = cfg.image_size / 8;
        Encoder {
            stem: Conv2d::new(rng, "enc.stem", 1, c0, 3, 1, 1),
            c1: Conv2d::new(rng, "enc.c1", c0, c1, 3, 2, 1),
            g1: GroupNorm::new("enc.g1", NORM_GROUPS, c1),
            c2: Conv2d::new(rng, "enc.c2", c1, c2, 3, 2, 1),
            g2: GroupNorm::new("enc.g2", NORM_GROUPS, c2),
            c3: Conv2d::new(rng, "enc.c3", c2, c3, 3, 2, 1),
            g3: GroupNorm::new("enc.g3", NORM_GROUPS, c3),
            head: Linear::new(rng, "enc.head", c3 * spatial * spatial, cfg.code_dim),
            c3_ch: c3,
            spatial,
        }
    }

    pub fn forward(&self, x: Array4<f32>) -> (Array2<f32>, EncoderCache) {
        let n = x.dim().0;
        let (h, stemc) = self.stem.forward(x);
        let stem_out = h;
        let a0 = silu(&stem_out);
        let (h, c1c) = self.c1.forward(a0);
        let (n1, g1c) = self.g1.forward(h);
        let a1 = silu(&n1);
        let (h, c2c) = self.c2.forward(a1);
        let (n2, g2c) = self.g2.forward(h);
        let a2 = silu(&n2);
        let (h, c3c) = self.c3.forward(a2);
        let (n3, g3c) = self.g3.forward(h);
        let a3 = silu(&n3);
        let flat = a3
            .into_shape_with_order((n, self.c3_ch * self.spatial * self.spatial))
            .expect("flatten");
        let (z, headc) = self.head.forward(flat);
        (
            z,
            EncoderCache { stemc, stem_out, c1c, g1c, n1, c2c, g2c, n2, c3c, g3c, n3, headc },
        )
    }

    pub fn infer(&self, x: &Array4<f32>) -> Array2<f32> {
        self.forward(x.clone()).0
    }

    /// Accumulates parameter grads from the code gradient.
    pub fn backward(&mut self, cache: EncoderCache, gz: &Array2<f32>) {
        let n = gz.dim().0;
        let gflat = self.head.backward(cache.headc, &gz.view());
        let ga3 = gflat
            .into_shape_with_order((n, self.c3_ch, self.spatial, self.spatial))
            .expect("unflatten");
        let gn3 = silu_backward(&cache.n3, &ga3);
        let gh = self.g3.backward(cache.g3c, &gn3.view());
        let ga2 = self.c3.backward(cache.c3c, &gh.view());
        let gn2 = silu_backward(&cache.n2, &ga2);
        let gh = self.g2.backward(cache.g2c, &gn2.view());
        let ga1 = self.c2.backward(cache.c2c, &gh.view());
        let gn1 = silu_backward(&cache.n1, &ga1);
        let gh = self.g1.backward(cache.g1c, &gn1.view());
        let ga0 = self.c1.backward(cache.c1c, &gh.view());
        let gstem = silu_backward(&cache.stem_out, &ga0);
        let _gx = self.stem.backward(cache.stemc, &gstem.view());
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.stem.params();
        p.extend(self.c1.params());
        p.extend(self.g1.params());
        p.extend(self.c2.params());
        p.extend(self.g2.params());
        p.extend(self.c3.params());
        p.extend(self.g3.params());
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.stem.params_mut();
        p.extend(self.c1.params_mut());
        p.extend(self.g1.params_mut());
        p.extend(self.c2.params_mut());
        p.extend(self.g2.params_mut());
        p.extend(self.c3.params_mut());
        p.extend(self.g3.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};

    fn cfg() -> DiffAEConfig {
        DiffAEConfig {
            image_size: 16,
            code_dim: 6,
            base_channels: 4,
            channel_mults: vec![1, 2, 2],
            t_steps: 10,
            beta_min: 0.01,
            beta_max: 0.2,
            ddim_steps: 5,
            train_steps: 1,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 3,
        }
    }

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen::<f32>() - 0.5)
    }

    fn rand2(shape: (usize, usize), seed: u64) -> Array2<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| rng.gen::<f32>() - 0.5)
    }

    fn dot<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>, b: &ndarray::Array<f32, D>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
    }

    #[test]
    fn unet_shapes_and_zero_init() {
        let c = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let unet = UNet::new(&mut rng, &c);
        let x = rand4((2, 1, 16, 16), 5);
        let z = rand2((2, 6), 6);
        let y = unet.infer(&x, &[3, 7], &z);
        assert_eq!(y.dim(), (2, 1, 16, 16));
        // zero-initialized output conv
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unet_gradcheck_params_and_z() {
        let c = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut unet = UNet::new(&mut rng, &c);
        // non-zero output layer so gradients reach everything
        {
            let mut r2 = ChaCha20Rng::seed_from_u64(9);
            unet.out_conv.weight.value.mapv_inplace(|_| r2.gen::<f32>() * 0.2 - 0.1);
        }
        let x = rand4((2, 1, 16, 16), 7);
        let z = rand2((2, 6), 8);
        let ts = [2usize, 9];
        let r = rand4((2, 1, 16, 16), 10);

        for p in unet.params_mut() {
            p.zero_grad();
        }
        let (y, cache) = unet.forward(x.clone(), &ts, z.clone());
        let _l0 = dot(&y, &r);
        let gz = unet.backward(cache, &r);

        // finite differences on z
        let eps = 2e-2f32;
        for idx in [[0usize, 0], [1, 5], [0, 3]] {
            let mut zp = z.clone();
            zp[idx] += eps;
            let lp = dot(&unet.infer(&x, &ts, &zp), &r);
            zp[idx] -= 2.0 * eps;
            let lm = dot(&unet.infer(&x, &ts, &zp), &r);
            let num = (lp - lm) / (2.0 * eps as f64);
            let ana = gz[idx] as f64;
            assert!(
                (num - ana).abs() < 5e-2 * (1.0 + ana.abs()),
                "gz[{idx:?}]: fd {num} vs bp {ana}"
            );
        }

        // finite differences on a spread of parameters
        let grads: Vec<(String, Vec<usize>, f32)> = {
            let mut picked = Vec::new();
            for p in unet.params_mut() {
                if p.numel() == 0 {
                    continue;
                }
                let idx: Vec<usize> = p.value.shape().iter().map(|s| s / 2).collect();
                picked.push((p.name.clone(), idx.clone(), p.grad[IxDyn(&idx)]));
            }
            picked
        };
        // spot-check a representative subset (every 4th param tensor)
        for (name, idx, ana) in grads.iter().step_by(4) {
            let num = {
                let mut perturb = |sign: f32| -> f64 {
                    for p in unet.params_mut() {
                        if &p.name == name {
                            p.value[IxDyn(idx)] += sign * eps;
                        }
                    }
                    dot(&unet.infer(&x, &ts, &z), &r)
                };
                let lp = perturb(1.0);
                let lm = perturb(-2.0);
                perturb(1.0); // restore
                (lp - lm) / (2.0 * eps as f64)
            };
            let ana = *ana as f64;
            assert!(
                (num - ana).abs() < 5e-2 * (1.0 + ana.abs()),
                "param {name}[{idx:?}]: fd {num} vs bp {ana}"
            );
        }
    }

    #[test]
    fn encoder_gradcheck() {
        let c = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut enc = Encoder::new(&mut rng, &c);
        let x = rand4((2, 1, 16, 16), 11);
        let r = rand2((2, 6), 12);

        for p in enc.params_mut() {
            p.zero_grad();
        }
        let (_, cache) = enc.forward(x.clone());
        enc.backward(cache, &r);

        let eps = 2e-2f32;
        let picked: Vec<(String, Vec<usize>, f32)> = enc
            .params_mut()
            .iter()
            .map(|p| {
                let idx: Vec<usize> = p.value.shape().iter().map(|s| s / 3).collect();
                (p.name.clone(), idx.clone(), p.grad[IxDyn(&idx)])
            })
            .collect();
        for (name, idx, ana) in picked.iter().step_by(3) {
            let num = {
                let mut perturb = |sign: f32| -> f64 {
                    for p in enc.params_mut() {
                        if &p.name == name {
                            p.value[IxDyn(idx)] += sign * eps;
                        }
                    }
                    dot(&enc.infer(&x), &r)
                };
                let lp = perturb(1.0);
                let lm = perturb(-2.0);
                perturb(1.0);
                (lp - lm) / (2.0 * eps as f64)
            };
            let ana = *ana as f64;
            assert!(
                (num - ana).abs() < 5e-2 * (1.0 + ana.abs()),
                "param {name}[{idx:?}]: fd {num} vs bp {ana}"
            );
        }
    }

    #[test]
    fn conditioning_changes_output() {
        let c = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut unet = UNet::new(&mut rng, &c);
        {
            let mut r2 = ChaCha20Rng::seed_from_u64(6);
            unet.out_conv.weight.value.mapv_inplace(|_| r2.gen::<f32>() * 0.2 - 0.1);
        }
        let x = rand4((1, 1, 16, 16), 13);
        let za = rand2((1, 6), 14);
        let zb = rand2((1, 6), 15);
        let ya = unet.infer(&x, &[4], &za);
        let yb = unet.infer(&x, &[4], &zb);
        let diff: f32 = ya.iter().zip(yb.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0, "z must modulate the output");
        // and different timesteps change it too
        let yc = unet.infer(&x, &[9], &za);
        let diff_t: f32 = ya.iter().zip(yc.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff_t > 0.0, "t must modulate the output");
    }
}
