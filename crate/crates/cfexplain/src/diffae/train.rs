//! Joint encoder + denoiser training on the L1 noise-reconstruction loss
//! `E || eps - D(x_t, t, E(x0)) ||_1` with uniformly sampled t and
//! Gaussian eps.

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DiffAE, DiffAEConfig, ImageSlice};
use crate::error::{Error, Result};
use crate::nn::Adam;

/// Loss-curve metadata recorded by [`train_diffae`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// (step, loss) samples, including the first and last step.
    pub loss_curve: Vec<(usize, f64)>,
}

/// Train a fresh diffusion autoencoder on the dataset. Deterministic given
/// `config.seed`; aborts with a diagnostic if the loss leaves the reals.
pub fn train_diffae(dataset: &[ImageSlice], config: &DiffAEConfig) -> Result<(DiffAE, TrainRecord)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let s = config.image_size;
    for x in dataset {
        if x.shape() != (s, s) {
            return Err(Error::shape("training image", format!("{s}x{s}"), format!("{:?}", x.shape())));
        }
    }

    let mut model = DiffAE::init(config)?;
    let mut opt = Adam::new(config.learning_rate as f32);
    // separate stream from the init rng so batch order is independent of
    // architecture width
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(0x5eed_0001));

    let n = dataset.len();
    let b = config.batch_size;
    let t_max = config.t_steps;
    let curve_every = (config.train_steps / 200).max(1);

    let mut record = TrainRecord {
        steps: config.train_steps,
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        loss_curve: Vec::new(),
    };

    for step in 0..config.train_steps {
        // assemble the batch in f64, cast to f32 at the network boundary
        let mut x0 = Array4::<f32>::zeros((b, 1, s, s));
        let mut xt = Array4::<f32>::zeros((b, 1, s, s));
        let mut target = Array4::<f32>::zeros((b, 1, s, s));
        let mut ts = vec![0usize; b];
        for i in 0..b {
            let idx = rng.gen_range(0..n);
            let t = rng.gen_range(1..=t_max);
            ts[i] = t;
            let (sig, noi) = model.schedule.coeffs(t)?;
            let x = dataset[idx].pixels();
            let mut x0i = x0.index_axis_mut(Axis(0), i);
            let mut xti = xt.index_axis_mut(Axis(0), i);
            let mut tgt = target.index_axis_mut(Axis(0), i);
            for r in 0..s {
                for c in 0..s {
                    let e: f64 = rng.sample(StandardNormal);
                    let xv = x[[r, c]];
                    x0i[[0, r, c]] = xv as f32;
                    xti[[0, r, c]] = (sig * xv + noi * e) as f32;
                    tgt[[0, r, c]] = e as f32;
                }
            }
        }

        let (z, enc_cache) = model.encoder.forward(x0);
        let (pred, unet_cache) = model.unet.forward(xt, &ts, z);

        let numel = (b * s * s) as f64;
        let mut loss = 0.0f64;
        let mut gy = Array4::<f32>::zeros((b, 1, s, s));
        let scale = (1.0 / numel) as f32;
        ndarray::Zip::from(&mut gy)
            .and(&pred)
            .and(&target)
            .for_each(|g, &p, &t| {
                let d = p - t;
                loss += d.abs() as f64;
                *g = if d > 0.0 {
                    scale
                } else if d < 0.0 {
                    -scale
                } else {
                    0.0
                };
            });
        loss /= numel;

        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        if step == 0 {
            record.initial_loss = loss;
        }
        if step % curve_every == 0 || step + 1 == config.train_steps {
            record.loss_curve.push((step, loss));
        }
        record.final_loss = loss;

        let gz = model.unet.backward(unet_cache, &gy);
        model.encoder.backward(enc_cache, &gz);

        let mut params = model.encoder.params_mut();
        params.extend(model.unet.params_mut());
        opt.step(&mut params);
    }

    Ok((model, record))
}

/// Mean per-code L2 distance between two batches of codes; used by the
/// class-separation diagnostics.
pub fn mean_pairwise_distance(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for ra in a.rows() {
        for rb in b.rows() {
            let d: f64 = ra
                .iter()
                .zip(rb.iter())
                .map(|(x, y)| {
                    let d = (*x - *y) as f64;
                    d * d
                })
                .sum();
            total += d.sqrt();
            count += 1;
        }
    }
    total / count.max(1) as f64
}
