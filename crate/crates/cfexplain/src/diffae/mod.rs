//! Diffusion autoencoder: semantic encoder, conditional noise predictor,
//! L1 noise-reconstruction training, and deterministic DDIM decode/invert.
//!
//! Image pixels are carried as f64 end to end; the networks compute in f32
//! and cast at the boundary. The DDIM transport algebra divides by
//! `sqrt(alpha_bar)` (as small as ~4e-5 at the schedule endpoint), which
//! amplifies rounding ~150x, so f32 state storage would not survive the
//! 1e-5 round-trip oracle this module is tested against.

mod sampler;
mod train;
mod unet;

pub use sampler::{ddim_step, decode, decode_batch, invert, invert_batch, transport};
pub use train::{mean_pairwise_distance, train_diffae, TrainRecord};
pub use unet::{Encoder, UNet};

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Single-channel square image, pixels nominally in [-1, 1].
///
/// The range is enforced at dataset ingestion only; decoded images may
/// exceed it and are clamped at export time, never inside the DDIM loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlice(Array2<f64>);

impl ImageSlice {
    /// Wrap pixels produced by this toolkit (decoder output, noising);
    /// no range check.
    pub fn from_decoded(pixels: Array2<f64>) -> Self {
        ImageSlice(pixels)
    }

    /// Ingest external pixel data: must be square, finite, and in [-1, 1].
    pub fn ingest(pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h != w || h == 0 {
            return Err(Error::shape("ImageSlice", "square H=W", format!("{h}x{w}")));
        }
        if !pixels.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "image pixels must be finite and in [-1, 1]".into(),
            ));
        }
        Ok(ImageSlice(pixels))
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Side length (images are square).
    pub fn size(&self) -> usize {
        self.0.dim().0
    }
}

/// Per-slice semantic code z produced by the encoder (f32, network-native).
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCode(Array1<f32>);

impl SemanticCode {
    pub fn from_values(values: Array1<f32>) -> Self {
        SemanticCode(values)
    }

    pub fn values(&self) -> &Array1<f32> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Anything that predicts the injected noise from (x_t, t, z). The trained
/// U-Net implements this; tests substitute closed-form stubs to check the
/// DDIM algebra independently of training.
pub trait NoisePredictor {
    /// Largest valid timestep (the schedule length T).
    fn t_max(&self) -> usize;

    fn predict_noise(&self, x_t: &ImageSlice, t: usize, z: &SemanticCode) -> Result<ImageSlice>;

    /// Batched form over [N, 1, H, W] f32 state; the default loops singles.
    fn predict_noise_batch(
        &self,
        x_t: &Array4<f32>,
        ts: &[usize],
        zs: &Array2<f32>,
    ) -> Result<Array4<f32>> {
        let (n, _c, h, w) = x_t.dim();
        if ts.len() != n || zs.dim().0 != n {
            return Err(Error::shape(
                "predict_noise_batch",
                format!("{n} ts/zs"),
                format!("{} ts, {} zs", ts.len(), zs.dim().0),
            ));
        }
        let mut out = Array4::<f32>::zeros((n, 1, h, w));
        for i in 0..n {
            let xi = ImageSlice::from_decoded(
                x_t.index_axis(ndarray::Axis(0), i)
                    .index_axis(ndarray::Axis(0), 0)
                    .mapv(|v| v as f64),
            );
            let zi = SemanticCode::from_values(zs.row(i).to_owned());
            let ei = self.predict_noise(&xi, ts[i], &zi)?;
            out.index_axis_mut(ndarray::Axis(0), i)
                .index_axis_mut(ndarray::Axis(0), 0)
                .assign(&ei.pixels().mapv(|v| v as f32));
        }
        Ok(out)
    }
}

/// Diffusion-autoencoder hyperparameters. `paper()` records the reference
/// configuration; `desk()` is the CPU-scale default the tests run at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffAEConfig {
    pub image_size: usize,
    /// Semantic code dimension d.
    pub code_dim: usize,
    /// Channel width of the first U-Net stage.
    pub base_channels: usize,
    /// Per-stage width multipliers; the U-Net downsamples len()-1 times.
    pub channel_mults: Vec<usize>,
    /// Training-schedule step count T.
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// DDIM subsequence length for decode/invert.
    pub ddim_steps: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DiffAEConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DiffAEConfig {
    /// CPU-scale defaults: 32x32 images, d=128, T=200, 20 DDIM steps.
    /// The betas scale the standard (T=1000, 1e-4, 0.02) endpoint
    /// alpha_bar ~ 4e-5 down to 200 steps.
    pub fn desk() -> Self {
        DiffAEConfig {
            image_size: 32,
            code_dim: 128,
            base_channels: 16,
            channel_mults: vec![1, 2, 3],
            t_steps: 200,
            beta_min: 5e-4,
            beta_max: 0.1,
            ddim_steps: 20,
            train_steps: 4000,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }

    /// Reference-scale preset: 256x256, z of 512, lr 1e-4, batch 64.
    /// Recorded for parity; not runnable in CPU test budgets.
    pub fn paper() -> Self {
        DiffAEConfig {
            image_size: 256,
            code_dim: 512,
            base_channels: 64,
            channel_mults: vec![1, 2, 4, 8],
            t_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            ddim_steps: 20,
            // 100 epochs at batch 64 over the reference cohort sizes
            train_steps: 100 * 731 / 64,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = self.image_size > 0
            && self.code_dim > 0
            && self.base_channels > 0
            && !self.channel_mults.is_empty()
            && self.channel_mults.iter().all(|m| *m > 0)
            && self.t_steps > 0
            && self.ddim_steps > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0;
        if !all_positive {
            return Err(Error::Config(
                "diffae config fields must be positive and non-empty".into(),
            ));
        }
        // U-Net downsamples len(mults)-1 times; the encoder 3 times.
        if self.channel_mults.len() < 3 {
            return Err(Error::Config(format!(
                "channel_mults needs at least 3 entries (the encoder reads the first three), got {}",
                self.channel_mults.len()
            )));
        }
        let stages = self.channel_mults.len() - 1;
        let div = 1usize << stages.max(3);
        if self.image_size % div != 0 {
            return Err(Error::Config(format!(
                "image size {} must be divisible by {div} (2^downsampling stages)",
                self.image_size
            )));
        }
        if !(self.beta_min > 0.0 && self.beta_max < 1.0 && self.beta_min <= self.beta_max) {
            return Err(Error::Config("betas must satisfy 0 < min <= max < 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_steps, self.beta_min, self.beta_max)
    }
}

/// Trained diffusion autoencoder: encoder + conditional U-Net + schedule.
pub struct DiffAE {
    pub encoder: Encoder,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    pub config: DiffAEConfig,
}

impl DiffAE {
    /// Freshly initialized (untrained) model from a config.
    pub fn init(config: &DiffAEConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rand::SeedableRng::seed_from_u64(config.seed);
        let encoder = Encoder::new(&mut rng, config);
        let unet = UNet::new(&mut rng, config);
        Ok(DiffAE {
            encoder,
            unet,
            schedule: config.schedule()?,
            config: config.clone(),
        })
    }

    fn check_image(&self, x: &ImageSlice) -> Result<()> {
        let s = self.config.image_size;
        if x.shape() != (s, s) {
            return Err(Error::shape("image", format!("{s}x{s}"), format!("{:?}", x.shape())));
        }
        Ok(())
    }

    /// Deterministic semantic code of a single image.
    pub fn encode(&self, x: &ImageSlice) -> Result<SemanticCode> {
        self.check_image(x)?;
        let batch = image_to_batch(std::slice::from_ref(x));
        let z = self.encoder.infer(&batch);
        Ok(SemanticCode::from_values(z.row(0).to_owned()))
    }

    /// Order-preserving batch encode; rows of the result are the codes.
    pub fn encode_batch(&self, xs: &[ImageSlice]) -> Result<Array2<f32>> {
        if xs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for x in xs {
            self.check_image(x)?;
        }
        Ok(self.encoder.infer(&image_to_batch(xs)))
    }
}

impl DiffAE {
    /// Package the model (and optional training metadata) into the shared
    /// checkpoint container. The schedule betas ride along as an f64 tensor
    /// so load can verify they match the config-derived schedule.
    pub fn to_checkpoint(&self, train: Option<&TrainRecord>) -> Result<crate::ckpt::Checkpoint> {
        let mut meta = serde_json::json!({
            "kind": "diffae",
            "config": self.config,
        });
        if let Some(t) = train {
            meta["train"] = serde_json::to_value(t)?;
        }
        let mut ckpt = crate::ckpt::Checkpoint::new(meta);
        ckpt.insert_f64(
            "schedule.betas",
            Array1::from(self.schedule.betas().to_vec()).into_dyn(),
        );
        for p in self.encoder.params().into_iter().chain(self.unet.params()) {
            ckpt.insert_f32(&p.name, p.value.clone());
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &crate::ckpt::Checkpoint) -> Result<(Self, Option<TrainRecord>)> {
        let kind: String = ckpt.meta_field("kind")?;
        if kind != "diffae" {
            return Err(Error::Checkpoint(format!("expected a diffae checkpoint, got '{kind}'")));
        }
        let config: DiffAEConfig = ckpt.meta_field("config")?;
        let mut model = DiffAE::init(&config)?;
        let betas = ckpt.tensor_f64("schedule.betas")?;
        if betas.len() != model.schedule.len()
            || betas.iter().zip(model.schedule.betas()).any(|(a, b)| a != b)
        {
            return Err(Error::Checkpoint(
                "checkpoint schedule does not match its config-derived schedule".into(),
            ));
        }
        for p in model
            .encoder
            .params_mut()
            .into_iter()
            .chain(model.unet.params_mut())
        {
            p.load(ckpt.tensor_f32(&p.name)?.clone())?;
        }
        let train = match ckpt.meta.get("train") {
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| Error::Checkpoint(format!("train record: {e}")))?,
            ),
            None => None,
        };
        Ok((model, train))
    }

    pub fn save(&self, path: &std::path::Path, train: Option<&TrainRecord>) -> Result<()> {
        self.to_checkpoint(train)?.write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Option<TrainRecord>)> {
        Self::from_checkpoint(&crate::ckpt::Checkpoint::read(path)?)
    }
}

impl NoisePredictor for DiffAE {
    fn t_max(&self) -> usize {
        self.schedule.len()
    }

    fn predict_noise(&self, x_t: &ImageSlice, t: usize, z: &SemanticCode) -> Result<ImageSlice> {
        self.check_image(x_t)?;
        if t < 1 || t > self.t_max() {
            return Err(Error::TimestepOutOfRange { t, lo: 1, hi: self.t_max() });
        }
        if z.len() != self.config.code_dim {
            return Err(Error::shape(
                "semantic code",
                self.config.code_dim.to_string(),
                z.len().to_string(),
            ));
        }
        let x = image_to_batch(std::slice::from_ref(x_t));
        let zs = z.values().view().insert_axis(ndarray::Axis(0)).to_owned();
        let eps = self.unet.infer(&x, &[t], &zs);
        Ok(batch_to_image(&eps, 0))
    }

    fn predict_noise_batch(
        &self,
        x_t: &Array4<f32>,
        ts: &[usize],
        zs: &Array2<f32>,
    ) -> Result<Array4<f32>> {
        for &t in ts {
            if t < 1 || t > self.t_max() {
                return Err(Error::TimestepOutOfRange { t, lo: 1, hi: self.t_max() });
            }
        }
        Ok(self.unet.infer(x_t, ts, zs))
    }
}

/// Stack f64 images into the networks' [N, 1, H, W] f32 layout.
pub fn image_to_batch(xs: &[ImageSlice]) -> Array4<f32> {
    let (h, w) = xs[0].shape();
    let mut out = Array4::<f32>::zeros((xs.len(), 1, h, w));
    for (i, x) in xs.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&x.pixels().mapv(|v| v as f32));
    }
    out
}

/// Extract sample `i` of an [N, 1, H, W] batch as an f64 image.
pub fn batch_to_image(batch: &Array4<f32>, i: usize) -> ImageSlice {
    ImageSlice::from_decoded(
        batch
            .index_axis(ndarray::Axis(0), i)
            .index_axis(ndarray::Axis(0), 0)
            .mapv(|v| v as f64),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DiffAEConfig {
        DiffAEConfig {
            image_size: 16,
            code_dim: 8,
            base_channels: 4,
            channel_mults: vec![1, 2, 2],
            t_steps: 10,
            beta_min: 0.01,
            beta_max: 0.2,
            ddim_steps: 5,
            train_steps: 1,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 7,
        }
    }

    #[test]
    fn ingest_enforces_range_and_shape() {
        assert!(ImageSlice::ingest(Array2::from_elem((4, 4), 0.5)).is_ok());
        assert!(ImageSlice::ingest(Array2::from_elem((4, 5), 0.5)).is_err());
        assert!(ImageSlice::ingest(Array2::from_elem((4, 4), 1.5)).is_err());
        assert!(ImageSlice::ingest(Array2::from_elem((4, 4), f64::NAN)).is_err());
        // decoded images may exceed the range
        let _ = ImageSlice::from_decoded(Array2::from_elem((4, 4), 3.0));
    }

    #[test]
    fn config_validation() {
        assert!(DiffAEConfig::desk().validate().is_ok());
        assert!(DiffAEConfig::paper().validate().is_ok());
        let mut c = tiny_config();
        assert!(c.validate().is_ok());
        c.image_size = 20; // not divisible by 8
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.channel_mults = vec![1, 2]; // encoder needs three stages
        assert!(c.validate().is_err());
    }

    #[test]
    fn encode_is_deterministic_and_order_preserving() {
        let cfg = tiny_config();
        let model = DiffAE::init(&cfg).unwrap();
        let imgs: Vec<ImageSlice> = (0..3)
            .map(|k| {
                ImageSlice::from_decoded(Array2::from_shape_fn((16, 16), |(i, j)| {
                    ((i + j + k) as f64 * 0.37).sin() * 0.5
                }))
            })
            .collect();
        let z0 = model.encode(&imgs[0]).unwrap();
        let z0_again = model.encode(&imgs[0]).unwrap();
        assert_eq!(z0, z0_again);
        assert_eq!(z0.len(), cfg.code_dim);

        let batch = model.encode_batch(&imgs).unwrap();
        assert_eq!(batch.dim(), (3, cfg.code_dim));
        for (a, b) in batch.row(0).iter().zip(z0.values().iter()) {
            assert_eq!(a, b, "batch row 0 must equal single encode");
        }
        let z2 = model.encode(&imgs[2]).unwrap();
        for (a, b) in batch.row(2).iter().zip(z2.values().iter()) {
            assert_eq!(a, b, "batch row order preserved");
        }
    }

    #[test]
    fn untrained_predictor_outputs_zeros() {
        // zero-initialized output conv => identically zero prediction
        let cfg = tiny_config();
        let model = DiffAE::init(&cfg).unwrap();
        let x = ImageSlice::from_decoded(Array2::from_shape_fn((16, 16), |(i, j)| {
            ((i * 16 + j) as f64 * 0.01).cos()
        }));
        let z = model.encode(&x).unwrap();
        let eps = model.predict_noise(&x, 5, &z).unwrap();
        assert_eq!(eps.shape(), x.shape());
        assert!(eps.pixels().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_params_and_schedule() {
        let cfg = tiny_config();
        let model = DiffAE::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diffae.ckpt");
        let record = TrainRecord {
            steps: 3,
            initial_loss: 1.0,
            final_loss: 0.5,
            loss_curve: vec![(1, 1.0), (3, 0.5)],
        };
        model.save(&path, Some(&record)).unwrap();
        let (loaded, rec) = DiffAE::load(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(rec.unwrap().steps, 3);
        for (a, b) in model
            .encoder
            .params()
            .into_iter()
            .chain(model.unet.params())
            .zip(loaded.encoder.params().into_iter().chain(loaded.unet.params()))
        {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value, "param {} must round-trip bitwise", a.name);
        }
        // encode agrees bitwise after reload
        let x = ImageSlice::from_decoded(Array2::from_shape_fn((16, 16), |(i, j)| {
            ((i * 3 + j) as f64 * 0.05).sin() * 0.8
        }));
        assert_eq!(model.encode(&x).unwrap(), loaded.encode(&x).unwrap());
    }

    #[test]
    fn checkpoint_rejects_wrong_kind() {
        let ckpt = crate::ckpt::Checkpoint::new(serde_json::json!({"kind": "teacher"}));
        assert!(DiffAE::from_checkpoint(&ckpt).is_err());
    }

    #[test]
    fn predict_noise_rejects_bad_t() {
        let cfg = tiny_config();
        let model = DiffAE::init(&cfg).unwrap();
        let x = ImageSlice::from_decoded(Array2::zeros((16, 16)));
        let z = model.encode(&x).unwrap();
        assert!(model.predict_noise(&x, 0, &z).is_err());
        assert!(model.predict_noise(&x, 11, &z).is_err());
        assert!(model.predict_noise(&x, 10, &z).is_ok());
    }
}
