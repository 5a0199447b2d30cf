//! The black-box classifier being explained: a small convolutional network
//! exposing its penultimate features and raw class logits.
//!
//! Only (features, logits) cross the interface to the explainer, so the
//! backbone is a preset choice: four stride-2 conv blocks with GroupNorm and
//! SiLU, global average pooling, and a linear head. Channel widths are
//! base * {1, 2, 4, 8}; the penultimate dimension is F = 8 * base.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticSample;
use crate::diffae::ImageSlice;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, silu, silu_backward, Adam, Conv2d, ConvCache,
    GroupNorm, GroupNormCache, Linear, LinearCache, Param,
};

const NORM_GROUPS: usize = 8;
const N_BLOCKS: usize = 4;

/// One classifier input: K slices (stacked as channels) and a binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub slices: Vec<ImageSlice>,
    pub label: usize,
}

impl QuerySample {
    pub fn from_sample(s: &SyntheticSample) -> Self {
        QuerySample { slices: s.slices.clone(), label: s.label }
    }
}

/// Penultimate features and raw (unnormalized) class logits. Logits stay
/// logits: near-equal or negative values are valid outputs and are never
/// post-processed here.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub features: Array1<f32>,
    pub logits: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub image_size: usize,
    /// Slices per query, stacked as input channels.
    pub k: usize,
    /// First-block width; the penultimate feature dimension is 8x this.
    pub base_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TeacherConfig {
    /// Desk scale: 32x32, K=1, F=256.
    pub fn desk() -> Self {
        TeacherConfig {
            image_size: 32,
            k: 1,
            base_channels: 32,
            epochs: 6,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }

    /// Reference recipe: F=1024 penultimate width, learning rate 1e-6,
    /// batch 16, 100 epochs, K=4 slices at 256x256.
    pub fn paper() -> Self {
        TeacherConfig {
            image_size: 256,
            k: 4,
            base_channels: 128,
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-6,
            seed: 0,
        }
    }

    /// Penultimate feature dimension F.
    pub fn feature_dim(&self) -> usize {
        self.base_channels * 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % (1 << N_BLOCKS) != 0 {
            return Err(Error::Config(format!(
                "teacher image size {} must be divisible by {}",
                self.image_size,
                1 << N_BLOCKS
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.base_channels == 0 || self.base_channels % NORM_GROUPS != 0 {
            return Err(Error::Config(format!(
                "base_channels must be a positive multiple of {NORM_GROUPS}"
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "epochs, batch size, and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The trained black box. Immutable after training/loading; forward passes
/// are pure functions of (parameters, input).
pub struct Teacher {
    convs: Vec<Conv2d>,
    gns: Vec<GroupNorm>,
    head: Linear,
    pub config: TeacherConfig,
}

struct BlockCache {
    conv: ConvCache,
    gn: GroupNormCache,
    pre_act: Array4<f32>,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    last_hw: (usize, usize),
    head: LinearCache,
}

impl Teacher {
    pub fn init(config: &TeacherConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut convs = Vec::with_capacity(N_BLOCKS);
        let mut gns = Vec::with_capacity(N_BLOCKS);
        let mut c_in = config.k;
        for b in 0..N_BLOCKS {
            let c_out = config.base_channels << b;
            convs.push(Conv2d::new(&mut rng, &format!("teacher.conv{b}"), c_in, c_out, 3, 2, 1));
            gns.push(GroupNorm::new(&format!("teacher.gn{b}"), NORM_GROUPS, c_out));
            c_in = c_out;
        }
        let head = Linear::new(&mut rng, "teacher.head", config.feature_dim(), 2);
        Ok(Teacher { convs, gns, head, config: config.clone() })
    }

    /// Frozen classification head (weights [2, F], bias [2]) that the agent
    /// copies verbatim.
    pub fn head_weights(&self) -> (&ArrayD<f32>, &ArrayD<f32>) {
        (&self.head.weight.value, &self.head.bias.value)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = Vec::new();
        for (c, g) in self.convs.iter().zip(&self.gns) {
            ps.extend(c.params());
            ps.extend(g.params());
        }
        ps.extend(self.head.params());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = Vec::new();
        for (c, g) in self.convs.iter_mut().zip(self.gns.iter_mut()) {
            ps.extend(c.params_mut());
            ps.extend(g.params_mut());
        }
        ps.extend(self.head.params_mut());
        ps
    }

    fn check_sample(&self, slices: &[ImageSlice]) -> Result<()> {
        if slices.len() != self.config.k {
            return Err(Error::shape(
                "query slices",
                self.config.k.to_string(),
                slices.len().to_string(),
            ));
        }
        let s = self.config.image_size;
        for x in slices {
            if x.shape() != (s, s) {
                return Err(Error::shape("query image", format!("{s}x{s}"), format!("{:?}", x.shape())));
            }
        }
        Ok(())
    }

    /// Stack queries into the network's [N, K, H, W] f32 layout.
    fn to_batch(&self, samples: &[&[ImageSlice]]) -> Array4<f32> {
        let s = self.config.image_size;
        let mut out = Array4::<f32>::zeros((samples.len(), self.config.k, s, s));
        for (n, slices) in samples.iter().enumerate() {
            for (k, slice) in slices.iter().enumerate() {
                out.index_axis_mut(Axis(0), n)
                    .index_axis_mut(Axis(0), k)
                    .assign(&slice.pixels().mapv(|v| v as f32));
            }
        }
        out
    }

    fn forward_cached(&self, x: Array4<f32>) -> (Array2<f32>, Array2<f32>, ForwardCache) {
        let mut h = x;
        let mut blocks = Vec::with_capacity(N_BLOCKS);
        for (conv, gn) in self.convs.iter().zip(&self.gns) {
            let (c_out, conv_cache) = conv.forward(h);
            let (g_out, gn_cache) = gn.forward(c_out);
            h = silu(&g_out);
            blocks.push(BlockCache { conv: conv_cache, gn: gn_cache, pre_act: g_out });
        }
        let (_, _, hh, ww) = h.dim();
        let features = global_avg_pool(&h.view());
        let (logits, head_cache) = self.head.forward(features.clone());
        (features, logits, ForwardCache { blocks, last_hw: (hh, ww), head: head_cache })
    }

    fn backward(&mut self, cache: ForwardCache, g_logits: &Array2<f32>) {
        let g_feat = self.head.backward(cache.head, &g_logits.view());
        let (h, w) = cache.last_hw;
        let mut g = global_avg_pool_backward(&g_feat.view(), h, w);
        for (block, (conv, gn)) in cache
            .blocks
            .into_iter()
            .zip(self.convs.iter_mut().zip(self.gns.iter_mut()))
            .rev()
        {
            g = silu_backward(&block.pre_act, &g);
            g = gn.backward(block.gn, &g.view());
            g = conv.backward(block.conv, &g.view());
        }
    }

    /// Features and logits for a whole batch; rows pair with inputs.
    pub fn forward_batch(&self, samples: &[&QuerySample]) -> Result<(Array2<f32>, Array2<f32>)> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in samples {
            self.check_sample(&s.slices)?;
        }
        let views: Vec<&[ImageSlice]> = samples.iter().map(|s| s.slices.as_slice()).collect();
        let x = self.to_batch(&views);
        let (features, logits, _) = self.forward_cached(x);
        Ok((features, logits))
    }

    /// Forward pass on raw slices (no label needed), for scoring decoded
    /// counterfactuals.
    pub fn forward_slices(&self, slices: &[ImageSlice]) -> Result<TeacherOutput> {
        self.check_sample(slices)?;
        let x = self.to_batch(&[slices]);
        let (features, logits, _) = self.forward_cached(x);
        Ok(TeacherOutput {
            features: features.row(0).to_owned(),
            logits: logits.row(0).to_owned(),
        })
    }

    pub fn forward(&self, sample: &QuerySample) -> Result<TeacherOutput> {
        self.forward_slices(&sample.slices)
    }

    // -- persistence --------------------------------------------------------

    pub fn to_checkpoint(&self, record: Option<&TeacherTrainRecord>) -> Result<crate::ckpt::Checkpoint> {
        let mut meta = serde_json::json!({
            "kind": "teacher",
            "config": self.config,
        });
        if let Some(r) = record {
            meta["train"] = serde_json::to_value(r)?;
        }
        let mut ckpt = crate::ckpt::Checkpoint::new(meta);
        for p in self.params() {
            ckpt.insert_f32(&p.name, p.value.clone());
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(
        ckpt: &crate::ckpt::Checkpoint,
    ) -> Result<(Self, Option<TeacherTrainRecord>)> {
        let kind: String = ckpt.meta_field("kind")?;
        if kind != "teacher" {
            return Err(Error::Checkpoint(format!("expected a teacher checkpoint, got '{kind}'")));
        }
        let config: TeacherConfig = ckpt.meta_field("config")?;
        let mut model = Teacher::init(&config)?;
        for p in model.params_mut() {
            p.load(ckpt.tensor_f32(&p.name)?.clone())?;
        }
        let record = match ckpt.meta.get("train") {
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| Error::Checkpoint(format!("train record: {e}")))?,
            ),
            None => None,
        };
        Ok((model, record))
    }

    pub fn save(&self, path: &std::path::Path, record: Option<&TeacherTrainRecord>) -> Result<()> {
        self.to_checkpoint(record)?.write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Option<TeacherTrainRecord>)> {
        Self::from_checkpoint(&crate::ckpt::Checkpoint::read(path)?)
    }
}

/// Per-epoch validation metrics; model selection takes the epoch with the
/// highest sensitivity + specificity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_sensitivity: f64,
    pub val_specificity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherTrainRecord {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

impl TeacherTrainRecord {
    pub fn best(&self) -> &EpochMetrics {
        &self.epochs[self.best_epoch - 1]
    }
}

fn check_two_classes(samples: &[&QuerySample], what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if samples.iter().any(|s| s.label > 1) {
        return Err(Error::InvalidArgument(format!("{what} labels must be in {{0, 1}}")));
    }
    let first = samples[0].label;
    if samples.iter().all(|s| s.label == first) {
        return Err(Error::SingleClass(format!(
            "{what} split contains only class {first}; AUC and sensitivity/specificity are undefined"
        )));
    }
    Ok(())
}

/// Validation accuracy/sensitivity/specificity of argmax predictions.
/// Positive class is 1.
fn validation_metrics(teacher: &Teacher, val: &[&QuerySample]) -> Result<(f64, f64, f64)> {
    let mut counts = [[0usize; 2]; 2]; // [label][pred]
    for chunk in val.chunks(64) {
        let (_, logits) = teacher.forward_batch(chunk)?;
        for (s, row) in chunk.iter().zip(logits.rows()) {
            let pred = usize::from(row[1] > row[0]);
            counts[s.label][pred] += 1;
        }
    }
    let (tn, fp, fn_, tp) = (counts[0][0], counts[0][1], counts[1][0], counts[1][1]);
    let total = tn + fp + fn_ + tp;
    let accuracy = (tn + tp) as f64 / total as f64;
    let sensitivity = tp as f64 / (tp + fn_) as f64;
    let specificity = tn as f64 / (tn + fp) as f64;
    Ok((accuracy, sensitivity, specificity))
}

/// Cross-entropy training with per-epoch validation and best-epoch model
/// selection by sensitivity + specificity. Deterministic given config.seed.
pub fn train_teacher(
    train: &[QuerySample],
    val: &[QuerySample],
    config: &TeacherConfig,
) -> Result<(Teacher, TeacherTrainRecord)> {
    let train_refs: Vec<&QuerySample> = train.iter().collect();
    let val_refs: Vec<&QuerySample> = val.iter().collect();
    check_two_classes(&train_refs, "training")?;
    check_two_classes(&val_refs, "validation")?;

    let mut teacher = Teacher::init(config)?;
    let mut adam = Adam::new(config.learning_rate as f32);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x7e4c_4e55);

    let mut record = TeacherTrainRecord { epochs: Vec::new(), best_epoch: 0 };
    let mut best_score = f64::NEG_INFINITY;
    let mut best_params: Vec<ArrayD<f32>> = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&QuerySample> = chunk.iter().map(|&i| &train[i]).collect();
            let views: Vec<&[ImageSlice]> = batch.iter().map(|s| s.slices.as_slice()).collect();
            let x = teacher.to_batch(&views);
            let (_, logits, cache) = teacher.forward_cached(x);

            let n = batch.len();
            let mut g_logits = Array2::<f32>::zeros((n, 2));
            let mut loss = 0.0f64;
            for (i, s) in batch.iter().enumerate() {
                let (l0, l1) = (logits[[i, 0]] as f64, logits[[i, 1]] as f64);
                let m = l0.max(l1);
                let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
                loss += lse - if s.label == 1 { l1 } else { l0 };
                let p0 = (l0 - lse).exp();
                let p1 = (l1 - lse).exp();
                g_logits[[i, 0]] = (p0 - f64::from(s.label == 0)) as f32 / n as f32;
                g_logits[[i, 1]] = (p1 - f64::from(s.label == 1)) as f32 / n as f32;
            }
            loss /= n as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: adam.steps_taken() as usize + 1, loss });
            }
            epoch_loss += loss;
            n_batches += 1;

            teacher.backward(cache, &g_logits);
            adam.step(&mut teacher.params_mut());
        }

        let (acc, sens, spec) = validation_metrics(&teacher, &val_refs)?;
        record.epochs.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / n_batches as f64,
            val_accuracy: acc,
            val_sensitivity: sens,
            val_specificity: spec,
        });
        if sens + spec > best_score {
            best_score = sens + spec;
            record.best_epoch = epoch;
            best_params = teacher.params().iter().map(|p| p.value.clone()).collect();
        }
    }

    for (p, v) in teacher.params_mut().into_iter().zip(best_params) {
        p.value = v;
    }
    Ok((teacher, record))
}
