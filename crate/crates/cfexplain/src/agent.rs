//! The two-layer affine agent distilled from the teacher: an alignment map
//! from concatenated semantic codes into the teacher's feature space,
//! classified by the teacher's frozen head.
//!
//! Both layers are affine with no nonlinearity, so the class-score gradient
//! dy'_i/dq is the constant vector W_align^T w_head_i: the closed-form
//! manipulation direction. The agent computes in f64; the teacher's f32 head
//! is widened losslessly, so the freeze invariant stays bitwise checkable.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::diffae::{DiffAE, SemanticCode};
use crate::error::{Error, Result};
use crate::teacher::{QuerySample, Teacher};

/// Distillation objective, per the reference ablation: feature-space L1 or
/// MSE, or KL between softmax outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillObjective {
    #[serde(rename = "l1")]
    L1Feature,
    #[serde(rename = "mse")]
    MseFeature,
    #[serde(rename = "kl")]
    KlOutput,
}

impl DistillObjective {
    pub const ALL: [DistillObjective; 3] =
        [DistillObjective::MseFeature, DistillObjective::L1Feature, DistillObjective::KlOutput];

    pub fn name(&self) -> &'static str {
        match self {
            DistillObjective::L1Feature => "l1",
            DistillObjective::MseFeature => "mse",
            DistillObjective::KlOutput => "kl",
        }
    }
}

impl std::str::FromStr for DistillObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(DistillObjective::L1Feature),
            "mse" => Ok(DistillObjective::MseFeature),
            "kl" => Ok(DistillObjective::KlOutput),
            other => Err(Error::InvalidArgument(format!(
                "unknown objective '{other}' (expected l1, mse, or kl)"
            ))),
        }
    }
}

impl std::fmt::Display for DistillObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Concatenation q of the K per-slice semantic codes, in slice order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeature(Array1<f64>);

impl LatentFeature {
    pub fn from_values(values: Array1<f64>) -> Self {
        LatentFeature(values)
    }

    pub fn from_codes(codes: &[SemanticCode]) -> Self {
        let mut v = Vec::new();
        for c in codes {
            v.extend(c.values().iter().map(|x| *x as f64));
        }
        LatentFeature(Array1::from(v))
    }

    /// Split back into K codes of dimension d (f32, decoder-native).
    pub fn to_codes(&self, k: usize, d: usize) -> Result<Vec<SemanticCode>> {
        if self.0.len() != k * d {
            return Err(Error::shape("latent feature", format!("{}", k * d), self.0.len().to_string()));
        }
        Ok((0..k)
            .map(|i| {
                SemanticCode::from_values(
                    self.0.slice(ndarray::s![i * d..(i + 1) * d]).mapv(|v| v as f32),
                )
            })
            .collect())
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Trainable alignment layer + frozen classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    /// [F, K*d], trainable.
    pub align_w: Array2<f64>,
    /// [F], trainable.
    pub align_b: Array1<f64>,
    /// [2, F], copied bit-for-bit from the teacher and never updated.
    pub head_w: Array2<f64>,
    /// [2], frozen alongside the head weights.
    pub head_b: Array1<f64>,
    pub k: usize,
    pub d: usize,
    pub objective: Option<DistillObjective>,
    /// SHA-256 of the teacher checkpoint this agent was distilled from.
    pub teacher_digest: Option<String>,
    /// SHA-256 of the diffusion-autoencoder checkpoint supplying the codes.
    pub diffae_digest: Option<String>,
}

impl AgentModel {
    pub fn feature_dim(&self) -> usize {
        self.align_w.dim().0
    }

    pub fn input_dim(&self) -> usize {
        self.k * self.d
    }

    /// Frozen-head invariant: exact equality with the teacher's f32 head.
    /// f32 -> f64 widening is lossless, so narrowing back must be bitwise.
    pub fn head_matches_teacher(&self, teacher: &Teacher) -> bool {
        let (w, b) = teacher.head_weights();
        self.head_w.shape() == w.shape()
            && self.head_b.shape() == b.shape()
            && self
                .head_w
                .iter()
                .zip(w.iter())
                .all(|(a, t)| (*a as f32).to_bits() == t.to_bits() && *a == f64::from(*t))
            && self
                .head_b
                .iter()
                .zip(b.iter())
                .all(|(a, t)| (*a as f32).to_bits() == t.to_bits() && *a == f64::from(*t))
    }

    /// Digest compatibility gate used at explain/evaluate time.
    pub fn verify_compat(
        &self,
        teacher_digest: Option<&str>,
        diffae_digest: Option<&str>,
    ) -> Result<()> {
        if let (Some(stored), Some(given)) = (self.teacher_digest.as_deref(), teacher_digest) {
            if stored != given {
                return Err(Error::Incompatible(format!(
                    "agent was distilled from teacher {stored}, but the supplied teacher digest is {given}"
                )));
            }
        }
        if let (Some(stored), Some(given)) = (self.diffae_digest.as_deref(), diffae_digest) {
            if stored != given {
                return Err(Error::Incompatible(format!(
                    "agent was distilled with diffae {stored}, but the supplied diffae digest is {given}"
                )));
            }
        }
        Ok(())
    }

    // -- persistence ---------------------------------------------------------

    pub fn to_checkpoint(&self, record: Option<&DistillRecord>) -> Result<crate::ckpt::Checkpoint> {
        let mut meta = serde_json::json!({
            "kind": "agent",
            "k": self.k,
            "d": self.d,
            "feature_dim": self.feature_dim(),
            "objective": self.objective,
            "teacher_digest": self.teacher_digest,
            "diffae_digest": self.diffae_digest,
        });
        if let Some(r) = record {
            meta["train"] = serde_json::to_value(r)?;
        }
        let mut ckpt = crate::ckpt::Checkpoint::new(meta);
        ckpt.insert_f64("agent.align.w", self.align_w.clone().into_dyn());
        ckpt.insert_f64("agent.align.b", self.align_b.clone().into_dyn());
        ckpt.insert_f64("agent.head.w", self.head_w.clone().into_dyn());
        ckpt.insert_f64("agent.head.b", self.head_b.clone().into_dyn());
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &crate::ckpt::Checkpoint) -> Result<Self> {
        let kind: String = ckpt.meta_field("kind")?;
        if kind != "agent" {
            return Err(Error::Checkpoint(format!("expected an agent checkpoint, got '{kind}'")));
        }
        let k: usize = ckpt.meta_field("k")?;
        let d: usize = ckpt.meta_field("d")?;
        let f: usize = ckpt.meta_field("feature_dim")?;
        let objective: Option<DistillObjective> = ckpt.meta_field("objective")?;
        let teacher_digest: Option<String> = ckpt.meta_field("teacher_digest")?;
        let diffae_digest: Option<String> = ckpt.meta_field("diffae_digest")?;
        let as2 = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let t = ckpt.tensor_f64(name)?;
            if t.shape() != [rows, cols] {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected [{rows}, {cols}]",
                    t.shape()
                )));
            }
            Ok(t.clone().into_dimensionality().expect("shape checked"))
        };
        let as1 = |name: &str, len: usize| -> Result<Array1<f64>> {
            let t = ckpt.tensor_f64(name)?;
            if t.shape() != [len] {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected [{len}]",
                    t.shape()
                )));
            }
            Ok(t.clone().into_dimensionality().expect("shape checked"))
        };
        Ok(AgentModel {
            align_w: as2("agent.align.w", f, k * d)?,
            align_b: as1("agent.align.b", f)?,
            head_w: as2("agent.head.w", 2, f)?,
            head_b: as1("agent.head.b", 2)?,
            k,
            d,
            objective,
            teacher_digest,
            diffae_digest,
        })
    }

    pub fn save(&self, path: &std::path::Path, record: Option<&DistillRecord>) -> Result<()> {
        self.to_checkpoint(record)?.write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&crate::ckpt::Checkpoint::read(path)?)
    }
}

/// Fresh agent: small random alignment layer, head copied from the teacher
/// and frozen.
pub fn build_agent(teacher: &Teacher, k: usize, d: usize, seed: u64) -> Result<AgentModel> {
    if k == 0 || d == 0 {
        return Err(Error::InvalidArgument("k and d must be positive".into()));
    }
    let f = teacher.config.feature_dim();
    let (w, b) = teacher.head_weights();
    if w.shape() != [2, f] || b.shape() != [2] {
        return Err(Error::shape("teacher head", format!("[2, {f}] / [2]"), format!("{:?} / {:?}", w.shape(), b.shape())));
    }
    let head_w = Array2::from_shape_fn((2, f), |(i, j)| f64::from(w[[i, j]]));
    let head_b = Array1::from_shape_fn(2, |i| f64::from(b[[i]]));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let scale = 1.0 / ((k * d) as f64).sqrt();
    let align_w = Array2::from_shape_fn((f, k * d), |_| rng.gen_range(-scale..=scale));
    let align_b = Array1::zeros(f);
    Ok(AgentModel {
        align_w,
        align_b,
        head_w,
        head_b,
        k,
        d,
        objective: None,
        teacher_digest: None,
        diffae_digest: None,
    })
}

/// Fully affine forward pass: aligned = W_a q + b_a, logits = W_h aligned + b_h.
pub fn agent_forward(agent: &AgentModel, q: &LatentFeature) -> Result<(Array1<f64>, Array1<f64>)> {
    if q.len() != agent.input_dim() {
        return Err(Error::shape("latent feature", agent.input_dim().to_string(), q.len().to_string()));
    }
    let aligned = agent.align_w.dot(q.values()) + &agent.align_b;
    let logits = agent.head_w.dot(&aligned) + &agent.head_b;
    Ok((aligned, logits))
}

/// Closed-form manipulation direction g_i = W_align^T w_head_i; constant in
/// q because the agent is affine.
pub fn manipulation_direction(agent: &AgentModel, class: usize) -> Result<Array1<f64>> {
    if class > 1 {
        return Err(Error::InvalidArgument(format!("class index {class} not in {{0, 1}}")));
    }
    Ok(agent.align_w.t().dot(&agent.head_w.row(class)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Cosine-decay the learning rate to zero over training. The L1 gradient
    /// is sign-valued, so with a flat rate Adam orbits the optimum instead of
    /// converging; decay lets every objective settle.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DistillConfig {
    pub fn desk() -> Self {
        DistillConfig { learning_rate: 1e-3, batch_size: 64, epochs: 300, cosine_decay: true, seed: 0 }
    }

    /// Reference recipe: learning rate 1e-4, batch 16, 100 epochs, flat rate.
    pub fn paper() -> Self {
        DistillConfig { learning_rate: 1e-4, batch_size: 16, epochs: 100, cosine_decay: false, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "distill learning rate, batch size, and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillRecord {
    pub objective: DistillObjective,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// (step, loss) samples, including the first and last step.
    pub loss_curve: Vec<(usize, f64)>,
}

/// f64 Adam for the two alignment tensors; the nn module's optimizer is
/// f32-native and the agent deliberately is not.
struct AdamF64 {
    step: usize,
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
}

impl AdamF64 {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(f: usize, kd: usize) -> Self {
        AdamF64 {
            step: 0,
            m_w: Array2::zeros((f, kd)),
            v_w: Array2::zeros((f, kd)),
            m_b: Array1::zeros(f),
            v_b: Array1::zeros(f),
        }
    }

    fn update(
        &mut self,
        lr: f64,
        w: &mut Array2<f64>,
        b: &mut Array1<f64>,
        gw: &Array2<f64>,
        gb: &Array1<f64>,
    ) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let c2 = 1.0 - Self::BETA2.powi(self.step as i32);
        ndarray::Zip::from(w)
            .and(&mut self.m_w)
            .and(&mut self.v_w)
            .and(gw)
            .for_each(|w, m, v, &g| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            });
        ndarray::Zip::from(b)
            .and(&mut self.m_b)
            .and(&mut self.v_b)
            .and(gb)
            .for_each(|w, m, v, &g| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            });
    }
}

fn softmax2(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let z = e0 + e1;
    (e0 / z, e1 / z)
}

/// Precomputed distillation targets: latent features q and the teacher's
/// features/logits for every sample.
pub struct DistillInputs {
    pub q: Array2<f64>,
    pub teacher_features: Array2<f64>,
    pub teacher_logits: Array2<f64>,
}

/// Encode every sample and run the teacher once; both models are frozen
/// during distillation, so the targets are computed up front.
pub fn prepare_distill_inputs(
    diffae: &DiffAE,
    teacher: &Teacher,
    samples: &[QuerySample],
) -> Result<DistillInputs> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = teacher.config.k;
    let d = diffae.config.code_dim;
    let n = samples.len();
    let mut q = Array2::<f64>::zeros((n, k * d));
    let mut feats = Array2::<f64>::zeros((n, teacher.config.feature_dim()));
    let mut logits = Array2::<f64>::zeros((n, 2));
    for (chunk_idx, chunk) in samples.chunks(64).enumerate() {
        let base = chunk_idx * 64;
        let flat: Vec<crate::diffae::ImageSlice> =
            chunk.iter().flat_map(|s| s.slices.iter().cloned()).collect();
        let codes = diffae.encode_batch(&flat)?;
        if codes.dim().1 != d {
            return Err(Error::shape("semantic code", d.to_string(), codes.dim().1.to_string()));
        }
        let refs: Vec<&QuerySample> = chunk.iter().collect();
        let (f32_feats, f32_logits) = teacher.forward_batch(&refs)?;
        for (i, _s) in chunk.iter().enumerate() {
            for slice_idx in 0..k {
                let row = codes.row(i * k + slice_idx);
                for (j, v) in row.iter().enumerate() {
                    q[[base + i, slice_idx * d + j]] = f64::from(*v);
                }
            }
            for (j, v) in f32_feats.row(i).iter().enumerate() {
                feats[[base + i, j]] = f64::from(*v);
            }
            for (j, v) in f32_logits.row(i).iter().enumerate() {
                logits[[base + i, j]] = f64::from(*v);
            }
        }
    }
    Ok(DistillInputs { q, teacher_features: feats, teacher_logits: logits })
}

/// Optimize the alignment layer only; the head never changes. Returns the
/// updated agent and its loss record.
pub fn distill(
    mut agent: AgentModel,
    diffae: &DiffAE,
    teacher: &Teacher,
    samples: &[QuerySample],
    objective: DistillObjective,
    config: &DistillConfig,
) -> Result<(AgentModel, DistillRecord)> {
    config.validate()?;
    if agent.k != teacher.config.k || agent.d != diffae.config.code_dim {
        return Err(Error::Incompatible(format!(
            "agent expects K={} d={}, got teacher K={} diffae d={}",
            agent.k, agent.d, teacher.config.k, diffae.config.code_dim
        )));
    }
    if agent.feature_dim() != teacher.config.feature_dim() {
        return Err(Error::Incompatible(format!(
            "agent feature dim {} != teacher feature dim {}",
            agent.feature_dim(),
            teacher.config.feature_dim()
        )));
    }
    let inputs = prepare_distill_inputs(diffae, teacher, samples)?;
    let record = distill_on_inputs(&mut agent, &inputs, objective, config)?;
    Ok((agent, record))
}

/// Distillation core over precomputed inputs (exposed so evaluation code can
/// reuse encoded features across the three objectives).
pub fn distill_on_inputs(
    agent: &mut AgentModel,
    inputs: &DistillInputs,
    objective: DistillObjective,
    config: &DistillConfig,
) -> Result<DistillRecord> {
    config.validate()?;
    let n = inputs.q.dim().0;
    let f = agent.feature_dim();
    let kd = agent.input_dim();
    if inputs.q.dim().1 != kd || inputs.teacher_features.dim() != (n, f) {
        return Err(Error::shape(
            "distill inputs",
            format!("q [{n}, {kd}], features [{n}, {f}]"),
            format!("q {:?}, features {:?}", inputs.q.dim(), inputs.teacher_features.dim()),
        ));
    }

    let mut adam = AdamF64::new(f, kd);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0xd157_1111);
    let mut order: Vec<usize> = (0..n).collect();
    let total_steps = config.epochs * order.chunks(config.batch_size).count();
    let log_every = (total_steps / 200).max(1);
    let lr_at = |step: usize| {
        if config.cosine_decay {
            let frac = (step - 1) as f64 / total_steps as f64;
            config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        } else {
            config.learning_rate
        }
    };

    let mut curve = Vec::new();
    let mut initial = None;
    let mut last = 0.0;
    let mut step = 0usize;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len();
            let mut qb = Array2::<f64>::zeros((b, kd));
            for (r, &i) in chunk.iter().enumerate() {
                qb.row_mut(r).assign(&inputs.q.row(i));
            }
            let aligned = qb.dot(&agent.align_w.t()) + &agent.align_b;

            let (loss, g_aligned) = match objective {
                DistillObjective::L1Feature | DistillObjective::MseFeature => {
                    let mut diff = aligned;
                    for (r, &i) in chunk.iter().enumerate() {
                        let t = inputs.teacher_features.row(i);
                        diff.row_mut(r).zip_mut_with(&t, |a, b| *a -= b);
                    }
                    let scale = 1.0 / (b * f) as f64;
                    if objective == DistillObjective::L1Feature {
                        let loss = diff.iter().map(|v| v.abs()).sum::<f64>() * scale;
                        (loss, diff.mapv(|v| v.signum() * scale))
                    } else {
                        let loss = diff.iter().map(|v| v * v).sum::<f64>() * scale;
                        (loss, diff.mapv(|v| 2.0 * v * scale))
                    }
                }
                DistillObjective::KlOutput => {
                    let logits_a = aligned.dot(&agent.head_w.t()) + &agent.head_b;
                    let mut g_logits = Array2::<f64>::zeros((b, 2));
                    let mut loss = 0.0;
                    for (r, &i) in chunk.iter().enumerate() {
                        let (t0, t1) =
                            softmax2(inputs.teacher_logits[[i, 0]], inputs.teacher_logits[[i, 1]]);
                        let (a0, a1) = softmax2(logits_a[[r, 0]], logits_a[[r, 1]]);
                        loss += t0 * (t0.ln() - a0.ln()) + t1 * (t1.ln() - a1.ln());
                        g_logits[[r, 0]] = (a0 - t0) / b as f64;
                        g_logits[[r, 1]] = (a1 - t1) / b as f64;
                    }
                    (loss / b as f64, g_logits.dot(&agent.head_w))
                }
            };
            step += 1;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss });
            }
            if initial.is_none() {
                initial = Some(loss);
            }
            if step == 1 || step % log_every == 0 || step == total_steps {
                curve.push((step, loss));
            }
            last = loss;

            let gw = g_aligned.t().dot(&qb);
            let gb = g_aligned.sum_axis(Axis(0));
            adam.update(lr_at(step), &mut agent.align_w, &mut agent.align_b, &gw, &gb);
        }
    }
    agent.objective = Some(objective);
    Ok(DistillRecord {
        objective,
        steps: step,
        initial_loss: initial.unwrap_or(f64::NAN),
        final_loss: last,
        loss_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, DataConfig, Split};
    use crate::diffae::DiffAEConfig;
    use crate::teacher::{train_teacher, TeacherConfig};

    struct Fixture {
        diffae: DiffAE,
        teacher: Teacher,
        train: Vec<QuerySample>,
    }

    fn fixture() -> Fixture {
        let ds = generate_synthetic_dataset(&DataConfig {
            n: 40,
            image_size: 16,
            k: 1,
            class1_fraction: 0.5,
            train_fraction: 0.6,
            val_fraction: 0.2,
            seed: 9,
        })
        .unwrap();
        let train: Vec<QuerySample> =
            ds.split(Split::Train).into_iter().map(QuerySample::from_sample).collect();
        let val: Vec<QuerySample> =
            ds.split(Split::Val).into_iter().map(QuerySample::from_sample).collect();
        let diffae = DiffAE::init(&DiffAEConfig {
            image_size: 16,
            code_dim: 16,
            base_channels: 4,
            channel_mults: vec![1, 2, 2],
            t_steps: 10,
            beta_min: 0.01,
            beta_max: 0.2,
            ddim_steps: 5,
            train_steps: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 3,
        })
        .unwrap();
        let tcfg = TeacherConfig {
            image_size: 16,
            k: 1,
            base_channels: 8,
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 2,
        };
        let (teacher, _) = train_teacher(&train, &val, &tcfg).unwrap();
        Fixture { diffae, teacher, train }
    }

    #[test]
    fn build_copies_head_bitwise() {
        let fx = fixture();
        let agent = build_agent(&fx.teacher, 1, 16, 5).unwrap();
        assert!(agent.head_matches_teacher(&fx.teacher));
        assert_eq!(agent.align_w.dim(), (fx.teacher.config.feature_dim(), 16));
        assert_eq!(agent.align_b.len(), fx.teacher.config.feature_dim());
    }

    #[test]
    fn forward_is_affine() {
        let fx = fixture();
        let agent = build_agent(&fx.teacher, 1, 16, 5).unwrap();
        // q = 0: logits = W_h b_align + b_h
        let zero = LatentFeature::from_values(Array1::zeros(16));
        let (_, l0) = agent_forward(&agent, &zero).unwrap();
        let expect = agent.head_w.dot(&agent.align_b) + &agent.head_b;
        for (a, b) in l0.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // additivity of the linear part
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let q1 = LatentFeature::from_values(Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0)));
        let q2 = LatentFeature::from_values(Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0)));
        let qs = LatentFeature::from_values(q1.values() + q2.values());
        let (_, l1) = agent_forward(&agent, &q1).unwrap();
        let (_, l2) = agent_forward(&agent, &q2).unwrap();
        let (_, ls) = agent_forward(&agent, &qs).unwrap();
        for i in 0..2 {
            let lhs = ls[i] - l0[i];
            let rhs = (l1[i] - l0[i]) + (l2[i] - l0[i]);
            assert!(
                (lhs - rhs).abs() <= 1e-6 * (1.0 + rhs.abs()),
                "additivity violated: {lhs} vs {rhs}"
            );
        }
        // length check
        assert!(agent_forward(&agent, &LatentFeature::from_values(Array1::zeros(7))).is_err());
    }

    #[test]
    fn direction_matches_finite_differences_and_analytic_shift() {
        let fx = fixture();
        let agent = build_agent(&fx.teacher, 1, 16, 5).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for class in [0usize, 1] {
            let g = manipulation_direction(&agent, class).unwrap();
            let q = LatentFeature::from_values(Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0)));
            let (_, base) = agent_forward(&agent, &q).unwrap();
            let h = 1e-3;
            for j in [0usize, 5, 15] {
                let mut qp = q.values().clone();
                qp[j] += h;
                let (_, lp) = agent_forward(&agent, &LatentFeature::from_values(qp)).unwrap();
                let fd = (lp[class] - base[class]) / h;
                assert!(
                    (fd - g[j]).abs() <= 1e-4 * (1.0 + g[j].abs()),
                    "finite difference {fd} vs direction {}",
                    g[j]
                );
            }
            // y'(q + alpha g) - y'(q) = alpha ||g||^2
            let alpha = 0.37;
            let shifted = LatentFeature::from_values(q.values() + &(alpha * &g));
            let (_, ls) = agent_forward(&agent, &shifted).unwrap();
            let got = ls[class] - base[class];
            let want = alpha * g.dot(&g);
            assert!(
                (got - want).abs() <= 1e-5 * (1.0 + want.abs()),
                "analytic shift: {got} vs {want}"
            );
        }
        assert!(manipulation_direction(&agent, 2).is_err());
    }

    #[test]
    fn distill_improves_and_freezes_head() {
        let fx = fixture();
        let cfg = DistillConfig { learning_rate: 1e-2, batch_size: 8, epochs: 40, cosine_decay: true, seed: 0 };
        for objective in DistillObjective::ALL {
            let agent = build_agent(&fx.teacher, 1, 16, 5).unwrap();
            let (trained, record) =
                distill(agent, &fx.diffae, &fx.teacher, &fx.train, objective, &cfg).unwrap();
            assert!(trained.head_matches_teacher(&fx.teacher), "{objective}: head must stay frozen");
            assert_eq!(trained.objective, Some(objective));
            assert!(record.final_loss.is_finite());
            assert!(
                record.final_loss < record.initial_loss,
                "{objective}: loss should drop ({} -> {})",
                record.initial_loss,
                record.final_loss
            );
        }
    }

    #[test]
    fn distill_is_deterministic() {
        let fx = fixture();
        let cfg = DistillConfig { learning_rate: 1e-2, batch_size: 8, epochs: 5, cosine_decay: true, seed: 4 };
        let run = || {
            let agent = build_agent(&fx.teacher, 1, 16, 5).unwrap();
            distill(agent, &fx.diffae, &fx.teacher, &fx.train, DistillObjective::L1Feature, &cfg)
                .unwrap()
        };
        let (a1, r1) = run();
        let (a2, r2) = run();
        assert_eq!(a1, a2);
        assert_eq!(r1.final_loss.to_bits(), r2.final_loss.to_bits());
    }

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let fx = fixture();
        let mut agent = build_agent(&fx.teacher, 1, 16, 5).unwrap();
        agent.objective = Some(DistillObjective::KlOutput);
        agent.teacher_digest = Some("aa".repeat(32));
        agent.diffae_digest = Some("bb".repeat(32));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.ckpt");
        agent.save(&path, None).unwrap();
        let loaded = AgentModel::load(&path).unwrap();
        assert_eq!(agent, loaded);
        assert!(loaded.verify_compat(Some(&"aa".repeat(32)), Some(&"bb".repeat(32))).is_ok());
        let err = loaded.verify_compat(Some("cc"), None).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)), "{err}");
    }

    #[test]
    fn latent_feature_concat_and_split() {
        let c1 = SemanticCode::from_values(ndarray::arr1(&[1.0f32, 2.0]));
        let c2 = SemanticCode::from_values(ndarray::arr1(&[3.0f32, 4.0]));
        let q = LatentFeature::from_codes(&[c1.clone(), c2.clone()]);
        assert_eq!(q.values().as_slice().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        let codes = q.to_codes(2, 2).unwrap();
        assert_eq!(codes[0], c1);
        assert_eq!(codes[1], c2);
        assert!(q.to_codes(3, 2).is_err());
    }
}
