//! Shared setup for the runnable examples: a deliberately tiny pipeline
//! (16x16 images, seconds of training) so each example stays standalone and
//! fast. Production-scale settings live in `config::RunConfig::desk()` /
//! `paper()`.
#![allow(dead_code)]

use std::path::PathBuf;

use cfexplain::agent::{build_agent, distill, AgentModel, DistillConfig, DistillObjective};
use cfexplain::data::{generate_synthetic_dataset, DataConfig, Dataset, Split};
use cfexplain::diffae::{train_diffae, DiffAE, DiffAEConfig};
use cfexplain::teacher::{train_teacher, QuerySample, Teacher, TeacherConfig};
use cfexplain::Result;

pub fn tiny_data_config() -> DataConfig {
    DataConfig {
        n: 48,
        image_size: 16,
        k: 1,
        class1_fraction: 0.5,
        train_fraction: 0.6,
        val_fraction: 0.2,
        seed: 7,
    }
}

pub fn tiny_diffae_config() -> DiffAEConfig {
    DiffAEConfig {
        image_size: 16,
        code_dim: 8,
        base_channels: 4,
        channel_mults: vec![1, 2, 2],
        t_steps: 50,
        beta_min: 0.01,
        beta_max: 0.2,
        ddim_steps: 5,
        train_steps: 60,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 3,
    }
}

pub fn tiny_teacher_config() -> TeacherConfig {
    TeacherConfig {
        image_size: 16,
        k: 1,
        base_channels: 8,
        epochs: 3,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 2,
    }
}

pub fn tiny_distill_config() -> DistillConfig {
    DistillConfig { learning_rate: 0.01, batch_size: 16, epochs: 40, cosine_decay: true, seed: 4 }
}

pub struct TinyPipeline {
    pub dataset: Dataset,
    pub diffae: DiffAE,
    pub teacher: Teacher,
    pub agent: AgentModel,
}

/// Generate data and train all three models with the tiny configs. Takes a
/// few seconds; every example that needs a trained stack calls this.
pub fn train_tiny_pipeline(objective: DistillObjective) -> Result<TinyPipeline> {
    let dataset = generate_synthetic_dataset(&tiny_data_config())?;
    let train_slices = dataset.split_slices(Split::Train);
    let (diffae, _) = train_diffae(&train_slices, &tiny_diffae_config())?;

    let train: Vec<QuerySample> =
        dataset.split(Split::Train).iter().map(|s| QuerySample::from_sample(s)).collect();
    let val: Vec<QuerySample> =
        dataset.split(Split::Val).iter().map(|s| QuerySample::from_sample(s)).collect();
    let (teacher, _) = train_teacher(&train, &val, &tiny_teacher_config())?;

    let agent = build_agent(&teacher, teacher.config.k, diffae.config.code_dim, 11)?;
    let (agent, _) = distill(agent, &diffae, &teacher, &train, objective, &tiny_distill_config())?;
    Ok(TinyPipeline { dataset, diffae, teacher, agent })
}

/// Per-example output directory under target/ so runs never dirty the tree.
pub fn out_dir(example: &str) -> Result<PathBuf> {
    let dir = PathBuf::from("target/example-output").join(example);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
