//! Train the full stack end to end at toy scale — diffusion autoencoder,
//! teacher classifier, distilled linear agent — and save the checkpoints.
//!
//!     cargo run --release -p cfexplain --example train_pipeline

use cfexplain::agent::{build_agent, distill, DistillObjective};
use cfexplain::data::{generate_synthetic_dataset, save_dataset, Split};
use cfexplain::diffae::train_diffae;
use cfexplain::teacher::{train_teacher, QuerySample};

mod common;

fn main() -> cfexplain::Result<()> {
    let out = common::out_dir("train_pipeline")?;

    let dataset = generate_synthetic_dataset(&common::tiny_data_config())?;
    save_dataset(&dataset, &out.join("data"))?;
    println!("[1/4] dataset: {} samples -> {}", dataset.samples.len(), out.join("data").display());

    let train_slices = dataset.split_slices(Split::Train);
    let (diffae, diffae_record) = train_diffae(&train_slices, &common::tiny_diffae_config())?;
    println!(
        "[2/4] diffae: {} steps, denoising loss {:.4} -> {:.4}",
        diffae_record.steps, diffae_record.initial_loss, diffae_record.final_loss
    );

    let train: Vec<QuerySample> =
        dataset.split(Split::Train).iter().map(|s| QuerySample::from_sample(s)).collect();
    let val: Vec<QuerySample> =
        dataset.split(Split::Val).iter().map(|s| QuerySample::from_sample(s)).collect();
    let (teacher, teacher_record) = train_teacher(&train, &val, &common::tiny_teacher_config())?;
    let best = teacher_record.best();
    println!(
        "[3/4] teacher: best epoch {} of {}, val accuracy {:.3}, sensitivity {:.3}, specificity {:.3}",
        best.epoch,
        teacher_record.epochs.len(),
        best.val_accuracy,
        best.val_sensitivity,
        best.val_specificity
    );

    let agent = build_agent(&teacher, teacher.config.k, diffae.config.code_dim, 11)?;
    let (agent, record) = distill(
        agent,
        &diffae,
        &teacher,
        &train,
        DistillObjective::L1Feature,
        &common::tiny_distill_config(),
    )?;
    println!(
        "[4/4] agent (l1): {} steps, loss {:.4} -> {:.4}",
        record.steps, record.initial_loss, record.final_loss
    );

    diffae.save(&out.join("diffae.ckpt"), Some(&diffae_record))?;
    teacher.save(&out.join("teacher.ckpt"), Some(&teacher_record))?;
    agent.save(&out.join("agent.ckpt"), Some(&record))?;
    println!();
    println!("checkpoints written to {}", out.display());
    Ok(())
}
