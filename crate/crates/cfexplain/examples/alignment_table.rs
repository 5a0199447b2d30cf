//! Distill one agent per objective (mse / l1 / kl) from the same teacher and
//! render the fidelity table comparing them on held-out data.
//!
//!     cargo run --release -p cfexplain --example alignment_table

use cfexplain::agent::{build_agent, distill_on_inputs, prepare_distill_inputs, DistillObjective};
use cfexplain::data::Split;
use cfexplain::eval::{alignment_metrics, render_alignment_table};
use cfexplain::teacher::QuerySample;

mod common;

fn main() -> cfexplain::Result<()> {
    println!("training the tiny pipeline (a few seconds)...");
    let p = common::train_tiny_pipeline(DistillObjective::MseFeature)?;

    let train: Vec<QuerySample> =
        p.dataset.split(Split::Train).iter().map(|s| QuerySample::from_sample(s)).collect();
    let test: Vec<QuerySample> =
        p.dataset.split(Split::Test).iter().map(|s| QuerySample::from_sample(s)).collect();

    // Encode once, reuse across the three objectives.
    let inputs = prepare_distill_inputs(&p.diffae, &p.teacher, &train)?;
    let mut reports = Vec::new();
    for objective in DistillObjective::ALL {
        let mut agent =
            build_agent(&p.teacher, p.teacher.config.k, p.diffae.config.code_dim, 11)?;
        let record = distill_on_inputs(&mut agent, &inputs, objective, &common::tiny_distill_config())?;
        println!("{objective}: loss {:.4} -> {:.4}", record.initial_loss, record.final_loss);
        reports.push(alignment_metrics(&agent, &p.diffae, &p.teacher, &test, "test")?);
    }

    println!();
    println!("{}", render_alignment_table(&reports));
    println!("metrics score the linear agent against the teacher's predicted");
    println!("labels on the test split; KL is teacher->agent on softmax outputs.");
    Ok(())
}
