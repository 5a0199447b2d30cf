//! Explain one test query: sweep the auto-scaled alpha grid, write the
//! original / reconstruction / counterfactual / heatmap PNG strip, and print
//! both models' scores at each alpha.
//!
//!     cargo run --release -p cfexplain --example explain_query

use cfexplain::agent::DistillObjective;
use cfexplain::counterfactual::{alpha_sweep, auto_alpha_grid, smooth_heatmap, XtMode};
use cfexplain::data::Split;
use cfexplain::render::{save_heatmap_png, save_image_png};
use cfexplain::teacher::QuerySample;

mod common;

fn main() -> cfexplain::Result<()> {
    let out = common::out_dir("explain_query")?;
    println!("training the tiny pipeline (a few seconds)...");
    let p = common::train_tiny_pipeline(DistillObjective::L1Feature)?;

    let target = 1usize;
    let sample = p.dataset.split(Split::Test)[0];
    let query = QuerySample::from_sample(sample);
    println!("query: sample {} with label {}, target class {target}", sample.id, sample.label);

    // alpha_k = k * c / ||g||^2 moves the agent's target logit by exactly k*c
    let grid = auto_alpha_grid(&p.agent, target, 1.0)?;
    let sweep = alpha_sweep(&query, target, &grid, &p.diffae, &p.agent, &p.teacher, XtMode::Invert, 0)?;

    save_image_png(&out.join("original.png"), &query.slices[0])?;
    save_image_png(&out.join("reconstruction.png"), &sweep.reconstruction().images[0])?;

    println!();
    println!("{:>12} {:>14} {:>14} {:>12}", "alpha", "agent logit1", "teacher logit1", "max |heat|");
    for (idx, rec) in sweep.records.iter().enumerate() {
        let heat = smooth_heatmap(&rec.heatmaps[0], 1.0);
        let max_heat = heat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        println!(
            "{:>12.4} {:>14.4} {:>14.4} {:>12.4}",
            rec.alpha, rec.agent_logits[1], rec.teacher_logits[1], max_heat
        );
        if rec.alpha != 0.0 {
            save_image_png(&out.join(format!("cf{idx:02}_alpha{:+.3}.png", rec.alpha)), &rec.images[0])?;
            save_heatmap_png(&out.join(format!("heat{idx:02}_alpha{:+.3}.png", rec.alpha)), &heat)?;
        }
    }
    println!();
    println!("PNG strip written to {}", out.display());
    println!("(positive alphas push toward class {target}; the heatmap is the");
    println!("signed counterfactual-minus-reconstruction difference)");
    Ok(())
}
