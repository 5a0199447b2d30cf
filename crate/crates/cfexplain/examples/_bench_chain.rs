use cfexplain::agent::{build_agent, distill_on_inputs, prepare_distill_inputs, DistillObjective};
use cfexplain::config::RunConfig;
use cfexplain::data::{generate_synthetic_dataset, Split};
use cfexplain::diffae::train_diffae;
use cfexplain::eval::{alignment_metrics, criteria_report, render_alignment_table, CriteriaConfig};
use cfexplain::teacher::{train_teacher, QuerySample};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dsteps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let nq: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(50);
    let mut cfg = RunConfig::desk();
    cfg.data.n = 5000;
    cfg.diffae.train_steps = dsteps;

    let t0 = Instant::now();
    let ds = generate_synthetic_dataset(&cfg.data).unwrap();
    println!("[{:6.1}s] data: {} samples", t0.elapsed().as_secs_f64(), ds.samples.len());

    let (diffae, rec) = train_diffae(&ds.split_slices(Split::Train), &cfg.diffae).unwrap();
    println!("[{:6.1}s] diffae: loss {:.4}->{:.4}", t0.elapsed().as_secs_f64(), rec.initial_loss, rec.final_loss);

    let train: Vec<QuerySample> = ds.split(Split::Train).iter().map(|s| QuerySample::from_sample(s)).collect();
    let val: Vec<QuerySample> = ds.split(Split::Val).iter().map(|s| QuerySample::from_sample(s)).collect();
    let (teacher, trec) = train_teacher(&train, &val, &cfg.teacher).unwrap();
    let best = trec.best();
    println!("[{:6.1}s] teacher: epoch {} val acc {:.4} sens {:.4} spec {:.4}",
        t0.elapsed().as_secs_f64(), best.epoch, best.val_accuracy, best.val_sensitivity, best.val_specificity);

    let inputs = prepare_distill_inputs(&diffae, &teacher, &train).unwrap();
    println!("[{:6.1}s] distill inputs encoded", t0.elapsed().as_secs_f64());
    let test: Vec<QuerySample> = ds.split(Split::Test).iter().map(|s| QuerySample::from_sample(s)).collect();
    let mut agents = Vec::new();
    let mut reports = Vec::new();
    for obj in DistillObjective::ALL {
        let mut agent = build_agent(&teacher, teacher.config.k, diffae.config.code_dim, cfg.distill.seed).unwrap();
        let drec = distill_on_inputs(&mut agent, &inputs, obj, &cfg.distill).unwrap();
        agent.objective = Some(obj);
        let rep = alignment_metrics(&agent, &diffae, &teacher, &test, "test").unwrap();
        println!("[{:6.1}s] {obj}: loss {:.4}->{:.4}", t0.elapsed().as_secs_f64(), drec.initial_loss, drec.final_loss);
        agents.push(agent);
        reports.push(rep);
    }
    println!("{}", render_alignment_table(&reports));

    let queries: Vec<&_> = ds.split(Split::Test).into_iter().take(nq).collect();
    let crit = criteria_report(&queries, &diffae, &agents[1], &teacher, &CriteriaConfig::default()).unwrap();
    println!("[{:6.1}s] criteria over {} queries:", t0.elapsed().as_secs_f64(), crit.n_queries);
    println!("{}", serde_json::to_string_pretty(&crit).unwrap());
}
