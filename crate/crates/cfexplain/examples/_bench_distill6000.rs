use cfexplain::agent::{build_agent, distill_on_inputs, prepare_distill_inputs, DistillConfig, DistillObjective};
use cfexplain::config::RunConfig;
use cfexplain::data::{generate_synthetic_dataset, Split};
use cfexplain::diffae::DiffAE;
use cfexplain::eval::{alignment_metrics, criteria_report};
use cfexplain::teacher::{QuerySample, Teacher};
use std::path::Path;
use std::time::Instant;

fn main() {
    let cfg = RunConfig::desk();
    let t0 = Instant::now();
    let ds = generate_synthetic_dataset(&cfg.data).unwrap();
    let diffae = DiffAE::load(Path::new("/tmp/probe6000-diffae.ckpt")).unwrap().0;
    let teacher = Teacher::load(Path::new("/tmp/probe6000-teacher.ckpt")).unwrap().0;

    let train: Vec<QuerySample> = ds.split(Split::Train).iter().map(|s| QuerySample::from_sample(s)).collect();
    let test: Vec<QuerySample> = ds.split(Split::Test).iter().map(|s| QuerySample::from_sample(s)).collect();
    let inputs = prepare_distill_inputs(&diffae, &teacher, &train).unwrap();
    println!("[{:6.1}s] inputs ready", t0.elapsed().as_secs_f64());

    let variants: Vec<(&str, DistillConfig)> = vec![
        ("flat  1e-3/300", DistillConfig { learning_rate: 1e-3, epochs: 300, cosine_decay: false, ..cfg.distill.clone() }),
        ("cos   1e-3/300", DistillConfig { learning_rate: 1e-3, epochs: 300, cosine_decay: true, ..cfg.distill.clone() }),
        ("cos   3e-3/300", DistillConfig { learning_rate: 3e-3, epochs: 300, cosine_decay: true, ..cfg.distill.clone() }),
        ("cos   3e-3/600", DistillConfig { learning_rate: 3e-3, epochs: 600, cosine_decay: true, ..cfg.distill.clone() }),
    ];
    let queries: Vec<&_> = ds.split(Split::Test).into_iter().take(64).collect();

    for (name, dc) in &variants {
        let mut accs = Vec::new();
        let mut kls = Vec::new();
        let mut l1_agent = None;
        for objective in DistillObjective::ALL {
            let mut agent = build_agent(&teacher, teacher.config.k, diffae.config.code_dim, dc.seed).unwrap();
            distill_on_inputs(&mut agent, &inputs, objective, dc).unwrap();
            agent.objective = Some(objective);
            let rep = alignment_metrics(&agent, &diffae, &teacher, &test, "test").unwrap();
            accs.push(rep.accuracy);
            kls.push(rep.kl_divergence);
            if objective == DistillObjective::L1Feature {
                l1_agent = Some(agent);
            }
        }
        let spread = accs.iter().cloned().fold(f64::MIN, f64::max)
            - accs.iter().cloned().fold(f64::MAX, f64::min);
        let crit = criteria_report(&queries, &diffae, l1_agent.as_ref().unwrap(), &teacher, &cfg.eval).unwrap();
        let obs = crit.mean_observability.unwrap();
        println!(
            "[{:6.1}s] {name}: acc mse/l1/kl {:.4}/{:.4}/{:.4} spread {:.4} | maxKL {:.4} | obs {:.4} base {:.4} ({:.2}x) validity {:.4}",
            t0.elapsed().as_secs_f64(),
            accs[0], accs[1], accs[2], spread,
            kls.iter().cloned().fold(f64::MIN, f64::max),
            obs, crit.observability_baseline, obs / crit.observability_baseline,
            crit.validity,
        );
    }
}
