use cfexplain::agent::{build_agent, distill_on_inputs, prepare_distill_inputs, DistillConfig, DistillObjective};
use cfexplain::config::RunConfig;
use cfexplain::counterfactual::{alpha_sweep, auto_alpha_grid, smooth_heatmap, XtMode};
use cfexplain::data::{generate_synthetic_dataset, Split};
use cfexplain::diffae::train_diffae;
use cfexplain::eval::{alignment_metrics, observability_score, random_iou_baseline};
use cfexplain::teacher::{train_teacher, QuerySample};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dsteps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let mut cfg = RunConfig::desk();
    cfg.data.n = 5000;
    cfg.diffae.train_steps = dsteps;

    let t0 = Instant::now();
    let ds = generate_synthetic_dataset(&cfg.data).unwrap();
    let (diffae, _) = train_diffae(&ds.split_slices(Split::Train), &cfg.diffae).unwrap();
    println!("[{:6.1}s] diffae {dsteps} steps", t0.elapsed().as_secs_f64());

    let train: Vec<QuerySample> = ds.split(Split::Train).iter().map(|s| QuerySample::from_sample(s)).collect();
    let val: Vec<QuerySample> = ds.split(Split::Val).iter().map(|s| QuerySample::from_sample(s)).collect();
    let (teacher, trec) = train_teacher(&train, &val, &cfg.teacher).unwrap();
    println!("[{:6.1}s] teacher val acc {:.4}", t0.elapsed().as_secs_f64(), trec.best().val_accuracy);

    let inputs = prepare_distill_inputs(&diffae, &teacher, &train).unwrap();
    let test: Vec<QuerySample> = ds.split(Split::Test).iter().map(|s| QuerySample::from_sample(s)).collect();

    // distill hyperparameter sweep
    let mut best_agent = None;
    for lr in [1e-3, 3e-3] {
        for epochs in [300usize, 1000] {
            let dc = DistillConfig { learning_rate: lr, epochs, ..cfg.distill.clone() };
            let mut accs = Vec::new();
            for obj in DistillObjective::ALL {
                let mut agent = build_agent(&teacher, teacher.config.k, diffae.config.code_dim, cfg.distill.seed).unwrap();
                distill_on_inputs(&mut agent, &inputs, obj, &dc).unwrap();
                agent.objective = Some(obj);
                let rep = alignment_metrics(&agent, &diffae, &teacher, &test, "test").unwrap();
                accs.push(format!("{obj}: acc {:.4} kl {:.4}", rep.accuracy, rep.kl_divergence));
                if obj == DistillObjective::L1Feature && lr == 3e-3 && epochs == 1000 {
                    best_agent = Some(agent);
                }
            }
            println!("[{:6.1}s] lr {lr:e} epochs {epochs}: {}", t0.elapsed().as_secs_f64(), accs.join(" | "));
        }
    }

    // observability scan on the l1 agent: per-k IoU at several smoothing sigmas
    let agent = best_agent.unwrap();
    let grid = auto_alpha_grid(&agent, 1, 1.0).unwrap();
    let queries: Vec<&_> = ds.split(Split::Test).into_iter().filter(|s| s.label == 1).take(16).collect();
    let sigmas = [0.0, 1.0, 2.0, 3.0];
    // iou_sum[sign][k][sigma]
    let mut iou_sum = [[[0.0f64; 4]; 4]; 2];
    let mut n = [[[0usize; 4]; 4]; 2];
    let mut base_sum = 0.0;
    for s in &queries {
        let q = QuerySample::from_sample(s);
        let sweep = alpha_sweep(&q, 1, &grid, &diffae, &agent, &teacher, XtMode::Invert, 0).unwrap();
        let f = s.feature_mask.iter().filter(|v| **v).count() as f64 / s.feature_mask.len() as f64;
        base_sum += random_iou_baseline(f).unwrap();
        for rec in &sweep.records {
            if rec.alpha == 0.0 { continue; }
            let sign = usize::from(rec.alpha > 0.0);
            // k index from |alpha| rank: grid is k/||g||^2 spaced
            let k = ((rec.alpha.abs() / grid[4]).round() as usize).saturating_sub(1).min(3);
            for (si, sg) in sigmas.iter().enumerate() {
                let heat = smooth_heatmap(&rec.heatmaps[0], *sg);
                if let Some(iou) = observability_score(&heat, &s.feature_mask).unwrap().iou {
                    iou_sum[sign][k][si] += iou;
                    n[sign][k][si] += 1;
                }
            }
        }
    }
    println!("baseline f/(2-f) mean: {:.4}", base_sum / queries.len() as f64);
    for (sign, name) in [(1usize, "alpha>0"), (0, "alpha<0")] {
        for k in 0..4 {
            let row: Vec<String> = sigmas.iter().enumerate()
                .map(|(si, sg)| format!("s{:.0}:{:.4}", sg, iou_sum[sign][k][si] / n[sign][k][si].max(1) as f64))
                .collect();
            println!("{name} k={}: {}", k + 1, row.join("  "));
        }
    }
    println!("[{:6.1}s] done", t0.elapsed().as_secs_f64());
}
