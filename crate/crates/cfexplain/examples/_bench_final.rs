use cfexplain::agent::{build_agent, distill_on_inputs, prepare_distill_inputs, DistillObjective};
use cfexplain::config::RunConfig;
use cfexplain::counterfactual::{alpha_sweep, auto_alpha_grid, XtMode};
use cfexplain::data::{generate_synthetic_dataset, Split};
use cfexplain::diffae::{train_diffae, DiffAE};
use cfexplain::eval::{alignment_metrics, criteria_report, observability_score, random_iou_baseline, render_alignment_table, CriteriaConfig};
use cfexplain::render::{save_heatmap_png, save_image_png};
use cfexplain::teacher::{train_teacher, QuerySample, Teacher};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dsteps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4000);
    let mut cfg = RunConfig::desk();
    cfg.data.n = 5000;
    cfg.diffae.train_steps = dsteps;
    let t0 = Instant::now();

    let ds = generate_synthetic_dataset(&cfg.data).unwrap();
    let ck = format!("/tmp/probe-diffae-{dsteps}.ckpt");
    let tk = "/tmp/probe-teacher.ckpt".to_string();
    let diffae = if std::path::Path::new(&ck).exists() {
        DiffAE::load(std::path::Path::new(&ck)).unwrap().0
    } else {
        let (m, _) = train_diffae(&ds.split_slices(Split::Train), &cfg.diffae).unwrap();
        m.save(std::path::Path::new(&ck), None).unwrap();
        m
    };
    println!("[{:6.1}s] diffae ready ({dsteps} steps)", t0.elapsed().as_secs_f64());

    let train: Vec<QuerySample> = ds.split(Split::Train).iter().map(|s| QuerySample::from_sample(s)).collect();
    let val: Vec<QuerySample> = ds.split(Split::Val).iter().map(|s| QuerySample::from_sample(s)).collect();
    let teacher = if std::path::Path::new(&tk).exists() {
        Teacher::load(std::path::Path::new(&tk)).unwrap().0
    } else {
        let (m, _) = train_teacher(&train, &val, &cfg.teacher).unwrap();
        m.save(std::path::Path::new(&tk), None).unwrap();
        m
    };
    println!("[{:6.1}s] teacher ready", t0.elapsed().as_secs_f64());

    let inputs = prepare_distill_inputs(&diffae, &teacher, &train).unwrap();
    let test: Vec<QuerySample> = ds.split(Split::Test).iter().map(|s| QuerySample::from_sample(s)).collect();
    let mut agents = Vec::new();
    let mut reports = Vec::new();
    for obj in DistillObjective::ALL {
        let mut agent = build_agent(&teacher, teacher.config.k, diffae.config.code_dim, cfg.distill.seed).unwrap();
        distill_on_inputs(&mut agent, &inputs, obj, &cfg.distill).unwrap();
        agent.objective = Some(obj);
        reports.push(alignment_metrics(&agent, &diffae, &teacher, &test, "test").unwrap());
        agents.push(agent);
    }
    println!("[{:6.1}s] agents distilled", t0.elapsed().as_secs_f64());
    println!("{}", render_alignment_table(&reports));

    // visual dump + sigma scan on the l1 agent
    let agent = &agents[1];
    let grid = auto_alpha_grid(agent, 1, 1.0).unwrap();
    let masked: Vec<&_> = ds.split(Split::Test).into_iter().filter(|s| s.label == 1).take(16).collect();
    let out = std::path::Path::new("target/example-output/_bench_final");
    std::fs::create_dir_all(out).unwrap();
    let mut per_sigma = [0.0f64; 3];
    let sigmas = [0.0, 0.5, 1.0];
    let mut base = 0.0;
    let mut per_query: Vec<f64> = Vec::new();
    for (i, s) in masked.iter().enumerate() {
        let q = QuerySample::from_sample(s);
        let sweep = alpha_sweep(&q, 1, &grid, &diffae, agent, &teacher, XtMode::Invert, 0).unwrap();
        let rec = sweep.records.last().unwrap();
        let f = s.feature_mask.iter().filter(|v| **v).count() as f64 / s.feature_mask.len() as f64;
        base += random_iou_baseline(f).unwrap();
        for (si, sg) in sigmas.iter().enumerate() {
            let heat = cfexplain::counterfactual::smooth_heatmap(&rec.heatmaps[0], *sg);
            let iou = observability_score(&heat, &s.feature_mask).unwrap().iou.unwrap();
            per_sigma[si] += iou;
            if si == 0 { per_query.push(iou); }
        }
        if i < 4 {
            save_image_png(&out.join(format!("q{i}_orig.png")), &q.slices[0]).unwrap();
            save_image_png(&out.join(format!("q{i}_cf.png")), &rec.images[0]).unwrap();
            save_heatmap_png(&out.join(format!("q{i}_heat.png")), &rec.heatmaps[0]).unwrap();
            let m = s.feature_mask.mapv(|v| if v { 1.0 } else { 0.0 });
            save_heatmap_png(&out.join(format!("q{i}_mask.png")), &m).unwrap();
        }
    }
    let nq = masked.len() as f64;
    println!("[{:6.1}s] sigma scan (mean IoU over {} class-1 queries, k=4 record): s0 {:.4}  s0.5 {:.4}  s1 {:.4}; baseline {:.4}",
        t0.elapsed().as_secs_f64(), masked.len(), per_sigma[0]/nq, per_sigma[1]/nq, per_sigma[2]/nq, base/nq);
    per_query.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!("per-query raw IoU: min {:.3} p25 {:.3} med {:.3} p75 {:.3} max {:.3}",
        per_query[0], per_query[per_query.len()/4], per_query[per_query.len()/2], per_query[3*per_query.len()/4], per_query[per_query.len()-1]);

    // full criteria with sigma=0
    let mut crit_cfg = CriteriaConfig::default();
    crit_cfg.heatmap_sigma = 0.0;
    let queries: Vec<&_> = ds.split(Split::Test).into_iter().take(64).collect();
    let crit = criteria_report(&queries, &diffae, agent, &teacher, &crit_cfg).unwrap();
    println!("[{:6.1}s] criteria: {}", t0.elapsed().as_secs_f64(), serde_json::to_string_pretty(&crit).unwrap());
}
