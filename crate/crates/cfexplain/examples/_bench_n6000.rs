use cfexplain::agent::{build_agent, distill_on_inputs, prepare_distill_inputs, DistillObjective};
use cfexplain::config::RunConfig;
use cfexplain::counterfactual::{alpha_sweep, auto_alpha_grid, XtMode};
use cfexplain::data::{generate_synthetic_dataset, Split};
use cfexplain::diffae::{train_diffae, DiffAE};
use cfexplain::eval::{alignment_metrics, observability_score, random_iou_baseline, render_alignment_table};
use cfexplain::render::{save_heatmap_png, save_image_png};
use cfexplain::teacher::{train_teacher, QuerySample, Teacher};
use std::path::Path;
use std::time::Instant;

fn main() {
    let cfg = RunConfig::desk(); // n = 6000, train_steps = 4000 now
    let t0 = Instant::now();
    let ds = generate_synthetic_dataset(&cfg.data).unwrap();

    let ck = "/tmp/probe6000-diffae.ckpt";
    let diffae = if Path::new(ck).exists() {
        DiffAE::load(Path::new(ck)).unwrap().0
    } else {
        let (m, _) = train_diffae(&ds.split_slices(Split::Train), &cfg.diffae).unwrap();
        m.save(Path::new(ck), None).unwrap();
        m
    };
    println!("[{:6.1}s] diffae ready", t0.elapsed().as_secs_f64());

    let train: Vec<QuerySample> = ds.split(Split::Train).iter().map(|s| QuerySample::from_sample(s)).collect();
    let val: Vec<QuerySample> = ds.split(Split::Val).iter().map(|s| QuerySample::from_sample(s)).collect();
    let tk = "/tmp/probe6000-teacher.ckpt";
    let teacher = if Path::new(tk).exists() {
        Teacher::load(Path::new(tk)).unwrap().0
    } else {
        let (m, rec) = train_teacher(&train, &val, &cfg.teacher).unwrap();
        for e in &rec.epochs {
            println!("  teacher epoch {}: loss {:.4} val acc {:.4} sens {:.4} spec {:.4}",
                e.epoch, e.train_loss, e.val_accuracy, e.val_sensitivity, e.val_specificity);
        }
        m.save(Path::new(tk), None).unwrap();
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
    println!("{}", render_alignment_table(&reports));

    // per-agent observability over the class-1 held-out queries
    let masked: Vec<&_> = ds.split(Split::Test).into_iter().filter(|s| s.label == 1).take(24).collect();
    let out = Path::new("target/example-output/_bench_n6000");
    std::fs::create_dir_all(out).unwrap();
    for (agent, name) in agents.iter().zip(["mse", "l1", "kl"]) {
        let grid = auto_alpha_grid(agent, 1, 1.0).unwrap();
        let mut ious = Vec::new();
        let mut base = 0.0;
        for (i, s) in masked.iter().enumerate() {
            let q = QuerySample::from_sample(s);
            let sweep = alpha_sweep(&q, 1, &grid, &diffae, agent, &teacher, XtMode::Invert, 0).unwrap();
            let rec = sweep.records.last().unwrap();
            let f = s.feature_mask.iter().filter(|v| **v).count() as f64 / s.feature_mask.len() as f64;
            base += random_iou_baseline(f).unwrap();
            let heat = cfexplain::counterfactual::smooth_heatmap(&rec.heatmaps[0], 1.0);
            ious.push(observability_score(&heat, &s.feature_mask).unwrap().iou.unwrap());
            if i < 4 && name == "l1" {
                save_image_png(&out.join(format!("q{i}_orig.png")), &q.slices[0]).unwrap();
                save_image_png(&out.join(format!("q{i}_recon.png")), &sweep.reconstruction().images[0]).unwrap();
                save_image_png(&out.join(format!("q{i}_cf.png")), &rec.images[0]).unwrap();
                save_heatmap_png(&out.join(format!("q{i}_heat.png")), &rec.heatmaps[0]).unwrap();
                let m = s.feature_mask.mapv(|v| if v { 1.0 } else { 0.0 });
                save_heatmap_png(&out.join(format!("q{i}_mask.png")), &m).unwrap();
            }
        }
        ious.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = ious.len();
        let mean: f64 = ious.iter().sum::<f64>() / n as f64;
        println!("[{:6.1}s] {name}: obs IoU mean {:.4} (baseline {:.4}, {:.2}x) min {:.3} med {:.3} max {:.3}",
            t0.elapsed().as_secs_f64(), mean, base / n as f64, mean / (base / n as f64),
            ious[0], ious[n / 2], ious[n - 1]);
    }
}
