use cfexplain::agent::{build_agent, distill_on_inputs, prepare_distill_inputs, DistillObjective};
use cfexplain::config::RunConfig;
use cfexplain::counterfactual::{alpha_sweep, auto_alpha_grid, smooth_heatmap, XtMode};
use cfexplain::data::{generate_synthetic_dataset, Split};
use cfexplain::diffae::DiffAE;
use cfexplain::eval::{observability_score, random_iou_baseline};
use cfexplain::teacher::{QuerySample, Teacher};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

fn main() {
    let cfg = RunConfig::desk();
    let t0 = Instant::now();
    let ds = generate_synthetic_dataset(&cfg.data).unwrap();
    let diffae = DiffAE::load(Path::new("/tmp/probe6000-diffae.ckpt")).unwrap().0;
    let teacher = Teacher::load(Path::new("/tmp/probe6000-teacher.ckpt")).unwrap().0;
    let train: Vec<QuerySample> =
        ds.split(Split::Train).iter().map(|s| QuerySample::from_sample(s)).collect();
    let inputs = prepare_distill_inputs(&diffae, &teacher, &train).unwrap();

    let masked: Vec<&_> = ds.split(Split::Test).into_iter().filter(|s| s.label == 1).take(24).collect();
    println!("[{:6.1}s] setup done, {} masked queries", t0.elapsed().as_secs_f64(), masked.len());

    for (objective, name) in [(DistillObjective::L1Feature, "l1"), (DistillObjective::KlOutput, "kl")] {
        let mut agent =
            build_agent(&teacher, teacher.config.k, diffae.config.code_dim, cfg.distill.seed).unwrap();
        distill_on_inputs(&mut agent, &inputs, objective, &cfg.distill).unwrap();
        agent.objective = Some(objective);
        for scale in [0.5, 1.0, 2.0] {
            let grid = auto_alpha_grid(&agent, 1, scale).unwrap();
            let alpha_unit =
                grid.iter().filter(|a| **a > 0.0).fold(f64::MAX, |m, a| m.min(*a));
            // per-alpha IoU and on/off-mask mean |delta|
            let mut per: BTreeMap<i64, (f64, f64, f64, usize)> = BTreeMap::new();
            let mut base_sum = 0.0;
            for s in &masked {
                let q = QuerySample::from_sample(s);
                let sweep =
                    alpha_sweep(&q, 1, &grid, &diffae, &agent, &teacher, XtMode::Invert, 0).unwrap();
                let f = s.feature_mask.iter().filter(|v| **v).count() as f64
                    / s.feature_mask.len() as f64;
                base_sum += random_iou_baseline(f).unwrap();
                for rec in sweep.records.iter().filter(|r| r.alpha != 0.0) {
                    let heat = smooth_heatmap(&rec.heatmaps[0], cfg.eval.heatmap_sigma);
                    let iou = observability_score(&heat, &s.feature_mask).unwrap().iou.unwrap();
                    let mut on = 0.0;
                    let mut off = 0.0;
                    let (mut n_on, mut n_off) = (0usize, 0usize);
                    for (h, m) in rec.heatmaps[0].iter().zip(s.feature_mask.iter()) {
                        if *m {
                            on += h.abs();
                            n_on += 1;
                        } else {
                            off += h.abs();
                            n_off += 1;
                        }
                    }
                    let key = (rec.alpha.signum() as i64)
                        * ((rec.alpha.abs() / alpha_unit).round() as i64);
                    let e = per.entry(key).or_insert((0.0, 0.0, 0.0, 0));
                    e.0 += iou;
                    e.1 += on / n_on as f64;
                    e.2 += off / n_off as f64;
                    e.3 += 1;
                }
            }
            let base = base_sum / masked.len() as f64;
            println!("--- {name} scale {scale}: baseline {base:.4}");
            for (k, (iou, on, off, n)) in &per {
                println!(
                    "  k={k:+}: IoU {:.4} ({:.2}x) | mean|d| on-mask {:.5} off-mask {:.5} ratio {:.2}",
                    iou / *n as f64,
                    (iou / *n as f64) / base,
                    on / *n as f64,
                    off / *n as f64,
                    (on / *n as f64) / (off / *n as f64),
                );
            }
            println!("[{:6.1}s]", t0.elapsed().as_secs_f64());
        }
    }
}
