use cfexplain::data::{generate_synthetic_dataset, DataConfig, Split};
use cfexplain::diffae::{decode_batch, invert_batch, train_diffae, DiffAEConfig};
use cfexplain::eval::reconstruction_metrics;
use cfexplain::schedule::StepSubsequence;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let base: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let mut dc = DataConfig::desk();
    dc.n = 5000;
    let ds = generate_synthetic_dataset(&dc).unwrap();
    let slices = ds.split_slices(Split::Train);
    let mut cfg = DiffAEConfig::desk();
    cfg.train_steps = steps;
    cfg.base_channels = base;
    let t0 = Instant::now();
    let (m, rec) = train_diffae(&slices, &cfg).unwrap();
    let train_t = t0.elapsed().as_secs_f64();

    let test: Vec<_> = ds.split_slices(Split::Test).into_iter().take(48).collect();
    let t0 = Instant::now();
    let sub = StepSubsequence::uniform(cfg.t_steps, cfg.ddim_steps).unwrap();
    let codes = m.encode_batch(&test).unwrap();
    let xts = invert_batch(&m, &codes, &test, &sub, &m.schedule).unwrap();
    let recons = decode_batch(&m, &codes, &xts, &sub, &m.schedule).unwrap();
    let (mut psnr, mut ssim) = (0.0, 0.0);
    for (o, r) in test.iter().zip(&recons) {
        let (p, s) = reconstruction_metrics(o, r).unwrap();
        psnr += p; ssim += s;
    }
    let n = test.len() as f64;
    println!("steps={steps} base={base}: train {:.0}s, eval {:.0}s, loss {:.4}->{:.4}, PSNR {:.2}, SSIM {:.4}",
        train_t, t0.elapsed().as_secs_f64(), rec.initial_loss, rec.final_loss, psnr / n, ssim / n);
}
