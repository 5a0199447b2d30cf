use cfexplain::data::{generate_synthetic_dataset, DataConfig, Split};
use cfexplain::diffae::{train_diffae, DiffAEConfig};
use std::time::Instant;

fn main() {
    let mut dc = DataConfig::desk();
    dc.n = 400;
    let ds = generate_synthetic_dataset(&dc).unwrap();
    let slices = ds.split_slices(Split::Train);
    let mut cfg = DiffAEConfig::desk();
    cfg.train_steps = 50;
    let t0 = Instant::now();
    let (_m, rec) = train_diffae(&slices, &cfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("50 steps (batch {}): {:.2}s total, {:.1} ms/step, loss {:.4} -> {:.4}",
        cfg.batch_size, dt, 1000.0 * dt / 50.0, rec.initial_loss, rec.final_loss);
}
