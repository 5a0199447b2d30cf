//! Generate the synthetic two-class benchmark and render one sample of each
//! class plus the class-1 ground-truth feature mask.
//!
//!     cargo run --release -p cfexplain --example generate_dataset

use cfexplain::data::{generate_synthetic_dataset, DataConfig, Split};
use cfexplain::render::{save_heatmap_png, save_image_png};
use ndarray::Array2;

mod common;

fn main() -> cfexplain::Result<()> {
    let config = DataConfig { n: 60, image_size: 32, ..common::tiny_data_config() };
    let dataset = generate_synthetic_dataset(&config)?;

    println!("generated {} samples at {}x{}, K={} slice(s) each", dataset.samples.len(), config.image_size, config.image_size, config.k);
    for split in [Split::Train, Split::Val, Split::Test] {
        let samples = dataset.split(split);
        let pos = samples.iter().filter(|s| s.label == 1).count();
        println!("  {split:?}: {} samples ({pos} positive)", samples.len());
    }

    // Class 1 adds 1-4 Gaussian bumps; the mask is the union of their
    // 2-sigma disks and is capped below 30% of the image.
    let positives = dataset.split(Split::Train);
    let sample1 = positives.iter().find(|s| s.label == 1).expect("a positive sample");
    let sample0 = positives.iter().find(|s| s.label == 0).expect("a negative sample");
    let mask_fraction = |m: &Array2<bool>| m.iter().filter(|v| **v).count() as f64 / m.len() as f64;
    println!();
    println!("sample {}: label 1, {} bump(s), mask covers {:.1}% of pixels", sample1.id, sample1.blobs.len(), 100.0 * mask_fraction(&sample1.feature_mask));
    println!("sample {}: label 0, mask empty: {}", sample0.id, sample0.feature_mask.iter().all(|v| !v));

    let out = common::out_dir("generate_dataset")?;
    save_image_png(&out.join("class0.png"), &sample0.slices[0])?;
    save_image_png(&out.join("class1.png"), &sample1.slices[0])?;
    let mask = sample1.feature_mask.mapv(|v| if v { 1.0 } else { 0.0 });
    save_heatmap_png(&out.join("class1_mask.png"), &mask)?;
    println!();
    println!("wrote class0.png, class1.png, class1_mask.png to {}", out.display());
    Ok(())
}
