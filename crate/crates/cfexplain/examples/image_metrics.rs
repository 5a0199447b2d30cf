//! The evaluation primitives on small crafted inputs: PSNR, SSIM, AUC,
//! matched-area IoU against a ground-truth mask, and its random baseline.
//!
//!     cargo run --release -p cfexplain --example image_metrics

use cfexplain::eval::{auc, observability_score, psnr01, random_iou_baseline, ssim01};
use ndarray::Array2;

fn main() -> cfexplain::Result<()> {
    // PSNR / SSIM over [0,1] images (16x16 ramp vs noisy/shifted copies).
    let n = 16;
    let a = Array2::from_shape_fn((n, n), |(r, c)| (r + c) as f64 / (2 * n - 2) as f64);
    let shifted = a.mapv(|v| (v + 0.05).clamp(0.0, 1.0));
    let noisy = Array2::from_shape_fn((n, n), |(r, c)| {
        (a[[r, c]] + 0.1 * ((3 * r + 5 * c) as f64).sin()).clamp(0.0, 1.0)
    });
    println!("PSNR(a, a+0.05) = {:.2} dB", psnr01(&a, &shifted)?);
    println!("PSNR(a, noisy)  = {:.2} dB", psnr01(&a, &noisy)?);
    println!("SSIM(a, a)      = {}", ssim01(&a, &a)?);
    println!("SSIM(a, a+0.05) = {:.4}  (uniform shift barely hurts structure)", ssim01(&a, &shifted)?);
    println!("SSIM(a, noisy)  = {:.4}", ssim01(&a, &noisy)?);

    // AUC from raw scores via the rank statistic; invariant to any monotone
    // rescaling of the scores.
    let scores: [f64; 6] = [0.1, 0.4, 0.35, 0.8, 0.65, 0.9];
    let labels = [0, 0, 1, 1, 0, 1];
    let rescaled: Vec<f64> = scores.iter().map(|s| (10.0 * s).exp()).collect();
    println!();
    println!("AUC(scores)          = {:.4}", auc(&scores, &labels)?);
    println!("AUC(exp(10*scores))  = {:.4}  (monotone-transform invariant)", auc(&rescaled, &labels)?);

    // Matched-area IoU: take the top-m |heatmap| pixels where m is the mask
    // area, intersect with the mask. Threshold-free by construction.
    let size = 8;
    let mask = Array2::from_shape_fn((size, size), |(r, c)| r < 3 && c < 3);
    let good = Array2::from_shape_fn((size, size), |(r, c)| {
        if r < 3 && c < 3 { 1.0 + (r + c) as f64 } else { 0.01 }
    });
    let bad = Array2::from_shape_fn((size, size), |(r, c)| ((r * size + c) as f64).cos());
    let g = observability_score(&good, &mask)?;
    let b = observability_score(&bad, &mask)?;
    println!();
    println!("IoU(aligned heatmap)   = {:.4}", g.iou.unwrap());
    println!("IoU(unrelated heatmap) = {:.4}", b.iou.unwrap());
    let f = mask.iter().filter(|v| **v).count() as f64 / mask.len() as f64;
    println!("random baseline at mask fraction {:.3}: f/(2-f) = {:.4}", f, random_iou_baseline(f)?);
    Ok(())
}
