//! Small shared image filters: separable Gaussian blur with edge-duplicating
//! reflect padding. Used by the synthetic-data generator (random fields),
//! heatmap smoothing, and the SSIM window.

use ndarray::Array2;

/// Reflect an out-of-range index back into [0, n) by duplicating the edge
/// sample: ...d c b a | a b c d | d c b a... (SciPy's "reflect" mode).
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Sampled Gaussian taps exp(-k^2 / 2 sigma^2) for k in [-radius, radius],
/// normalized to sum 1.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur: correlate along axis 0 then axis 1 with the
/// normalized kernel and reflect padding. Constant inputs are preserved up
/// to kernel-normalization rounding.
pub fn gaussian_blur(x: &Array2<f64>, sigma: f64, radius: usize) -> Array2<f64> {
    let kernel = gaussian_kernel(sigma, radius);
    let pass0 = correlate_axis0(x, &kernel);
    let pass1 = correlate_axis0(&pass0.reversed_axes(), &kernel);
    pass1.reversed_axes()
}

/// Blur with the default radius ceil(3 sigma), the choice used for heatmap
/// smoothing and the synthetic background fields.
pub fn gaussian_blur_default(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
    gaussian_blur(x, sigma, (3.0 * sigma).ceil() as usize)
}

fn correlate_axis0(x: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let radius = (kernel.len() - 1) / 2;
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let src = reflect_index(i as isize + ki as isize - radius as isize, h);
                acc += kv * x[(src, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}
