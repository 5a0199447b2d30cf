//! Diffusion variance schedule and the forward noising map.
//!
//! The schedule stores per-step betas and the cumulative signal products
//! `alpha_bars`, indexed so that `alpha_bar(0) = 1` refers to the clean image
//! and `alpha_bar(T)` to the fully noised endpoint. Both training and the
//! deterministic DDIM decode read their coefficients from here.

use crate::diffae::ImageSlice;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Variance schedule: betas for t = 1..=T and cumulative products
/// `alpha_bars[t] = prod_{s<=t} (1 - beta_s)` with `alpha_bars[0] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule interpolating `beta_min..=beta_max` over T steps.
    pub fn linear(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let denom = (t_steps as f64 - 1.0).max(1.0);
        let betas = (0..t_steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / denom)
            .collect();
        Self::from_betas(betas)
    }

    /// Build a schedule from an explicit beta sequence, validating invariants.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument(
                "every beta must lie in (0, 1)".into(),
            ));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0f64;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        // betas in (0,1) force a strictly decreasing positive product; check anyway
        // so deserialized checkpoints cannot smuggle in a degenerate schedule.
        let ok = alpha_bars.windows(2).all(|w| w[1] < w[0]) && prod > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(
                "alpha_bars must be strictly decreasing and positive".into(),
            ));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Beta for timestep t (1-based, t in 1..=T).
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative signal product for t in 0..=T; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.len() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 0,
                hi: self.len(),
            });
        }
        Ok(())
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))` — the signal/noise pair.
    pub fn coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let ab = self.alpha_bars[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

/// Mix a clean image with noise at level t:
/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(
    x0: &ImageSlice,
    t: usize,
    eps: &ImageSlice,
    schedule: &NoiseSchedule,
) -> Result<ImageSlice> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(
            "forward_noise",
            format!("{:?}", x0.shape()),
            format!("{:?}", eps.shape()),
        ));
    }
    let (sig, noi) = schedule.coeffs(t)?;
    let pixels = x0.pixels() * sig + eps.pixels() * noi;
    Ok(ImageSlice::from_decoded(pixels))
}

/// Strictly decreasing timestep subsequence from T down to 0 used for
/// accelerated DDIM decoding. Consecutive pairs are the step endpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSubsequence {
    indices: Vec<usize>,
}

impl StepSubsequence {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::InvalidArgument(
                "step subsequence needs at least two indices".into(),
            ));
        }
        if *indices.last().unwrap() != 0 {
            return Err(Error::InvalidArgument(
                "step subsequence must end at 0".into(),
            ));
        }
        if !indices.windows(2).all(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument(
                "step subsequence must be strictly decreasing".into(),
            ));
        }
        Ok(Self { indices })
    }

    /// Uniformly spaced subsequence with `n_steps` transitions from `t_total` to 0.
    pub fn uniform(t_total: usize, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || t_total == 0 {
            return Err(Error::InvalidArgument(
                "uniform subsequence needs t_total >= 1 and n_steps >= 1".into(),
            ));
        }
        let n = n_steps.min(t_total);
        let mut indices: Vec<usize> = (0..=n)
            .rev()
            .map(|k| ((k as f64 / n as f64) * t_total as f64).round() as usize)
            .collect();
        indices.dedup();
        Self::new(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// First index; must equal the schedule length where the subsequence is used.
    pub fn start(&self) -> usize {
        self.indices[0]
    }

    /// `(t, t_prev)` pairs in decode order (high to low).
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.indices.windows(2).map(|w| (w[0], w[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn two_step_cumulative_product() {
        // hand-computed: 0.9 and 0.9 * 0.7
        let s = NoiseSchedule::linear(2, 0.1, 0.3).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.3]);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.63).abs() < 1e-15);
    }

    #[test]
    fn t1000_endpoint_matches_brute_force_product() {
        // Frozen from an independent f64 cumulative product over the same
        // linear beta sequence (1e-4 to 0.02 over 1000 steps).
        const EXPECTED: f64 = 4.0358297653756754e-5;
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let got = s.alpha_bar(1000);
        assert!(
            ((got - EXPECTED) / EXPECTED).abs() < 1e-10,
            "endpoint {got} vs {EXPECTED}"
        );
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    fn img(v: Array2<f64>) -> ImageSlice {
        ImageSlice::from_decoded(v)
    }

    #[test]
    fn forward_noise_boundaries() {
        let s = NoiseSchedule::linear(10, 0.1, 0.2).unwrap();
        let x0 = img(Array2::from_elem((4, 4), 0.25));
        let eps = img(Array2::from_elem((4, 4), 1.0));

        // t = 0 returns x0 exactly (alpha_bar(0) = 1)
        let y = forward_noise(&x0, 0, &eps, &s).unwrap();
        assert_eq!(y.pixels(), x0.pixels());

        // zero noise scales by sqrt(alpha_bar)
        let z = img(Array2::zeros((4, 4)));
        let y = forward_noise(&x0, 3, &z, &s).unwrap();
        let want = 0.25 * s.alpha_bar(3).sqrt();
        for v in y.pixels() {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_noise_scalar_oracle() {
        // alpha_bar = 0.25 exactly: ones * 0.5 + ones * sqrt(0.75)
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert_eq!(s.alpha_bar(2), 0.25);
        let ones = img(Array2::from_elem((3, 3), 1.0));
        let y = forward_noise(&ones, 2, &ones, &s).unwrap();
        let want = 0.5 + 0.75f64.sqrt();
        for v in y.pixels() {
            assert!((*v - want).abs() < 1e-12, "{v} vs {want}");
        }
    }

    #[test]
    fn forward_noise_rejects_bad_inputs() {
        let s = NoiseSchedule::linear(5, 0.1, 0.2).unwrap();
        let a = img(Array2::zeros((4, 4)));
        let b = img(Array2::zeros((5, 5)));
        assert!(forward_noise(&a, 1, &b, &s).is_err());
        assert!(forward_noise(&a, 6, &a, &s).is_err());
    }

    #[test]
    fn forward_noise_deterministic() {
        let s = NoiseSchedule::linear(7, 0.05, 0.3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let x0 = img(Array2::from_shape_fn((8, 8), |_| rng.gen::<f64>() - 0.5));
        let eps = img(Array2::from_shape_fn((8, 8), |_| rng.gen::<f64>() - 0.5));
        let a = forward_noise(&x0, 4, &eps, &s).unwrap();
        let b = forward_noise(&x0, 4, &eps, &s).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn variance_preserved_for_unit_variance_inputs() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.1).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = 400;
        let x0 = img(Array2::from_shape_fn((n, n), |_| {
            rng.sample::<f64, _>(StandardNormal)
        }));
        let eps = img(Array2::from_shape_fn((n, n), |_| {
            rng.sample::<f64, _>(StandardNormal)
        }));
        for t in [1, 25, 50] {
            let y = forward_noise(&x0, t, &eps, &s).unwrap();
            let mean = y.pixels().mean().unwrap();
            let var = y.pixels().mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!((var - 1.0).abs() < 0.05, "t={t}: var {var}");
        }
    }

    #[test]
    fn uniform_subsequence_endpoints() {
        let ss = StepSubsequence::uniform(200, 20).unwrap();
        assert_eq!(ss.start(), 200);
        assert_eq!(*ss.indices().last().unwrap(), 0);
        assert_eq!(ss.pairs().count(), 20);

        // more steps than T collapses to the full range
        let ss = StepSubsequence::uniform(5, 20).unwrap();
        assert_eq!(ss.indices(), &[5, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn subsequence_validation() {
        assert!(StepSubsequence::new(vec![10, 5, 0]).is_ok());
        assert!(StepSubsequence::new(vec![10, 5, 1]).is_err());
        assert!(StepSubsequence::new(vec![10, 10, 0]).is_err());
        assert!(StepSubsequence::new(vec![0]).is_err());
    }

    proptest! {
        #[test]
        fn alpha_bars_strictly_decreasing(
            t in 1usize..300,
            bmin in 1e-6f64..0.5,
            spread in 0.0f64..0.4,
        ) {
            let s = NoiseSchedule::linear(t, bmin, (bmin + spread).min(0.999)).unwrap();
            prop_assert_eq!(s.alpha_bar(0), 1.0);
            prop_assert!(s.alpha_bar(t) > 0.0);
            for w in s.alpha_bars().windows(2) {
                prop_assert!(w[1] < w[0]);
            }
            // signal coefficient strictly decreases too
            for t in 1..=s.len() {
                prop_assert!(s.coeffs(t).unwrap().0 < s.coeffs(t - 1).unwrap().0);
            }
        }
    }
}
