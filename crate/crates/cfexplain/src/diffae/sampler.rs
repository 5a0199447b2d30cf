//! Deterministic DDIM stepping: decode (noise -> image) and invert
//! (image -> noise) share one transport primitive, so the two directions
//! are exact mutual inverses whenever the noise prediction is held fixed.

use ndarray::Array2;

use super::{batch_to_image, image_to_batch, ImageSlice, NoisePredictor, SemanticCode};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, StepSubsequence};

/// Coefficients (a, b) such that `transport(x, from, to, eps) = a*x + b*eps`.
/// Derived from the clean-image prediction:
/// `x0 = (x - sqrt(1-ab_from)*eps)/sqrt(ab_from)` re-noised to `to`.
fn transport_coeffs(schedule: &NoiseSchedule, from_t: usize, to_t: usize) -> Result<(f64, f64)> {
    let (sf, nf) = schedule.coeffs(from_t)?;
    let (st, nt) = schedule.coeffs(to_t)?;
    let a = st / sf;
    let b = nt - a * nf;
    Ok((a, b))
}

/// Move state `x` from noise level `from_t` to `to_t` under a fixed noise
/// estimate. Pure Eq.-(1) algebra; both DDIM directions are built on it.
pub fn transport(
    x: &ImageSlice,
    from_t: usize,
    to_t: usize,
    eps: &ImageSlice,
    schedule: &NoiseSchedule,
) -> Result<ImageSlice> {
    if x.shape() != eps.shape() {
        return Err(Error::shape(
            "transport",
            format!("{:?}", x.shape()),
            format!("{:?}", eps.shape()),
        ));
    }
    let (a, b) = transport_coeffs(schedule, from_t, to_t)?;
    Ok(ImageSlice::from_decoded(x.pixels() * a + eps.pixels() * b))
}

/// One reverse-DDIM update from t to t_prev (Eq. 1 with cumulative alpha).
pub fn ddim_step<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x_t: &ImageSlice,
    t: usize,
    t_prev: usize,
    z: &SemanticCode,
    schedule: &NoiseSchedule,
) -> Result<ImageSlice> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "ddim_step needs t_prev < t, got t_prev={t_prev}, t={t}"
        )));
    }
    if t > schedule.len() {
        return Err(Error::TimestepOutOfRange { t, lo: 1, hi: schedule.len() });
    }
    let eps_hat = predictor.predict_noise(x_t, t, z)?;
    transport(x_t, t, t_prev, &eps_hat, schedule)
}

fn check_steps(steps: &StepSubsequence, schedule: &NoiseSchedule) -> Result<()> {
    if steps.start() != schedule.len() {
        return Err(Error::InvalidArgument(format!(
            "step subsequence starts at {}, schedule has T={}",
            steps.start(),
            schedule.len()
        )));
    }
    Ok(())
}

/// Deterministic DDIM decode of x_T down to a clean image, conditioning
/// every step on z.
pub fn decode<P: NoisePredictor + ?Sized>(
    predictor: &P,
    z: &SemanticCode,
    x_t: &ImageSlice,
    steps: &StepSubsequence,
    schedule: &NoiseSchedule,
) -> Result<ImageSlice> {
    check_steps(steps, schedule)?;
    let mut x = x_t.clone();
    for (t, t_prev) in steps.pairs() {
        x = ddim_step(predictor, &x, t, t_prev, z, schedule)?;
    }
    Ok(x)
}

/// Deterministic DDIM inversion: runs the recursion t_prev -> t so that
/// `decode(z, invert(x0, z)) ~= x0`. The noise estimate for each segment is
/// evaluated at the segment's upper timestep, mirroring the decode step it
/// undoes.
pub fn invert<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x0: &ImageSlice,
    z: &SemanticCode,
    steps: &StepSubsequence,
    schedule: &NoiseSchedule,
) -> Result<ImageSlice> {
    check_steps(steps, schedule)?;
    let pairs: Vec<(usize, usize)> = steps.pairs().collect();
    let mut x = x0.clone();
    for &(t, t_prev) in pairs.iter().rev() {
        let eps_hat = predictor.predict_noise(&x, t, z)?;
        x = transport(&x, t_prev, t, &eps_hat, schedule)?;
    }
    Ok(x)
}

/// Batched decode; rows of `zs` pair with entries of `x_ts`. One network
/// call per DDIM step instead of one per (step, sample).
pub fn decode_batch<P: NoisePredictor + ?Sized>(
    predictor: &P,
    zs: &Array2<f32>,
    x_ts: &[ImageSlice],
    steps: &StepSubsequence,
    schedule: &NoiseSchedule,
) -> Result<Vec<ImageSlice>> {
    check_steps(steps, schedule)?;
    if zs.dim().0 != x_ts.len() {
        return Err(Error::shape("decode_batch", format!("{} codes", x_ts.len()), format!("{}", zs.dim().0)));
    }
    if x_ts.is_empty() {
        return Ok(Vec::new());
    }
    let n = x_ts.len();
    let mut state: Vec<Array2<f64>> = x_ts.iter().map(|x| x.pixels().clone()).collect();
    for (t, t_prev) in steps.pairs() {
        let batch = image_to_batch(
            &state
                .iter()
                .map(|p| ImageSlice::from_decoded(p.clone()))
                .collect::<Vec<_>>(),
        );
        let ts = vec![t; n];
        let eps = predictor.predict_noise_batch(&batch, &ts, zs)?;
        let (a, b) = transport_coeffs(schedule, t, t_prev)?;
        for (i, st) in state.iter_mut().enumerate() {
            let e = batch_to_image(&eps, i);
            *st = &*st * a + e.pixels() * b;
        }
    }
    Ok(state.into_iter().map(ImageSlice::from_decoded).collect())
}

/// Batched inversion mirroring [`decode_batch`].
pub fn invert_batch<P: NoisePredictor + ?Sized>(
    predictor: &P,
    zs: &Array2<f32>,
    x0s: &[ImageSlice],
    steps: &StepSubsequence,
    schedule: &NoiseSchedule,
) -> Result<Vec<ImageSlice>> {
    check_steps(steps, schedule)?;
    if zs.dim().0 != x0s.len() {
        return Err(Error::shape("invert_batch", format!("{} codes", x0s.len()), format!("{}", zs.dim().0)));
    }
    if x0s.is_empty() {
        return Ok(Vec::new());
    }
    let n = x0s.len();
    let pairs: Vec<(usize, usize)> = steps.pairs().collect();
    let mut state: Vec<Array2<f64>> = x0s.iter().map(|x| x.pixels().clone()).collect();
    for &(t, t_prev) in pairs.iter().rev() {
        let batch = image_to_batch(
            &state
                .iter()
                .map(|p| ImageSlice::from_decoded(p.clone()))
                .collect::<Vec<_>>(),
        );
        let ts = vec![t; n];
        let eps = predictor.predict_noise_batch(&batch, &ts, zs)?;
        let (a, b) = transport_coeffs(schedule, t_prev, t)?;
        for (i, st) in state.iter_mut().enumerate() {
            let e = batch_to_image(&eps, i);
            *st = &*st * a + e.pixels() * b;
        }
    }
    Ok(state.into_iter().map(ImageSlice::from_decoded).collect())
}
