//! Quantitative evaluation: reconstruction quality (PSNR/SSIM),
//! agent-teacher alignment (the alignment-table metric set), manipulation validity
//! over sweeps, and heatmap observability against ground-truth masks.
//!
//! All metrics are f64 and pure; everything here is reproducible bitwise
//! given identical inputs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::agent::{prepare_distill_inputs, AgentModel, DistillObjective};
use crate::counterfactual::{
    alpha_sweep, auto_alpha_grid, smooth_heatmap, SweepResult, XtMode,
};
use crate::data::SyntheticSample;
use crate::diffae::{DiffAE, ImageSlice};
use crate::error::{Error, Result};
use crate::imgops::gaussian_blur;
use crate::teacher::{QuerySample, Teacher};

/// SSIM window: 11x11 sampled Gaussian, sigma 1.5 (the standard choice).
const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
/// Stabilizers (K1 = 0.01, K2 = 0.03)^2 on the unit dynamic range.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape("metric operands", format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

/// PSNR on [0,1]-scaled images: 10*log10(1 / MSE). Identical images get the
/// +infinity sentinel.
pub fn psnr01(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.len() as f64;
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Gaussian-weighted SSIM on [0,1]-scaled images with population
/// covariances, averaged over the interior (window radius cropped away, so
/// the result is border-padding independent).
pub fn ssim01(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = a.dim();
    let win = 2 * SSIM_RADIUS + 1;
    if h < win || w < win {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs images of at least {win}x{win}, got {h}x{w}"
        )));
    }
    let blur = |x: &Array2<f64>| gaussian_blur(x, SSIM_SIGMA, SSIM_RADIUS);
    let ux = blur(a);
    let uy = blur(b);
    let uxx = blur(&(a * a));
    let uyy = blur(&(b * b));
    let uxy = blur(&(a * b));
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in SSIM_RADIUS..h - SSIM_RADIUS {
        for j in SSIM_RADIUS..w - SSIM_RADIUS {
            let (mx, my) = (ux[[i, j]], uy[[i, j]]);
            let vx = uxx[[i, j]] - mx * mx;
            let vy = uyy[[i, j]] - my * my;
            let vxy = uxy[[i, j]] - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * vxy + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            acc += (a1 * a2) / (b1 * b2);
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// PSNR/SSIM of a reconstruction against its original, remapping pixel
/// range [-1,1] to [0,1] first (the documented dynamic-range convention).
pub fn reconstruction_metrics(orig: &ImageSlice, recon: &ImageSlice) -> Result<(f64, f64)> {
    let a = orig.pixels().mapv(|v| (v + 1.0) / 2.0);
    let b = recon.pixels().mapv(|v| (v + 1.0) / 2.0);
    Ok((psnr01(&a, &b)?, ssim01(&a, &b)?))
}

/// ROC AUC by the Mann-Whitney statistic with average ranks for ties;
/// exactly the trapezoidal ROC area.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::InvalidArgument("AUC needs equally many scores and labels, at least one".into()));
    }
    if labels.iter().any(|l| *l > 1) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores must not be NaN".into()));
    }
    let n1 = labels.iter().filter(|l| **l == 1).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both classes present in the labels".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j averaged over the tie group
        let avg = (i + 1 + j) as f64 / 2.0;
        for r in &idx[i..j] {
            ranks[*r] = avg;
        }
        i = j;
    }
    let rank_sum: f64 =
        ranks.iter().zip(labels.iter()).filter(|(_, l)| **l == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 * n0) as f64)
}

fn softmax2(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let z = e0 + e1;
    (e0 / z, e1 / z)
}

fn argmax2(l0: f64, l1: f64) -> usize {
    usize::from(l1 > l0)
}

/// One alignment-table row: how closely the agent tracks the teacher, with teacher
/// predictions treated as ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub objective: Option<DistillObjective>,
    pub dataset: String,
    pub n: usize,
    pub auc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub kl_divergence: f64,
}

/// Metric core over precomputed per-sample logits (rows: [l0, l1]).
/// Teacher argmax is the label; agent positive-class softmax is the score.
pub fn alignment_from_logits(
    agent_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    objective: Option<DistillObjective>,
    dataset: &str,
) -> Result<AlignmentReport> {
    let n = agent_logits.dim().0;
    if n == 0 || agent_logits.dim() != teacher_logits.dim() || agent_logits.dim().1 != 2 {
        return Err(Error::shape(
            "alignment logits",
            "[n, 2] twice, n >= 1",
            format!("{:?} and {:?}", agent_logits.dim(), teacher_logits.dim()),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    let mut kl_sum = 0.0;
    for i in 0..n {
        let (t0, t1) = (teacher_logits[[i, 0]], teacher_logits[[i, 1]]);
        let (a0, a1) = (agent_logits[[i, 0]], agent_logits[[i, 1]]);
        let label = argmax2(t0, t1);
        let pred = argmax2(a0, a1);
        labels.push(label);
        let (pt0, pt1) = softmax2(t0, t1);
        let (pa0, pa1) = softmax2(a0, a1);
        scores.push(pa1);
        kl_sum += pt0 * (pt0.ln() - pa0.ln()) + pt1 * (pt1.ln() - pa1.ln());
        match (label, pred) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (0, 1) => fp += 1,
            (1, 0) => fneg += 1,
            _ => unreachable!(),
        }
    }
    let accuracy = (tp + tn) as f64 / n as f64;
    let kl_divergence = (kl_sum / n as f64).max(0.0);
    let pos = tp + fneg;
    let neg = tn + fp;
    if pos == 0 || neg == 0 {
        // AUC (and one of sens/spec) undefined; report what is computable
        // inside the error per the module contract.
        return Err(Error::UndefinedMetric(format!(
            "teacher predicts a single class over {n} samples; partial metrics: accuracy={accuracy:.6}, kl={kl_divergence:.6}"
        )));
    }
    let sensitivity = tp as f64 / pos as f64;
    let specificity = tn as f64 / neg as f64;
    let f1 = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
    Ok(AlignmentReport {
        objective,
        dataset: dataset.to_string(),
        n,
        auc: auc(&scores, &labels)?,
        accuracy,
        sensitivity,
        specificity,
        f1,
        kl_divergence,
    })
}

/// Encode the dataset, run both models, and score the agent against the
/// teacher's predictions.
pub fn alignment_metrics(
    agent: &AgentModel,
    diffae: &DiffAE,
    teacher: &Teacher,
    samples: &[QuerySample],
    dataset: &str,
) -> Result<AlignmentReport> {
    let inputs = prepare_distill_inputs(diffae, teacher, samples)?;
    let aligned = inputs.q.dot(&agent.align_w.t()) + &agent.align_b;
    let agent_logits = aligned.dot(&agent.head_w.t()) + &agent.head_b;
    alignment_from_logits(&agent_logits, &inputs.teacher_logits, agent.objective, dataset)
}

/// Criterion (3) statistics over sweeps: validity = fraction of sweeps
/// where the teacher's target logit at max alpha exceeds its alpha = 0
/// value; monotone_fraction = mean fraction of adjacent alpha pairs with
/// strictly increasing target logit.
pub fn manipulation_validity(sweeps: &[SweepResult]) -> Result<(f64, f64)> {
    if sweeps.is_empty() {
        return Err(Error::InvalidArgument("no sweeps to evaluate".into()));
    }
    let mut valid = 0usize;
    let mut monotone_sum = 0.0;
    for sweep in sweeps {
        if sweep.records.len() < 2 {
            return Err(Error::InvalidArgument(
                "each sweep needs at least one nonzero alpha besides the alpha = 0 record".into(),
            ));
        }
        let target = sweep.target_class;
        let ys: Vec<f64> = sweep.records.iter().map(|r| r.teacher_logits[target]).collect();
        let y0 = sweep.reconstruction().teacher_logits[target];
        if *ys.last().expect("nonempty") > y0 {
            valid += 1;
        }
        let pairs = ys.len() - 1;
        let increasing = ys.windows(2).filter(|w| w[1] > w[0]).count();
        monotone_sum += increasing as f64 / pairs as f64;
    }
    Ok((valid as f64 / sweeps.len() as f64, monotone_sum / sweeps.len() as f64))
}

/// Matched-area IoU: iou is None when the mask is empty (undefined);
/// degenerate is set when |heatmap| ties at the selection boundary, where
/// the index-order tie-break decides membership.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityScore {
    pub iou: Option<f64>,
    pub degenerate: bool,
}

/// IoU between the ground-truth mask and the top-m |heatmap| pixels, where
/// m is the mask area: threshold-free by construction. Ties are broken by
/// |value| descending, then pixel index ascending.
pub fn observability_score(
    heatmap: &Array2<f64>,
    gt_mask: &Array2<bool>,
) -> Result<ObservabilityScore> {
    if heatmap.dim() != gt_mask.dim() {
        return Err(Error::shape(
            "observability operands",
            format!("{:?}", heatmap.dim()),
            format!("{:?}", gt_mask.dim()),
        ));
    }
    if heatmap.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("heatmap contains non-finite values".into()));
    }
    let m = gt_mask.iter().filter(|v| **v).count();
    if m == 0 {
        return Ok(ObservabilityScore { iou: None, degenerate: false });
    }
    let flat_map: Vec<f64> = heatmap.iter().map(|v| v.abs()).collect();
    let flat_mask: Vec<bool> = gt_mask.iter().copied().collect();
    let mut order: Vec<usize> = (0..flat_map.len()).collect();
    order.sort_by(|a, b| flat_map[*b].total_cmp(&flat_map[*a]).then(a.cmp(b)));
    let degenerate = m < order.len() && flat_map[order[m - 1]] == flat_map[order[m]];
    let inter = order[..m].iter().filter(|i| flat_mask[**i]).count();
    let union = 2 * m - inter;
    Ok(ObservabilityScore { iou: Some(inter as f64 / union as f64), degenerate })
}

/// Expected matched-area IoU of a uniformly random heatmap against a mask
/// covering fraction f: intersection ~ f*m, union ~ (2-f)*m.
pub fn random_iou_baseline(f: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidArgument(format!("mask fraction must be in [0,1], got {f}")));
    }
    Ok(f / (2.0 - f))
}

/// Settings for the full criteria evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriteriaConfig {
    /// Class whose score the sweeps push up (the "death" analog is 1).
    pub target_class: usize,
    /// Desired agent-logit shift per auto-grid step.
    pub alpha_scale: f64,
    /// Gaussian sigma applied to heatmaps before observability scoring.
    pub heatmap_sigma: f64,
    pub xt_mode: XtMode,
    pub xt_seed: u64,
}

impl Default for CriteriaConfig {
    fn default() -> Self {
        CriteriaConfig {
            target_class: 1,
            alpha_scale: 1.0,
            heatmap_sigma: 1.0,
            xt_mode: XtMode::Invert,
            xt_seed: 0,
        }
    }
}

/// The three explanation criteria, measured over a held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaReport {
    pub n_queries: usize,
    /// Criterion 1 (reconstruction): means over all held-out slices.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Mean |teacher logit difference| between original and reconstruction.
    pub mean_logit_dev_alpha0: f64,
    /// Criterion 2 (observability): mean matched-area IoU over positive-
    /// alpha records of mask-bearing queries; None when no mask applied.
    pub mean_observability: Option<f64>,
    /// Mean analytic random baseline f/(2-f) over the same comparisons.
    pub observability_baseline: f64,
    /// Criterion 3 (manipulation): see manipulation_validity.
    pub validity: f64,
    pub monotone_fraction: f64,
}

/// Run auto-grid sweeps over the given samples and aggregate all three
/// criteria. Shared by the `evaluate` command and the acceptance suite.
pub fn criteria_report(
    samples: &[&SyntheticSample],
    diffae: &DiffAE,
    agent: &AgentModel,
    teacher: &Teacher,
    config: &CriteriaConfig,
) -> Result<CriteriaReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let grid = auto_alpha_grid(agent, config.target_class, config.alpha_scale)?;
    let mut psnr_sum = 0.0;
    let mut psnr_n = 0usize;
    let mut ssim_sum = 0.0;
    let mut ssim_n = 0usize;
    let mut dev_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut base_sum = 0.0;
    let mut iou_n = 0usize;
    let mut sweeps = Vec::with_capacity(samples.len());

    for sample in samples {
        let query = QuerySample::from_sample(sample);
        let sweep = alpha_sweep(
            &query,
            config.target_class,
            &grid,
            diffae,
            agent,
            teacher,
            config.xt_mode,
            config.xt_seed,
        )?;
        let recon = sweep.reconstruction();

        for (orig, rec) in query.slices.iter().zip(&recon.images) {
            let (p, s) = reconstruction_metrics(orig, rec)?;
            if p.is_finite() {
                psnr_sum += p;
                psnr_n += 1;
            }
            ssim_sum += s;
            ssim_n += 1;
        }

        let orig_out = teacher.forward_slices(&query.slices)?;
        dev_sum += recon
            .teacher_logits
            .iter()
            .zip(orig_out.logits.iter())
            .map(|(r, o)| (r - f64::from(*o)).abs())
            .sum::<f64>()
            / 2.0;

        let mask_area = sample.feature_mask.iter().filter(|v| **v).count();
        if mask_area > 0 {
            let f = mask_area as f64 / sample.feature_mask.len() as f64;
            let baseline = random_iou_baseline(f)?;
            for record in sweep.records.iter().filter(|r| r.alpha > 0.0) {
                for heatmap in &record.heatmaps {
                    let smoothed = smooth_heatmap(heatmap, config.heatmap_sigma);
                    let score = observability_score(&smoothed, &sample.feature_mask)?;
                    if let Some(iou) = score.iou {
                        iou_sum += iou;
                        base_sum += baseline;
                        iou_n += 1;
                    }
                }
            }
        }
        sweeps.push(sweep);
    }

    let (validity, monotone_fraction) = manipulation_validity(&sweeps)?;
    Ok(CriteriaReport {
        n_queries: samples.len(),
        mean_psnr: if psnr_n > 0 { psnr_sum / psnr_n as f64 } else { f64::INFINITY },
        mean_ssim: ssim_sum / ssim_n as f64,
        mean_logit_dev_alpha0: dev_sum / samples.len() as f64,
        mean_observability: if iou_n > 0 { Some(iou_sum / iou_n as f64) } else { None },
        observability_baseline: if iou_n > 0 { base_sum / iou_n as f64 } else { 0.0 },
        validity,
        monotone_fraction,
    })
}

/// Fixed-width text rendering of alignment rows, one per objective.
/// Formatting is fully determined by the inputs, so reruns under the same
/// seed reproduce the table bitwise.
pub fn render_alignment_table(reports: &[AlignmentReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>8} {:>10} {:>12} {:>12} {:>8} {:>8}\n",
        "objective", "AUC", "Accuracy", "Sensitivity", "Specificity", "F1", "KL"
    ));
    for r in reports {
        let name = r.objective.map(|o| o.name()).unwrap_or("-");
        out.push_str(&format!(
            "{:<10} {:>8.4} {:>10.4} {:>12.4} {:>12.4} {:>8.4} {:>8.4}\n",
            name, r.auc, r.accuracy, r.sensitivity, r.specificity, r.f1, r.kl_divergence
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterfactual::CounterfactualRecord;
    use ndarray::Array1 as A1;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn oracle_images() -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let f = |i: usize, j: usize| 0.5 + 0.25 * (0.3 * i as f64).sin() * (0.2 * j as f64).cos();
        let a = Array2::from_shape_fn((32, 32), |(i, j)| f(i, j));
        let b = a.mapv(|v| v + 0.1);
        let c = Array2::from_shape_fn((32, 32), |(i, j)| {
            0.5 + 0.25 * (0.3 * i as f64 + 0.4).sin() * (0.2 * j as f64 - 0.1).cos()
        });
        let d = Array2::from_shape_fn((32, 32), |(i, j)| {
            a[[i, j]] + 0.02 * (1.7 * i as f64).sin() * (2.3 * j as f64).sin()
        });
        (a, b, c, d)
    }

    #[test]
    fn ssim_matches_frozen_reference_values() {
        // frozen from scikit-image structural_similarity with
        // gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
        // data_range=1.0 on the generator images below
        let (a, b, c, d) = oracle_images();
        assert!((ssim01(&a, &b).unwrap() - 0.9815527714424825).abs() < 1e-9);
        assert!((ssim01(&a, &c).unwrap() - 0.9013128895021549).abs() < 1e-9);
        assert!((ssim01(&a, &d).unwrap() - 0.9856481089476111).abs() < 1e-9);
        assert_eq!(ssim01(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn psnr_oracle_and_sentinel() {
        let (a, b, ..) = oracle_images();
        assert!((psnr01(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr01(&a, &a).unwrap().is_infinite());
        // symmetric: squared differences are identical either way
        assert_eq!(
            psnr01(&a, &b).unwrap().to_bits(),
            psnr01(&b, &a).unwrap().to_bits()
        );
        let small = Array2::<f64>::zeros((4, 4));
        assert!(psnr01(&a, &small).is_err());
        assert!(ssim01(&small, &small).is_err(), "window larger than image");
    }

    #[test]
    fn reconstruction_metrics_remap_range() {
        // +0.2 offset on [-1,1] is +0.1 on [0,1]: the PSNR=20 oracle again
        let orig = ImageSlice::ingest(Array2::from_shape_fn((32, 32), |(i, j)| {
            0.5 * (0.3 * i as f64).sin() * (0.2 * j as f64).cos()
        }))
        .unwrap();
        let recon = ImageSlice::from_decoded(orig.pixels().mapv(|v| v + 0.2));
        let (p, s) = reconstruction_metrics(&orig, &recon).unwrap();
        assert!((p - 20.0).abs() < 1e-9);
        assert!(s > 0.9 && s < 1.0);
        let (pi, si) = reconstruction_metrics(&orig, &orig).unwrap();
        assert!(pi.is_infinite());
        assert_eq!(si, 1.0);
    }

    #[test]
    fn auc_known_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap(), 0.5);
        // one crossing: 5 of 6 pairs ordered correctly
        let a = auc(&[0.1, 0.7, 0.4, 0.8, 0.9], &[0, 0, 1, 1, 1]).unwrap();
        assert!((a - 5.0 / 6.0).abs() < 1e-12);
        assert!(matches!(auc(&[0.3, 0.4], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(auc(&[], &[]).is_err());
        assert!(auc(&[f64::NAN, 0.2], &[0, 1]).is_err());
    }

    #[test]
    fn auc_monotone_transform_invariant_and_random_is_half() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let scores: Vec<f64> = (0..1000).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..1000).map(|_| usize::from(rng.gen_bool(0.5))).collect();
        let base = auc(&scores, &labels).unwrap();
        // independent scores: AUC ~ 0.5 within Monte-Carlo width
        assert!((base - 0.5).abs() < 0.1, "random AUC {base}");
        let squashed: Vec<f64> = scores.iter().map(|s| (s * 0.7).tanh()).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| s.exp() + 4.0).collect();
        assert_eq!(base.to_bits(), auc(&squashed, &labels).unwrap().to_bits());
        assert_eq!(base.to_bits(), auc(&shifted, &labels).unwrap().to_bits());
    }

    #[test]
    fn alignment_stub_identity_is_perfect() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let logits = Array2::from_shape_fn((40, 2), |_| rng.gen_range(-2.0..2.0f64));
        let report = alignment_from_logits(&logits, &logits, None, "stub").unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.sensitivity, 1.0);
        assert_eq!(report.specificity, 1.0);
        assert_eq!(report.f1, 1.0);
        assert_eq!(report.auc, 1.0);
        assert_eq!(report.kl_divergence, 0.0);
        assert_eq!(report.n, 40);
    }

    #[test]
    fn alignment_single_teacher_class_errors_with_partials() {
        let teacher = Array2::from_shape_fn((10, 2), |(_, j)| if j == 0 { 2.0 } else { -1.0 });
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let agent = Array2::from_shape_fn((10, 2), |_| rng.gen_range(-1.0..1.0f64));
        let err = alignment_from_logits(&agent, &teacher, None, "x").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::UndefinedMetric(_)));
        assert!(msg.contains("accuracy="), "partial metrics missing: {msg}");
        assert!(msg.contains("kl="), "partial metrics missing: {msg}");
    }

    #[test]
    fn alignment_class_relabel_swaps_sens_spec() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let t = Array2::from_shape_fn((60, 2), |_| rng.gen_range(-2.0..2.0f64));
        let a = &t + &Array2::from_shape_fn((60, 2), |_| rng.gen_range(-0.8..0.8f64));
        let fwd = alignment_from_logits(&a, &t, None, "x").unwrap();
        let swap = |m: &Array2<f64>| {
            let mut s = m.clone();
            s.swap_axes(0, 1);
            let mut out = Array2::zeros(m.dim());
            out.column_mut(0).assign(&m.column(1));
            out.column_mut(1).assign(&m.column(0));
            s.swap_axes(0, 1);
            out
        };
        let rev = alignment_from_logits(&swap(&a), &swap(&t), None, "x").unwrap();
        assert!((fwd.accuracy - rev.accuracy).abs() < 1e-12);
        assert!((fwd.sensitivity - rev.specificity).abs() < 1e-12);
        assert!((fwd.specificity - rev.sensitivity).abs() < 1e-12);
        assert!((fwd.kl_divergence - rev.kl_divergence).abs() < 1e-12);
    }

    fn fake_record(alpha: f64, target: usize, y: f64) -> CounterfactualRecord {
        CounterfactualRecord {
            alpha,
            target_class: target,
            q_manipulated: crate::agent::LatentFeature::from_values(A1::zeros(1)),
            images: Vec::new(),
            agent_logits: A1::zeros(2),
            teacher_logits: if target == 1 {
                ndarray::arr1(&[0.0, y])
            } else {
                ndarray::arr1(&[y, 0.0])
            },
            heatmaps: Vec::new(),
        }
    }

    #[test]
    fn validity_and_monotone_fraction() {
        let monotone = SweepResult {
            target_class: 1,
            records: vec![
                fake_record(-1.0, 1, -0.5),
                fake_record(0.0, 1, 0.0),
                fake_record(1.0, 1, 0.4),
                fake_record(2.0, 1, 0.9),
            ],
        };
        let bumpy = SweepResult {
            target_class: 1,
            records: vec![
                fake_record(-1.0, 1, 0.5),
                fake_record(0.0, 1, 0.2),
                fake_record(1.0, 1, 0.9),
            ],
        };
        let failing = SweepResult {
            target_class: 1,
            records: vec![fake_record(0.0, 1, 0.3), fake_record(1.0, 1, 0.1)],
        };
        let (v, m) = manipulation_validity(&[monotone.clone()]).unwrap();
        assert_eq!((v, m), (1.0, 1.0));
        let (v, m) = manipulation_validity(&[monotone, bumpy, failing]).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert!((m - (1.0 + 0.5 + 0.0) / 3.0).abs() < 1e-12);
        assert!(manipulation_validity(&[]).is_err());
        let single = SweepResult { target_class: 1, records: vec![fake_record(0.0, 1, 0.0)] };
        assert!(manipulation_validity(&[single]).is_err());
    }

    #[test]
    fn observability_exact_and_sentinels() {
        let mut mask = Array2::from_elem((8, 8), false);
        for (i, j) in [(2, 2), (2, 3), (3, 2)] {
            mask[[i, j]] = true;
        }
        let mut map = Array2::zeros((8, 8));
        for (i, j) in [(2, 2), (2, 3), (3, 2)] {
            map[[i, j]] = -0.7; // sign must not matter
        }
        let s = observability_score(&map, &mask).unwrap();
        assert_eq!(s.iou, Some(1.0));
        assert!(!s.degenerate);
        // empty mask: undefined sentinel
        let empty = Array2::from_elem((8, 8), false);
        let s = observability_score(&map, &empty).unwrap();
        assert_eq!(s.iou, None);
        // all-zero heatmap: deterministic tie-break, flagged degenerate
        let zero = Array2::zeros((8, 8));
        let s = observability_score(&zero, &mask).unwrap();
        assert!(s.degenerate);
        // row-major first 3 pixels are (0,0),(0,1),(0,2): disjoint from mask
        assert_eq!(s.iou, Some(0.0));
        assert!(observability_score(&map, &Array2::from_elem((4, 4), false)).is_err());
    }

    #[test]
    fn observability_random_matches_analytic_baseline() {
        // [DERIVED] Monte-Carlo check of f/(2-f) before it gates acceptance
        let n = 64usize;
        let f = 0.2;
        let m = (f * (n * n) as f64).round() as usize;
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let mut mask = Array2::from_elem((n, n), false);
        let mut idx: Vec<usize> = (0..n * n).collect();
        rand::seq::SliceRandom::shuffle(&mut idx[..], &mut rng);
        for i in &idx[..m] {
            mask[[i / n, i % n]] = true;
        }
        let f_actual = m as f64 / (n * n) as f64;
        let expected = random_iou_baseline(f_actual).unwrap();
        let trials = 200;
        let mut acc = 0.0;
        for _ in 0..trials {
            let map = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0f64));
            acc += observability_score(&map, &mask).unwrap().iou.unwrap();
        }
        let mean = acc / trials as f64;
        assert!(
            (mean - expected).abs() < 0.005,
            "Monte-Carlo IoU {mean} vs analytic {expected}"
        );
        assert_eq!(random_iou_baseline(0.0).unwrap(), 0.0);
        assert_eq!(random_iou_baseline(1.0).unwrap(), 1.0);
        assert!(random_iou_baseline(1.5).is_err());
    }

    #[test]
    fn criteria_report_smoke() {
        use crate::agent::{build_agent, distill, DistillConfig, DistillObjective};
        use crate::data::{generate_synthetic_dataset, DataConfig, Split};
        use crate::diffae::DiffAEConfig;
        use crate::teacher::{train_teacher, TeacherConfig};

        let ds = generate_synthetic_dataset(&DataConfig {
            n: 30,
            image_size: 16,
            k: 1,
            class1_fraction: 0.5,
            train_fraction: 0.6,
            val_fraction: 0.2,
            seed: 31,
        })
        .unwrap();
        let train: Vec<QuerySample> =
            ds.split(Split::Train).into_iter().map(QuerySample::from_sample).collect();
        let val: Vec<QuerySample> =
            ds.split(Split::Val).into_iter().map(QuerySample::from_sample).collect();
        let diffae = DiffAE::init(&DiffAEConfig {
            image_size: 16,
            code_dim: 8,
            base_channels: 4,
            channel_mults: vec![1, 2, 2],
            t_steps: 10,
            beta_min: 0.01,
            beta_max: 0.2,
            ddim_steps: 4,
            train_steps: 1,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 3,
        })
        .unwrap();
        let tcfg = TeacherConfig {
            image_size: 16,
            k: 1,
            base_channels: 8,
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 2,
        };
        let (teacher, _) = train_teacher(&train, &val, &tcfg).unwrap();
        let agent = build_agent(&teacher, 1, 8, 7).unwrap();
        let (agent, _) = distill(
            agent,
            &diffae,
            &teacher,
            &train,
            DistillObjective::MseFeature,
            &DistillConfig { learning_rate: 1e-2, batch_size: 8, epochs: 10, cosine_decay: true, seed: 0 },
        )
        .unwrap();

        let test: Vec<&SyntheticSample> = ds.split(Split::Test);
        assert!(test.iter().any(|s| s.label == 1), "fixture needs a class-1 test sample");
        let report =
            criteria_report(&test, &diffae, &agent, &teacher, &CriteriaConfig::default()).unwrap();
        assert_eq!(report.n_queries, test.len());
        assert!(report.mean_ssim >= -1.0 && report.mean_ssim <= 1.0);
        assert!(report.mean_psnr.is_finite() || report.mean_psnr.is_infinite());
        assert!((0.0..=1.0).contains(&report.validity));
        assert!((0.0..=1.0).contains(&report.monotone_fraction));
        let iou = report.mean_observability.expect("class-1 samples present");
        assert!((0.0..=1.0).contains(&iou));
        assert!(report.observability_baseline > 0.0);
        assert!(report.mean_logit_dev_alpha0 >= 0.0);

        // bitwise reproducibility of the whole report
        let again =
            criteria_report(&test, &diffae, &agent, &teacher, &CriteriaConfig::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&again).unwrap()
        );

        // alignment over the same encoder: runs and stays in range
        let queries: Vec<QuerySample> =
            test.iter().map(|s| QuerySample::from_sample(s)).collect();
        match alignment_metrics(&agent, &diffae, &teacher, &queries, "unit") {
            Ok(r) => {
                assert!((0.0..=1.0).contains(&r.accuracy));
                assert!((0.0..=1.0).contains(&r.auc));
                assert!(r.kl_divergence >= 0.0);
            }
            Err(Error::UndefinedMetric(_)) => {} // tiny set may be single-class
            Err(e) => panic!("unexpected error: {e}"),
        }
    }

    #[test]
    fn alignment_table_renders_all_rows_deterministically() {
        let row = |o, acc| AlignmentReport {
            objective: Some(o),
            dataset: "d".into(),
            n: 10,
            auc: 0.95,
            accuracy: acc,
            sensitivity: 0.9,
            specificity: 0.85,
            f1: 0.88,
            kl_divergence: 0.12,
        };
        let reports = vec![
            row(DistillObjective::MseFeature, 0.91),
            row(DistillObjective::L1Feature, 0.92),
            row(DistillObjective::KlOutput, 0.93),
        ];
        let t1 = render_alignment_table(&reports);
        let t2 = render_alignment_table(&reports);
        assert_eq!(t1, t2);
        assert_eq!(t1.lines().count(), 4);
        for name in ["mse", "l1", "kl", "AUC", "Sensitivity"] {
            assert!(t1.contains(name), "missing {name} in:\n{t1}");
        }
    }
}
