//! Verification metrics and activation-range comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::EmbeddingNet;
use crate::synth::IdentitySpace;
use crate::tensor::Tensor;

/// Genuine and imposter pairs; row `i` of `left` is compared with row `i`
/// of `right`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub left: Tensor,
    pub right: Tensor,
    pub genuine: Vec<bool>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.genuine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genuine.is_empty()
    }
}

/// `n_pairs / 2` genuine pairs (same identity, independent noise) followed
/// by `n_pairs / 2` imposter pairs (distinct identities).
pub fn build_pairs(space: &IdentitySpace, n_pairs: usize, seed: u64) -> Result<PairSet> {
    if n_pairs < 2 || !n_pairs.is_multiple_of(2) {
        return Err(Error::domain(format!("n_pairs must be even and >= 2, got {n_pairs}")));
    }
    if space.n_identities < 2 {
        return Err(Error::domain("imposter pairs need at least 2 identities"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n_pairs / 2;
    let d = space.latent_dim;
    let mut left = Vec::with_capacity(n_pairs * d);
    let mut right = Vec::with_capacity(n_pairs * d);
    let mut genuine = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let a = rng.random_range(0..space.n_identities);
        let b = if k < half {
            a
        } else {
            // uniform over the other identities
            let b = rng.random_range(0..space.n_identities - 1);
            if b >= a {
                b + 1
            } else {
                b
            }
        };
        left.extend(space.draw_latent(a, &mut rng));
        right.extend(space.draw_latent(b, &mut rng));
        genuine.push(k < half);
    }
    let left = space.map_latents(&Tensor::new(vec![n_pairs, d], left)?)?;
    let right = space.map_latents(&Tensor::new(vec![n_pairs, d], right)?)?;
    Ok(PairSet { left, right, genuine })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ScoreSummary {
    fn of(scores: &[f64]) -> Self {
        let n = scores.len().max(1) as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Self {
            count: scores.len(),
            mean,
            std: var.sqrt(),
            min: scores.iter().cloned().fold(f64::INFINITY, f64::min),
            max: scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Best-threshold accuracy in `[0, 1]`.
    pub accuracy: f64,
    pub threshold: f64,
    pub tar_at_far: Vec<TarAtFar>,
    pub genuine: ScoreSummary,
    pub imposter: ScoreSummary,
}

impl VerificationReport {
    pub fn tar(&self, far: f64) -> Option<f64> {
        self.tar_at_far.iter().find(|t| t.far == far).map(|t| t.tar)
    }
}

/// Cosine similarity of each pair under `net` in its inference mode.
pub fn pair_scores(net: &EmbeddingNet, pairs: &PairSet) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::domain("empty pair set"));
    }
    let mode = net.inference_mode();
    let a = net.embed(&pairs.left, mode)?;
    let b = net.embed(&pairs.right, mode)?;
    Ok((0..pairs.len())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum::<f64>()
        })
        .collect())
}

pub fn verify(net: &EmbeddingNet, pairs: &PairSet, far_targets: &[f64]) -> Result<VerificationReport> {
    let scores = pair_scores(net, pairs)?;
    report_from_scores(&scores, &pairs.genuine, far_targets)
}

/// Accuracy by exhaustive threshold sweep and TAR at each FAR target.
///
/// A pair is accepted when its score is strictly above the threshold.
pub fn report_from_scores(scores: &[f64], genuine: &[bool], far_targets: &[f64]) -> Result<VerificationReport> {
    if scores.is_empty() || scores.len() != genuine.len() {
        return Err(Error::domain(format!(
            "{} scores for {} labels",
            scores.len(),
            genuine.len()
        )));
    }
    let (accuracy, threshold) = best_accuracy(scores, genuine);
    let gen: Vec<f64> = scores.iter().zip(genuine).filter(|(_, &g)| g).map(|(&s, _)| s).collect();
    let imp: Vec<f64> = scores.iter().zip(genuine).filter(|(_, &g)| !g).map(|(&s, _)| s).collect();
    let tar_at_far = far_targets
        .iter()
        .map(|&far| {
            let (tar, threshold) = tar_at(&gen, &imp, far);
            TarAtFar { far, tar, threshold }
        })
        .collect();
    Ok(VerificationReport {
        accuracy,
        threshold,
        tar_at_far,
        genuine: ScoreSummary::of(&gen),
        imposter: ScoreSummary::of(&imp),
    })
}

/// Sweeps every midpoint between distinct adjacent sorted scores plus one
/// threshold below and one above all scores.
fn best_accuracy(scores: &[f64], genuine: &[bool]) -> (f64, f64) {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let total_gen = genuine.iter().filter(|&&g| g).count();
    // threshold below everything: all accepted
    let mut correct = total_gen;
    let mut best = (correct, scores[order[0]] - 1.0);
    let mut i = 0;
    while i < n {
        // move every pair tied at this score below the threshold
        let s = scores[order[i]];
        while i < n && scores[order[i]] == s {
            if genuine[order[i]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let t = if i < n { 0.5 * (s + scores[order[i]]) } else { s + 1.0 };
        if correct > best.0 {
            best = (correct, t);
        }
    }
    (best.0 as f64 / n as f64, best.1)
}

/// Threshold at the `far` quantile of imposter scores: with imposters
/// sorted descending, the threshold is the `floor(far * n)`-th score, so at
/// most that many imposters score strictly above it.
fn tar_at(gen: &[f64], imp: &[f64], far: f64) -> (f64, f64) {
    if imp.is_empty() || gen.is_empty() {
        return (0.0, f64::NAN);
    }
    let mut sorted = imp.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (far.clamp(0.0, 1.0) * sorted.len() as f64).floor() as usize;
    let threshold = if k >= sorted.len() { f64::NEG_INFINITY } else { sorted[k] };
    let accepted = gen.iter().filter(|&&s| s > threshold).count();
    (accepted as f64 / gen.len() as f64, threshold)
}

/// Activation ranges of two calibrated networks, site by site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeCorrelationReport {
    pub source_a: String,
    pub source_b: String,
    pub intervals_a: Vec<(f32, f32)>,
    pub intervals_b: Vec<(f32, f32)>,
    pub iou: Vec<f64>,
    pub mean_iou: f64,
}

/// Intersection over union of two closed intervals. Two identical points
/// count as full overlap.
pub fn interval_iou(a: (f32, f32), b: (f32, f32)) -> f64 {
    let (a0, a1, b0, b1) = (a.0 as f64, a.1 as f64, b.0 as f64, b.1 as f64);
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    let union = a1.max(b1) - a0.min(b0);
    if union == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn range_correlation(
    a: &EmbeddingNet,
    b: &EmbeddingNet,
    label_a: &str,
    label_b: &str,
) -> Result<RangeCorrelationReport> {
    if !a.same_architecture(b) {
        return Err(Error::dim("range correlation needs identical architectures"));
    }
    let ranges = |n: &EmbeddingNet| -> Result<Vec<(f32, f32)>> {
        let q = n
            .quant_state()
            .ok_or_else(|| Error::state("range correlation needs calibrated networks"))?;
        Ok(q.activation_params.iter().map(|p| (p.range_lo, p.range_hi)).collect())
    };
    let (ia, ib) = (ranges(a)?, ranges(b)?);
    let iou: Vec<f64> = ia.iter().zip(&ib).map(|(&x, &y)| interval_iou(x, y)).collect();
    let mean_iou = iou.iter().sum::<f64>() / iou.len().max(1) as f64;
    Ok(RangeCorrelationReport {
        source_a: label_a.to_string(),
        source_b: label_b.to_string(),
        intervals_a: ia,
        intervals_b: ib,
        iou,
        mean_iou,
    })
}

impl RangeCorrelationReport {
    /// `depth,lo,hi,source` rows for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("depth,lo,hi,source\n");
        for (label, iv) in [(&self.source_a, &self.intervals_a), (&self.source_b, &self.intervals_b)] {
            for (d, (lo, hi)) in iv.iter().enumerate() {
                out.push_str(&format!("{d},{lo},{hi},{label}\n"));
            }
        }
        out
    }
}
