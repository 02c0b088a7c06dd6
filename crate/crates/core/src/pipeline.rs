//! End-to-end experiment steps shared by the CLI and the acceptance tests.

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::distill::{self, KdBatchResult};
use crate::error::{Error, Result};
use crate::eval::{self, PairSet, RangeCorrelationReport, VerificationReport};
use crate::graph::ParamId;
use crate::net::{EmbeddingNet, Mode, Sgd};
use crate::quant::BitWidth;
use crate::seed::{indexed, sub_seed};
use crate::store::{self, SizeReport};
use crate::synth::{IdentitySpace, SynthSource};
use crate::tensor::Tensor;

pub fn identity_space(cfg: &ExperimentConfig) -> Result<IdentitySpace> {
    IdentitySpace::new(
        cfg.n_identities,
        cfg.latent_dim,
        cfg.input_dim,
        cfg.noise_sigma,
        sub_seed(cfg.seed, "data"),
    )
}

/// Held-out verification pairs.
pub fn eval_pairs(cfg: &ExperimentConfig, space: &IdentitySpace) -> Result<PairSet> {
    eval::build_pairs(space, cfg.n_pairs, sub_seed(cfg.seed, "pairs"))
}

/// Unlabeled stream used for fine-tuning.
pub fn distill_source(cfg: &ExperimentConfig, space: &IdentitySpace) -> SynthSource {
    SynthSource::new(space.clone(), sub_seed(cfg.seed, "distill"))
}

/// Unlabeled stream used for activation calibration; `stream` selects an
/// independent source.
pub fn calibration_source(cfg: &ExperimentConfig, space: &IdentitySpace, stream: u64) -> SynthSource {
    SynthSource::new(space.clone(), indexed(sub_seed(cfg.seed, "calibration"), stream))
}

#[derive(Debug, Clone)]
pub struct TeacherOutcome {
    pub net: EmbeddingNet,
    pub losses: Vec<f32>,
    pub report: VerificationReport,
}

const CLASSIFIER_WEIGHT: ParamId = usize::MAX - 1;
const CLASSIFIER_BIAS: ParamId = usize::MAX;

/// Trains the full-precision teacher with softmax cross-entropy over a
/// scaled-cosine classifier on labeled synthetic identities. The
/// classifier is discarded afterwards.
pub fn pretrain_teacher(cfg: &ExperimentConfig) -> Result<TeacherOutcome> {
    cfg.validate()?;
    let space = identity_space(cfg)?;
    let net_seed = sub_seed(cfg.seed, "teacher");
    let mut net = EmbeddingNet::mlp(&cfg.net_dims(), net_seed)?;
    let head = EmbeddingNet::mlp(&[cfg.embed_dim, cfg.n_identities], sub_seed(net_seed, "head"))?;
    let mut head_w = head.linears().next().expect("one layer").weight.clone();
    let mut head_b = Tensor::zeros(&[cfg.n_identities]);
    let data_seed = sub_seed(cfg.seed, "teacher-data");
    let mut sgd = Sgd::new(cfg.teacher_lr, cfg.teacher_momentum, cfg.teacher_weight_decay);
    let head_slot = 2 * net.linears().count();
    let mut losses = Vec::with_capacity(cfg.teacher_iterations);
    for step in 0..cfg.teacher_iterations {
        let batch = space.sample_labeled(cfg.teacher_batch_size, indexed(data_seed, step as u64))?;
        let labels = batch.labels.as_ref().expect("labeled batch");
        let pass = net.forward_embed(&batch.inputs, Mode::FullPrecision)?;
        let (mut tape, emb, params) = pass.into_parts();
        let w = tape.param(CLASSIFIER_WEIGHT, head_w.clone());
        let b = tape.param(CLASSIFIER_BIAS, head_b.clone());
        let z = tape.linear(emb, w, b)?;
        let logits = tape.scale(z, cfg.teacher_logit_scale);
        let (loss, grad) = softmax_cross_entropy(tape.value(logits), labels)?;
        let grads = tape.backward(logits, grad)?;
        let net_grads = params.gradients(&grads)?;
        net.apply_update(&net_grads, &mut sgd)?;
        let gw = grads.param(CLASSIFIER_WEIGHT).ok_or_else(|| Error::state("missing head gradient"))?;
        let gb = grads.param(CLASSIFIER_BIAS).ok_or_else(|| Error::state("missing head gradient"))?;
        sgd.update(head_slot, &mut head_w, gw)?;
        sgd.update(head_slot + 1, &mut head_b, gb)?;
        losses.push(loss);
    }
    let report = eval::verify(&net, &eval_pairs(cfg, &space)?, &cfg.far_targets)?;
    Ok(TeacherOutcome { net, losses, report })
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<(f32, Tensor)> {
    let (m, c) = (logits.rows(), logits.cols());
    if labels.len() != m {
        return Err(Error::dim(format!("{} labels for {m} rows", labels.len())));
    }
    let mut grad = Vec::with_capacity(m * c);
    let mut total = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= c {
            return Err(Error::domain(format!("label {y} >= {c} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() - (row[y] as f64 - max);
        grad.extend(exps.iter().enumerate().map(|(j, &e)| {
            let p = e / sum - if j == y { 1.0 } else { 0.0 };
            (p / m as f64) as f32
        }));
    }
    Ok(((total / m as f64) as f32, Tensor::new(vec![m, c], grad)?))
}

#[derive(Debug, Clone, Serialize)]
pub struct StudentSummary {
    pub bit_width: u8,
    pub initial_smoothed_loss: f32,
    pub final_smoothed_loss: f32,
    /// `None` when no convergence reference is available.
    pub converged: Option<bool>,
    pub size: SizeReport,
}

#[derive(Debug, Clone)]
pub struct StudentOutcome {
    pub student: EmbeddingNet,
    pub curve: Vec<KdBatchResult>,
    pub summary: StudentSummary,
}

/// Calibrates a copy of `teacher` at `bits` and distills it.
pub fn distill_student(cfg: &ExperimentConfig, teacher: &EmbeddingNet, bits: BitWidth) -> Result<StudentOutcome> {
    cfg.validate()?;
    let space = identity_space(cfg)?;
    let mut calib = calibration_source(cfg, &space, 0);
    let student = distill::calibrate(teacher, &mut calib, cfg.calib_batches, cfg.calib_batch_size, bits)?;
    let mut source = distill_source(cfg, &space);
    let out = distill::finetune(&student, teacher, &mut source, &cfg.distill_config(bits))?;
    let losses = out.losses();
    let window = cfg.smooth_window;
    let initial = losses[..losses.len().min(window)].to_vec();
    let summary = StudentSummary {
        bit_width: bits.bits(),
        initial_smoothed_loss: distill::final_smoothed(&initial, window).unwrap_or(f32::NAN),
        final_smoothed_loss: distill::final_smoothed(&losses, window).unwrap_or(f32::NAN),
        converged: None,
        size: store::net_size_report(&out.student, &[bits])?,
    };
    Ok(StudentOutcome {
        student: out.student,
        curve: out.curve,
        summary,
    })
}

/// Marks sub-6-bit students as non-converged when their final smoothed
/// loss exceeds twice the 6-bit student's. Students at 6 bits or more are
/// converged when their loss did not increase.
pub fn flag_convergence(summaries: &mut [StudentSummary]) {
    let reference = summaries
        .iter()
        .find(|s| s.bit_width == 6)
        .map(|s| s.final_smoothed_loss);
    for s in summaries.iter_mut() {
        s.converged = if s.bit_width < 6 {
            reference.map(|r| s.final_smoothed_loss <= 2.0 * r)
        } else {
            Some(s.final_smoothed_loss <= s.initial_smoothed_loss)
        };
    }
}

/// Calibrates two copies of `net` on independent synthetic streams and
/// compares their activation ranges.
pub fn range_overlap(cfg: &ExperimentConfig, net: &EmbeddingNet, bits: BitWidth) -> Result<RangeCorrelationReport> {
    let space = identity_space(cfg)?;
    let mut a = calibration_source(cfg, &space, 1);
    let mut b = calibration_source(cfg, &space, 2);
    let na = distill::calibrate(net, &mut a, cfg.calib_batches, cfg.calib_batch_size, bits)?;
    let nb = distill::calibrate(net, &mut b, cfg.calib_batches, cfg.calib_batch_size, bits)?;
    eval::range_correlation(&na, &nb, "source_a", "source_b")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Tensor::from_rows(&[[0.3f32, -1.2, 2.0], [0.0, 0.5, -0.5]]).unwrap();
        let labels = [2u32, 0];
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-3f32;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let fd = (softmax_cross_entropy(&p, &labels).unwrap().0 - softmax_cross_entropy(&m, &labels).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-3, "{i}: {fd} vs {}", g.data()[i]);
        }
        assert!(softmax_cross_entropy(&logits, &[5, 0]).is_err());
    }

    #[test]
    fn convergence_flags() {
        let mk = |b, init, fin| StudentSummary {
            bit_width: b,
            initial_smoothed_loss: init,
            final_smoothed_loss: fin,
            converged: None,
            size: store::size_report(1, &[BitWidth::W8], None).unwrap(),
        };
        let mut s = vec![mk(4, 0.5, 0.3), mk(6, 0.1, 0.05), mk(8, 0.01, 0.02)];
        flag_convergence(&mut s);
        assert_eq!(s[0].converged, Some(false));
        assert_eq!(s[1].converged, Some(true));
        assert_eq!(s[2].converged, Some(false));
        let mut lone = vec![mk(4, 0.5, 0.3)];
        flag_convergence(&mut lone);
        assert_eq!(lone[0].converged, None);
    }
}
