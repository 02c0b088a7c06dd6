//! Data-free recovery of a quantized student by embedding distillation.
//!
//! The student (quantized mode) is fine-tuned so its normalized embeddings
//! point the same way as the frozen full-precision teacher's, on unlabeled
//! synthetic batches only. The objective is one minus the batch-mean cosine
//! similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{EmbeddingNet, Mode, QuantState, Sgd};
use crate::quant::{BitWidth, RangeObserver};
use crate::synth::UnlabeledSource;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub bit_width: BitWidth,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            iterations: 2000,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            bit_width: BitWidth::W8,
            seed: 42,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be a positive finite number"));
        }
        if !self.momentum.is_finite() || self.momentum < 0.0 {
            return Err(Error::config("momentum", "must be finite and >= 0"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One fine-tuning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdBatchResult {
    pub loss: f32,
    /// Frobenius norm of each linear layer's weight gradient.
    pub grad_norms: Vec<f32>,
}

/// Batch cosine-distance loss `1 - mean_i cos(fq_i, ft_i)`.
pub fn kd_loss(fq: &Tensor, ft: &Tensor) -> Result<f32> {
    kd_loss_with_grad(fq, ft).map(|(l, _)| l)
}

/// Loss and its gradient with respect to `fq` (the teacher is constant).
pub fn kd_loss_with_grad(fq: &Tensor, ft: &Tensor) -> Result<(f32, Tensor)> {
    if fq.shape() != ft.shape() || fq.rank() != 2 {
        return Err(Error::dim(format!(
            "student {:?} and teacher {:?} embeddings differ",
            fq.shape(),
            ft.shape()
        )));
    }
    let (m, d) = (fq.rows(), fq.cols());
    let mut cos_sum = 0.0f64;
    let mut grad = Vec::with_capacity(m * d);
    for i in 0..m {
        let (q, t) = (fq.row(i), ft.row(i));
        let (mut dot, mut qq, mut tt) = (0.0f64, 0.0f64, 0.0f64);
        for (&a, &b) in q.iter().zip(t) {
            let (a, b) = (a as f64, b as f64);
            dot += a * b;
            qq += a * a;
            tt += b * b;
        }
        if !(qq > 0.0) || !(tt > 0.0) {
            return Err(Error::domain(format!("row {i} has zero norm")));
        }
        let (nq, nt) = (qq.sqrt(), tt.sqrt());
        let cos = (dot / (qq * tt).sqrt()).clamp(-1.0, 1.0);
        cos_sum += cos;
        // d cos / d q = t / (|q||t|) - cos * q / |q|^2, scaled by -1/M
        let scale = -1.0 / m as f64;
        grad.extend(
            q.iter()
                .zip(t)
                .map(|(&a, &b)| (scale * (b as f64 / (nq * nt) - cos * a as f64 / qq)) as f32),
        );
    }
    let loss = (1.0 - cos_sum / m as f64).clamp(0.0, 2.0);
    Ok((loss as f32, Tensor::new(vec![m, d], grad)?))
}

/// Runs `n_batches` full-precision forward passes, records the range of
/// every activation site and freezes them into activation params.
pub fn calibrate(
    net: &EmbeddingNet,
    source: &mut dyn UnlabeledSource,
    n_batches: usize,
    batch_size: usize,
    bits: BitWidth,
) -> Result<EmbeddingNet> {
    if n_batches == 0 {
        return Err(Error::state("calibration needs at least one batch"));
    }
    let mut observers = vec![RangeObserver::new(); net.activation_sites().len()];
    for i in 0..n_batches {
        let batch = source.batch(i as u64, batch_size)?;
        net.observe(batch.inputs(), &mut observers)?;
    }
    let activation_params = observers
        .iter()
        .map(|o| o.freeze(bits))
        .collect::<Result<Vec<_>>>()?;
    let mut out = net.clone();
    out.set_quant_state(QuantState {
        bit_width: bits,
        activation_params,
    })?;
    Ok(out)
}

/// Result of [`finetune`].
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: EmbeddingNet,
    pub curve: Vec<KdBatchResult>,
}

impl DistillOutcome {
    pub fn losses(&self) -> Vec<f32> {
        self.curve.iter().map(|r| r.loss).collect()
    }
}

/// Fine-tunes `student` in quantized mode against the frozen `teacher`.
pub fn finetune(
    student: &EmbeddingNet,
    teacher: &EmbeddingNet,
    source: &mut dyn UnlabeledSource,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    let state = student
        .quant_state()
        .ok_or_else(|| Error::state("student must be calibrated before fine-tuning"))?;
    if state.bit_width != cfg.bit_width {
        return Err(Error::state(format!(
            "student calibrated at {} bits but config asks for {}",
            state.bit_width, cfg.bit_width
        )));
    }
    if student.embed_dim() != teacher.embed_dim() || student.input_dim() != teacher.input_dim() {
        return Err(Error::dim(format!(
            "student {}->{} vs teacher {}->{}",
            student.input_dim(),
            student.embed_dim(),
            teacher.input_dim(),
            teacher.embed_dim()
        )));
    }
    let mut student = student.clone();
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let batch = source.batch(step as u64, cfg.batch_size)?;
        let ft = teacher.embed(batch.inputs(), Mode::FullPrecision)?;
        let pass = student.forward_embed(batch.inputs(), Mode::Quantized)?;
        let (loss, grad) = kd_loss_with_grad(pass.embedding(), &ft)?;
        let grads = pass.backward(grad)?;
        student.apply_update(&grads, &mut sgd)?;
        curve.push(KdBatchResult {
            loss,
            grad_norms: grads.weight_norms(),
        });
    }
    Ok(DistillOutcome { student, curve })
}

/// Means of consecutive non-overlapping windows; a trailing partial window
/// is averaged over its own length.
pub fn smooth(losses: &[f32], window: usize) -> Vec<f32> {
    let window = window.max(1);
    losses
        .chunks(window)
        .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / c.len() as f64) as f32)
        .collect()
}

/// Mean of the last `window` losses.
pub fn final_smoothed(losses: &[f32], window: usize) -> Option<f32> {
    if losses.is_empty() {
        return None;
    }
    let start = losses.len().saturating_sub(window.max(1));
    let tail = &losses[start..];
    Some((tail.iter().map(|&v| v as f64).sum::<f64>() / tail.len() as f64) as f32)
}

/// `step,loss` rows with a header line.
pub fn loss_csv(curve: &[KdBatchResult]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, r) in curve.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i, r.loss));
    }
    out
}
