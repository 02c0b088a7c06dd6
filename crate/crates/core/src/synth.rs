//! Procedural identity space standing in for a pretrained face generator.
//!
//! Each identity is a unit-norm prototype in a latent space. A sample is its
//! prototype plus isotropic Gaussian noise, pushed through a fixed random
//! affine map and `tanh`. The distillation path only ever sees
//! [`UnlabeledBatch`]es; labels exist solely for teacher pretraining.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::mpsc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpace {
    pub n_identities: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub noise_sigma: f32,
    pub seed: u64,
    /// `[n_identities, latent_dim]`, unit-norm rows.
    prototypes: Tensor,
    /// `[input_dim, latent_dim]`
    mix_weight: Tensor,
    mix_bias: Tensor,
}

/// Gain applied to the mixing matrix so `tanh` is driven into its
/// nonlinear region without saturating.
const MIX_GAIN: f64 = 3.0;

impl IdentitySpace {
    pub fn new(n_identities: usize, latent_dim: usize, input_dim: usize, noise_sigma: f32, seed: u64) -> Result<Self> {
        if n_identities < 2 {
            return Err(Error::domain(format!("need at least 2 identities, got {n_identities}")));
        }
        if latent_dim < 2 || input_dim < 2 {
            return Err(Error::domain(format!(
                "latent_dim and input_dim must be >= 2, got {latent_dim} and {input_dim}"
            )));
        }
        if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
            return Err(Error::domain(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::sub_seed(seed, "identity-space"));
        let mut protos = Vec::with_capacity(n_identities * latent_dim);
        for _ in 0..n_identities {
            let row: Vec<f64> = (0..latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            protos.extend(row.iter().map(|v| (v / norm) as f32));
        }
        let std = MIX_GAIN / (latent_dim as f64).sqrt();
        let mix_weight: Vec<f32> = (0..input_dim * latent_dim)
            .map(|_| (Distribution::<f64>::sample(&StandardNormal, &mut rng) * std) as f32)
            .collect();
        let mix_bias: Vec<f32> = (0..input_dim).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        Ok(Self {
            n_identities,
            latent_dim,
            input_dim,
            noise_sigma,
            seed,
            prototypes: Tensor::new(vec![n_identities, latent_dim], protos)?,
            mix_weight: Tensor::new(vec![input_dim, latent_dim], mix_weight)?,
            mix_bias: Tensor::vector(mix_bias)?,
        })
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    /// Prototype of `identity` plus one draw of latent noise.
    pub(crate) fn draw_latent(&self, identity: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let proto = self.prototypes.row(identity);
        if self.noise_sigma == 0.0 {
            return proto.to_vec();
        }
        let noise = Normal::new(0.0f32, self.noise_sigma).expect("sigma validated at construction");
        proto.iter().map(|&p| p + noise.sample(rng)).collect()
    }

    /// Pre-map latents and their identity labels.
    pub fn sample_latents(&self, m: usize, seed: u64) -> Result<(Tensor, Vec<u32>)> {
        if m == 0 {
            return Err(Error::domain("batch size must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(m * self.latent_dim);
        let mut labels = Vec::with_capacity(m);
        for _ in 0..m {
            let id = rng.random_range(0..self.n_identities);
            data.extend(self.draw_latent(id, &mut rng));
            labels.push(id as u32);
        }
        Ok((Tensor::new(vec![m, self.latent_dim], data)?, labels))
    }

    /// `tanh(A · latent + c)` applied row-wise.
    pub fn map_latents(&self, latents: &Tensor) -> Result<Tensor> {
        let z = latents.matmul_transposed(&self.mix_weight)?.add_row(&self.mix_bias)?;
        Ok(z.map(f32::tanh))
    }

    pub fn sample_labeled(&self, m: usize, seed: u64) -> Result<Batch> {
        let (latents, labels) = self.sample_latents(m, seed)?;
        Ok(Batch {
            inputs: self.map_latents(&latents)?,
            labels: Some(labels),
        })
    }

    pub fn sample_unlabeled(&self, m: usize, seed: u64) -> Result<UnlabeledBatch> {
        let (latents, _) = self.sample_latents(m, seed)?;
        Ok(UnlabeledBatch(self.map_latents(&latents)?))
    }
}

/// Inputs with optional identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Option<Vec<u32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops any labels.
    pub fn into_unlabeled(self) -> UnlabeledBatch {
        UnlabeledBatch(self.inputs)
    }
}

/// Inputs only. The distillation path accepts nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBatch(pub Tensor);

impl UnlabeledBatch {
    pub fn inputs(&self) -> &Tensor {
        &self.0
    }
}

/// Deterministic stream of unlabeled batches addressed by index.
pub trait UnlabeledSource {
    fn batch(&mut self, index: u64, size: usize) -> Result<UnlabeledBatch>;
}

/// Draws batch `i` from the identity space with seed `indexed(seed, i)`.
#[derive(Debug, Clone)]
pub struct SynthSource {
    pub space: IdentitySpace,
    pub seed: u64,
}

impl SynthSource {
    pub fn new(space: IdentitySpace, seed: u64) -> Self {
        Self { space, seed }
    }
}

impl UnlabeledSource for SynthSource {
    fn batch(&mut self, index: u64, size: usize) -> Result<UnlabeledBatch> {
        self.space.sample_unlabeled(size, seed::indexed(self.seed, index))
    }
}

/// Unlabeled batches loaded up front (e.g. from raw batch files), served
/// round-robin.
#[derive(Debug, Clone)]
pub struct FixedSource {
    batches: Vec<UnlabeledBatch>,
}

impl FixedSource {
    pub fn new(batches: Vec<UnlabeledBatch>) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::domain("fixed source needs at least one batch"));
        }
        Ok(Self { batches })
    }
}

impl UnlabeledSource for FixedSource {
    fn batch(&mut self, index: u64, size: usize) -> Result<UnlabeledBatch> {
        let b = &self.batches[(index % self.batches.len() as u64) as usize];
        if b.0.rows() != size {
            return Err(Error::dim(format!("stored batch has {} rows, requested {size}", b.0.rows())));
        }
        Ok(b.clone())
    }
}

/// Produces batches `0..count` of a [`SynthSource`] on a worker thread.
///
/// Batches arrive in index order, so consumers see exactly the sequence a
/// synchronous `SynthSource` would give.
pub struct Prefetcher {
    rx: mpsc::Receiver<Result<UnlabeledBatch>>,
    next: u64,
    handle: Option<thread::JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(mut source: SynthSource, size: usize, count: u64, depth: usize) -> Self {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let handle = thread::spawn(move || {
            for i in 0..count {
                if tx.send(source.batch(i, size)).is_err() {
                    break;
                }
            }
        });
        Self {
            rx,
            next: 0,
            handle: Some(handle),
        }
    }
}

impl UnlabeledSource for Prefetcher {
    fn batch(&mut self, index: u64, _size: usize) -> Result<UnlabeledBatch> {
        if index != self.next {
            return Err(Error::state(format!(
                "prefetcher is sequential: expected batch {}, asked for {index}",
                self.next
            )));
        }
        self.next += 1;
        self.rx
            .recv()
            .map_err(|_| Error::state("prefetcher exhausted"))?
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // unblock the producer before joining
        let (_tx, rx) = mpsc::sync_channel(0);
        drop(std::mem::replace(&mut self.rx, rx));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

const BATCH_MAGIC: &[u8; 4] = b"QFDB";
const BATCH_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;

/// Raw batch encoding: magic `QFDB`, version u16, flags u16 (bit 0 = labels),
/// M u32, input_dim u32, `M * input_dim` f32, then optional `M` u32 labels.
/// Everything little-endian.
pub fn encode_batch(batch: &Batch) -> Vec<u8> {
    let (m, d) = (batch.inputs.rows(), batch.inputs.cols());
    let mut out = Vec::with_capacity(16 + 4 * m * d + 4 * m);
    out.extend_from_slice(BATCH_MAGIC);
    out.extend_from_slice(&BATCH_VERSION.to_le_bytes());
    let flags = if batch.labels.is_some() { FLAG_LABELS } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in batch.inputs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &batch.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn decode_batch(bytes: &[u8]) -> Result<Batch> {
    let mut r = crate::store::Reader::new(bytes);
    let magic = r.take("magic", 4)?;
    if magic != BATCH_MAGIC {
        return Err(Error::format("magic", 0, format!("expected QFDB, found {magic:?}")));
    }
    let at = r.offset();
    let version = r.u16("version")?;
    if version != BATCH_VERSION {
        return Err(Error::format("version", at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let flags = r.u16("flags")?;
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::format("flags", at, format!("unknown flag bits {flags:#06x}")));
    }
    let m = r.u32("batch_size")? as usize;
    let d = r.u32("input_dim")? as usize;
    if m == 0 || d == 0 {
        return Err(Error::domain(format!("empty batch file (M = {m}, input_dim = {d})")));
    }
    let data = r.f32s("inputs", m * d)?;
    let labels = if flags & FLAG_LABELS != 0 {
        Some((0..m).map(|_| r.u32("labels")).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    if r.remaining() != 0 {
        return Err(Error::format("trailer", r.offset(), format!("{} unexpected trailing bytes", r.remaining())));
    }
    Ok(Batch {
        inputs: Tensor::new(vec![m, d], data)?,
        labels,
    })
}

pub fn save_tensor_file(path: &Path, batch: &Batch) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_batch(batch)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor_file(path: &Path) -> Result<Batch> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_batch(&bytes)
}
