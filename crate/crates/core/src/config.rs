//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are rejected so typos do not silently fall back to defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::quant::BitWidth;

pub const SEED_ENV: &str = "QUANTDISTILL_SEED";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub n_identities: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub noise_sigma: f32,

    pub hidden_dim: usize,
    pub embed_dim: usize,

    pub teacher_iterations: usize,
    pub teacher_batch_size: usize,
    pub teacher_lr: f32,
    pub teacher_momentum: f32,
    pub teacher_weight_decay: f32,
    pub teacher_logit_scale: f32,

    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub calib_batches: usize,
    pub calib_batch_size: usize,
    pub bits: Vec<BitWidth>,

    pub n_pairs: usize,
    pub far_targets: Vec<f64>,
    pub smooth_window: usize,

    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            seed: 42,
            n_identities: 200,
            latent_dim: 16,
            input_dim: 64,
            noise_sigma: 0.15,
            hidden_dim: 64,
            embed_dim: 32,
            teacher_iterations: 3000,
            teacher_batch_size: 128,
            teacher_lr: 0.05,
            teacher_momentum: 0.9,
            teacher_weight_decay: 5e-4,
            teacher_logit_scale: 16.0,
            batch_size: d.batch_size,
            iterations: d.iterations,
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            calib_batches: 16,
            calib_batch_size: 64,
            bits: vec![BitWidth::W6, BitWidth::W8],
            n_pairs: 20000,
            far_targets: vec![1e-2],
            smooth_window: 100,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Parses a `--bits` style list such as `6,8`.
pub fn parse_bits(key: &str, value: &str) -> Result<Vec<BitWidth>> {
    let raw: Vec<u8> = parse_list(key, value)?;
    if raw.is_empty() {
        return Err(Error::config(key, "empty bit-width list"));
    }
    let mut out = Vec::new();
    for b in raw {
        let w = BitWidth::new(b).map_err(|e| Error::config(key, e.to_string()))?;
        if !out.contains(&w) {
            out.push(w);
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", lineno + 1), "expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "duplicate key"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Applies `QUANTDISTILL_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "n_identities" => self.n_identities = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "input_dim" => self.input_dim = parse(key, v)?,
            "noise_sigma" => self.noise_sigma = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "teacher_iterations" => self.teacher_iterations = parse(key, v)?,
            "teacher_batch_size" => self.teacher_batch_size = parse(key, v)?,
            "teacher_lr" => self.teacher_lr = parse(key, v)?,
            "teacher_momentum" => self.teacher_momentum = parse(key, v)?,
            "teacher_weight_decay" => self.teacher_weight_decay = parse(key, v)?,
            "teacher_logit_scale" => self.teacher_logit_scale = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "calib_batches" => self.calib_batches = parse(key, v)?,
            "calib_batch_size" => self.calib_batch_size = parse(key, v)?,
            "bits" => self.bits = parse_bits(key, v)?,
            "n_pairs" => self.n_pairs = parse(key, v)?,
            "far_targets" => self.far_targets = parse_list(key, v)?,
            "smooth_window" => self.smooth_window = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Checks every value against the preconditions of the module that
    /// consumes it.
    pub fn validate(&self) -> Result<()> {
        fn positive(key: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
            Ok(())
        }
        fn positive_f(key: &str, v: f32) -> Result<()> {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be a positive finite number"));
            }
            Ok(())
        }
        fn non_negative_f(key: &str, v: f32) -> Result<()> {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be finite and >= 0"));
            }
            Ok(())
        }
        if self.n_identities < 2 {
            return Err(Error::config("n_identities", "verification needs at least 2 identities"));
        }
        if self.latent_dim < 2 {
            return Err(Error::config("latent_dim", "must be >= 2"));
        }
        if self.input_dim < 2 {
            return Err(Error::config("input_dim", "must be >= 2"));
        }
        non_negative_f("noise_sigma", self.noise_sigma)?;
        positive("hidden_dim", self.hidden_dim)?;
        positive("embed_dim", self.embed_dim)?;
        positive("teacher_batch_size", self.teacher_batch_size)?;
        positive_f("teacher_lr", self.teacher_lr)?;
        non_negative_f("teacher_momentum", self.teacher_momentum)?;
        non_negative_f("teacher_weight_decay", self.teacher_weight_decay)?;
        positive_f("teacher_logit_scale", self.teacher_logit_scale)?;
        positive("batch_size", self.batch_size)?;
        positive_f("lr", self.lr)?;
        non_negative_f("momentum", self.momentum)?;
        non_negative_f("weight_decay", self.weight_decay)?;
        positive("calib_batches", self.calib_batches)?;
        positive("calib_batch_size", self.calib_batch_size)?;
        if self.bits.is_empty() {
            return Err(Error::config("bits", "empty bit-width list"));
        }
        for b in &self.bits {
            BitWidth::new(b.bits()).map_err(|e| Error::config("bits", e.to_string()))?;
        }
        if self.n_pairs < 2 || !self.n_pairs.is_multiple_of(2) {
            return Err(Error::config("n_pairs", "must be even and >= 2"));
        }
        if self.far_targets.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("far_targets", "each target must lie in [0, 1]"));
        }
        positive("smooth_window", self.smooth_window)?;
        Ok(())
    }

    pub fn distill_config(&self, bits: BitWidth) -> DistillConfig {
        DistillConfig {
            batch_size: self.batch_size,
            iterations: self.iterations,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            bit_width: bits,
            seed: self.seed,
        }
    }

    /// Layer widths of the embedding network.
    pub fn net_dims(&self) -> [usize; 4] {
        [self.input_dim, self.hidden_dim, self.hidden_dim, self.embed_dim]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = ExperimentConfig::parse_str(
            "# reference run\nseed = 7\n\nbits = 4, 8\nnoise_sigma=0.2\nfar_targets = 0.01,0.1\noutput_dir = /tmp/x\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.bits, vec![BitWidth::W4, BitWidth::W8]);
        assert_eq!(cfg.noise_sigma, 0.2);
        assert_eq!(cfg.far_targets, vec![0.01, 0.1]);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.n_identities, 200);
    }

    fn field_of(text: &str) -> String {
        match ExperimentConfig::parse_str(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_invalid_values_by_field() {
        assert_eq!(field_of("n_identities = 1"), "n_identities");
        assert_eq!(field_of("bits = 5"), "bits");
        assert_eq!(field_of("lr = -1"), "lr");
        assert_eq!(field_of("n_pairs = 3"), "n_pairs");
        assert_eq!(field_of("bogus = 1"), "bogus");
        assert_eq!(field_of("seed = 1\nseed = 2"), "seed");
        assert_eq!(field_of("seed 1"), "line 1");
        assert_eq!(field_of("batch_size = abc"), "batch_size");
    }

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
        let d = ExperimentConfig::default().distill_config(BitWidth::W8);
        assert_eq!((d.iterations, d.batch_size, d.lr), (2000, 64, 1e-4));
    }
}
