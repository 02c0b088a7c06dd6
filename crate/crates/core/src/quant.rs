//! Asymmetric affine quantization.
//!
//! A real `x` in `[lo, hi]` maps to a signed `b`-bit code
//!
//! ```text
//! s    = (hi - lo) / (2^b - 1)
//! z    = round(lo * (2^b - 1) / (hi - lo) + 2^(b-1))
//! code = clip(round(x / s - z), -2^(b-1), 2^(b-1) - 1)
//! x'   = s * (code + z)
//! ```
//!
//! `round` is round-half-to-even everywhere. The zero-point is kept as an
//! `i32` because it can reach `2^(b-1)` (e.g. `lo == 0`), one past the
//! largest signed `b`-bit code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Tensor};

/// Number of bits per quantized value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BitWidth(u8);

impl BitWidth {
    pub const W4: BitWidth = BitWidth(4);
    pub const W6: BitWidth = BitWidth(6);
    pub const W8: BitWidth = BitWidth(8);

    /// Accepts the supported deployment widths 4, 6 and 8.
    pub fn new(bits: u8) -> Result<Self> {
        match bits {
            4 | 6 | 8 => Ok(BitWidth(bits)),
            _ => Err(Error::domain(format!("unsupported bit-width {bits}, expected 4, 6 or 8"))),
        }
    }

    /// Any width in `2..=16`. Wider grids are only useful as a
    /// near-lossless reference when testing the fake-quant path.
    pub fn extended(bits: u8) -> Result<Self> {
        if (2..=16).contains(&bits) {
            Ok(BitWidth(bits))
        } else {
            Err(Error::domain(format!("bit-width {bits} outside 2..=16")))
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// Number of quantization steps, `2^b - 1`.
    pub fn levels(self) -> u32 {
        (1u32 << self.0) - 1
    }

    pub fn code_min(self) -> i32 {
        -(1i32 << (self.0 - 1))
    }

    pub fn code_max(self) -> i32 {
        (1i32 << (self.0 - 1)) - 1
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        BitWidth::extended(bits)
    }
}

impl From<BitWidth> for u8 {
    fn from(b: BitWidth) -> u8 {
        b.0
    }
}

impl std::fmt::Display for BitWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Scale for the range `[lo, hi]`; a collapsed range falls back to `1.0`.
pub fn compute_scale(lo: f32, hi: f32, bits: BitWidth) -> Result<f32> {
    check_range(lo, hi)?;
    if lo == hi {
        return Ok(1.0);
    }
    Ok(((hi as f64 - lo as f64) / bits.levels() as f64) as f32)
}

/// Zero-point for the non-degenerate range `[lo, hi]`.
pub fn compute_zero_point(lo: f32, hi: f32, bits: BitWidth) -> Result<i32> {
    check_range(lo, hi)?;
    if lo >= hi {
        return Err(Error::domain(format!("zero-point needs lo < hi, got [{lo}, {hi}]")));
    }
    let levels = bits.levels() as f64;
    let half = (1u32 << (bits.bits() - 1)) as f64;
    let z = (lo as f64 * levels / (hi as f64 - lo as f64) + half).round_ties_even();
    if z.abs() > i32::MAX as f64 {
        return Err(Error::domain(format!("zero-point {z} overflows for range [{lo}, {hi}]")));
    }
    Ok(z as i32)
}

fn check_range(lo: f32, hi: f32) -> Result<()> {
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::domain(format!("non-finite range [{lo}, {hi}]")));
    }
    if lo > hi {
        return Err(Error::domain(format!("inverted range [{lo}, {hi}]")));
    }
    Ok(())
}

/// Scale, zero-point, bit-width and the real range they were derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub bit_width: BitWidth,
    pub range_lo: f32,
    pub range_hi: f32,
}

impl QuantParams {
    /// Derives parameters covering `[lo, hi]`.
    ///
    /// A collapsed range (`lo == hi`) uses `scale = 1` and
    /// `zero_point = round(lo)`, so the constant lands on code 0 and
    /// dequantizes to `round(lo)`; integer constants round-trip exactly.
    pub fn from_range(lo: f32, hi: f32, bits: BitWidth) -> Result<Self> {
        check_range(lo, hi)?;
        let degenerate = QuantParams {
            scale: 1.0,
            zero_point: (lo as f64).round_ties_even().clamp(i32::MIN as f64, i32::MAX as f64) as i32,
            bit_width: bits,
            range_lo: lo,
            range_hi: hi,
        };
        if lo == hi {
            return Ok(degenerate);
        }
        let scale = compute_scale(lo, hi, bits)?;
        if !scale.is_normal() {
            // range narrower than f32 can resolve
            return Ok(degenerate);
        }
        let zero_point = match compute_zero_point(lo, hi, bits) {
            Ok(z) => z,
            Err(_) => return Ok(degenerate),
        };
        Ok(QuantParams {
            scale,
            zero_point,
            bit_width: bits,
            range_lo: lo,
            range_hi: hi,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.range_lo == self.range_hi
    }

    /// `clip(round(x / s - z))`.
    pub fn quantize_value(&self, x: f32) -> i32 {
        let t = (x as f64 / self.scale as f64 - self.zero_point as f64).round_ties_even();
        let lo = self.bit_width.code_min() as f64;
        let hi = self.bit_width.code_max() as f64;
        // NaN maps to the lowest code rather than poisoning downstream sums
        if t.is_nan() {
            return self.bit_width.code_min();
        }
        t.clamp(lo, hi) as i32
    }

    /// `s * (code + z)`.
    pub fn dequantize_value(&self, code: i32) -> f32 {
        (self.scale as f64 * (code as f64 + self.zero_point as f64)) as f32
    }

    /// Quantize-then-dequantize.
    pub fn fake_value(&self, x: f32) -> f32 {
        self.dequantize_value(self.quantize_value(x))
    }

    /// Whether `x` lies inside the clipping range `[lo, hi]`.
    pub fn in_range(&self, x: f32) -> bool {
        self.range_lo <= x && x <= self.range_hi
    }
}

/// How quantization parameters are shared across a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerTensor,
    /// One parameter set per slice along the axis.
    PerChannel(Axis),
}

/// Parameters for a whole tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QuantScheme {
    PerTensor(QuantParams),
    PerChannel { axis: Axis, params: Vec<QuantParams> },
}

impl QuantScheme {
    pub fn bit_width(&self) -> BitWidth {
        match self {
            QuantScheme::PerTensor(p) => p.bit_width,
            QuantScheme::PerChannel { params, .. } => params[0].bit_width,
        }
    }

    pub fn params(&self) -> &[QuantParams] {
        match self {
            QuantScheme::PerTensor(p) => std::slice::from_ref(p),
            QuantScheme::PerChannel { params, .. } => params,
        }
    }

    /// Parameter set governing each element of a tensor with `shape`.
    fn per_element<'a>(&'a self, shape: &[usize]) -> Result<Box<dyn Fn(usize) -> &'a QuantParams + 'a>> {
        match self {
            QuantScheme::PerTensor(p) => Ok(Box::new(move |_| p)),
            QuantScheme::PerChannel { axis, params } => {
                let k = axis.0;
                if k >= shape.len() {
                    return Err(Error::dim(format!("channel axis {k} out of range for {shape:?}")));
                }
                if shape[k] != params.len() {
                    return Err(Error::dim(format!(
                        "{} channel params for {} channels",
                        params.len(),
                        shape[k]
                    )));
                }
                let n = shape[k];
                let inner: usize = shape[k + 1..].iter().product();
                Ok(Box::new(move |i| &params[(i / inner) % n]))
            }
        }
    }

    pub fn quantize(&self, x: &Tensor) -> Result<QuantizedTensor> {
        let lookup = self.per_element(x.shape())?;
        let codes = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| lookup(i).quantize_value(v))
            .collect();
        Ok(QuantizedTensor {
            codes,
            shape: x.shape().to_vec(),
            scheme: self.clone(),
        })
    }

    /// Elementwise quantize-then-dequantize plus the in-range mask.
    pub fn fake_quantize(&self, x: &Tensor) -> Result<(Tensor, Vec<bool>)> {
        let lookup = self.per_element(x.shape())?;
        let mut mask = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for (i, &v) in x.data().iter().enumerate() {
            let p = lookup(i);
            mask.push(p.in_range(v));
            out.push(p.fake_value(v));
        }
        Ok((Tensor::new(x.shape().to_vec(), out)?, mask))
    }
}

/// Integer codes and the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i32>,
    pub shape: Vec<usize>,
    pub scheme: QuantScheme,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Result<Tensor> {
        let lookup = self.scheme.per_element(&self.shape)?;
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| lookup(i).dequantize_value(c))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

pub fn quantize(x: &Tensor, params: &QuantParams) -> QuantizedTensor {
    QuantScheme::PerTensor(*params)
        .quantize(x)
        .expect("per-tensor quantization accepts any shape")
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    q.dequantize()
}

/// Parameters from the extrema of `t`, globally or per channel slice.
pub fn derive_params(t: &Tensor, bits: BitWidth, granularity: Granularity) -> Result<QuantScheme> {
    match granularity {
        Granularity::PerTensor => {
            let (lo, hi) = t.reduce_extrema(None)?;
            let p = QuantParams::from_range(lo.data()[0], hi.data()[0], bits)?;
            Ok(QuantScheme::PerTensor(p))
        }
        Granularity::PerChannel(axis) => {
            let params = t
                .slice_extrema(axis)?
                .into_iter()
                .map(|(lo, hi)| QuantParams::from_range(lo, hi, bits))
                .collect::<Result<Vec<_>>>()?;
            Ok(QuantScheme::PerChannel { axis, params })
        }
    }
}

/// Running min/max over every tensor it has seen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeObserver {
    pub running_lo: f32,
    pub running_hi: f32,
    pub count: u64,
}

impl Default for RangeObserver {
    fn default() -> Self {
        Self {
            running_lo: f32::INFINITY,
            running_hi: f32::NEG_INFINITY,
            count: 0,
        }
    }
}

impl RangeObserver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, t: &Tensor) {
        for &v in t.data() {
            self.running_lo = self.running_lo.min(v);
            self.running_hi = self.running_hi.max(v);
        }
        self.count += 1;
    }

    pub fn updated(mut self, t: &Tensor) -> Self {
        self.update(t);
        self
    }

    pub fn range(&self) -> Option<(f32, f32)> {
        (self.count > 0).then_some((self.running_lo, self.running_hi))
    }

    /// Freezes the observed range into quantization parameters.
    pub fn freeze(&self, bits: BitWidth) -> Result<QuantParams> {
        let (lo, hi) = self
            .range()
            .ok_or_else(|| Error::state("observer has seen no data"))?;
        QuantParams::from_range(lo, hi, bits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p8(lo: f32, hi: f32) -> QuantParams {
        QuantParams::from_range(lo, hi, BitWidth::W8).unwrap()
    }

    #[test]
    fn scale_examples() {
        let s = compute_scale(-1.0, 1.0, BitWidth::W8).unwrap();
        assert!((s as f64 - 2.0 / 255.0).abs() < 1e-9);
        assert!((compute_scale(0.0, 2.55, BitWidth::W8).unwrap() - 0.01).abs() < 1e-9);
        assert_eq!(compute_scale(0.0, 0.0, BitWidth::W8).unwrap(), 1.0);
        assert!(matches!(compute_scale(1.0, 0.0, BitWidth::W8), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_point_examples() {
        assert_eq!(compute_zero_point(0.0, 2.55, BitWidth::W8).unwrap(), 128);
        // -127.5 + 128 = 0.5 rounds to even
        assert_eq!(compute_zero_point(-1.0, 1.0, BitWidth::W8).unwrap(), 0);
        assert_eq!(compute_zero_point(-2.55, 0.0, BitWidth::W8).unwrap(), -127);
        assert!(matches!(compute_zero_point(1.0, 1.0, BitWidth::W8), Err(Error::Domain(_))));
        assert!(matches!(compute_zero_point(2.0, 1.0, BitWidth::W8), Err(Error::Domain(_))));
    }

    #[test]
    fn quantize_examples() {
        let p = p8(0.0, 2.55);
        assert_eq!((p.scale, p.zero_point), (0.01, 128));
        assert_eq!(p.quantize_value(1.0), -28);
        assert_eq!(p.quantize_value(0.0), -128);
        assert_eq!(p.quantize_value(10.0), 127);
        for bits in [BitWidth::W4, BitWidth::W6, BitWidth::W8] {
            let p = QuantParams::from_range(-0.7, 1.9, bits).unwrap();
            assert_eq!(p.quantize_value(-0.7), bits.code_min());
        }
    }

    #[test]
    fn dequantize_examples() {
        let p = p8(0.0, 2.55);
        assert_eq!(p.dequantize_value(-28), 1.0);
        assert_eq!(p.dequantize_value(0), 1.28);
        for (lo, hi) in [(-1.0f32, 1.0f32), (0.3, 0.9), (-5.0, -2.0)] {
            let p = p8(lo, hi);
            assert!((p.dequantize_value(-128) - lo).abs() <= p.scale / 2.0 + 1e-6);
        }
    }

    #[test]
    fn derive_params_examples() {
        let t = Tensor::from_rows(&[[-1.0f32, 1.0], [0.0, 4.0]]).unwrap();
        let g = derive_params(&t, BitWidth::W8, Granularity::PerTensor).unwrap();
        let p = g.params()[0];
        assert_eq!((p.range_lo, p.range_hi), (-1.0, 4.0));

        let c = derive_params(&t, BitWidth::W8, Granularity::PerChannel(Axis(0))).unwrap();
        let ranges: Vec<_> = c.params().iter().map(|p| (p.range_lo, p.range_hi)).collect();
        assert_eq!(ranges, vec![(-1.0, 1.0), (0.0, 4.0)]);

        let k = Tensor::from_rows(&[[2.0f32, 2.0]]).unwrap();
        let d = derive_params(&k, BitWidth::W8, Granularity::PerTensor).unwrap();
        let p = d.params()[0];
        assert_eq!((p.range_lo, p.range_hi, p.scale), (2.0, 2.0, 1.0));
        assert_eq!(p.fake_value(2.0), 2.0);

        assert!(matches!(
            derive_params(&t, BitWidth::W8, Granularity::PerChannel(Axis(3))),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn per_channel_round_trip_uses_own_params() {
        let t = Tensor::from_rows(&[[-1.0f32, 1.0, 0.25], [0.0, 4.0, 3.3]]).unwrap();
        let scheme = derive_params(&t, BitWidth::W4, Granularity::PerChannel(Axis(0))).unwrap();
        let back = scheme.quantize(&t).unwrap().dequantize().unwrap();
        for (i, (&x, &y)) in t.data().iter().zip(back.data()).enumerate() {
            let s = scheme.params()[i / 3].scale;
            assert!((x - y).abs() <= s / 2.0 + 1e-6);
        }
    }

    #[test]
    fn observer_examples() {
        let o = RangeObserver::new().updated(&Tensor::vector(vec![-1.0, 2.0]).unwrap());
        assert_eq!(o.range(), Some((-1.0, 2.0)));
        let o = o.updated(&Tensor::vector(vec![0.0, 1.0]).unwrap());
        assert_eq!(o.range(), Some((-1.0, 2.0)));
        let o = o.updated(&Tensor::vector(vec![-3.0, 5.0]).unwrap());
        assert_eq!(o.range(), Some((-3.0, 5.0)));
        assert_eq!(o.count, 3);
        assert!(matches!(RangeObserver::new().freeze(BitWidth::W8), Err(Error::State(_))));
    }

    #[test]
    fn bit_width_validation() {
        assert!(BitWidth::new(5).is_err());
        assert!(BitWidth::new(8).is_ok());
        assert_eq!(BitWidth::W4.code_min(), -8);
        assert_eq!(BitWidth::W4.code_max(), 7);
        assert_eq!(BitWidth::W6.levels(), 63);
    }
}
