//! Symmetric quantization operator, operator registry and the
//! outlier-splitting binary residue.
//!
//! Codes live on the grid `[-2^(b-1), 2^(b-1) - 1]`. Scales are rounded to
//! the nearest `f32` when computed so that the expanded-model container
//! stores them losslessly.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerChannel,
    PerTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantConfig {
    pub bits: u8,
    pub granularity: Granularity,
}

impl QuantConfig {
    pub fn new(bits: u8) -> Result<Self> {
        let cfg = Self {
            bits,
            granularity: Granularity::PerChannel,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn per_tensor(bits: u8) -> Result<Self> {
        Ok(Self {
            granularity: Granularity::PerTensor,
            ..Self::new(bits)?
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "bit-width must lie in [1, 8], got {}",
                self.bits
            )));
        }
        Ok(())
    }
}

/// Value set of a residue's codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// Two's-complement range of the logical bit-width.
    Uniform,
    /// Sparse binary residue: `{-1, +1}` where present, 0 elsewhere.
    Binary,
}

impl Grid {
    pub fn as_str(self) -> &'static str {
        match self {
            Grid::Uniform => "uniform",
            Grid::Binary => "binary",
        }
    }
}

/// Largest positive code, `2^(b-1) - 1`.
pub fn qmax(bits: u8) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Inclusive code range of a `bits`-wide uniform grid.
pub fn code_range(bits: u8) -> (i64, i64) {
    (-(1i64 << (bits - 1)), qmax(bits))
}

/// Divisor mapping max-abs to a scale. For `b = 1` the positive range is
/// empty and the divisor falls back to 1.
fn scale_divisor(bits: u8) -> f64 {
    qmax(bits).max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<i8>,
    /// One scale per output channel, or a single per-tensor scale.
    pub scales: Vec<f64>,
    pub bits: u8,
    pub grid: Grid,
}

impl QuantizedTensor {
    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn channel_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    #[inline]
    pub fn scale(&self, channel: usize) -> f64 {
        if self.scales.len() == 1 {
            self.scales[0]
        } else {
            self.scales[channel]
        }
    }

    pub fn channel_codes(&self, i: usize) -> &[i8] {
        let n = self.channel_len();
        &self.codes[i * n..(i + 1) * n]
    }

    pub fn code_bounds(&self) -> (i64, i64) {
        match self.grid {
            Grid::Uniform => code_range(self.bits),
            Grid::Binary => (-1, 1),
        }
    }

    /// Checks the range and positivity invariants.
    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.codes.len() {
            return Err(Error::InvalidShape(format!(
                "shape {:?} needs {n} codes, got {}",
                self.shape,
                self.codes.len()
            )));
        }
        if self.scales.len() != 1 && self.scales.len() != self.channels() {
            return Err(Error::InvalidShape(format!(
                "{} scales for {} channels",
                self.scales.len(),
                self.channels()
            )));
        }
        if let Some(&s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::NonPositiveScale(s));
        }
        let (lo, hi) = self.code_bounds();
        if let Some(&c) = self
            .codes
            .iter()
            .find(|&&c| (c as i64) < lo || (c as i64) > hi)
        {
            return Err(Error::CodeRange {
                code: c as i64,
                bits: self.bits,
                lo,
                hi,
            });
        }
        Ok(())
    }

    pub fn nonzero_count(&self) -> usize {
        self.codes.iter().filter(|&&c| c != 0).count()
    }
}

/// Per-channel (or per-tensor) symmetric scale `max|W| / (2^(b-1) - 1)`.
///
/// All-zero channels get scale 1.
pub fn compute_scale(w: &Tensor, cfg: &QuantConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let div = scale_divisor(cfg.bits);
    let to_scale = |max_abs: f64| {
        let s = max_abs / div;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    };
    Ok(match cfg.granularity {
        Granularity::PerTensor => vec![to_scale(w.max_abs())],
        Granularity::PerChannel => (0..w.channels())
            .map(|i| to_scale(w.channel(i).iter().fold(0.0, |m, v| m.max(v.abs()))))
            .collect(),
    })
}

/// `clamp(round_half_even(w / s))`.
pub fn quantize(w: &Tensor, scales: &[f64], cfg: &QuantConfig) -> Result<QuantizedTensor> {
    cfg.validate()?;
    if scales.len() != 1 && scales.len() != w.channels() {
        return Err(Error::InvalidShape(format!(
            "{} scales for {} channels",
            scales.len(),
            w.channels()
        )));
    }
    if let Some(&s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::NonPositiveScale(s));
    }
    let (lo, hi) = code_range(cfg.bits);
    let (lo, hi) = (lo as f64, hi as f64);
    let per = w.channel_len();
    let codes = w
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let s = if scales.len() == 1 {
                scales[0]
            } else {
                scales[idx / per]
            };
            (v / s).round_ties_even().clamp(lo, hi) as i8
        })
        .collect();
    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        codes,
        scales: scales.to_vec(),
        bits: cfg.bits,
        grid: Grid::Uniform,
    })
}

/// Elementwise `code * scale`.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let per = q.channel_len().max(1);
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(idx, &c)| c as f64 * q.scale(idx / per))
        .collect();
    Tensor::new(q.shape.clone(), data).expect("codes match shape")
}

/// A quantization operator usable throughout the expansion.
///
/// The expansion calls [`leading`](QuantOperator::leading) once on the
/// weights, then [`quantize_residual`](QuantOperator::quantize_residual) on
/// every remaining residual.
pub trait QuantOperator: Send + Sync {
    fn id(&self) -> &str;

    fn quantize(&self, w: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor>;

    fn leading(&self, w: &Tensor, cfg: &QuantConfig) -> Result<Vec<QuantizedTensor>> {
        Ok(vec![self.quantize(w, cfg)?])
    }

    fn quantize_residual(&self, r: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
        self.quantize(r, cfg)
    }
}

/// The base max-abs symmetric operator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Uniform;

impl QuantOperator for Uniform {
    fn id(&self) -> &str {
        "uniform"
    }

    fn quantize(&self, w: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
        let scales = compute_scale(w, cfg)?;
        quantize(w, &scales, cfg)
    }
}

/// Inlier quantization plus one sparse binary residue holding the outliers.
#[derive(Debug, Clone, Copy)]
pub struct OutlierSplitOperator {
    pub fraction: f64,
}

impl QuantOperator for OutlierSplitOperator {
    fn id(&self) -> &str {
        "outlier-split"
    }

    fn quantize(&self, w: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
        Ok(outlier_split(w, cfg, self.fraction)?.inlier)
    }

    fn leading(&self, w: &Tensor, cfg: &QuantConfig) -> Result<Vec<QuantizedTensor>> {
        let split = outlier_split(w, cfg, self.fraction)?;
        let mut out = vec![split.inlier];
        if !split.indices.is_empty() {
            out.push(split.outliers);
        }
        Ok(out)
    }

    fn quantize_residual(&self, r: &Tensor, cfg: &QuantConfig) -> Result<QuantizedTensor> {
        Uniform.quantize(r, cfg)
    }
}

pub const DEFAULT_OUTLIER_FRACTION: f64 = 0.002;

pub const OPERATOR_IDS: [&str; 2] = ["uniform", "outlier-split"];

/// Looks an operator up by its registry id.
pub fn operator_by_id(id: &str, outlier_fraction: f64) -> Result<Box<dyn QuantOperator>> {
    match id {
        "uniform" => Ok(Box::new(Uniform)),
        "outlier-split" => {
            check_fraction(outlier_fraction)?;
            Ok(Box::new(OutlierSplitOperator {
                fraction: outlier_fraction,
            }))
        }
        other => Err(Error::UnknownOperator(other.to_string())),
    }
}

fn check_fraction(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "outlier fraction must lie in (0, 1), got {p}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierSplit {
    /// Base quantization of `W` clipped to `[-clip, clip]`.
    pub inlier: QuantizedTensor,
    /// Binary residue: `sign(w)` at outlier positions, 0 elsewhere.
    pub outliers: QuantizedTensor,
    /// Sorted flat indices of the outliers.
    pub indices: Vec<usize>,
    pub clip: f64,
    pub fraction: f64,
}

impl OutlierSplit {
    pub fn outlier_scale(&self) -> &[f64] {
        &self.outliers.scales
    }

    pub fn reconstruct(&self) -> Tensor {
        let mut t = dequantize(&self.inlier);
        for (v, o) in t
            .data_mut()
            .iter_mut()
            .zip(dequantize(&self.outliers).data())
        {
            *v += o;
        }
        t
    }
}

/// Splits `W` into an inlier quantization and a binary outlier residue.
///
/// The `round(p * len(W))` largest-magnitude entries (ties to the lower
/// index) are outliers. The clip level `c` is the largest inlier magnitude.
/// Each channel's outlier scale is the mean exceedance `|w| - c` over its
/// outliers.
pub fn outlier_split(w: &Tensor, cfg: &QuantConfig, p: f64) -> Result<OutlierSplit> {
    cfg.validate()?;
    check_fraction(p)?;
    let n = w.len();
    let count = ((p * n as f64) + 0.5).floor() as usize;
    let count = count.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        w.data()[b]
            .abs()
            .partial_cmp(&w.data()[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut indices = order[..count].to_vec();
    indices.sort_unstable();
    let clip = if count < n {
        w.data()[order[count]].abs()
    } else {
        0.0
    };

    let mut clipped = w.clone();
    for v in clipped.data_mut() {
        *v = v.clamp(-clip, clip);
    }
    let inlier = Uniform.quantize(&clipped, cfg)?;

    let channels = w.channels();
    let per = w.channel_len();
    let mut sum = vec![0.0; channels];
    let mut cnt = vec![0usize; channels];
    for &i in &indices {
        sum[i / per] += w.data()[i].abs() - clip;
        cnt[i / per] += 1;
    }
    let scales: Vec<f64> = sum
        .iter()
        .zip(&cnt)
        .map(|(&s, &c)| {
            let mean = if c > 0 { s / c as f64 } else { 0.0 };
            if mean > 0.0 {
                mean
            } else {
                1.0
            }
        })
        .collect();

    let mut codes = vec![0i8; n];
    indices.retain(|&i| {
        let ch = i / per;
        let keep = cnt[ch] > 0 && sum[ch] > 0.0 && w.data()[i] != 0.0;
        if keep {
            codes[i] = if w.data()[i] > 0.0 { 1 } else { -1 };
        }
        keep
    });

    Ok(OutlierSplit {
        inlier,
        outliers: QuantizedTensor {
            shape: w.shape().to_vec(),
            codes,
            scales,
            bits: 1,
            grid: Grid::Binary,
        },
        indices,
        clip,
        fraction: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    /// Nearest grid point by enumeration, ties to the even code.
    fn brute_force_code(x: f64, s: f64, bits: u8) -> i64 {
        let (lo, hi) = code_range(bits);
        let mut best = lo;
        for c in lo..=hi {
            let d = (x - c as f64 * s).abs();
            let bd = (x - best as f64 * s).abs();
            if d < bd || (d == bd && c % 2 == 0) {
                best = c;
            }
        }
        best
    }

    #[test]
    fn scale_examples() {
        let cfg = QuantConfig::new(3).unwrap();
        let s = compute_scale(&row(&[0.9, -0.45, 0.3]), &cfg).unwrap();
        assert!((s[0] - 0.3).abs() < 1e-7);
        let s = compute_scale(&row(&[0.0, 0.0]), &cfg).unwrap();
        assert_eq!(s, vec![1.0]);
        let s = compute_scale(&row(&[-2.0, 1.0]), &QuantConfig::new(8).unwrap()).unwrap();
        assert_eq!(s[0], 2.0 / 127.0);
    }

    #[test]
    fn one_bit_scale_uses_unit_divisor() {
        let s = compute_scale(&row(&[0.5, -0.25]), &QuantConfig::new(1).unwrap()).unwrap();
        assert_eq!(s, vec![0.5]);
        let q = quantize(&row(&[0.5, -0.25, -0.5]), &s, &QuantConfig::new(1).unwrap()).unwrap();
        assert_eq!(q.codes, vec![0, 0, -1]);
    }

    #[test]
    fn quantize_matches_enumeration_oracle() {
        let cfg = QuantConfig::new(3).unwrap();
        let w = row(&[0.9, -0.45, 0.3]);
        let q = quantize(&w, &[0.3], &cfg).unwrap();
        assert_eq!(q.codes, vec![3, -2, 1]);
        for (&x, &c) in w.data().iter().zip(&q.codes) {
            assert_eq!(brute_force_code(x, 0.3, 3), c as i64);
        }
    }

    #[test]
    fn max_element_never_overflows() {
        for bits in 2..=8u8 {
            let cfg = QuantConfig::new(bits).unwrap();
            let w = row(&[1.7, -0.3, 0.2]);
            let s = compute_scale(&w, &cfg).unwrap();
            let q = quantize(&w, &s, &cfg).unwrap();
            assert_eq!(q.codes[0] as i64, qmax(bits));
        }
    }

    #[test]
    fn dequantize_example_and_idempotence() {
        let cfg = QuantConfig::new(3).unwrap();
        let q = QuantizedTensor {
            shape: vec![1, 3],
            codes: vec![3, -2, 1],
            scales: vec![0.3],
            bits: 3,
            grid: Grid::Uniform,
        };
        let d = dequantize(&q);
        for (a, b) in d.data().iter().zip([0.9, -0.6, 0.3]) {
            assert!((a - b).abs() < 1e-12);
        }
        let again = quantize(&d, &[0.3], &cfg).unwrap();
        assert_eq!(again.codes, q.codes);
    }

    #[test]
    fn zero_tensor_round_trips() {
        let cfg = QuantConfig::new(4).unwrap();
        let w = Tensor::zeros(vec![2, 3]);
        let s = compute_scale(&w, &cfg).unwrap();
        let q = quantize(&w, &s, &cfg).unwrap();
        assert!(q.codes.iter().all(|&c| c == 0));
        assert_eq!(dequantize(&q), w);
    }

    #[test]
    fn rejects_bad_scale_and_bits() {
        let cfg = QuantConfig::new(4).unwrap();
        assert!(matches!(
            quantize(&row(&[1.0]), &[0.0], &cfg),
            Err(Error::NonPositiveScale(_))
        ));
        assert!(QuantConfig::new(0).is_err());
        assert!(QuantConfig::new(9).is_err());
    }

    #[test]
    fn registry() {
        assert_eq!(operator_by_id("uniform", 0.002).unwrap().id(), "uniform");
        assert_eq!(
            operator_by_id("outlier-split", 0.002).unwrap().id(),
            "outlier-split"
        );
        assert!(matches!(
            operator_by_id("nosuch", 0.002),
            Err(Error::UnknownOperator(_))
        ));
    }

    #[test]
    fn singleton_outlier_is_exact() {
        let w = row(&[5.0]);
        let split = outlier_split(&w, &QuantConfig::new(4).unwrap(), 0.5).unwrap();
        assert_eq!(split.indices, vec![0]);
        assert_eq!(split.clip, 0.0);
        assert_eq!(split.outlier_scale(), &[5.0]);
        assert_eq!(split.reconstruct().data(), &[5.0]);
    }

    #[test]
    fn tiny_fraction_gives_empty_residue() {
        let w = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.05, -0.4, 0.2, 0.1, 0.0]).unwrap();
        let cfg = QuantConfig::new(4).unwrap();
        let split = outlier_split(&w, &cfg, 1e-4).unwrap();
        assert!(split.indices.is_empty());
        assert_eq!(split.outliers.nonzero_count(), 0);
        assert_eq!(split.inlier, Uniform.quantize(&w, &cfg).unwrap());
        assert_eq!(
            operator_by_id("outlier-split", 1e-4)
                .unwrap()
                .leading(&w, &cfg)
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn outlier_fraction_validated() {
        let cfg = QuantConfig::new(4).unwrap();
        assert!(outlier_split(&row(&[1.0]), &cfg, 0.0).is_err());
        assert!(outlier_split(&row(&[1.0]), &cfg, 1.0).is_err());
    }
}
