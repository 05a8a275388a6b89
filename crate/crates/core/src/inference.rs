//! Execution engines: float reference, float-simulated expansion and
//! integer-only.
//!
//! All engines take and return flat channel-major vectors. Convolutions are
//! evaluated as im2col followed by a matrix product, so both layer kinds
//! share one code path.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{activation_ranges, paired_order, resolve_cutoff, BoundMode};
use crate::error::{Error, Result};
use crate::expansion::{input_scales, ActivationQuant, ExpandedModel};
use crate::model::{Activation, LayerGeometry, LayerKind, Model};
use crate::quant::{code_range, dequantize, qmax};

/// Seeded Gaussian vector normalized to unit L2 norm. Sample `index` of a
/// stream depends only on `(seed, index)`.
pub fn random_unit_input(len: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Patch matrix `[positions, n_i * d^2]` of a CHW input. Dense layers
/// return the input unchanged.
pub fn im2col<T: Copy + Default>(g: &LayerGeometry, x: &[T]) -> Vec<T> {
    if g.kind == LayerKind::Dense {
        return x.to_vec();
    }
    let (d, s, side, out) = (g.kernel, g.stride, g.spatial, g.out_spatial());
    let cols = g.cols();
    let mut patches = vec![T::default(); out * out * cols];
    for oy in 0..out {
        for ox in 0..out {
            let row = &mut patches[(oy * out + ox) * cols..][..cols];
            let mut idx = 0;
            for c in 0..g.in_channels {
                for ky in 0..d {
                    let base = c * side * side + (oy * s + ky) * side + ox * s;
                    row[idx..idx + d].copy_from_slice(&x[base..base + d]);
                    idx += d;
                }
            }
        }
    }
    patches
}

/// `out[o * P + p] += w_o . patch_p` for a `[n_o, cols]` weight matrix.
fn accumulate_linear(g: &LayerGeometry, w: &[f64], patches: &[f64], out: &mut [f64]) {
    let cols = g.cols();
    let positions = g.positions();
    for o in 0..g.out_channels {
        let wo = &w[o * cols..(o + 1) * cols];
        for p in 0..positions {
            let patch = &patches[p * cols..(p + 1) * cols];
            out[o * positions + p] += wo.iter().zip(patch).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

fn add_bias_and_activate(g: &LayerGeometry, bias: Option<&[f64]>, out: &mut [f64]) {
    let positions = g.positions();
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(positions).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[o]);
        }
    }
    if g.activation != Activation::None {
        out.iter_mut().for_each(|v| *v = g.activation.apply(*v));
    }
}

fn check_input(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "input holds {got} values, the first layer expects {expected}"
        )))
    }
}

/// Reference evaluation in double precision.
pub fn forward_float(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = model.layers.first() else {
        return Ok(x.to_vec());
    };
    check_input(first.geometry.input_len(), x.len())?;
    let mut h = x.to_vec();
    for layer in &model.layers {
        let g = &layer.geometry;
        let patches = im2col(g, &h);
        let mut out = vec![0.0; g.output_len()];
        accumulate_linear(g, layer.weight.data(), &patches, &mut out);
        add_bias_and_activate(g, layer.bias_values(), &mut out);
        h = out;
    }
    Ok(h)
}

/// How static activation scales are obtained.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Calibration {
    /// Worst-case ranges over the unit input ball, from weight norms.
    #[default]
    Analytic,
    /// Max-abs (or a percentile of |values|) over seeded unit-norm inputs
    /// pushed through the float model.
    Sampled {
        samples: usize,
        seed: u64,
        percentile: Option<f64>,
    },
}

/// Smallest f32 `s` with `s * (2^(b-1) - 1) >= range`; 1 for a zero range.
fn scale_for_range(range: f64, bits: u8) -> f64 {
    if !(range > 0.0 && range.is_finite()) {
        return 1.0;
    }
    let m = qmax(bits).max(1) as f64;
    let mut s = (range / m) as f32;
    if (s as f64) * m < range {
        s = f32::from_bits(s.to_bits() + 1);
    }
    s as f64
}

/// Per-layer first-order input scales plus the output scale.
pub fn calibrate(model: &Model, bits: u8, cal: &Calibration) -> Result<ActivationQuant> {
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidConfig(format!(
            "activation bit-width must lie in [2, 8], got {bits}"
        )));
    }
    let ranges = match cal {
        Calibration::Analytic => activation_ranges(model, BoundMode::Spectral)?,
        Calibration::Sampled {
            samples,
            seed,
            percentile,
        } => sampled_ranges(model, *samples, *seed, *percentile)?,
    };
    let mut scales: Vec<f64> = ranges.iter().map(|&r| scale_for_range(r, bits)).collect();
    let output_scale = scales.pop().unwrap_or(1.0);
    Ok(ActivationQuant {
        bits,
        input_scales: scales,
        output_scale,
    })
}

fn sampled_ranges(
    model: &Model,
    samples: usize,
    seed: u64,
    percentile: Option<f64>,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::InvalidConfig(
            "calibration needs at least one sample".into(),
        ));
    }
    if let Some(p) = percentile {
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::InvalidConfig(format!(
                "percentile must lie in (0, 100], got {p}"
            )));
        }
    }
    let len = model.input_len().unwrap_or(0);
    let mut seen: Vec<Vec<f64>> = vec![Vec::new(); model.layers.len() + 1];
    for i in 0..samples {
        let mut h = random_unit_input(len, seed, i as u64);
        seen[0].extend(h.iter().map(|v| v.abs()));
        for (l, layer) in model.layers.iter().enumerate() {
            let g = &layer.geometry;
            let patches = im2col(g, &h);
            let mut out = vec![0.0; g.output_len()];
            accumulate_linear(g, layer.weight.data(), &patches, &mut out);
            add_bias_and_activate(g, layer.bias_values(), &mut out);
            seen[l + 1].extend(out.iter().map(|v| v.abs()));
            h = out;
        }
    }
    Ok(seen
        .into_iter()
        .map(|mut v| match percentile {
            None => v.iter().fold(0.0, |a: f64, &b| a.max(b)),
            Some(p) => {
                v.sort_by(f64::total_cmp);
                let idx = ((p / 100.0 * v.len() as f64).ceil() as usize).clamp(1, v.len());
                v[idx - 1]
            }
        })
        .collect())
}

/// A model evaluator.
pub trait Engine: Sync {
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;
}

pub struct FloatEngine<'a>(pub &'a Model);

impl Engine for FloatEngine<'_> {
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward_float(self.0, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Float,
    FloatSim,
    Integer,
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Self::Float),
            "float-sim" => Ok(Self::FloatSim),
            "integer" => Ok(Self::Integer),
            other => Err(Error::InvalidConfig(format!(
                "unknown engine `{other}` (float, float-sim, integer)"
            ))),
        }
    }
}

struct SimLayer {
    geometry: LayerGeometry,
    bias: Option<Vec<f64>>,
    /// `(j, A_j)`: summed dequantized residues that multiply the order-`j`
    /// partial input sum. Weights-only engines hold a single entry.
    terms: Vec<(usize, Vec<f64>)>,
    input_scales: Vec<f64>,
}

/// Float simulation of the expanded model with cross-order pruning: the
/// residue of order `k2` multiplies the partial input expansion
/// `sum_{k1 <= j} Q^-1(I^(k1))` with `j = min(K, cutoff - k2)`.
pub struct FloatSimEngine {
    layers: Vec<SimLayer>,
    act_bits: Option<u8>,
    /// Finest output step; outputs are rounded to it like the integer
    /// engine's.
    output_unit: Option<f64>,
}

impl FloatSimEngine {
    pub fn new(em: &ExpandedModel, cutoff: Option<usize>) -> Result<Self> {
        em.validate()?;
        let order = em.order;
        let cutoff = resolve_cutoff(order, cutoff)?;
        let layers = em
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let wlen: usize = layer.geometry.weight_shape().iter().product();
                let mut terms: Vec<(usize, Vec<f64>)> = Vec::new();
                for r in layer.residues.iter().filter(|r| r.order < cutoff) {
                    let j = match em.activation {
                        Some(_) => paired_order(order, cutoff, r.order),
                        None => 1,
                    };
                    let deq = dequantize(&r.q);
                    let slot = match terms.iter().position(|(jj, _)| *jj == j) {
                        Some(i) => i,
                        None => {
                            terms.push((j, vec![0.0; wlen]));
                            terms.len() - 1
                        }
                    };
                    for (a, v) in terms[slot].1.iter_mut().zip(deq.data()) {
                        *a += v;
                    }
                }
                terms.sort_by_key(|(j, _)| std::cmp::Reverse(*j));
                let input_scales = match &em.activation {
                    Some(act) => input_scales(act.input_scales[l], act.bits, order),
                    None => Vec::new(),
                };
                SimLayer {
                    geometry: layer.geometry.clone(),
                    bias: layer.bias.clone(),
                    terms,
                    input_scales,
                }
            })
            .collect();
        Ok(Self {
            layers,
            act_bits: em.activation.as_ref().map(|a| a.bits),
            output_unit: em
                .activation
                .as_ref()
                .map(|a| finest_step(a.output_scale, a.bits, order)),
        })
    }
}

/// Step of the last order of an expansion with first-order scale `s1`.
pub fn finest_step(s1: f64, bits: u8, order: usize) -> f64 {
    s1 / (qmax(bits).max(1) as f64).powi(order as i32 - 1)
}

/// Partial sums `sum_{k <= j} Q^-1(I^(k))` for `j = 1..K`.
fn expand_partial_sums(x: &[f64], scales: &[f64], bits: u8) -> Vec<Vec<f64>> {
    let (lo, hi) = code_range(bits);
    let (lo, hi) = (lo as f64, hi as f64);
    let mut residual = x.to_vec();
    let mut acc = vec![0.0; x.len()];
    let mut sums = Vec::with_capacity(scales.len());
    for &s in scales {
        for (r, a) in residual.iter_mut().zip(acc.iter_mut()) {
            let q = (*r / s).round_ties_even().clamp(lo, hi) * s;
            *r -= q;
            *a += q;
        }
        sums.push(acc.clone());
    }
    sums
}

impl Engine for FloatSimEngine {
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let Some(first) = self.layers.first() else {
            return Ok(x.to_vec());
        };
        check_input(first.geometry.input_len(), x.len())?;
        let mut h = x.to_vec();
        for layer in &self.layers {
            let g = &layer.geometry;
            let mut out = vec![0.0; g.output_len()];
            match self.act_bits {
                None => {
                    let patches = im2col(g, &h);
                    for (_, w) in &layer.terms {
                        accumulate_linear(g, w, &patches, &mut out);
                    }
                }
                Some(bits) => {
                    let sums = expand_partial_sums(&h, &layer.input_scales, bits);
                    for (j, w) in &layer.terms {
                        accumulate_linear(g, w, &im2col(g, &sums[j - 1]), &mut out);
                    }
                }
            }
            add_bias_and_activate(g, layer.bias.as_deref(), &mut out);
            h = out;
        }
        if let Some(t) = self.output_unit {
            h.iter_mut()
                .for_each(|v| *v = (*v / t).round_ties_even() * t);
        }
        Ok(h)
    }
}

/// Integer pair `(M, n)` with `scale ~= M * 2^-n` and `M` in `[2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FixedPointMultiplier {
    pub mantissa: i64,
    pub shift: u32,
}

/// Largest shift accepted; keeps `acc * M` aligned shifts inside i128.
const MAX_SHIFT: i32 = 90;

pub fn fixed_point_multiplier(scale: f64) -> Result<FixedPointMultiplier> {
    if !(scale > 0.0 && scale.is_finite() && scale < 2f64.powi(31)) || !scale.is_normal() {
        return Err(Error::MultiplierRange(scale));
    }
    // scale = frac * 2^exp with frac in [0.5, 1).
    let bits = scale.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32 - 1022;
    let frac = f64::from_bits((bits & !(0x7ffu64 << 52)) | (1022u64 << 52));
    let mut shift = 31 - exp;
    let mut mantissa = (frac * 2f64.powi(31)).round_ties_even() as i64;
    if mantissa == 1 << 31 {
        mantissa = 1 << 30;
        shift -= 1;
    }
    if !(0..=MAX_SHIFT).contains(&shift) {
        return Err(Error::MultiplierRange(scale));
    }
    Ok(FixedPointMultiplier {
        mantissa,
        shift: shift as u32,
    })
}

impl FixedPointMultiplier {
    pub fn value(&self) -> f64 {
        self.mantissa as f64 * 2f64.powi(-(self.shift as i32))
    }

    /// `round_half_even(x * M * 2^-n)`.
    pub fn apply(&self, x: i64) -> i64 {
        rounding_shift(x as i128 * self.mantissa as i128, self.shift) as i64
    }
}

/// `round_half_even(v / 2^n)`.
pub fn rounding_shift(v: i128, n: u32) -> i128 {
    if n == 0 {
        return v;
    }
    let floor = v >> n;
    let rem = v - (floor << n);
    let half = 1i128 << (n - 1);
    match rem.cmp(&half) {
        std::cmp::Ordering::Greater => floor + 1,
        std::cmp::Ordering::Less => floor,
        std::cmp::Ordering::Equal => floor + (floor & 1),
    }
}

/// `round_half_even(a / b)` for `b > 0`.
fn rne_div(a: i64, b: i64) -> i64 {
    let q = a.div_euclid(b);
    let r = a.rem_euclid(b);
    match (2 * r).cmp(&b) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Equal => q + (q & 1),
    }
}

pub const DEFAULT_ACCUMULATOR_BITS: u32 = 32;

struct IntTerm {
    k2: usize,
    /// Input orders `1..=j` paired with this residue.
    j: usize,
    codes: Vec<i8>,
    /// `[k1 - 1][o]`; `None` for all-zero rows.
    multipliers: Vec<Vec<Option<FixedPointMultiplier>>>,
}

struct IntLayer {
    geometry: LayerGeometry,
    terms: Vec<IntTerm>,
    /// Common shift of every term of the layer.
    shift: u32,
    /// Bias in output units scaled by `2^shift`.
    bias: Option<Vec<i128>>,
    /// `M_a^(K - k)` for `k = 1..K`.
    place: Vec<i64>,
}

/// Integer-only engine: activations are integers in units of the finest
/// input step `t = s^(1) / M_a^(K-1)`, every (input order, residue) product
/// runs in a checked accumulator, and all products of an output element are
/// rescaled by fixed-point multipliers aligned to one shift and rounded once.
pub struct IntegerEngine {
    layers: Vec<IntLayer>,
    input_unit: f64,
    output_unit: f64,
    act_bits: u8,
    acc_limit: i64,
}

impl IntegerEngine {
    pub fn new(em: &ExpandedModel, cutoff: Option<usize>) -> Result<Self> {
        Self::with_accumulator(em, cutoff, DEFAULT_ACCUMULATOR_BITS)
    }

    pub fn with_accumulator(
        em: &ExpandedModel,
        cutoff: Option<usize>,
        acc_bits: u32,
    ) -> Result<Self> {
        em.validate()?;
        let act = em.activation.as_ref().ok_or(Error::MissingCalibration)?;
        if !(2..=63).contains(&acc_bits) {
            return Err(Error::InvalidConfig(format!(
                "accumulator width must lie in [2, 63], got {acc_bits}"
            )));
        }
        let order = em.order;
        let cutoff = resolve_cutoff(order, cutoff)?;
        let ma = qmax(act.bits).max(1);
        let place: Vec<i64> = (1..=order)
            .map(|k| ma.checked_pow((order - k) as u32))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::InvalidConfig("expansion order too large for i64".into()))?;
        let finest = |s1: f64| finest_step(s1, act.bits, order);
        let acc_limit = 1i64 << (acc_bits - 1);

        let mut layers = Vec::with_capacity(em.layers.len());
        for (l, layer) in em.layers.iter().enumerate() {
            let g = &layer.geometry;
            let worst_w = layer
                .residues
                .iter()
                .map(|r| -r.q.code_bounds().0)
                .max()
                .unwrap_or(0);
            let worst = (g.cols() as i128) * worst_w as i128 * (ma + 1) as i128;
            if worst >= acc_limit as i128 {
                return Err(Error::AccumulatorOverflow {
                    layer: g.name.clone(),
                    term: format!(
                        "worst-case sum d^2*n_i*|w|*|x| = {worst} needs more than {acc_bits} bits"
                    ),
                });
            }
            let s_in = input_scales(act.input_scales[l], act.bits, order);
            let s_out1 = act
                .input_scales
                .get(l + 1)
                .copied()
                .unwrap_or(act.output_scale);
            let t_out = finest(s_out1);

            let mut terms = Vec::new();
            for r in layer.residues.iter().filter(|r| r.order < cutoff) {
                let j = paired_order(order, cutoff, r.order);
                let per = r.q.channel_len();
                let mut multipliers = Vec::with_capacity(j);
                for s_i in &s_in[..j] {
                    let row: Vec<Option<FixedPointMultiplier>> = (0..g.out_channels)
                        .map(|o| {
                            if r.q.codes[o * per..(o + 1) * per].iter().all(|&c| c == 0) {
                                Ok(None)
                            } else {
                                fixed_point_multiplier(s_i * r.q.scale(o) / t_out).map(Some)
                            }
                        })
                        .collect::<Result<_>>()?;
                    multipliers.push(row);
                }
                terms.push(IntTerm {
                    k2: r.order,
                    j,
                    codes: r.q.codes.clone(),
                    multipliers,
                });
            }
            let shift = terms
                .iter()
                .flat_map(|t| t.multipliers.iter().flatten().flatten())
                .map(|m| m.shift)
                .max()
                .unwrap_or(0);
            let bias = layer.bias.as_ref().map(|b| {
                b.iter()
                    .map(|v| (v / t_out * 2f64.powi(shift as i32)).round_ties_even() as i128)
                    .collect()
            });
            layers.push(IntLayer {
                geometry: g.clone(),
                terms,
                shift,
                bias,
                place: place.clone(),
            });
        }
        Ok(Self {
            layers,
            input_unit: finest(
                act.input_scales
                    .first()
                    .copied()
                    .unwrap_or(act.output_scale),
            ),
            output_unit: finest(act.output_scale),
            act_bits: act.bits,
            acc_limit,
        })
    }

    fn layer_forward(&self, layer: &IntLayer, y: &[i64]) -> Result<Vec<i64>> {
        let g = &layer.geometry;
        let (lo, hi) = code_range(self.act_bits);
        // Split y into per-order codes (most significant order first).
        let mut rest = y.to_vec();
        let mut codes: Vec<Vec<i64>> = Vec::with_capacity(layer.place.len());
        for &p in &layer.place {
            let c: Vec<i64> = rest
                .iter_mut()
                .map(|v| {
                    let c = rne_div(*v, p).clamp(lo, hi);
                    *v -= c * p;
                    c
                })
                .collect();
            codes.push(c);
        }
        let patches: Vec<Vec<i64>> = codes.iter().map(|c| im2col(g, c)).collect();
        let cols = g.cols();
        let positions = g.positions();
        let mut total = vec![0i128; g.output_len()];
        if let Some(b) = &layer.bias {
            for (o, chunk) in total.chunks_mut(positions).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b[o]);
            }
        }
        for term in &layer.terms {
            for o in 0..g.out_channels {
                let w = &term.codes[o * cols..(o + 1) * cols];
                for k1 in 0..term.j {
                    let Some(m) = term.multipliers[k1][o] else {
                        continue;
                    };
                    let align = layer.shift - m.shift;
                    for p in 0..positions {
                        let patch = &patches[k1][p * cols..(p + 1) * cols];
                        let acc: i64 = w.iter().zip(patch).map(|(&a, &b)| a as i64 * b).sum();
                        if acc.abs() >= self.acc_limit {
                            return Err(Error::AccumulatorOverflow {
                                layer: g.name.clone(),
                                term: format!("input order {} x residue {}", k1 + 1, term.k2),
                            });
                        }
                        total[o * positions + p] += (acc as i128 * m.mantissa as i128) << align;
                    }
                }
            }
        }
        Ok(total
            .into_iter()
            .map(|v| {
                let y = rounding_shift(v, layer.shift)
                    .clamp(i64::MIN as i128 / 4, i64::MAX as i128 / 4)
                    as i64;
                match g.activation {
                    Activation::Relu => y.max(0),
                    _ => y,
                }
            })
            .collect())
    }
}

impl Engine for IntegerEngine {
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let Some(first) = self.layers.first() else {
            return Ok(x.to_vec());
        };
        check_input(first.geometry.input_len(), x.len())?;
        let limit = (i64::MAX / 4) as f64;
        let mut y: Vec<i64> = x
            .iter()
            .map(|v| (v / self.input_unit).round_ties_even().clamp(-limit, limit) as i64)
            .collect();
        for layer in &self.layers {
            if !matches!(
                layer.geometry.activation,
                Activation::Relu | Activation::None
            ) {
                return Err(Error::UnsupportedActivation(
                    layer.geometry.activation.to_string(),
                ));
            }
            y = self.layer_forward(layer, &y)?;
        }
        Ok(y.iter().map(|&v| v as f64 * self.output_unit).collect())
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Comparison {
    pub samples: usize,
    /// Largest elementwise difference over all samples.
    pub max_abs_err: f64,
    /// Mean over samples of the per-sample max difference.
    pub mean_max_err: f64,
    /// Fraction of samples whose argmax agrees.
    pub argmax_agreement: f64,
}

/// Runs both engines on `samples` seeded unit-norm inputs.
pub fn compare_engines(
    reference: &dyn Engine,
    candidate: &dyn Engine,
    input_len: usize,
    samples: usize,
    seed: u64,
) -> Result<Comparison> {
    let per_sample = (0..samples)
        .into_par_iter()
        .map(|i| {
            let x = random_unit_input(input_len, seed, i as u64);
            let a = reference.forward(&x)?;
            let b = candidate.forward(&x)?;
            let err = a
                .iter()
                .zip(&b)
                .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            Ok((err, argmax(&a) == argmax(&b)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = samples.max(1) as f64;
    Ok(Comparison {
        samples,
        max_abs_err: per_sample.iter().fold(0.0, |m, (e, _)| m.max(*e)),
        mean_max_err: per_sample.iter().map(|(e, _)| e).sum::<f64>() / n,
        argmax_agreement: per_sample.iter().filter(|(_, a)| *a).count() as f64 / n,
    })
}

/// Builds the engine named by `kind`.
pub fn build_engine<'a>(
    kind: EngineKind,
    model: Option<&'a Model>,
    em: Option<&ExpandedModel>,
    cutoff: Option<usize>,
) -> Result<Box<dyn Engine + 'a>> {
    let need_em =
        || em.ok_or_else(|| Error::InvalidConfig("this engine needs an expanded model".into()));
    Ok(match kind {
        EngineKind::Float => Box::new(FloatEngine(model.ok_or_else(|| {
            Error::InvalidConfig("the float engine needs the float model".into())
        })?)),
        EngineKind::FloatSim => Box::new(FloatSimEngine::new(need_em()?, cutoff)?),
        EngineKind::Integer => Box::new(IntegerEngine::new(need_em()?, cutoff)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;
    use crate::tensor::Tensor;

    #[test]
    fn dense_example_and_relu() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let lin = Model::new(vec![LayerSpec::new(
            LayerGeometry::dense("fc", 2, 2, Activation::None),
            w.clone(),
            None,
        )
        .unwrap()])
        .unwrap();
        assert_eq!(forward_float(&lin, &[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
        let relu = Model::new(vec![LayerSpec::new(
            LayerGeometry::dense("fc", 2, 2, Activation::Relu),
            w,
            None,
        )
        .unwrap()])
        .unwrap();
        assert_eq!(forward_float(&relu, &[-1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            forward_float(&relu, &[1.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let g = LayerGeometry {
            name: "c".into(),
            kind: LayerKind::Conv2d,
            in_channels: 2,
            out_channels: 3,
            kernel: 2,
            stride: 2,
            spatial: 5,
            activation: Activation::None,
        };
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..24).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; g.output_len()];
        accumulate_linear(&g, &w, &im2col(&g, &x), &mut out);
        let os = g.out_spatial();
        for o in 0..3 {
            for oy in 0..os {
                for ox in 0..os {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                s += w[((o * 2 + c) * 2 + ky) * 2 + kx]
                                    * x[c * 25 + (oy * 2 + ky) * 5 + ox * 2 + kx];
                            }
                        }
                    }
                    assert!((out[o * os * os + oy * os + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn multiplier_examples() {
        let m = fixed_point_multiplier(0.5).unwrap();
        assert_eq!((m.mantissa, m.shift), (1 << 30, 31));
        let m = fixed_point_multiplier(1.0).unwrap();
        assert_eq!((m.mantissa, m.shift), (1 << 30, 30));
        let m = fixed_point_multiplier(3.0517578125e-4).unwrap();
        assert_eq!((m.mantissa, m.shift), (1342177280, 42));
        assert_eq!(m.value(), 3.0517578125e-4);
        for bad in [0.0, -1.0, f64::NAN, 2f64.powi(31)] {
            assert!(fixed_point_multiplier(bad).is_err());
        }
    }

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(rounding_shift(5, 1), 2);
        assert_eq!(rounding_shift(7, 1), 4);
        assert_eq!(rounding_shift(-5, 1), -2);
        assert_eq!(rounding_shift(-7, 1), -4);
        assert_eq!(rounding_shift(6, 2), 2);
        assert_eq!(rne_div(5, 2), 2);
        assert_eq!(rne_div(-3, 2), -2);
        assert_eq!(rne_div(7, 3), 2);
    }

    #[test]
    fn unit_inputs_are_deterministic_and_normalized() {
        let a = random_unit_input(9, 3, 5);
        assert_eq!(a, random_unit_input(9, 3, 5));
        assert_ne!(a, random_unit_input(9, 3, 6));
        assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scale_for_range_covers_range() {
        for r in [1.0, 0.3, 7.77, 1e-3] {
            let s = scale_for_range(r, 8);
            assert!(s * 127.0 >= r && s == s as f32 as f64);
        }
        assert_eq!(scale_for_range(0.0, 8), 1.0);
    }
}
