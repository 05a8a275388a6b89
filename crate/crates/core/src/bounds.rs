//! Analytic error bounds and the empirical estimate they are checked
//! against.
//!
//! The network bound propagates two quantities layer by layer: `m_l`, a
//! bound on the L2 norm of the float activations, and `delta_l`, a bound on
//! the L2 distance between float and expanded activations. For unit-norm
//! inputs the final `delta_L` bounds the L2 (hence the max) logit error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expansion::{input_scales, ExpandedLayer, ExpandedModel, Residue};
use crate::inference::{finest_step, forward_float, random_unit_input, Engine, FloatSimEngine};
use crate::model::{LayerGeometry, Model};
use crate::quant::{dequantize, qmax, Grid};
use crate::tensor::Tensor;

pub const POWER_ITERATION_SEED: u64 = 0x5EED;
pub const POWER_ITERATION_MAX_ITERS: usize = 1000;
pub const POWER_ITERATION_TOL: f64 = 1e-8;
const GRAM_SQUARINGS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Largest singular value of `m` viewed as `[shape[0], rest]`.
///
/// Power iteration on the smaller Gram matrix from a seeded start vector.
/// If the relative change never drops below `tol` the Frobenius norm is
/// returned instead and `converged` is false.
pub fn spectral_norm(m: &Tensor, max_iters: usize, tol: f64) -> SpectralEstimate {
    spectral_norm_with(m.data(), m.channels(), m.channel_len(), max_iters, tol)
}

/// [`spectral_norm`] on a row-major `rows x cols` slice with the default
/// iteration settings.
pub fn spectral_norm_of(data: &[f64], rows: usize, cols: usize) -> SpectralEstimate {
    spectral_norm_with(
        data,
        rows,
        cols,
        POWER_ITERATION_MAX_ITERS,
        POWER_ITERATION_TOL,
    )
}

fn spectral_norm_with(
    data: &[f64],
    rows: usize,
    cols: usize,
    max_iters: usize,
    tol: f64,
) -> SpectralEstimate {
    let frob = data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if frob == 0.0 || rows == 0 || cols == 0 {
        return SpectralEstimate {
            value: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    // Gram matrix G = A A^T or A^T A, whichever is smaller.
    let n = rows.min(cols);
    let mut g = vec![0.0; n * n];
    if rows <= cols {
        for i in 0..rows {
            let ri = &data[i * cols..(i + 1) * cols];
            for j in i..rows {
                let rj = &data[j * cols..(j + 1) * cols];
                let v: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
                g[i * n + j] = v;
                g[j * n + i] = v;
            }
        }
    } else {
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            for i in 0..cols {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                for j in i..cols {
                    g[i * n + j] += a * row[j];
                }
            }
        }
        for i in 0..cols {
            for j in 0..i {
                g[i * n + j] = g[j * n + i];
            }
        }
    }

    // Iterating with G^(2^p) instead of G raises the ratio between the two
    // leading eigenvalues to the power 2^p.
    let mut h = g.clone();
    for _ in 0..GRAM_SQUARINGS {
        h = square_normalized(&h, n);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let mut w = vec![0.0; n];
    let mut lambda = 0.0;
    for it in 1..=max_iters {
        mat_vec(&h, &v, &mut w);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return SpectralEstimate {
                value: 0.0,
                converged: true,
                iterations: it,
            };
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        // Rayleigh quotient of G at the normalized iterate.
        mat_vec(&g, &v, &mut w);
        let next: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let done = (next - lambda).abs() <= tol * next.abs();
        lambda = next;
        if done {
            return SpectralEstimate {
                value: lambda.max(0.0).sqrt(),
                converged: true,
                iterations: it,
            };
        }
    }
    SpectralEstimate {
        value: frob,
        converged: false,
        iterations: max_iters,
    }
}

fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i * n..(i + 1) * n]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum();
    }
}

/// `M^2 / ||M^2||_F` for a symmetric `n x n` matrix.
fn square_normalized(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let ri = &m[i * n..(i + 1) * n];
        for j in i..n {
            let rj = &m[j * n..(j + 1) * n];
            let v: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    let f = frobenius(&out);
    if f > 0.0 {
        out.iter_mut().for_each(|x| *x /= f);
    }
    out
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn frobenius(data: &[f64]) -> f64 {
    data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn grid_ratio(bits: u8) -> Result<f64> {
    if bits < 2 {
        return Err(Error::UnsupportedBits(bits));
    }
    Ok(qmax(bits) as f64)
}

/// Certified per-channel bound after `order` dense residues:
/// `(1 / (2^(b-1) - 1))^(K-1) * s^(1)_i / 2`.
///
/// `scales_per_order[k][i]` is the order-`k+1` scale of channel `i`.
pub fn lemma1_bound(scales_per_order: &[Vec<f64>], bits: u8, order: usize) -> Result<Vec<f64>> {
    let m = grid_ratio(bits)?;
    let first = check_orders(scales_per_order, order)?;
    let f = m.powi(1 - order as i32) / 2.0;
    Ok(first.iter().map(|s| s * f).collect())
}

/// The same factor applied to the order-`K` scale, `(1/M)^(K-1) s^(K)_i / 2`.
/// Reported for comparison; it can undershoot the measured error.
pub fn lemma1_bound_literal(
    scales_per_order: &[Vec<f64>],
    bits: u8,
    order: usize,
) -> Result<Vec<f64>> {
    let m = grid_ratio(bits)?;
    check_orders(scales_per_order, order)?;
    let f = m.powi(1 - order as i32) / 2.0;
    Ok(scales_per_order[order - 1].iter().map(|s| s * f).collect())
}

fn check_orders(scales_per_order: &[Vec<f64>], order: usize) -> Result<&[f64]> {
    if order == 0 || scales_per_order.len() < order {
        return Err(Error::InvalidConfig(format!(
            "bound for order {order} needs {order} scale vectors, got {}",
            scales_per_order.len()
        )));
    }
    Ok(&scales_per_order[0])
}

/// Certified per-channel bound for a (possibly sparse) expansion: half the
/// scale of the last order that touched the channel.
pub fn lemma2_bound(residues: &[Residue], bits: u8) -> Result<Vec<f64>> {
    grid_ratio(bits)?;
    let first = residues
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty expansion".into()))?;
    let n_o = first.q.channels();
    Ok((0..n_o)
        .map(|i| {
            let last = residues
                .iter()
                .rev()
                .find(|r| r.is_kept(i))
                .unwrap_or(first);
            last.q.scale(i) / 2.0
        })
        .collect())
}

/// `||N * 1_gamma||_inf * s^(K)_i / (M^K * 2)` with `||0||_inf = 1`.
pub fn lemma2_bound_literal(
    norms: &[f64],
    mask: Option<&[usize]>,
    scales: &[f64],
    bits: u8,
    order: usize,
) -> Result<Vec<f64>> {
    let m = grid_ratio(bits)?;
    let masked_max = match mask {
        None => norms.iter().fold(0.0f64, |a, &b| a.max(b.abs())),
        Some(kept) => kept.iter().fold(0.0f64, |a, &i| a.max(norms[i].abs())),
    };
    let factor = if masked_max == 0.0 { 1.0 } else { masked_max };
    let denom = m.powi(order as i32) * 2.0;
    Ok(scales.iter().map(|s| factor * s / denom).collect())
}

/// How operator norms are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    /// Power iteration.
    #[default]
    Spectral,
    /// Frobenius envelopes, no iteration.
    Analytic,
}

/// Operator norm of a layer's linear map (conv via im2col, scaled by the
/// square root of the patch overlap).
pub fn operator_norm(g: &LayerGeometry, weight: &[f64], mode: BoundMode) -> SpectralEstimate {
    let mut est = match mode {
        BoundMode::Spectral => spectral_norm_of(weight, g.out_channels, g.cols()),
        BoundMode::Analytic => SpectralEstimate {
            value: frobenius(weight),
            converged: true,
            iterations: 0,
        },
    };
    est.value *= (g.overlap() as f64).sqrt();
    est
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerBound {
    pub name: String,
    /// Certified per-channel weight error bound (absent for 1-bit or
    /// non-uniform expansions).
    pub u: Option<Vec<f64>>,
    /// Per-channel closed-form values anchored on the last scale.
    pub u_literal: Option<Vec<f64>>,
    pub sigma: f64,
    pub e: f64,
    pub e_frobenius: f64,
    pub sigma_converged: bool,
    pub e_converged: bool,
    /// Activation-norm bound at this layer's output.
    pub m: f64,
    /// Propagated error bound at this layer's output.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub mode: BoundMode,
    pub bits: u8,
    pub order: usize,
    pub cutoff: usize,
    pub input_quantization: bool,
    pub layers: Vec<LayerBound>,
    #[serde(rename = "U")]
    pub u: f64,
    /// `prod_l (sum_{i<=l} sigma_i u_i + 1) - 1` with the closed-form values.
    #[serde(rename = "U_literal")]
    pub u_literal: Option<f64>,
    #[serde(rename = "U_empirical")]
    pub u_empirical: Option<f64>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
}

impl BoundReport {
    pub fn is_sound(&self) -> bool {
        self.u_empirical.is_none_or(|emp| emp <= self.u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundOptions {
    pub mode: BoundMode,
    /// Largest admissible `k1 + k2`; `None` uses `K + 1`.
    pub cutoff: Option<usize>,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            mode: BoundMode::Spectral,
            cutoff: None,
        }
    }
}

pub(crate) fn resolve_cutoff(order: usize, cutoff: Option<usize>) -> Result<usize> {
    let c = cutoff.unwrap_or(order + 1);
    if c < 2 {
        return Err(Error::InvalidConfig(format!(
            "cutoff must be >= 2, got {c}"
        )));
    }
    Ok(c)
}

/// Input order paired with weight residue `k2` under `cutoff`.
pub(crate) fn paired_order(order: usize, cutoff: usize, k2: usize) -> usize {
    order.min(cutoff.saturating_sub(k2))
}

fn check_pair(model: &Model, em: &ExpandedModel) -> Result<()> {
    if model.layers.len() != em.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} layers, expansion {}",
            model.layers.len(),
            em.layers.len()
        )));
    }
    for (a, b) in model.layers.iter().zip(&em.layers) {
        if a.geometry.weight_shape() != b.geometry.weight_shape()
            || a.geometry.input_len() != b.geometry.input_len()
        {
            return Err(Error::ShapeMismatch(format!(
                "layer `{}` differs between model and expansion",
                a.name()
            )));
        }
    }
    Ok(())
}

fn check_activations(model: &Model) -> Result<()> {
    match model
        .layers
        .iter()
        .find(|l| !l.geometry.activation.is_certified())
    {
        Some(l) => Err(Error::UnsupportedActivation(
            l.geometry.activation.to_string(),
        )),
        None => Ok(()),
    }
}

/// Bounds on the max-abs value of every layer input and of the network
/// output, valid for inputs with `||x||_2 <= 1`. Length `L + 1`.
pub fn activation_ranges(model: &Model, mode: BoundMode) -> Result<Vec<f64>> {
    check_activations(model)?;
    let mut ranges = Vec::with_capacity(model.layers.len() + 1);
    let mut m = 1.0;
    ranges.push(1.0);
    for layer in &model.layers {
        let g = &layer.geometry;
        let w = layer.weight.data();
        let cols = g.cols();
        let row_max = (0..g.out_channels)
            .map(|o| frobenius(&w[o * cols..(o + 1) * cols]))
            .fold(0.0, f64::max);
        let bias = layer.bias_values().unwrap_or(&[]);
        let b_inf = bias.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let b_two = frobenius(bias) * (g.positions() as f64).sqrt();
        let sigma = operator_norm(g, w, mode).value;
        ranges.push(row_max * m + b_inf);
        m = sigma * m + b_two;
    }
    Ok(ranges)
}

fn layer_u(layer: &ExpandedLayer, uniform: bool) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    if !uniform || layer.bits < 2 || layer.residues.iter().any(|r| r.q.grid != Grid::Uniform) {
        return (None, None);
    }
    let bits = layer.bits;
    let order = layer.residues.len();
    let dense = layer.residues.iter().all(|r| r.mask.is_none())
        && layer
            .residues
            .iter()
            .enumerate()
            .all(|(i, r)| r.order == i + 1);
    let u = lemma2_bound(&layer.residues, bits).ok();
    let literal = if dense {
        let scales: Vec<Vec<f64>> = layer.residues.iter().map(|r| r.q.scales.clone()).collect();
        lemma1_bound_literal(&scales, bits, order).ok()
    } else {
        let last = layer.residues.last().expect("non-empty");
        let w = dequantize(&last.q);
        let norms: Vec<f64> = (0..w.channels())
            .map(|i| w.channel(i).iter().map(|v| v.abs() / last.q.scale(i)).sum())
            .collect();
        lemma2_bound_literal(
            &norms,
            last.mask.as_deref(),
            &last.q.scales,
            bits,
            last.order,
        )
        .ok()
    };
    (u, literal)
}

/// L2 bound on the error of an order-`j` input expansion of a vector `y`
/// with `n` entries, where `y = h + d`, `|h_i| <= a`, `||d||_2 <= delta`
/// and `|y_i| <= q_inf`.
///
/// Entry `i` errs by at most `max(s/2, c_i)` with `c_i = max(0, |y_i| - reach)`
/// the part the grid cannot represent, so the squared norm is at most
/// `n s^2/4 + ||c||^2`. The clipped part is bounded both elementwise and
/// through `d`.
fn input_error_norm(n: f64, s: f64, reach: f64, a: f64, delta: f64, q_inf: f64) -> f64 {
    let by_max = n.sqrt() * (q_inf - reach).max(0.0);
    let by_drift = if reach >= a {
        if delta <= reach - a {
            0.0
        } else {
            delta
        }
    } else {
        delta + n.sqrt() * (a - reach)
    };
    let clipped = by_max.min(by_drift);
    (n * s * s / 4.0 + clipped * clipped).sqrt()
}

/// Network-level bound `U` on `||f(x) - f^(K)(x)||` for `||x||_2 = 1`.
///
/// Without activation quantization this reduces to
/// `prod(sigma_l + e_l) - prod(sigma_l)` for bias-free networks.
pub fn network_bound(
    model: &Model,
    em: &ExpandedModel,
    opts: &BoundOptions,
) -> Result<BoundReport> {
    check_pair(model, em)?;
    check_activations(model)?;
    em.validate()?;
    let order = em.order;
    let cutoff = resolve_cutoff(order, opts.cutoff)?;
    let uniform = em.operator == "uniform";

    let mut m = 1.0f64;
    let mut delta = 0.0f64;
    let mut layers = Vec::with_capacity(em.layers.len());
    let mut literal_terms: Option<Vec<f64>> = Some(Vec::new());
    let ranges = match em.activation {
        Some(_) => activation_ranges(model, opts.mode)?,
        None => Vec::new(),
    };

    for (l, (spec, layer)) in model.layers.iter().zip(&em.layers).enumerate() {
        let g = &spec.geometry;
        let w = spec.weight.data();
        let sigma = operator_norm(g, w, opts.mode);
        let kmax = cutoff - 1;
        let partial = layer.partial_weight(kmax);
        let diff: Vec<f64> = w.iter().zip(partial.data()).map(|(a, b)| a - b).collect();
        let e = operator_norm(g, &diff, opts.mode);
        let p = m + delta;

        let mut input_term = 0.0;
        if let Some(act) = &em.activation {
            let ma = qmax(act.bits).max(1) as f64;
            let scales = input_scales(act.input_scales[l], act.bits, order);
            let q_inf = p.min(ranges[l] + delta);
            let n = g.input_len() as f64;
            let mut reach = 0.0;
            let iota: Vec<f64> = scales
                .iter()
                .map(|&s| {
                    reach += ma * s;
                    input_error_norm(n, s, reach, ranges[l], delta, q_inf)
                })
                .collect();
            for r in layer.residues.iter().filter(|r| r.order <= kmax) {
                let j = paired_order(order, cutoff, r.order);
                let rho = operator_norm(g, dequantize(&r.q).data(), opts.mode).value;
                input_term += rho * iota[j - 1];
            }
        }

        let bias = spec.bias_values().unwrap_or(&[]);
        let b_two = frobenius(bias) * (g.positions() as f64).sqrt();
        delta = sigma.value * delta + e.value * p + input_term;
        m = sigma.value * m + b_two;

        let (u, u_literal) = layer_u(layer, uniform);
        if let (Some(terms), Some(lit)) = (literal_terms.as_mut(), u_literal.as_ref()) {
            terms.push(sigma.value * lit.iter().fold(0.0, |a: f64, &b| a.max(b)));
        } else {
            literal_terms = None;
        }
        layers.push(LayerBound {
            name: g.name.clone(),
            u,
            u_literal,
            sigma: sigma.value,
            e: e.value,
            e_frobenius: frobenius(&diff),
            sigma_converged: sigma.converged,
            e_converged: e.converged,
            m,
            delta,
        });
    }

    // Quantized engines round the logits to the finest output step.
    let output_rounding = em
        .activation
        .as_ref()
        .map_or(0.0, |a| finest_step(a.output_scale, a.bits, order) / 2.0);

    let u_literal = literal_terms.map(|terms| {
        let mut prefix = 0.0;
        let mut prod = 1.0;
        for t in terms {
            prefix += t;
            prod *= prefix + 1.0;
        }
        prod - 1.0
    });

    Ok(BoundReport {
        mode: opts.mode,
        bits: em.bits,
        order,
        cutoff,
        input_quantization: em.activation.is_some(),
        layers,
        u: delta + output_rounding,
        u_literal,
        u_empirical: None,
        samples: None,
        seed: None,
    })
}

/// Largest `||f(x) - f^(K)(x)||_inf` over `n_samples` seeded unit-norm
/// inputs. Sample `i` depends only on `(seed, i)`, so the result does not
/// depend on the thread count and grows monotonically with `n_samples`.
pub fn empirical_max_error(
    model: &Model,
    em: &ExpandedModel,
    n_samples: usize,
    seed: u64,
    cutoff: Option<usize>,
) -> Result<f64> {
    check_pair(model, em)?;
    let engine = FloatSimEngine::new(em, cutoff)?;
    let len = model
        .input_len()
        .ok_or_else(|| Error::InvalidConfig("model has no layers".into()))?;
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let x = random_unit_input(len, seed, i as u64);
            let a = forward_float(model, &x)?;
            let b = engine.forward(&x)?;
            Ok(a.iter()
                .zip(&b)
                .fold(0.0f64, |acc, (p, q)| acc.max((p - q).abs())))
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
}

/// Bound and empirical estimate in one report.
pub fn bound_report(
    model: &Model,
    em: &ExpandedModel,
    opts: &BoundOptions,
    n_samples: usize,
    seed: u64,
) -> Result<BoundReport> {
    let mut report = network_bound(model, em, opts)?;
    report.u_empirical = Some(empirical_max_error(
        model,
        em,
        n_samples,
        seed,
        opts.cutoff,
    )?);
    report.samples = Some(n_samples);
    report.seed = Some(seed);
    Ok(report)
}

/// Skip connection: errors of summed branches add.
pub fn compose_add(sub: &[f64]) -> f64 {
    sub.iter().sum()
}

/// Concatenation: the largest branch error dominates.
pub fn compose_concat(sub: &[f64]) -> f64 {
    sub.iter().fold(0.0, |a, &b| a.max(b))
}

/// A branch structure whose leaves are sub-network bounds.
#[derive(Debug, Clone, PartialEq)]
pub enum BranchBound {
    Leaf(f64),
    Add(Vec<BranchBound>),
    Concat(Vec<BranchBound>),
}

impl BranchBound {
    pub fn evaluate(&self) -> f64 {
        match self {
            BranchBound::Leaf(v) => *v,
            BranchBound::Add(children) => {
                compose_add(&children.iter().map(Self::evaluate).collect::<Vec<_>>())
            }
            BranchBound::Concat(children) => {
                compose_concat(&children.iter().map(Self::evaluate).collect::<Vec<_>>())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionBoundInputs {
    pub sigma_k: f64,
    pub sigma_q: f64,
    pub alpha_k: f64,
    pub alpha_q: f64,
}

/// `eps = sigma_k alpha_q + sigma_q alpha_k + sigma_k sigma_q`.
pub fn attention_bound(a: &AttentionBoundInputs) -> f64 {
    a.sigma_k * a.alpha_q + a.sigma_q * a.alpha_k + a.sigma_k * a.sigma_q
}

/// `1 - exp(-2 eps)`.
pub fn softmax_bound(eps: f64) -> f64 {
    -(-2.0 * eps).exp_m1()
}
