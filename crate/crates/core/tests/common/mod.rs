//! Reference implementations shared by the integration tests. Nothing here
//! calls into the library's quantization code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rex::model::{generate_synthetic_model, parse_layer_list, Model};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian matrix whose magnitude is itself random over a few decades.
pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 10f64.powf(rng.gen_range(-3.0..2.0));
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// `2^(b-1) - 1`, at least 1.
pub fn grid_max(bits: u8) -> f64 {
    (((1i64 << (bits - 1)) - 1).max(1)) as f64
}

/// One symmetric per-channel quantization step done by hand: returns the
/// per-row scales and the dequantized values.
pub fn oracle_quantize(w: &[f64], rows: usize, bits: u8) -> (Vec<f64>, Vec<f64>) {
    let cols = w.len() / rows;
    let m = grid_max(bits);
    let lo = -(1i64 << (bits - 1)) as f64;
    let hi = ((1i64 << (bits - 1)) - 1) as f64;
    let mut scales = Vec::with_capacity(rows);
    let mut out = Vec::with_capacity(w.len());
    for row in w.chunks(cols) {
        let max = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let s = if max > 0.0 { max / m } else { 1.0 };
        scales.push(s);
        out.extend(
            row.iter()
                .map(|v| (v / s).round_ties_even().clamp(lo, hi) * s),
        );
    }
    (scales, out)
}

/// Dense residual expansion by hand: per-order scales and the running
/// reconstruction after each order.
pub fn oracle_expand(
    w: &[f64],
    rows: usize,
    bits: u8,
    order: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut acc = vec![0.0; w.len()];
    let mut scales = Vec::new();
    let mut partials = Vec::new();
    for _ in 0..order {
        let residual: Vec<f64> = w.iter().zip(&acc).map(|(a, b)| a - b).collect();
        let (s, q) = oracle_quantize(&residual, rows, bits);
        for (a, v) in acc.iter_mut().zip(&q) {
            *a += v;
        }
        scales.push(s);
        partials.push(acc.clone());
    }
    (scales, partials)
}

/// Distance to the next representable double above `x`.
pub fn ulp(x: f64) -> f64 {
    let x = x.abs();
    f64::from_bits(x.to_bits() + 1) - x
}

/// `x` plus `n` units in the last place.
pub fn with_ulps(x: f64, n: u32) -> f64 {
    x + n as f64 * ulp(x)
}

/// Seeded ReLU MLP with three dense layers, each width in `[8, max_width]`.
pub fn random_mlp(seed: u64, max_width: usize) -> Model {
    let mut r = rng(seed ^ 0xA11CE);
    let w: Vec<usize> = (0..4).map(|_| r.gen_range(8..=max_width)).collect();
    let spec = format!(
        "dense:{}:{}:relu:bias,dense:{}:{}:relu:bias,dense:{}:{}:none:bias",
        w[0], w[1], w[1], w[2], w[2], w[3]
    );
    generate_synthetic_model(&parse_layer_list(&spec).unwrap(), seed).unwrap()
}
