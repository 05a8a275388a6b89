//! Bit-operation cost model and the error-versus-cost sweep.
//!
//! A `b`-bit multiply costs `c(b) = b * log2(b)` bit operations (`c(1) = 1`,
//! a single AND). Additions are not counted. Per layer, with input side
//! `D`, kernel `d`, stride `s`:
//!
//! * original: `D^2 d^2 n_i n_o / s^2 * c(32)`
//! * rescaling in float: `D^2 (n_i + n_o / s^2) * c(32)`
//! * integer products: `D^2 d^2 n_i n_o / s^2 * sum_r f_r c(b_r)`, where
//!   `f_r` is the fraction of residue `r` that is actually computed.

use rayon::prelude::*;
use serde::Serialize;

use crate::bounds::{network_bound, BoundOptions};
use crate::error::{Error, Result};
use crate::expansion::{expand_model, ExpandConfig, ExpandedModel};
use crate::inference::{compare_engines, Calibration, FloatEngine, FloatSimEngine};
use crate::model::{LayerGeometry, Model};

/// Cost of one `b`-bit multiply.
pub fn mult_cost(bits: u32) -> f64 {
    match bits {
        0 => 0.0,
        1 => 1.0,
        b => b as f64 * (b as f64).log2(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidueCost {
    pub bits: u8,
    /// Computed fraction of the dense product, in `[0, 1]`.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCostParams {
    pub spatial: usize,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub residues: Vec<ResidueCost>,
}

impl LayerCostParams {
    /// Dense layer expanded to `order` residues of `bits` bits; `kept[i]` is
    /// the kept fraction of order `i + 2` (missing entries are dense).
    pub fn fc(n_i: usize, n_o: usize, bits: u8, order: usize, kept: &[f64]) -> Self {
        let residues = (0..order)
            .map(|k| ResidueCost {
                bits,
                fraction: if k == 0 {
                    1.0
                } else {
                    kept.get(k - 1).copied().unwrap_or(1.0)
                },
            })
            .collect();
        Self {
            spatial: 1,
            kernel: 1,
            stride: 1,
            in_channels: n_i,
            out_channels: n_o,
            residues,
        }
    }

    pub fn from_geometry(g: &LayerGeometry, residues: Vec<ResidueCost>) -> Self {
        Self {
            spatial: g.spatial,
            kernel: g.kernel,
            stride: g.stride,
            in_channels: g.in_channels,
            out_channels: g.out_channels,
            residues,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [
            self.spatial,
            self.kernel,
            self.stride,
            self.in_channels,
            self.out_channels,
        ]
        .contains(&0)
        {
            return Err(Error::InvalidConfig(
                "cost parameters must be positive".into(),
            ));
        }
        if let Some(r) = self
            .residues
            .iter()
            .find(|r| !(0.0..=1.0).contains(&r.fraction))
        {
            return Err(Error::InvalidConfig(format!(
                "kept fraction {} outside [0, 1]",
                r.fraction
            )));
        }
        Ok(())
    }

    /// Effective number of dense residues.
    pub fn k_eff(&self) -> f64 {
        self.residues.iter().map(|r| r.fraction).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerBops {
    pub original: f64,
    pub float_ops: f64,
    pub int_ops: f64,
    pub total: f64,
}

pub fn layer_bops(p: &LayerCostParams) -> Result<LayerBops> {
    p.validate()?;
    let d2 = (p.spatial * p.spatial) as f64;
    let k2 = (p.kernel * p.kernel) as f64;
    let s2 = (p.stride * p.stride) as f64;
    let (n_i, n_o) = (p.in_channels as f64, p.out_channels as f64);
    let macs = d2 * k2 * n_i * n_o / s2;
    let c32 = mult_cost(32);
    let float_ops = d2 * (n_i + n_o / s2) * c32;
    let int_ops = macs
        * p.residues
            .iter()
            .map(|r| r.fraction * mult_cost(r.bits as u32))
            .sum::<f64>();
    Ok(LayerBops {
        original: macs * c32,
        float_ops,
        int_ops,
        total: float_ops + int_ops,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub k_eff: f64,
    #[serde(flatten)]
    pub bops: LayerBops,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub original: f64,
    pub float_ops: f64,
    pub int_ops: f64,
    pub total: f64,
    /// `total / original`.
    pub rel_cost: f64,
}

impl CostReport {
    fn from_layers(layers: Vec<LayerCost>) -> Self {
        let sum = |f: fn(&LayerBops) -> f64| layers.iter().map(|l| f(&l.bops)).sum::<f64>();
        let original = sum(|b| b.original);
        let float_ops = sum(|b| b.float_ops);
        let int_ops = sum(|b| b.int_ops);
        let total = float_ops + int_ops;
        Self {
            rel_cost: if original > 0.0 {
                total / original
            } else {
                0.0
            },
            layers,
            original,
            float_ops,
            int_ops,
            total,
        }
    }
}

/// Cost of an expanded model with each layer's own residues and masks.
pub fn model_bops(em: &ExpandedModel) -> Result<CostReport> {
    let layers = em
        .layers
        .iter()
        .map(|l| {
            let residues = l
                .residues
                .iter()
                .map(|r| ResidueCost {
                    bits: r.q.bits,
                    fraction: r.kept_fraction(),
                })
                .collect();
            let p = LayerCostParams::from_geometry(&l.geometry, residues);
            Ok(LayerCost {
                name: l.geometry.name.clone(),
                k_eff: p.k_eff(),
                bops: layer_bops(&p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport::from_layers(layers))
}

/// Cost of the float model (no integer products).
pub fn float_model_bops(model: &Model) -> Result<CostReport> {
    let layers = model
        .layers
        .iter()
        .map(|l| {
            let p = LayerCostParams::from_geometry(&l.geometry, Vec::new());
            let b = layer_bops(&p)?;
            Ok(LayerCost {
                name: l.name().to_string(),
                k_eff: 0.0,
                bops: LayerBops {
                    original: b.original,
                    float_ops: b.original,
                    int_ops: 0.0,
                    total: b.original,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport::from_layers(layers))
}

/// Configurations swept by [`tradeoff_sweep`]; the grid is the cartesian
/// product in field order.
#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub operators: Vec<String>,
    pub bits: Vec<u8>,
    pub orders: Vec<usize>,
    /// Total budgets as fractions (0.5 = 50%).
    pub budgets: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepEval {
    pub samples: usize,
    pub seed: u64,
    pub act_bits: Option<u8>,
    pub outlier_fraction: f64,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub operator: String,
    pub b: u8,
    #[serde(rename = "K")]
    pub k: usize,
    /// Percent.
    pub gamma_total: f64,
    pub bops_int: f64,
    pub bops_float: f64,
    pub bops_total: f64,
    pub rel_cost: f64,
    pub weight_rmse: f64,
    #[serde(rename = "bound_U")]
    pub bound_u: f64,
    pub emp_max_err: f64,
    pub argmax_agree: f64,
}

fn weight_rmse(model: &Model, em: &ExpandedModel) -> f64 {
    let mut sq = 0.0;
    let mut n = 0usize;
    for (spec, layer) in model.layers.iter().zip(&em.layers) {
        let rec = layer.reconstruct();
        for (a, b) in spec.weight.data().iter().zip(rec.data()) {
            sq += (a - b) * (a - b);
        }
        n += rec.len();
    }
    if n == 0 {
        0.0
    } else {
        (sq / n as f64).sqrt()
    }
}

/// Runs every grid configuration and returns rows sorted by total BOPs
/// (stable, so ties keep grid order).
pub fn tradeoff_sweep(model: &Model, grid: &SweepGrid, eval: &SweepEval) -> Result<Vec<SweepRow>> {
    let mut configs = Vec::new();
    for op in &grid.operators {
        for &b in &grid.bits {
            for &k in &grid.orders {
                for &g in &grid.budgets {
                    configs.push((op.clone(), b, k, g));
                }
            }
        }
    }
    if configs.is_empty() {
        return Err(Error::InvalidConfig("the sweep grid is empty".into()));
    }
    let input_len = model
        .input_len()
        .ok_or_else(|| Error::InvalidConfig("model has no layers".into()))?;
    let mut rows = configs
        .par_iter()
        .map(|(op, b, k, g)| {
            let cfg = ExpandConfig {
                bits: *b,
                order: *k,
                budget: Some(*g),
                operator: op.clone(),
                outlier_fraction: eval.outlier_fraction,
                act_bits: eval.act_bits,
                calibration: eval.calibration.clone(),
            };
            let em = expand_model(model, &cfg)?;
            let cost = model_bops(&em)?;
            let bound = network_bound(model, &em, &BoundOptions::default())?;
            let sim = FloatSimEngine::new(&em, None)?;
            let cmp = compare_engines(
                &FloatEngine(model),
                &sim,
                input_len,
                eval.samples,
                eval.seed,
            )?;
            Ok(SweepRow {
                operator: op.clone(),
                b: *b,
                k: *k,
                gamma_total: g * 100.0,
                bops_int: cost.int_ops,
                bops_float: cost.float_ops,
                bops_total: cost.total,
                rel_cost: cost.rel_cost,
                weight_rmse: weight_rmse(model, &em),
                bound_u: bound.u,
                emp_max_err: cmp.max_abs_err,
                argmax_agree: cmp.argmax_agreement,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.bops_total.total_cmp(&b.bops_total));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent evaluation of the FC formulas.
    fn fc_oracle(n_i: f64, n_o: f64, b: f64, k_eff: f64) -> (f64, f64) {
        let c32 = 32.0 * 5.0;
        let cb = b * b.log2();
        (n_i * n_o * c32, (n_i + n_o) * c32 + k_eff * n_i * n_o * cb)
    }

    #[test]
    fn fc_examples() {
        let r1 = layer_bops(&LayerCostParams::fc(128, 128, 4, 1, &[])).unwrap();
        assert_eq!(r1.original, 2_621_440.0);
        assert_eq!(r1.float_ops, 40_960.0);
        assert_eq!(r1.int_ops, 131_072.0);
        assert_eq!(r1.total, 172_032.0);
        let r2 = layer_bops(&LayerCostParams::fc(128, 128, 4, 2, &[])).unwrap();
        assert_eq!(r2.total, 303_104.0);
        let half = layer_bops(&LayerCostParams::fc(128, 128, 4, 2, &[0.5])).unwrap();
        assert_eq!(half.int_ops, 196_608.0);
        let (o, t) = fc_oracle(128.0, 128.0, 4.0, 1.5);
        assert_eq!((half.original, half.total), (o, t));
    }

    #[test]
    fn multiply_costs() {
        assert_eq!(mult_cost(1), 1.0);
        assert_eq!(mult_cost(2), 2.0);
        assert_eq!(mult_cost(32), 160.0);
    }

    #[test]
    fn monotone_in_bits_and_order() {
        let base = layer_bops(&LayerCostParams::fc(16, 8, 3, 2, &[0.25]))
            .unwrap()
            .total;
        assert!(
            layer_bops(&LayerCostParams::fc(16, 8, 4, 2, &[0.25]))
                .unwrap()
                .total
                > base
        );
        assert!(
            layer_bops(&LayerCostParams::fc(16, 8, 3, 2, &[0.5]))
                .unwrap()
                .total
                > base
        );
        assert!(layer_bops(&LayerCostParams::fc(16, 8, 3, 2, &[1.5])).is_err());
    }
}
