//! Residual expansion of weights and inputs.
//!
//! Order 1 quantizes the weights; every further order quantizes what the
//! previous orders left over. The group-sparse variant keeps, at each order
//! `k >= 2`, only the output channels whose current residual has the largest
//! L1 norm, so channels skipped at one order can be picked up later.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{calibrate, Calibration};
use crate::model::{check_chain, LayerGeometry, Model};
use crate::quant::{
    dequantize, operator_by_id, qmax, quantize, Grid, QuantConfig, QuantOperator, QuantizedTensor,
    Uniform,
};
use crate::tensor::Tensor;

/// One quantized residue `R^(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residue {
    pub order: usize,
    pub q: QuantizedTensor,
    /// Kept output channels, sorted. `None` means dense. Codes of dropped
    /// channels are zero.
    pub mask: Option<Vec<usize>>,
}

impl Residue {
    pub fn dense(order: usize, q: QuantizedTensor) -> Self {
        Self {
            order,
            q,
            mask: None,
        }
    }

    pub fn is_kept(&self, channel: usize) -> bool {
        match &self.mask {
            None => true,
            Some(kept) => kept.binary_search(&channel).is_ok(),
        }
    }

    /// Fraction of the dense multiply work this residue costs. Binary
    /// residues only pay for their non-zero entries.
    pub fn kept_fraction(&self) -> f64 {
        match self.q.grid {
            Grid::Binary => self.q.nonzero_count() as f64 / self.q.codes.len().max(1) as f64,
            Grid::Uniform => match &self.mask {
                None => 1.0,
                Some(kept) => kept.len() as f64 / self.q.channels() as f64,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMask {
    pub kept: Vec<usize>,
    /// Smallest kept norm (`+inf` when nothing is kept).
    pub threshold: f64,
    pub norms: Vec<f64>,
}

/// Channels kept per order for a layer budget `gamma` (1.0 = one full
/// residue) spread over `order - 1` residues.
pub fn channel_quota(gamma: f64, n_o: usize, order: usize) -> usize {
    if order < 2 {
        return 0;
    }
    let q = (gamma * n_o as f64 / (order - 1) as f64).round();
    if q.is_nan() || q <= 0.0 {
        0
    } else {
        (q as usize).min(n_o)
    }
}

/// Selects the output channels of `residual` with the largest L1 norm.
/// Ties go to the lower channel index.
pub fn sparse_mask(residual: &Tensor, gamma: f64, k: usize, order: usize) -> Result<SparseMask> {
    if k < 2 || k > order {
        return Err(Error::InvalidConfig(format!(
            "sparse order {k} outside [2, {order}]"
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "budget must be >= 0, got {gamma}"
        )));
    }
    let n_o = residual.channels();
    let norms: Vec<f64> = (0..n_o)
        .map(|i| residual.channel(i).iter().map(|v| v.abs()).sum())
        .collect();
    let quota = channel_quota(gamma, n_o, order);
    let mut ranked: Vec<usize> = (0..n_o).collect();
    ranked.sort_by(|&a, &b| {
        norms[b]
            .partial_cmp(&norms[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept = ranked[..quota].to_vec();
    kept.sort_unstable();
    let threshold = kept.iter().map(|&i| norms[i]).fold(f64::INFINITY, f64::min);
    Ok(SparseMask {
        kept,
        threshold,
        norms,
    })
}

/// Dense expansion with the base operator.
pub fn expand_weights(w: &Tensor, cfg: &QuantConfig, order: usize) -> Result<Vec<Residue>> {
    expand_with(&Uniform, w, cfg, order, None)
}

/// Group-sparse expansion with the base operator.
pub fn expand_weights_sparse(
    w: &Tensor,
    cfg: &QuantConfig,
    order: usize,
    gamma: f64,
) -> Result<Vec<Residue>> {
    expand_with(&Uniform, w, cfg, order, Some(gamma))
}

/// Expands `w` to `order` residues with any operator.
///
/// With `gamma`, every order past the operator's leading residues is
/// masked to the top-norm channels of the current residual. Orders whose
/// mask keeps nothing are omitted; saturated masks are stored as dense.
pub fn expand_with(
    op: &dyn QuantOperator,
    w: &Tensor,
    cfg: &QuantConfig,
    order: usize,
    gamma: Option<f64>,
) -> Result<Vec<Residue>> {
    if order == 0 {
        return Err(Error::InvalidConfig("expansion order must be >= 1".into()));
    }
    cfg.validate()?;
    let mut acc = vec![0.0; w.len()];
    let mut residues = Vec::with_capacity(order);
    let accumulate = |acc: &mut [f64], q: &QuantizedTensor| {
        for (a, v) in acc.iter_mut().zip(dequantize(q).data()) {
            *a += v;
        }
    };

    for q in op.leading(w, cfg)?.into_iter().take(order) {
        accumulate(&mut acc, &q);
        residues.push(Residue::dense(residues.len() + 1, q));
    }

    for k in residues.len() + 1..=order {
        let residual = residual_of(w, &acc);
        let mut q = op.quantize_residual(&residual, cfg)?;
        let mut mask = None;
        if let Some(gamma) = gamma {
            let sel = sparse_mask(&residual, gamma, k, order)?;
            if sel.kept.is_empty() {
                continue;
            }
            if sel.kept.len() < w.channels() {
                let per = q.channel_len();
                let mut keep = sel.kept.iter().peekable();
                for ch in 0..q.channels() {
                    if keep.peek() == Some(&&ch) {
                        keep.next();
                    } else {
                        q.codes[ch * per..(ch + 1) * per].fill(0);
                    }
                }
                mask = Some(sel.kept);
            }
        }
        accumulate(&mut acc, &q);
        residues.push(Residue { order: k, q, mask });
    }
    Ok(residues)
}

fn residual_of(w: &Tensor, acc: &[f64]) -> Tensor {
    let data = w.data().iter().zip(acc).map(|(a, b)| a - b).collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape")
}

/// `sum_k Q^-1(R^(k))`.
pub fn reconstruct(residues: &[Residue]) -> Result<Tensor> {
    let first = residues
        .first()
        .ok_or_else(|| Error::InvalidConfig("cannot reconstruct an empty expansion".into()))?;
    let mut out = dequantize(&first.q);
    for r in &residues[1..] {
        if r.q.shape != first.q.shape {
            return Err(Error::ShapeMismatch(format!(
                "residue {} has shape {:?}, expected {:?}",
                r.order, r.q.shape, first.q.shape
            )));
        }
        for (a, v) in out.data_mut().iter_mut().zip(dequantize(&r.q).data()) {
            *a += v;
        }
    }
    Ok(out)
}

/// Linear budget repartition: `gamma_l = total * 2l / (L + 1)`, capped at
/// `K - 1` full residues, with the capped surplus handed to the remaining
/// layers in proportion to their share.
pub fn allocate_budget(total: f64, layers: usize, order: usize) -> Result<Vec<f64>> {
    if !(total >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "budget must be >= 0, got {total}"
        )));
    }
    let cap = order.saturating_sub(1) as f64;
    let weights: Vec<f64> = (1..=layers)
        .map(|l| 2.0 * l as f64 / (layers as f64 + 1.0))
        .collect();
    let mut gamma: Vec<f64> = weights.iter().map(|w| total * w).collect();
    let mut capped = vec![false; layers];
    loop {
        let mut surplus = 0.0;
        for (g, c) in gamma.iter_mut().zip(capped.iter_mut()) {
            if !*c && *g > cap {
                surplus += *g - cap;
                *g = cap;
                *c = true;
            }
        }
        let free: f64 = weights
            .iter()
            .zip(&capped)
            .filter(|(_, c)| !**c)
            .map(|(w, _)| w)
            .sum();
        if surplus <= 0.0 || free <= 0.0 {
            break;
        }
        for ((g, w), c) in gamma.iter_mut().zip(&weights).zip(&capped) {
            if !*c {
                *g += surplus * w / free;
            }
        }
    }
    Ok(gamma)
}

/// Overhead budget that keeps `expansion_bits` expansions within the
/// multiply cost of a `reference_bits` layer: `reference / expansion - 1`.
pub fn max_budget_for_latency(reference_bits: u8, expansion_bits: u8) -> f64 {
    reference_bits as f64 / expansion_bits as f64 - 1.0
}

/// Per-order input scales: order 1 from calibration, then
/// `s^(k) = s^(1) / (2^(b-1) - 1)^(k-1)`.
pub fn input_scales(first: f64, bits: u8, order: usize) -> Vec<f64> {
    let ratio = qmax(bits).max(1) as f64;
    let mut s = first;
    (0..order)
        .map(|_| {
            let cur = s;
            s /= ratio;
            cur
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputExpansion {
    pub orders: Vec<QuantizedTensor>,
}

impl InputExpansion {
    pub fn reconstruct(&self) -> Tensor {
        let mut out = dequantize(&self.orders[0]);
        for q in &self.orders[1..] {
            for (a, v) in out.data_mut().iter_mut().zip(dequantize(q).data()) {
                *a += v;
            }
        }
        out
    }
}

/// Expands an activation tensor with static per-tensor scales.
pub fn expand_input(
    input: &Tensor,
    cfg: &QuantConfig,
    order: usize,
    calib_scale: f64,
) -> Result<InputExpansion> {
    if order == 0 {
        return Err(Error::InvalidConfig("expansion order must be >= 1".into()));
    }
    let flat = Tensor::new(vec![1, input.len()], input.data().to_vec())?;
    let mut residual = flat.clone();
    let mut orders = Vec::with_capacity(order);
    for s in input_scales(calib_scale, cfg.bits, order) {
        let q = quantize(&residual, &[s], cfg)?;
        for (r, v) in residual.data_mut().iter_mut().zip(dequantize(&q).data()) {
            *r -= v;
        }
        orders.push(QuantizedTensor {
            shape: input.shape().to_vec(),
            ..q
        });
    }
    Ok(InputExpansion { orders })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedLayer {
    pub geometry: LayerGeometry,
    pub bias: Option<Vec<f64>>,
    pub residues: Vec<Residue>,
    pub bits: u8,
    pub gamma: f64,
}

impl ExpandedLayer {
    pub fn reconstruct(&self) -> Tensor {
        reconstruct(&self.residues).expect("layers carry at least one residue")
    }

    /// Sum of residues with order `<= max_order`.
    pub fn partial_weight(&self, max_order: usize) -> Tensor {
        let mut out = Tensor::zeros(self.geometry.weight_shape());
        for r in self.residues.iter().filter(|r| r.order <= max_order) {
            for (a, v) in out.data_mut().iter_mut().zip(dequantize(&r.q).data()) {
                *a += v;
            }
        }
        out
    }
}

/// Static activation quantization attached to an expanded model.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationQuant {
    pub bits: u8,
    /// First-order input scale of every layer.
    pub input_scales: Vec<f64>,
    /// First-order scale of the network output.
    pub output_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedModel {
    pub layers: Vec<ExpandedLayer>,
    pub bits: u8,
    pub order: usize,
    pub operator: String,
    pub outlier_fraction: Option<f64>,
    pub activation: Option<ActivationQuant>,
    pub metadata: BTreeMap<String, String>,
}

impl ExpandedModel {
    pub fn budgets(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.gamma).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "bit-width {} outside [1, 8]",
                self.bits
            )));
        }
        if self.order == 0 {
            return Err(Error::InvalidConfig("expansion order must be >= 1".into()));
        }
        for layer in &self.layers {
            layer.geometry.validate()?;
            let n = layer.residues.len();
            if n == 0 || n > self.order {
                return Err(Error::InvalidConfig(format!(
                    "layer `{}` carries {n} residues, expected 1..={}",
                    layer.geometry.name, self.order
                )));
            }
            for r in &layer.residues {
                r.q.validate()?;
                if r.q.shape != layer.geometry.weight_shape() {
                    return Err(Error::InvalidShape(format!(
                        "layer `{}` residue {} has shape {:?}",
                        layer.geometry.name, r.order, r.q.shape
                    )));
                }
            }
        }
        if let Some(act) = &self.activation {
            if act.input_scales.len() != self.layers.len() {
                return Err(Error::MissingCalibration);
            }
        }
        check_chain(self.layers.iter().map(|l| &l.geometry))
    }
}

/// Settings for [`expand_model`].
#[derive(Debug, Clone)]
pub struct ExpandConfig {
    pub bits: u8,
    pub order: usize,
    /// Total overhead budget (1.0 = one full residue per layer on
    /// average). `None` expands densely.
    pub budget: Option<f64>,
    pub operator: String,
    pub outlier_fraction: f64,
    /// Activation bit-width; `None` keeps activations in float.
    pub act_bits: Option<u8>,
    pub calibration: Calibration,
}

impl ExpandConfig {
    pub fn dense(bits: u8, order: usize) -> Self {
        Self {
            bits,
            order,
            budget: None,
            operator: "uniform".into(),
            outlier_fraction: crate::quant::DEFAULT_OUTLIER_FRACTION,
            act_bits: Some(8),
            calibration: Calibration::Analytic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        QuantConfig::new(self.bits)?;
        if self.order == 0 {
            return Err(Error::InvalidConfig("expansion order must be >= 1".into()));
        }
        if let Some(b) = self.budget {
            if !(b >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "budget must be >= 0, got {b}"
                )));
            }
        }
        if let Some(a) = self.act_bits {
            if !(2..=8).contains(&a) {
                return Err(Error::InvalidConfig(format!(
                    "activation bit-width must lie in [2, 8], got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Builds the expanded model layer by layer.
pub fn expand_model(model: &Model, cfg: &ExpandConfig) -> Result<ExpandedModel> {
    cfg.validate()?;
    model.validate()?;
    let qcfg = QuantConfig::new(cfg.bits)?;
    let op = operator_by_id(&cfg.operator, cfg.outlier_fraction)?;
    let budgets = match cfg.budget {
        Some(total) => allocate_budget(total, model.layers.len(), cfg.order)?,
        None => vec![cfg.order.saturating_sub(1) as f64; model.layers.len()],
    };
    let layers = model
        .layers
        .par_iter()
        .zip(budgets.par_iter())
        .map(|(layer, &gamma)| {
            let residues = expand_with(
                op.as_ref(),
                &layer.weight,
                &qcfg,
                cfg.order,
                cfg.budget.map(|_| gamma),
            )?;
            Ok(ExpandedLayer {
                geometry: layer.geometry.clone(),
                bias: layer.bias_values().map(<[f64]>::to_vec),
                residues,
                bits: cfg.bits,
                gamma,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let activation = match cfg.act_bits {
        Some(bits) => Some(calibrate(model, bits, &cfg.calibration)?),
        None => None,
    };
    Ok(ExpandedModel {
        layers,
        bits: cfg.bits,
        order: cfg.order,
        operator: cfg.operator.clone(),
        outlier_fraction: (cfg.operator == "outlier-split").then_some(cfg.outlier_fraction),
        activation,
        metadata: model.metadata.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn worked_example_order_two() {
        let w = row(&[0.9, -0.45, 0.3]);
        let cfg = QuantConfig::new(3).unwrap();
        let res = expand_weights(&w, &cfg, 2).unwrap();
        assert_eq!(res[0].q.codes, vec![3, -2, 1]);
        assert!((res[0].q.scales[0] - 0.3).abs() < 1e-15);
        assert!((res[1].q.scales[0] - 0.05).abs() < 1e-15);
        assert_eq!(res[1].q.codes, vec![0, 3, 0]);
        let rec = reconstruct(&res).unwrap();
        for (a, b) in rec.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn order_one_is_plain_quantization() {
        let w = Tensor::new(vec![2, 3], vec![0.3, -0.1, 0.7, 0.2, 0.25, -0.9]).unwrap();
        let cfg = QuantConfig::new(4).unwrap();
        let res = expand_weights(&w, &cfg, 1).unwrap();
        assert_eq!(res.len(), 1);
        assert_eq!(res[0].q, Uniform.quantize(&w, &cfg).unwrap());
    }

    #[test]
    fn zero_weights_stay_zero() {
        let w = Tensor::zeros(vec![2, 2]);
        let res = expand_weights(&w, &QuantConfig::new(4).unwrap(), 3).unwrap();
        assert_eq!(res.len(), 3);
        for r in &res {
            assert!(r.q.codes.iter().all(|&c| c == 0));
            assert!(r.q.scales.iter().all(|&s| s == 1.0));
        }
    }

    #[test]
    fn mask_picks_higher_norm() {
        let r = Tensor::new(vec![2, 2], vec![0.2, -0.2, 0.45, 0.45]).unwrap();
        let m = sparse_mask(&r, 0.5, 2, 2).unwrap();
        assert_eq!(m.kept, vec![1]);
        assert!((m.norms[0] - 0.4).abs() < 1e-12 && (m.norms[1] - 0.9).abs() < 1e-12);
        assert!(sparse_mask(&r, 0.0, 2, 2).unwrap().kept.is_empty());
        assert_eq!(sparse_mask(&r, 5.0, 2, 2).unwrap().kept, vec![0, 1]);
    }

    #[test]
    fn mask_ties_prefer_lower_index() {
        let r = Tensor::new(vec![3, 1], vec![0.5, -0.5, 0.5]).unwrap();
        assert_eq!(sparse_mask(&r, 1.0 / 3.0, 2, 2).unwrap().kept, vec![0]);
        assert_eq!(sparse_mask(&r, 2.0 / 3.0, 2, 2).unwrap().kept, vec![0, 1]);
    }

    #[test]
    fn zero_budget_keeps_only_order_one() {
        let w = Tensor::new(vec![2, 2], vec![0.31, -0.17, 0.05, 0.93]).unwrap();
        let res = expand_weights_sparse(&w, &QuantConfig::new(3).unwrap(), 3, 0.0).unwrap();
        assert_eq!(res.len(), 1);
    }

    #[test]
    fn budget_examples() {
        assert_eq!(allocate_budget(0.4, 1, 3).unwrap(), vec![0.4]);
        let g = allocate_budget(0.3, 3, 2).unwrap();
        for (a, b) in g.iter().zip([0.15, 0.3, 0.45]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(max_budget_for_latency(8, 1), 7.0);
    }

    #[test]
    fn budget_clamps_and_redistributes() {
        // Cap 1.0: raw [0.45, 0.9, 1.35]. Capping the last layer pushes the
        // middle one over the cap too, so everything left lands on layer 1.
        let g = allocate_budget(0.9, 3, 2).unwrap();
        assert!((g[0] - 0.7).abs() < 1e-12);
        assert!((g[1] - 1.0).abs() < 1e-12 && (g[2] - 1.0).abs() < 1e-12);
        assert!((g.iter().sum::<f64>() / 3.0 - 0.9).abs() < 1e-12);
        assert_eq!(allocate_budget(5.0, 2, 1).unwrap(), vec![0.0, 0.0]);
        assert!(allocate_budget(-1.0, 2, 2).is_err());
    }

    #[test]
    fn input_on_grid_needs_one_order() {
        let cfg = QuantConfig::new(4).unwrap();
        let x = Tensor::vector(vec![0.25, -0.5, 0.0, 1.75]).unwrap();
        let e = expand_input(&x, &cfg, 3, 0.25).unwrap();
        assert!(e.orders[1..]
            .iter()
            .all(|q| q.codes.iter().all(|&c| c == 0)));
        assert_eq!(e.reconstruct(), x);
    }

    #[test]
    fn zero_input_is_zero_at_every_order() {
        let cfg = QuantConfig::new(4).unwrap();
        let e = expand_input(&Tensor::zeros(vec![5]), &cfg, 3, 0.1).unwrap();
        assert!(e.orders.iter().all(|q| q.codes.iter().all(|&c| c == 0)));
    }
}
