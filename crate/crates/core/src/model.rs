//! Frozen linear backbone with identity and style adapters injected at one or
//! more linear sites, plus the closed-form gradients of the squared-error loss.
//!
//! Every site `l` maps the shared input `x` to its own output block:
//! `y_l = x (W0_l + dID_l + dSTY_l)^T`. Targets store the blocks side by side,
//! so a batch with `L` sites has `L * d_out` target columns.

use ndarray::{s, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::lora::{AdapterRole, AdapterSet, LoraAdapter, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    sites: Vec<Matrix>,
}

impl Backbone {
    pub fn new(sites: Vec<Matrix>) -> Result<Self> {
        let first = sites
            .first()
            .ok_or_else(|| shape_err("backbone needs at least one site"))?
            .dim();
        if sites.iter().any(|w| w.dim() != first) {
            return Err(shape_err("backbone sites must share one shape"));
        }
        Ok(Self { sites })
    }

    pub fn sites(&self) -> &[Matrix] {
        &self.sites
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn d_out(&self) -> usize {
        self.sites[0].nrows()
    }

    pub fn d_in(&self) -> usize {
        self.sites[0].ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleLabel {
    Neutral,
    Cluster(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub style_label: StyleLabel,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Rows `idx` of this batch, keeping its label.
    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(Axis(0), idx),
            targets: self.targets.select(Axis(0), idx),
            style_label: self.style_label,
        }
    }
}

/// When the style adapter participates in a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleGate {
    /// Style is applied to expressive batches only; neutral speech is
    /// identity alone.
    #[default]
    ExpressiveOnly,
    /// Style is applied to every batch (single-adapter configurations).
    Always,
}

impl StyleGate {
    pub fn style_active(self, label: StyleLabel) -> bool {
        match self {
            StyleGate::Always => true,
            StyleGate::ExpressiveOnly => label != StyleLabel::Neutral,
        }
    }
}

fn check_sets(backbone: &Backbone, id: &AdapterSet, style: &AdapterSet) -> Result<()> {
    for set in [id, style] {
        if set.sites.len() != backbone.num_sites() {
            return Err(shape_err(format!(
                "{:?} adapter has {} sites, backbone has {}",
                set.role,
                set.sites.len(),
                backbone.num_sites()
            )));
        }
        for ad in &set.sites {
            if ad.d_out() != backbone.d_out() || ad.d_in() != backbone.d_in() {
                return Err(shape_err(format!(
                    "adapter {}x{} does not fit backbone {}x{}",
                    ad.d_out(),
                    ad.d_in(),
                    backbone.d_out(),
                    backbone.d_in()
                )));
            }
        }
    }
    Ok(())
}

fn effective_weights(backbone: &Backbone, id: &AdapterSet, style: Option<&AdapterSet>) -> Vec<Matrix> {
    backbone
        .sites()
        .iter()
        .enumerate()
        .map(|(l, w0)| {
            let mut w = w0 + &id.sites[l].merge_delta();
            if let Some(style) = style {
                w += &style.sites[l].merge_delta();
            }
            w
        })
        .collect()
}

fn predict_with(weights: &[Matrix], x: ArrayView2<f64>) -> Matrix {
    let d_out = weights[0].nrows();
    let mut out = Matrix::zeros((x.nrows(), d_out * weights.len()));
    for (l, w) in weights.iter().enumerate() {
        out.slice_mut(s![.., l * d_out..(l + 1) * d_out])
            .assign(&x.dot(&w.t()));
    }
    out
}

/// `y = x (W0 + dID + dSTY)^T` at every site, with both adapters applied.
pub fn forward(backbone: &Backbone, id: &AdapterSet, style: &AdapterSet, x: &Matrix) -> Result<Matrix> {
    forward_gated(backbone, id, style, x, true)
}

fn forward_gated(
    backbone: &Backbone,
    id: &AdapterSet,
    style: &AdapterSet,
    x: &Matrix,
    style_on: bool,
) -> Result<Matrix> {
    check_sets(backbone, id, style)?;
    if x.ncols() != backbone.d_in() {
        return Err(shape_err(format!(
            "input has {} columns, backbone expects {}",
            x.ncols(),
            backbone.d_in()
        )));
    }
    let weights = effective_weights(backbone, id, style_on.then_some(style));
    Ok(predict_with(&weights, x.view()))
}

/// Prediction for a labelled batch, applying the style adapter per `gate`.
pub fn predict_batch(
    backbone: &Backbone,
    id: &AdapterSet,
    style: &AdapterSet,
    batch: &Batch,
    gate: StyleGate,
) -> Result<Matrix> {
    forward_gated(backbone, id, style, &batch.inputs, gate.style_active(batch.style_label))
}

/// `(1 / 2N) * sum_i |pred_i - target_i|^2`.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(shape_err(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let sq: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(sq / (2.0 * n as f64))
}

pub fn batch_loss(
    backbone: &Backbone,
    id: &AdapterSet,
    style: &AdapterSet,
    batch: &Batch,
    gate: StyleGate,
) -> Result<f64> {
    let pred = predict_batch(backbone, id, style, batch, gate)?;
    mse_loss(&pred, &batch.targets)
}

/// Gradient of the loss with respect to one adapter's factors at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrad {
    pub a: Matrix,
    pub b: Matrix,
}

/// Closed-form gradients for the adapter selected by `which`, one entry per
/// site. The other adapter is treated as a constant. If the gate switches the
/// style adapter off for this batch, its gradient is exactly zero.
pub fn grad_adapter(
    backbone: &Backbone,
    id: &AdapterSet,
    style: &AdapterSet,
    batch: &Batch,
    which: AdapterRole,
    gate: StyleGate,
) -> Result<Vec<FactorGrad>> {
    let style_on = gate.style_active(batch.style_label);
    let pred = forward_gated(backbone, id, style, &batch.inputs, style_on)?;
    if pred.dim() != batch.targets.dim() {
        return Err(shape_err(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            batch.targets.dim()
        )));
    }
    let selected = match which {
        AdapterRole::Identity => id,
        AdapterRole::Style => style,
    };
    let zero = |ad: &LoraAdapter| FactorGrad {
        a: Matrix::zeros(ad.a().dim()),
        b: Matrix::zeros(ad.b().dim()),
    };
    if which == AdapterRole::Style && !style_on {
        return Ok(selected.sites.iter().map(zero).collect());
    }
    let n = batch.len();
    if n == 0 {
        return Ok(selected.sites.iter().map(zero).collect());
    }
    let residual = pred - &batch.targets;
    let d_out = backbone.d_out();
    let grads = selected
        .sites
        .iter()
        .enumerate()
        .map(|(l, ad)| {
            let r = residual.slice(s![.., l * d_out..(l + 1) * d_out]);
            // dL/d(delta) = (1/N) R^T X
            let g = r.t().dot(&batch.inputs) / n as f64;
            let scale = ad.scale();
            FactorGrad {
                a: ad.b().t().dot(&g) * scale,
                b: g.dot(&ad.a().t()) * scale,
            }
        })
        .collect();
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(role: AdapterRole, a: Matrix, b: Matrix, alpha: f64) -> AdapterSet {
        AdapterSet::new(role, vec![LoraAdapter::from_factors(a, b, alpha).unwrap()])
    }

    fn zero_set(role: AdapterRole, d_out: usize, d_in: usize) -> AdapterSet {
        AdapterSet::new(role, vec![LoraAdapter::zeros(d_out, d_in, 1, 1.0).unwrap()])
    }

    #[test]
    fn identity_backbone_with_zero_adapters_is_identity() {
        let bb = Backbone::new(vec![Matrix::eye(3)]).unwrap();
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]];
        let y = forward(&bb, &zero_set(AdapterRole::Identity, 3, 3), &zero_set(AdapterRole::Style, 3, 3), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn style_delta_acts_alone() {
        let bb = Backbone::new(vec![Matrix::zeros((1, 1))]).unwrap();
        let style = single(AdapterRole::Style, array![[1.0]], array![[1.0]], 1.0);
        let y = forward(&bb, &zero_set(AdapterRole::Identity, 1, 1), &style, &array![[1.0]]).unwrap();
        assert_eq!(y, array![[1.0]]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let bb = Backbone::new(vec![array![[1.0, 2.0], [3.0, 4.0]]]).unwrap();
        let style = single(AdapterRole::Style, array![[1.0, 1.0]], array![[2.0], [1.0]], 1.0);
        let y = forward(&bb, &zero_set(AdapterRole::Identity, 2, 2), &style, &Matrix::zeros((3, 2))).unwrap();
        assert_eq!(y, Matrix::zeros((3, 2)));
    }

    #[test]
    fn mse_examples() {
        let p = array![[1.0, 2.0]];
        assert_eq!(mse_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(mse_loss(&array![[1.0]], &array![[2.0]]).unwrap(), 0.5);
        let t = array![[0.0, 0.0]];
        let l1 = mse_loss(&p, &t).unwrap();
        let l2 = mse_loss(&(&p * 2.0), &t).unwrap();
        assert!((l2 - 4.0 * l1).abs() < 1e-12);
        assert!(mse_loss(&p, &array![[1.0]]).is_err());
    }

    #[test]
    fn hand_chain_rule_example() {
        let bb = Backbone::new(vec![Matrix::zeros((1, 1))]).unwrap();
        let id = zero_set(AdapterRole::Identity, 1, 1);
        let style = single(AdapterRole::Style, array![[1.0]], array![[1.0]], 1.0);
        let batch = Batch { inputs: array![[1.0]], targets: array![[2.0]], style_label: StyleLabel::Cluster(0) };
        let g = grad_adapter(&bb, &id, &style, &batch, AdapterRole::Style, StyleGate::ExpressiveOnly).unwrap();
        assert_eq!(g[0].a, array![[-1.0]]);
        assert_eq!(g[0].b, array![[-1.0]]);
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let bb = Backbone::new(vec![array![[2.0, 0.0], [1.0, 1.0]]]).unwrap();
        let id = single(AdapterRole::Identity, array![[1.0, 0.5]], array![[0.3], [0.2]], 1.0);
        let style = zero_set(AdapterRole::Style, 2, 2);
        let x = array![[1.0, 2.0], [0.5, -1.0]];
        let y = forward(&bb, &id, &style, &x).unwrap();
        let batch = Batch { inputs: x, targets: y, style_label: StyleLabel::Neutral };
        for role in [AdapterRole::Identity, AdapterRole::Style] {
            for g in grad_adapter(&bb, &id, &style, &batch, role, StyleGate::Always).unwrap() {
                assert!(g.a.iter().chain(g.b.iter()).all(|v| v.abs() < 1e-14));
            }
        }
    }

    #[test]
    fn neutral_batch_blocks_style_gradient() {
        let bb = Backbone::new(vec![Matrix::zeros((1, 1))]).unwrap();
        let id = zero_set(AdapterRole::Identity, 1, 1);
        let style = single(AdapterRole::Style, array![[1.0]], array![[1.0]], 1.0);
        let batch = Batch { inputs: array![[1.0]], targets: array![[2.0]], style_label: StyleLabel::Neutral };
        let g = grad_adapter(&bb, &id, &style, &batch, AdapterRole::Style, StyleGate::ExpressiveOnly).unwrap();
        assert_eq!(g[0].a, array![[0.0]]);
        // with the gate open the same batch does train style
        let g = grad_adapter(&bb, &id, &style, &batch, AdapterRole::Style, StyleGate::Always).unwrap();
        assert_eq!(g[0].a, array![[-1.0]]);
    }

    #[test]
    fn forward_is_linear_in_x() {
        let bb = Backbone::new(vec![array![[1.0, -1.0], [0.5, 2.0]]]).unwrap();
        let id = single(AdapterRole::Identity, array![[1.0, 0.5]], array![[0.3], [0.2]], 2.0);
        let style = single(AdapterRole::Style, array![[0.2, 0.1]], array![[1.0], [-1.0]], 2.0);
        let x1 = array![[1.0, 2.0]];
        let x2 = array![[-3.0, 0.5]];
        let lhs = forward(&bb, &id, &style, &(&x1 * 2.0 + &x2)).unwrap();
        let rhs = forward(&bb, &id, &style, &x1).unwrap() * 2.0 + forward(&bb, &id, &style, &x2).unwrap();
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_site_outputs_are_side_by_side() {
        let bb = Backbone::new(vec![Matrix::eye(2), Matrix::eye(2) * 3.0]).unwrap();
        let id = AdapterSet::new(AdapterRole::Identity, vec![LoraAdapter::zeros(2, 2, 1, 1.0).unwrap(); 2]);
        let style = AdapterSet::new(AdapterRole::Style, vec![LoraAdapter::zeros(2, 2, 1, 1.0).unwrap(); 2]);
        let y = forward(&bb, &id, &style, &array![[1.0, 2.0]]).unwrap();
        assert_eq!(y, array![[1.0, 2.0, 3.0, 6.0]]);
        let wrong = AdapterSet::new(AdapterRole::Style, vec![LoraAdapter::zeros(2, 2, 1, 1.0).unwrap()]);
        assert!(forward(&bb, &id, &wrong, &array![[1.0, 2.0]]).is_err());
    }
}
