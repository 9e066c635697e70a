//! Heteroscedastic uncertainty losses, log-variance parameterisation,
//! entropy/variance conversion, and volume error bars.
//!
//! Networks predict log variance `s = log sigma^2`; the exponential mapping
//! keeps variances positive. The base segmentation loss is the weighted
//! cross entropy `CE / (sigma^2 + eps) + log(sigma^2 + eps) / 2`, extended
//! to multiple variance channels through the variance sum law. All losses
//! reduce per-voxel terms by mean so scales are resolution-independent.

mod consistency;

pub use consistency::{
    box3, consistency_loss, consistency_loss_grad, ssim3_with_grad, DEFAULT_SSIM_LAMBDA,
};

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// Per-voxel, per-class logits; shape `[C, nx, ny, nz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitField {
    data: Array4<f64>,
}

impl LogitField {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("logits must be finite".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.data.dim().0
    }

    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        let (_, nx, ny, nz) = self.data.dim();
        (nx, ny, nz)
    }
}

/// Per-voxel log-variance channels: one task channel plus one channel per
/// augmentation mode. Total variance follows the variance sum law.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBundle {
    pub s_task: Array3<f64>,
    pub s_aug: Vec<Array3<f64>>,
}

impl UncertaintyBundle {
    pub fn new(s_task: Array3<f64>, s_aug: Vec<Array3<f64>>) -> Result<Self> {
        for ch in std::iter::once(&s_task).chain(s_aug.iter()) {
            if ch.dim() != s_task.dim() {
                return Err(Error::ShapeMismatch("bundle channel shapes differ".into()));
            }
            if ch.iter().any(|v| !v.is_finite() || v.exp() == 0.0 || !v.exp().is_finite()) {
                return Err(Error::InvalidParameter(
                    "log-variance channel must exponentiate to finite positive values".into(),
                ));
            }
        }
        Ok(Self { s_task, s_aug })
    }

    pub fn num_aug(&self) -> usize {
        self.s_aug.len()
    }

    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        self.s_task.dim()
    }

    /// `sigma^2 = exp(s_task) + sum_i exp(s_aug[i])` per voxel.
    pub fn total_variance(&self) -> Array3<f64> {
        let mut total = self.s_task.mapv(f64::exp);
        for ch in &self.s_aug {
            total.zip_mut_with(ch, |t, &s| *t += s.exp());
        }
        total
    }

    /// `sum_i exp(s_aug[i])` per voxel (task channel excluded).
    pub fn artefact_variance(&self) -> Array3<f64> {
        let mut total = Array3::zeros(self.s_task.dim());
        for ch in &self.s_aug {
            total.zip_mut_with(ch, |t, &s| *t += s.exp());
        }
        total
    }
}

/// Stabiliser schedule: eps starts at 0.05 and is halved on every loss
/// plateau (together with the learning rate) until it drops below the floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub epsilon: f64,
    pub floor: f64,
    /// moving-average window used for plateau detection, in iterations
    pub plateau_window: usize,
    /// relative improvement below which the loss counts as plateaued
    pub plateau_threshold: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            floor: 1e-3,
            plateau_window: 200,
            plateau_threshold: 0.01,
        }
    }
}

impl EpsilonSchedule {
    /// Halves eps if it is still at or above the floor. Returns true when a
    /// halving occurred (the caller halves the learning rate in lockstep).
    pub fn halve(&mut self) -> bool {
        if self.epsilon >= self.floor {
            self.epsilon /= 2.0;
            true
        } else {
            false
        }
    }
}

/// Scalar loss with its per-voxel terms.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub loss: f64,
    pub per_voxel: Array3<f64>,
}

/// Loss plus analytic gradients with respect to logits and every
/// log-variance channel.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub per_voxel: Array3<f64>,
    pub grad_logits: Array4<f64>,
    pub grad_s_task: Array3<f64>,
    pub grad_s_aug: Vec<Array3<f64>>,
}

fn check_shapes(logits: &LogitField, target: &LabelVolume, sigma2: &Array3<f64>) -> Result<()> {
    if logits.spatial_shape() != target.shape() || logits.spatial_shape() != sigma2.dim() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?}, target {:?}, sigma2 {:?}",
            logits.spatial_shape(),
            target.shape(),
            sigma2.dim()
        )));
    }
    if target.num_classes() > logits.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: (target.num_classes() - 1) as u8,
            num_classes: logits.num_classes(),
        });
    }
    Ok(())
}

/// Per-voxel class probabilities `softmax(f / sigma^2)`.
pub fn scaled_softmax(logits: &LogitField, sigma2: &Array3<f64>) -> Result<Array4<f64>> {
    if logits.spatial_shape() != sigma2.dim() {
        return Err(Error::ShapeMismatch("logits vs sigma2".into()));
    }
    if sigma2.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter("sigma2 must be finite and positive".into()));
    }
    let (c, nx, ny, nz) = logits.data().dim();
    let mut probs = Array4::zeros((c, nx, ny, nz));
    let mut scaled = vec![0.0; c];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let v = sigma2[[x, y, z]];
                for (ch, slot) in scaled.iter_mut().enumerate() {
                    *slot = logits.data()[[ch, x, y, z]] / v;
                }
                let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = scaled.iter().map(|&s| (s - m).exp()).sum();
                for ch in 0..c {
                    probs[[ch, x, y, z]] = (scaled[ch] - m).exp() / denom;
                }
            }
        }
    }
    Ok(probs)
}

/// Unscaled cross entropy per voxel plus the softmax probabilities.
fn cross_entropy_parts(
    logits: &LogitField,
    target: &LabelVolume,
) -> (Array3<f64>, Array4<f64>) {
    let (c, nx, ny, nz) = logits.data().dim();
    let mut ce = Array3::zeros((nx, ny, nz));
    let mut probs = Array4::zeros((c, nx, ny, nz));
    let mut row = vec![0.0; c];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                for (ch, slot) in row.iter_mut().enumerate() {
                    *slot = logits.data()[[ch, x, y, z]];
                }
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = row.iter().map(|&f| (f - m).exp()).sum();
                let lse = m + sum_exp.ln();
                let y_class = target.labels()[[x, y, z]] as usize;
                ce[[x, y, z]] = lse - row[y_class];
                for ch in 0..c {
                    probs[[ch, x, y, z]] = (row[ch] - m).exp() / sum_exp;
                }
            }
        }
    }
    (ce, probs)
}

/// Weighted cross entropy: per voxel `CE / (sigma^2 + eps) +
/// log(sigma^2 + eps) / 2`; the scalar is the voxel mean.
pub fn weighted_ce(
    logits: &LogitField,
    target: &LabelVolume,
    sigma2: &Array3<f64>,
    epsilon: f64,
) -> Result<LossValue> {
    check_shapes(logits, target, sigma2)?;
    if sigma2.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter("sigma2 must be positive".into()));
    }
    let (ce, _) = cross_entropy_parts(logits, target);
    let mut per_voxel = Array3::zeros(ce.dim());
    for (idx, pv) in per_voxel.indexed_iter_mut() {
        let v = sigma2[idx] + epsilon;
        *pv = ce[idx] / v + 0.5 * v.ln();
    }
    let loss = per_voxel.mean().unwrap_or(0.0);
    Ok(LossValue { loss, per_voxel })
}

/// Combined loss: weighted cross entropy with the summed variance
/// `sigma^2 = exp(s_task) + sum_i exp(s_aug[i])`.
pub fn combined_loss(
    logits: &LogitField,
    target: &LabelVolume,
    bundle: &UncertaintyBundle,
    epsilon: f64,
) -> Result<LossValue> {
    weighted_ce(logits, target, &bundle.total_variance(), epsilon)
}

/// Combined loss with analytic gradients over logits and all s-channels.
pub fn combined_loss_grad(
    logits: &LogitField,
    target: &LabelVolume,
    bundle: &UncertaintyBundle,
    epsilon: f64,
) -> Result<LossGrad> {
    let total = bundle.total_variance();
    check_shapes(logits, target, &total)?;
    if bundle.spatial_shape() != logits.spatial_shape() {
        return Err(Error::ShapeMismatch("bundle vs logits".into()));
    }
    let (ce, probs) = cross_entropy_parts(logits, target);
    let (c, nx, ny, nz) = logits.data().dim();
    let n = (nx * ny * nz) as f64;

    let mut per_voxel = Array3::zeros(ce.dim());
    let mut grad_logits = Array4::zeros((c, nx, ny, nz));
    // dL/dV per voxel, with V the stabilised total variance
    let mut dl_dv = Array3::zeros(ce.dim());
    for (idx, pv) in per_voxel.indexed_iter_mut() {
        let v = total[idx] + epsilon;
        *pv = ce[idx] / v + 0.5 * v.ln();
        dl_dv[idx] = (-ce[idx] / (v * v) + 0.5 / v) / n;
        let inv_v = 1.0 / v / n;
        let y_class = target.labels()[idx] as usize;
        for ch in 0..c {
            let onehot = if ch == y_class { 1.0 } else { 0.0 };
            grad_logits[[ch, idx.0, idx.1, idx.2]] = (probs[[ch, idx.0, idx.1, idx.2]] - onehot) * inv_v;
        }
    }
    let loss = per_voxel.mean().unwrap_or(0.0);

    let mut grad_s_task = Array3::zeros(ce.dim());
    for (idx, g) in grad_s_task.indexed_iter_mut() {
        *g = dl_dv[idx] * bundle.s_task[idx].exp();
    }
    let grad_s_aug = bundle
        .s_aug
        .iter()
        .map(|ch| {
            let mut g = Array3::zeros(ce.dim());
            for (idx, gv) in g.indexed_iter_mut() {
                *gv = dl_dv[idx] * ch[idx].exp();
            }
            g
        })
        .collect();

    Ok(LossGrad { loss, per_voxel, grad_logits, grad_s_task, grad_s_aug })
}

/// Per-augmentation teacher loss: two-channel combined loss plus the
/// consistency loss pinning `exp(s_task)` to the frozen pseudo label
/// `exp(pseudo_s_task)`. No gradient flows into the pseudo label.
#[allow(clippy::too_many_arguments)]
pub fn aug_loss(
    logits: &LogitField,
    target: &LabelVolume,
    s_task: &Array3<f64>,
    s_aug_i: &Array3<f64>,
    pseudo_s_task: &Array3<f64>,
    epsilon: f64,
    lambda: f64,
) -> Result<LossGrad> {
    if pseudo_s_task.dim() != s_task.dim() {
        return Err(Error::ShapeMismatch("pseudo label vs s_task".into()));
    }
    let bundle = UncertaintyBundle::new(s_task.clone(), vec![s_aug_i.clone()])?;
    let mut out = combined_loss_grad(logits, target, &bundle, epsilon)?;

    let pred_var = s_task.mapv(f64::exp);
    let target_var = pseudo_s_task.mapv(f64::exp);
    let (cons, cons_grad) = consistency_loss_grad(&pred_var, &target_var, lambda)?;
    out.loss += cons;
    // chain rule through sigma_t^2 = exp(s_task)
    out.grad_s_task
        .indexed_iter_mut()
        .for_each(|(idx, g)| *g += cons_grad[idx] * pred_var[idx]);
    Ok(out)
}

/// Diagnostic evaluation of the exact scaled-softmax negative log
/// likelihood (the unapproximated form the weighted cross entropy stands
/// in for). Not used for training.
pub fn exact_scaled_nll(
    logits: &LogitField,
    target: &LabelVolume,
    sigma2: &Array3<f64>,
) -> Result<LossValue> {
    check_shapes(logits, target, sigma2)?;
    let probs = scaled_softmax(logits, sigma2)?;
    let (nx, ny, nz) = logits.spatial_shape();
    let mut per_voxel = Array3::zeros((nx, ny, nz));
    for (idx, pv) in per_voxel.indexed_iter_mut() {
        let y_class = target.labels()[idx] as usize;
        *pv = -probs[[y_class, idx.0, idx.1, idx.2]].max(f64::MIN_POSITIVE).ln();
    }
    let loss = per_voxel.mean().unwrap_or(0.0);
    Ok(LossValue { loss, per_voxel })
}

/// Per-voxel Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy_map(probs: &Array4<f64>) -> Array3<f64> {
    let (c, nx, ny, nz) = probs.dim();
    let mut h = Array3::zeros((nx, ny, nz));
    for (idx, hv) in h.indexed_iter_mut() {
        let mut acc = 0.0;
        for ch in 0..c {
            let p = probs[[ch, idx.0, idx.1, idx.2]];
            if p > 0.0 {
                acc -= p * p.ln();
            }
        }
        *hv = acc;
    }
    h
}

/// Gaussian entropy-variance relation: `sigma^2 = exp(2H) / (2 pi e)`.
pub fn entropy_to_variance(h: f64) -> f64 {
    (2.0 * h).exp() / (2.0 * std::f64::consts::PI * std::f64::consts::E)
}

/// Inverse of [`entropy_to_variance`]: `H = ln(2 pi e sigma^2) / 2`.
pub fn variance_to_entropy(sigma2: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma2).ln()
}

/// Segmentation volume estimate with an entropy-derived error bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeErrorBars {
    /// soft foreground volume, in voxels
    pub volume: f64,
    /// error bar, in voxels
    pub sigma: f64,
    pub lower: f64,
    pub upper: f64,
    /// summed entropy-derived variance before reference subtraction
    pub raw_total_variance: f64,
}

/// Sums the foreground probability into a soft volume and converts per-voxel
/// predictive entropy into a variance total; the error bar is
/// `sqrt(max(0, total - clean_reference_variance))`.
pub fn volume_error_bars(
    probs: &Array4<f64>,
    foreground_class: usize,
    clean_reference_variance: f64,
) -> Result<VolumeErrorBars> {
    let (c, _, _, _) = probs.dim();
    if foreground_class >= c {
        return Err(Error::InvalidParameter(format!(
            "foreground class {foreground_class} out of range for {c} channels"
        )));
    }
    let volume: f64 = probs
        .index_axis(ndarray::Axis(0), foreground_class)
        .iter()
        .sum();
    let h = entropy_map(probs);
    let raw_total_variance: f64 = h.iter().map(|&hv| entropy_to_variance(hv)).sum();
    let net = (raw_total_variance - clean_reference_variance).max(0.0);
    let sigma = net.sqrt();
    Ok(VolumeErrorBars {
        volume,
        sigma,
        lower: volume - sigma,
        upper: volume + sigma,
        raw_total_variance,
    })
}
