//! Per-sample loss pairs used for data selection.
//!
//! For each training sample a frozen network yields two cross-entropies:
//! against the dataset label (`l_nis`) and against its own argmax
//! prediction (`l_prd`). Both are then min-max scaled into the unit square.

use serde::{Deserialize, Serialize};

use crate::nn::{cross_entropy, Network, ProbVector};
use crate::noise::NoisyDataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub l_nis: f64,
    pub l_prd: f64,
    pub nrm_nis: f64,
    pub nrm_prd: f64,
    pub predicted_label: usize,
}

impl LossPoint {
    /// The normalized pair `(nis, prd)` as fed to the mixture fit.
    pub fn normalized(&self) -> [f64; 2] {
        [self.nrm_nis, self.nrm_prd]
    }
}

/// Loss pair of one softmax output against a dataset label.
pub fn loss_point(p: &ProbVector, label: usize) -> Result<LossPoint> {
    let classes = p.len();
    if label >= classes {
        return Err(Error::Shape(format!("label {label} >= {classes} classes")));
    }
    let predicted = p.argmax();
    Ok(LossPoint {
        l_nis: cross_entropy(p, &ProbVector::one_hot(label, classes))?,
        l_prd: cross_entropy(p, &ProbVector::one_hot(predicted, classes))?,
        nrm_nis: 0.0,
        nrm_prd: 0.0,
        predicted_label: predicted,
    })
}

/// Raw losses for every sample, in dataset order. Normalized fields are left
/// at zero; see [`normalize`].
pub fn profile(net: &Network, ds: &NoisyDataset) -> Result<Vec<LossPoint>> {
    if net.input_dim() != ds.dim() || net.output_dim() != ds.classes() {
        return Err(Error::Shape(format!(
            "network {:?} does not fit a {}-d, {}-class dataset",
            net.sizes(),
            ds.dim(),
            ds.classes()
        )));
    }
    ds.samples().iter().zip(ds.noisy_labels()).map(|(s, y)| loss_point(&net.predict(&s.features)?, *y)).collect()
}

/// Maps values to `(v - min) / (max - min)`; a constant input maps to zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = hi - lo;
    if range.is_nan() || range <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Fills `nrm_nis` and `nrm_prd` by independent per-axis min-max scaling.
pub fn normalize(points: &mut [LossPoint]) -> Result<()> {
    if points.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: points.len() });
    }
    let nis = min_max(&points.iter().map(|p| p.l_nis).collect::<Vec<_>>());
    let prd = min_max(&points.iter().map(|p| p.l_prd).collect::<Vec<_>>());
    for ((p, a), b) in points.iter_mut().zip(nis).zip(prd) {
        p.nrm_nis = a;
        p.nrm_prd = b;
    }
    Ok(())
}

pub fn profile_normalized(net: &Network, ds: &NoisyDataset) -> Result<Vec<LossPoint>> {
    let mut points = profile(net, ds)?;
    normalize(&mut points)?;
    Ok(points)
}
