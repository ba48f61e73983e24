//! Three-component bivariate Gaussian mixture fitted by EM.
//!
//! Initialization is fixed: means at the supplied anchors, covariances
//! `0.05 * I`, uniform weights. There is no internal randomness, so a fit is
//! a pure function of its inputs. Component order is never permuted; roles
//! are attached afterwards by [`crate::select::RoleMap`].

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const COMPONENTS: usize = 3;
/// Lower bound on every covariance eigenvalue.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Lower bound on every mixing weight.
pub const WEIGHT_FLOOR: f64 = 1e-6;
pub const INIT_VARIANCE: f64 = 0.05;
pub const MIN_POINTS: usize = 6;
/// Responsibility mass below which a component is not re-estimated.
const EMPTY_MASS: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Point,
    /// Symmetric positive definite.
    pub cov: [[f64; 2]; 2],
    pub weight: f64,
}

impl Component {
    /// `ln N(x; mean, cov)`.
    pub fn log_density(&self, x: Point) -> f64 {
        let [[a, b], [_, c]] = self.cov;
        let det = a * c - b * b;
        let dx = x[0] - self.mean[0];
        let dy = x[1] - self.mean[1];
        let maha = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        -LN_2PI - 0.5 * det.ln() - 0.5 * maha
    }

    pub fn min_eigenvalue(&self) -> f64 {
        eigen(self.cov).0[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: [Component; COMPONENTS],
    /// Number of M-steps performed.
    pub iterations: usize,
    /// Total (summed over points) log-likelihood of the returned parameters.
    pub log_likelihood: f64,
    /// Total log-likelihood before each M-step, ending with `log_likelihood`.
    pub ll_history: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub anchors: [Point; COMPONENTS],
    /// Stop once the total log-likelihood changes by less than this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { anchors: [[0.0, 0.0], [0.5, 0.5], [1.0, 0.0]], tol: 20.0, max_iter: 100 }
    }
}

/// Responsibilities of the three components for one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRow(pub [f64; COMPONENTS]);

impl PosteriorRow {
    pub fn argmax(&self) -> usize {
        crate::nn::argmax(&self.0)
    }
}

fn log_sum_exp(values: &[f64; COMPONENTS]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn weighted_log_densities(components: &[Component; COMPONENTS], x: Point) -> [f64; COMPONENTS] {
    std::array::from_fn(|k| components[k].weight.ln() + components[k].log_density(x))
}

/// Posterior responsibilities, computed in log space.
pub fn posterior(model: &GmmModel, point: Point) -> PosteriorRow {
    let logs = weighted_log_densities(&model.components, point);
    let total = log_sum_exp(&logs);
    let mut row: [f64; COMPONENTS] = std::array::from_fn(|k| (logs[k] - total).exp());
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|r| *r /= sum);
    PosteriorRow(row)
}

pub fn posteriors(model: &GmmModel, points: &[Point]) -> Vec<PosteriorRow> {
    points.iter().map(|p| posterior(model, *p)).collect()
}

/// Eigenvalues (descending) and the unit eigenvector of the larger one.
fn eigen(m: [[f64; 2]; 2]) -> ([f64; 2], [f64; 2]) {
    let [[a, b], [_, c]] = m;
    let half_tr = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (half_tr + disc, half_tr - disc);
    let v = if b.abs() > 0.0 {
        let (x, y) = (b, l1 - a);
        let n = x.hypot(y);
        [x / n, y / n]
    } else if a >= c {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    ([l1, l2], v)
}

/// Symmetrizes and clamps eigenvalues to at least `SIGMA_FLOOR`.
fn floor_covariance(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let off = 0.5 * (m[0][1] + m[1][0]);
    let sym = [[m[0][0], off], [off, m[1][1]]];
    let ([l1, l2], v) = eigen(sym);
    if l2 >= SIGMA_FLOOR {
        return sym;
    }
    let (l1, l2) = (l1.max(SIGMA_FLOOR), l2.max(SIGMA_FLOOR));
    let w = [-v[1], v[0]];
    let entry = |i: usize, j: usize| l1 * v[i] * v[j] + l2 * w[i] * w[j];
    let o = entry(0, 1);
    [[entry(0, 0), o], [o, entry(1, 1)]]
}

fn floor_weights(components: &mut [Component; COMPONENTS]) {
    for c in components.iter_mut() {
        c.weight = c.weight.max(WEIGHT_FLOOR);
    }
    let sum: f64 = components.iter().map(|c| c.weight).sum();
    for c in components.iter_mut() {
        c.weight /= sum;
    }
}

/// E-step: writes responsibilities into `resp` and returns the total
/// log-likelihood.
fn e_step(components: &[Component; COMPONENTS], points: &[Point], resp: &mut [[f64; COMPONENTS]]) -> f64 {
    let mut ll = 0.0;
    for (x, r) in points.iter().zip(resp.iter_mut()) {
        let logs = weighted_log_densities(components, *x);
        let total = log_sum_exp(&logs);
        ll += total;
        for k in 0..COMPONENTS {
            r[k] = (logs[k] - total).exp();
        }
    }
    ll
}

fn m_step(components: &mut [Component; COMPONENTS], points: &[Point], resp: &[[f64; COMPONENTS]]) {
    let n = points.len() as f64;
    for (k, comp) in components.iter_mut().enumerate() {
        let nk: f64 = resp.iter().map(|r| r[k]).sum();
        comp.weight = nk / n;
        if nk < EMPTY_MASS {
            // A (near-)empty component keeps its shape; only its weight is
            // floored. Leaving parameters unchanged cannot lower the EM bound.
            continue;
        }
        let mut mean = [0.0; 2];
        for (x, r) in points.iter().zip(resp) {
            mean[0] += r[k] * x[0];
            mean[1] += r[k] * x[1];
        }
        mean = [mean[0] / nk, mean[1] / nk];
        let mut cov = [[0.0; 2]; 2];
        for (x, r) in points.iter().zip(resp) {
            let d = [x[0] - mean[0], x[1] - mean[1]];
            cov[0][0] += r[k] * d[0] * d[0];
            cov[0][1] += r[k] * d[0] * d[1];
            cov[1][1] += r[k] * d[1] * d[1];
        }
        cov[1][0] = cov[0][1];
        for row in &mut cov {
            row.iter_mut().for_each(|v| *v /= nk);
        }
        comp.mean = mean;
        comp.cov = floor_covariance(cov);
    }
    floor_weights(components);
}

fn finite(components: &[Component; COMPONENTS]) -> bool {
    components.iter().all(|c| {
        c.weight.is_finite() && c.mean.iter().all(|v| v.is_finite()) && c.cov.iter().flatten().all(|v| v.is_finite())
    })
}

pub fn fit(points: &[Point], opts: &FitOptions) -> Result<GmmModel> {
    if points.len() < MIN_POINTS {
        return Err(Error::InsufficientData { needed: MIN_POINTS, got: points.len() });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite point passed to mixture fit".into()));
    }
    if opts.tol.is_nan() || opts.tol < 0.0 {
        return Err(Error::Config(format!("EM tolerance must be >= 0, got {}", opts.tol)));
    }
    for i in 0..COMPONENTS {
        for j in i + 1..COMPONENTS {
            if opts.anchors[i] == opts.anchors[j] {
                return Err(Error::Config(format!("anchors {i} and {j} coincide")));
            }
        }
    }

    let mut components = opts.anchors.map(|mean| Component {
        mean,
        cov: [[INIT_VARIANCE, 0.0], [0.0, INIT_VARIANCE]],
        weight: 1.0 / COMPONENTS as f64,
    });
    let mut resp = vec![[0.0; COMPONENTS]; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let ll = e_step(&components, points, &mut resp);
        if !ll.is_finite() {
            return Err(Error::Fit(format!("log-likelihood became {ll} after {iterations} iterations")));
        }
        let previous = history.last().copied();
        history.push(ll);
        if let Some(prev) = previous {
            if (ll - prev).abs() < opts.tol {
                converged = true;
                break;
            }
        }
        if iterations >= opts.max_iter {
            break;
        }
        m_step(&mut components, points, &resp);
        iterations += 1;
        if !finite(&components) {
            return Err(Error::Fit(format!("parameters collapsed at iteration {iterations}")));
        }
    }

    Ok(GmmModel {
        components,
        iterations,
        log_likelihood: *history.last().expect("at least one E-step"),
        ll_history: history,
        converged,
    })
}
