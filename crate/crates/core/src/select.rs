//! From mixture posteriors to per-sample selection weights and branches.

use serde::{Deserialize, Serialize};

use crate::gmm::{self, FitOptions, GmmModel, Point, PosteriorRow, COMPONENTS};
use crate::noise::{NoisyDataset, SampleState};
use crate::profile::LossPoint;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Labeled,
    Predicted,
    Wrong,
}

/// Reference points that give each mixture component its role. Axes are
/// `(normalized l_nis, normalized l_prd)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoleAnchors {
    pub labeled: Point,
    pub predicted: Point,
    pub wrong: Point,
}

impl Default for RoleAnchors {
    fn default() -> Self {
        RoleAnchors { labeled: [0.0, 0.0], predicted: [1.0, 0.0], wrong: [0.5, 0.5] }
    }
}

impl RoleAnchors {
    /// Initial means for the mixture fit, in component order
    /// `[labeled, wrong, predicted]`.
    pub fn fit_order(&self) -> [Point; COMPONENTS] {
        [self.labeled, self.wrong, self.predicted]
    }
}

/// Which mixture component plays which role. Always a bijection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleMap {
    pub labeled: usize,
    pub predicted: usize,
    pub wrong: usize,
}

fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(means: &[Point; COMPONENTS], free: &[bool; COMPONENTS], target: Point) -> usize {
    let mut best: Option<usize> = None;
    for k in 0..COMPONENTS {
        if !free[k] {
            continue;
        }
        match best {
            Some(b) if dist2(means[k], target) >= dist2(means[b], target) => {}
            _ => best = Some(k),
        }
    }
    best.expect("a free component remains")
}

/// Greedy nearest-anchor matching: labeled first, then predicted; the
/// remaining component is the wrong set. Ties go to the lower index.
pub fn assign_roles_with(model: &GmmModel, anchors: &RoleAnchors) -> RoleMap {
    let means = model.components.map(|c| c.mean);
    let mut free = [true; COMPONENTS];
    let labeled = nearest(&means, &free, anchors.labeled);
    free[labeled] = false;
    let predicted = nearest(&means, &free, anchors.predicted);
    free[predicted] = false;
    let wrong = free.iter().position(|f| *f).expect("one component left");
    RoleMap { labeled, predicted, wrong }
}

pub fn assign_roles(model: &GmmModel) -> RoleMap {
    assign_roles_with(model, &RoleAnchors::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionWeights {
    /// Probability of a correct dataset label.
    pub w_r: f64,
    /// Probability of a correct prediction.
    pub w_prd: f64,
}

pub fn weights_from_posteriors(rows: &[PosteriorRow], roles: RoleMap) -> Vec<SelectionWeights> {
    rows.iter().map(|r| SelectionWeights { w_r: r.0[roles.labeled], w_prd: r.0[roles.predicted] }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub labeled: f64,
    pub predicted: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { labeled: 0.5, predicted: 0.5 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("labeled", self.labeled), ("predicted", self.predicted)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} threshold must be in (0, 1), got {t}")));
            }
        }
        Ok(())
    }

    /// Labeled if `w_r >= tau_r`, else predicted if `w_prd >= tau_prd`, else wrong.
    pub fn branch(&self, w: SelectionWeights) -> Branch {
        if w.w_r >= self.labeled {
            Branch::Labeled
        } else if w.w_prd >= self.predicted {
            Branch::Predicted
        } else {
            Branch::Wrong
        }
    }
}

pub fn partition(weights: &[SelectionWeights], thresholds: Thresholds) -> Result<Vec<Branch>> {
    thresholds.validate()?;
    Ok(weights.iter().map(|w| thresholds.branch(*w)).collect())
}

/// Ablation routing applied after partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchPolicy {
    #[default]
    Normal,
    /// Samples that would be labeled are treated as wrong.
    DisableLabeled,
    /// Samples that would be predicted are treated as wrong.
    DisablePredicted,
    AllWrong,
}

impl BranchPolicy {
    pub fn route(self, b: Branch) -> Branch {
        match (self, b) {
            (BranchPolicy::AllWrong, _) => Branch::Wrong,
            (BranchPolicy::DisableLabeled, Branch::Labeled) => Branch::Wrong,
            (BranchPolicy::DisablePredicted, Branch::Predicted) => Branch::Wrong,
            (_, b) => b,
        }
    }
}

/// Everything needed to turn a loss profile into a division.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivisionContext {
    pub anchors: RoleAnchors,
    pub tol: f64,
    pub max_iter: usize,
    pub thresholds: Thresholds,
    pub policy: BranchPolicy,
}

impl Default for DivisionContext {
    fn default() -> Self {
        DivisionContext {
            anchors: RoleAnchors::default(),
            tol: 20.0,
            max_iter: 100,
            thresholds: Thresholds::default(),
            policy: BranchPolicy::Normal,
        }
    }
}

impl DivisionContext {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions { anchors: self.anchors.fit_order(), tol: self.tol, max_iter: self.max_iter }
    }
}

/// A data division computed from one network's losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Division {
    /// Network (1 or 2) whose losses produced this division.
    pub source_net: usize,
    pub model: GmmModel,
    pub roles: RoleMap,
    pub weights: Vec<SelectionWeights>,
    pub branches: Vec<Branch>,
}

pub fn divide(source_net: usize, points: &[LossPoint], ctx: &DivisionContext) -> Result<Division> {
    ctx.thresholds.validate()?;
    let xy: Vec<Point> = points.iter().map(LossPoint::normalized).collect();
    let model = gmm::fit(&xy, &ctx.fit_options())?;
    let roles = assign_roles_with(&model, &ctx.anchors);
    let weights = weights_from_posteriors(&gmm::posteriors(&model, &xy), roles);
    let branches = partition(&weights, ctx.thresholds)?.into_iter().map(|b| ctx.policy.route(b)).collect();
    Ok(Division { source_net, model, roles, weights, branches })
}

/// Divisions handed to each network. A fit failure is kept per network so
/// the trainer can fall back for that network alone.
#[derive(Debug)]
pub struct CoDivision {
    pub for_net1: Result<Division>,
    pub for_net2: Result<Division>,
}

impl CoDivision {
    pub fn swapped(self) -> Self {
        CoDivision { for_net1: self.for_net2, for_net2: self.for_net1 }
    }

    pub fn for_net(&self, net: usize) -> &Result<Division> {
        if net == 1 {
            &self.for_net1
        } else {
            &self.for_net2
        }
    }
}

/// The division fitted on network 1's losses trains network 2 and vice versa.
pub fn co_divide(profile_net1: &[LossPoint], profile_net2: &[LossPoint], ctx: &DivisionContext) -> Result<CoDivision> {
    if profile_net1.len() != profile_net2.len() {
        return Err(Error::Shape(format!("profiles cover {} and {} samples", profile_net1.len(), profile_net2.len())));
    }
    Ok(CoDivision { for_net2: divide(1, profile_net1, ctx), for_net1: divide(2, profile_net2, ctx) })
}

/// Single-network ablation: the network consumes its own division.
pub fn self_divide(profile: &[LossPoint], ctx: &DivisionContext) -> Result<Division> {
    divide(1, profile, ctx)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateHistogram {
    pub i: usize,
    pub ii: usize,
    pub iii: usize,
    pub iv: usize,
    pub v: usize,
}

impl StateHistogram {
    pub fn add(&mut self, s: SampleState) {
        match s {
            SampleState::I => self.i += 1,
            SampleState::II => self.ii += 1,
            SampleState::III => self.iii += 1,
            SampleState::IV => self.iv += 1,
            SampleState::V => self.v += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.i + self.ii + self.iii + self.iv + self.v
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    pub size: usize,
    /// Fraction of the branch meeting its ground-truth condition; `None` for
    /// an empty branch.
    pub precision: Option<f64>,
    /// Fraction of all samples meeting the condition that landed in the
    /// branch; `None` when no sample meets it.
    pub recall: Option<f64>,
    pub states: StateHistogram,
}

/// Ground-truth accounting of a partition.
///
/// Conditions: labeled branch, dataset label correct; predicted branch,
/// prediction correct; wrong branch, both label and prediction wrong.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub labeled: BranchStats,
    pub predicted: BranchStats,
    pub wrong: BranchStats,
    pub states: StateHistogram,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn selection_report(branches: &[Branch], ds: &NoisyDataset, predicted: &[usize]) -> Result<SelectionReport> {
    if branches.len() != ds.len() {
        return Err(Error::Shape(format!("{} branches for {} samples", branches.len(), ds.len())));
    }
    let states = crate::noise::audit_states(ds, predicted)?;
    let condition = |b: Branch, s: SampleState| match b {
        Branch::Labeled => matches!(s, SampleState::I | SampleState::II),
        Branch::Predicted => matches!(s, SampleState::I | SampleState::III),
        Branch::Wrong => matches!(s, SampleState::IV | SampleState::V),
    };

    let mut report = SelectionReport::default();
    for b in [Branch::Labeled, Branch::Predicted, Branch::Wrong] {
        let (mut size, mut hits, mut relevant) = (0, 0, 0);
        let mut hist = StateHistogram::default();
        for (branch, s) in branches.iter().zip(&states) {
            let ok = condition(b, *s);
            relevant += usize::from(ok);
            if *branch == b {
                size += 1;
                hits += usize::from(ok);
                hist.add(*s);
            }
        }
        let stats = BranchStats { size, precision: ratio(hits, size), recall: ratio(hits, relevant), states: hist };
        match b {
            Branch::Labeled => report.labeled = stats,
            Branch::Predicted => report.predicted = stats,
            Branch::Wrong => report.wrong = stats,
        }
    }
    for s in &states {
        report.states.add(*s);
    }
    Ok(report)
}
