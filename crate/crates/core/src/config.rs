//! Experiment configuration, read from a flat TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::gmm::Point;
use crate::noise::{NoiseKind, NoiseSpec};
use crate::select::{BranchPolicy, DivisionContext, RoleAnchors, Thresholds};
use crate::trainer::DstParams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Dst,
    /// Cross-entropy on the noisy labels for every epoch.
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisabledBranch {
    Labeled,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub data_seed: u64,

    pub noise_kind: NoiseKind,
    pub noise_ratio: f64,
    pub noise_seed: u64,

    pub hidden: Vec<usize>,

    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied to the learning rate every `lr_decay_period` epochs.
    pub lr_decay: f64,
    pub lr_decay_period: usize,
    pub momentum: f64,
    pub weight_decay: f64,

    pub tau_labeled: f64,
    pub tau_predicted: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub lambda_reg: f64,
    pub anchor_labeled: Point,
    pub anchor_predicted: Point,
    pub anchor_wrong: Point,
    pub gmm_tol: f64,
    pub gmm_max_iter: usize,

    pub method: Method,
    pub no_mixup: bool,
    pub single_network: bool,
    pub disable_branch: Option<DisabledBranch>,
    pub all_wrong: bool,

    pub master_seed: u64,
    /// Write loss scatter files every this many epochs; the last epoch is
    /// always written. 0 writes only the last epoch.
    pub scatter_every: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let anchors = RoleAnchors::default();
        ExperimentConfig {
            classes: 4,
            per_class: 1000,
            test_per_class: 1000,
            dim: 2,
            spread: 0.5,
            data_seed: 7,
            noise_kind: NoiseKind::SymC1,
            noise_ratio: 0.5,
            noise_seed: 8,
            hidden: vec![64, 64],
            warmup_epochs: 15,
            total_epochs: 120,
            batch_size: 128,
            lr: 0.02,
            lr_decay: 0.2,
            lr_decay_period: 80,
            momentum: 0.9,
            weight_decay: 5e-4,
            tau_labeled: 0.5,
            tau_predicted: 0.5,
            temperature: 0.5,
            alpha: 4.0,
            lambda_reg: 1.0,
            anchor_labeled: anchors.labeled,
            anchor_predicted: anchors.predicted,
            anchor_wrong: anchors.wrong,
            gmm_tol: 20.0,
            gmm_max_iter: 100,
            method: Method::Dst,
            no_mixup: false,
            single_network: false,
            disable_branch: None,
            all_wrong: false,
            master_seed: 1,
            scatter_every: 10,
            output_dir: None,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn finite_point(p: Point) -> bool {
    p.iter().all(|v| v.is_finite())
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::noise::not_found_or_io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check(self.classes >= 2, || format!("classes must be >= 2, got {}", self.classes))?;
        check(self.per_class >= 1, || "per_class must be >= 1".into())?;
        check(self.test_per_class >= 1, || "test_per_class must be >= 1".into())?;
        check(self.dim >= 1, || "dim must be >= 1".into())?;
        check(self.spread > 0.0 && self.spread.is_finite(), || format!("spread must be > 0, got {}", self.spread))?;
        check((0.0..=1.0).contains(&self.noise_ratio), || {
            format!("noise_ratio must be in [0, 1], got {}", self.noise_ratio)
        })?;
        check(self.hidden.iter().all(|h| *h >= 1), || "hidden layer widths must be >= 1".into())?;
        check(self.warmup_epochs >= 1, || "warmup_epochs must be >= 1".into())?;
        check(self.warmup_epochs < self.total_epochs, || {
            format!("warmup_epochs ({}) must be below total_epochs ({})", self.warmup_epochs, self.total_epochs)
        })?;
        check(self.lr > 0.0 && self.lr.is_finite(), || format!("lr must be > 0, got {}", self.lr))?;
        check(self.lr_decay > 0.0 && self.lr_decay <= 1.0, || {
            format!("lr_decay must be in (0, 1], got {}", self.lr_decay)
        })?;
        check(self.lr_decay_period >= 1, || "lr_decay_period must be >= 1".into())?;
        check((0.0..1.0).contains(&self.momentum), || format!("momentum must be in [0, 1), got {}", self.momentum))?;
        check(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), || {
            format!("weight_decay must be >= 0, got {}", self.weight_decay)
        })?;
        check(
            finite_point(self.anchor_labeled) && finite_point(self.anchor_predicted) && finite_point(self.anchor_wrong),
            || "anchors must be finite".into(),
        )?;
        check(self.gmm_tol >= 0.0 && self.gmm_tol.is_finite(), || "gmm_tol must be >= 0".into())?;
        check(self.gmm_max_iter >= 1, || "gmm_max_iter must be >= 1".into())?;
        check(!(self.all_wrong && self.disable_branch.is_some()), || {
            "all_wrong and disable_branch are mutually exclusive".into()
        })?;
        self.dst_params().validate()
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec { kind: self.noise_kind, ratio: self.noise_ratio }
    }

    /// Layer widths from input to output.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.dim];
        sizes.extend(&self.hidden);
        sizes.push(self.classes);
        sizes
    }

    /// Learning rate in effect during epoch `epoch` (0-based, warmup included).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = i32::try_from(epoch / self.lr_decay_period).unwrap_or(i32::MAX);
        self.lr * self.lr_decay.powi(decays)
    }

    pub fn branch_policy(&self) -> BranchPolicy {
        match (self.all_wrong, self.disable_branch) {
            (true, _) => BranchPolicy::AllWrong,
            (false, Some(DisabledBranch::Labeled)) => BranchPolicy::DisableLabeled,
            (false, Some(DisabledBranch::Predicted)) => BranchPolicy::DisablePredicted,
            (false, None) => BranchPolicy::Normal,
        }
    }

    pub fn dst_params(&self) -> DstParams {
        DstParams {
            batch_size: self.batch_size,
            temperature: self.temperature,
            alpha: self.alpha,
            lambda_reg: self.lambda_reg,
            division: DivisionContext {
                anchors: RoleAnchors {
                    labeled: self.anchor_labeled,
                    predicted: self.anchor_predicted,
                    wrong: self.anchor_wrong,
                },
                tol: self.gmm_tol,
                max_iter: self.gmm_max_iter,
                thresholds: Thresholds { labeled: self.tau_labeled, predicted: self.tau_predicted },
                policy: self.branch_policy(),
            },
            mixup: !self.no_mixup,
            single_network: self.single_network,
        }
    }

    /// Whether scatter files are written for `epoch`.
    pub fn writes_scatter(&self, epoch: usize) -> bool {
        epoch + 1 == self.total_epochs || (self.scatter_every > 0 && (epoch + 1).is_multiple_of(self.scatter_every))
    }
}
