//! Experiment runs and their on-disk artifacts.
//!
//! A run directory holds:
//!
//! ```text
//! manifest.json                 config, seeds and artifact versions
//! dataset.csv, dataset.json     noisy training set and its sidecar
//! epochs/epoch_NNN.json         per-epoch report
//! checkpoints/epoch_NNN_netK.bin
//! scatter/epoch_NNN_netK.csv    loss profile of net K after epoch NNN
//! selection/epoch_NNN_netK.csv  division that trained net K during epoch NNN
//! summary.json                  best / last accuracies and final selection
//! ```
//!
//! Epochs are numbered from 0 and include warmup.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::gmm::GmmModel;
use crate::nn::{read_checkpoint, write_checkpoint, Network, CHECKPOINT_VERSION};
use crate::noise::{
    audit_states, inject, make_blobs_split, read_dataset, write_dataset, CleanDataset, NoisyDataset, SampleState,
    DATASET_FORMAT_VERSION,
};
use crate::profile::{profile_normalized, LossPoint};
use crate::select::{selection_report, Branch, Division, RoleMap, SelectionReport};
use crate::trainer::{
    accuracy, ce_epoch, dst_epoch, ensemble_accuracy, warmup, DstEpochOutcome, NetworkPair, TrainRngs,
};
use crate::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const SUMMARY_FORMAT_VERSION: u32 = 1;

/// Number of trailing epochs averaged into the "last" accuracy.
pub const LAST_WINDOW: usize = 10;

pub const SCATTER_HEADER: [&str; 9] = ["epoch", "net", "id", "l_nis", "l_prd", "nrm_nis", "nrm_prd", "pred", "state"];
pub const SELECTION_HEADER: [&str; 7] = ["id", "source_net", "branch", "w_r", "w_prd", "pred", "state"];

/// File layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn dataset_csv(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn epoch_report(&self, epoch: usize) -> PathBuf {
        self.root.join("epochs").join(format!("epoch_{epoch:03}.json"))
    }

    pub fn checkpoint(&self, epoch: usize, net: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch_{epoch:03}_net{net}.bin"))
    }

    pub fn scatter(&self, epoch: usize, net: usize) -> PathBuf {
        self.root.join("scatter").join(format!("epoch_{epoch:03}_net{net}.csv"))
    }

    pub fn selection(&self, epoch: usize, net: usize) -> PathBuf {
        self.root.join("selection").join(format!("epoch_{epoch:03}_net{net}.csv"))
    }

    fn create(&self) -> Result<()> {
        if self.root.exists() {
            let mut entries = fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
            if entries.next().is_some() {
                return Err(Error::Config(format!(
                    "output directory {} already exists and is not empty",
                    self.root.display()
                )));
            }
        }
        for sub in ["epochs", "checkpoints", "scatter", "selection"] {
            let p = self.root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub dataset_format_version: u32,
    pub checkpoint_version: u32,
    pub report_format_version: u32,
    pub summary_format_version: u32,
    pub train_samples: usize,
    pub test_samples: usize,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Dst,
    Ce,
}

/// Test accuracy of each network and of the model used for prediction: the
/// two-network ensemble, or network 1 alone in single-network mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub net1: f64,
    pub net2: f64,
    pub model: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivisionReport {
    pub source_net: usize,
    pub gmm: GmmModel,
    pub roles: RoleMap,
    pub selection: SelectionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetEpochReport {
    pub net: usize,
    pub mean_loss: f64,
    pub division: Option<DivisionReport>,
    /// Set when the mixture fit failed and the network trained with plain
    /// cross-entropy instead.
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub format_version: u32,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub test_accuracy: Accuracies,
    pub train: Vec<NetEpochReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSelection {
    pub trained_net: usize,
    pub source_net: usize,
    pub report: SelectionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub format_version: u32,
    pub status: RunStatus,
    pub error: Option<String>,
    pub method: Method,
    pub epochs_completed: usize,
    /// `{net1,net2,model}.{best,last,final}` test accuracies.
    pub metrics: BTreeMap<String, f64>,
    /// Divisions used during the last completed epoch, if it was a DST epoch.
    pub final_selection: Vec<FinalSelection>,
    pub fallback_epochs: usize,
}

impl Summary {
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| crate::noise::not_found_or_io(path, e))?;
        let summary: Summary =
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if summary.format_version != SUMMARY_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "{}: summary format version {} (expected {SUMMARY_FORMAT_VERSION})",
                path.display(),
                summary.format_version
            )));
        }
        Ok(summary)
    }
}

fn metrics_from_history(history: &[Accuracies]) -> BTreeMap<String, f64> {
    let mut metrics = BTreeMap::new();
    if history.is_empty() {
        return metrics;
    }
    let window = &history[history.len().saturating_sub(LAST_WINDOW)..];
    type Getter = fn(&Accuracies) -> f64;
    let pick: [(&str, Getter); 3] = [("net1", |a| a.net1), ("net2", |a| a.net2), ("model", |a| a.model)];
    for (name, get) in pick {
        let best = history.iter().map(get).fold(f64::NEG_INFINITY, f64::max);
        let last = window.iter().map(get).sum::<f64>() / window.len() as f64;
        metrics.insert(format!("{name}.best"), best);
        metrics.insert(format!("{name}.last"), last);
        metrics.insert(format!("{name}.final"), get(history.last().expect("non-empty")));
    }
    metrics
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn finish_csv(w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<()> {
    w.into_inner().map_err(|e| Error::io(path, e.into_error()))?.flush().map_err(|e| Error::io(path, e))
}

/// Writes a loss-profile scatter file.
pub fn write_scatter(path: &Path, epoch: usize, net: usize, points: &[LossPoint], ds: &NoisyDataset) -> Result<()> {
    let predicted: Vec<usize> = points.iter().map(|p| p.predicted_label).collect();
    let states = audit_states(ds, &predicted)?;
    let mut w = csv_writer(path)?;
    w.write_record(SCATTER_HEADER)?;
    for (id, (p, s)) in points.iter().zip(&states).enumerate() {
        w.write_record([
            epoch.to_string(),
            net.to_string(),
            id.to_string(),
            p.l_nis.to_string(),
            p.l_prd.to_string(),
            p.nrm_nis.to_string(),
            p.nrm_prd.to_string(),
            p.predicted_label.to_string(),
            s.as_str().to_string(),
        ])?;
    }
    finish_csv(w, path)
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Labeled => "labeled",
        Branch::Predicted => "predicted",
        Branch::Wrong => "wrong",
    }
}

fn write_selection(path: &Path, division: &Division, source: &[LossPoint], ds: &NoisyDataset) -> Result<()> {
    let predicted: Vec<usize> = source.iter().map(|p| p.predicted_label).collect();
    let states = audit_states(ds, &predicted)?;
    let mut w = csv_writer(path)?;
    w.write_record(SELECTION_HEADER)?;
    for (id, ((b, wt), s)) in division.branches.iter().zip(&division.weights).zip(&states).enumerate() {
        w.write_record([
            id.to_string(),
            division.source_net.to_string(),
            branch_name(*b).to_string(),
            wt.w_r.to_string(),
            wt.w_prd.to_string(),
            predicted[id].to_string(),
            s.as_str().to_string(),
        ])?;
    }
    finish_csv(w, path)
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: RunDir,
    pub summary: Summary,
}

struct Session<'a> {
    cfg: &'a ExperimentConfig,
    dir: RunDir,
    ds: NoisyDataset,
    test: CleanDataset,
    pair: NetworkPair,
    rngs: TrainRngs,
    history: Vec<Accuracies>,
    final_selection: Vec<FinalSelection>,
    fallback_epochs: usize,
}

impl Session<'_> {
    fn accuracies(&self) -> Result<Accuracies> {
        let net1 = accuracy(self.pair.net(1), &self.test)?;
        let net2 = accuracy(self.pair.net(2), &self.test)?;
        let model = if self.cfg.single_network { net1 } else { ensemble_accuracy(&self.pair, &self.test)? };
        Ok(Accuracies { net1, net2, model })
    }

    fn phase(&self, epoch: usize) -> Phase {
        match self.cfg.method {
            _ if epoch < self.cfg.warmup_epochs => Phase::Warmup,
            Method::Ce => Phase::Ce,
            Method::Dst => Phase::Dst,
        }
    }

    fn train_epoch(&mut self, epoch: usize, phase: Phase) -> Result<Vec<NetEpochReport>> {
        let cfg = self.cfg;
        match phase {
            Phase::Warmup => {
                warmup(&mut self.pair, &self.ds, 1, cfg.batch_size, cfg.single_network, &mut self.rngs)?;
                Ok(Vec::new())
            }
            Phase::Ce => {
                let nets: &[usize] = if cfg.single_network { &[1] } else { &[1, 2] };
                let mut out = Vec::new();
                for &n in nets {
                    let loss = ce_epoch_for(&mut self.pair, n, &self.ds, cfg.batch_size, &mut self.rngs)?;
                    out.push(NetEpochReport { net: n, mean_loss: loss, division: None, fallback: None });
                }
                Ok(out)
            }
            Phase::Dst => {
                let outcome = dst_epoch(&mut self.pair, &self.ds, &cfg.dst_params(), &mut self.rngs)?;
                self.report_dst(epoch, outcome)
            }
        }
    }

    fn report_dst(&mut self, epoch: usize, outcome: DstEpochOutcome) -> Result<Vec<NetEpochReport>> {
        let mut reports = Vec::new();
        self.final_selection.clear();
        let mut fell_back = false;
        for u in outcome.updates {
            let report = match u.division {
                Ok(d) => {
                    let source = &outcome.profiles[d.source_net - 1];
                    let predicted: Vec<usize> = source.iter().map(|p| p.predicted_label).collect();
                    let selection = selection_report(&d.branches, &self.ds, &predicted)?;
                    if self.cfg.writes_scatter(epoch) {
                        write_selection(&self.dir.selection(epoch, u.net), &d, source, &self.ds)?;
                    }
                    self.final_selection.push(FinalSelection {
                        trained_net: u.net,
                        source_net: d.source_net,
                        report: selection,
                    });
                    NetEpochReport {
                        net: u.net,
                        mean_loss: u.mean_loss,
                        division: Some(DivisionReport {
                            source_net: d.source_net,
                            gmm: d.model,
                            roles: d.roles,
                            selection,
                        }),
                        fallback: None,
                    }
                }
                Err(msg) => {
                    fell_back = true;
                    NetEpochReport { net: u.net, mean_loss: u.mean_loss, division: None, fallback: Some(msg) }
                }
            };
            reports.push(report);
        }
        self.fallback_epochs += usize::from(fell_back);
        Ok(reports)
    }

    fn epoch(&mut self, epoch: usize) -> Result<()> {
        let lr = self.cfg.lr_at(epoch);
        self.pair.set_lr(lr);
        let phase = self.phase(epoch);
        if phase != Phase::Dst {
            self.final_selection.clear();
        }
        let train = self.train_epoch(epoch, phase)?;
        let test_accuracy = self.accuracies()?;
        for n in 1..=2 {
            write_checkpoint(self.pair.net(n), &self.dir.checkpoint(epoch, n))?;
            if self.cfg.writes_scatter(epoch) {
                let points = profile_normalized(self.pair.net(n), &self.ds)?;
                write_scatter(&self.dir.scatter(epoch, n), epoch, n, &points, &self.ds)?;
            }
        }
        write_json(
            &self.dir.epoch_report(epoch),
            &EpochReport { format_version: REPORT_FORMAT_VERSION, epoch, phase, lr, test_accuracy, train },
        )?;
        self.history.push(test_accuracy);
        Ok(())
    }

    fn summary(&self, error: Option<String>) -> Summary {
        Summary {
            format_version: SUMMARY_FORMAT_VERSION,
            status: if error.is_some() { RunStatus::Failed } else { RunStatus::Completed },
            error,
            method: self.cfg.method,
            epochs_completed: self.history.len(),
            metrics: metrics_from_history(&self.history),
            final_selection: self.final_selection.clone(),
            fallback_epochs: self.fallback_epochs,
        }
    }
}

fn ce_epoch_for(
    pair: &mut NetworkPair,
    n: usize,
    ds: &NoisyDataset,
    batch_size: usize,
    rngs: &mut TrainRngs,
) -> Result<f64> {
    let k = n - 1;
    let (nets, opts) = (&mut pair.nets, &mut pair.opts);
    ce_epoch(&mut nets[k], &mut opts[k], ds, batch_size, rngs.shuffle_mut(n))
}

/// Generates the data, trains, and writes every artifact into `out_dir`,
/// which must be absent or empty.
///
/// A failure after the run directory is set up leaves the artifacts written
/// so far, plus a summary with `status = failed`, and returns the error.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = RunDir::new(out_dir);
    dir.create()?;

    let (train, test) =
        make_blobs_split(cfg.classes, cfg.per_class, cfg.test_per_class, cfg.dim, cfg.spread, cfg.data_seed)?;
    let ds = inject(&train, cfg.noise(), cfg.noise_seed)?;
    write_dataset(&ds, &dir.dataset_csv(), &dir.dataset_manifest())?;
    write_json(
        &dir.manifest(),
        &RunManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            dataset_format_version: DATASET_FORMAT_VERSION,
            checkpoint_version: CHECKPOINT_VERSION,
            report_format_version: REPORT_FORMAT_VERSION,
            summary_format_version: SUMMARY_FORMAT_VERSION,
            train_samples: ds.len(),
            test_samples: test.len(),
            config: cfg.clone(),
        },
    )?;

    let pair = NetworkPair::init(&cfg.layer_sizes(), cfg.lr, cfg.momentum, cfg.weight_decay, cfg.master_seed)?;
    let mut session = Session {
        cfg,
        dir,
        ds,
        test,
        pair,
        rngs: TrainRngs::new(cfg.master_seed),
        history: Vec::new(),
        final_selection: Vec::new(),
        fallback_epochs: 0,
    };
    for epoch in 0..cfg.total_epochs {
        if let Err(e) = session.epoch(epoch) {
            let summary = session.summary(Some(format!("epoch {epoch}: {e}")));
            write_json(&session.dir.summary(), &summary)?;
            return Err(e);
        }
    }
    let summary = session.summary(None);
    write_json(&session.dir.summary(), &summary)?;
    Ok(RunOutcome { dir: session.dir, summary })
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = RunDir::new(dir).manifest();
    let text = fs::read_to_string(&path).map_err(|e| crate::noise::not_found_or_io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// Path of the scatter file for `epoch` and `net`, regenerating it from the
/// epoch checkpoint when it was not written during the run.
pub fn dump_scatter(dir: &Path, epoch: usize, net: usize) -> Result<PathBuf> {
    if !(1..=2).contains(&net) {
        return Err(Error::Config(format!("net must be 1 or 2, got {net}")));
    }
    let run = RunDir::new(dir);
    let path = run.scatter(epoch, net);
    if path.is_file() {
        return Ok(path);
    }
    let checkpoint = run.checkpoint(epoch, net);
    if !checkpoint.is_file() {
        return Err(Error::NotFound(checkpoint));
    }
    let net_params: Network = read_checkpoint(&checkpoint)?;
    let ds = read_dataset(&run.dataset_csv(), &run.dataset_manifest())?;
    let points = profile_normalized(&net_params, &ds)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_scatter(&path, epoch, net, &points, &ds)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub candidate: PathBuf,
    /// `candidate - baseline` per metric.
    pub deltas: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub baseline: PathBuf,
    pub rows: Vec<DeltaRow>,
}

pub fn summary_deltas(baseline: &Summary, candidate: &Summary) -> Result<BTreeMap<String, f64>> {
    if baseline.format_version != candidate.format_version {
        return Err(Error::Schema(format!(
            "summary format versions differ: {} vs {}",
            baseline.format_version, candidate.format_version
        )));
    }
    if !baseline.metrics.keys().eq(candidate.metrics.keys()) {
        return Err(Error::Schema("summaries report different metrics".into()));
    }
    Ok(baseline.metrics.iter().map(|(k, b)| (k.clone(), candidate.metrics[k] - b)).collect())
}

/// Per-metric deltas of each candidate summary against `baseline`. Paths
/// may name either a `summary.json` or a run directory.
pub fn compare(baseline: &Path, candidates: &[PathBuf]) -> Result<DeltaReport> {
    let resolve = |p: &Path| if p.is_dir() { RunDir::new(p).summary() } else { p.to_path_buf() };
    let base = Summary::load(&resolve(baseline))?;
    let rows = candidates
        .iter()
        .map(|c| {
            let summary = Summary::load(&resolve(c))?;
            Ok(DeltaRow { candidate: c.clone(), deltas: summary_deltas(&base, &summary)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DeltaReport { baseline: baseline.to_path_buf(), rows })
}

/// Reads a scatter file back as `(state, point)` rows.
pub fn read_scatter(path: &Path) -> Result<Vec<(SampleState, LossPoint)>> {
    let file = File::open(path).map_err(|e| crate::noise::not_found_or_io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    if reader.headers()?.iter().ne(SCATTER_HEADER) {
        return Err(Error::Schema(format!("{}: unexpected scatter header", path.display())));
    }
    let bad = |what: &str| Error::Schema(format!("{}: bad {what}", path.display()));
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(SCATTER_HEADER[i]));
        let state = SampleState::ALL.into_iter().find(|s| s.as_str() == &rec[8]).ok_or_else(|| bad("state"))?;
        rows.push((
            state,
            LossPoint {
                l_nis: f(3)?,
                l_prd: f(4)?,
                nrm_nis: f(5)?,
                nrm_prd: f(6)?,
                predicted_label: rec[7].parse().map_err(|_| bad("pred"))?,
            },
        ));
    }
    Ok(rows)
}
