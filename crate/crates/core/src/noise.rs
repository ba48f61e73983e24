//! Synthetic Gaussian-blob datasets and label-noise injection.
//!
//! The hidden true label is kept next to the (possibly corrupted) training
//! label so that every selection decision can be audited afterwards.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::seeded;
use crate::{Error, Result};

/// Distance between neighbouring class centres, in units of `spread`.
pub const CENTER_SEPARATION: f64 = 6.0;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub true_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleanDataset {
    samples: Vec<Sample>,
    classes: usize,
    dim: usize,
}

impl CleanDataset {
    pub fn new(samples: Vec<Sample>, classes: usize, dim: usize) -> Result<Self> {
        let mut seen = vec![false; classes];
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::Shape(format!("sample {i} has {} features, expected {dim}", s.features.len())));
            }
            if s.true_label >= classes {
                return Err(Error::Shape(format!("sample {i} label {} >= {classes}", s.true_label)));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("sample {i} has non-finite features")));
            }
            seen[s.true_label] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Shape(format!("class {c} has no samples")));
        }
        Ok(CleanDataset { samples, classes, dim })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Class centres evenly spaced on a circle lying in a random 2-D plane of the
/// feature space (a line when `dim == 1`), neighbours `CENTER_SEPARATION *
/// spread` apart.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobGeometry {
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
}

impl BlobGeometry {
    pub fn random<R: Rng + ?Sized>(classes: usize, dim: usize, spread: f64, rng: &mut R) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if dim == 0 {
            return Err(Error::Config("feature dimension must be >= 1".into()));
        }
        if !(spread > 0.0 && spread.is_finite()) {
            return Err(Error::Config(format!("spread must be > 0, got {spread}")));
        }
        let sep = CENTER_SEPARATION * spread;
        let centers = if dim == 1 {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mid = (classes - 1) as f64 / 2.0;
            (0..classes).map(|c| vec![sign * sep * (c as f64 - mid)]).collect()
        } else {
            let (u, v) = random_plane(dim, rng);
            let radius = sep / (2.0 * (std::f64::consts::PI / classes as f64).sin());
            (0..classes)
                .map(|c| {
                    let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                    let (s, co) = angle.sin_cos();
                    u.iter().zip(&v).map(|(a, b)| radius * (co * a + s * b)).collect()
                })
                .collect()
        };
        Ok(BlobGeometry { centers, spread })
    }

    /// `per_class` isotropic Gaussian draws around each centre, class by class.
    pub fn sample<R: Rng + ?Sized>(&self, per_class: usize, rng: &mut R) -> Result<CleanDataset> {
        if per_class == 0 {
            return Err(Error::Config("per_class must be >= 1".into()));
        }
        let dim = self.centers[0].len();
        let mut samples = Vec::with_capacity(per_class * self.centers.len());
        for (label, center) in self.centers.iter().enumerate() {
            for _ in 0..per_class {
                let features = center.iter().map(|m| m + self.spread * rng.sample::<f64, _>(StandardNormal)).collect();
                samples.push(Sample { features, true_label: label });
            }
        }
        CleanDataset::new(samples, self.centers.len(), dim)
    }
}

fn random_plane<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let gauss = |rng: &mut R| -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    loop {
        let mut u = gauss(rng);
        let mut v = gauss(rng);
        normalize(&mut u);
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(x, a)| *x -= dot * a);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            normalize(&mut v);
            return (u, v);
        }
    }
}

pub fn make_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<CleanDataset> {
    let mut rng = seeded(seed);
    BlobGeometry::random(classes, dim, spread, &mut rng)?.sample(per_class, &mut rng)
}

/// Train and held-out sets sharing one geometry. The training half is
/// identical to `make_blobs` with the same arguments.
pub fn make_blobs_split(
    classes: usize,
    per_class: usize,
    test_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<(CleanDataset, CleanDataset)> {
    let mut rng = seeded(seed);
    let geometry = BlobGeometry::random(classes, dim, spread, &mut rng)?;
    let train = geometry.sample(per_class, &mut rng)?;
    let test = geometry.sample(test_per_class, &mut rng)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// A label drawn uniformly from all classes, so it may stay correct.
    SymC1,
    /// A label drawn from the other `C - 1` classes.
    SymC2,
    /// Class-conditional flip to a designated partner class.
    Asym,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::SymC1 => "sym-c1",
            NoiseKind::SymC2 => "sym-c2",
            NoiseKind::Asym => "asym",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    clean: CleanDataset,
    noisy_labels: Vec<usize>,
    spec: NoiseSpec,
    seed: u64,
    /// Asymmetric flip target per class, `None` for untouched classes.
    mapping: Option<Vec<Option<usize>>>,
}

impl NoisyDataset {
    pub fn clean(&self) -> &CleanDataset {
        &self.clean
    }

    pub fn samples(&self) -> &[Sample] {
        self.clean.samples()
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy_labels
    }

    pub fn true_labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.clean.samples().iter().map(|s| s.true_label)
    }

    pub fn spec(&self) -> NoiseSpec {
        self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mapping(&self) -> Option<&[Option<usize>]> {
        self.mapping.as_deref()
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.clean.classes()
    }

    pub fn dim(&self) -> usize {
        self.clean.dim()
    }

    /// Fraction of samples whose training label differs from the truth.
    pub fn disagreement(&self) -> f64 {
        let wrong = self.noisy_labels.iter().zip(self.true_labels()).filter(|(y, t)| **y != *t).count();
        wrong as f64 / self.len() as f64
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("noise ratio must be in [0, 1], got {ratio}")));
    }
    Ok(())
}

/// `floor(ratio * n)`, robust to the representation error of `ratio`.
fn budget(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Relabels exactly `floor(ratio * N)` uniformly chosen samples with a label
/// drawn uniformly from all classes.
pub fn inject_symmetric_c1(ds: &CleanDataset, ratio: f64, seed: u64) -> Result<NoisyDataset> {
    check_ratio(ratio)?;
    let mut rng = seeded(seed);
    let mut labels: Vec<usize> = ds.samples().iter().map(|s| s.true_label).collect();
    for i in index::sample(&mut rng, ds.len(), budget(ratio, ds.len())) {
        labels[i] = rng.random_range(0..ds.classes());
    }
    Ok(NoisyDataset {
        clean: ds.clone(),
        noisy_labels: labels,
        spec: NoiseSpec { kind: NoiseKind::SymC1, ratio },
        seed,
        mapping: None,
    })
}

/// Relabels exactly `floor(ratio * N)` uniformly chosen samples with a label
/// drawn uniformly from the classes other than the true one.
pub fn inject_symmetric_c2(ds: &CleanDataset, ratio: f64, seed: u64) -> Result<NoisyDataset> {
    check_ratio(ratio)?;
    let mut rng = seeded(seed);
    let mut labels: Vec<usize> = ds.samples().iter().map(|s| s.true_label).collect();
    for i in index::sample(&mut rng, ds.len(), budget(ratio, ds.len())) {
        let t = labels[i];
        let k = rng.random_range(0..ds.classes() - 1);
        labels[i] = if k >= t { k + 1 } else { k };
    }
    Ok(NoisyDataset {
        clean: ds.clone(),
        noisy_labels: labels,
        spec: NoiseSpec { kind: NoiseKind::SymC2, ratio },
        seed,
        mapping: None,
    })
}

/// `c -> (c + 1) mod C` for every class.
pub fn cyclic_mapping(classes: usize) -> Vec<Option<usize>> {
    (0..classes).map(|c| Some((c + 1) % classes)).collect()
}

/// Flips each sample independently with probability `ratio` to the partner
/// class of its true label.
pub fn inject_asymmetric(ds: &CleanDataset, ratio: f64, mapping: &[Option<usize>], seed: u64) -> Result<NoisyDataset> {
    check_ratio(ratio)?;
    if mapping.len() != ds.classes() {
        return Err(Error::Config(format!("mapping covers {} classes, dataset has {}", mapping.len(), ds.classes())));
    }
    for (c, target) in mapping.iter().enumerate() {
        match target {
            Some(t) if *t == c => return Err(Error::Config(format!("asymmetric mapping sends class {c} to itself"))),
            Some(t) if *t >= ds.classes() => {
                return Err(Error::Config(format!("asymmetric mapping target {t} out of range")))
            }
            _ => {}
        }
    }
    let mut rng = seeded(seed);
    let labels = ds
        .samples()
        .iter()
        .map(|s| {
            // One draw per sample keeps the stream aligned across mappings.
            let flip = rng.random::<f64>() < ratio;
            match mapping[s.true_label] {
                Some(t) if flip => t,
                _ => s.true_label,
            }
        })
        .collect();
    Ok(NoisyDataset {
        clean: ds.clone(),
        noisy_labels: labels,
        spec: NoiseSpec { kind: NoiseKind::Asym, ratio },
        seed,
        mapping: Some(mapping.to_vec()),
    })
}

pub fn inject(ds: &CleanDataset, spec: NoiseSpec, seed: u64) -> Result<NoisyDataset> {
    match spec.kind {
        NoiseKind::SymC1 => inject_symmetric_c1(ds, spec.ratio, seed),
        NoiseKind::SymC2 => inject_symmetric_c2(ds, spec.ratio, seed),
        NoiseKind::Asym => inject_asymmetric(ds, spec.ratio, &cyclic_mapping(ds.classes()), seed),
    }
}

/// Agreement pattern among the dataset label `y`, the true label and the
/// model prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleState {
    /// Label and prediction both correct.
    #[serde(rename = "i")]
    I,
    /// Correct label, wrong prediction.
    #[serde(rename = "ii")]
    II,
    /// Wrong label, correct prediction.
    #[serde(rename = "iii")]
    III,
    /// Wrong label, wrong prediction equal to the label.
    #[serde(rename = "iv")]
    IV,
    /// Wrong label, wrong prediction different from the label.
    #[serde(rename = "v")]
    V,
}

impl SampleState {
    pub const ALL: [SampleState; 5] =
        [SampleState::I, SampleState::II, SampleState::III, SampleState::IV, SampleState::V];

    pub fn classify(label: usize, truth: usize, predicted: usize) -> Self {
        match (label == truth, predicted == truth) {
            (true, true) => SampleState::I,
            (true, false) => SampleState::II,
            (false, true) => SampleState::III,
            (false, false) if label == predicted => SampleState::IV,
            (false, false) => SampleState::V,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SampleState::I => "i",
            SampleState::II => "ii",
            SampleState::III => "iii",
            SampleState::IV => "iv",
            SampleState::V => "v",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SampleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn audit_states(ds: &NoisyDataset, predicted: &[usize]) -> Result<Vec<SampleState>> {
    if predicted.len() != ds.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", predicted.len(), ds.len())));
    }
    Ok(ds
        .noisy_labels()
        .iter()
        .zip(ds.true_labels())
        .zip(predicted)
        .map(|((y, t), p)| SampleState::classify(*y, t, *p))
        .collect())
}

/// Sidecar manifest stored next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub samples: usize,
    pub classes: usize,
    pub dim: usize,
    pub noise: NoiseSpec,
    pub noise_seed: u64,
    pub mapping: Option<Vec<Option<usize>>>,
}

/// Writes `id,true_label,noisy_label,f0..f{D-1}` plus a JSON sidecar.
pub fn write_dataset(ds: &NoisyDataset, csv_path: &Path, manifest_path: &Path) -> Result<()> {
    let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["id".to_string(), "true_label".into(), "noisy_label".into()];
    header.extend((0..ds.dim()).map(|d| format!("f{d}")));
    w.write_record(&header)?;
    for (i, (s, y)) in ds.samples().iter().zip(ds.noisy_labels()).enumerate() {
        let mut row = vec![i.to_string(), s.true_label.to_string(), y.to_string()];
        row.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        samples: ds.len(),
        classes: ds.classes(),
        dim: ds.dim(),
        noise: ds.spec(),
        noise_seed: ds.seed(),
        mapping: ds.mapping.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
}

pub fn read_dataset(csv_path: &Path, manifest_path: &Path) -> Result<NoisyDataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| not_found_or_io(manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "dataset format version {} (expected {DATASET_FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let file = File::open(csv_path).map_err(|e| not_found_or_io(csv_path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let width = 3 + manifest.dim;
    if reader.headers()?.len() != width {
        return Err(Error::Schema(format!("dataset CSV should have {width} columns")));
    }
    let parse_err = |what: &str| Error::Schema(format!("bad {what} in dataset CSV"));
    let mut samples = Vec::with_capacity(manifest.samples);
    let mut labels = Vec::with_capacity(manifest.samples);
    for record in reader.records() {
        let record = record?;
        let true_label = record[1].parse().map_err(|_| parse_err("true_label"))?;
        let noisy: usize = record[2].parse().map_err(|_| parse_err("noisy_label"))?;
        let features = (3..width)
            .map(|j| record[j].parse::<f64>().map_err(|_| parse_err("feature")))
            .collect::<Result<Vec<_>>>()?;
        if noisy >= manifest.classes {
            return Err(parse_err("noisy_label"));
        }
        samples.push(Sample { features, true_label });
        labels.push(noisy);
    }
    if samples.len() != manifest.samples {
        return Err(Error::Schema(format!("manifest lists {} samples, CSV has {}", manifest.samples, samples.len())));
    }
    Ok(NoisyDataset {
        clean: CleanDataset::new(samples, manifest.classes, manifest.dim)?,
        noisy_labels: labels,
        spec: manifest.noise,
        seed: manifest.noise_seed,
        mapping: manifest.mapping,
    })
}

pub(crate) fn not_found_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::NotFound(path.to_path_buf())
    } else {
        Error::io(path, e)
    }
}
