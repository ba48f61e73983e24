//! Joint training of two networks on divided data.
//!
//! An epoch profiles both networks, fits one mixture per network, swaps the
//! resulting divisions and then trains network 1 and network 2 in turn. Each
//! mini-batch has its labels refined against the ensemble prediction,
//! sharpened, MixUp-mixed within the batch and fitted with a cross-entropy
//! plus class-balance regularizer.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::nn::{cross_entropy, softmax, Gradients, Network, ProbVector, Sgd, LOG_FLOOR};
use crate::noise::{CleanDataset, NoisyDataset};
use crate::profile::{profile_normalized, LossPoint};
use crate::rng::{stream, Stream};
use crate::select::{co_divide, self_divide, Branch, Division, DivisionContext, SelectionWeights, Thresholds};
use crate::{Error, Result};

/// Two classifiers of identical architecture with their optimizers.
#[derive(Debug, Clone)]
pub struct NetworkPair {
    pub nets: [Network; 2],
    pub opts: [Sgd; 2],
}

impl NetworkPair {
    /// Both networks share `sizes`; their weights come from the separate
    /// `InitNet1` / `InitNet2` streams of `master_seed`.
    pub fn init(sizes: &[usize], lr: f64, momentum: f64, weight_decay: f64, master_seed: u64) -> Result<Self> {
        let net1 = Network::init(sizes, &mut stream(master_seed, Stream::init(1)))?;
        let net2 = Network::init(sizes, &mut stream(master_seed, Stream::init(2)))?;
        let opt1 = Sgd::new(&net1, lr, momentum, weight_decay)?;
        let opt2 = Sgd::new(&net2, lr, momentum, weight_decay)?;
        Ok(NetworkPair { nets: [net1, net2], opts: [opt1, opt2] })
    }

    pub fn net(&self, n: usize) -> &Network {
        &self.nets[n - 1]
    }

    pub fn set_lr(&mut self, lr: f64) {
        for o in &mut self.opts {
            o.lr = lr;
        }
    }

    pub fn fingerprints(&self) -> [u64; 2] {
        [self.nets[0].fingerprint(), self.nets[1].fingerprint()]
    }
}

/// Per-network random streams, carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    shuffle: [ChaCha8Rng; 2],
    mixup: [ChaCha8Rng; 2],
    wrong: [ChaCha8Rng; 2],
}

impl TrainRngs {
    pub fn new(master_seed: u64) -> Self {
        let pair = |f: fn(usize) -> Stream| [stream(master_seed, f(1)), stream(master_seed, f(2))];
        TrainRngs { shuffle: pair(Stream::shuffle), mixup: pair(Stream::mixup), wrong: pair(Stream::wrong_branch) }
    }

    /// Shuffle stream of network `net` (1 or 2).
    pub fn shuffle_mut(&mut self, net: usize) -> &mut ChaCha8Rng {
        &mut self.shuffle[net - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DstParams {
    pub batch_size: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub lambda_reg: f64,
    pub division: DivisionContext,
    pub mixup: bool,
    /// Train only network 1 on its own division, predicting with it alone.
    pub single_network: bool,
}

impl Default for DstParams {
    fn default() -> Self {
        DstParams {
            batch_size: 128,
            temperature: 0.5,
            alpha: 4.0,
            lambda_reg: 1.0,
            division: DivisionContext::default(),
            mixup: true,
            single_network: false,
        }
    }
}

impl DstParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::Config(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        self.division.thresholds.validate()
    }
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One epoch of plain cross-entropy on the dataset labels. Returns the mean
/// batch loss.
pub fn ce_epoch(
    net: &mut Network,
    opt: &mut Sgd,
    ds: &NoisyDataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let classes = ds.classes();
    let mut total = 0.0;
    let batches = shuffled_batches(ds.len(), batch_size, rng);
    for batch in &batches {
        let mut grads = Gradients::zeros_like(net);
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let trace = net.trace(&ds.samples()[i].features)?;
            let p = softmax(trace.logits())?;
            let target = ProbVector::one_hot(ds.noisy_labels()[i], classes);
            loss += cross_entropy(&p, &target)? * scale;
            net.backprop(&trace, &crate::nn::ce_logit_grad(&p, &target, scale), &mut grads);
        }
        opt.step(net, &grads)?;
        total += loss;
    }
    Ok(total / batches.len() as f64)
}

/// Trains both networks independently with cross-entropy on the noisy
/// labels for `epochs` epochs (only network 1 when `single_network`).
pub fn warmup(
    pair: &mut NetworkPair,
    ds: &NoisyDataset,
    epochs: usize,
    batch_size: usize,
    single_network: bool,
    rngs: &mut TrainRngs,
) -> Result<()> {
    if epochs == 0 {
        return Err(Error::Config("warmup needs at least one epoch".into()));
    }
    for _ in 0..epochs {
        for n in nets_to_train(single_network) {
            let k = n - 1;
            ce_epoch(&mut pair.nets[k], &mut pair.opts[k], ds, batch_size, &mut rngs.shuffle[k])?;
        }
    }
    Ok(())
}

fn nets_to_train(single_network: bool) -> &'static [usize] {
    if single_network {
        &[1]
    } else {
        &[1, 2]
    }
}

/// Mean of the two networks' softmax outputs.
pub fn ensemble_predict(pair: &NetworkPair, x: &[f64]) -> Result<ProbVector> {
    let a = pair.nets[0].predict(x)?;
    let b = pair.nets[1].predict(x)?;
    Ok(average(&a, &b))
}

pub fn average(a: &ProbVector, b: &ProbVector) -> ProbVector {
    ProbVector::from_raw(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| 0.5 * (x + y)).collect())
}

fn blend(y: &ProbVector, p: &ProbVector, keep_label: f64) -> ProbVector {
    ProbVector::from_raw(
        y.as_slice().iter().zip(p.as_slice()).map(|(y, p)| keep_label * y + (1.0 - keep_label) * p).collect(),
    )
}

/// Label refinement for a sample already routed to `branch`.
///
/// - labeled: `w_r * y + (1 - w_r) * p`
/// - predicted: `(1 - w_prd) * y + w_prd * p`
/// - wrong: `(1 - u) * y + u * p` with a fresh `u ~ U(0, 1)`
pub fn refine_for_branch<R: Rng + ?Sized>(
    y: &ProbVector,
    p: &ProbVector,
    w: SelectionWeights,
    branch: Branch,
    rng: &mut R,
) -> ProbVector {
    match branch {
        Branch::Labeled => blend(y, p, w.w_r),
        Branch::Predicted => blend(y, p, 1.0 - w.w_prd),
        Branch::Wrong => {
            let u: f64 = rng.random();
            blend(y, p, 1.0 - u)
        }
    }
}

pub fn refine_label<R: Rng + ?Sized>(
    y: &ProbVector,
    p: &ProbVector,
    w: SelectionWeights,
    thresholds: Thresholds,
    rng: &mut R,
) -> ProbVector {
    refine_for_branch(y, p, w, thresholds.branch(w), rng)
}

/// `y_c^(1/T) / sum_c y_c^(1/T)`.
pub fn sharpen(y: &ProbVector, temperature: f64) -> Result<ProbVector> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    // Scaling by the max first keeps the largest term at 1 for any T.
    let max = y.as_slice().iter().copied().fold(0.0, f64::max);
    let powered: Vec<f64> = y.as_slice().iter().map(|v| (v / max).powf(1.0 / temperature)).collect();
    let sum: f64 = powered.iter().sum();
    Ok(ProbVector::from_raw(powered.into_iter().map(|v| v / sum).collect()))
}

/// Draws `lambda ~ Beta(alpha, alpha)`, returned as `max(lambda, 1 - lambda)`.
pub fn draw_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("Beta({alpha}, {alpha}): {e}")))?;
    let l: f64 = beta.sample(rng);
    Ok(l.max(1.0 - l))
}

/// A training input with a soft target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: ProbVector,
}

/// Convex combination with weight `max(lambda, 1 - lambda)` on `a`.
pub fn mix(a: &Example, b: &Example, lambda: f64) -> Example {
    let l = lambda.max(1.0 - lambda);
    let lerp = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| l * p + (1.0 - l) * q).collect() };
    Example { x: lerp(&a.x, &b.x), y: ProbVector::from_raw(lerp(a.y.as_slice(), b.y.as_slice())) }
}

pub fn mixup_pair<R: Rng + ?Sized>(a: &Example, b: &Example, alpha: f64, rng: &mut R) -> Result<Example> {
    Ok(mix(a, b, draw_lambda(alpha, rng)?))
}

/// MixUp of each item with its partner under a random permutation of the
/// batch. With `enabled == false` the batch is returned unchanged.
pub fn mix_batch<R: Rng + ?Sized>(batch: &[Example], alpha: f64, enabled: bool, rng: &mut R) -> Result<Vec<Example>> {
    if !enabled {
        return Ok(batch.to_vec());
    }
    let mut partner: Vec<usize> = (0..batch.len()).collect();
    partner.shuffle(rng);
    batch.iter().zip(&partner).map(|(a, &j)| mixup_pair(a, &batch[j], alpha, rng)).collect()
}

/// Loss terms of a mixed batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    /// `-(1/B) sum_b sum_c y'_bc ln p_bc`.
    pub ce: f64,
    /// `sum_c (1/C) ln((1/C) / mean_b p_bc)`.
    pub reg: f64,
    pub total: f64,
}

/// Loss from already-computed softmax outputs.
pub fn batch_loss_from_probs(probs: &[ProbVector], targets: &[ProbVector], lambda_reg: f64) -> Result<BatchLoss> {
    if probs.len() != targets.len() || probs.len() < 2 {
        return Err(Error::Shape(format!(
            "batch loss needs >= 2 matching items, got {} outputs and {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let b = probs.len() as f64;
    let classes = probs[0].len();
    let mut ce = 0.0;
    for (p, t) in probs.iter().zip(targets) {
        ce += cross_entropy(p, t)?;
    }
    ce /= b;
    let prior = 1.0 / classes as f64;
    let reg = mean_prediction(probs).iter().map(|m| prior * (prior / m.max(LOG_FLOOR)).ln()).sum::<f64>();
    Ok(BatchLoss { ce, reg, total: ce + lambda_reg * reg })
}

fn mean_prediction(probs: &[ProbVector]) -> Vec<f64> {
    let mut mean = vec![0.0; probs[0].len()];
    for p in probs {
        for (m, v) in mean.iter_mut().zip(p.as_slice()) {
            *m += v;
        }
    }
    let b = probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= b);
    mean
}

pub fn batch_loss(net: &Network, batch: &[Example], lambda_reg: f64) -> Result<BatchLoss> {
    let probs = batch.iter().map(|e| net.predict(&e.x)).collect::<Result<Vec<_>>>()?;
    let targets: Vec<ProbVector> = batch.iter().map(|e| e.y.clone()).collect();
    batch_loss_from_probs(&probs, &targets, lambda_reg)
}

/// Loss and its parameter gradient.
pub fn batch_loss_and_grad(net: &Network, batch: &[Example], lambda_reg: f64) -> Result<(BatchLoss, Gradients)> {
    let traces = batch.iter().map(|e| net.trace(&e.x)).collect::<Result<Vec<_>>>()?;
    let probs = traces.iter().map(|t| softmax(t.logits())).collect::<Result<Vec<_>>>()?;
    let targets: Vec<ProbVector> = batch.iter().map(|e| e.y.clone()).collect();
    let loss = batch_loss_from_probs(&probs, &targets, lambda_reg)?;

    let b = batch.len() as f64;
    let classes = probs[0].len();
    let prior = 1.0 / classes as f64;
    let mean = mean_prediction(&probs);
    // d reg / d p_bc = -(1/C) / (B * mean_c)
    let dreg_dp: Vec<f64> = mean.iter().map(|m| -lambda_reg * prior / (b * m.max(LOG_FLOOR))).collect();

    let mut grads = Gradients::zeros_like(net);
    for ((trace, p), t) in traces.iter().zip(&probs).zip(&targets) {
        let p = p.as_slice();
        let dot: f64 = p.iter().zip(&dreg_dp).map(|(p, g)| p * g).sum();
        let dlogits: Vec<f64> = (0..classes).map(|j| (p[j] - t[j]) / b + p[j] * (dreg_dp[j] - dot)).collect();
        net.backprop(trace, &dlogits, &mut grads);
    }
    Ok((loss, grads))
}

/// Refined, sharpened labels for the items of one mini-batch.
fn refined_batch(
    pair: &NetworkPair,
    ds: &NoisyDataset,
    batch: &[usize],
    division: &Division,
    params: &DstParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Example>> {
    let classes = ds.classes();
    batch
        .iter()
        .map(|&i| {
            let x = &ds.samples()[i].features;
            let p = if params.single_network { pair.nets[0].predict(x)? } else { ensemble_predict(pair, x)? };
            let y = ProbVector::one_hot(ds.noisy_labels()[i], classes);
            let refined = refine_for_branch(&y, &p, division.weights[i], division.branches[i], rng);
            Ok(Example { x: x.clone(), y: sharpen(&refined, params.temperature)? })
        })
        .collect()
}

/// One pass of DST updates for network `n` using `division`.
fn train_on_division(
    pair: &mut NetworkPair,
    n: usize,
    ds: &NoisyDataset,
    division: &Division,
    params: &DstParams,
    rngs: &mut TrainRngs,
) -> Result<f64> {
    if !params.single_network && division.source_net == n {
        return Err(Error::Config(format!("network {n} cannot train on its own division")));
    }
    let k = n - 1;
    let batches = shuffled_batches(ds.len(), params.batch_size, &mut rngs.shuffle[k]);
    let mut total = 0.0;
    for batch in &batches {
        let refined = refined_batch(pair, ds, batch, division, params, &mut rngs.wrong[k])?;
        let mixed = mix_batch(&refined, params.alpha, params.mixup, &mut rngs.mixup[k])?;
        let mixed = if mixed.len() < 2 {
            // A lone trailing item still needs a batch of two for the regularizer.
            vec![mixed[0].clone(), mixed[0].clone()]
        } else {
            mixed
        };
        let (loss, grads) = batch_loss_and_grad(&pair.nets[k], &mixed, params.lambda_reg)?;
        let (nets, opts) = (&mut pair.nets, &mut pair.opts);
        opts[k].step(&mut nets[k], &grads)?;
        total += loss.total;
    }
    Ok(total / batches.len() as f64)
}

/// What happened to one network during a DST epoch.
#[derive(Debug)]
pub struct NetUpdate {
    pub net: usize,
    /// The division it trained on, or the fit error that forced a
    /// cross-entropy fallback.
    pub division: std::result::Result<Division, String>,
    pub mean_loss: f64,
}

#[derive(Debug)]
pub struct DstEpochOutcome {
    /// Loss profiles taken at the start of the epoch, per network.
    pub profiles: Vec<Vec<LossPoint>>,
    pub updates: Vec<NetUpdate>,
}

/// One DST epoch: profile, divide (swapped between networks), then train
/// network 1 and network 2 in that order.
pub fn dst_epoch(
    pair: &mut NetworkPair,
    ds: &NoisyDataset,
    params: &DstParams,
    rngs: &mut TrainRngs,
) -> Result<DstEpochOutcome> {
    params.validate()?;
    let (profiles, mut divisions) = if params.single_network {
        let p1 = profile_normalized(&pair.nets[0], ds)?;
        let d1 = self_divide(&p1, &params.division);
        (vec![p1], vec![d1])
    } else {
        let p1 = profile_normalized(&pair.nets[0], ds)?;
        let p2 = profile_normalized(&pair.nets[1], ds)?;
        let co = co_divide(&p1, &p2, &params.division)?;
        (vec![p1, p2], vec![co.for_net1, co.for_net2])
    };

    let mut updates = Vec::new();
    for (&n, division) in nets_to_train(params.single_network).iter().zip(divisions.drain(..)) {
        let k = n - 1;
        let update = match division {
            Ok(d) => {
                let mean_loss = train_on_division(pair, n, ds, &d, params, rngs)?;
                NetUpdate { net: n, division: Ok(d), mean_loss }
            }
            Err(e @ (Error::Fit(_) | Error::InsufficientData { .. } | Error::Numeric(_))) => {
                let mean_loss =
                    ce_epoch(&mut pair.nets[k], &mut pair.opts[k], ds, params.batch_size, &mut rngs.shuffle[k])?;
                NetUpdate { net: n, division: Err(e.to_string()), mean_loss }
            }
            Err(e) => return Err(e),
        };
        updates.push(update);
    }
    Ok(DstEpochOutcome { profiles, updates })
}

/// Fraction of `ds` classified correctly by `predict`.
pub fn accuracy_with<F>(ds: &CleanDataset, mut predict: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<ProbVector>,
{
    let mut correct = 0usize;
    for s in ds.samples() {
        if predict(&s.features)?.argmax() == s.true_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn accuracy(net: &Network, ds: &CleanDataset) -> Result<f64> {
    accuracy_with(ds, |x| net.predict(x))
}

pub fn ensemble_accuracy(pair: &NetworkPair, ds: &CleanDataset) -> Result<f64> {
    accuracy_with(ds, |x| ensemble_predict(pair, x))
}
