//! Tied-weight linear autoencoder channels.
//!
//! The encoder is `Wᵀ` and the decoder `W` (`n × m`), so a batch `G`
//! (`n × B`, one image per column) reconstructs as `W Wᵀ G`. The
//! task-specific loss pulls that reconstruction towards `I(g)·Δḡ`; the
//! traditional loss towards `g` itself:
//!
//! `L(W) = (1/B) Σᵢ ‖W Wᵀ gᵢ - yᵢ‖²`
//!
//! With `H = Wᵀ G` and `R = W H - Y` the gradient is
//! `∇L = (2/B) (R Hᵀ + G Rᵀ W)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ChannelMatrix, ChannelMethod};
use crate::error::{Error, Result};
use crate::imaging::{Label, LabeledDataset, SignalEstimate};
use crate::rng::{derive_seed, substream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeLoss {
    TaskSpecific,
    Traditional,
}

/// Moment decay rates and stabilizer of the Adam update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optional burn-in on a small leading subset before the main run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub subset_size: usize,
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            subset_size: 500,
            epochs: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeHyperparams {
    pub channels: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub init_std: f64,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    pub loss: AeLoss,
    pub seed: u64,
    /// Subtract the training mean image from the inputs.
    #[serde(default)]
    pub center: bool,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl AeHyperparams {
    /// Lumpy-background protocol: lr 1e-5, 500 epochs, minibatches of 250,
    /// truncated-normal init with std 5e-6.
    pub fn lumpy_protocol(channels: usize, loss: AeLoss, seed: u64) -> Self {
        Self {
            channels,
            learning_rate: 1e-5,
            epochs: 500,
            minibatch_size: 250,
            init_std: 5e-6,
            pretrain: PretrainConfig::default(),
            loss,
            seed,
            center: false,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.epochs == 0 || self.minibatch_size == 0 {
            return Err(Error::invalid("channels, epochs and minibatch_size must be positive"));
        }
        if self.minibatch_size % 2 != 0 {
            return Err(Error::invalid("minibatch_size must be even for class-balanced batches"));
        }
        if !(self.learning_rate > 0.0 && self.init_std > 0.0) {
            return Err(Error::invalid("learning_rate and init_std must be positive"));
        }
        if self.pretrain.enabled && (self.pretrain.subset_size < 2 || self.pretrain.epochs == 0) {
            return Err(Error::invalid("pretraining needs a subset of >= 2 images and >= 1 epoch"));
        }
        let AdamConfig { beta1, beta2, epsilon } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) {
            return Err(Error::invalid("Adam decay rates must lie in [0, 1) and epsilon > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAe {
    pub channels: ChannelMatrix,
    /// Mean minibatch loss of every epoch of the main run.
    pub loss_history: Vec<f64>,
    pub pretrain_history: Vec<f64>,
}

/// Loss and gradient of a tied-weight linear autoencoder on one batch.
pub fn ae_loss_and_gradient(
    weights: &DMatrix<f64>,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> (f64, DMatrix<f64>) {
    let batch = inputs.ncols() as f64;
    let hidden = weights.transpose() * inputs;
    let residual = weights * &hidden - targets;
    let loss = residual.norm_squared() / batch;
    let grad = (&residual * hidden.transpose() + inputs * (residual.transpose() * weights)) * (2.0 / batch);
    (loss, grad)
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: DMatrix<f64>,
    v: DMatrix<f64>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, lr: f64, shape: (usize, usize)) -> Self {
        Self {
            cfg,
            lr,
            m: DMatrix::zeros(shape.0, shape.1),
            v: DMatrix::zeros(shape.0, shape.1),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut DMatrix<f64>, grad: &DMatrix<f64>) {
        let AdamConfig { beta1, beta2, epsilon } = self.cfg;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
        }
    }
}

fn truncated_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Image indices grouped into class-balanced minibatches for one epoch.
/// When one class is missing the batches are plain shuffled chunks.
fn epoch_batches<R: Rng>(present: &mut [usize], absent: &mut [usize], batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    present.shuffle(rng);
    absent.shuffle(rng);
    if present.is_empty() || absent.is_empty() {
        let pool = if present.is_empty() { &*absent } else { &*present };
        return pool.chunks(batch).map(<[usize]>::to_vec).collect();
    }
    let half = batch / 2;
    let pairs = present.len().min(absent.len());
    let mut out = Vec::with_capacity(pairs.div_ceil(half));
    let mut start = 0;
    while start < pairs {
        let end = (start + half).min(pairs);
        let mut idx = Vec::with_capacity(2 * (end - start));
        for k in start..end {
            idx.push(absent[k]);
            idx.push(present[k]);
        }
        out.push(idx);
        start = end;
    }
    out
}

struct Problem<'a> {
    images: &'a DMatrix<f64>,
    labels: &'a [Label],
    delta: Option<&'a DVector<f64>>,
}

impl Problem<'_> {
    fn batch(&self, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        let inputs = self.images.select_columns(idx);
        let targets = match self.delta {
            None => inputs.clone(),
            Some(delta) => {
                let mut t = DMatrix::zeros(inputs.nrows(), idx.len());
                for (c, &i) in idx.iter().enumerate() {
                    if self.labels[i].is_present() {
                        t.set_column(c, delta);
                    }
                }
                t
            }
        };
        (inputs, targets)
    }
}

fn run_epochs(
    problem: &Problem<'_>,
    subset: &[usize],
    weights: &mut DMatrix<f64>,
    hp: &AeHyperparams,
    epochs: usize,
    batch_seed: u64,
) -> Result<Vec<f64>> {
    let mut present: Vec<usize> = subset.iter().copied().filter(|&i| problem.labels[i].is_present()).collect();
    let mut absent: Vec<usize> = subset.iter().copied().filter(|&i| !problem.labels[i].is_present()).collect();
    let mut rng = substream(batch_seed, Domain::AeBatches, 0);
    let mut adam = Adam::new(hp.adam, hp.learning_rate, weights.shape());
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let batches = epoch_batches(&mut present, &mut absent, hp.minibatch_size, &mut rng);
        let mut total = 0.0;
        for idx in &batches {
            let (inputs, targets) = problem.batch(idx);
            let (loss, grad) = ae_loss_and_gradient(weights, &inputs, &targets);
            if !loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss;
            adam.step(weights, &grad);
        }
        let mean = total / batches.len() as f64;
        log::trace!("ae epoch {epoch}: loss {mean}");
        history.push(mean);
    }
    Ok(history)
}

/// Trains tied-weight AE channels with Adam and returns `T = Wᵀ`.
pub fn train_ae_channels(train: &LabeledDataset, sig: &SignalEstimate, hp: &AeHyperparams) -> Result<TrainedAe> {
    hp.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let n = train.dim();
    if sig.delta_g_bar.len() != n {
        return Err(Error::mismatch(n, sig.delta_g_bar.len(), "signal estimate length"));
    }
    let delta = DVector::from_column_slice(&sig.delta_g_bar);
    if hp.loss == AeLoss::TaskSpecific && sig.is_zero() {
        return Err(Error::ZeroSignal);
    }

    let mut images = DMatrix::from_column_slice(n, train.len(), train.pixels());
    if hp.center {
        let mean = images.column_mean();
        for mut col in images.column_iter_mut() {
            col -= &mean;
        }
    }
    let problem = Problem {
        images: &images,
        labels: train.labels(),
        delta: (hp.loss == AeLoss::TaskSpecific).then_some(&delta),
    };

    let mut init_rng = substream(hp.seed, Domain::AeInit, 0);
    let mut weights = DMatrix::from_fn(n, hp.channels, |_, _| truncated_normal(&mut init_rng, hp.init_std));

    let all: Vec<usize> = (0..train.len()).collect();
    let mut pretrain_history = Vec::new();
    if hp.pretrain.enabled && train.len() > hp.pretrain.subset_size {
        // leading pairs keep the burn-in subset class balanced
        let subset = &all[..hp.pretrain.subset_size];
        pretrain_history = run_epochs(&problem, subset, &mut weights, hp, hp.pretrain.epochs, derive_seed(hp.seed, 1))?;
    }
    let loss_history = run_epochs(&problem, &all, &mut weights, hp, hp.epochs, hp.seed)?;

    let method = match hp.loss {
        AeLoss::TaskSpecific => ChannelMethod::AeTask,
        AeLoss::Traditional => ChannelMethod::AeTraditional,
    };
    let channels = ChannelMatrix::new(weights.transpose(), method, train.side())?;
    Ok(TrainedAe {
        channels,
        loss_history,
        pretrain_history,
    })
}
