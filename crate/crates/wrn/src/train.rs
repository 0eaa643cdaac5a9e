//! SGD with momentum and weight decay, feature sets and the training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use sigclass::dataset::{Manifest, ManifestRecord};
use sigclass::rng::{derive_seed, stream, StreamPurpose};
use sigclass::spectro::FeaturePipeline;

use crate::model::{softmax, WrnConfig, WrnModel};
use crate::scalar::Scalar;
use crate::WrnError;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied at each entry of `decay_epochs`.
    pub lr_decay: f64,
    /// Zero-based epochs at whose start the learning rate is decayed.
    pub decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Standard schedule: decay ×0.2 at 40% and 70% of `epochs`.
    pub fn with_epochs(epochs: usize, seed: u64) -> Self {
        let at = |f: f64| (f * epochs as f64).round() as usize;
        Self {
            lr: 0.1,
            lr_decay: 0.2,
            decay_epochs: vec![at(0.4), at(0.7)],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), WrnError> {
        let bad = |m: &str| Err(WrnError::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum outside [0, 1)");
        }
        if self.weight_decay < 0.0 || self.lr_decay <= 0.0 {
            return bad("weight decay and lr decay must be non-negative / positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&e| e > 0 && e <= epoch).count();
        self.lr * self.lr_decay.powi(n as i32)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_epochs(30, 0)
    }
}

/// Momentum SGD: `v ← μv + (g + λw)`, `w ← w − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, model: &mut WrnModel<S>, lr: f64) {
        let entries = model.store_mut().entries_mut();
        if self.velocity.is_empty() {
            self.velocity = entries.iter().map(|e| vec![S::zero(); e.grad.len()]).collect();
        }
        let (mu, wd, lr) = (S::of(self.momentum), S::of(self.weight_decay), S::of(lr));
        for (e, v) in entries.iter_mut().zip(&mut self.velocity) {
            if !e.trainable {
                continue;
            }
            for ((w, g), v) in e.value.iter_mut().zip(&e.grad).zip(v.iter_mut()) {
                *v = mu * *v + (*g + wd * *w);
                *w -= lr * *v;
            }
        }
    }
}

/// Model-ready inputs with integer labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub input_len: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.input_len..(i + 1) * self.input_len]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut out = Self { input_len: self.input_len, ..Self::default() };
        for &i in idx {
            out.inputs.extend_from_slice(self.input(i));
            out.labels.push(self.labels[i]);
            out.ids.push(self.ids[i].clone());
        }
        out
    }

    /// Reads and featurizes every record of `manifest` (in parallel).
    pub fn from_manifest(manifest: &Manifest, pipeline: &FeaturePipeline) -> Result<Self, WrnError> {
        Self::from_records(manifest, &manifest.records, pipeline)
    }

    pub fn from_records(
        manifest: &Manifest,
        records: &[ManifestRecord],
        pipeline: &FeaturePipeline,
    ) -> Result<Self, WrnError> {
        let feats: Vec<Vec<f32>> = records
            .par_iter()
            .map(|r| {
                let x = manifest.read_series(r).map_err(|e| WrnError::Data(e.to_string()))?;
                pipeline.features(&x).map_err(|e| WrnError::Data(format!("{}: {e}", r.id)))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            input_len: pipeline.input_len(),
            inputs: feats.concat(),
            labels: records.iter().map(|r| r.class.code()).collect(),
            ids: records.iter().map(|r| r.id.clone()).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:.6},{:.6}", e.epoch, e.train_loss, e.val_acc);
        }
        s
    }

    pub fn best_val_acc(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_acc).fold(f64::NAN, f64::max)
    }
}

/// Eval-mode accuracy over `set`, in batches of `batch`.
pub fn accuracy<S: Scalar>(model: &WrnModel<S>, set: &FeatureSet, batch: usize) -> Result<f64, WrnError> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let k = model.config().classes;
    let mut correct = 0usize;
    for start in (0..set.len()).step_by(batch.max(1)) {
        let end = (start + batch).min(set.len());
        let data = set.inputs[start * set.input_len..end * set.input_len].iter().map(|&v| S::of(v as f64)).collect();
        let p = softmax(&model.forward_eval(&model.batch(data, end - start)?)?, k);
        for (i, row) in p.chunks(k).enumerate() {
            let pred = row.iter().enumerate().fold(0, |b, (c, v)| if *v > row[b] { c } else { b });
            correct += usize::from(pred == set.labels[start + i]);
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Trains a fresh model; returns the weights with the best validation
/// accuracy (the final weights when `val` is empty).
pub fn train(
    train_set: &FeatureSet,
    val_set: &FeatureSet,
    wrn: &WrnConfig,
    cfg: &TrainConfig,
    progress: impl FnMut(&EpochRecord),
) -> Result<(WrnModel<f32>, History), WrnError> {
    let model = WrnModel::<f32>::build(*wrn, derive_seed(cfg.seed, &[0x1417]))?;
    train_model(model, train_set, val_set, cfg, progress)
}

/// Continues training `model`.
pub fn train_model<S: Scalar>(
    mut model: WrnModel<S>,
    train_set: &FeatureSet,
    val_set: &FeatureSet,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(WrnModel<S>, History), WrnError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(WrnError::Data("empty training set".into()));
    }
    let want = model.config().input_len();
    for set in [train_set, val_set] {
        if !set.is_empty() && set.input_len != want {
            return Err(WrnError::Shape(format!("features have {} values, model expects {want}", set.input_len)));
        }
    }
    model.reseed_dropout(derive_seed(cfg.seed, &[0xd0]));
    let mut shuffle = stream(cfg.seed, StreamPurpose::Shuffle);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, WrnModel<S>)> = None;
    let len = train_set.input_len;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let lr = cfg.lr_at(epoch);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // A batch of one has no batch statistics to normalize with.
            if chunk.len() < 2 && train_set.len() >= 2 {
                continue;
            }
            let mut data = Vec::with_capacity(chunk.len() * len);
            for &i in chunk {
                data.extend(train_set.input(i).iter().map(|&v| S::of(v as f64)));
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let x = model.batch(data, chunk.len())?;
            let loss = model.loss_and_grads(&x, &labels)?;
            if !loss.is_finite() {
                return Err(WrnError::Numeric(format!("non-finite loss at epoch {}", epoch + 1)));
            }
            opt.step(&mut model, lr);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_acc = accuracy(&model, val_set, 64)?;
        let rec = EpochRecord { epoch: epoch + 1, train_loss: loss_sum / seen.max(1) as f64, val_acc };
        history.epochs.push(rec);
        progress(&rec);
        if !val_set.is_empty() && best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
            best = Some((val_acc, model.clone()));
            history.best_epoch = Some(epoch + 1);
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok((model, history))
}
