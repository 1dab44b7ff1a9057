//! Training of inference networks and of obfuscation networks against a
//! frozen inference network.

use std::time::Instant;

use obfnet_engine::{
    cross_entropy, AdaDelta, AdaDeltaConfig, EngineError, GradScope, LayerKind, Mode, Network, Optimizer, Sgd,
    Tensor,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Dataset, DatasetSplits};
use crate::model_io::{self, ModelIoError};
use crate::zoo::{self, ArchSpec, ZooError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("cannot evaluate on an empty split")]
    EmptySplit,
    #[error("frozen inference network changed during training")]
    FrozenModified,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    ModelIo(#[from] ModelIoError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerConfig {
    AdaDelta(AdaDeltaConfig),
    Sgd { learning_rate: f64, momentum: f64 },
}

impl OptimizerConfig {
    fn build(&self) -> Box<dyn Optimizer<f32>> {
        match *self {
            OptimizerConfig::AdaDelta(cfg) => Box::new(AdaDelta::new(cfg)),
            OptimizerConfig::Sgd {
                learning_rate,
                momentum,
            } => Box::new(Sgd::new(learning_rate, momentum)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Seeds weight initialization, shuffling and dropout.
    pub seed: u64,
    /// Train on only the first `n` training samples.
    pub train_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerConfig::AdaDelta(AdaDeltaConfig::default()),
            seed: 0,
            train_limit: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.train_limit == Some(0) {
            return Err(TrainError::Config("train limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the training-mode forward passes during the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) of the returned checkpoint.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_accuracy,val_accuracy,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.3}\n",
                e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy, e.seconds
            ));
        }
        s
    }
}

/// Anything that maps a batch of samples to class probabilities.
pub trait Classifier {
    fn input_shape(&self) -> &[usize];
    fn predict_probs(&self, batch: &Tensor) -> Result<Tensor>;
}

impl Classifier for Network {
    fn input_shape(&self) -> &[usize] {
        Network::input_shape(self)
    }

    fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.predict(batch)?)
    }
}

/// An obfuscation network feeding a frozen inference network.
#[derive(Clone, Debug)]
pub struct ConcatenatedModel {
    obfnet: Network,
    infnet: Network,
    infnet_flags: Vec<bool>,
}

impl ConcatenatedModel {
    /// Freezes every layer of `infnet`; its original flags come back with
    /// [`ConcatenatedModel::into_parts`].
    pub fn new(obfnet: Network, mut infnet: Network) -> Result<Self> {
        if obfnet.output_shape() != obfnet.input_shape() {
            return Err(TrainError::Shape(format!(
                "obfuscation network maps {:?} to {:?}",
                obfnet.input_shape(),
                obfnet.output_shape()
            )));
        }
        if obfnet.output_shape() != infnet.input_shape() {
            return Err(TrainError::Shape(format!(
                "obfuscation output {:?} does not match inference input {:?}",
                obfnet.output_shape(),
                infnet.input_shape()
            )));
        }
        if !matches!(infnet.layers().last().map(|l| l.kind()), Some(LayerKind::Softmax)) {
            return Err(TrainError::Shape("inference network must end in softmax".into()));
        }
        let infnet_flags = infnet.layers().iter().map(|l| l.trainable()).collect();
        infnet.set_trainable(false);
        obfnet_all_trainable(&obfnet)?;
        Ok(ConcatenatedModel {
            obfnet,
            infnet,
            infnet_flags,
        })
    }

    pub fn obfnet(&self) -> &Network {
        &self.obfnet
    }

    pub fn infnet(&self) -> &Network {
        &self.infnet
    }

    /// The obfuscation network and the inference network with its original
    /// trainable flags.
    pub fn into_parts(self) -> (Network, Network) {
        let mut inf = self.infnet;
        for (i, t) in self.infnet_flags.into_iter().enumerate() {
            inf.layer_mut(i).set_trainable(t);
        }
        (self.obfnet, inf)
    }
}

fn obfnet_all_trainable(net: &Network) -> Result<()> {
    match net.layers().iter().position(|l| l.kind().has_weights() && !l.trainable()) {
        Some(i) => Err(TrainError::Shape(format!("obfuscation network layer {i} is frozen"))),
        None => Ok(()),
    }
}

impl Classifier for ConcatenatedModel {
    fn input_shape(&self) -> &[usize] {
        self.obfnet.input_shape()
    }

    fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.infnet.predict(&self.obfnet.predict(batch)?)?)
    }
}

/// One optimization step; returns the batch loss and the number of correct
/// training-mode predictions.
trait Trainable: Classifier + Clone {
    fn train_batch(&mut self, x: &Tensor, labels: &[usize], opt: &mut dyn Optimizer<f32>) -> Result<(f64, usize)>;
}

fn correct(probs: &Tensor, labels: &[usize]) -> usize {
    probs.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count()
}

impl Trainable for Network {
    fn train_batch(&mut self, x: &Tensor, labels: &[usize], opt: &mut dyn Optimizer<f32>) -> Result<(f64, usize)> {
        let probs = self.forward(x, Mode::Training)?;
        let (loss, g) = cross_entropy(&probs, labels)?;
        let grads = self.backward_logits(&g, GradScope::TrainableOnly)?;
        opt.step(self, &grads)?;
        Ok((loss, correct(&probs, labels)))
    }
}

impl Trainable for ConcatenatedModel {
    fn train_batch(&mut self, x: &Tensor, labels: &[usize], opt: &mut dyn Optimizer<f32>) -> Result<(f64, usize)> {
        let obfuscated = self.obfnet.forward(x, Mode::Training)?;
        // dropout stays active in the frozen network; its weights and
        // batch-norm statistics do not move
        let probs = self.infnet.forward(&obfuscated, Mode::Training)?;
        let (loss, g) = cross_entropy(&probs, labels)?;
        let inf_grads = self.infnet.backward_logits(&g, GradScope::TrainableOnly)?;
        let grads = self.obfnet.backward(&inf_grads.input, GradScope::TrainableOnly)?;
        opt.step(&mut self.obfnet, &grads)?;
        Ok((loss, correct(&probs, labels)))
    }
}

fn check_data<M: Classifier>(model: &M, data: &DatasetSplits) -> Result<()> {
    for ds in [&data.train, &data.validation, &data.test] {
        if ds.sample_shape() != model.input_shape() {
            return Err(TrainError::Shape(format!(
                "{} samples are {:?}, model expects {:?}",
                ds.split,
                ds.sample_shape(),
                model.input_shape()
            )));
        }
    }
    Ok(())
}

fn fit<M: Trainable>(mut model: M, data: &DatasetSplits, cfg: &TrainConfig, what: &str) -> Result<(M, TrainReport)> {
    cfg.validate()?;
    check_data(&model, data)?;
    let train = match cfg.train_limit {
        Some(n) => data.train.take(n),
        None => data.train.clone(),
    };
    let mut opt = cfg.optimizer.build();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7368_7566);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(M, usize, f64)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk);
            let (loss, ok) = match model.train_batch(&batch.samples, &batch.labels, opt.as_mut()) {
                Err(TrainError::Engine(EngineError::NonFiniteGradient { .. })) => {
                    return Err(TrainError::Diverged { epoch })
                }
                r => r?,
            };
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            hits += ok;
        }
        let val = evaluate(&model, &data.validation)?.accuracy;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: hits as f64 / train.len() as f64,
            val_accuracy: val,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{what} epoch {epoch}/{}: loss {:.4}, train acc {:.4}, val acc {:.4} ({:.1} s)",
            cfg.epochs,
            record.train_loss,
            record.train_accuracy,
            record.val_accuracy,
            record.seconds
        );
        epochs.push(record);
        if best.as_ref().is_none_or(|(_, _, acc)| val > *acc) {
            best = Some((model.clone(), epoch, val));
        }
    }
    let (model, best_epoch, best_val_accuracy) = best.expect("at least one epoch");
    let test_accuracy = evaluate(&model, &data.test)?.accuracy;
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch,
            best_val_accuracy,
            test_accuracy,
        },
    ))
}

/// Trains a freshly built `arch` and returns the checkpoint with the highest
/// validation accuracy.
pub fn train_infnet(arch: &ArchSpec, data: &DatasetSplits, cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    if arch.name.is_obfnet() {
        return Err(TrainError::Config(format!("{} is not an inference architecture", arch.name)));
    }
    let arch = arch.clone().with_classes(data.num_classes());
    let net = zoo::build(&arch, cfg.seed)?;
    fit(net, data, cfg, arch.name.as_str())
}

/// Continues training an existing inference network.
pub fn train_network(net: Network, data: &DatasetSplits, cfg: &TrainConfig) -> Result<(Network, TrainReport)> {
    let name = net.name().to_string();
    fit(net, data, cfg, &name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObfTrainReport {
    pub training: TrainReport,
    /// SHA-256 of the inference network file, identical before and after.
    pub infnet_checksum: String,
    pub raw_test_accuracy: f64,
    pub concat_test_accuracy: f64,
    /// `raw_test_accuracy - concat_test_accuracy`.
    pub accuracy_drop: f64,
    /// Fraction of test samples where I(O(x)) and I(x) pick the same class.
    pub agreement: f64,
}

/// Trains a fresh `obf_arch` network in front of `infnet`, updating only the
/// obfuscation weights. The inference network is verified byte-identical
/// before and after.
pub fn train_obfnet(
    obf_arch: &ArchSpec,
    infnet: &Network,
    data: &DatasetSplits,
    cfg: &TrainConfig,
) -> Result<(Network, ObfTrainReport)> {
    if !obf_arch.name.is_obfnet() {
        return Err(TrainError::Config(format!("{} is not an obfuscation architecture", obf_arch.name)));
    }
    if obf_arch.input_shape != infnet.input_shape() {
        return Err(TrainError::Shape(format!(
            "{} takes {:?}, inference network takes {:?}",
            obf_arch.label(),
            obf_arch.input_shape,
            infnet.input_shape()
        )));
    }
    let obfnet = zoo::build(obf_arch, cfg.seed)?;
    train_obfnet_from(obfnet, infnet, data, cfg)
}

/// As [`train_obfnet`] with an already constructed obfuscation network.
pub fn train_obfnet_from(
    obfnet: Network,
    infnet: &Network,
    data: &DatasetSplits,
    cfg: &TrainConfig,
) -> Result<(Network, ObfTrainReport)> {
    let before = model_io::checksum(infnet)?;
    let model = ConcatenatedModel::new(obfnet, infnet.clone())?;
    let label = format!("{} + {}", model.obfnet().name(), infnet.name());
    let (best, training) = fit(model, data, cfg, &label)?;
    let (obfnet, inf_after) = best.into_parts();
    if model_io::checksum(&inf_after)? != before {
        return Err(TrainError::FrozenModified);
    }
    let raw = predict_labels(infnet, &data.test.samples)?;
    let concat_model = ConcatenatedModel::new(obfnet, inf_after)?;
    let obf = predict_labels(&concat_model, &data.test.samples)?;
    let n = data.test.len().max(1) as f64;
    let hits = |p: &[usize]| p.iter().zip(&data.test.labels).filter(|(a, b)| a == b).count() as f64 / n;
    let raw_test_accuracy = hits(&raw);
    let concat_test_accuracy = hits(&obf);
    let agreement = raw.iter().zip(&obf).filter(|(a, b)| a == b).count() as f64 / n;
    let (obfnet, _) = concat_model.into_parts();
    Ok((
        obfnet,
        ObfTrainReport {
            training,
            infnet_checksum: before,
            raw_test_accuracy,
            concat_test_accuracy,
            accuracy_drop: raw_test_accuracy - concat_test_accuracy,
            agreement,
        },
    ))
}

const EVAL_CHUNK: usize = 256;

/// Predicted class per sample; ties go to the lowest class index.
pub fn predict_labels<M: Classifier + ?Sized>(model: &M, samples: &Tensor) -> Result<Vec<usize>> {
    let n = samples.batch_size();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        out.extend(model.predict_probs(&samples.slice_batch(start, end))?.argmax_rows());
        start = end;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate<M: Classifier + ?Sized>(model: &M, data: &Dataset) -> Result<Evaluation> {
    let predicted = predict_labels(model, &data.samples)?;
    score(&predicted, &data.labels, data.num_classes)
}

/// Accuracy and confusion counts of `predicted` against `labels`.
pub fn score(predicted: &[usize], labels: &[usize], num_classes: usize) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if predicted.len() != labels.len() {
        return Err(TrainError::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let width = predicted.iter().copied().max().map_or(num_classes, |m| num_classes.max(m + 1));
    let mut confusion = vec![vec![0; width]; num_classes];
    let mut correct = 0;
    for (&p, &l) in predicted.iter().zip(labels) {
        confusion[l][p] += 1;
        correct += (p == l) as usize;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        correct,
        total: labels.len(),
        confusion,
    })
}
