//! Bag classifiers and their training loop.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{Eval, Graph};
use crate::mivpg::{mivpg_forward, Bag, MivpgConfig, MivpgParams};
use crate::nn::{join, Linear, Visitor, VisitorMut};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::task::{Dataset, Example};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// MIVPG body, mean of the output queries, then a linear logit.
    Mivpg,
    /// Mean of every patch in the bag, then a one-hidden-layer MLP.
    MeanPool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier<V> {
    Mivpg { body: MivpgParams<V>, head: Linear<V> },
    MeanPool { hidden: Linear<V>, out: Linear<V> },
}

impl Classifier<Tensor> {
    pub fn mivpg(config: &MivpgConfig, rng: &mut Rng) -> Result<Self> {
        let body = MivpgParams::new(config, rng)?;
        let head = Linear::new(config.model_dim, 1, rng);
        Ok(Classifier::Mivpg { body, head })
    }

    pub fn mean_pool(instance_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Classifier::MeanPool {
            hidden: Linear::new(instance_dim, hidden, rng),
            out: Linear::new(hidden, 1, rng),
        }
    }

    /// Hidden width whose MLP has about `target` parameters.
    pub fn matching_hidden(instance_dim: usize, target: usize) -> usize {
        let per_unit = instance_dim + 2;
        ((target.saturating_sub(1) as f64 / per_unit as f64).round() as usize).max(1)
    }

    pub fn new(kind: ModelKind, config: &MivpgConfig, rng: &mut Rng) -> Result<Self> {
        match kind {
            ModelKind::Mivpg => Classifier::mivpg(config, rng),
            ModelKind::MeanPool => {
                config.validate()?;
                let target = Classifier::mivpg(config, &mut rng.clone())?.num_parameters();
                let hidden = Classifier::matching_hidden(config.instance_dim(), target);
                Ok(Classifier::mean_pool(config.instance_dim(), hidden, rng))
            }
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t.clone()));
        out
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Classifier::Mivpg { .. } => ModelKind::Mivpg,
            Classifier::MeanPool { .. } => ModelKind::MeanPool,
        }
    }

    pub fn predict(&self, bag: &Bag, config: &MivpgConfig) -> Result<bool> {
        let logit = self.logit(&mut Eval, bag, config)?;
        Ok(logit.item()? > 0.0)
    }

    pub fn accuracy(&self, examples: &[Example], config: &MivpgConfig) -> Result<f64> {
        let mut correct = 0;
        for ex in examples {
            if self.predict(&ex.bag, config)? == ex.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

impl<V: Clone> Classifier<V> {
    pub fn map<W>(&self, f: &mut dyn FnMut(&V) -> W) -> Classifier<W> {
        match self {
            Classifier::Mivpg { body, head } => Classifier::Mivpg {
                body: body.map(f),
                head: head.map(f),
            },
            Classifier::MeanPool { hidden, out } => Classifier::MeanPool {
                hidden: hidden.map(f),
                out: out.map(f),
            },
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut Visitor<'_, V>) {
        match self {
            Classifier::Mivpg { body, head } => {
                body.visit(&join(prefix, "body"), f);
                head.visit(&join(prefix, "head"), f);
            }
            Classifier::MeanPool { hidden, out } => {
                hidden.visit(&join(prefix, "hidden"), f);
                out.visit(&join(prefix, "out"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, V>) {
        match self {
            Classifier::Mivpg { body, head } => {
                body.visit_mut(&join(prefix, "body"), f);
                head.visit_mut(&join(prefix, "head"), f);
            }
            Classifier::MeanPool { hidden, out } => {
                hidden.visit_mut(&join(prefix, "hidden"), f);
                out.visit_mut(&join(prefix, "out"), f);
            }
        }
    }

    /// Bag logit, `1 x 1`.
    pub fn logit<G: Graph<Value = V>>(&self, g: &mut G, bag: &Bag, config: &MivpgConfig) -> Result<V> {
        match self {
            Classifier::Mivpg { body, head } => {
                let fwd = mivpg_forward(g, bag, config, body)?;
                let pooled = g.mean_rows(&fwd.queries)?;
                head.apply(g, &pooled)
            }
            Classifier::MeanPool { hidden, out } => {
                let x = g.constant(bag.flattened()?);
                let pooled = g.mean_rows(&x)?;
                let h = hidden.apply(g, &pooled)?;
                let h = g.gelu(&h);
                out.apply(g, &h)
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            lr: 3e-3,
            seed: 0,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    pub config_digest: String,
    pub model: ModelKind,
    pub num_parameters: usize,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept (highest validation accuracy, earliest on ties).
    pub best_epoch: usize,
    pub test_accuracy: f64,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_accuracy\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.val_accuracy).unwrap();
        }
        out
    }
}

pub struct TrainedModel {
    pub classifier: Classifier<Tensor>,
    pub metrics: RunMetrics,
}

/// Trains a freshly initialized classifier on the 70% split, selects the
/// epoch with the best validation accuracy and scores it on the test split.
pub fn train(
    dataset: &Dataset,
    config: &MivpgConfig,
    kind: ModelKind,
    options: &TrainOptions,
) -> Result<TrainedModel> {
    let mut rng = Rng::new(options.seed);
    let classifier = Classifier::new(kind, config, &mut rng.fork(1))?;
    train_from(dataset, config, classifier, options)
}

pub fn train_from(
    dataset: &Dataset,
    config: &MivpgConfig,
    mut classifier: Classifier<Tensor>,
    options: &TrainOptions,
) -> Result<TrainedModel> {
    let split = dataset.split();
    if split.train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::Config(format!(
            "{} bags are too few for a train/val/test split",
            dataset.examples.len()
        )));
    }
    if options.batch_size == 0 || options.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let mut order_rng = Rng::new(options.seed).fork(2);
    let mut params = classifier.tensors();
    let mut adam = Adam::new(options.lr, &params);

    let mut epochs = Vec::with_capacity(options.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    for epoch in 1..=options.epochs {
        let order = order_rng.permutation(split.train.len());
        let mut loss_sum = 0.0;
        for batch in order.chunks(options.batch_size) {
            let mut tape = Tape::new();
            let vars = classifier.map(&mut |t| tape.param(t.clone()));
            let mut total = None;
            for &i in batch {
                let ex = &split.train[i];
                let logit = vars.logit(&mut tape, &ex.bag, config)?;
                let loss = tape.bce_with_logits(&logit, if ex.label { 1.0 } else { 0.0 })?;
                loss_sum += tape.tensor(loss).item()?;
                total = Some(match total {
                    None => loss,
                    Some(acc) => tape.add(&acc, &loss)?,
                });
            }
            let total = total.expect("non-empty batch");
            let mean = tape.scale(&total, 1.0 / batch.len() as f64);
            tape.backward(mean)?;
            let mut grads = Vec::with_capacity(params.len());
            vars.visit("", &mut |_, v| grads.push(tape.grad(*v).expect("parameter").to_vec()));
            adam.step(&mut params, &grads);
            classifier.assign(&params)?;
        }
        let train_loss = loss_sum / split.train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let val_accuracy = classifier.accuracy(split.val, config)?;
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, params.clone()));
        }
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            val_accuracy,
        });
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    classifier.assign(&best_params)?;
    let test_accuracy = classifier.accuracy(split.test, config)?;
    let metrics = RunMetrics {
        seed: options.seed,
        config_digest: config.digest(),
        model: classifier.kind(),
        num_parameters: classifier.num_parameters(),
        epochs,
        best_epoch,
        test_accuracy,
    };
    Ok(TrainedModel {
        classifier,
        metrics,
    })
}

impl Classifier<Tensor> {
    /// Overwrites every parameter, in visit order.
    pub fn assign(&mut self, values: &[Tensor]) -> Result<()> {
        let mut it = values.iter();
        let mut err = None;
        self.visit_mut("", &mut |name, t| match it.next() {
            Some(v) if v.shape() == t.shape() => t.data_mut().copy_from_slice(v.data()),
            _ => {
                err.get_or_insert_with(|| Error::Contract(format!("no matching value for {name}")));
            }
        });
        match (err, it.next()) {
            (Some(e), _) => Err(e),
            (None, Some(_)) => Err(Error::Contract("more values than parameters".into())),
            (None, None) => Ok(()),
        }
    }
}

/// Small model used for the witness task.
pub fn witness_model_config(instance_dim: usize) -> MivpgConfig {
    MivpgConfig {
        num_blocks: 2,
        num_queries: 8,
        model_dim: 32,
        heads: 2,
        cross_attn_every: 1,
        use_csa: true,
        use_ppeg: false,
        ffn_hidden: Some(64),
        instance_dim: Some(instance_dim),
        abmil_hidden: 64,
        ..MivpgConfig::desk()
    }
}
