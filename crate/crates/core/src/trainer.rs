//! Deterministic SGD training of a [`TreeNetwork`] and evaluation.

use std::fmt::Write as _;
use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{augment, batches, AugmentPolicy, Dataset};
use crate::distill::{joint_loss, mean_pairwise_kl, DistillConfig};
use crate::nn::{BlockParams, Network};
use crate::tree::{ensemble_from_logits, EnsembleMode, TreeNetwork};
use crate::{Error, Result};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 1024;

/// Multiply the learning rate by `factor` from epoch `at * epochs` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDrop {
    pub at: f64,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drops: Vec<LrDrop>,
    /// Drives batch order and augmentation. Parameter initialization is
    /// seeded separately when the network is instantiated.
    pub seed: u64,
    pub distill: DistillConfig,
    pub augment: AugmentPolicy,
    /// How ensemble accuracy combines the branches.
    pub ensemble: EnsembleMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drops: vec![LrDrop { at: 0.5, factor: 0.1 }, LrDrop { at: 0.75, factor: 0.1 }],
            seed: 0,
            distill: DistillConfig::default(),
            augment: AugmentPolicy::default(),
            ensemble: EnsembleMode::default(),
        }
    }
}

impl TrainConfig {
    /// `epochs = 0` is accepted and trains nothing.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        let mut prev = 0.0;
        for d in &self.lr_drops {
            if !(d.at > prev && d.at < 1.0) {
                return bad(format!(
                    "lr drop fractions must lie in (0,1) and increase strictly, got {}",
                    d.at
                ));
            }
            if !(d.factor > 0.0 && d.factor.is_finite()) {
                return bad(format!("lr drop factor must be positive, got {}", d.factor));
            }
            prev = d.at;
        }
        self.distill.validate()
    }
}

/// Learning rate for 0-based `epoch`: `lr0` times the factor of every drop
/// with `epoch >= at * epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_drops
        .iter()
        .filter(|d| epoch as f64 >= d.at * cfg.epochs as f64)
        .fold(cfg.lr0, |lr, d| lr * d.factor)
}

/// Seed of the batch permutation for 0-based `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng.next_u64()
}

/// Seed of the augmentation draws for one batch.
fn augment_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 32) | epoch as u64);
    rng.set_word_pos(batch as u128 * 16);
    rng.next_u64()
}

/// One momentum step on a flat buffer:
/// `v = momentum * v + grad + weight_decay * param; param -= lr * v`.
pub fn sgd_step(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64, weight_decay: f64) {
    assert!(
        param.len() == grad.len() && param.len() == velocity.len(),
        "sgd_step on misaligned buffers"
    );
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Momentum SGD holding one velocity buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(params: &[BlockParams], momentum: f64, weight_decay: f64) -> Self {
        let velocity = params
            .iter()
            .map(|b| b.tensors().iter().map(|t| vec![0.0; t.len()]).collect())
            .collect();
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// `grads[node][tensor]` must mirror `params`.
    pub fn step(&mut self, params: &mut [BlockParams], grads: &[Vec<Tensor>], lr: f64) {
        for ((block, vel), grad) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((p, v), g) in block.tensors_mut().iter_mut().zip(vel).zip(grad) {
                sgd_step(p.data_mut(), v, g.data(), lr, self.momentum, self.weight_decay);
            }
        }
    }
}

/// One epoch's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean over the epoch of the per-branch mean CE.
    pub train_ce: f64,
    /// Sample-weighted mean over the epoch of the per-branch mean
    /// distillation loss `L_D(k)` (before the `alpha * T^2` weight).
    pub train_distill: f64,
    /// Mean pairwise KL between branches at `T = 1` on the training set,
    /// after the epoch.
    pub mean_pairwise_kl: f64,
    /// Test accuracy per branch in canonical leaf order.
    pub branch_acc: Vec<f64>,
    pub ensemble_acc: f64,
}

impl EpochMetrics {
    pub fn mean_branch_acc(&self) -> f64 {
        self.branch_acc.iter().sum::<f64>() / self.branch_acc.len() as f64
    }

    pub fn best_branch_acc(&self) -> f64 {
        self.branch_acc.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub branch_acc: Vec<f64>,
    pub ensemble_acc: f64,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `scores` whose [`argmax`] equals the label.
pub fn accuracy(scores: &Tensor, labels: &[usize]) -> f64 {
    assert_eq!(scores.rows(), labels.len(), "accuracy on mismatched rows");
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(scores.row(i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

fn chunks(data: &Dataset) -> impl Iterator<Item = Vec<usize>> + '_ {
    (0..data.len()).step_by(EVAL_CHUNK).map(|s| (s..(s + EVAL_CHUNK).min(data.len())).collect())
}

/// Leaf logits over the whole dataset, one tensor per leaf.
pub fn dataset_leaf_logits(net: &TreeNetwork, data: &Dataset) -> Result<Vec<Tensor>> {
    let classes = net.spec().base().classes();
    let mut acc: Vec<Vec<f64>> = vec![Vec::with_capacity(data.len() * classes); net.leaf_count()];
    for idx in chunks(data) {
        let batch = data.select(&idx);
        for (a, z) in acc.iter_mut().zip(net.leaf_logits(&batch.features)?) {
            a.extend(z.into_data());
        }
    }
    acc.into_iter()
        .map(|a| Tensor::new(vec![data.len(), classes], a))
        .collect()
}

/// Per-branch and ensemble top-1 accuracy.
pub fn evaluate(net: &TreeNetwork, data: &Dataset, mode: EnsembleMode) -> Result<Evaluation> {
    check_classes(net, data)?;
    let logits = dataset_leaf_logits(net, data)?;
    let ensemble = ensemble_from_logits(&logits, mode)?;
    Ok(Evaluation {
        branch_acc: logits.iter().map(|z| accuracy(z, data.labels())).collect(),
        ensemble_acc: accuracy(&ensemble, data.labels()),
    })
}

/// Top-1 accuracy of a standalone network.
pub fn evaluate_network(net: &Network, data: &Dataset) -> Result<f64> {
    let classes = net.spec().classes();
    let mut scores = Vec::with_capacity(data.len() * classes);
    for idx in chunks(data) {
        scores.extend(net.logits(&data.select(&idx).features)?.into_data());
    }
    Ok(accuracy(&Tensor::new(vec![data.len(), classes], scores)?, data.labels()))
}

fn check_classes(net: &TreeNetwork, data: &Dataset) -> Result<()> {
    let (want, got) = (net.spec().base().input_shape(), data.feature_shape());
    if want != got {
        return Err(Error::shape(
            "train",
            format!("dataset features {got:?} do not match network input {want:?}"),
        ));
    }
    if data.classes() > net.spec().base().classes() {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} classes but the network predicts {}",
            data.classes(),
            net.spec().base().classes()
        )));
    }
    Ok(())
}

/// Trains every branch jointly and returns one record per epoch.
///
/// Epoch `e` visits `batches(train_set, batch_size, epoch_seed(seed, e))` in
/// order.
/// Each batch runs one tree forward, the joint loss, one backward pass and
/// one [`Sgd`] step over every node. Shared nodes receive the sum of the
/// gradients from all branches below them.
pub fn train(net: &mut TreeNetwork, train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_classes(net, train_set)?;
    check_classes(net, test_set)?;
    let mut sgd = Sgd::new(net.params(), cfg.momentum, cfg.weight_decay);
    let k = net.leaf_count() as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let (mut ce_sum, mut distill_sum) = (0.0, 0.0);
        for (bi, batch) in batches(train_set, cfg.batch_size, epoch_seed(cfg.seed, epoch)).into_iter().enumerate() {
            let features = if cfg.augment.is_identity() {
                batch.features
            } else {
                augment(&batch.features, cfg.augment, augment_seed(cfg.seed, epoch, bi))?
            };
            let mut g = Graph::new();
            let x = g.constant(features);
            let fwd = net.forward(&mut g, x, true)?;
            let loss = joint_loss(&mut g, &fwd.leaf_logits, &batch.labels, &cfg.distill)?;
            let value = g.value(loss.total).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    batch: bi + 1,
                });
            }
            let grads = g.backward(loss.total)?;
            let grads: Vec<Vec<Tensor>> = fwd
                .params
                .iter()
                .map(|ids| ids.iter().map(|&id| grads.get(id)).collect())
                .collect();
            sgd.step(net.params_mut(), &grads, lr);
            let n = batch.labels.len() as f64;
            ce_sum += n * loss.ce / k;
            distill_sum += n * loss.distill / k;
        }
        let eval = evaluate(net, test_set, cfg.ensemble)?;
        let kl = mean_pairwise_kl(&dataset_leaf_logits(net, train_set)?, 1.0)?;
        let n = train_set.len() as f64;
        history.push(EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_ce: ce_sum / n,
            train_distill: distill_sum / n,
            mean_pairwise_kl: kl,
            branch_acc: eval.branch_acc,
            ensemble_acc: eval.ensemble_acc,
        });
    }
    Ok(history)
}

/// One JSON object per line, one line per epoch.
pub fn write_metrics_jsonl<W: Write>(history: &[EpochMetrics], mut out: W) -> std::io::Result<()> {
    for m in history {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn metrics_jsonl(history: &[EpochMetrics]) -> String {
    let mut buf = Vec::new();
    write_metrics_jsonl(history, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn read_metrics_jsonl(text: &str) -> Result<Vec<EpochMetrics>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::InvalidConfig(format!("metrics record: {e}"))))
        .collect()
}

/// Header plus one row holding the final epoch.
pub fn summary_csv(history: &[EpochMetrics]) -> String {
    let Some(last) = history.last() else {
        return "epochs\n0\n".into();
    };
    let mut out = String::from(
        "epochs,lr,train_ce,train_distill,mean_pairwise_kl,mean_branch_acc,best_branch_acc,ensemble_acc",
    );
    for i in 1..=last.branch_acc.len() {
        write!(out, ",branch{i}_acc").unwrap();
    }
    write!(
        out,
        "\n{},{},{},{},{},{},{},{}",
        last.epoch,
        last.lr,
        last.train_ce,
        last.train_distill,
        last.mean_pairwise_kl,
        last.mean_branch_acc(),
        last.best_branch_acc(),
        last.ensemble_acc
    )
    .unwrap();
    for a in &last.branch_acc {
        write!(out, ",{a}").unwrap();
    }
    out.push('\n');
    out
}
