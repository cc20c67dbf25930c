//! Losses for online peer distillation.
//!
//! Each branch `k` of a tree is trained on
//!
//! ```text
//! (1 - alpha) * CE(softmax(z_k), y) + alpha * T^2 * L_D(k)
//! L_D(k) = 1/(K-1) * sum_{j != k} KL(p_k || p_j),   p = softmax(z / T)
//! ```
//!
//! and the objective is the sum over branches. Cross-entropy always uses
//! temperature 1; only the distillation term is softened.
//!
//! Graph-level functions record onto a [`Graph`] so the result can be
//! differentiated; the plain functions ([`softmax_temp`], [`kl_div`],
//! [`cross_entropy`], [`mean_pairwise_kl`]) work on values and are used for
//! evaluation and diagnostics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_row, Graph, NodeId, Op, Tensor};
use crate::{Error, Result};

/// Probabilities below this are floored inside the logarithm of `KL(p || q)`.
pub const KL_FLOOR: f64 = 1e-12;

/// Whether peers act as fixed teachers within a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeerGradient {
    /// `p_j` in `KL(p_k || p_j)` is a constant; branch `j` gets no gradient
    /// from branch `k`'s distillation term.
    #[default]
    Detached,
    /// Gradient flows through both sides of every KL term.
    Coupled,
}

impl fmt::Display for PeerGradient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeerGradient::Detached => "detached",
            PeerGradient::Coupled => "coupled",
        })
    }
}

impl FromStr for PeerGradient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detached" => Ok(PeerGradient::Detached),
            "coupled" => Ok(PeerGradient::Coupled),
            _ => Err(Error::InvalidConfig(format!(
                "peer_gradient must be `detached` or `coupled`, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the distillation term, in `[0, 1]`.
    pub alpha: f64,
    pub temperature: f64,
    pub peer_gradient: PeerGradient,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            temperature: 3.0,
            peer_gradient: PeerGradient::Detached,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(t))
    }
}

/// Row-wise `softmax(z / t)` of a `(batch, classes)` matrix, stabilized by
/// subtracting the row maximum.
pub fn softmax_temp(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    if logits.shape().len() != 2 {
        return Err(Error::shape(
            "softmax_temp",
            format!("needs a (batch, classes) matrix, got {:?}", logits.shape()),
        ));
    }
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        out.extend(log_softmax_row(logits.row(r), temperature).into_iter().map(f64::exp));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for a batch of {batch}", labels.len()),
        ));
    }
    match labels.iter().position(|&y| y >= classes) {
        Some(row) => Err(Error::LabelOutOfRange {
            row,
            label: labels[row] + 1,
            classes,
        }),
        None => Ok(()),
    }
}

/// Mean over the batch of `-log softmax(z)_y` (labels are 0-based class
/// indices).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, t) = (logits.rows(), logits.shape()[1]);
    check_labels(labels, b, t)?;
    let total: f64 = (0..b).map(|i| -log_softmax_row(logits.row(i), 1.0)[labels[i]]).sum();
    Ok(total / b as f64)
}

/// Mean over rows of `sum_t p_t ln(p_t / max(q_t, 1e-12))`. Terms with
/// `p_t = 0` contribute nothing.
pub fn kl_div(p: &Tensor, q: &Tensor) -> f64 {
    assert_eq!(p.shape(), q.shape(), "kl_div on mismatched shapes");
    let total: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .filter(|(&pt, _)| pt > 0.0)
        .map(|(&pt, &qt)| pt * (pt.ln() - qt.max(KL_FLOOR).ln()))
        .sum();
    total / p.rows() as f64
}

/// Mean of `KL(p_k || p_t)` over ordered pairs `k != t`, with distributions
/// at the given temperature. Zero for a single branch.
pub fn mean_pairwise_kl(leaf_logits: &[Tensor], temperature: f64) -> Result<f64> {
    let probs = leaf_logits
        .iter()
        .map(|z| softmax_temp(z, temperature))
        .collect::<Result<Vec<_>>>()?;
    let k = probs.len();
    if k < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                total += kl_div(&probs[a], &probs[b]);
            }
        }
    }
    Ok(total / (k * (k - 1)) as f64)
}

/// Records the mean cross-entropy of `logits` against `labels`.
pub fn ce_loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (b, t) = match g.shape(logits) {
        &[b, t] => (b, t),
        s => {
            return Err(Error::shape(
                "cross_entropy",
                format!("needs (batch, classes) logits, got {s:?}"),
            ))
        }
    };
    check_labels(labels, b, t)?;
    let lp = g.log_softmax(logits, 1.0)?;
    let mut onehot = Tensor::zeros(&[b, t]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * t + y] = 1.0;
    }
    let mask = g.constant(onehot);
    let picked = g.mul(lp, mask)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / b as f64)
}

/// Records `KL(p || q)` averaged over the batch, from log-probabilities.
pub fn kl_div_log(g: &mut Graph, log_p: NodeId, log_q: NodeId) -> Result<NodeId> {
    let rows = g.shape(log_p)[0];
    let p = g.exp(log_p)?;
    let floored = g.apply(Op::ClampMin(KL_FLOOR.ln()), &[log_q])?;
    let diff = g.sub(log_p, floored)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms)?;
    g.scale(total, 1.0 / rows as f64)
}

/// `L_D(k)`: mean of `KL(p_k || p_j)` over peers `j != k`.
///
/// `student` and `teachers` hold log-probabilities at the distillation
/// temperature; `teachers[k]` is skipped. Whether gradient reaches the
/// teachers is decided by how the caller built them.
pub fn peer_distill_loss(g: &mut Graph, k: usize, student: NodeId, teachers: &[NodeId]) -> Result<NodeId> {
    let n = teachers.len();
    if n < 2 {
        return Err(Error::TooFewBranches(n));
    }
    let mut acc: Option<NodeId> = None;
    for (j, &teacher) in teachers.iter().enumerate() {
        if j == k {
            continue;
        }
        let kl = kl_div_log(g, student, teacher)?;
        acc = Some(match acc {
            Some(a) => g.add(a, kl)?,
            None => kl,
        });
    }
    g.scale(acc.expect("at least one peer"), 1.0 / (n - 1) as f64)
}

/// Handle and summary values of a recorded joint loss.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: NodeId,
    /// `sum_k CE_k`.
    pub ce: f64,
    /// `sum_k L_D(k)` (unweighted).
    pub distill: f64,
}

/// Records the joint objective over all branches.
///
/// With [`PeerGradient::Detached`] the teachers are detached copies of the
/// branch logits; with [`PeerGradient::Coupled`] they are the logits
/// themselves.
pub fn joint_loss(g: &mut Graph, leaf_logits: &[NodeId], labels: &[usize], cfg: &DistillConfig) -> Result<JointLoss> {
    let teachers = match cfg.peer_gradient {
        PeerGradient::Coupled => leaf_logits.to_vec(),
        PeerGradient::Detached => leaf_logits
            .iter()
            .map(|&z| g.detach(z))
            .collect::<Result<Vec<_>>>()?,
    };
    joint_loss_with_teachers(g, leaf_logits, &teachers, labels, cfg)
}

/// Joint objective where the peer distributions come from `teacher_logits`
/// rather than from `leaf_logits` directly. Passing constants here freezes
/// the teachers, which is what the detached objective differentiates.
pub fn joint_loss_with_teachers(
    g: &mut Graph,
    leaf_logits: &[NodeId],
    teacher_logits: &[NodeId],
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<JointLoss> {
    cfg.validate()?;
    let k = leaf_logits.len();
    if k == 0 || teacher_logits.len() != k {
        return Err(Error::TooFewBranches(k));
    }
    let t = cfg.temperature;
    let distill_weight = cfg.alpha * t * t;

    let (mut ce_sum, mut distill_sum) = (0.0, 0.0);
    let mut terms = Vec::with_capacity(k);
    let (students, teachers) = if k > 1 {
        let students = leaf_logits
            .iter()
            .map(|&z| g.log_softmax(z, t))
            .collect::<Result<Vec<_>>>()?;
        let teachers = leaf_logits
            .iter()
            .zip(teacher_logits)
            .zip(&students)
            .map(|((&z, &tz), &s)| if z == tz { Ok(s) } else { g.log_softmax(tz, t) })
            .collect::<Result<Vec<_>>>()?;
        (students, teachers)
    } else {
        (Vec::new(), Vec::new())
    };
    for (idx, &z) in leaf_logits.iter().enumerate() {
        let ce = ce_loss(g, z, labels)?;
        ce_sum += g.value(ce).data()[0];
        let mut term = g.scale(ce, 1.0 - cfg.alpha)?;
        if k > 1 {
            let d = peer_distill_loss(g, idx, students[idx], &teachers)?;
            distill_sum += g.value(d).data()[0];
            let weighted = g.scale(d, distill_weight)?;
            term = g.add(term, weighted)?;
        }
        terms.push(term);
    }
    let column = terms
        .iter()
        .map(|&t| g.reshape(t, vec![1]))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat(&column, 0)?;
    let total = g.sum(stacked)?;
    Ok(JointLoss {
        total,
        ce: ce_sum,
        distill: distill_sum,
    })
}
