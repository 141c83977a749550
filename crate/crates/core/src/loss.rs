//! Softmax cross-entropy, center loss, and the per-class center bank.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// How class centers move after each mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterRule {
    /// `c_j -= alpha * sum_{k: y_k = j} (c_j - f_k) / (1 + count_j)`.
    #[default]
    BatchAveraged,
    /// Plain gradient step on `lambda/2 * mean_k |f_k - c_{y_k}|^2`:
    /// `c_j -= alpha * lambda * sum_{k: y_k = j} (c_j - f_k) / m`.
    Gradient,
}

/// One center per class plus the center-loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterBank {
    /// `[num_classes, feature_dim]`.
    pub centers: Tensor,
    /// Center learning rate, in `(0, 1]`.
    pub alpha: f64,
    /// Weight of the center term in the joint loss.
    pub lambda: f64,
    #[serde(default)]
    pub rule: CenterRule,
}

impl CenterBank {
    /// Zero-initialized centers.
    pub fn new(num_classes: usize, feature_dim: usize, alpha: f64, lambda: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("center alpha must be in (0, 1], got {alpha}")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self {
            centers: Tensor::zeros(&[num_classes, feature_dim]),
            alpha,
            lambda,
            rule: CenterRule::BatchAveraged,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.batch_size()
    }

    pub fn feature_dim(&self) -> usize {
        self.centers.row_len()
    }

    pub fn center(&self, class: usize) -> &[f64] {
        self.centers.row(class)
    }

    fn check(&self, features: &[usize], labels: &[usize]) -> Result<()> {
        if features.len() != 2 || features[1] != self.feature_dim() {
            return Err(Error::Shape {
                op: "center_loss",
                detail: format!(
                    "features {features:?} vs centers of dimension {}",
                    self.feature_dim()
                ),
            });
        }
        check_labels(features[0], labels, self.num_classes())
    }

    /// Moves the centers of the classes present in the batch toward their
    /// features. Classes absent from the batch are untouched.
    pub fn update(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        self.check(features.shape(), labels)?;
        let (n, d) = (self.num_classes(), self.feature_dim());
        let mut delta = vec![0.0; n * d];
        let mut count = vec![0usize; n];
        for (k, &y) in labels.iter().enumerate() {
            count[y] += 1;
            let c = self.centers.row(y);
            for ((dst, &cj), &f) in delta[y * d..(y + 1) * d].iter_mut().zip(c).zip(features.row(k)) {
                *dst += cj - f;
            }
        }
        let m = labels.len() as f64;
        for j in 0..n {
            if count[j] == 0 {
                continue;
            }
            let scale = match self.rule {
                CenterRule::BatchAveraged => self.alpha / (1.0 + count[j] as f64),
                CenterRule::Gradient => self.alpha * self.lambda / m,
            };
            for (c, dl) in self.centers.row_mut(j).iter_mut().zip(&delta[j * d..(j + 1) * d]) {
                *c -= scale * dl;
            }
        }
        Ok(())
    }
}

pub(crate) fn check_labels(batch: usize, labels: &[usize], num_classes: usize) -> Result<()> {
    if batch != labels.len() {
        return Err(Error::BatchMismatch {
            what: "inputs",
            left: batch,
            other: "labels",
            right: labels.len(),
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            num_classes,
        });
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(g: &mut Graph<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 {
        return Err(Error::Shape {
            op: "cross_entropy",
            detail: format!("logits must be [B, n], got {s:?}"),
        });
    }
    check_labels(s[0], labels, s[1])?;
    let lsm = g.log_softmax(logits)?;
    let picked = g.gather(lsm, labels)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / labels.len() as f64))
}

/// `1/2 * mean_k |features_k - c_{y_k}|^2`. Centers enter the graph as
/// constants.
pub fn center_loss(g: &mut Graph<'_>, features: Var, labels: &[usize], bank: &CenterBank) -> Result<Var> {
    bank.check(g.shape(features), labels)?;
    let own = bank.centers.select_rows(labels);
    let c = g.constant(own);
    let diff = g.sub(features, c)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.scale(total, 0.5 / labels.len() as f64))
}

/// `cross_entropy + lambda * center_loss`. With no bank or `lambda == 0`
/// the cross-entropy node itself is returned.
pub fn joint_loss(
    g: &mut Graph<'_>,
    logits: Var,
    features: Var,
    labels: &[usize],
    bank: Option<&CenterBank>,
) -> Result<Var> {
    Ok(joint_loss_parts(g, logits, features, labels, bank)?.total)
}

/// Graph nodes of the joint loss and its two terms.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub cross_entropy: Var,
    /// Unweighted center loss; absent when it does not contribute.
    pub center: Option<Var>,
}

pub fn joint_loss_parts(
    g: &mut Graph<'_>,
    logits: Var,
    features: Var,
    labels: &[usize],
    bank: Option<&CenterBank>,
) -> Result<JointLoss> {
    let ce = cross_entropy(g, logits, labels)?;
    match bank {
        Some(bank) if bank.lambda != 0.0 => {
            let cl = center_loss(g, features, labels, bank)?;
            let weighted = g.scale(cl, bank.lambda);
            Ok(JointLoss {
                total: g.add(ce, weighted)?,
                cross_entropy: ce,
                center: Some(cl),
            })
        }
        _ => Ok(JointLoss {
            total: ce,
            cross_entropy: ce,
            center: None,
        }),
    }
}

/// Plain (non-graph) reference used by tests and diagnostics: returns the
/// per-sample `0.5 * |f - c_y|^2` values.
pub fn center_penalties(features: &Tensor, labels: &[usize], bank: &CenterBank) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(k, &y)| {
            0.5 * features
                .row(k)
                .iter()
                .zip(bank.center(y))
                .map(|(f, c)| (f - c) * (f - c))
                .sum::<f64>()
        })
        .collect()
}
