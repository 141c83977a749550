//! Robustness and feature-geometry measurements.

mod ttest;

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use ttest::{student_t_sf, t_test, SignificanceReport};

use crate::attack::{self, AttackConfig, AttackKind, Target};
use crate::data::Dataset;
use crate::model::{classes, Model};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Outcome of the budget search around one input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Delta {
    /// The input is already misclassified, so no budget is safe.
    Misclassified,
    /// The oracle fails at `lower` and succeeds at `upper`.
    Bracket { lower: f64, upper: f64 },
    /// The oracle never succeeded up to this budget.
    AtLeast { budget: f64 },
}

impl Delta {
    /// Point estimate: the smallest budget seen to succeed, 0 when
    /// misclassified, and the search limit when nothing succeeded.
    pub fn estimate(&self) -> f64 {
        match *self {
            Self::Misclassified => 0.0,
            Self::Bracket { upper, .. } => upper,
            Self::AtLeast { budget } => budget,
        }
    }
}

/// Bisects `[0, max_budget]` for the smallest budget at which `oracle`
/// reports success. The number of oracle calls depends only on
/// `max_budget / tolerance`, so oracles compared on the same grid give
/// comparable brackets.
pub fn delta_search(
    correctly_classified: bool,
    mut oracle: impl FnMut(f64) -> Result<bool>,
    max_budget: f64,
    tolerance: f64,
) -> Result<Delta> {
    if !(max_budget > 0.0) || !(tolerance > 0.0) {
        return Err(Error::Config(alloc::format!(
            "delta search needs max_budget > 0 and tolerance > 0, got {max_budget} and {tolerance}"
        )));
    }
    if !correctly_classified {
        return Ok(Delta::Misclassified);
    }
    if !oracle(max_budget)? {
        return Ok(Delta::AtLeast { budget: max_budget });
    }
    let (mut lower, mut upper) = (0.0, max_budget);
    while upper - lower > tolerance {
        let mid = 0.5 * (lower + upper);
        if oracle(mid)? {
            upper = mid;
        } else {
            lower = mid;
        }
    }
    Ok(Delta::Bracket { lower, upper })
}

/// Local-robustness radius of `model` at `x: [1, C, H, W]` with respect to
/// `label`, using `oracle(budget) -> success`.
pub fn local_robustness_delta(
    model: &Model,
    x: &Tensor,
    label: usize,
    oracle: impl FnMut(f64) -> Result<bool>,
    max_budget: f64,
    tolerance: f64,
) -> Result<Delta> {
    let correct = model.predict_class(x)?.first() == Some(&label);
    delta_search(correct, oracle, max_budget, tolerance)
}

/// Success of a gradient attack at L-infinity budget `eps`. The step size
/// is rescaled with the budget so the step count covers the ball.
pub fn linf_oracle<'a>(
    target: Target<'a>,
    x: &'a Tensor,
    label: usize,
    template: AttackConfig,
    seed: u64,
) -> impl FnMut(f64) -> Result<bool> + 'a {
    move |eps| {
        let mut cfg = template;
        cfg.epsilon = eps;
        if matches!(cfg.kind, AttackKind::Bim | AttackKind::Pgd) {
            cfg.step_size = (2.5 * eps / cfg.steps as f64).max(f64::MIN_POSITIVE);
        }
        if eps == 0.0 && matches!(cfg.kind, AttackKind::Bim | AttackKind::Pgd) {
            cfg.kind = AttackKind::Fgsm;
        }
        let r = attack::run(&target, x, &[label], &cfg, &[seed])?;
        Ok(r[0].success)
    }
}

/// L2 oracle backed by one Carlini-Wagner run: success at budget `d` when
/// the attack found an example within L2 distance `d`.
pub fn cw_l2_oracle(
    target: &Target<'_>,
    x: &Tensor,
    label: usize,
    config: &AttackConfig,
) -> Result<impl FnMut(f64) -> Result<bool>> {
    let r = attack::cw_l2(target, x, &[label], config)?;
    let (ok, dist) = (r[0].success, r[0].l2);
    Ok(move |d: f64| Ok(ok && dist <= d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub count: usize,
    pub mean: Vec<f64>,
    /// Mean squared distance of the class's features to `mean`.
    pub intra_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature_dim: usize,
    /// Classes with at least one sample, ascending.
    pub classes: Vec<ClassStats>,
    /// Classes without samples.
    pub omitted: Vec<usize>,
    /// Unweighted mean of `intra_variance` over present classes.
    pub mean_intra_variance: f64,
    /// `(a, b, |mean_a - mean_b|)` for every present pair `a < b`.
    pub pairwise_distances: Vec<(usize, usize, f64)>,
    /// Smallest pairwise distance between class means (0 with fewer than
    /// two classes).
    pub min_margin: f64,
    /// `mean_intra_variance` over the mean squared pairwise distance; a
    /// scale-free companion to the raw variance.
    pub intra_inter_ratio: f64,
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Statistics of `features: [N, d]` grouped by `labels`. Rows are summed in
/// a canonical order, so the result does not depend on sample order.
pub fn feature_stats_from(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<FeatureStats> {
    crate::loss::check_labels(features.batch_size(), labels, num_classes)?;
    let d = features.row_len();
    let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        groups[y].push(features.row(i));
    }
    let mut stats = Vec::new();
    let mut omitted = Vec::new();
    for (class, rows) in groups.iter_mut().enumerate() {
        if rows.is_empty() {
            omitted.push(class);
            continue;
        }
        rows.sort_by(|a, b| lex(a, b));
        let count = rows.len();
        let mut mean = vec![0.0; d];
        for r in rows.iter() {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let intra: f64 = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
            .sum::<f64>()
            / count as f64;
        stats.push(ClassStats {
            class,
            count,
            mean,
            intra_variance: intra,
        });
    }
    if stats.is_empty() {
        return Err(Error::Empty);
    }
    let mean_intra = stats.iter().map(|c| c.intra_variance).sum::<f64>() / stats.len() as f64;
    let mut pairwise = Vec::new();
    for (i, a) in stats.iter().enumerate() {
        for b in &stats[i + 1..] {
            pairwise.push((a.class, b.class, dist(&a.mean, &b.mean)));
        }
    }
    let min_margin = pairwise
        .iter()
        .map(|p| p.2)
        .min_by(f64::total_cmp)
        .unwrap_or(0.0);
    let mean_sq_inter = if pairwise.is_empty() {
        0.0
    } else {
        pairwise.iter().map(|p| p.2 * p.2).sum::<f64>() / pairwise.len() as f64
    };
    Ok(FeatureStats {
        feature_dim: d,
        classes: stats,
        omitted,
        mean_intra_variance: mean_intra,
        pairwise_distances: pairwise,
        min_margin,
        intra_inter_ratio: if mean_sq_inter > 0.0 {
            mean_intra / mean_sq_inter
        } else {
            f64::INFINITY
        },
    })
}

/// Penultimate-layer features of `model` on every sample of `data`.
pub fn feature_stats(model: &Model, data: &Dataset) -> Result<FeatureStats> {
    let rows = feature_rows(model, data)?;
    let d = model.feature_dim();
    let mut flat = Vec::with_capacity(rows.len() * d);
    for r in &rows {
        flat.extend_from_slice(&r.features);
    }
    let features = Tensor::new(vec![rows.len(), d], flat)?;
    feature_stats_from(&features, &data.labels, data.num_classes)
}

/// One sample of a feature dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub features: Vec<f64>,
    pub label: usize,
    pub predicted: usize,
}

/// Features and predictions for every sample, in dataset order.
pub fn feature_rows(model: &Model, data: &Dataset) -> Result<Vec<FeatureRow>> {
    let mut out = Vec::with_capacity(data.len());
    let mut i = 0;
    while i < data.len() {
        let j = (i + 500).min(data.len());
        let idx: Vec<usize> = (i..j).collect();
        let (x, y) = data.batch(&idx);
        let p = model.predict(&x)?;
        let pred = classes(&p.logits);
        for k in 0..idx.len() {
            out.push(FeatureRow {
                features: p.features.row(k).to_vec(),
                label: y[k],
                predicted: pred[k],
            });
        }
        i = j;
    }
    Ok(out)
}
