//! Sign-gradient L-infinity attacks.

use alloc::vec::Vec;

use rand::Rng as _;

use super::{clean_classes, finish, input_gradient, AttackConfig, AttackResult, Target};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip(x + eps * sign(grad_x L(x, y)))`.
pub fn fgsm(
    target: &Target<'_>,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    let (lo, hi) = config.clip;
    let original = clean_classes(target.model, x)?;
    let (_, grad) = input_gradient(target, x, labels)?;
    let mut adv = x.clone();
    for (a, &gv) in adv.data_mut().iter_mut().zip(grad.data()) {
        *a = (*a + config.epsilon * sign(gv)).clamp(lo, hi);
    }
    finish(target.model, x, adv, labels, &original, 1)
}

/// Projected sign-gradient ascent from `start`: each step moves by
/// `step_size * sign(grad)`, then projects onto the `epsilon` ball around
/// `x` and onto the clip box.
pub fn iterative(
    target: &Target<'_>,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    start: Tensor,
) -> Result<Vec<AttackResult>> {
    if start.shape() != x.shape() {
        return Err(Error::Shape {
            op: "iterative",
            detail: alloc::format!("start {:?} vs input {:?}", start.shape(), x.shape()),
        });
    }
    let (lo, hi) = config.clip;
    let eps = config.epsilon;
    let original = clean_classes(target.model, x)?;
    let mut adv = start;
    for _ in 0..config.steps {
        let (_, grad) = input_gradient(target, &adv, labels)?;
        for ((a, &gv), &x0) in adv.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
            let stepped = *a + config.step_size * sign(gv);
            *a = stepped.clamp(x0 - eps, x0 + eps).clamp(lo, hi);
        }
    }
    finish(target.model, x, adv, labels, &original, config.steps)
}

/// Basic iterative method: [`iterative`] started at `x`.
pub fn bim(
    target: &Target<'_>,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    iterative(target, x, labels, config, x.clone())
}

/// BIM from a uniform random point of the `epsilon` ball (clipped to the
/// box) when `random_start` is set. `seeds[i]` seeds sample `i`.
pub fn pgd(
    target: &Target<'_>,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    seeds: &[u64],
) -> Result<Vec<AttackResult>> {
    if !config.random_start {
        return bim(target, x, labels, config);
    }
    let start = random_start(x, config, seeds)?;
    iterative(target, x, labels, config, start)
}

pub(crate) fn random_start(x: &Tensor, config: &AttackConfig, seeds: &[u64]) -> Result<Tensor> {
    let b = x.batch_size();
    if seeds.len() != b {
        return Err(Error::BatchMismatch {
            what: "inputs",
            left: b,
            other: "seeds",
            right: seeds.len(),
        });
    }
    let (lo, hi) = config.clip;
    let eps = config.epsilon;
    let mut start = x.clone();
    for (i, &seed) in seeds.iter().enumerate() {
        let mut r = rng::rng(seed);
        for v in start.row_mut(i) {
            let noise = if eps > 0.0 { r.gen_range(-eps..=eps) } else { 0.0 };
            *v = (*v + noise).clamp(lo, hi);
        }
    }
    Ok(start)
}
