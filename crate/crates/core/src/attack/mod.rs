//! Adversarial example generators.
//!
//! White-box attacks ([`fgsm`], [`bim`], [`pgd`], [`cw_l2`]) differentiate
//! the attacked model's own loss with respect to the input. The black-box
//! [`one_pixel`] search only sees class probabilities through the
//! [`Oracle`] trait.
//!
//! All attacks work on batches `[B, C, H, W]` and operate in whatever space
//! the model consumes (normalized pixels for MNIST), bounded by
//! `AttackConfig::clip`. A result counts as a success when the adversarial
//! input is classified differently from the attacked label.

mod cw;
mod gradient;
mod one_pixel;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use cw::{cw_l2, tanh_decode, tanh_encode};
pub use gradient::{bim, fgsm, iterative, pgd};
pub use one_pixel::one_pixel;

use crate::data::Dataset;
use crate::graph::Graph;
use crate::loss::{self, CenterBank};
use crate::model::{classes, Model};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    Cw,
    OnePixel,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fgsm => "fgsm",
            Self::Bim => "bim",
            Self::Pgd => "pgd",
            Self::Cw => "cw",
            Self::OnePixel => "one-pixel",
        }
    }
}

/// Loss the gradient attacks ascend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackLoss {
    /// The attacked model's training objective (cross-entropy plus its
    /// weighted center loss when it has a center bank).
    #[default]
    Joint,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CwConfig {
    /// Margin `kappa >= 0` required on a successful example.
    pub confidence: f64,
    pub binary_search_steps: usize,
    pub initial_const: f64,
    pub max_iterations: usize,
    pub learning_rate: f64,
    /// Stop an inner optimization once the loss stops improving.
    pub abort_early: bool,
}

impl Default for CwConfig {
    fn default() -> Self {
        Self {
            confidence: 0.0,
            binary_search_steps: 9,
            initial_const: 1e-2,
            max_iterations: 1000,
            learning_rate: 1e-2,
            abort_early: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnePixelConfig {
    pub population: usize,
    pub generations: usize,
    /// Differential weight of the `rand/1` mutation.
    pub mutation: f64,
    pub pixels: usize,
}

impl Default for OnePixelConfig {
    fn default() -> Self {
        Self {
            population: 400,
            generations: 100,
            mutation: 0.5,
            pixels: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-infinity budget, in the model's input units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    #[serde(default)]
    pub loss: AttackLoss,
    #[serde(default)]
    pub cw: CwConfig,
    #[serde(default)]
    pub one_pixel: OnePixelConfig,
    /// Input box `[lo, hi]`.
    pub clip: (f64, f64),
}

impl AttackConfig {
    fn base(kind: AttackKind, epsilon: f64, clip: (f64, f64)) -> Self {
        Self {
            kind,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: false,
            loss: AttackLoss::Joint,
            cw: CwConfig::default(),
            one_pixel: OnePixelConfig::default(),
            clip,
        }
    }

    pub fn fgsm(epsilon: f64, clip: (f64, f64)) -> Self {
        Self::base(AttackKind::Fgsm, epsilon, clip)
    }

    /// 10 steps of `epsilon / 4`.
    pub fn bim(epsilon: f64, clip: (f64, f64)) -> Self {
        Self {
            steps: 10,
            step_size: epsilon / 4.0,
            ..Self::base(AttackKind::Bim, epsilon, clip)
        }
    }

    /// 40 steps of 0.01 from a uniform random start.
    pub fn pgd(epsilon: f64, clip: (f64, f64)) -> Self {
        Self {
            steps: 40,
            step_size: 0.01,
            random_start: true,
            ..Self::base(AttackKind::Pgd, epsilon, clip)
        }
    }

    pub fn cw(clip: (f64, f64)) -> Self {
        Self::base(AttackKind::Cw, 0.0, clip)
    }

    pub fn one_pixel(clip: (f64, f64)) -> Self {
        Self::base(AttackKind::OnePixel, 0.0, clip)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if !(self.clip.0 < self.clip.1) {
            return bad(format!("clip lo must be below hi, got {:?}", self.clip));
        }
        match self.kind {
            AttackKind::Bim | AttackKind::Pgd => {
                if self.steps < 1 {
                    return bad("steps must be >= 1".into());
                }
                if !(self.step_size > 0.0) {
                    return bad(format!("step_size must be > 0, got {}", self.step_size));
                }
            }
            AttackKind::Cw => {
                let c = &self.cw;
                if !(c.confidence >= 0.0) {
                    return bad(format!("cw.confidence must be >= 0, got {}", c.confidence));
                }
                if c.binary_search_steps < 1 || c.max_iterations < 1 {
                    return bad("cw.binary_search_steps and cw.max_iterations must be >= 1".into());
                }
                if !(c.initial_const > 0.0) || !(c.learning_rate > 0.0) {
                    return bad("cw.initial_const and cw.learning_rate must be > 0".into());
                }
            }
            AttackKind::OnePixel => {
                let o = &self.one_pixel;
                if o.pixels != 1 {
                    return bad(format!("one_pixel.pixels must be 1, got {}", o.pixels));
                }
                if o.population < 4 {
                    return bad("one_pixel.population must be >= 4".into());
                }
            }
            AttackKind::Fgsm => {}
        }
        Ok(())
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if matches!(self.kind, AttackKind::Bim | AttackKind::Pgd)
            && (self.steps as f64) * self.step_size < self.epsilon
        {
            w.push(format!(
                "{}: steps * step_size = {} cannot reach epsilon = {}",
                self.kind.name(),
                self.steps as f64 * self.step_size,
                self.epsilon
            ));
        }
        w
    }
}

/// Outcome for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    /// `[C, H, W]`.
    pub adversarial: Tensor,
    /// `adversarial_class != label`.
    pub success: bool,
    pub label: usize,
    pub original_class: usize,
    pub adversarial_class: usize,
    pub linf: f64,
    pub l2: f64,
    /// Number of pixel locations (all channels) that changed.
    pub l0: usize,
    /// Gradient iterations for white-box attacks, model queries for
    /// one-pixel.
    pub iterations: usize,
}

/// L-inf, L2 and per-location L0 distance between two `[C, H, W]` rows.
pub fn norms(x: &[f64], adv: &[f64], channels: usize) -> (f64, f64, usize) {
    let mut linf = 0.0f64;
    let mut l2 = 0.0;
    for (a, b) in x.iter().zip(adv) {
        let d = libm::fabs(b - a);
        linf = linf.max(d);
        l2 += d * d;
    }
    let plane = x.len() / channels.max(1);
    let l0 = (0..plane)
        .filter(|&p| (0..channels).any(|c| x[c * plane + p] != adv[c * plane + p]))
        .count();
    (linf, libm::sqrt(l2), l0)
}

/// White-box access to a model and the loss it was trained with.
#[derive(Debug, Clone, Copy)]
pub struct Target<'m> {
    pub model: &'m Model,
    pub bank: Option<&'m CenterBank>,
    pub loss: AttackLoss,
}

impl<'m> Target<'m> {
    pub fn new(model: &'m Model, bank: Option<&'m CenterBank>) -> Self {
        Self {
            model,
            bank,
            loss: AttackLoss::Joint,
        }
    }

    pub fn with_loss(mut self, loss: AttackLoss) -> Self {
        self.loss = loss;
        self
    }
}

/// Loss value and `d loss / d x` for a batch; model parameters are not
/// touched and receive no gradient.
pub fn input_gradient(target: &Target<'_>, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let xv = g.leaf(x, true);
    let f = target.model.forward(&mut g, xv, false)?;
    let bank = match target.loss {
        AttackLoss::Joint => target.bank,
        AttackLoss::CrossEntropy => None,
    };
    let l = loss::joint_loss(&mut g, f.logits, f.features, labels, bank)?;
    let value = g.value(l)[0];
    g.backward(l)?;
    Ok((value, g.grad(xv).expect("input requires grad")))
}

/// Black-box access: class probabilities only.
pub trait Oracle {
    fn input_shape(&self) -> [usize; 3];
    fn num_classes(&self) -> usize;
    /// `[B, C, H, W] -> [B, num_classes]` probabilities.
    fn probabilities(&self, x: &Tensor) -> Result<Tensor>;
}

impl Oracle for Model {
    fn input_shape(&self) -> [usize; 3] {
        self.descriptor().input_shape
    }

    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.predict(x)?.probs)
    }
}

pub(crate) fn finish(
    model: &Model,
    x: &Tensor,
    adv: Tensor,
    labels: &[usize],
    original: &[usize],
    iterations: usize,
) -> Result<Vec<AttackResult>> {
    let adv_classes = model.predict_class(&adv)?;
    Ok(package(x, adv, labels, original, &adv_classes, |_| iterations))
}

pub(crate) fn package(
    x: &Tensor,
    adv: Tensor,
    labels: &[usize],
    original: &[usize],
    adv_classes: &[usize],
    iterations: impl Fn(usize) -> usize,
) -> Vec<AttackResult> {
    let row_shape = &x.shape()[1..];
    let channels = row_shape.first().copied().unwrap_or(1);
    (0..labels.len())
        .map(|i| {
            let (linf, l2, l0) = norms(x.row(i), adv.row(i), channels);
            AttackResult {
                adversarial: Tensor::new(row_shape.to_vec(), adv.row(i).to_vec())
                    .expect("row shape"),
                success: adv_classes[i] != labels[i],
                label: labels[i],
                original_class: original[i],
                adversarial_class: adv_classes[i],
                linf,
                l2,
                l0,
                iterations: iterations(i),
            }
        })
        .collect()
}

/// Runs the configured attack on a batch. `seeds[i]` drives any
/// randomness for sample `i`.
pub fn run(
    target: &Target<'_>,
    x: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    seeds: &[u64],
) -> Result<Vec<AttackResult>> {
    config.validate()?;
    match config.kind {
        AttackKind::Fgsm => fgsm(target, x, labels, config),
        AttackKind::Bim => bim(target, x, labels, config),
        AttackKind::Pgd => pgd(target, x, labels, config, seeds),
        AttackKind::Cw => cw_l2(target, x, labels, config),
        AttackKind::OnePixel => {
            let mut out = Vec::with_capacity(labels.len());
            for (i, &label) in labels.iter().enumerate() {
                let xi = x.select_rows(&[i]);
                out.push(one_pixel(target.model, &xi, label, config, seeds[i])?);
            }
            Ok(out)
        }
    }
}

/// Aggregate over an evaluated slice. Counts are exact; merging partial
/// summaries is order independent for everything but the float norm sums.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub samples: usize,
    pub clean_correct: usize,
    pub adversarial_correct: usize,
    pub successes: usize,
    pub sum_linf: f64,
    pub sum_l2: f64,
    pub sum_l0: usize,
    pub iterations: usize,
}

impl AttackSummary {
    pub fn add(&mut self, r: &AttackResult) {
        self.samples += 1;
        self.clean_correct += usize::from(r.original_class == r.label);
        self.adversarial_correct += usize::from(r.adversarial_class == r.label);
        self.successes += usize::from(r.success);
        self.sum_linf += r.linf;
        self.sum_l2 += r.l2;
        self.sum_l0 += r.l0;
        self.iterations += r.iterations;
    }

    pub fn merge(mut self, other: &AttackSummary) -> Self {
        self.samples += other.samples;
        self.clean_correct += other.clean_correct;
        self.adversarial_correct += other.adversarial_correct;
        self.successes += other.successes;
        self.sum_linf += other.sum_linf;
        self.sum_l2 += other.sum_l2;
        self.sum_l0 += other.sum_l0;
        self.iterations += other.iterations;
        self
    }

    pub fn clean_accuracy(&self) -> f64 {
        self.clean_correct as f64 / self.samples.max(1) as f64
    }

    /// Fraction of all evaluated samples still classified correctly after
    /// the attack, whether or not they were correct before it.
    pub fn adversarial_accuracy(&self) -> f64 {
        self.adversarial_correct as f64 / self.samples.max(1) as f64
    }

    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.samples.max(1) as f64
    }

    pub fn mean_linf(&self) -> f64 {
        self.sum_linf / self.samples.max(1) as f64
    }

    pub fn mean_l2(&self) -> f64 {
        self.sum_l2 / self.samples.max(1) as f64
    }
}

/// Attacks samples `[start, end)` of `data` in chunks of `chunk`. Sample
/// `i` always uses seed `derive(seed, .., i)`, so any partition of the
/// index range produces the same per-sample results.
pub fn evaluate_range(
    target: &Target<'_>,
    data: &Dataset,
    config: &AttackConfig,
    seed: u64,
    start: usize,
    end: usize,
    chunk: usize,
) -> Result<AttackSummary> {
    let end = end.min(data.len());
    if start >= end {
        return Err(Error::Empty);
    }
    config.validate()?;
    let stream = match config.kind {
        AttackKind::OnePixel => rng::stream::ONE_PIXEL,
        _ => rng::stream::PGD_START,
    };
    let mut summary = AttackSummary::default();
    let mut i = start;
    while i < end {
        let j = (i + chunk.max(1)).min(end);
        let idx: Vec<usize> = (i..j).collect();
        let (x, y) = data.batch(&idx);
        let seeds: Vec<u64> = idx.iter().map(|&k| rng::derive(seed, stream, k as u64)).collect();
        for r in run(target, &x, &y, config, &seeds)? {
            summary.add(&r);
        }
        i = j;
    }
    Ok(summary)
}

/// Adversarial accuracy and norm summary over the whole dataset.
pub fn evaluate_attack(
    target: &Target<'_>,
    data: &Dataset,
    config: &AttackConfig,
    seed: u64,
) -> Result<AttackSummary> {
    evaluate_range(target, data, config, seed, 0, data.len(), 128)
}

pub(crate) fn clean_classes(model: &Model, x: &Tensor) -> Result<Vec<usize>> {
    Ok(classes(&model.predict(x)?.logits))
}
