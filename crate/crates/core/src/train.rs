//! Mini-batch SGD on the joint loss, with optional delayed adversarial
//! training.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, Target};
use crate::data::{batches, Dataset};
use crate::graph::Graph;
use crate::loss::{self, CenterBank, CenterRule};
use crate::model::{classes, Model};
use crate::optim::Sgd;
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialConfig {
    pub enabled: bool,
    /// Clean-only epochs before injection may start.
    pub delay_epochs: usize,
    /// Injection also waits until test accuracy reaches
    /// `readiness_fraction * target_accuracy`.
    pub readiness_fraction: f64,
    /// Expected clean accuracy of the model, in `[0, 1]`. `None` disables
    /// the readiness gate.
    pub target_accuracy: Option<f64>,
    pub attack: AttackConfig,
    /// Fraction of every post-injection batch replaced by adversarial
    /// versions of its own samples.
    pub mix_ratio: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            delay_epochs: 10,
            readiness_fraction: 0.9,
            target_accuracy: None,
            attack: AttackConfig::bim(0.3, (0.0, 1.0)),
            mix_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Fractions of `epochs` at which the learning rate is divided by
    /// `lr_drop_factor`.
    pub lr_drops: Vec<f64>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    /// Center-loss weight: 0 trains the softmax-only baseline.
    pub lambda: f64,
    pub center_alpha: f64,
    pub center_rule: CenterRule,
    pub adversarial: AdversarialConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            initial_lr: 0.1,
            lr_drops: alloc::vec![0.5, 0.75],
            lr_drop_factor: 10.0,
            momentum: 0.9,
            lambda: 0.0,
            center_alpha: 0.5,
            center_rule: CenterRule::BatchAveraged,
            adversarial: AdversarialConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.initial_lr > 0.0) {
            return bad(format!("initial_lr must be > 0, got {}", self.initial_lr));
        }
        if !(self.lr_drop_factor > 0.0) {
            return bad(format!("lr_drop_factor must be > 0, got {}", self.lr_drop_factor));
        }
        if let Some(f) = self.lr_drops.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
            return bad(format!("lr_drops entries must be in (0, 1), got {f}"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.center_alpha > 0.0 && self.center_alpha <= 1.0) {
            return bad(format!("center_alpha must be in (0, 1], got {}", self.center_alpha));
        }
        let adv = &self.adversarial;
        if adv.enabled {
            if !(0.0..=1.0).contains(&adv.mix_ratio) {
                return bad(format!("adversarial.mix_ratio must be in [0, 1], got {}", adv.mix_ratio));
            }
            if !(0.0..=1.0).contains(&adv.readiness_fraction) {
                return bad("adversarial.readiness_fraction must be in [0, 1]".into());
            }
            adv.attack.validate()?;
        }
        Ok(())
    }

    /// Epochs (0-based) from which each drop applies.
    pub fn milestones(&self) -> Vec<usize> {
        self.lr_drops
            .iter()
            .map(|f| libm::floor(f * self.epochs as f64) as usize)
            .collect()
    }

    /// Piecewise-constant learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones().iter().filter(|&&m| epoch >= m).count();
        self.initial_lr / libm::pow(self.lr_drop_factor, drops as f64)
    }

    /// Number of adversarial samples in a batch of `size` after injection.
    pub fn adversarial_count(&self, size: usize) -> usize {
        libm::round(size as f64 * self.adversarial.mix_ratio) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub mean_cross_entropy: f64,
    pub mean_center: f64,
    pub mean_total: f64,
    pub median_total: f64,
    pub test_accuracy: f64,
    pub clean_samples: usize,
    pub adversarial_samples: usize,
}

/// Everything needed to audit or repeat a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub architecture: crate::model::ArchitectureDescriptor,
    pub epochs: Vec<EpochMetrics>,
    /// First epoch that trained on adversarial samples.
    pub injection_epoch: Option<usize>,
    pub final_clean_accuracy: f64,
    pub best_clean_accuracy: f64,
    pub best_epoch: usize,
    /// Attack name to adversarial accuracy, filled in by whoever evaluates
    /// the final model.
    #[serde(default)]
    pub adversarial_accuracy: alloc::collections::BTreeMap<String, f64>,
    /// Filled in by the caller, which owns a clock.
    pub wall_time_secs: Option<f64>,
}

/// Hook called after every epoch, e.g. to write checkpoints.
pub trait TrainObserver {
    fn epoch_end(&mut self, _metrics: &EpochMetrics, _model: &Model, _bank: &CenterBank, _is_best: bool) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Fraction of `data` that `model` classifies correctly.
pub fn evaluate_clean(model: &Model, data: &Dataset) -> Result<f64> {
    Ok(count_correct(model, data, 0, data.len())? as f64 / data.len().max(1) as f64)
}

/// Correct predictions among samples `[start, end)`.
pub fn count_correct(model: &Model, data: &Dataset, start: usize, end: usize) -> Result<usize> {
    let mut correct = 0;
    let mut i = start;
    while i < end {
        let j = (i + 500).min(end);
        let idx: Vec<usize> = (i..j).collect();
        let (x, y) = data.batch(&idx);
        let pred = classes(&model.predict(&x)?.logits);
        correct += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
        i = j;
    }
    Ok(correct)
}

/// Trains on clean data only (the `adversarial` section is ignored).
pub fn train(
    model: &mut Model,
    bank: &mut CenterBank,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<ExperimentRecord> {
    run(model, bank, train_set, test_set, config, false, observer)
}

/// Trains with adversarial examples generated on the fly from the current
/// parameters once both the delay and the readiness gate have passed.
pub fn adversarial_train(
    model: &mut Model,
    bank: &mut CenterBank,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<ExperimentRecord> {
    if !config.adversarial.enabled {
        return Err(Error::Config(
            "adversarial training requested but adversarial.enabled is false".into(),
        ));
    }
    run(model, bank, train_set, test_set, config, true, observer)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn run(
    model: &mut Model,
    bank: &mut CenterBank,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    adversarial: bool,
    observer: &mut dyn TrainObserver,
) -> Result<ExperimentRecord> {
    config.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Empty);
    }
    if bank.lambda != config.lambda {
        return Err(Error::Config(format!(
            "center bank lambda {} differs from config lambda {}",
            bank.lambda, config.lambda
        )));
    }
    if bank.num_classes() != model.num_classes() || bank.feature_dim() != model.feature_dim() {
        return Err(Error::Config(format!(
            "center bank is {}x{}, model has {} classes and {} features",
            bank.num_classes(),
            bank.feature_dim(),
            model.num_classes(),
            model.feature_dim()
        )));
    }
    let use_centers = config.lambda != 0.0;
    if use_centers {
        bank.alpha = config.center_alpha;
        bank.rule = config.center_rule;
    }
    let adv_cfg = &config.adversarial;

    let mut sgd = Sgd::new(model.params(), config.momentum);
    let mut record = ExperimentRecord {
        config: config.clone(),
        seed: config.seed,
        architecture: *model.descriptor(),
        epochs: Vec::with_capacity(config.epochs),
        injection_epoch: None,
        final_clean_accuracy: 0.0,
        best_clean_accuracy: f64::NEG_INFINITY,
        best_epoch: 0,
        adversarial_accuracy: Default::default(),
        wall_time_secs: None,
    };
    let mut ready = adv_cfg.target_accuracy.is_none();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let inject = adversarial && epoch >= adv_cfg.delay_epochs && ready;
        if inject && record.injection_epoch.is_none() {
            record.injection_epoch = Some(epoch);
        }
        let epoch_seed = rng::derive(config.seed, rng::stream::SHUFFLE, epoch as u64);
        let mut losses = Vec::new();
        let (mut sum_ce, mut sum_center, mut sum_total) = (0.0, 0.0, 0.0);
        let (mut n_clean, mut n_adv) = (0usize, 0usize);

        for (batch_idx, idx) in batches(train_set.len(), config.batch_size, epoch_seed, true).enumerate() {
            let (mut x, y) = train_set.batch(&idx);
            if inject {
                let k = config.adversarial_count(idx.len());
                if k > 0 {
                    let head: Vec<usize> = (0..k).collect();
                    let xs = x.select_rows(&head);
                    let adv_root = rng::derive(config.seed, rng::stream::ADV_TRAIN, epoch as u64);
                    let seeds: Vec<u64> = idx[..k].iter().map(|&s| rng::derive(adv_root, 0, s as u64)).collect();
                    let target = Target::new(model, Some(bank)).with_loss(adv_cfg.attack.loss);
                    let results = attack::run(&target, &xs, &y[..k], &adv_cfg.attack, &seeds)?;
                    for (i, r) in results.iter().enumerate() {
                        x.row_mut(i).copy_from_slice(r.adversarial.data());
                    }
                }
                n_adv += k;
                n_clean += idx.len() - k;
            } else {
                n_clean += idx.len();
            }

            let (grads, parts, features) = {
                let mut g = Graph::new();
                let xv = g.leaf(&x, false);
                let f = model.forward(&mut g, xv, true)?;
                let jl = loss::joint_loss_parts(&mut g, f.logits, f.features, &y, use_centers.then_some(&*bank))?;
                let total = g.value(jl.total)[0];
                if !total.is_finite() {
                    return Err(Error::NumericalAbort {
                        loss: total,
                        epoch,
                        batch: batch_idx,
                        lr,
                    });
                }
                let ce = g.value(jl.cross_entropy)[0];
                let center = jl.center.map(|c| g.value(c)[0]).unwrap_or(0.0);
                let features = use_centers.then(|| g.tensor(f.features));
                g.backward(jl.total)?;
                let grads: Vec<_> = f.params.iter().map(|&p| g.grad(p).expect("param grad")).collect();
                (grads, (ce, center, total), features)
            };
            sgd.step(model.params_mut(), &grads, lr);
            if let Some(features) = features {
                bank.update(&features, &y)?;
            }
            sum_ce += parts.0;
            sum_center += parts.1;
            sum_total += parts.2;
            losses.push(parts.2);
        }

        let nb = losses.len() as f64;
        let acc = evaluate_clean(model, test_set)?;
        let metrics = EpochMetrics {
            epoch,
            lr,
            mean_cross_entropy: sum_ce / nb,
            mean_center: sum_center / nb,
            mean_total: sum_total / nb,
            median_total: median(&mut losses),
            test_accuracy: acc,
            clean_samples: n_clean,
            adversarial_samples: n_adv,
        };
        let is_best = acc > record.best_clean_accuracy;
        if is_best {
            record.best_clean_accuracy = acc;
            record.best_epoch = epoch;
        }
        if let Some(target) = adv_cfg.target_accuracy {
            if acc >= adv_cfg.readiness_fraction * target {
                ready = true;
            }
        }
        record.final_clean_accuracy = acc;
        observer.epoch_end(&metrics, model, bank, is_best)?;
        record.epochs.push(metrics);
    }
    Ok(record)
}
