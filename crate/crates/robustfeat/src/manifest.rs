//! Experiment manifests: a versioned TOML file naming the runs, the attack
//! grid and the data they use. The schema is documented in
//! `docs/MANIFEST.md`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use robustfeat_core::attack::{AttackConfig, AttackKind, AttackLoss, CwConfig, OnePixelConfig};
use robustfeat_core::data::NormMode;
use robustfeat_core::model::{Architecture, Init};
use robustfeat_core::train::{AdversarialConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    #[default]
    Mnist,
    /// Procedurally drawn seven-segment digits, for smoke tests and demos.
    Synthetic,
}

/// Units of attack budgets in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsilonUnits {
    /// The model's normalized input space.
    #[default]
    Normalized,
    /// `[0, 1]` pixel intensities, converted through the global std.
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub source: Source,
    /// MNIST directory; `ROBUSTFEAT_MNIST_DIR` or `--data` override it.
    pub dir: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_seed: u64,
    pub normalization: NormMode,
    pub epsilon_units: EpsilonUnits,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            source: Source::Mnist,
            dir: None,
            train_limit: None,
            test_limit: None,
            synthetic_train: 6000,
            synthetic_test: 1000,
            synthetic_seed: 1,
            normalization: NormMode::Global,
            epsilon_units: EpsilonUnits::Normalized,
        }
    }
}

/// Attack settings before budgets are converted and the clip box is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    #[serde(default)]
    pub epsilon: f64,
    pub steps: Option<usize>,
    pub step_size: Option<f64>,
    pub random_start: Option<bool>,
    #[serde(default)]
    pub loss: AttackLoss,
    pub cw: Option<CwConfig>,
    pub one_pixel: Option<OnePixelConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub name: String,
    #[serde(flatten)]
    pub spec: AttackSpec,
    /// Attack only the first `limit` test samples.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialSpec {
    #[serde(default = "default_delay")]
    pub delay_epochs: usize,
    #[serde(default = "default_readiness")]
    pub readiness_fraction: f64,
    pub target_accuracy: Option<f64>,
    #[serde(default = "default_mix")]
    pub mix_ratio: f64,
    pub attack: AttackSpec,
}

fn default_delay() -> usize {
    AdversarialConfig::default().delay_epochs
}

fn default_readiness() -> f64 {
    AdversarialConfig::default().readiness_fraction
}

fn default_mix() -> f64 {
    AdversarialConfig::default().mix_ratio
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub name: String,
    pub arch: Architecture,
    /// Weight initialization, `"glorot"` (default) or `"fan-in"`.
    #[serde(default)]
    pub init: Init,
    #[serde(default)]
    pub lambda: f64,
    pub seeds: Vec<u64>,
    pub adversarial: Option<AdversarialSpec>,
    /// Overrides of the manifest-wide `[train]` table.
    #[serde(default)]
    pub train: toml::Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSpec {
    pub feature_dump: bool,
    /// Test samples for the local-robustness search (0 disables it).
    pub delta_samples: usize,
    /// Both in the units of `data.epsilon_units`.
    pub delta_max: f64,
    pub delta_tolerance: f64,
    /// Oracle for the search: `"cw"` (L2) or a gradient attack kind (L-inf).
    pub delta_attack: AttackSpec,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            feature_dump: true,
            delta_samples: 0,
            delta_max: 10.0,
            delta_tolerance: 1e-2,
            delta_attack: AttackSpec {
                kind: AttackKind::Cw,
                epsilon: 0.0,
                steps: None,
                step_size: None,
                random_start: None,
                loss: AttackLoss::Joint,
                cw: None,
                one_pixel: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSpec {
    /// Run-name pairs compared with a t-test. When empty, runs that differ
    /// only in lambda are paired automatically.
    pub pairs: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub train: toml::Table,
    pub runs: Vec<RunSpec>,
    #[serde(default)]
    pub attacks: Vec<NamedAttack>,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default)]
    pub table: TableSpec,
}

/// A run with every default applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedRun {
    pub name: String,
    pub arch: Architecture,
    pub init: Init,
    pub seeds: Vec<u64>,
    /// Training settings; `seed` is replaced per cell.
    pub train: TrainConfig,
    pub adversarial: Option<AdversarialSpec>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| Error::config(path, e.to_string()))?;
        let problems = m.problems();
        if !problems.is_empty() {
            return Err(Error::config(path, format!("\n  {}", problems.join("\n  "))));
        }
        Ok(m)
    }

    /// Every schema violation, one line per field.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            p.push(format!("schema_version: expected {SCHEMA_VERSION}, got {}", self.schema_version));
        }
        if self.data.source == Source::Synthetic && (self.data.synthetic_train == 0 || self.data.synthetic_test == 0) {
            p.push("data.synthetic_train / data.synthetic_test: must be >= 1".into());
        }
        if self.data.epsilon_units == EpsilonUnits::Pixel && self.data.normalization == NormMode::PerPixel {
            p.push("data.epsilon_units: \"pixel\" needs data.normalization = \"global\"".into());
        }
        if self.runs.is_empty() {
            p.push("runs: at least one [[runs]] entry is required".into());
        }
        let mut names = BTreeSet::new();
        for (i, r) in self.runs.iter().enumerate() {
            let at = format!("runs[{i}]");
            if !valid_name(&r.name) {
                p.push(format!("{at}.name: `{}` must be non-empty [A-Za-z0-9_.-]", r.name));
            }
            if !names.insert(r.name.as_str()) {
                p.push(format!("{at}.name: duplicate run name `{}`", r.name));
            }
            if r.seeds.is_empty() {
                p.push(format!("{at}.seeds: must list at least one seed"));
            }
            match self.train_config(r) {
                Ok(cfg) => {
                    if let Err(e) = cfg.validate() {
                        p.push(format!("{at}.train: {e}"));
                    }
                }
                Err(e) => p.push(format!("{at}.train: {e}")),
            }
            if let Some(adv) = &r.adversarial {
                if !(0.0..=1.0).contains(&adv.mix_ratio) {
                    p.push(format!("{at}.adversarial.mix_ratio: must be in [0, 1], got {}", adv.mix_ratio));
                }
                if !(0.0..=1.0).contains(&adv.readiness_fraction) {
                    p.push(format!("{at}.adversarial.readiness_fraction: must be in [0, 1]"));
                }
                if let Some(t) = adv.target_accuracy {
                    if !(0.0..=1.0).contains(&t) {
                        p.push(format!("{at}.adversarial.target_accuracy: must be a fraction in [0, 1], got {t}"));
                    }
                }
                if matches!(adv.attack.kind, AttackKind::OnePixel | AttackKind::Cw) {
                    p.push(format!("{at}.adversarial.attack.kind: only fgsm, bim and pgd can drive adversarial training"));
                }
                if let Err(e) = adv.attack.resolve(1.0, (0.0, 1.0)).validate() {
                    p.push(format!("{at}.adversarial.attack: {e}"));
                }
            }
        }
        let mut anames = BTreeSet::new();
        for (i, a) in self.attacks.iter().enumerate() {
            let at = format!("attacks[{i}]");
            if !valid_name(&a.name) {
                p.push(format!("{at}.name: `{}` must be non-empty [A-Za-z0-9_.-]", a.name));
            }
            if !anames.insert(a.name.as_str()) {
                p.push(format!("{at}.name: duplicate attack name `{}`", a.name));
            }
            if a.limit == Some(0) {
                p.push(format!("{at}.limit: must be >= 1"));
            }
            if let Err(e) = a.spec.resolve(1.0, (0.0, 1.0)).validate() {
                p.push(format!("{at}: {e}"));
            }
        }
        let m = &self.metrics;
        if !(m.delta_max > 0.0) || !(m.delta_tolerance > 0.0) {
            p.push("metrics.delta_max / metrics.delta_tolerance: must be > 0".into());
        }
        if m.delta_attack.kind == AttackKind::OnePixel {
            p.push("metrics.delta_attack.kind: one-pixel has no budget to search".into());
        }
        for (i, (a, b)) in self.table.pairs.iter().enumerate() {
            for n in [a, b] {
                if !names.contains(n.as_str()) {
                    p.push(format!("table.pairs[{i}]: unknown run `{n}`"));
                }
            }
        }
        p
    }

    /// `[train]` merged with the run's overrides, plus the run's lambda.
    pub fn train_config(&self, run: &RunSpec) -> std::result::Result<TrainConfig, String> {
        let mut table = self.train.clone();
        for (k, v) in &run.train {
            table.insert(k.clone(), v.clone());
        }
        for reserved in ["lambda", "seed", "adversarial"] {
            if table.contains_key(reserved) {
                return Err(format!("`{reserved}` is set per run, not in a train table"));
            }
        }
        let mut cfg: TrainConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| e.message().to_string())?;
        cfg.lambda = run.lambda;
        Ok(cfg)
    }

    pub fn resolve(&self, run: &RunSpec) -> Result<ResolvedRun> {
        let train = self
            .train_config(run)
            .map_err(|e| Error::Usage(format!("runs.{}.train: {e}", run.name)))?;
        Ok(ResolvedRun {
            name: run.name.clone(),
            arch: run.arch,
            init: run.init,
            seeds: run.seeds.clone(),
            train,
            adversarial: run.adversarial.clone(),
        })
    }

    pub fn run(&self, name: &str) -> Option<&RunSpec> {
        self.runs.iter().find(|r| r.name == name)
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "_.-".contains(c))
}

impl AttackSpec {
    /// Concrete attack in model input units. `scale` converts manifest
    /// budgets (epsilon and step sizes) to input units.
    pub fn resolve(&self, scale: f64, clip: (f64, f64)) -> AttackConfig {
        let eps = self.epsilon * scale;
        let mut c = match self.kind {
            AttackKind::Fgsm => AttackConfig::fgsm(eps, clip),
            AttackKind::Bim => AttackConfig::bim(eps, clip),
            AttackKind::Pgd => AttackConfig::pgd(eps, clip),
            AttackKind::Cw => AttackConfig::cw(clip),
            AttackKind::OnePixel => AttackConfig::one_pixel(clip),
        };
        if let Some(s) = self.steps {
            c.steps = s;
        }
        if let Some(s) = self.step_size {
            c.step_size = s * scale;
        } else if self.kind == AttackKind::Pgd {
            c.step_size *= scale;
        }
        if let Some(r) = self.random_start {
            c.random_start = r;
        }
        c.loss = self.loss;
        if let Some(cw) = self.cw {
            c.cw = cw;
        }
        if let Some(op) = self.one_pixel {
            c.one_pixel = op;
        }
        c
    }
}
