//! The four manifest stages. Each (run, seed) cell owns its own directory
//!
//! ```text
//! <out>/runs/<run>-<run hash>/seed-<seed>/
//!     final.ckpt  best.ckpt  record.json
//!     attacks/<attack>-<attack hash>.json
//!     metrics/features.json  metrics/features.csv  metrics/delta.json
//! <out>/tables/table.txt  table.csv  table.provenance.json
//! ```
//!
//! Hashes cover everything that determines a file's contents, so editing a
//! run or attack in the manifest lands in a fresh directory. Existing
//! outputs are reused unless `force` is set.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use robustfeat_core::attack::{evaluate_range, AttackConfig, AttackKind, AttackSummary, Target};
use robustfeat_core::data::{synthetic_digits, Dataset, NormStats, RawSplit};
use robustfeat_core::metrics::{self, Delta, FeatureStats};
use robustfeat_core::model::{ArchitectureDescriptor, Model};
use robustfeat_core::train::{self, AdversarialConfig, EpochMetrics, ExperimentRecord, TrainObserver};
use robustfeat_core::{rng, CenterBank};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::error::{Error, Result};
use crate::manifest::{AttackSpec, DataSpec, EpsilonUnits, Manifest, NamedAttack, ResolvedRun, Source};
use crate::mnist::{self, Split};
use crate::dump;

pub const MNIST_DIR_ENV: &str = "ROBUSTFEAT_MNIST_DIR";

/// First 12 hex digits of the SHA-256 of `value`'s JSON form.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("serializable");
    hex::encode(&Sha256::digest(&json)[..6])
}

pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    /// Multiplier from manifest budget units to model input units.
    pub scale: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub force: bool,
    pub jobs: usize,
    pub seed: Option<u64>,
    pub runs: Vec<String>,
    pub attacks: Vec<String>,
}

pub struct Context {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub out: PathBuf,
    pub opts: Options,
    data: OnceLock<LoadedData>,
}

/// What a stage did per cell.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub produced: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
}

impl StageReport {
    fn merge(mut self, other: StageReport) -> Self {
        self.produced.extend(other.produced);
        self.skipped.extend(other.skipped);
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: String,
    pub run_hash: String,
    pub data: DataSpec,
    #[serde(flatten)]
    pub record: ExperimentRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub run: String,
    pub run_hash: String,
    pub seed: u64,
    pub attack: String,
    pub attack_hash: String,
    pub spec: AttackSpec,
    pub config: AttackConfig,
    pub samples: usize,
    pub summary: AttackSummary,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub oracle: AttackKind,
    /// `"l2"` for the CW oracle, `"linf"` otherwise.
    pub norm: String,
    pub units: EpsilonUnits,
    pub max_budget: f64,
    pub tolerance: f64,
    pub deltas: Vec<Delta>,
    /// Mean of the point estimates over correctly classified samples.
    pub mean_correct: f64,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

impl Context {
    pub fn new(manifest: Manifest, manifest_path: PathBuf, opts: Options) -> Self {
        let out = opts
            .out
            .clone()
            .or_else(|| {
                manifest.out.as_ref().map(|o| {
                    let base = manifest_path.parent().unwrap_or(Path::new("."));
                    base.join(o)
                })
            })
            .unwrap_or_else(|| PathBuf::from("robustfeat-out"));
        Self {
            manifest,
            manifest_path,
            out,
            opts,
            data: OnceLock::new(),
        }
    }

    pub fn load(manifest_path: &Path, opts: Options) -> Result<Self> {
        let m = Manifest::load(manifest_path)?;
        Ok(Self::new(m, manifest_path.to_path_buf(), opts))
    }

    fn mnist_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.opts.data_dir {
            return Ok(d.clone());
        }
        if let Some(d) = std::env::var_os(MNIST_DIR_ENV) {
            return Ok(PathBuf::from(d));
        }
        match &self.manifest.data.dir {
            Some(d) => Ok(self.manifest_path.parent().unwrap_or(Path::new(".")).join(d)),
            None => Err(Error::config(
                &self.manifest_path,
                format!("data.dir: no MNIST directory (set data.dir, --data or {MNIST_DIR_ENV})"),
            )),
        }
    }

    fn load_data(&self) -> Result<LoadedData> {
        let spec = &self.manifest.data;
        let (train_raw, test_raw): (RawSplit, RawSplit) = match spec.source {
            Source::Mnist => {
                let dir = self.mnist_dir()?;
                (mnist::load_split(&dir, Split::Train)?, mnist::load_split(&dir, Split::Test)?)
            }
            Source::Synthetic => (
                synthetic_digits(spec.synthetic_train, spec.synthetic_seed),
                synthetic_digits(spec.synthetic_test, rng::derive(spec.synthetic_seed, 0, 1)),
            ),
        };
        let train_raw = match spec.train_limit {
            Some(n) => train_raw.truncate(n),
            None => train_raw,
        };
        let test_raw = match spec.test_limit {
            Some(n) => test_raw.truncate(n),
            None => test_raw,
        };
        let stats = NormStats::fit(&train_raw, spec.normalization)?;
        let scale = match spec.epsilon_units {
            EpsilonUnits::Pixel => 1.0 / stats.std[0],
            EpsilonUnits::Normalized => 1.0,
        };
        Ok(LoadedData {
            train: Dataset::from_raw(&train_raw, &stats, 10)?,
            test: Dataset::from_raw(&test_raw, &stats, 10)?,
            scale,
        })
    }

    /// Loads the datasets on first use. Concurrent first calls may both
    /// load; one result wins.
    pub fn data(&self) -> Result<&LoadedData> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let d = self.load_data()?;
        Ok(self.data.get_or_init(|| d))
    }

    pub fn runs(&self) -> Result<Vec<ResolvedRun>> {
        let mut out = Vec::new();
        for r in &self.manifest.runs {
            if !self.opts.runs.is_empty() && !self.opts.runs.contains(&r.name) {
                continue;
            }
            let mut rr = self.manifest.resolve(r)?;
            if let Some(s) = self.opts.seed {
                rr.seeds = vec![s];
            }
            out.push(rr);
        }
        for want in &self.opts.runs {
            if self.manifest.run(want).is_none() {
                return Err(Error::config(&self.manifest_path, format!("--run: no run named `{want}`")));
            }
        }
        Ok(out)
    }

    fn attacks(&self) -> Result<Vec<&NamedAttack>> {
        for want in &self.opts.attacks {
            if !self.manifest.attacks.iter().any(|a| &a.name == want) {
                return Err(Error::config(&self.manifest_path, format!("--attack: no attack named `{want}`")));
            }
        }
        Ok(self
            .manifest
            .attacks
            .iter()
            .filter(|a| self.opts.attacks.is_empty() || self.opts.attacks.contains(&a.name))
            .collect())
    }

    /// Hash of everything that determines a run's checkpoints except the
    /// seed.
    pub fn run_hash(&self, run: &ResolvedRun) -> String {
        let mut data = self.manifest.data.clone();
        data.dir = None;
        let mut train = run.train.clone();
        train.seed = 0;
        content_hash(&(run.arch, run.init, &train, &run.adversarial, &data))
    }

    pub fn cell_dir(&self, run: &ResolvedRun, seed: u64) -> PathBuf {
        self.out
            .join("runs")
            .join(format!("{}-{}", run.name, self.run_hash(run)))
            .join(format!("seed-{seed}"))
    }

    fn cells(&self) -> Result<Vec<(ResolvedRun, u64)>> {
        Ok(self
            .runs()?
            .into_iter()
            .flat_map(|r| r.seeds.clone().into_iter().map(move |s| (r.clone(), s)))
            .collect())
    }

    fn par_cells<F>(&self, f: F) -> Result<StageReport>
    where
        F: Fn(&ResolvedRun, u64) -> Result<StageReport> + Sync + Send,
    {
        let cells = self.cells()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.opts.jobs.max(1))
            .build()
            .map_err(|e| Error::Usage(e.to_string()))?;
        let results: Vec<Result<StageReport>> = pool.install(|| cells.par_iter().map(|(r, s)| f(r, *s)).collect());
        results
            .into_iter()
            .try_fold(StageReport::default(), |acc, r| Ok(acc.merge(r?)))
    }

    fn adversarial_config(&self, spec: &crate::manifest::AdversarialSpec, data: &LoadedData) -> AdversarialConfig {
        AdversarialConfig {
            enabled: true,
            delay_epochs: spec.delay_epochs,
            readiness_fraction: spec.readiness_fraction,
            target_accuracy: spec.target_accuracy,
            attack: spec.attack.resolve(data.scale, data.train.clip_bounds()),
            mix_ratio: spec.mix_ratio,
        }
    }

    pub fn train(&self) -> Result<StageReport> {
        self.par_cells(|run, seed| self.train_cell(run, seed))
    }

    fn train_cell(&self, run: &ResolvedRun, seed: u64) -> Result<StageReport> {
        let dir = self.cell_dir(run, seed);
        let record_path = dir.join("record.json");
        if record_path.exists() && !self.opts.force {
            return Ok(StageReport {
                skipped: vec![record_path],
                ..Default::default()
            });
        }
        let data = self.data()?;
        let mut cfg = run.train.clone();
        cfg.seed = seed;
        if let Some(adv) = &run.adversarial {
            cfg.adversarial = self.adversarial_config(adv, data);
        }
        let desc = ArchitectureDescriptor::mnist(run.arch);
        let mut model = Model::build_with(desc, seed, run.init)?;
        let mut bank = CenterBank::new(10, model.feature_dim(), cfg.center_alpha, cfg.lambda)?;
        bank.rule = cfg.center_rule;
        let mut saver = BestSaver {
            path: dir.join("best.ckpt"),
            norm: data.train.stats.clone(),
            label: format!("{} seed {seed}", run.name),
        };
        eprintln!("train {} seed {seed}: {} epochs on {} samples", run.name, cfg.epochs, data.train.len());
        let start = Instant::now();
        let mut record = if run.adversarial.is_some() {
            train::adversarial_train(&mut model, &mut bank, &data.train, &data.test, &cfg, &mut saver)?
        } else {
            train::train(&mut model, &mut bank, &data.train, &data.test, &cfg, &mut saver)?
        };
        record.wall_time_secs = Some(start.elapsed().as_secs_f64());
        let final_path = dir.join("final.ckpt");
        Checkpoint {
            model,
            bank,
            norm: Some(data.train.stats.clone()),
        }
        .save(&final_path)?;
        let mut data_spec = self.manifest.data.clone();
        data_spec.dir = None;
        write_json(
            &record_path,
            &RunRecord {
                run: run.name.clone(),
                run_hash: self.run_hash(run),
                data: data_spec,
                record,
            },
        )?;
        Ok(StageReport {
            produced: vec![final_path, record_path],
            ..Default::default()
        })
    }

    fn load_cell(&self, run: &ResolvedRun, seed: u64) -> Result<Checkpoint> {
        let path = self.cell_dir(run, seed).join("final.ckpt");
        if !path.exists() {
            return Err(Error::Missing(path));
        }
        Checkpoint::load(&path)
    }

    pub fn attack_path(&self, run: &ResolvedRun, seed: u64, attack: &NamedAttack) -> PathBuf {
        self.cell_dir(run, seed)
            .join("attacks")
            .join(format!("{}-{}.json", attack.name, content_hash(&(&attack.spec, attack.limit))))
    }

    pub fn attack(&self) -> Result<StageReport> {
        let attacks = self.attacks()?;
        self.par_cells(|run, seed| {
            let mut report = StageReport::default();
            for a in &attacks {
                report = report.merge(self.attack_cell(run, seed, a)?);
            }
            Ok(report)
        })
    }

    fn attack_cell(&self, run: &ResolvedRun, seed: u64, attack: &NamedAttack) -> Result<StageReport> {
        let path = self.attack_path(run, seed, attack);
        if path.exists() && !self.opts.force {
            return Ok(StageReport {
                skipped: vec![path],
                ..Default::default()
            });
        }
        let ck = self.load_cell(run, seed)?;
        let data = self.data()?;
        let cfg = attack.spec.resolve(data.scale, data.test.clip_bounds());
        for w in cfg.warnings() {
            eprintln!("warning: attack {}: {w}", attack.name);
        }
        let end = attack.limit.unwrap_or(data.test.len()).min(data.test.len());
        eprintln!("attack {} seed {seed}: {} on {end} samples", run.name, attack.name);
        let bank = (ck.bank.lambda > 0.0).then_some(&ck.bank);
        let target = Target::new(&ck.model, bank).with_loss(cfg.loss);
        let summary = evaluate_range(&target, &data.test, &cfg, seed, 0, end, 128)?;
        let rec = AttackRecord {
            run: run.name.clone(),
            run_hash: self.run_hash(run),
            seed,
            attack: attack.name.clone(),
            attack_hash: content_hash(&(&attack.spec, attack.limit)),
            spec: attack.spec.clone(),
            config: cfg,
            samples: end,
            clean_accuracy: summary.clean_accuracy(),
            adversarial_accuracy: summary.adversarial_accuracy(),
            success_rate: summary.success_rate(),
            summary,
        };
        write_json(&path, &rec)?;
        let record_path = self.cell_dir(run, seed).join("record.json");
        if record_path.exists() {
            let mut r: RunRecord = read_json(&record_path)?;
            r.record.adversarial_accuracy.insert(attack.name.clone(), rec.adversarial_accuracy);
            write_json(&record_path, &r)?;
        }
        Ok(StageReport {
            produced: vec![path],
            ..Default::default()
        })
    }

    pub fn read_attack(&self, run: &ResolvedRun, seed: u64, attack: &NamedAttack) -> Result<AttackRecord> {
        read_json(&self.attack_path(run, seed, attack))
    }

    pub fn read_record(&self, run: &ResolvedRun, seed: u64) -> Result<RunRecord> {
        read_json(&self.cell_dir(run, seed).join("record.json"))
    }

    pub fn metrics(&self) -> Result<StageReport> {
        self.par_cells(|run, seed| self.metrics_cell(run, seed))
    }

    fn metrics_cell(&self, run: &ResolvedRun, seed: u64) -> Result<StageReport> {
        let dir = self.cell_dir(run, seed).join("metrics");
        let stats_path = dir.join("features.json");
        let spec = &self.manifest.metrics;
        let delta_path = dir.join("delta.json");
        let want_delta = spec.delta_samples > 0;
        if stats_path.exists() && (!want_delta || delta_path.exists()) && !self.opts.force {
            return Ok(StageReport {
                skipped: vec![stats_path],
                ..Default::default()
            });
        }
        let ck = self.load_cell(run, seed)?;
        let data = self.data()?;
        let mut report = StageReport::default();
        let rows = metrics::feature_rows(&ck.model, &data.test)?;
        let stats: FeatureStats = metrics::feature_stats(&ck.model, &data.test)?;
        write_json(&stats_path, &stats)?;
        report.produced.push(stats_path);
        if spec.feature_dump {
            let p = dir.join("features.csv");
            dump::write(&p, &rows)?;
            report.produced.push(p);
        }
        if want_delta {
            let rec = self.delta(&ck, seed, data)?;
            write_json(&delta_path, &rec)?;
            report.produced.push(delta_path);
        }
        Ok(report)
    }

    fn delta(&self, ck: &Checkpoint, seed: u64, data: &LoadedData) -> Result<DeltaRecord> {
        let spec = &self.manifest.metrics;
        let clip = data.test.clip_bounds();
        let template = spec.delta_attack.resolve(data.scale, clip);
        let bank = (ck.bank.lambda > 0.0).then_some(&ck.bank);
        let target = Target::new(&ck.model, bank).with_loss(template.loss);
        let n = spec.delta_samples.min(data.test.len());
        let mut deltas = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = data.test.batch(&[i]);
            // Searched in manifest units; the oracles see input units.
            let d = if template.kind == AttackKind::Cw {
                let mut oracle = metrics::cw_l2_oracle(&target, &x, y[0], &template)?;
                metrics::local_robustness_delta(&ck.model, &x, y[0], |b| oracle(b * data.scale), spec.delta_max, spec.delta_tolerance)?
            } else {
                let s = rng::derive(seed, rng::stream::PGD_START, i as u64);
                let mut oracle = metrics::linf_oracle(target, &x, y[0], template, s);
                metrics::local_robustness_delta(&ck.model, &x, y[0], |b| oracle(b * data.scale), spec.delta_max, spec.delta_tolerance)?
            };
            deltas.push(d);
        }
        let correct: Vec<f64> = deltas
            .iter()
            .filter(|d| !matches!(d, Delta::Misclassified))
            .map(Delta::estimate)
            .collect();
        Ok(DeltaRecord {
            oracle: template.kind,
            norm: if template.kind == AttackKind::Cw { "l2" } else { "linf" }.into(),
            units: self.manifest.data.epsilon_units,
            max_budget: spec.delta_max,
            tolerance: spec.delta_tolerance,
            mean_correct: if correct.is_empty() {
                f64::NAN
            } else {
                correct.iter().sum::<f64>() / correct.len() as f64
            },
            deltas,
        })
    }
}

/// Writes `best.ckpt` whenever clean test accuracy improves.
struct BestSaver {
    path: PathBuf,
    norm: NormStats,
    label: String,
}

impl TrainObserver for BestSaver {
    fn epoch_end(&mut self, m: &EpochMetrics, model: &Model, bank: &CenterBank, is_best: bool) -> robustfeat_core::Result<()> {
        eprintln!(
            "  {} epoch {:>3} lr {:.4} loss {:.4} (ce {:.4}, center {:.4}) test {:.2}% adv {}",
            self.label,
            m.epoch,
            m.lr,
            m.mean_total,
            m.mean_cross_entropy,
            m.mean_center,
            100.0 * m.test_accuracy,
            m.adversarial_samples
        );
        if is_best {
            Checkpoint {
                model: model.clone(),
                bank: bank.clone(),
                norm: Some(self.norm.clone()),
            }
            .save(&self.path)
            .map_err(|e| robustfeat_core::Error::Observer(e.to_string()))?;
        }
        Ok(())
    }
}
