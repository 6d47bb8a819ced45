//! End-to-end experiments: TOML configuration, output directory layout,
//! repeated runs, minority-count sweeps and result tables.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.toml               resolved configuration
//! gan/gan_final.ckpt        pretrained translation GAN (aug, alt)
//! gan/gan_epochNNNN.ckpt    intermediate GAN checkpoints
//! gan/pretrain_log.jsonl
//! proxy.ckpt                inception-accuracy proxy classifier
//! run_NN/classifier.ckpt
//! run_NN/training_log.jsonl
//! run_NN/gan.ckpt           jointly trained GAN (alt only)
//! run_NN/result.json
//! metrics.json, metrics.csv
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{apply_baseline, BaselineMethod, BaselineOptions};
use crate::datasets::{load_dataset, proxy_pool, DatasetSource, DatasetSpec, ImbalancedDataset, TextureStyle};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_classifier, inception_accuracy, run_repeated, CertifiedProxy, InceptionAccuracy, InceptionRow,
    MetricsReport, ResultTable, RunMetrics, SelectionMetric, TableMetric,
};
use crate::losses::GanLossForm;
use crate::models::{Checkpoint, GanPair, ModelProfile, Network};
use crate::seed::derive_seed;
use crate::training::{
    pretrain_cyclegan, train_alt, train_aug, train_proxy_classifier, train_vanilla_classifier, LrSchedule,
    OptimizerConfig, TrainingConfig, TrainingMode, WeightsConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that, when set, roots every relative `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "CYCLEBALANCE_OUTPUT_ROOT";

type F = f32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Baseline(BaselineMethod),
    /// Classifier trained with a frozen pretrained translation GAN.
    Aug,
    /// GAN and classifier trained in alternating phases.
    Alt,
}

impl Method {
    pub fn uses_gan(self) -> bool {
        matches!(self, Method::Aug | Method::Alt)
    }

    /// Filesystem-safe form of the method name.
    pub fn slug(self) -> String {
        self.to_string()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
            .collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Baseline(b) => write!(f, "{b}"),
            Method::Aug => f.write_str("aug"),
            Method::Alt => f.write_str("alt"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "aug" => Ok(Method::Aug),
            "alt" => Ok(Method::Alt),
            other => other.parse().map(Method::Baseline),
        }
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.to_string()
    }
}

/// A named preset (`"desk"`, `"paper"`) or an explicit profile table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Preset(String),
    Custom(ModelProfile),
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec::Preset("desk".into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub n_majority: usize,
    pub n_minority: usize,
    #[serde(default = "fifty")]
    pub val_per_class: usize,
    #[serde(default = "hundred")]
    pub test_per_class: usize,
    #[serde(default = "thirty_two")]
    pub image_size: usize,
}

impl DatasetConfig {
    pub fn spec(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            source: self.source.clone(),
            n_majority: self.n_majority,
            n_minority: self.n_minority,
            val_per_class: self.val_per_class,
            test_per_class: self.test_per_class,
            image_size: self.image_size,
            seed,
        }
    }
}

/// CycleGAN pretraining settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanStage {
    #[serde(default = "ten")]
    pub epochs: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default = "lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Defaults to the profile's convention (50 for `paper`, off for `desk`).
    #[serde(default)]
    pub image_pool: Option<usize>,
    #[serde(default)]
    pub loss_form: GanLossForm,
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
    /// Skip pretraining and start from this GAN checkpoint.
    #[serde(default)]
    pub warm_start: Option<PathBuf>,
}

impl Default for GanStage {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 1,
            lr: 2e-4,
            lr_schedule: LrSchedule::Constant,
            image_pool: None,
            loss_form: GanLossForm::default(),
            checkpoint_epochs: Vec::new(),
            warm_start: None,
        }
    }
}

/// Classifier (and ALT) training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierStage {
    #[serde(default = "thirty")]
    pub epochs: usize,
    /// Per-class batch size.
    #[serde(default = "sixteen")]
    pub batch_size: usize,
    #[serde(default = "lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default = "five")]
    pub swap_interval: usize,
    #[serde(default)]
    pub selection_metric: SelectionMetric,
}

impl Default for ClassifierStage {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 2e-4,
            lr_schedule: LrSchedule::Constant,
            swap_interval: 5,
            selection_metric: SelectionMetric::default(),
        }
    }
}

/// Proxy classifier used to score translations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "eight_hundred")]
    pub per_class: usize,
    #[serde(default = "twenty")]
    pub epochs: usize,
    #[serde(default = "sixteen")]
    pub batch_size: usize,
    /// Minimum accuracy on real held-out images.
    #[serde(default = "floor")]
    pub floor: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            per_class: 800,
            epochs: 20,
            batch_size: 16,
            floor: 0.95,
        }
    }
}

fn fifty() -> usize {
    50
}
fn hundred() -> usize {
    100
}
fn thirty_two() -> usize {
    32
}
fn ten() -> usize {
    10
}
fn one() -> usize {
    1
}
fn lr() -> f64 {
    2e-4
}
fn thirty() -> usize {
    30
}
fn sixteen() -> usize {
    16
}
fn five() -> usize {
    5
}
fn yes() -> bool {
    true
}
fn eight_hundred() -> usize {
    800
}
fn twenty() -> usize {
    20
}
fn floor() -> f64 {
    0.95
}
fn three() -> usize {
    3
}
fn schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    pub method: Method,
    /// Base seed; every component seed is derived from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "three")]
    pub runs: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub profile: ProfileSpec,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub gan: GanStage,
    #[serde(default)]
    pub classifier: ClassifierStage,
    #[serde(default)]
    pub weights: WeightsConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub baseline: BaselineOptions,
    #[serde(default)]
    pub proxy: ProxyConfig,
}

impl ExperimentConfig {
    /// Desk-scale synthetic experiment: 450 majority images at 32 px.
    pub fn desk(method: Method, n_minority: usize, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            method,
            seed: 0,
            runs: 3,
            output_dir: output_dir.into(),
            profile: ProfileSpec::default(),
            dataset: DatasetConfig {
                source: DatasetSource::Synthetic {
                    style: TextureStyle::default(),
                },
                n_majority: 450,
                n_minority,
                val_per_class: 50,
                test_per_class: 100,
                image_size: 32,
            },
            gan: GanStage::default(),
            classifier: ClassifierStage::default(),
            weights: WeightsConfig::default(),
            optimizer: OptimizerConfig::default(),
            baseline: BaselineOptions::default(),
            proxy: ProxyConfig::default(),
        }
    }

    /// Parses without validating, so callers can apply overrides first.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            // the key on the offending line, if there is one
            let field = e
                .span()
                .and_then(|s| text[..s.start].rsplit('\n').next().map(|head| (head, s.start)))
                .and_then(|(head, start)| {
                    let line = text[start - head.len()..].lines().next().unwrap_or("");
                    line.split_once('=').map(|(k, _)| k.trim().to_string())
                })
                .filter(|k| !k.is_empty())
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.runs == 0 {
            return Err(Error::config("runs", "must be at least 1"));
        }
        if let Method::Baseline(b) = self.method {
            b.validate()?;
        }
        self.dataset.spec(0).validate()?;
        if !(0.0..=1.0).contains(&self.proxy.floor) {
            return Err(Error::config("proxy.floor", "must lie in [0, 1]"));
        }
        if self.proxy.enabled && self.proxy.per_class == 0 {
            return Err(Error::config("proxy.per_class", "must be positive"));
        }
        self.gan_training()?.validate()?;
        self.classifier_training(0)?.validate()
    }

    pub fn resolved_profile(&self) -> Result<ModelProfile> {
        let profile = match &self.profile {
            ProfileSpec::Preset(name) => ModelProfile::preset(name, Some(self.dataset.image_size))?,
            ProfileSpec::Custom(p) => p.clone(),
        };
        if profile.image_size != self.dataset.image_size {
            return Err(Error::config(
                "dataset.image_size",
                format!(
                    "{} px does not match profile `{}` ({} px)",
                    self.dataset.image_size, profile.name, profile.image_size
                ),
            ));
        }
        profile.validate()?;
        Ok(profile)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        self.dataset.spec(derive_seed(self.seed, "dataset"))
    }

    pub fn gan_training(&self) -> Result<TrainingConfig> {
        let mut t = TrainingConfig::new(TrainingMode::VanillaGan, self.gan.epochs, self.resolved_profile()?);
        t.gan_batch_size = self.gan.batch_size;
        t.lr = self.gan.lr;
        t.lr_schedule = self.gan.lr_schedule;
        if let Some(pool) = self.gan.image_pool {
            t.image_pool = pool;
        }
        t.gan_loss_form = self.gan.loss_form;
        t.checkpoint_epochs = self.gan.checkpoint_epochs.clone();
        t.warm_start = self.gan.warm_start.clone();
        t.seed = derive_seed(self.seed, "gan");
        t.weights = self.weights;
        t.optimizer = self.optimizer.clone();
        Ok(t)
    }

    /// Training configuration of repeated run with seed `run_seed`.
    pub fn classifier_training(&self, run_seed: u64) -> Result<TrainingConfig> {
        let mode = match self.method {
            Method::Baseline(_) => TrainingMode::VanillaClassifier,
            Method::Aug => TrainingMode::Aug,
            Method::Alt => TrainingMode::Alt,
        };
        let gan = self.gan_training()?;
        let t = TrainingConfig {
            mode,
            total_epochs: self.classifier.epochs,
            swap_interval: self.classifier.swap_interval,
            lr: self.classifier.lr,
            lr_schedule: self.classifier.lr_schedule,
            classifier_batch_size: self.classifier.batch_size,
            selection_metric: self.classifier.selection_metric,
            seed: run_seed,
            checkpoint_epochs: Vec::new(),
            warm_start: None,
            ..gan
        };
        Ok(t)
    }

    /// Training configuration of the inception-accuracy proxy classifier.
    pub fn proxy_training(&self) -> Result<TrainingConfig> {
        let mut t = TrainingConfig::new(TrainingMode::VanillaClassifier, self.proxy.epochs, self.resolved_profile()?);
        t.classifier_batch_size = self.proxy.batch_size;
        t.optimizer = self.optimizer.clone();
        t.seed = derive_seed(self.seed, "proxy");
        Ok(t)
    }

    /// `output_dir`, rooted under `$CYCLEBALANCE_OUTPUT_ROOT` when relative.
    pub fn output_path(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// How to treat an existing, non-empty output directory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputPolicy {
    /// Refuse to touch it.
    #[default]
    Fresh,
    /// Reuse finished stages if the stored configuration matches.
    Resume,
    /// Delete it and start over.
    Overwrite,
}

/// What a run would do, reported without training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentPlan {
    pub method: String,
    pub output_dir: PathBuf,
    pub profile: ModelProfile,
    pub n_majority: usize,
    pub n_minority: usize,
    pub gamma: f64,
    pub stages: Vec<String>,
}

/// Validates `cfg`, loads the dataset (catching capacity problems) and lists the stages.
pub fn plan(cfg: &ExperimentConfig) -> Result<ExperimentPlan> {
    cfg.validate()?;
    let ds: ImbalancedDataset<F> = load_dataset(&cfg.dataset_spec())?;
    let mut stages = Vec::new();
    if cfg.method.uses_gan() {
        match &cfg.gan.warm_start {
            Some(p) => stages.push(format!("load GAN from {}", p.display())),
            None => stages.push(format!("pretrain GAN for {} epochs", cfg.gan.epochs)),
        }
        if cfg.proxy.enabled {
            stages.push(format!("train proxy classifier on {} images per class", cfg.proxy.per_class));
        }
    }
    stages.push(format!(
        "{} run(s) of `{}` for {} epochs",
        cfg.runs, cfg.method, cfg.classifier.epochs
    ));
    Ok(ExperimentPlan {
        method: cfg.method.to_string(),
        output_dir: cfg.output_path(),
        profile: cfg.resolved_profile()?,
        n_majority: ds.train_a.len(),
        n_minority: ds.train_b.len(),
        gamma: ds.gamma,
        stages,
    })
}

fn prepare_output(dir: &Path, cfg: &ExperimentConfig, policy: OutputPolicy) -> Result<()> {
    let occupied = dir.is_dir()
        && std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
    let stored = dir.join("config.toml");
    if occupied {
        match policy {
            OutputPolicy::Fresh => {
                return Err(Error::config(
                    "output_dir",
                    format!("{} is not empty; pass --resume or --overwrite", dir.display()),
                ))
            }
            OutputPolicy::Overwrite => std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?,
            OutputPolicy::Resume => {
                if stored.exists() {
                    let previous = ExperimentConfig::load(&stored)?;
                    if previous != *cfg {
                        return Err(Error::config(
                            "output_dir",
                            format!("{} holds a run with a different configuration", dir.display()),
                        ));
                    }
                }
            }
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&stored, &cfg.to_toml())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads or trains the translation GAN for `cfg`, writing it under `dir/gan`.
fn obtain_gan(cfg: &ExperimentConfig, ds: &ImbalancedDataset<F>, dir: &Path, resume: bool) -> Result<GanPair<F>> {
    let training = cfg.gan_training()?;
    if let Some(path) = &cfg.gan.warm_start {
        let gan = Checkpoint::<F>::load(path)?.into_gan()?;
        if gan.profile() != &training.profile {
            return Err(Error::config(
                "gan.warm_start",
                format!(
                    "checkpoint profile `{}` ({} px) does not match `{}` ({} px)",
                    gan.profile().name,
                    gan.profile().image_size,
                    training.profile.name,
                    training.profile.image_size
                ),
            ));
        }
        return Ok(gan);
    }
    let gan_dir = dir.join("gan");
    let final_path = gan_dir.join("gan_final.ckpt");
    if resume && final_path.exists() {
        log::info!("resuming from {}", final_path.display());
        return Checkpoint::<F>::load(&final_path)?.into_gan();
    }
    let training = TrainingConfig {
        checkpoint_dir: Some(gan_dir.clone()),
        ..training
    };
    let outcome = pretrain_cyclegan(ds, &training)?;
    write(&gan_dir.join("pretrain_log.jsonl"), &outcome.log.to_jsonl())?;
    Checkpoint::from_gan(&outcome.gan, training.seed, training.total_epochs).save(&final_path)?;
    Ok(outcome.gan)
}

fn obtain_proxy(cfg: &ExperimentConfig, ds: &ImbalancedDataset<F>, dir: &Path, resume: bool) -> Result<CertifiedProxy<F>> {
    let path = dir.join("proxy.ckpt");
    let network = if resume && path.exists() {
        Checkpoint::<F>::load(&path)?.into_classifier()?
    } else {
        let training = cfg.proxy_training()?;
        let pool = proxy_pool::<F>(&cfg.dataset_spec(), cfg.proxy.per_class)?;
        let network = train_proxy_classifier(&pool, &training)?;
        Checkpoint::from_classifier(&network, training.seed, training.total_epochs).save(&path)?;
        network
    };
    CertifiedProxy::certify(network, &ds.test, cfg.proxy.floor)
}

fn score_gan(proxy: &CertifiedProxy<F>, ds: &ImbalancedDataset<F>, gan: &GanPair<F>) -> Result<InceptionAccuracy> {
    inception_accuracy(proxy, &ds.test, |x| gan.g_ab.infer(x, 16), |x| gan.g_ba.infer(x, 16))
}

struct Trained {
    classifier: Network<F>,
    best_epoch: usize,
    log: crate::training::TrainingLog,
    gan: Option<GanPair<F>>,
}

fn one_run(
    cfg: &ExperimentConfig,
    ds: &ImbalancedDataset<F>,
    gan: Option<&GanPair<F>>,
    proxy: Option<&CertifiedProxy<F>>,
    fixed_inception: Option<InceptionAccuracy>,
    run: usize,
    seed: u64,
    run_dir: &Path,
) -> Result<RunMetrics> {
    let start = Instant::now();
    let training = cfg.classifier_training(seed)?;
    let (trained, rule) = match cfg.method {
        Method::Baseline(b) => {
            let plan = apply_baseline(b, ds, derive_seed(cfg.seed, "baseline"), cfg.baseline)?;
            let out = train_vanilla_classifier(&plan.dataset, &training, plan.class_weights, &plan.inference)?;
            (
                Trained {
                    classifier: out.classifier,
                    best_epoch: out.best_epoch,
                    log: out.log,
                    gan: None,
                },
                plan.inference,
            )
        }
        Method::Aug => {
            let gan = gan.ok_or_else(|| Error::Contract("aug needs a GAN".into()))?;
            let out = train_aug(ds, gan, &training)?;
            (
                Trained {
                    classifier: out.classifier,
                    best_epoch: out.best_epoch,
                    log: out.log,
                    gan: None,
                },
                crate::baselines::InferenceRule::Threshold,
            )
        }
        Method::Alt => {
            let gan = gan.ok_or_else(|| Error::Contract("alt needs a GAN".into()))?;
            let training = TrainingConfig {
                checkpoint_dir: Some(run_dir.to_path_buf()),
                ..training
            };
            let out = train_alt(ds, gan.clone(), &training)?;
            (
                Trained {
                    classifier: out.classifier,
                    best_epoch: out.best_epoch,
                    log: out.log,
                    gan: Some(out.gan),
                },
                crate::baselines::InferenceRule::Threshold,
            )
        }
    };
    Checkpoint::from_classifier(&trained.classifier, seed, trained.best_epoch).save(&run_dir.join("classifier.ckpt"))?;
    write(&run_dir.join("training_log.jsonl"), &trained.log.to_jsonl())?;
    let inception = match (&trained.gan, proxy) {
        (Some(g), Some(p)) => {
            Checkpoint::from_gan(g, seed, cfg.classifier.epochs).save(&run_dir.join("gan.ckpt"))?;
            Some(score_gan(p, ds, g)?)
        }
        (Some(g), None) => {
            Checkpoint::from_gan(g, seed, cfg.classifier.epochs).save(&run_dir.join("gan.ckpt"))?;
            None
        }
        _ => fixed_inception,
    };
    let test = evaluate_classifier(&trained.classifier, &ds.test, &rule)?;
    let validation = evaluate_classifier(&trained.classifier, &ds.val, &rule)?;
    Ok(RunMetrics {
        run,
        seed,
        best_epoch: trained.best_epoch,
        test,
        validation,
        inception,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Runs every stage of `cfg` and writes the artifacts listed in the module docs.
pub fn run_experiment(cfg: &ExperimentConfig, policy: OutputPolicy) -> Result<MetricsReport> {
    cfg.validate()?;
    let dir = cfg.output_path();
    prepare_output(&dir, cfg, policy)?;
    let resume = policy == OutputPolicy::Resume;
    let ds: ImbalancedDataset<F> = load_dataset(&cfg.dataset_spec())?;
    let gan = if cfg.method.uses_gan() {
        Some(obtain_gan(cfg, &ds, &dir, resume)?)
    } else {
        None
    };
    let proxy = if cfg.method.uses_gan() && cfg.proxy.enabled {
        Some(obtain_proxy(cfg, &ds, &dir, resume)?)
    } else {
        None
    };
    let fixed_inception = match (cfg.method, &gan, &proxy) {
        (Method::Aug, Some(g), Some(p)) => Some(score_gan(p, &ds, g)?),
        _ => None,
    };
    let runs = run_repeated(cfg.runs, cfg.seed, |run, seed| {
        let run_dir = dir.join(format!("run_{run:02}"));
        let result = run_dir.join("result.json");
        if resume && result.exists() {
            let stored: RunMetrics = serde_json::from_str(&read(&result)?)
                .map_err(|e| Error::Format(format!("{}: {e}", result.display())))?;
            if stored.seed == seed {
                return Ok(stored);
            }
        }
        let metrics = one_run(cfg, &ds, gan.as_ref(), proxy.as_ref(), fixed_inception, run, seed, &run_dir)?;
        write(&result, &serde_json::to_string_pretty(&metrics).expect("metrics serialize"))?;
        Ok(metrics)
    })?;
    let report = MetricsReport::from_runs(&cfg.method.to_string(), ds.train_a.len(), ds.train_b.len(), ds.gamma, runs);
    write(&dir.join("metrics.json"), &report.to_json())?;
    write(&dir.join("metrics.csv"), &report.to_csv())?;
    Ok(report)
}

/// Trains (or resumes) only the GAN stage; returns the final checkpoint path.
pub fn pretrain_gan(cfg: &ExperimentConfig, policy: OutputPolicy) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.output_path();
    prepare_output(&dir, cfg, policy)?;
    let ds: ImbalancedDataset<F> = load_dataset(&cfg.dataset_spec())?;
    let cfg = ExperimentConfig {
        gan: GanStage {
            warm_start: None,
            ..cfg.gan.clone()
        },
        ..cfg.clone()
    };
    obtain_gan(&cfg, &ds, &dir, policy == OutputPolicy::Resume)?;
    Ok(dir.join("gan").join("gan_final.ckpt"))
}

/// Inception accuracy of a saved GAN on the test split of `cfg`'s dataset.
pub fn eval_gan(cfg: &ExperimentConfig, checkpoint: &Path, model: &str) -> Result<InceptionRow> {
    cfg.validate()?;
    let ds: ImbalancedDataset<F> = load_dataset(&cfg.dataset_spec())?;
    let cfg = ExperimentConfig {
        gan: GanStage {
            warm_start: Some(checkpoint.to_path_buf()),
            ..cfg.gan.clone()
        },
        ..cfg.clone()
    };
    let gan = obtain_gan(&cfg, &ds, Path::new(""), false)?;
    let dir = cfg.output_path();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let proxy = obtain_proxy(&cfg, &ds, &dir, true)?;
    let acc = score_gan(&proxy, &ds, &gan)?;
    Ok(InceptionRow {
        model: model.to_string(),
        n_minority: ds.train_b.len(),
        a_to_b: acc.a_to_b,
        b_to_a: acc.b_to_a,
        mean: acc.mean,
    })
}

/// Runs every method at every minority count (ascending) under
/// `<output_dir>/<method>/n<count>` and writes the result tables.
///
/// GAN methods at the same count share one pretrained GAN.
pub fn sweep(base: &ExperimentConfig, methods: &[Method], counts: &[usize], policy: OutputPolicy) -> Result<Vec<MetricsReport>> {
    if methods.is_empty() || counts.is_empty() {
        return Err(Error::config("sweep", "needs at least one method and one minority count"));
    }
    let mut counts = counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    let root = base.output_path();
    let mut reports = Vec::new();
    for &n in &counts {
        let mut at_count = base.clone();
        at_count.dataset.n_minority = n;
        if methods.iter().any(|m| m.uses_gan()) && at_count.gan.warm_start.is_none() {
            at_count.method = Method::Aug;
            at_count.output_dir = root.join("gan").join(format!("n{n}"));
            at_count.gan.warm_start = Some(pretrain_gan(&at_count, policy)?);
        }
        for &m in methods {
            let cfg = ExperimentConfig {
                method: m,
                output_dir: root.join(m.slug()).join(format!("n{n}")),
                ..at_count.clone()
            };
            let report = run_experiment(&cfg, policy)?;
            log::info!("{m} n_minority={n}: minority F1 {:.4}", report.mean.f1_minority);
            reports.push(report);
        }
    }
    for (metric, name) in TABLE_METRICS {
        let table = ResultTable::from_reports(&reports, metric);
        write(&root.join(format!("table_{name}.csv")), &table.to_csv())?;
    }
    Ok(reports)
}

const TABLE_METRICS: [(TableMetric, &str); 4] = [
    (TableMetric::F1Minority, "f1_minority"),
    (TableMetric::F1Majority, "f1_majority"),
    (TableMetric::Acsa, "acsa"),
    (TableMetric::InceptionAccuracy, "inception_accuracy"),
];

/// Collects `metrics.json` files (given directly or found recursively under
/// directories) in path order.
pub fn collect_reports(paths: &[PathBuf]) -> Result<Vec<MetricsReport>> {
    fn walk(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(p, e)))
                .collect::<Result<_>>()?;
            entries.sort();
            for e in entries {
                walk(&e, out)?;
            }
        } else if p.file_name().is_some_and(|n| n == "metrics.json") {
            out.push(p.to_path_buf());
        }
        Ok(())
    }
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        if p.is_file() {
            files.push(p.clone());
        } else {
            walk(p, &mut files)?;
        }
    }
    files.iter().map(|f| MetricsReport::from_json(&read(f)?)).collect()
}

/// Renders `reports` as a method-by-count table of `metric`.
pub fn emit_table(reports: &[MetricsReport], metric: TableMetric) -> ResultTable {
    ResultTable::from_reports(reports, metric)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(method: Method, dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk(method, 3, dir);
        cfg.dataset.n_majority = 6;
        cfg.dataset.val_per_class = 2;
        cfg.dataset.test_per_class = 4;
        cfg.dataset.image_size = 16;
        cfg.profile = ProfileSpec::Custom(ModelProfile {
            generator_filters: 2,
            generator_residual_blocks: 1,
            discriminator_filters: 2,
            classifier_fc_sizes: (4, 4),
            ..ModelProfile::desk(16)
        });
        cfg.runs = 2;
        cfg.gan.epochs = 1;
        cfg.classifier.epochs = 2;
        cfg.classifier.swap_interval = 1;
        cfg.classifier.batch_size = 2;
        cfg.proxy.per_class = 4;
        cfg.proxy.epochs = 1;
        cfg.proxy.floor = 0.0;
        cfg
    }

    #[test]
    fn method_names_round_trip() {
        for s in ["aug", "alt", "vanilla", "smote:k=5", "cbl:beta=0.999", "us+cs"] {
            assert_eq!(s.parse::<Method>().unwrap().to_string(), s);
        }
        assert!("gan".parse::<Method>().is_err());
        assert_eq!(Method::Baseline(BaselineMethod::UndersampleCostSensitive).slug(), "us_cs");
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::desk(Method::Alt, 25, "runs/x");
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let mut custom = tiny(Method::Baseline(BaselineMethod::Smote { k: 2 }), Path::new("o"));
        custom.gan.warm_start = Some("g.ckpt".into());
        custom.gan.lr_schedule = LrSchedule::ConstantThenLinearDecay {
            constant_epochs: 1,
            decay_epochs: 1,
        };
        assert_eq!(ExperimentConfig::from_toml(&custom.to_toml()).unwrap(), custom);
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            method = "aug"
            output_dir = "out"
            [dataset]
            source = { kind = "synthetic" }
            n_majority = 450
            n_minority = 25
            "#,
        )
        .unwrap();
        assert_eq!(cfg, ExperimentConfig::desk(Method::Aug, 25, "out"));
    }

    #[test]
    fn config_errors_name_the_field() {
        let base = ExperimentConfig::desk(Method::Aug, 25, "out").to_toml();
        let bad = base.replace("schema_version = 1", "schema_version = 9");
        match ExperimentConfig::from_toml(&bad).and_then(|c| c.validate()) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "schema_version"),
            other => panic!("{other:?}"),
        }
        let bad = base.replace("runs = 3", "runs = 3\nrunz = 1");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config { .. })));
        let bad = base.replace("runs = 3", "runs = \"three\"");
        match ExperimentConfig::from_toml(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "runs"),
            other => panic!("{other:?}"),
        }
        let mut cfg = ExperimentConfig::desk(Method::Alt, 25, "out");
        cfg.classifier.epochs = 12;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "training.swap_interval"),
            other => panic!("{other:?}"),
        }
        let mut cfg = ExperimentConfig::desk(Method::Aug, 25, "out");
        cfg.profile = ProfileSpec::Preset("paper".into());
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dataset.image_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn baseline_experiment_writes_artifacts_and_resumes() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(Method::Baseline(BaselineMethod::CostSensitive), &tmp.path().join("cs"));
        let report = run_experiment(&cfg, OutputPolicy::Fresh).unwrap();
        assert_eq!(report.run_count, 2);
        assert_eq!((report.n_majority, report.n_minority), (6, 3));
        let dir = cfg.output_path();
        for f in ["config.toml", "metrics.json", "metrics.csv", "run_00/classifier.ckpt", "run_01/training_log.jsonl"] {
            assert!(dir.join(f).exists(), "{f}");
        }
        assert!(matches!(run_experiment(&cfg, OutputPolicy::Fresh), Err(Error::Config { .. })));
        let resumed = run_experiment(&cfg, OutputPolicy::Resume).unwrap();
        assert_eq!(resumed, report);
        let redone = run_experiment(&cfg, OutputPolicy::Overwrite).unwrap();
        assert_eq!(redone.without_timing(), report.without_timing());
        let mut changed = cfg.clone();
        changed.seed = 1;
        assert!(matches!(run_experiment(&changed, OutputPolicy::Resume), Err(Error::Config { .. })));
    }

    #[test]
    fn gan_experiments_report_inception_accuracy() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(Method::Alt, &tmp.path().join("alt"));
        let report = run_experiment(&cfg, OutputPolicy::Fresh).unwrap();
        assert!(report.mean.inception_accuracy.is_some());
        let dir = cfg.output_path();
        assert!(dir.join("gan/gan_final.ckpt").exists());
        assert!(dir.join("run_01/gan.ckpt").exists());
        let row = eval_gan(&cfg, &dir.join("gan/gan_final.ckpt"), "pretrained").unwrap();
        assert_eq!(row.n_minority, 3);
        assert!((0.0..=1.0).contains(&row.mean));
    }

    #[test]
    fn sweep_orders_counts_and_shares_the_gan() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Method::Aug, &tmp.path().join("sweep"));
        cfg.runs = 1;
        cfg.proxy.enabled = false;
        let methods = [Method::Baseline(BaselineMethod::Vanilla), Method::Aug];
        let reports = sweep(&cfg, &methods, &[4, 3], OutputPolicy::Fresh).unwrap();
        let order: Vec<(String, usize)> = reports.iter().map(|r| (r.method.clone(), r.n_minority)).collect();
        assert_eq!(
            order,
            [("vanilla".into(), 3), ("aug".into(), 3), ("vanilla".into(), 4), ("aug".into(), 4)]
        );
        let root = cfg.output_path();
        assert!(root.join("gan/n3/gan/gan_final.ckpt").exists());
        assert!(!root.join("aug/n3/gan").exists());
        let table = ResultTable::from_csv(&read(&root.join("table_f1_minority.csv")).unwrap()).unwrap();
        assert_eq!(table.columns, [3, 4]);
        let collected = collect_reports(&[root.clone()]).unwrap();
        assert_eq!(collected.len(), 4);
        assert_eq!(emit_table(&collected, TableMetric::Acsa).rows.len(), 2);
    }

    #[test]
    fn dry_run_plan_checks_capacity() {
        let mut cfg = tiny(Method::Aug, Path::new("unused"));
        let p = plan(&cfg).unwrap();
        assert_eq!(p.stages.len(), 3);
        assert_eq!(p.gamma, 2.0);
        cfg.dataset.source = DatasetSource::ImageFolder {
            path: "/nonexistent".into(),
            class_a: "a".into(),
            class_b: "b".into(),
        };
        assert!(plan(&cfg).is_err());
    }
}
