//! Training procedures: translation-GAN pretraining, classifier training with
//! a frozen GAN (AUG), alternating classifier/GAN phases (ALT), and plain
//! classifier training for the baselines.

use std::ops::Range;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::baselines::InferenceRule;
use crate::datasets::{stack_images, ImbalancedDataset, LabeledExample, PairedBatch};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_classifier, ClassMetrics, SelectionMetric};
use crate::losses::{
    classifier_loss_combined, classifier_loss_majority, classifier_loss_minority, cycle_loss, full_objective,
    identity_loss, weighted_cross_entropy, ClassifierTermWeighting, GanLossForm, LossBreakdown, LossWeights,
};
use crate::models::{Checkpoint, GanPair, Mode, ModelProfile, Network, Role};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, derive_seed_path};
use crate::tensor::Tensor;

// ---------------------------------------------------------------- optimizer

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub name: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adam".into(),
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name != "adam" {
            return Err(Error::config(
                "optimizer.name",
                format!("unsupported optimizer `{}` (only `adam`)", self.name),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer", "moment decays must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: OptimizerConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], cfg: &OptimizerConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (b1t, b2t, one_b1, one_b2) = (T::lit(b1), T::lit(b2), T::lit(1.0 - b1), T::lit(1.0 - b2));
        let (step, c2t, eps) = (T::lit(lr / c1), T::lit(c2), T::lit(self.cfg.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1t * *m + one_b1 * g;
                *v = b2t * *v + one_b2 * g * g;
                *p -= step * *m / ((*v / c2t).sqrt() + eps);
            }
        }
    }
}

// ----------------------------------------------------------------- schedule

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr0` for `constant_epochs`, then linear decay reaching 0 after `decay_epochs` more.
    ConstantThenLinearDecay { constant_epochs: usize, decay_epochs: usize },
}

impl LrSchedule {
    /// Learning rate used during epoch `epoch` (0-based).
    pub fn lr_at(&self, lr0: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => lr0,
            LrSchedule::ConstantThenLinearDecay {
                constant_epochs,
                decay_epochs,
            } => {
                if epoch <= constant_epochs {
                    lr0
                } else if decay_epochs == 0 {
                    0.0
                } else {
                    let frac = (epoch - constant_epochs) as f64 / decay_epochs as f64;
                    lr0 * (1.0 - frac).max(0.0)
                }
            }
        }
    }
}

// ------------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    VanillaGan,
    Aug,
    Alt,
    VanillaClassifier,
}

/// Loss weights that are free configuration; the imbalance ratio comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightsConfig {
    pub alpha: f64,
    pub beta: f64,
    pub classifier_terms: ClassifierTermWeighting,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        let w = LossWeights::new(1.0);
        Self {
            alpha: w.alpha,
            beta: w.beta,
            classifier_terms: w.classifier_terms,
        }
    }
}

impl WeightsConfig {
    pub fn resolve(&self, gamma: f64) -> Result<LossWeights> {
        let w = LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma,
            classifier_terms: self.classifier_terms,
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    pub total_epochs: usize,
    #[serde(default = "default_swap_interval")]
    pub swap_interval: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Batch size of GAN updates.
    #[serde(default = "one")]
    pub gan_batch_size: usize,
    /// Per-class batch size of classifier updates.
    #[serde(default = "one")]
    pub classifier_batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weights: WeightsConfig,
    pub profile: ModelProfile,
    #[serde(default)]
    pub warm_start: Option<PathBuf>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub gan_loss_form: GanLossForm,
    /// Discriminator history buffer size; 0 disables it.
    #[serde(default)]
    pub image_pool: usize,
    #[serde(default)]
    pub selection_metric: SelectionMetric,
    /// Epoch marks (1-based counts of completed epochs) at which GAN checkpoints are written.
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
    /// Directory for checkpoints written during training.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

fn default_swap_interval() -> usize {
    5
}
fn default_lr() -> f64 {
    2e-4
}
fn one() -> usize {
    1
}

impl TrainingConfig {
    pub fn new(mode: TrainingMode, total_epochs: usize, profile: ModelProfile) -> Self {
        let image_pool = if profile.name == "paper" { 50 } else { 0 };
        Self {
            mode,
            total_epochs,
            swap_interval: default_swap_interval(),
            lr: default_lr(),
            lr_schedule: LrSchedule::Constant,
            gan_batch_size: 1,
            classifier_batch_size: 1,
            seed: 0,
            weights: WeightsConfig::default(),
            profile,
            warm_start: None,
            optimizer: OptimizerConfig::default(),
            gan_loss_form: GanLossForm::default(),
            image_pool,
            selection_metric: SelectionMetric::default(),
            checkpoint_epochs: Vec::new(),
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("training.lr", "must be positive"));
        }
        if self.gan_batch_size == 0 || self.classifier_batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if self.mode == TrainingMode::Alt {
            if self.swap_interval == 0 {
                return Err(Error::config("training.swap_interval", "must be at least 1"));
            }
            if self.total_epochs % self.swap_interval != 0 {
                return Err(Error::config(
                    "training.swap_interval",
                    format!(
                        "{} does not divide total_epochs = {}",
                        self.swap_interval, self.total_epochs
                    ),
                ));
            }
        }
        if !(self.weights.alpha >= 0.0) || !(self.weights.beta >= 0.0) {
            return Err(Error::config("training.weights", "alpha and beta must be non-negative"));
        }
        self.optimizer.validate()?;
        self.profile.validate()
    }

    fn lr(&self, epoch: usize) -> f64 {
        self.lr_schedule.lr_at(self.lr, epoch)
    }

    fn check_dataset<T: Scalar>(&self, ds: &ImbalancedDataset<T>) -> Result<()> {
        let p = &self.profile;
        let want = [p.channels, p.image_size, p.image_size];
        if ds.image_shape() != want {
            return Err(Error::config(
                "profile",
                format!("dataset images are {:?} but the profile expects {want:?}", ds.image_shape()),
            ));
        }
        Ok(())
    }

    fn check_gan<T: Scalar>(&self, gan: &GanPair<T>) -> Result<()> {
        if gan.profile() != &self.profile {
            return Err(Error::config(
                "warm_start",
                format!(
                    "GAN checkpoint was built for profile `{}` ({} px) but training uses `{}` ({} px)",
                    gan.profile().name,
                    gan.profile().image_size,
                    self.profile.name,
                    self.profile.image_size
                ),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------- log

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Classifier,
    Gan,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DigestPair {
    pub before: String,
    pub after: String,
}

impl DigestPair {
    pub fn unchanged(&self) -> bool {
        self.before == self.after
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub losses: LossBreakdown,
    pub d_loss_a: Option<f64>,
    pub d_loss_b: Option<f64>,
    pub validation: Option<ClassMetrics>,
    pub lr: f64,
    pub wall_clock_s: f64,
    pub seed: u64,
    pub classifier_digest: Option<DigestPair>,
    pub gan_digest: Option<DigestPair>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("training log: {e}"))))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    /// Consecutive runs of equal phase tags, as `(phase, epochs)`.
    pub fn phases(&self) -> Vec<(Phase, Range<usize>)> {
        let mut out: Vec<(Phase, Range<usize>)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((p, range)) if *p == r.phase && range.end == r.epoch => range.end = r.epoch + 1,
                _ => out.push((r.phase, r.epoch..r.epoch + 1)),
            }
        }
        out
    }

    /// Copy with wall-clock fields zeroed.
    pub fn without_timing(&self) -> Self {
        let mut l = self.clone();
        for r in &mut l.records {
            r.wall_clock_s = 0.0;
        }
        l
    }
}

/// Phase plan of ALT training: blocks of `interval` epochs alternating
/// classifier and GAN, starting with the classifier.
pub fn alt_phase_plan(total_epochs: usize, interval: usize) -> Result<Vec<(Phase, Range<usize>)>> {
    if interval == 0 || total_epochs % interval != 0 {
        return Err(Error::config(
            "training.swap_interval",
            format!("{interval} does not divide total_epochs = {total_epochs}"),
        ));
    }
    Ok((0..total_epochs / interval)
        .map(|i| {
            let phase = if i % 2 == 0 { Phase::Classifier } else { Phase::Gan };
            (phase, i * interval..(i + 1) * interval)
        })
        .collect())
}

/// Index of the best value; ties go to the earliest.
pub fn select_best(metrics: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &m) in metrics.iter().enumerate() {
        match best {
            Some(b) if !(m > metrics[b]) => {}
            _ if m.is_nan() => {}
            _ => best = Some(i),
        }
    }
    best
}

// ------------------------------------------------------------------ helpers

fn check_finite<T: Scalar>(grads: &[Tensor<T>], term: &str) -> Result<()> {
    if grads.iter().all(|g| g.data().iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::Numerical {
            term: term.into(),
            message: "non-finite gradient".into(),
        })
    }
}

fn scaled<T: Scalar>(v: &[T], w: f64) -> Vec<T> {
    let w = T::lit(w);
    v.iter().map(|&x| x * w).collect()
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.as_f64()
}

/// Fixed-size history of generated images; returns a mix of fresh and
/// previously generated images once full.
#[derive(Clone, Debug)]
pub struct ImagePool<T> {
    capacity: usize,
    images: Vec<Tensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ImagePool<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            images: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn query(&mut self, batch: &Tensor<T>) -> Tensor<T> {
        if self.capacity == 0 {
            return batch.clone();
        }
        let items: Vec<Tensor<T>> = (0..batch.batch())
            .map(|i| {
                let img = batch.select(i);
                if self.images.len() < self.capacity {
                    self.images.push(img.clone());
                    img
                } else if self.rng.random::<f64>() < 0.5 {
                    let j = self.rng.random_range(0..self.capacity);
                    std::mem::replace(&mut self.images[j], img)
                } else {
                    img
                }
            })
            .collect();
        Tensor::concat(&items.iter().collect::<Vec<_>>())
    }
}

struct GanOptimizers<T> {
    g_ab: Adam<T>,
    g_ba: Adam<T>,
    d_a: Adam<T>,
    d_b: Adam<T>,
}

impl<T: Scalar> GanOptimizers<T> {
    fn new(gan: &GanPair<T>, cfg: &OptimizerConfig) -> Self {
        Self {
            g_ab: Adam::new(gan.g_ab.params(), cfg),
            g_ba: Adam::new(gan.g_ba.params(), cfg),
            d_a: Adam::new(gan.d_a.params(), cfg),
            d_b: Adam::new(gan.d_b.params(), cfg),
        }
    }
}

/// Classifier feedback used in GAN phases: a frozen classifier and its
/// predictions on the real images of the current batch.
struct ClassifierFeedback<'a, T> {
    classifier: &'a Network<T>,
}

struct GanStepOutput {
    losses: LossBreakdown,
    d_loss_a: f64,
    d_loss_b: f64,
}

/// Evaluates the generator objective on one batch, attaching all partials to `g`.
///
/// Returns the scalar objective node and its per-term breakdown. Generator
/// parameters are bound trainable; discriminators and the classifier are
/// bound frozen so their activations still pass gradients to the generators.
pub struct GeneratorObjective {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub fake_b: Var,
    pub fake_a: Var,
    pub g_ab: crate::models::Bound,
    pub g_ba: crate::models::Bound,
}

/// Builds the full generator objective for batch `(a, b)` inside `g`.
pub fn generator_objective<T: Scalar>(
    g: &mut Graph<T>,
    gan: &GanPair<T>,
    classifier: Option<&Network<T>>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    weights: &LossWeights,
    form: GanLossForm,
) -> Result<GeneratorObjective> {
    let bg_ab = gan.g_ab.bind(g, true);
    let bg_ba = gan.g_ba.bind(g, true);
    let bd_a = gan.d_a.bind(g, false);
    let bd_b = gan.d_b.bind(g, false);
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let mut eval = Mode::Eval;
    let fake_b = gan.g_ab.forward(g, &bg_ab, av, &mut eval);
    let rec_a = gan.g_ba.forward(g, &bg_ba, fake_b, &mut eval);
    let fake_a = gan.g_ba.forward(g, &bg_ba, bv, &mut eval);
    let rec_b = gan.g_ab.forward(g, &bg_ab, fake_a, &mut eval);
    let d_fake_b = gan.d_b.forward(g, &bd_b, fake_b, &mut eval);
    let d_fake_a = gan.d_a.forward(g, &bd_a, fake_a, &mut eval);

    let gan_ab = form.generator(g.value(d_fake_b).data());
    let gan_ba = form.generator(g.value(d_fake_a).data());
    let cyc_a = cycle_loss(a.data(), g.value(rec_a).data())?;
    let cyc_b = cycle_loss(b.data(), g.value(rec_b).data())?;
    let mut bd = LossBreakdown {
        gan_ab: to_f64(gan_ab.value),
        gan_ba: to_f64(gan_ba.value),
        cyc_a: to_f64(cyc_a.value),
        cyc_b: to_f64(cyc_b.value),
        ..Default::default()
    };
    let mut partials = vec![
        (d_fake_b, gan_ab.grads[0].clone()),
        (d_fake_a, gan_ba.grads[0].clone()),
        (rec_a, scaled(&cyc_a.grads[1], weights.beta)),
        (rec_b, scaled(&cyc_b.grads[1], weights.beta)),
    ];
    if weights.alpha > 0.0 {
        let idt_b = gan.g_ab.forward(g, &bg_ab, bv, &mut eval);
        let idt_a = gan.g_ba.forward(g, &bg_ba, av, &mut eval);
        let ide = identity_loss(g.value(idt_b).data(), b.data(), g.value(idt_a).data(), a.data())?;
        bd.ide = to_f64(ide.value);
        partials.push((idt_b, scaled(&ide.grads[0], weights.alpha)));
        partials.push((idt_a, scaled(&ide.grads[2], weights.alpha)));
    }
    if let Some(clf) = classifier {
        let bc = clf.bind(g, false);
        let z_fake_b = clf.forward_z(g, &bc, fake_b, &mut eval);
        let z_fake_a = clf.forward_z(g, &bc, fake_a, &mut eval);
        let z_b = clf.predict_z(b);
        let z_a = clf.predict_z(a);
        let cls_b = classifier_loss_minority(&z_b, g.value(z_fake_b).data());
        let cls_a = classifier_loss_majority(&z_a, g.value(z_fake_a).data());
        bd.cls_b = to_f64(cls_b.value);
        bd.cls_a = to_f64(cls_a.value);
        partials.push((z_fake_b, cls_b.grads[1].clone()));
        partials.push((z_fake_a, scaled(&cls_a.grads[1], weights.majority_classifier_factor())));
    }
    bd.total = full_objective(&bd, weights)?;
    let loss = g.external_loss(T::lit(bd.total), partials);
    Ok(GeneratorObjective {
        loss,
        breakdown: bd,
        fake_b,
        fake_a,
        g_ab: bg_ab,
        g_ba: bg_ba,
    })
}

#[allow(clippy::too_many_arguments)]
fn gan_step<T: Scalar>(
    gan: &mut GanPair<T>,
    opt: &mut GanOptimizers<T>,
    pools: &mut (ImagePool<T>, ImagePool<T>),
    a: &Tensor<T>,
    b: &Tensor<T>,
    weights: &LossWeights,
    form: GanLossForm,
    feedback: Option<&ClassifierFeedback<'_, T>>,
    lr: f64,
) -> Result<GanStepOutput> {
    // generators
    let mut g = Graph::new();
    let obj = generator_objective(&mut g, gan, feedback.map(|f| f.classifier), a, b, weights, form)?;
    g.backward(obj.loss);
    let grads_ab = gan.g_ab.grads(&g, &obj.g_ab);
    let grads_ba = gan.g_ba.grads(&g, &obj.g_ba);
    check_finite(&grads_ab, "generator_ab")?;
    check_finite(&grads_ba, "generator_ba")?;
    let fake_b = g.value(obj.fake_b).clone();
    let fake_a = g.value(obj.fake_a).clone();
    drop(g);
    opt.g_ab.step(gan.g_ab.params_mut(), &grads_ab, lr);
    opt.g_ba.step(gan.g_ba.params_mut(), &grads_ba, lr);

    // discriminators
    let fake_b = pools.1.query(&fake_b);
    let fake_a = pools.0.query(&fake_a);
    let mut g = Graph::new();
    let bd_a = gan.d_a.bind(&mut g, true);
    let bd_b = gan.d_b.bind(&mut g, true);
    let mut eval = Mode::Eval;
    let mut d_loss = |g: &mut Graph<T>, d: &Network<T>, bound, real: &Tensor<T>, fake: Tensor<T>| {
        let rv = g.constant(real.clone());
        let fv = g.constant(fake);
        let dr = d.forward(g, bound, rv, &mut eval);
        let df = d.forward(g, bound, fv, &mut eval);
        let s = form.discriminator(g.value(dr).data(), g.value(df).data());
        (s.value, vec![(dr, s.grads[0].clone()), (df, s.grads[1].clone())])
    };
    let (la, pa) = d_loss(&mut g, &gan.d_a, &bd_a, a, fake_a);
    let (lb, pb) = d_loss(&mut g, &gan.d_b, &bd_b, b, fake_b);
    let (d_loss_a, d_loss_b) = (to_f64(la), to_f64(lb));
    for (name, v) in [("discriminator_a", d_loss_a), ("discriminator_b", d_loss_b)] {
        if !v.is_finite() {
            return Err(Error::Numerical {
                term: name.into(),
                message: format!("non-finite value {v}"),
            });
        }
    }
    let mut partials = pa;
    partials.extend(pb);
    let loss = g.external_loss(la + lb, partials);
    g.backward(loss);
    let grads_a = gan.d_a.grads(&g, &bd_a);
    let grads_b = gan.d_b.grads(&g, &bd_b);
    check_finite(&grads_a, "discriminator_a")?;
    check_finite(&grads_b, "discriminator_b")?;
    opt.d_a.step(gan.d_a.params_mut(), &grads_a, lr);
    opt.d_b.step(gan.d_b.params_mut(), &grads_b, lr);
    Ok(GanStepOutput {
        losses: obj.breakdown,
        d_loss_a,
        d_loss_b,
    })
}

struct GanEpochOutput {
    losses: LossBreakdown,
    d_loss_a: f64,
    d_loss_b: f64,
}

#[allow(clippy::too_many_arguments)]
fn gan_epoch<T: Scalar>(
    ds: &ImbalancedDataset<T>,
    gan: &mut GanPair<T>,
    opt: &mut GanOptimizers<T>,
    pools: &mut (ImagePool<T>, ImagePool<T>),
    config: &TrainingConfig,
    weights: &LossWeights,
    feedback: Option<&ClassifierFeedback<'_, T>>,
    epoch: usize,
) -> Result<GanEpochOutput> {
    let batches = ds.batches(config.gan_batch_size, derive_seed(config.seed, "gan_batches"), epoch)?;
    let lr = config.lr(epoch);
    let mut out = GanEpochOutput {
        losses: LossBreakdown::default(),
        d_loss_a: 0.0,
        d_loss_b: 0.0,
    };
    for (k, PairedBatch { a, b }) in batches.iter().enumerate() {
        let xa = stack_images(&ds.train_a, a);
        let xb = stack_images(&ds.train_b, b);
        let s = gan_step(gan, opt, pools, &xa, &xb, weights, config.gan_loss_form, feedback, lr).map_err(|e| {
            with_location(e, &format!("epoch {epoch}, batch {k}"))
        })?;
        let n = k + 1;
        out.losses.accumulate(&s.losses, n);
        out.d_loss_a += (s.d_loss_a - out.d_loss_a) / n as f64;
        out.d_loss_b += (s.d_loss_b - out.d_loss_b) / n as f64;
    }
    Ok(out)
}

fn with_location(e: Error, location: &str) -> Error {
    match e {
        Error::Numerical { term, message } => Error::Numerical {
            term,
            message: format!("{message} at {location}"),
        },
        other => other,
    }
}

/// Writes the last good state next to the other checkpoints and names it in the error.
fn abort_with_checkpoint<T: Scalar>(e: Error, config: &TrainingConfig, last_good: Checkpoint<T>) -> Error {
    let Error::Numerical { term, message } = e else {
        return e;
    };
    let note = match &config.checkpoint_dir {
        Some(dir) => {
            let path = dir.join("last_good.ckpt");
            match last_good.save(&path) {
                Ok(()) => format!("; last good state (epoch {}) saved to {}", last_good.epoch, path.display()),
                Err(save) => format!("; saving last good state failed: {save}"),
            }
        }
        None => format!("; last good state is epoch {}", last_good.epoch),
    };
    Error::Numerical {
        term,
        message: message + &note,
    }
}

fn new_pools<T: Scalar>(config: &TrainingConfig) -> (ImagePool<T>, ImagePool<T>) {
    (
        ImagePool::new(config.image_pool, derive_seed(config.seed, "pool_a")),
        ImagePool::new(config.image_pool, derive_seed(config.seed, "pool_b")),
    )
}

// ----------------------------------------------------------------- pretrain

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    pub gan: GanPair<T>,
    pub log: TrainingLog,
    /// GAN digests at each configured checkpoint mark.
    pub marks: Vec<(usize, String)>,
}

/// Trains the translation GAN alone on the imbalanced data.
pub fn pretrain_cyclegan<T: Scalar>(ds: &ImbalancedDataset<T>, config: &TrainingConfig) -> Result<PretrainOutcome<T>> {
    let gan = GanPair::new(&config.profile, derive_seed(config.seed, "gan_init"))?;
    pretrain_from(ds, gan, config)
}

/// [`pretrain_cyclegan`] from given initial weights.
pub fn pretrain_from<T: Scalar>(
    ds: &ImbalancedDataset<T>,
    mut gan: GanPair<T>,
    config: &TrainingConfig,
) -> Result<PretrainOutcome<T>> {
    config.validate()?;
    if config.mode != TrainingMode::VanillaGan {
        return Err(Error::config("training.mode", "GAN pretraining requires mode `vanilla_gan`"));
    }
    config.check_dataset(ds)?;
    config.check_gan(&gan)?;
    let weights = config.weights.resolve(ds.gamma)?;
    let mut opt = GanOptimizers::new(&gan, &config.optimizer);
    let mut pools = new_pools(config);
    let mut log = TrainingLog::default();
    let mut marks = Vec::new();
    let save_mark = |gan: &GanPair<T>, epoch: usize, marks: &mut Vec<(usize, String)>| -> Result<()> {
        if config.checkpoint_epochs.contains(&epoch) {
            marks.push((epoch, gan.digest()));
            if let Some(dir) = &config.checkpoint_dir {
                Checkpoint::from_gan(gan, config.seed, epoch)
                    .with_metadata("phase", "pretrain")
                    .save(&dir.join(format!("gan_epoch{epoch:04}.ckpt")))?;
            }
        }
        Ok(())
    };
    save_mark(&gan, 0, &mut marks)?;
    for epoch in 0..config.total_epochs {
        let start = Instant::now();
        let before = gan.digest();
        let snapshot = gan.clone();
        let out = match gan_epoch(ds, &mut gan, &mut opt, &mut pools, config, &weights, None, epoch) {
            Ok(o) => o,
            Err(e) => return Err(abort_with_checkpoint(e, config, Checkpoint::from_gan(&snapshot, config.seed, epoch))),
        };
        log.records.push(EpochRecord {
            epoch,
            phase: Phase::Pretrain,
            losses: out.losses,
            d_loss_a: Some(out.d_loss_a),
            d_loss_b: Some(out.d_loss_b),
            validation: None,
            lr: config.lr(epoch),
            wall_clock_s: start.elapsed().as_secs_f64(),
            seed: config.seed,
            classifier_digest: None,
            gan_digest: Some(DigestPair {
                before,
                after: gan.digest(),
            }),
        });
        log::info!(
            "pretrain epoch {epoch}: G {:.4} D_A {:.4} D_B {:.4}",
            out.losses.total,
            out.d_loss_a,
            out.d_loss_b
        );
        save_mark(&gan, epoch + 1, &mut marks)?;
    }
    Ok(PretrainOutcome { gan, log, marks })
}

// --------------------------------------------------------------- classifier

/// Best-on-validation classifier with its training history.
#[derive(Clone, Debug)]
pub struct ClassifierOutcome<T> {
    pub classifier: Network<T>,
    pub best_epoch: usize,
    pub best_validation: Option<ClassMetrics>,
    pub log: TrainingLog,
}

#[derive(Clone, Debug)]
pub struct AltOutcome<T> {
    pub classifier: Network<T>,
    pub best_epoch: usize,
    pub best_validation: Option<ClassMetrics>,
    pub gan: GanPair<T>,
    pub log: TrainingLog,
}

/// Frozen translations of every training image, `G_AB(train_a)` and `G_BA(train_b)`.
struct Translations<T> {
    fake_b: Tensor<T>,
    fake_a: Tensor<T>,
}

impl<T: Scalar> Translations<T> {
    fn compute(ds: &ImbalancedDataset<T>, gan: &GanPair<T>) -> Self {
        let all = |v: &[LabeledExample<T>]| stack_images(v, &(0..v.len()).collect::<Vec<_>>());
        Self {
            fake_b: gan.g_ab.infer(&all(&ds.train_a), 32),
            fake_a: gan.g_ba.infer(&all(&ds.train_b), 32),
        }
    }
}

fn gather<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let items: Vec<Tensor<T>> = idx.iter().map(|&i| t.select(i)).collect();
    Tensor::concat(&items.iter().collect::<Vec<_>>())
}

/// Value and `(L_B, L_A)` breakdown of the classifier objective on given `z` values.
///
/// `z` is laid out as `[real b | G_AB(a) | real a | G_BA(b)]` with segment
/// lengths `(n_b, n_a, n_a, n_b)`. Returns the objective and `d/dz`.
pub fn classifier_objective<T: Scalar>(z: &[T], n_a: usize, n_b: usize, gamma: f64) -> Result<(LossBreakdown, Vec<T>)> {
    assert_eq!(z.len(), 2 * (n_a + n_b));
    let (zb, rest) = z.split_at(n_b);
    let (zfb, rest) = rest.split_at(n_a);
    let (za, zfa) = rest.split_at(n_a);
    let lb = classifier_loss_minority(zb, zfb);
    let la = classifier_loss_majority(za, zfa);
    let comb = classifier_loss_combined(lb.value, la.value, gamma)?;
    let (cb, ca) = (comb.grads[0][0], comb.grads[1][0]);
    let mut grad = Vec::with_capacity(z.len());
    for (g, c) in [(&lb.grads[0], cb), (&lb.grads[1], cb), (&la.grads[0], ca), (&la.grads[1], ca)] {
        grad.extend(g.iter().map(|&v| v * c));
    }
    let bd = LossBreakdown {
        cls_a: to_f64(la.value),
        cls_b: to_f64(lb.value),
        total: to_f64(comb.value),
        ..Default::default()
    };
    if !bd.total.is_finite() {
        return Err(Error::Numerical {
            term: "cls".into(),
            message: format!("non-finite classifier loss {}", bd.total),
        });
    }
    Ok((bd, grad))
}

#[allow(clippy::too_many_arguments)]
fn aug_step<T: Scalar>(
    clf: &mut Network<T>,
    opt: &mut Adam<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    fake_b: &Tensor<T>,
    fake_a: &Tensor<T>,
    gamma: f64,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let x = Tensor::concat(&[b, fake_b, a, fake_a]);
    let mut g = Graph::new();
    let bound = clf.bind(&mut g, true);
    let xv = g.constant(x);
    let z = clf.forward_z(&mut g, &bound, xv, &mut Mode::Train(rng));
    let (bd, grad) = classifier_objective(g.value(z).data(), a.batch(), b.batch(), gamma)?;
    let loss = g.external_loss(T::lit(bd.total), vec![(z, grad)]);
    g.backward(loss);
    let grads = clf.grads(&g, &bound);
    check_finite(&grads, "cls")?;
    opt.step(clf.params_mut(), &grads, lr);
    Ok(bd)
}

/// Tracks the best validation epoch; ties keep the earliest.
struct BestTracker<T> {
    metric: SelectionMetric,
    best: Option<(usize, f64, ClassMetrics, Network<T>)>,
}

impl<T: Scalar> BestTracker<T> {
    fn new(metric: SelectionMetric) -> Self {
        Self { metric, best: None }
    }

    fn offer(&mut self, epoch: usize, m: ClassMetrics, clf: &Network<T>) {
        let score = self.metric.of(&m);
        let better = match &self.best {
            None => true,
            Some((_, s, _, _)) => score > *s,
        };
        if better {
            self.best = Some((epoch, score, m, clf.clone()));
        }
    }

    fn finish(self, fallback: Network<T>, last_epoch: usize) -> (Network<T>, usize, Option<ClassMetrics>) {
        match self.best {
            Some((e, _, m, net)) => (net, e, Some(m)),
            None => (fallback, last_epoch, None),
        }
    }
}

fn validate_epoch<T: Scalar>(clf: &Network<T>, ds: &ImbalancedDataset<T>, rule: &InferenceRule) -> Result<Option<ClassMetrics>> {
    if ds.val.is_empty() {
        return Ok(None);
    }
    evaluate_classifier(clf, &ds.val, rule).map(Some)
}

#[allow(clippy::too_many_arguments)]
fn classifier_epoch<T: Scalar>(
    ds: &ImbalancedDataset<T>,
    trans: &Translations<T>,
    clf: &mut Network<T>,
    opt: &mut Adam<T>,
    config: &TrainingConfig,
    gamma: f64,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let batches = ds.batches(config.classifier_batch_size, derive_seed(config.seed, "classifier_batches"), epoch)?;
    let lr = config.lr(epoch);
    let mut acc = LossBreakdown::default();
    for (k, PairedBatch { a, b }) in batches.iter().enumerate() {
        let xa = stack_images(&ds.train_a, a);
        let xb = stack_images(&ds.train_b, b);
        let fb = gather(&trans.fake_b, a);
        let fa = gather(&trans.fake_a, b);
        let bd = aug_step(clf, opt, &xa, &xb, &fb, &fa, gamma, lr, rng)
            .map_err(|e| with_location(e, &format!("epoch {epoch}, batch {k}")))?;
        acc.accumulate(&bd, k + 1);
    }
    Ok(acc)
}

fn new_classifier<T: Scalar>(config: &TrainingConfig) -> Result<Network<T>> {
    Network::new(Role::Classifier, &config.profile, derive_seed(config.seed, "classifier_init"))
}

/// Trains a fresh classifier with a frozen translation GAN supplying extra examples.
pub fn train_aug<T: Scalar>(
    ds: &ImbalancedDataset<T>,
    gan: &GanPair<T>,
    config: &TrainingConfig,
) -> Result<ClassifierOutcome<T>> {
    config.validate()?;
    if config.mode != TrainingMode::Aug {
        return Err(Error::config("training.mode", "expected mode `aug`"));
    }
    config.check_dataset(ds)?;
    config.check_gan(gan)?;
    let weights = config.weights.resolve(ds.gamma)?;
    let mut clf = new_classifier(config)?;
    let mut opt = Adam::new(clf.params(), &config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dropout"));
    let trans = Translations::compute(ds, gan);
    let gan_digest = gan.digest();
    let mut best = BestTracker::new(config.selection_metric);
    let mut log = TrainingLog::default();
    for epoch in 0..config.total_epochs {
        let start = Instant::now();
        let before = clf.digest();
        let snapshot = clf.clone();
        let losses = classifier_epoch(ds, &trans, &mut clf, &mut opt, config, weights.gamma, epoch, &mut rng)
            .map_err(|e| abort_with_checkpoint(e, config, Checkpoint::from_classifier(&snapshot, config.seed, epoch)))?;
        let val = validate_epoch(&clf, ds, &InferenceRule::Threshold)?;
        if let Some(m) = val {
            best.offer(epoch, m, &clf);
        }
        log.records.push(EpochRecord {
            epoch,
            phase: Phase::Classifier,
            losses,
            d_loss_a: None,
            d_loss_b: None,
            validation: val,
            lr: config.lr(epoch),
            wall_clock_s: start.elapsed().as_secs_f64(),
            seed: config.seed,
            classifier_digest: Some(DigestPair {
                before,
                after: clf.digest(),
            }),
            gan_digest: Some(DigestPair {
                before: gan_digest.clone(),
                after: gan.digest(),
            }),
        });
        log::info!("aug epoch {epoch}: loss {:.4} val {:?}", losses.total, val.map(|m| m.acsa));
    }
    let last = config.total_epochs.saturating_sub(1);
    let (classifier, best_epoch, best_validation) = best.finish(clf, last);
    Ok(ClassifierOutcome {
        classifier,
        best_epoch,
        best_validation,
        log,
    })
}

/// Alternates classifier-only and GAN-only phases of `swap_interval` epochs,
/// starting with the classifier. In GAN phases the frozen classifier's loss
/// on translated images is added to the generator objective.
pub fn train_alt<T: Scalar>(ds: &ImbalancedDataset<T>, gan: GanPair<T>, config: &TrainingConfig) -> Result<AltOutcome<T>> {
    let clf = new_classifier(config)?;
    train_alt_from(ds, gan, clf, config)
}

/// [`train_alt`] starting from a given classifier.
pub fn train_alt_from<T: Scalar>(
    ds: &ImbalancedDataset<T>,
    mut gan: GanPair<T>,
    mut clf: Network<T>,
    config: &TrainingConfig,
) -> Result<AltOutcome<T>> {
    config.validate()?;
    if config.mode != TrainingMode::Alt {
        return Err(Error::config("training.mode", "expected mode `alt`"));
    }
    config.check_dataset(ds)?;
    config.check_gan(&gan)?;
    let weights = config.weights.resolve(ds.gamma)?;
    let plan = alt_phase_plan(config.total_epochs, config.swap_interval)?;
    let mut clf_opt = Adam::new(clf.params(), &config.optimizer);
    let mut gan_opt = GanOptimizers::new(&gan, &config.optimizer);
    let mut pools = new_pools(config);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dropout"));
    let mut best = BestTracker::new(config.selection_metric);
    let mut log = TrainingLog::default();
    for (phase_idx, (phase, epochs)) in plan.into_iter().enumerate() {
        let trans = (phase == Phase::Classifier).then(|| Translations::compute(ds, &gan));
        for epoch in epochs {
            let start = Instant::now();
            let (clf_before, gan_before) = (clf.digest(), gan.digest());
            let mut rec = EpochRecord {
                epoch,
                phase,
                losses: LossBreakdown::default(),
                d_loss_a: None,
                d_loss_b: None,
                validation: None,
                lr: config.lr(epoch),
                wall_clock_s: 0.0,
                seed: config.seed,
                classifier_digest: None,
                gan_digest: None,
            };
            match phase {
                Phase::Classifier => {
                    let snapshot = clf.clone();
                    let trans = trans.as_ref().expect("classifier phase has translations");
                    rec.losses = classifier_epoch(ds, trans, &mut clf, &mut clf_opt, config, weights.gamma, epoch, &mut rng)
                        .map_err(|e| {
                            abort_with_checkpoint(e, config, Checkpoint::from_classifier(&snapshot, config.seed, epoch))
                        })?;
                    rec.validation = validate_epoch(&clf, ds, &InferenceRule::Threshold)?;
                    if let Some(m) = rec.validation {
                        best.offer(epoch, m, &clf);
                    }
                }
                _ => {
                    let snapshot = gan.clone();
                    let feedback = ClassifierFeedback { classifier: &clf };
                    let out = gan_epoch(ds, &mut gan, &mut gan_opt, &mut pools, config, &weights, Some(&feedback), epoch)
                        .map_err(|e| abort_with_checkpoint(e, config, Checkpoint::from_gan(&snapshot, config.seed, epoch)))?;
                    rec.losses = out.losses;
                    rec.d_loss_a = Some(out.d_loss_a);
                    rec.d_loss_b = Some(out.d_loss_b);
                }
            }
            rec.classifier_digest = Some(DigestPair {
                before: clf_before,
                after: clf.digest(),
            });
            rec.gan_digest = Some(DigestPair {
                before: gan_before,
                after: gan.digest(),
            });
            rec.wall_clock_s = start.elapsed().as_secs_f64();
            log::info!("alt phase {phase_idx} {phase:?} epoch {epoch}: loss {:.4}", rec.losses.total);
            log.records.push(rec);
        }
        if phase == Phase::Gan {
            if let (Some(dir), true) = (&config.checkpoint_dir, config.checkpoint_epochs.contains(&(log.records.len()))) {
                Checkpoint::from_gan(&gan, config.seed, log.records.len())
                    .with_metadata("phase", "alt")
                    .save(&dir.join(format!("alt_gan_epoch{:04}.ckpt", log.records.len())))?;
            }
        }
    }
    let last = config.total_epochs.saturating_sub(1);
    let (classifier, best_epoch, best_validation) = best.finish(clf, last);
    Ok(AltOutcome {
        classifier,
        best_epoch,
        best_validation,
        gan,
        log,
    })
}

/// Cross-entropy training on the union of both classes with per-class
/// weights `(w_A, w_B)`; validation uses `rule`.
pub fn train_vanilla_classifier<T: Scalar>(
    ds: &ImbalancedDataset<T>,
    config: &TrainingConfig,
    class_weights: (f64, f64),
    rule: &InferenceRule,
) -> Result<ClassifierOutcome<T>> {
    config.validate()?;
    if config.mode != TrainingMode::VanillaClassifier {
        return Err(Error::config("training.mode", "expected mode `vanilla_classifier`"));
    }
    config.check_dataset(ds)?;
    let train: Vec<LabeledExample<T>> = ds.train_a.iter().chain(&ds.train_b).cloned().collect();
    let mut clf = new_classifier(config)?;
    let mut opt = Adam::new(clf.params(), &config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dropout"));
    let mut best = BestTracker::new(config.selection_metric);
    let mut log = TrainingLog::default();
    // the union batch holds as many images as a paired batch
    let batch = 2 * config.classifier_batch_size;
    for epoch in 0..config.total_epochs {
        let start = Instant::now();
        let before = clf.digest();
        let snapshot = clf.clone();
        let losses = plain_epoch(&train, &mut clf, &mut opt, batch, config, class_weights, epoch, &mut rng)
            .map_err(|e| abort_with_checkpoint(e, config, Checkpoint::from_classifier(&snapshot, config.seed, epoch)))?;
        let val = validate_epoch(&clf, ds, rule)?;
        if let Some(m) = val {
            best.offer(epoch, m, &clf);
        }
        log.records.push(EpochRecord {
            epoch,
            phase: Phase::Classifier,
            losses,
            d_loss_a: None,
            d_loss_b: None,
            validation: val,
            lr: config.lr(epoch),
            wall_clock_s: start.elapsed().as_secs_f64(),
            seed: config.seed,
            classifier_digest: Some(DigestPair {
                before,
                after: clf.digest(),
            }),
            gan_digest: None,
        });
        log::info!("classifier epoch {epoch}: loss {:.4} val {:?}", losses.total, val.map(|m| m.acsa));
    }
    let last = config.total_epochs.saturating_sub(1);
    let (classifier, best_epoch, best_validation) = best.finish(clf, last);
    Ok(ClassifierOutcome {
        classifier,
        best_epoch,
        best_validation,
        log,
    })
}

#[allow(clippy::too_many_arguments)]
fn plain_epoch<T: Scalar>(
    train: &[LabeledExample<T>],
    clf: &mut Network<T>,
    opt: &mut Adam<T>,
    batch: usize,
    config: &TrainingConfig,
    class_weights: (f64, f64),
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let lr = config.lr(epoch);
    let mut acc = LossBreakdown::default();
    let schedule = crate::datasets::shuffled_schedule(train.len(), batch, derive_seed(config.seed, "union_batches"), epoch)?;
    for (k, idx) in schedule.iter().enumerate() {
        let x = stack_images(train, idx);
        let labels: Vec<bool> = idx.iter().map(|&i| train[i].label.is_minority()).collect();
        let mut g = Graph::new();
        let bound = clf.bind(&mut g, true);
        let xv = g.constant(x);
        let z = clf.forward_z(&mut g, &bound, xv, &mut Mode::Train(rng));
        let ce = weighted_cross_entropy(g.value(z).data(), &labels, class_weights);
        let value = to_f64(ce.value);
        if !value.is_finite() {
            return Err(Error::Numerical {
                term: "cross_entropy".into(),
                message: format!("non-finite value {value} at epoch {epoch}, batch {k}"),
            });
        }
        let loss = g.external_loss(ce.value, vec![(z, ce.grads[0].clone())]);
        g.backward(loss);
        let grads = clf.grads(&g, &bound);
        check_finite(&grads, "cross_entropy")?;
        opt.step(clf.params_mut(), &grads, lr);
        acc.accumulate(
            &LossBreakdown {
                total: value,
                ..Default::default()
            },
            k + 1,
        );
    }
    Ok(acc)
}

/// Trains a classifier on an explicit balanced example list (no validation
/// split), used for the inception-accuracy proxy.
pub fn train_proxy_classifier<T: Scalar>(examples: &[LabeledExample<T>], config: &TrainingConfig) -> Result<Network<T>> {
    config.validate()?;
    let mut clf = new_classifier(config)?;
    let mut opt = Adam::new(clf.params(), &config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_path(config.seed, &["proxy", "dropout"]));
    for epoch in 0..config.total_epochs {
        plain_epoch(
            examples,
            &mut clf,
            &mut opt,
            2 * config.classifier_batch_size,
            config,
            (1.0, 1.0),
            epoch,
            &mut rng,
        )?;
    }
    Ok(clf)
}
