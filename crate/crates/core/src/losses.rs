//! Objective terms for the translation GAN and the classifier.
//!
//! Every function is pure and returns a [`Scored`] value: the loss together
//! with its partial derivatives with respect to each input slice. Training
//! attaches those partials to the autodiff graph, so the formulas here are
//! the only implementation of each term.
//!
//! Expectations are batch means; discriminator patch grids are flattened so
//! each patch score counts as one sample. Probabilities are clamped to
//! `[LOG_EPS, 1 - LOG_EPS]` before taking logarithms; clamped elements carry
//! zero gradient.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LOG_EPS: f64 = 1e-7;

static CLAMP_LOGGED: AtomicBool = AtomicBool::new(false);

/// A loss value and `d loss / d input` for each input, in argument order.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored<T> {
    pub value: T,
    pub grads: Vec<Vec<T>>,
}

/// How the classifier terms enter the full objective during GAN phases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierTermWeighting {
    /// `L_cls^B + L_cls^A / gamma`, the same weighting the classifier uses.
    #[default]
    GammaWeighted,
    /// `L_cls^B + L_cls^A`, the objective's literal unweighted sum.
    Unweighted,
}

/// Discriminator output transform used by the adversarial terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLossForm {
    /// Log-likelihood (binary cross-entropy) form.
    #[default]
    Bce,
    /// Least-squares form.
    Lsq,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Identity-loss weight.
    pub alpha: f64,
    /// Cycle-loss weight.
    pub beta: f64,
    /// Imbalance ratio `|A| / |B|`, copied from the dataset.
    pub gamma: f64,
    #[serde(default)]
    pub classifier_terms: ClassifierTermWeighting,
}

impl LossWeights {
    pub fn new(gamma: f64) -> Self {
        Self {
            alpha: 5.0,
            beta: 10.0,
            gamma,
            classifier_terms: ClassifierTermWeighting::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::config("weights", "alpha and beta must be non-negative"));
        }
        if !(self.gamma >= 1.0) || !self.gamma.is_finite() {
            return Err(Error::Contract(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Multiplier applied to `L_cls^A` inside the full objective.
    pub fn majority_classifier_factor(&self) -> f64 {
        match self.classifier_terms {
            ClassifierTermWeighting::GammaWeighted => 1.0 / self.gamma,
            ClassifierTermWeighting::Unweighted => 1.0,
        }
    }
}

/// Per-term values of the full objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan_ab: f64,
    pub gan_ba: f64,
    pub cyc_a: f64,
    pub cyc_b: f64,
    pub ide: f64,
    pub cls_a: f64,
    pub cls_b: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn terms(&self) -> [(&'static str, f64); 7] {
        [
            ("gan_ab", self.gan_ab),
            ("gan_ba", self.gan_ba),
            ("cyc_a", self.cyc_a),
            ("cyc_b", self.cyc_b),
            ("ide", self.ide),
            ("cls_a", self.cls_a),
            ("cls_b", self.cls_b),
        ]
    }

    /// Element-wise running mean update, used to aggregate per-batch values over an epoch.
    pub fn accumulate(&mut self, other: &LossBreakdown, count: usize) {
        let w = 1.0 / count as f64;
        let upd = |a: &mut f64, b: f64| *a += (b - *a) * w;
        upd(&mut self.gan_ab, other.gan_ab);
        upd(&mut self.gan_ba, other.gan_ba);
        upd(&mut self.cyc_a, other.cyc_a);
        upd(&mut self.cyc_b, other.cyc_b);
        upd(&mut self.ide, other.ide);
        upd(&mut self.cls_a, other.cls_a);
        upd(&mut self.cls_b, other.cls_b);
        upd(&mut self.total, other.total);
    }
}

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let eps = T::lit(LOG_EPS);
    let hi = T::one() - eps;
    if p < eps || p > hi || p.is_nan() {
        if !CLAMP_LOGGED.swap(true, Ordering::Relaxed) {
            log::warn!("probability {p} clamped to [{LOG_EPS}, 1 - {LOG_EPS}] before log");
        }
        let c = if p.is_nan() { T::lit(0.5) } else { p.max(eps).min(hi) };
        (c, true)
    } else {
        (p, false)
    }
}

fn mean_factor<T: Scalar>(n: usize) -> T {
    if n == 0 {
        T::zero()
    } else {
        T::one() / T::from_usize(n).unwrap()
    }
}

/// `-mean(log p)` with its gradient. Empty input contributes zero.
fn neg_mean_log<T: Scalar>(p: &[T]) -> (T, Vec<T>) {
    let w = mean_factor::<T>(p.len());
    let mut total = T::zero();
    let grad = p
        .iter()
        .map(|&v| {
            let (c, clamped) = clamp_prob(v);
            total -= c.ln();
            if clamped {
                T::zero()
            } else {
                -w / c
            }
        })
        .collect();
    (total * w, grad)
}

/// `-mean(log(1 - p))` with its gradient.
fn neg_mean_log_complement<T: Scalar>(p: &[T]) -> (T, Vec<T>) {
    let w = mean_factor::<T>(p.len());
    let mut total = T::zero();
    let grad = p
        .iter()
        .map(|&v| {
            let (c, clamped) = clamp_prob(v);
            total -= (T::one() - c).ln();
            if clamped {
                T::zero()
            } else {
                w / (T::one() - c)
            }
        })
        .collect();
    (total * w, grad)
}

/// Discriminator objective: `-E[log D(real)] - E[log(1 - D(fake))]`.
pub fn adversarial_loss<T: Scalar>(d_real: &[T], d_fake: &[T]) -> Scored<T> {
    let (a, ga) = neg_mean_log(d_real);
    let (b, gb) = neg_mean_log_complement(d_fake);
    Scored {
        value: a + b,
        grads: vec![ga, gb],
    }
}

/// Non-saturating generator objective: `-E[log D(G(x))]`.
pub fn generator_adversarial_loss<T: Scalar>(d_fake: &[T]) -> Scored<T> {
    let (v, g) = neg_mean_log(d_fake);
    Scored {
        value: v,
        grads: vec![g],
    }
}

fn mean_sq_from<T: Scalar>(x: &[T], target: T) -> (T, Vec<T>) {
    let w = mean_factor::<T>(x.len());
    let two = T::lit(2.0);
    let value = x.iter().map(|&v| (v - target) * (v - target)).sum::<T>() * w;
    let grad = x.iter().map(|&v| two * w * (v - target)).collect();
    (value, grad)
}

/// Least-squares discriminator objective: `E[(D(real) - 1)^2] + E[D(fake)^2]`.
pub fn adversarial_loss_lsq<T: Scalar>(d_real: &[T], d_fake: &[T]) -> Scored<T> {
    let (a, ga) = mean_sq_from(d_real, T::one());
    let (b, gb) = mean_sq_from(d_fake, T::zero());
    Scored {
        value: a + b,
        grads: vec![ga, gb],
    }
}

/// Least-squares generator objective: `E[(D(G(x)) - 1)^2]`.
pub fn generator_adversarial_loss_lsq<T: Scalar>(d_fake: &[T]) -> Scored<T> {
    let (v, g) = mean_sq_from(d_fake, T::one());
    Scored {
        value: v,
        grads: vec![g],
    }
}

impl GanLossForm {
    pub fn discriminator<T: Scalar>(self, d_real: &[T], d_fake: &[T]) -> Scored<T> {
        match self {
            GanLossForm::Bce => adversarial_loss(d_real, d_fake),
            GanLossForm::Lsq => adversarial_loss_lsq(d_real, d_fake),
        }
    }

    pub fn generator<T: Scalar>(self, d_fake: &[T]) -> Scored<T> {
        match self {
            GanLossForm::Bce => generator_adversarial_loss(d_fake),
            GanLossForm::Lsq => generator_adversarial_loss_lsq(d_fake),
        }
    }
}

/// Mean absolute difference over all elements (subgradient 0 where equal).
pub fn cycle_loss<T: Scalar>(original: &[T], reconstructed: &[T]) -> Result<Scored<T>> {
    if original.len() != reconstructed.len() {
        return Err(Error::Contract(format!(
            "l1 loss shape mismatch: {} vs {} elements",
            original.len(),
            reconstructed.len()
        )));
    }
    let w = mean_factor::<T>(original.len());
    let mut total = T::zero();
    let mut g_orig = Vec::with_capacity(original.len());
    let mut g_rec = Vec::with_capacity(original.len());
    for (&o, &r) in original.iter().zip(reconstructed) {
        let d = o - r;
        total += d.abs();
        let s = if d > T::zero() {
            w
        } else if d < T::zero() {
            -w
        } else {
            T::zero()
        };
        g_orig.push(s);
        g_rec.push(-s);
    }
    Ok(Scored {
        value: total * w,
        grads: vec![g_orig, g_rec],
    })
}

/// `mean|G_AB(b) - b| + mean|G_BA(a) - a|`; gradients in argument order.
pub fn identity_loss<T: Scalar>(g_ab_of_b: &[T], b: &[T], g_ba_of_a: &[T], a: &[T]) -> Result<Scored<T>> {
    let first = cycle_loss(g_ab_of_b, b)?;
    let second = cycle_loss(g_ba_of_a, a)?;
    let mut grads = first.grads;
    grads.extend(second.grads);
    Ok(Scored {
        value: first.value + second.value,
        grads,
    })
}

/// Minority-class term: `-E[log z(b)] - E[log z(G_AB(a))]`.
pub fn classifier_loss_minority<T: Scalar>(z_real_b: &[T], z_translated_a: &[T]) -> Scored<T> {
    let (a, ga) = neg_mean_log(z_real_b);
    let (b, gb) = neg_mean_log(z_translated_a);
    Scored {
        value: a + b,
        grads: vec![ga, gb],
    }
}

/// Majority-class term: `-E[log(1 - z(a))] - E[log(1 - z(G_BA(b)))]`.
pub fn classifier_loss_majority<T: Scalar>(z_real_a: &[T], z_translated_b: &[T]) -> Scored<T> {
    let (a, ga) = neg_mean_log_complement(z_real_a);
    let (b, gb) = neg_mean_log_complement(z_translated_b);
    Scored {
        value: a + b,
        grads: vec![ga, gb],
    }
}

/// `L_B + L_A / gamma`; gradients are with respect to `(L_B, L_A)`.
pub fn classifier_loss_combined<T: Scalar>(l_b: T, l_a: T, gamma: f64) -> Result<Scored<T>> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(Error::Contract(format!("gamma must be >= 1, got {gamma}")));
    }
    let inv = T::lit(1.0 / gamma);
    Ok(Scored {
        value: l_b + l_a * inv,
        grads: vec![vec![T::one()], vec![inv]],
    })
}

/// Class-weighted binary cross-entropy, `mean_i -w_{y_i} log p(y_i | x_i)`.
///
/// `is_minority[i]` selects the label of example `i`; `weights` is `(w_A, w_B)`.
pub fn weighted_cross_entropy<T: Scalar>(z: &[T], is_minority: &[bool], weights: (f64, f64)) -> Scored<T> {
    assert_eq!(z.len(), is_minority.len());
    let w = mean_factor::<T>(z.len());
    let (wa, wb) = (T::lit(weights.0), T::lit(weights.1));
    let mut total = T::zero();
    let grad = z
        .iter()
        .zip(is_minority)
        .map(|(&v, &minority)| {
            let (c, clamped) = clamp_prob(v);
            if minority {
                total -= wb * c.ln();
                if clamped {
                    T::zero()
                } else {
                    -w * wb / c
                }
            } else {
                total -= wa * (T::one() - c).ln();
                if clamped {
                    T::zero()
                } else {
                    w * wa / (T::one() - c)
                }
            }
        })
        .collect();
    Scored {
        value: total * w,
        grads: vec![grad],
    }
}

/// `gan_ab + beta*cyc_a + gan_ba + beta*cyc_b + alpha*ide + f*cls_a + cls_b`,
/// where `f` is 1/gamma or 1 depending on [`ClassifierTermWeighting`].
pub fn full_objective(parts: &LossBreakdown, w: &LossWeights) -> Result<f64> {
    for (name, v) in parts.terms() {
        if !v.is_finite() {
            return Err(Error::Numerical {
                term: name.into(),
                message: format!("non-finite value {v}"),
            });
        }
    }
    Ok(parts.gan_ab
        + w.beta * parts.cyc_a
        + parts.gan_ba
        + w.beta * parts.cyc_b
        + w.alpha * parts.ide
        + w.majority_classifier_factor() * parts.cls_a
        + parts.cls_b)
}
