//! Classical rebalancing methods: resampling, loss reweighting and
//! prior-corrected inference.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{ClassLabel, ImbalancedDataset, LabeledExample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BaselineMethod {
    Vanilla,
    Oversample,
    Undersample,
    CostSensitive,
    ThresholdShift,
    Smote { k: usize },
    ClassBalanced { beta: f64 },
    UndersampleCostSensitive,
    OversampleCostSensitive,
}

impl BaselineMethod {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineMethod::Smote { k } if k == 0 => Err(Error::config("method", "smote needs k >= 1")),
            BaselineMethod::ClassBalanced { beta } if !(0.0..1.0).contains(&beta) => {
                Err(Error::config("method", format!("cbl beta must lie in [0, 1), got {beta}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineMethod::Vanilla => f.write_str("vanilla"),
            BaselineMethod::Oversample => f.write_str("os"),
            BaselineMethod::Undersample => f.write_str("us"),
            BaselineMethod::CostSensitive => f.write_str("cs"),
            BaselineMethod::ThresholdShift => f.write_str("ts"),
            BaselineMethod::Smote { k } => write!(f, "smote:k={k}"),
            BaselineMethod::ClassBalanced { beta } => write!(f, "cbl:beta={beta}"),
            BaselineMethod::UndersampleCostSensitive => f.write_str("us+cs"),
            BaselineMethod::OversampleCostSensitive => f.write_str("os+cs"),
        }
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s.as_str(), None),
        };
        let param = |key: &str, default: &str| -> Result<String> {
            match arg {
                None => Ok(default.to_string()),
                Some(a) => a
                    .strip_prefix(key)
                    .and_then(|r| r.strip_prefix('='))
                    .map(str::to_string)
                    .ok_or_else(|| Error::config("method", format!("expected `{head}:{key}=<value>`, got `{s}`"))),
            }
        };
        let bad_value = |v: &str| Error::config("method", format!("invalid parameter value `{v}` in `{s}`"));
        let m = match head {
            "vanilla" => BaselineMethod::Vanilla,
            "os" => BaselineMethod::Oversample,
            "us" => BaselineMethod::Undersample,
            "cs" => BaselineMethod::CostSensitive,
            "ts" => BaselineMethod::ThresholdShift,
            "us+cs" => BaselineMethod::UndersampleCostSensitive,
            "os+cs" => BaselineMethod::OversampleCostSensitive,
            "smote" => {
                let v = param("k", "5")?;
                BaselineMethod::Smote {
                    k: v.parse().map_err(|_| bad_value(&v))?,
                }
            }
            "cbl" => {
                let v = param("beta", "0.999")?;
                BaselineMethod::ClassBalanced {
                    beta: v.parse().map_err(|_| bad_value(&v))?,
                }
            }
            other => {
                return Err(Error::config(
                    "method",
                    format!("unknown method `{other}` (expected vanilla, os, us, cs, ts, smote:k=N, cbl:beta=B, us+cs, os+cs)"),
                ))
            }
        };
        if arg.is_some() && !matches!(m, BaselineMethod::Smote { .. } | BaselineMethod::ClassBalanced { .. }) {
            return Err(Error::config("method", format!("`{head}` takes no parameters")));
        }
        m.validate()?;
        Ok(m)
    }
}

impl TryFrom<String> for BaselineMethod {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BaselineMethod> for String {
    fn from(m: BaselineMethod) -> String {
        m.to_string()
    }
}

/// Decision rule applied to the minority probability `z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum InferenceRule {
    /// Predict B iff `z >= 0.5`.
    #[default]
    Threshold,
    /// Predict by the prior-corrected argmax of [`threshold_shift`].
    PriorShift { priors: (f64, f64) },
}

impl InferenceRule {
    pub fn predict(&self, z: f64) -> ClassLabel {
        match *self {
            InferenceRule::Threshold => {
                if z >= 0.5 {
                    ClassLabel::B
                } else {
                    ClassLabel::A
                }
            }
            InferenceRule::PriorShift { priors } => {
                threshold_shift((1.0 - z, z), priors).expect("priors validated at construction")
            }
        }
    }
}

/// Replicates minority examples (with replacement) until both classes match.
pub fn oversample<T: Scalar>(ds: &ImbalancedDataset<T>, seed: u64) -> Result<ImbalancedDataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "oversample"));
    let mut train_b = ds.train_b.clone();
    let extra = ds.train_a.len().saturating_sub(ds.train_b.len());
    for _ in 0..extra {
        train_b.push(ds.train_b.choose(&mut rng).expect("non-empty minority").clone());
    }
    ds.with_train(ds.train_a.clone(), train_b)
}

/// Keeps a random majority subset the size of the minority class.
pub fn undersample<T: Scalar>(ds: &ImbalancedDataset<T>, seed: u64) -> Result<ImbalancedDataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "undersample"));
    let mut idx: Vec<usize> = (0..ds.train_a.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(ds.train_b.len());
    idx.sort_unstable();
    let train_a = idx.into_iter().map(|i| ds.train_a[i].clone()).collect();
    ds.with_train(train_a, ds.train_b.clone())
}

/// Inverse-frequency class weights `(w_A, w_B)` with `w_A + w_B = 2`.
pub fn cost_sensitive_weights(n_a: usize, n_b: usize) -> Result<(f64, f64)> {
    if n_a == 0 || n_b == 0 {
        return Err(Error::Contract("class counts must be positive".into()));
    }
    let total = (n_a + n_b) as f64;
    Ok((2.0 * n_b as f64 / total, 2.0 * n_a as f64 / total))
}

/// Predicts `argmax_c probs[c] / priors[c]`; ties go to the minority class.
pub fn threshold_shift(probs: (f64, f64), priors: (f64, f64)) -> Result<ClassLabel> {
    if !(priors.0 > 0.0 && priors.1 > 0.0) {
        return Err(Error::Contract(format!("priors must be positive, got {priors:?}")));
    }
    Ok(if probs.1 / priors.1 >= probs.0 / priors.0 {
        ClassLabel::B
    } else {
        ClassLabel::A
    })
}

/// Training-set class priors `(p_A, p_B)`.
pub fn class_priors(n_a: usize, n_b: usize) -> (f64, f64) {
    let total = (n_a + n_b) as f64;
    (n_a as f64 / total, n_b as f64 / total)
}

/// One synthetic minority sample with its construction.
#[derive(Clone, Debug)]
pub struct SmoteSample<T> {
    pub vector: Vec<T>,
    pub base: usize,
    pub neighbor: usize,
    pub lambda: f64,
}

/// Indices of the `k` nearest other points of `points[i]` (squared Euclidean, ties by index).
pub fn nearest_neighbors<T: Scalar>(points: &[Vec<T>], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, p)| {
            let dist = p
                .iter()
                .zip(&points[i])
                .map(|(&x, &y)| {
                    let t = (x - y).as_f64();
                    t * t
                })
                .sum::<f64>();
            (dist, j)
        })
        .collect();
    d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    d.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Synthesizes `n_new` points `x + lambda (x_nn - x)`, `lambda ~ U[0, 1]`,
/// where `x_nn` is one of the `k` nearest minority neighbors of `x`.
pub fn smote<T: Scalar>(minority: &[Vec<T>], k: usize, n_new: usize, seed: u64) -> Result<Vec<SmoteSample<T>>> {
    smote_with(minority, k, n_new, seed, |rng| rng.random_range(0.0..=1.0))
}

/// [`smote`] with a caller-supplied interpolation draw.
pub fn smote_with<T: Scalar>(
    minority: &[Vec<T>],
    k: usize,
    n_new: usize,
    seed: u64,
    mut draw_lambda: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> Result<Vec<SmoteSample<T>>> {
    if k == 0 {
        return Err(Error::config("method", "smote needs k >= 1"));
    }
    if minority.len() < k + 1 {
        return Err(Error::capacity(
            "smote",
            format!("needs at least k+1 = {} minority examples, have {}", k + 1, minority.len()),
        ));
    }
    let neighbors: Vec<Vec<usize>> = (0..minority.len()).map(|i| nearest_neighbors(minority, i, k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "smote"));
    let mut out = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let base = rng.random_range(0..minority.len());
        let neighbor = *neighbors[base].choose(&mut rng).expect("k >= 1");
        let lambda = draw_lambda(&mut rng);
        let l = T::lit(lambda);
        let vector = minority[base]
            .iter()
            .zip(&minority[neighbor])
            .map(|(&x, &y)| x + l * (y - x))
            .collect();
        out.push(SmoteSample {
            vector,
            base,
            neighbor,
            lambda,
        });
    }
    Ok(out)
}

/// Class-balanced weights `w_c ∝ (1 - beta) / (1 - beta^{n_c})`, summing to the class count.
pub fn cbl_weights(counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Contract(format!(
            "beta must lie in [0, 1), got {beta}; use inverse-frequency weights for the beta -> 1 limit"
        )));
    }
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Contract("class counts must be positive".into()));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| (1.0 - beta) / (1.0 - beta.powf(n as f64)))
        .collect();
    let sum: f64 = raw.iter().sum();
    let k = counts.len() as f64;
    Ok(raw.into_iter().map(|w| w * k / sum).collect())
}

/// Effective number of examples `(1 - beta^n) / (1 - beta)`.
pub fn effective_number(n: usize, beta: f64) -> f64 {
    (1.0 - beta.powf(n as f64)) / (1.0 - beta)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineOptions {
    /// Compute CS weights for `us+cs` / `os+cs` on the counts before resampling.
    #[serde(default)]
    pub cs_on_original_counts: bool,
}

/// A method's effect: possibly resampled data, class loss weights `(w_A, w_B)`
/// and the decision rule.
#[derive(Clone, Debug)]
pub struct BaselinePlan<T> {
    pub dataset: ImbalancedDataset<T>,
    pub class_weights: (f64, f64),
    pub inference: InferenceRule,
}

pub fn apply_baseline<T: Scalar>(
    method: BaselineMethod,
    ds: &ImbalancedDataset<T>,
    seed: u64,
    options: BaselineOptions,
) -> Result<BaselinePlan<T>> {
    method.validate()?;
    let (n_a, n_b) = (ds.train_a.len(), ds.train_b.len());
    let plain = |dataset| BaselinePlan {
        dataset,
        class_weights: (1.0, 1.0),
        inference: InferenceRule::Threshold,
    };
    let resampled_cs = |dataset: ImbalancedDataset<T>| -> Result<BaselinePlan<T>> {
        let class_weights = if options.cs_on_original_counts {
            cost_sensitive_weights(n_a, n_b)?
        } else {
            cost_sensitive_weights(dataset.train_a.len(), dataset.train_b.len())?
        };
        Ok(BaselinePlan {
            dataset,
            class_weights,
            inference: InferenceRule::Threshold,
        })
    };
    Ok(match method {
        BaselineMethod::Vanilla => plain(ds.clone()),
        BaselineMethod::Oversample => plain(oversample(ds, seed)?),
        BaselineMethod::Undersample => plain(undersample(ds, seed)?),
        BaselineMethod::CostSensitive => BaselinePlan {
            class_weights: cost_sensitive_weights(n_a, n_b)?,
            ..plain(ds.clone())
        },
        BaselineMethod::ThresholdShift => BaselinePlan {
            inference: InferenceRule::PriorShift {
                priors: class_priors(n_a, n_b),
            },
            ..plain(ds.clone())
        },
        BaselineMethod::ClassBalanced { beta } => {
            let w = cbl_weights(&[n_a, n_b], beta)?;
            BaselinePlan {
                class_weights: (w[0], w[1]),
                ..plain(ds.clone())
            }
        }
        BaselineMethod::Smote { k } => plain(smote_dataset(ds, k, seed)?),
        BaselineMethod::UndersampleCostSensitive => resampled_cs(undersample(ds, seed)?)?,
        BaselineMethod::OversampleCostSensitive => resampled_cs(oversample(ds, seed)?)?,
    })
}

fn smote_dataset<T: Scalar>(ds: &ImbalancedDataset<T>, k: usize, seed: u64) -> Result<ImbalancedDataset<T>> {
    let shape = ds.train_b[0].image.shape().to_vec();
    let vectors: Vec<Vec<T>> = ds.train_b.iter().map(|e| e.image.data().to_vec()).collect();
    let n_new = ds.train_a.len().saturating_sub(ds.train_b.len());
    let mut train_b = ds.train_b.clone();
    for (i, s) in smote(&vectors, k, n_new, seed)?.into_iter().enumerate() {
        train_b.push(LabeledExample {
            image: Tensor::new(shape.clone(), s.vector),
            label: ClassLabel::B,
            source_id: format!("smote:{i}:{}+{}", ds.train_b[s.base].source_id, ds.train_b[s.neighbor].source_id),
        });
    }
    ds.with_train(ds.train_a.clone(), train_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DatasetSpec;
    use std::collections::HashSet;

    fn toy(na: usize, nb: usize) -> ImbalancedDataset<f32> {
        let ex = |i: usize, label| LabeledExample {
            image: Tensor::full(&[1, 2, 2], i as f32),
            label,
            source_id: format!("{label:?}{i}"),
        };
        ImbalancedDataset::new(
            (0..na).map(|i| ex(i, ClassLabel::A)).collect(),
            (0..nb).map(|i| ex(1000 + i, ClassLabel::B)).collect(),
            vec![],
            vec![],
            ("a".into(), "b".into()),
        )
        .unwrap()
    }

    #[test]
    fn parse_round_trip() {
        for s in ["vanilla", "os", "us", "cs", "ts", "smote:k=5", "cbl:beta=0.999", "us+cs", "os+cs"] {
            let m: BaselineMethod = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert_eq!("smote".parse::<BaselineMethod>().unwrap(), BaselineMethod::Smote { k: 5 });
        assert!("smote:k=0".parse::<BaselineMethod>().is_err());
        assert!("cbl:beta=1".parse::<BaselineMethod>().is_err());
        assert!("os:k=2".parse::<BaselineMethod>().is_err());
        assert!("focal".parse::<BaselineMethod>().is_err());
        let json = serde_json::to_string(&BaselineMethod::ClassBalanced { beta: 0.99 }).unwrap();
        assert_eq!(json, "\"cbl:beta=0.99\"");
    }

    #[test]
    fn oversample_balances_and_keeps_originals() {
        let ds = toy(900, 50);
        let os = oversample(&ds, 3).unwrap();
        assert_eq!((os.train_a.len(), os.train_b.len()), (900, 900));
        assert_eq!(os.gamma, 1.0);
        let ids: HashSet<_> = os.train_b.iter().map(|e| e.source_id.clone()).collect();
        assert!(ds.train_b.iter().all(|e| ids.contains(&e.source_id)));
        let again = oversample(&ds, 3).unwrap();
        let a: Vec<_> = os.train_b.iter().map(|e| &e.source_id).collect();
        let b: Vec<_> = again.train_b.iter().map(|e| &e.source_id).collect();
        assert_eq!(a, b);
        let bal = toy(4, 4);
        assert_eq!(oversample(&bal, 1).unwrap().train_b.len(), 4);
    }

    #[test]
    fn undersample_is_a_subset() {
        let ds = toy(900, 50);
        let us = undersample(&ds, 3).unwrap();
        assert_eq!((us.train_a.len(), us.train_b.len()), (50, 50));
        assert_eq!(us.gamma, 1.0);
        let ids: HashSet<_> = ds.train_a.iter().map(|e| e.source_id.clone()).collect();
        let sub: HashSet<_> = us.train_a.iter().map(|e| e.source_id.clone()).collect();
        assert_eq!(sub.len(), 50);
        assert!(sub.is_subset(&ids));
        let again = undersample(&ds, 3).unwrap();
        assert_eq!(us.train_a[7].source_id, again.train_a[7].source_id);
    }

    #[test]
    fn cost_sensitive_examples() {
        assert_eq!(cost_sensitive_weights(7, 7).unwrap(), (1.0, 1.0));
        let (a, b) = cost_sensitive_weights(900, 100).unwrap();
        assert!((a - 0.2).abs() < 1e-12 && (b - 1.8).abs() < 1e-12);
        assert_eq!(cost_sensitive_weights(100, 900).unwrap(), (b, a));
    }

    #[test]
    fn threshold_shift_examples() {
        assert_eq!(threshold_shift((0.9, 0.1), (0.9, 0.1)).unwrap(), ClassLabel::B);
        assert_eq!(threshold_shift((0.85, 0.15), (0.947, 0.053)).unwrap(), ClassLabel::B);
        assert_eq!(threshold_shift((0.85, 0.15), (0.5, 0.5)).unwrap(), ClassLabel::A);
        assert!(threshold_shift((0.5, 0.5), (1.0, 0.0)).is_err());
    }

    #[test]
    fn smote_examples() {
        let pts = vec![vec![0.0f64, 0.0], vec![2.0, 4.0]];
        let zero = smote_with(&pts, 1, 10, 1, |_| 0.0).unwrap();
        for s in &zero {
            assert_eq!(s.vector, pts[s.base]);
        }
        for s in smote(&pts, 1, 50, 2).unwrap() {
            // every sample lies on the single segment y = 2x, 0 <= x <= 2
            assert!((s.vector[1] - 2.0 * s.vector[0]).abs() < 1e-12);
            assert!((0.0..=2.0).contains(&s.vector[0]));
        }
        assert!(matches!(smote(&pts, 2, 1, 0), Err(Error::Capacity { .. })));
    }

    #[test]
    fn cbl_examples() {
        assert_eq!(cbl_weights(&[900, 50], 0.0).unwrap(), vec![1.0, 1.0]);
        assert!((effective_number(10, 0.9) - 6.513215599).abs() < 1e-8);
        let w = cbl_weights(&[900, 50], 0.9999).unwrap();
        // (1 - 0.9999^900) / (1 - 0.9999^50), evaluated independently
        assert!((w[1] / w[0] - 17.256797122527324).abs() < 1e-9);
        let w = cbl_weights(&[900, 50], 0.999999).unwrap();
        assert!(((w[1] / w[0]) / 18.0 - 1.0).abs() < 1e-3);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(cbl_weights(&[1, 1], 1.0).is_err());
    }

    #[test]
    fn apply_baseline_compositions() {
        let ds = toy(900, 50);
        let v = apply_baseline(BaselineMethod::Vanilla, &ds, 0, Default::default()).unwrap();
        assert_eq!(v.class_weights, (1.0, 1.0));
        assert_eq!(v.dataset.gamma, 18.0);
        let oscs = apply_baseline(BaselineMethod::OversampleCostSensitive, &ds, 0, Default::default()).unwrap();
        assert_eq!(oscs.class_weights, (1.0, 1.0));
        assert_eq!(oscs.dataset.gamma, 1.0);
        let opts = BaselineOptions {
            cs_on_original_counts: true,
        };
        let uscs = apply_baseline(BaselineMethod::UndersampleCostSensitive, &ds, 0, opts).unwrap();
        assert_eq!(uscs.class_weights, cost_sensitive_weights(900, 50).unwrap());
        assert_eq!(uscs.dataset.gamma, 1.0);
        let ts = apply_baseline(BaselineMethod::ThresholdShift, &ds, 0, Default::default()).unwrap();
        assert_eq!(ts.dataset.train_a.len(), 900);
        assert_eq!(ts.class_weights, (1.0, 1.0));
        assert!(matches!(ts.inference, InferenceRule::PriorShift { .. }));
        let sm = apply_baseline(BaselineMethod::Smote { k: 3 }, &ds, 0, Default::default()).unwrap();
        assert_eq!(sm.dataset.gamma, 1.0);
    }

    #[test]
    fn smote_on_synthetic_images() {
        let spec = DatasetSpec {
            val_per_class: 1,
            test_per_class: 1,
            ..DatasetSpec::synthetic(12, 4, 16, 2)
        };
        let ds = crate::datasets::synth_texture_dataset::<f32>(&spec).unwrap();
        let plan = apply_baseline(BaselineMethod::Smote { k: 2 }, &ds, 5, Default::default()).unwrap();
        assert_eq!(plan.dataset.train_b.len(), 12);
        for e in &plan.dataset.train_b {
            assert_eq!(e.image.shape(), &[3, 16, 16]);
            assert!(e.image.min() >= -1.0 && e.image.max() <= 1.0);
        }
    }
}
