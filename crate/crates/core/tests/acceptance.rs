//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Pass substrings as arguments to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use cyclebalance::autograd::Graph;
use cyclebalance::baselines::*;
use cyclebalance::datasets::*;
use cyclebalance::evaluation::*;
use cyclebalance::experiment::{run_experiment, ExperimentConfig, Method, OutputPolicy};
use cyclebalance::losses::*;
use cyclebalance::models::{GanPair, ModelProfile, Network, Role};
use cyclebalance::training::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------- scalar references

fn clampp(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

fn ref_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// `E[log D(real)] + E[log(1 - D(fake))]`, the value the discriminator maximizes.
fn ref_gan(d_real: &[f64], d_fake: &[f64]) -> f64 {
    ref_mean(d_real.iter().map(|&p| clampp(p).ln())) + ref_mean(d_fake.iter().map(|&p| (1.0 - clampp(p)).ln()))
}

fn ref_l1(x: &[f64], y: &[f64]) -> f64 {
    ref_mean(x.iter().zip(y).map(|(a, b)| (a - b).abs()))
}

fn ref_cls_b(z_b: &[f64], z_fb: &[f64]) -> f64 {
    -ref_mean(z_b.iter().map(|&p| clampp(p).ln())) - ref_mean(z_fb.iter().map(|&p| clampp(p).ln()))
}

fn ref_cls_a(z_a: &[f64], z_fa: &[f64]) -> f64 {
    -ref_mean(z_a.iter().map(|&p| (1.0 - clampp(p)).ln())) - ref_mean(z_fa.iter().map(|&p| (1.0 - clampp(p)).ln()))
}

fn probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| match rng.random_range(0..40) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.001..0.999),
        })
        .collect()
}

fn pixels(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut track = |name: &str, got: f64, want: f64, batch: usize| -> Result<(), String> {
        let d = (got - want).abs();
        worst = worst.max(d);
        ensure(d <= 1e-6, || format!("{name} batch {batch}: {got} vs reference {want}"))
    };
    for batch in 0..1000 {
        let n = rng.random_range(1..9);
        let patches = rng.random_range(1..17);
        let px = rng.random_range(1..49);
        let gamma = rng.random_range(1.0..40.0);
        let (d_real_b, d_fake_b) = (probs(&mut rng, n * patches), probs(&mut rng, n * patches));
        let (d_real_a, d_fake_a) = (probs(&mut rng, n * patches), probs(&mut rng, n * patches));
        let (a, b) = (pixels(&mut rng, n * px), pixels(&mut rng, n * px));
        let (rec_a, rec_b) = (pixels(&mut rng, n * px), pixels(&mut rng, n * px));
        let (idt_a, idt_b) = (pixels(&mut rng, n * px), pixels(&mut rng, n * px));
        let (z_b, z_fb, z_a, z_fa) = (probs(&mut rng, n), probs(&mut rng, n), probs(&mut rng, n), probs(&mut rng, n));

        // adversarial terms in both directions
        track("L_GAN(G_AB, D_B)", -adversarial_loss(&d_real_b, &d_fake_b).value, ref_gan(&d_real_b, &d_fake_b), batch)?;
        track("L_GAN(G_BA, D_A)", -adversarial_loss(&d_real_a, &d_fake_a).value, ref_gan(&d_real_a, &d_fake_a), batch)?;
        let gen_ref = -ref_mean(d_fake_b.iter().map(|&p| clampp(p).ln()));
        track("generator adversarial", generator_adversarial_loss(&d_fake_b).value, gen_ref, batch)?;
        let lsq_ref = ref_mean(d_real_a.iter().map(|p| (p - 1.0).powi(2))) + ref_mean(d_fake_a.iter().map(|p| p * p));
        track("least-squares discriminator", adversarial_loss_lsq(&d_real_a, &d_fake_a).value, lsq_ref, batch)?;
        // cycle terms
        track("L_cyc A", cycle_loss(&a, &rec_a).unwrap().value, ref_l1(&a, &rec_a), batch)?;
        track("L_cyc B", cycle_loss(&b, &rec_b).unwrap().value, ref_l1(&b, &rec_b), batch)?;
        // identity
        let ide = identity_loss(&idt_b, &b, &idt_a, &a).unwrap().value;
        track("L_ide", ide, ref_l1(&idt_b, &b) + ref_l1(&idt_a, &a), batch)?;
        // classification terms
        let lb = classifier_loss_minority(&z_b, &z_fb).value;
        let la = classifier_loss_majority(&z_a, &z_fa).value;
        track("L_cls^B", lb, ref_cls_b(&z_b, &z_fb), batch)?;
        track("L_cls^A", la, ref_cls_a(&z_a, &z_fa), batch)?;
        // combined classifier loss
        let comb = classifier_loss_combined(lb, la, gamma).unwrap().value;
        track("L_cls", comb, ref_cls_b(&z_b, &z_fb) + ref_cls_a(&z_a, &z_fa) / gamma, batch)?;
        // generator objective, both classifier-term weightings
        let parts = LossBreakdown {
            gan_ab: generator_adversarial_loss(&d_fake_b).value,
            gan_ba: generator_adversarial_loss(&d_fake_a).value,
            cyc_a: ref_l1(&a, &rec_a),
            cyc_b: ref_l1(&b, &rec_b),
            ide,
            cls_a: la,
            cls_b: lb,
            total: 0.0,
        };
        for (terms, factor) in [
            (ClassifierTermWeighting::GammaWeighted, 1.0 / gamma),
            (ClassifierTermWeighting::Unweighted, 1.0),
        ] {
            let w = LossWeights {
                classifier_terms: terms,
                ..LossWeights::new(gamma)
            };
            let want = parts.gan_ab
                + 10.0 * parts.cyc_a
                + parts.gan_ba
                + 10.0 * parts.cyc_b
                + 5.0 * parts.ide
                + factor * parts.cls_a
                + parts.cls_b;
            track("full objective", full_objective(&parts, &w).unwrap(), want, batch)?;
        }
        // split layout used by the classifier step
        let z: Vec<f64> = z_b.iter().chain(&z_fb).chain(&z_a).chain(&z_fa).copied().collect();
        let (bd, _) = classifier_objective(&z, n, n, gamma).unwrap();
        track("classifier objective", bd.total, comb, batch)?;
    }
    within_time(start, Duration::from_secs(60))?;
    Ok(format!("1000 batches, max abs deviation {worst:.2e}"))
}

// ---------------------------------------------------------------- finite differences

const H: f64 = 1e-6;
const REL: f64 = 1e-4;

/// Rounding error of a central difference whose endpoint values are `f_plus`, `f_minus`.
fn roundoff(f_plus: f64, f_minus: f64) -> f64 {
    4.0 * f64::EPSILON * f_plus.abs().max(f_minus.abs()) / H
}

struct GradStats {
    checked: usize,
    worst: f64,
}

impl GradStats {
    /// Element check: relative error within `REL`, allowing the difference quotient's own rounding error.
    fn compare(&mut self, what: &str, analytic: f64, numeric: f64, noise: f64) -> Result<(), String> {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        if diff > noise {
            self.worst = self.worst.max(rel);
        }
        ensure(diff <= REL * scale + noise, || {
            format!("{what}: analytic {analytic:.10e} vs numeric {numeric:.10e} (rel {rel:.2e})")
        })
    }
}

/// Vector check: `|analytic - numeric| / |numeric|` within `REL`.
fn compare_norm(what: &str, analytic: &[f64], numeric: &[f64]) -> Result<f64, String> {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let rel = if norm > 0.0 { diff / norm } else { diff };
    ensure(rel <= REL, || format!("{what}: relative error of the gradient vector {rel:.2e}"))?;
    Ok(rel)
}

/// Checks every input partial of `f` at `inputs` by central differences.
fn check_inputs(
    stats: &mut GradStats,
    name: &str,
    inputs: &[Vec<f64>],
    f: impl Fn(&[Vec<f64>]) -> Scored<f64>,
) -> Result<(), String> {
    let analytic = f(inputs).grads;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k][i] += H;
            let mut minus = inputs.to_vec();
            minus[k][i] -= H;
            let (fp, fm) = (f(&plus).value, f(&minus).value);
            let numeric = (fp - fm) / (2.0 * H);
            stats.compare(&format!("{name} input {k}[{i}]"), analytic[k][i], numeric, roundoff(fp, fm))?;
        }
    }
    Ok(())
}

/// Pixels whose pairwise differences stay clear of the L1 kink.
fn separated(rng: &mut ChaCha8Rng, other: &[f64]) -> Vec<f64> {
    other
        .iter()
        .map(|&o| {
            let d: f64 = rng.random_range(0.01..0.5);
            if rng.random_bool(0.5) {
                o + d
            } else {
                o - d
            }
        })
        .collect()
}

fn tiny_profile() -> ModelProfile {
    ModelProfile {
        generator_filters: 2,
        generator_residual_blocks: 1,
        discriminator_filters: 2,
        classifier_fc_sizes: (4, 4),
        ..ModelProfile::desk(16)
    }
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut stats = GradStats { checked: 0, worst: 0.0 };
    let interior = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.02..0.98)).collect() };
    for trial in 0..20 {
        let n = rng.random_range(1..6);
        let m = rng.random_range(1..13);
        let gamma = rng.random_range(1.0..30.0);
        let d = [interior(&mut rng, m), interior(&mut rng, m)];
        check_inputs(&mut stats, "L_GAN discriminator", &d, |x| adversarial_loss(&x[0], &x[1]))?;
        check_inputs(&mut stats, "L_GAN generator", &d[1..], |x| generator_adversarial_loss(&x[0]))?;
        check_inputs(&mut stats, "L_GAN lsq", &d, |x| adversarial_loss_lsq(&x[0], &x[1]))?;
        let a = pixels(&mut rng, m * 3);
        let rec = separated(&mut rng, &a);
        check_inputs(&mut stats, "L_cyc", &[a.clone(), rec], |x| cycle_loss(&x[0], &x[1]).unwrap())?;
        let b = pixels(&mut rng, m * 3);
        let (ib, ia) = (separated(&mut rng, &b), separated(&mut rng, &a));
        check_inputs(&mut stats, "L_ide", &[ib, b, ia, a], |x| identity_loss(&x[0], &x[1], &x[2], &x[3]).unwrap())?;
        let z = [interior(&mut rng, n), interior(&mut rng, n)];
        check_inputs(&mut stats, "L_cls^B", &z, |x| classifier_loss_minority(&x[0], &x[1]))?;
        check_inputs(&mut stats, "L_cls^A", &z, |x| classifier_loss_majority(&x[0], &x[1]))?;
        let ls = [vec![rng.random_range(0.1..3.0)], vec![rng.random_range(0.1..3.0)]];
        check_inputs(&mut stats, "L_cls combined", &ls, |x| classifier_loss_combined(x[0][0], x[1][0], gamma).unwrap())?;
        let nb = rng.random_range(1..4);
        let zall = [interior(&mut rng, 2 * (n + nb))];
        check_inputs(&mut stats, &format!("L_cls over batch (trial {trial})"), &zall, |x| {
            let (bd, grad) = classifier_objective(&x[0], n, nb, gamma).unwrap();
            Scored {
                value: bd.total,
                grads: vec![grad],
            }
        })?;
    }
    let loss_checks = stats.checked;

    // full objective with respect to every generator parameter of a tiny model
    let profile = tiny_profile();
    let spec = DatasetSpec {
        val_per_class: 2,
        test_per_class: 2,
        ..DatasetSpec::synthetic(4, 2, 16, 5)
    };
    let ds: ImbalancedDataset<f64> = load_dataset(&spec).map_err(|e| e.to_string())?;
    let a = stack_images(&ds.train_a, &[0, 1]);
    let b = stack_images(&ds.train_b, &[0, 1]);
    let gan = GanPair::<f64>::new(&profile, 11).map_err(|e| e.to_string())?;
    let clf = Network::<f64>::new(Role::Classifier, &profile, 12).map_err(|e| e.to_string())?;
    let mut feedback_norm = 0.0f64;
    let mut worst_vector = 0.0f64;
    for terms in [ClassifierTermWeighting::GammaWeighted, ClassifierTermWeighting::Unweighted] {
        let w = LossWeights {
            classifier_terms: terms,
            ..LossWeights::new(ds.gamma)
        };
        let objective = |gan: &GanPair<f64>, clf: Option<&Network<f64>>| -> f64 {
            let mut g = Graph::new();
            generator_objective(&mut g, gan, clf, &a, &b, &w, GanLossForm::Bce).unwrap().breakdown.total
        };
        let analytic = |clf: Option<&Network<f64>>| {
            let mut g = Graph::new();
            let obj = generator_objective(&mut g, &gan, clf, &a, &b, &w, GanLossForm::Bce).unwrap();
            g.backward(obj.loss);
            (gan.g_ab.grads(&g, &obj.g_ab), gan.g_ba.grads(&g, &obj.g_ba))
        };
        let (with_ab, with_ba) = analytic(Some(&clf));
        let (without_ab, _) = analytic(None);
        for (which, grads) in [("G_AB", &with_ab), ("G_BA", &with_ba)] {
            for (p, tensor) in grads.iter().enumerate() {
                let mut numerics = Vec::with_capacity(tensor.len());
                for i in 0..tensor.len() {
                    let perturbed = |delta: f64| {
                        let mut g2 = gan.clone();
                        let net = if which == "G_AB" { &mut g2.g_ab } else { &mut g2.g_ba };
                        net.params_mut()[p].data_mut()[i] += delta;
                        objective(&g2, Some(&clf))
                    };
                    let (fp, fm) = (perturbed(H), perturbed(-H));
                    let numeric = (fp - fm) / (2.0 * H);
                    let what = format!("generator objective ({terms:?}) {which} param {p}[{i}]");
                    stats.compare(&what, tensor.data()[i], numeric, roundoff(fp, fm))?;
                    numerics.push(numeric);
                }
                let what = format!("generator objective ({terms:?}) {which} param {p}");
                worst_vector = worst_vector.max(compare_norm(&what, tensor.data(), &numerics)?);
            }
        }
        for (x, y) in with_ab.iter().zip(&without_ab) {
            feedback_norm += x.data().iter().zip(y.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        }
    }
    ensure(feedback_norm.sqrt() > 1e-8, || "classifier terms add no gradient to the generators".into())?;
    within_time(start, Duration::from_secs(300))?;
    Ok(format!(
        "{loss_checks} loss partials and {} generator-parameter partials, worst element relative error {:.2e} above rounding level, worst tensor relative error {worst_vector:.2e}, classifier-path gradient norm {:.2e}",
        stats.checked - loss_checks,
        stats.worst,
        feedback_norm.sqrt()
    ))
}

fn criterion_3() -> Check {
    let gamma = 18.0;
    let analytic = classifier_loss_combined::<f64>(0.7, 2.3, gamma).map_err(|e| e.to_string())?.grads[1][0];
    let h = 1e-3;
    let f = |la: f64| classifier_loss_combined::<f64>(0.7, la, gamma).unwrap().value;
    let measured = (f(2.3 + h) - f(2.3 - h)) / (2.0 * h);
    // the same factor reaches the majority-class logits through the batch objective
    let z = [0.6, 0.4, 0.3, 0.8];
    let (_, grad) = classifier_objective(&z, 1, 1, gamma).map_err(|e| e.to_string())?;
    let majority = classifier_loss_majority(&z[2..3], &z[3..4]).grads;
    let through_batch = grad[2] / majority[0][0];
    let ds: ImbalancedDataset<f32> = load_dataset(&DatasetSpec::synthetic(450, 25, 16, 0)).map_err(|e| e.to_string())?;
    let factor = LossWeights::new(ds.gamma).majority_classifier_factor();
    for (name, v) in [
        ("analytic", analytic),
        ("finite difference", measured),
        ("batch objective", through_batch),
        ("450:25 dataset objective weight", factor),
    ] {
        ensure((v - 1.0 / 18.0).abs() <= 1e-9, || format!("{name}: {v} vs {}", 1.0 / 18.0))?;
    }
    Ok(format!("dL_cls/dL_A = {measured:.12} (1/18 = {:.12})", 1.0 / 18.0))
}

fn criterion_4() -> Check {
    let mut failures = Vec::new();
    // SMOTE
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let points: Vec<Vec<f64>> = (0..25).map(|_| (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let samples = smote(&points, 5, 500, 9).map_err(|e| e.to_string())?;
    let mut smote_worst = 0.0f64;
    for s in &samples {
        let (x, y) = (&points[s.base], &points[s.neighbor]);
        ensure(nearest_neighbors(&points, s.base, 5).contains(&s.neighbor), || "neighbor outside the k nearest".into())?;
        let dir: Vec<f64> = x.iter().zip(y).map(|(u, v)| v - u).collect();
        let off: Vec<f64> = x.iter().zip(&s.vector).map(|(u, v)| v - u).collect();
        let dd: f64 = dir.iter().map(|v| v * v).sum();
        let recovered = dir.iter().zip(&off).map(|(u, v)| u * v).sum::<f64>() / dd;
        let dist = off
            .iter()
            .zip(&dir)
            .map(|(o, d)| (o - recovered.clamp(0.0, 1.0) * d).powi(2))
            .sum::<f64>()
            .sqrt();
        smote_worst = smote_worst.max(dist).max((recovered - s.lambda).abs());
        ensure(dist <= 1e-6, || format!("sample off its segment by {dist:e}"))?;
        ensure((recovered - s.lambda).abs() <= 1e-6, || format!("lambda {} recovered as {recovered}", s.lambda))?;
    }
    // CBL
    for counts in [[900usize, 50], [10, 10], [7, 1234]] {
        let w = cbl_weights(&counts, 0.0).map_err(|e| e.to_string())?;
        ensure(w == [1.0, 1.0], || format!("beta=0 weights {w:?} for {counts:?}"))?;
    }
    let w = cbl_weights(&[900, 50], 0.9999).map_err(|e| e.to_string())?;
    let ratio = w[1] / w[0];
    let cbl_dev = (ratio / 18.0 - 1.0).abs();
    if cbl_dev > 0.01 {
        failures.push(format!(
            "CBL beta=0.9999 counts (900,50): weight ratio {ratio:.6} is {:.2}% from 18 (limit 1%)",
            100.0 * cbl_dev
        ));
    }
    // TS
    for _ in 0..1000 {
        let p: f64 = rng.random_range(0.0..1.0);
        if p == 0.5 {
            continue;
        }
        let got = threshold_shift((1.0 - p, p), (0.5, 0.5)).map_err(|e| e.to_string())?;
        let argmax = if p > 0.5 { ClassLabel::B } else { ClassLabel::A };
        ensure(got == argmax, || format!("uniform-prior shift changed the argmax at p={p}"))?;
        let rule = InferenceRule::PriorShift { priors: (0.5, 0.5) };
        ensure(rule.predict(p) == InferenceRule::Threshold.predict(p), || format!("rule mismatch at p={p}"))?;
    }
    // OS / US
    let ds: ImbalancedDataset<f32> = load_dataset(&DatasetSpec::synthetic(450, 25, 16, 3)).map_err(|e| e.to_string())?;
    for (name, out) in [("OS", oversample(&ds, 1)), ("US", undersample(&ds, 1))] {
        let out = out.map_err(|e| e.to_string())?;
        ensure(out.gamma == 1.0 && out.train_a.len() == out.train_b.len(), || {
            format!("{name} gives gamma {} ({}:{})", out.gamma, out.train_a.len(), out.train_b.len())
        })?;
    }
    let summary = format!(
        "SMOTE max error {smote_worst:.1e} over 500 draws, CBL beta=0.9999 ratio {ratio:.4}, TS invariant on 1000 vectors, OS/US gamma = 1"
    );
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failures.join("; ")))
    }
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for instance in 0..1000 {
        let n = rng.random_range(1..200);
        let p_b: f64 = rng.random_range(0.0..1.0);
        let p_hit: f64 = rng.random_range(0.0..1.0);
        let labels: Vec<ClassLabel> = (0..n)
            .map(|_| if rng.random_bool(p_b) { ClassLabel::B } else { ClassLabel::A })
            .collect();
        let preds: Vec<ClassLabel> = labels
            .iter()
            .map(|&l| if rng.random_bool(p_hit) { l } else { l.other() })
            .collect();
        let cm = confusion(&preds, &labels).map_err(|e| e.to_string())?;
        for c in [ClassLabel::A, ClassLabel::B] {
            let count = |f: &dyn Fn(ClassLabel, ClassLabel) -> bool| {
                preds.iter().zip(&labels).filter(|(&p, &l)| f(p, l)).count() as f64
            };
            let tp = count(&|p, l| p == c && l == c);
            let predicted = count(&|p, _| p == c);
            let actual = count(&|_, l| l == c);
            let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let recall = if actual > 0.0 { tp / actual } else { 0.0 };
            let want = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            let got = f1(&cm, c);
            worst = worst.max((got - want).abs());
            ensure((got - want).abs() <= 1e-12, || format!("instance {instance}: F1({c:?}) {got} vs {want}"))?;
        }
        let recall_of = |c: ClassLabel| {
            let actual = labels.iter().filter(|&&l| l == c).count();
            let hit = preds.iter().zip(&labels).filter(|(&p, &l)| l == c && p == c).count();
            if actual == 0 {
                0.0
            } else {
                hit as f64 / actual as f64
            }
        };
        let want = 0.5 * (recall_of(ClassLabel::A) + recall_of(ClassLabel::B));
        let got = acsa(&cm);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-12, || format!("instance {instance}: ACSA {got} vs {want}"))?;
        let swapped_labels: Vec<ClassLabel> = labels.iter().map(|l| l.other()).collect();
        let swapped_preds: Vec<ClassLabel> = preds.iter().map(|l| l.other()).collect();
        let swapped = confusion(&swapped_preds, &swapped_labels).map_err(|e| e.to_string())?;
        ensure(acsa(&swapped) == got && acsa(&cm.relabeled()) == got, || {
            format!("instance {instance}: ACSA changes under relabeling")
        })?;
    }
    Ok(format!("1000 instances, max deviation {worst:.1e}, relabeling invariant"))
}

fn criterion_6() -> Check {
    let start = Instant::now();
    let plan = alt_phase_plan(100, 5).map_err(|e| e.to_string())?;
    ensure(plan.len() == 20, || format!("{} phases", plan.len()))?;
    for (i, (phase, range)) in plan.iter().enumerate() {
        let want = if i % 2 == 0 { Phase::Classifier } else { Phase::Gan };
        ensure(*phase == want && *range == (5 * i..5 * i + 5), || format!("phase {i} is {phase:?} {range:?}"))?;
    }

    // a real 100-epoch ALT run on a tiny model
    let profile = tiny_profile();
    let spec = DatasetSpec {
        val_per_class: 2,
        test_per_class: 2,
        ..DatasetSpec::synthetic(4, 2, 16, 6)
    };
    let ds: ImbalancedDataset<f32> = load_dataset(&spec).map_err(|e| e.to_string())?;
    let gan = GanPair::new(&profile, 3).map_err(|e| e.to_string())?;
    let mut cfg = TrainingConfig::new(TrainingMode::Alt, 100, profile);
    cfg.classifier_batch_size = 2;
    cfg.gan_batch_size = 2;
    cfg.seed = 6;
    let out = train_alt(&ds, gan, &cfg).map_err(|e| e.to_string())?;
    let phases = out.log.phases();
    ensure(phases == plan, || format!("logged phases {phases:?}"))?;
    let mut prev: Option<(String, String)> = None;
    for r in &out.log.records {
        let (c, g) = match (&r.classifier_digest, &r.gan_digest) {
            (Some(c), Some(g)) => (c, g),
            _ => return Err(format!("epoch {} lacks digests", r.epoch)),
        };
        match r.phase {
            Phase::Classifier => ensure(g.unchanged() && !c.unchanged(), || {
                format!("epoch {}: GAN changed or classifier idle in a classifier phase", r.epoch)
            })?,
            Phase::Gan => ensure(c.unchanged() && !g.unchanged(), || {
                format!("epoch {}: classifier changed or GAN idle in a GAN phase", r.epoch)
            })?,
            Phase::Pretrain => return Err("pretrain record inside ALT".into()),
        }
        if let Some((pc, pg)) = &prev {
            ensure(*pc == c.before && *pg == g.before, || format!("state changed between epochs at {}", r.epoch))?;
        }
        prev = Some((c.after.clone(), g.after.clone()));
    }

    let sched = LrSchedule::ConstantThenLinearDecay {
        constant_epochs: 50,
        decay_epochs: 150,
    };
    let lr0 = 2e-4;
    let (mid, end) = (sched.lr_at(lr0, 125), sched.lr_at(lr0, 200));
    ensure((mid - lr0 / 2.0).abs() <= 1e-12, || format!("lr at 125 = {mid}"))?;
    ensure(end.abs() <= 1e-12, || format!("lr at 200 = {end}"))?;
    ensure(sched.lr_at(lr0, 50) == lr0, || "lr decays before the constant stage ends".into())?;
    Ok(format!(
        "20 phases C,G,...; freeze contracts bit-exact over 100 epochs; lr(125) = {mid:e}, lr(200) = {end} ({:.1}s)",
        start.elapsed().as_secs_f64()
    ))
}

fn desk_config(method: Method, dir: &Path) -> ExperimentConfig {
    ExperimentConfig::desk(method, 25, dir)
}

fn desk_run(cfg: &ExperimentConfig) -> Result<MetricsReport, String> {
    run_experiment(cfg, OutputPolicy::Overwrite).map_err(|e| e.to_string())
}

fn criterion_7(aug: &MetricsReport) -> Check {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let vanilla = desk_run(&desk_config(Method::Baseline(BaselineMethod::Vanilla), &tmp.path().join("vanilla")))?;
    let gap = aug.mean.f1_minority - vanilla.mean.f1_minority;
    let per_seed = |r: &MetricsReport| {
        r.runs
            .iter()
            .map(|x| format!("{:.3}", x.test.f1_minority))
            .collect::<Vec<_>>()
            .join("/")
    };
    let detail = format!(
        "minority F1 AUG {:.4} [{}] vs vanilla {:.4} [{}], gap {gap:.4}; vanilla recall minority {:.3} < majority {:.3}",
        aug.mean.f1_minority,
        per_seed(aug),
        vanilla.mean.f1_minority,
        per_seed(&vanilla),
        vanilla.mean.recall_minority,
        vanilla.mean.recall_majority
    );
    ensure(aug.run_count == 3 && vanilla.run_count == 3, || "expected 3 seeds".into())?;
    ensure(gap >= 0.15, || format!("gap below 0.15: {detail}"))?;
    ensure(vanilla.mean.recall_minority < vanilla.mean.recall_majority, || {
        format!("no collapse signature: {detail}")
    })?;
    within_time(start, Duration::from_secs(2 * 3600))?;
    Ok(detail)
}

fn criterion_8() -> Check {
    let start = Instant::now();
    let cfg = desk_config(Method::Aug, Path::new("unused"));
    let spec = cfg.dataset_spec();
    let ds: ImbalancedDataset<f32> = load_dataset(&spec).map_err(|e| e.to_string())?;
    let pool = proxy_pool::<f32>(&spec, cfg.proxy.per_class).map_err(|e| e.to_string())?;
    let balanced = pool.iter().filter(|e| e.label == ClassLabel::B).count() * 2 == pool.len();
    ensure(balanced, || "proxy pool is not balanced".into())?;
    let net = train_proxy_classifier(&pool, &cfg.proxy_training().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let proxy = CertifiedProxy::certify(net, &ds.test, 0.95).map_err(|e| e.to_string())?;
    let identity = inception_accuracy(&proxy, &ds.test, |x| x.clone(), |x| x.clone()).map_err(|e| e.to_string())?;
    ensure(identity.a_to_b <= 0.05 && identity.b_to_a <= 0.05 && identity.mean <= 0.05, || {
        format!("identity generator scores {identity:?}")
    })?;
    within_time(start, Duration::from_secs(15 * 60))?;
    Ok(format!(
        "proxy real accuracy {:.3}; identity generator A->B {:.3}, B->A {:.3}, mean {:.3} ({:.0}s)",
        proxy.real_accuracy(),
        identity.a_to_b,
        identity.b_to_a,
        identity.mean,
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_9(first: &MetricsReport, dir: &Path) -> Check {
    let second = desk_run(&desk_config(Method::Aug, dir))?;
    let (x, y) = (first.without_timing(), second.without_timing());
    ensure(x == y, || "reports differ".into())?;
    ensure(x.to_json() == y.to_json(), || "report JSON differs".into())?;
    Ok(format!(
        "two desk AUG runs agree (minority F1 {:.6}, inception accuracy {:.6})",
        x.mean.f1_minority,
        x.mean.inception_accuracy.unwrap_or(f64::NAN)
    ))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let tmp = tempfile::tempdir().expect("temp dir");
    // criteria 7 and 9 share the first desk AUG run
    let first = std::cell::OnceCell::new();
    let desk_aug = || {
        first
            .get_or_init(|| desk_run(&desk_config(Method::Aug, &tmp.path().join("aug_first"))))
            .clone()
    };
    let second_dir = tmp.path().join("aug_second");

    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Check + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("criterion_1 loss oracle", Box::new(criterion_1)),
        ("criterion_2 gradients", Box::new(criterion_2)),
        ("criterion_3 gamma weighting", Box::new(criterion_3)),
        ("criterion_4 baselines", Box::new(criterion_4)),
        ("criterion_5 metric oracle", Box::new(criterion_5)),
        ("criterion_6 schedules", Box::new(criterion_6)),
        ("criterion_7 desk trend", Box::new(|| criterion_7(&desk_aug()?))),
        ("criterion_8 inception accuracy", Box::new(criterion_8)),
        ("criterion_9 determinism", Box::new(|| criterion_9(&desk_aug()?, &second_dir))),
    ];

    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if !wanted(name) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run())).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{name}: PASS ({secs:.1}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("{name}: FAIL ({secs:.1}s) {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
