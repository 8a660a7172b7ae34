//! Soft targets from frozen image teachers, the distillation losses, and
//! confidence filtering.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{entropy, softmax_row};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Teacher-derived distribution over the teacher's classes for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTarget {
    pub probs: Vec<f64>,
    /// Nats.
    pub entropy: f64,
    /// Mean of the picked frames' logits (before temperature), the target
    /// of the logit-regression loss.
    pub logits: Vec<f64>,
    pub teacher: String,
}

/// Which frames of a clip are shown to the teacher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PickStrategy {
    #[default]
    Center,
    Random,
    KRandom(usize),
}

impl FromStr for PickStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(PickStrategy::Center),
            "random" => Ok(PickStrategy::Random),
            _ => {
                let k =
                    s.strip_prefix("k-random:").and_then(|k| k.parse::<usize>().ok()).filter(|&k| k >= 1).ok_or_else(
                        || Error::Config(format!("pick strategy `{s}` (expected center, random or k-random:<k>)")),
                    )?;
                Ok(PickStrategy::KRandom(k))
            }
        }
    }
}

impl fmt::Display for PickStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PickStrategy::Center => f.write_str("center"),
            PickStrategy::Random => f.write_str("random"),
            PickStrategy::KRandom(k) => write!(f, "k-random:{k}"),
        }
    }
}

impl TryFrom<String> for PickStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PickStrategy> for String {
    fn from(p: PickStrategy) -> String {
        p.to_string()
    }
}

impl PickStrategy {
    /// Whether the picked frames, and hence the targets, change between epochs.
    pub fn is_stochastic(self) -> bool {
        self != PickStrategy::Center
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
    MseLogits,
}

/// One teacher checkpoint and its weight in the summed loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub checkpoint: std::path::PathBuf,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub tau: f64,
    pub loss: LossKind,
    pub entropy_threshold: Option<f64>,
    pub pick_strategy: PickStrategy,
    pub teachers: Vec<TeacherSpec>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 1.0,
            loss: LossKind::CrossEntropy,
            entropy_threshold: None,
            pick_strategy: PickStrategy::Center,
            teachers: Vec::new(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("distill.tau must be positive, got {}", self.tau)));
        }
        if let Some(w) = self.teachers.iter().map(|t| t.weight).find(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("teacher weights must be positive, got {w}")));
        }
        if self.entropy_threshold.is_some_and(|e| e.is_nan()) {
            return Err(Error::Config("distill.entropy_threshold is NaN".into()));
        }
        Ok(())
    }
}

/// Frame indices for a `t`-frame clip.
pub fn pick_frames<R: Rng + ?Sized>(t: usize, strategy: PickStrategy, rng: &mut R) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::invalid("pick_frames", "clip has no frames"));
    }
    match strategy {
        PickStrategy::Center => Ok(vec![(t - 1) / 2]),
        PickStrategy::Random => Ok(vec![rng.random_range(0..t)]),
        PickStrategy::KRandom(k) if k == 0 || k > t => {
            Err(Error::invalid("pick_frames", format!("cannot pick {k} distinct frames from {t}")))
        }
        PickStrategy::KRandom(k) => Ok(index::sample(rng, t, k).into_vec()),
    }
}

/// Averages `n×K` teacher logit rows and applies a temperature softmax.
pub fn make_target<S: Real>(rows: &Tensor<S>, tau: f64, teacher: &str) -> Result<SoftTarget> {
    let s = rows.shape();
    if s.len() != 2 {
        return Err(Error::invalid("make_target", format!("expected n×K logits, got {s:?}")));
    }
    if !rows.all_finite() {
        return Err(Error::NonFinite(format!("teacher `{teacher}` logits")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("make_target", format!("temperature must be positive, got {tau}")));
    }
    let (n, k) = (s[0], s[1]);
    let mut mean = vec![0.0f64; k];
    for row in rows.data().chunks(k) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let probs = softmax_row(&mean, tau);
    Ok(SoftTarget { entropy: entropy(&probs), probs, logits: mean, teacher: teacher.to_string() })
}

fn check_weights(op: &'static str, weights: Option<&[f64]>, b: usize) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; b]),
        Some(w) if w.len() == b && w.iter().all(|v| *v >= 0.0 && v.is_finite()) => Ok(w.to_vec()),
        Some(w) => Err(Error::invalid(op, format!("{} sample weights for batch {b}", w.len()))),
    }
}

/// Mean over the batch of `w_b · (−Σ_k y_k ln f_k)` with `f = softmax(z)`.
/// `weights` defaults to all ones; a dropped clip has weight 0 but still
/// counts in the denominator.
pub fn soft_target_loss<S: Real>(
    g: &mut Graph<S>,
    logits: Var,
    targets: &Tensor<S>,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || targets.shape() != shape.as_slice() {
        return Err(Error::shape("soft_target_loss", &shape, targets.shape()));
    }
    let (b, k) = (shape[0], shape[1]);
    for (i, row) in targets.data().chunks(k).enumerate() {
        let total: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (total - 1.0).abs() > 1e-5 || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::invalid(
                "soft_target_loss",
                format!("target row {i} is not a distribution (sums to {total})"),
            ));
        }
    }
    let w = check_weights("soft_target_loss", weights, b)?;
    let z = g.value(logits);
    let mut probs = Vec::with_capacity(b * k);
    let mut loss = 0.0f64;
    for (i, (zr, yr)) in z.data().chunks(k).zip(targets.data().chunks(k)).enumerate() {
        let max = zr.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = zr.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
        let ce: f64 = zr.iter().zip(yr).map(|(zv, yv)| -yv.as_f64() * (zv.as_f64() - lse)).sum();
        loss += w[i] * ce;
        probs.extend(zr.iter().map(|v| (v.as_f64() - lse).exp()));
    }
    loss /= b as f64;
    let y = targets.to_f64_vec();
    Ok(g.record(
        Tensor::scalar(S::cast_from(loss)),
        &[logits],
        Box::new(move |ctx| {
            let up = ctx.grad.item().as_f64() / b as f64;
            let d: Vec<f64> = (0..b * k).map(|i| up * w[i / k] * (probs[i] - y[i])).collect();
            vec![Some(Tensor::from_f64([b, k], &d).unwrap())]
        }),
    ))
}

/// Mean over batch and classes of `w_b · (z − t)²`.
pub fn mse_logit_loss<S: Real>(
    g: &mut Graph<S>,
    logits: Var,
    target: &Tensor<S>,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || target.shape() != shape.as_slice() {
        return Err(Error::shape("mse_logit_loss", &shape, target.shape()));
    }
    let (b, k) = (shape[0], shape[1]);
    let w = check_weights("mse_logit_loss", weights, b)?;
    let diff: Vec<f64> =
        g.value(logits).data().iter().zip(target.data()).map(|(z, t)| z.as_f64() - t.as_f64()).collect();
    let n = (b * k) as f64;
    let loss = diff.iter().enumerate().map(|(i, d)| w[i / k] * d * d).sum::<f64>() / n;
    Ok(g.record(
        Tensor::scalar(S::cast_from(loss)),
        &[logits],
        Box::new(move |ctx| {
            let up = ctx.grad.item().as_f64();
            let d: Vec<f64> = diff.iter().enumerate().map(|(i, d)| up * 2.0 * w[i / k] * d / n).collect();
            vec![Some(Tensor::from_f64([b, k], &d).unwrap())]
        }),
    ))
}

/// `Σ_i weight_i · loss_i`.
pub fn multi_teacher_loss<S: Real>(g: &mut Graph<S>, losses: &[Var], weights: &[f64]) -> Result<Var> {
    if losses.is_empty() {
        return Err(Error::invalid("multi_teacher_loss", "no teacher losses"));
    }
    if losses.len() != weights.len() {
        return Err(Error::invalid(
            "multi_teacher_loss",
            format!("{} losses but {} weights", losses.len(), weights.len()),
        ));
    }
    let mut total = g.scale(losses[0], weights[0]);
    for (&l, &w) in losses.iter().zip(weights).skip(1) {
        let term = g.scale(l, w);
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Which targets are confident enough to train on: kept iff `entropy < e`.
pub fn keep_mask(targets: &[SoftTarget], threshold: Option<f64>) -> Vec<bool> {
    targets.iter().map(|t| threshold.is_none_or(|e| t.entropy < e)).collect()
}

/// Splits targets into the kept ones and the number dropped.
pub fn entropy_filter(targets: &[SoftTarget], threshold: Option<f64>) -> (Vec<SoftTarget>, usize) {
    let mask = keep_mask(targets, threshold);
    let kept: Vec<SoftTarget> = targets.iter().zip(&mask).filter(|(_, k)| **k).map(|(t, _)| t.clone()).collect();
    let dropped = targets.len() - kept.len();
    (kept, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use crate::tensor::ops;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(n: usize, k: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::new([n, k], v).unwrap()
    }

    fn target_with_entropy(e: f64) -> SoftTarget {
        SoftTarget { probs: vec![1.0], entropy: e, logits: vec![0.0], teacher: "t".into() }
    }

    #[test]
    fn pick_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pick_frames(8, PickStrategy::Center, &mut rng).unwrap(), vec![3]);
        assert_eq!(pick_frames(9, PickStrategy::Center, &mut rng).unwrap(), vec![4]);
        for s in [PickStrategy::Center, PickStrategy::Random, PickStrategy::KRandom(1)] {
            assert_eq!(pick_frames(1, s, &mut rng).unwrap(), vec![0]);
        }
        assert!(pick_frames(3, PickStrategy::KRandom(4), &mut rng).is_err());
        assert!(pick_frames(0, PickStrategy::Center, &mut rng).is_err());
    }

    #[test]
    fn k_random_pairs_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [[0usize; 8]; 8];
        let draws = 10_000;
        for _ in 0..draws {
            let p = pick_frames(8, PickStrategy::KRandom(2), &mut rng).unwrap();
            assert_eq!(p.len(), 2);
            assert_ne!(p[0], p[1]);
            assert!(p.iter().all(|&i| i < 8));
            counts[p[0].min(p[1])][p[0].max(p[1])] += 1;
        }
        let expected = draws as f64 / 28.0;
        let mut chi2 = 0.0;
        for (i, row) in counts.iter().enumerate() {
            for c in &row[i + 1..] {
                chi2 += (*c as f64 - expected).powi(2) / expected;
            }
        }
        // 27 degrees of freedom; 55.48 is the 0.999 quantile
        assert!(chi2 < 55.48, "chi2 = {chi2}");
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [PickStrategy::Center, PickStrategy::Random, PickStrategy::KRandom(3)] {
            assert_eq!(s.to_string().parse::<PickStrategy>().unwrap(), s);
        }
        assert!("k-random:0".parse::<PickStrategy>().is_err());
        assert!("middle".parse::<PickStrategy>().is_err());
    }

    #[test]
    fn target_examples() {
        let t = make_target(&rows(2, 2, vec![2., 0., 0., 2.]), 1.0, "a").unwrap();
        assert!((t.probs[0] - 0.5).abs() < 1e-15 && (t.probs[1] - 0.5).abs() < 1e-15);
        assert!((t.entropy - 2f64.ln()).abs() < 1e-12);
        let t = make_target(&rows(1, 2, vec![1., 0.]), 1.0, "a").unwrap();
        assert!((t.probs[0] - 0.7311).abs() < 1e-4 && (t.probs[1] - 0.2689).abs() < 1e-4);
        let t = make_target(&rows(2, 3, vec![5., -3., 1., 0., 9., 2.]), 1e6, "a").unwrap();
        for p in &t.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-4);
        }
        assert!(make_target(&rows(1, 2, vec![f64::NAN, 0.]), 1.0, "a").is_err());
        assert!(make_target(&rows(1, 2, vec![1., 0.]), 0.0, "a").is_err());
    }

    #[test]
    fn soft_loss_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(rows(1, 2, vec![0., 0.]));
        let l = soft_target_loss(&mut g, z, &rows(1, 2, vec![0.5, 0.5]), None).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let z = g.leaf(rows(1, 2, vec![1., 0.]));
        let l = soft_target_loss(&mut g, z, &rows(1, 2, vec![1., 0.]), None).unwrap();
        assert!((g.value(l).item() - 0.3133).abs() < 1e-4);
        let grads = g.gradients(l).unwrap();
        let f = ops::softmax_row(&[1.0f64, 0.0], 1.0);
        let d = grads.get(z).unwrap().data();
        assert!((d[0] - (f[0] - 1.0)).abs() < 1e-12 && (d[1] - f[1]).abs() < 1e-12);

        let z = g.leaf(rows(1, 2, vec![0., 0.]));
        assert!(soft_target_loss(&mut g, z, &rows(1, 2, vec![0.7, 0.7]), None).is_err());
        assert!(soft_target_loss(&mut g, z, &rows(1, 3, vec![0.2, 0.3, 0.5]), None).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(rows(1, 2, vec![1., 0.]));
        let l = mse_logit_loss(&mut g, z, &rows(1, 2, vec![1., 0.]), None).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l = mse_logit_loss(&mut g, z, &rows(1, 2, vec![0., 0.]), None).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-15);
        let d = g.gradients(l).unwrap();
        assert_eq!(d.get(z).unwrap().data(), &[1.0, 0.0]);
        assert!(mse_logit_loss(&mut g, z, &rows(2, 1, vec![0., 0.]), None).is_err());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..20 {
            let (b, k) = (1 + trial % 4, 2 + trial % 5);
            let z = Tensor::<f64>::from_fn([b, k], |_| rng.random_range(-3.0..3.0));
            let mut y = Vec::new();
            for _ in 0..b {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                y.extend(raw.iter().map(|v| v / s));
            }
            let y = Tensor::new([b, k], y).unwrap();
            let t = Tensor::<f64>::from_fn([b, k], |_| rng.random_range(-2.0..2.0));
            let w: Vec<f64> = (0..b).map(|i| if i == 1 { 0.0 } else { 1.0 }).collect();
            let store = crate::ParamStore::<f64>::new();
            let ce = gradcheck::check(&store, std::slice::from_ref(&z), gradcheck::DEFAULT_EPS, |g, _, v| {
                soft_target_loss(g, v[0], &y, Some(&w))
            })
            .unwrap();
            assert!(ce.passes(1e-4), "ce {ce:?}");
            let mse = gradcheck::check(&store, std::slice::from_ref(&z), gradcheck::DEFAULT_EPS, |g, _, v| {
                mse_logit_loss(g, v[0], &t, Some(&w))
            })
            .unwrap();
            assert!(mse.passes(1e-4), "mse {mse:?}");
        }
    }

    #[test]
    fn dropped_samples_get_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(rows(2, 2, vec![1., 2., 3., 4.]));
        let y = rows(2, 2, vec![0.5, 0.5, 0.1, 0.9]);
        let l = soft_target_loss(&mut g, z, &y, Some(&[1.0, 0.0])).unwrap();
        let d = g.gradients(l).unwrap();
        assert_eq!(&d.get(z).unwrap().data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn multi_teacher_examples() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::scalar(0.123_456_7));
        let b = g.leaf(Tensor::scalar(2.5));
        let single = multi_teacher_loss(&mut g, &[a], &[1.0]).unwrap();
        assert_eq!(g.value(single).item().to_bits(), g.value(a).item().to_bits());
        let both = multi_teacher_loss(&mut g, &[a, b], &[1.0, 1.0]).unwrap();
        assert_eq!(g.value(both).item(), 0.123_456_7 + 2.5);
        let zeroed = multi_teacher_loss(&mut g, &[a, b], &[1.0, 0.0]).unwrap();
        let d = g.gradients(zeroed).unwrap();
        assert_eq!(d.get(b).unwrap().item(), 0.0);
        assert!(multi_teacher_loss(&mut g, &[], &[]).is_err());
    }

    #[test]
    fn filter_examples() {
        let k = 10usize;
        let ts: Vec<SoftTarget> = [0.5, 1.5, 2.5].iter().map(|&e| target_with_entropy(e)).collect();
        let (kept, dropped) = entropy_filter(&ts, Some(2.0));
        assert_eq!((kept.len(), dropped), (2, 1));
        assert_eq!(entropy_filter(&ts, Some((k as f64).ln() + 1.0)).0.len(), 3);
        assert_eq!(entropy_filter(&ts, Some(0.0)), (vec![], 3));
        assert_eq!(entropy_filter(&ts, None).1, 0);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig { tau: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad =
            DistillConfig { teachers: vec![TeacherSpec { checkpoint: "t".into(), weight: 0.0 }], ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn logit_row() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..20.0, 2..12)
    }

    proptest! {
        #[test]
        fn single_frame_unit_temperature_is_softmax(row in logit_row()) {
            let k = row.len();
            let t = make_target(&rows(1, k, row.clone()), 1.0, "a").unwrap();
            let p = ops::softmax(&Tensor::new([k], row).unwrap(), 1.0).unwrap();
            for (a, b) in t.probs.iter().zip(p.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn shift_invariance(row in logit_row(), shift in -50.0f64..50.0, tau in 0.1f64..10.0) {
            let k = row.len();
            let a = make_target(&rows(1, k, row.clone()), tau, "a").unwrap();
            let b = make_target(&rows(1, k, row.iter().map(|v| v + shift).collect()), tau, "a").unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn entropy_is_consistent_and_bounded(row in logit_row(), tau in 0.05f64..100.0) {
            let k = row.len();
            let t = make_target(&rows(1, k, row), tau, "a").unwrap();
            let direct: f64 = t.probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
            prop_assert!((t.entropy - direct).abs() < 1e-6);
            prop_assert!(t.entropy >= 0.0 && t.entropy <= (k as f64).ln() + 1e-12);
            prop_assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn entropy_nondecreasing_in_temperature(row in logit_row()) {
            let k = row.len();
            let mut last = -1.0;
            for i in 0..20 {
                let tau = 10f64.powf(-1.0 + 3.0 * i as f64 / 19.0);
                let e = make_target(&rows(1, k, row.clone()), tau, "a").unwrap().entropy;
                prop_assert!(e >= last - 1e-12, "tau {tau}: {e} < {last}");
                last = e;
            }
        }

        #[test]
        fn loss_bounded_below_by_target_entropy(row in logit_row(), seed in 0u64..1000) {
            let k = row.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = make_target(&rows(1, k, (0..k).map(|_| rng.random_range(-3.0..3.0)).collect()), 1.0, "a").unwrap();
            let mut g = Graph::<f64>::new();
            let z = g.leaf(rows(1, k, row));
            let l = soft_target_loss(&mut g, z, &rows(1, k, y.probs.clone()), None).unwrap();
            prop_assert!(g.value(l).item() >= y.entropy - 1e-6);
        }

        #[test]
        fn keep_fraction_is_empirical_cdf(es in prop::collection::vec(0.0f64..3.0, 1..200), e in 0.0f64..3.5) {
            let ts: Vec<SoftTarget> = es.iter().map(|&x| target_with_entropy(x)).collect();
            let (kept, dropped) = entropy_filter(&ts, Some(e));
            let below = es.iter().filter(|&&x| x < e).count();
            prop_assert_eq!(kept.len(), below);
            prop_assert_eq!(dropped, es.len() - below);
        }
    }
}
