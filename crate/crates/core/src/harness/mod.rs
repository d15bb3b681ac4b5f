// SPDX-License-Identifier: MIT OR Apache-2.0

//! Perturbation evaluation of relevance maps on a synthetic sequence task.
//!
//! A random-weight backbone reads embedded token sequences with a
//! classification token appended at the end; only a linear head on that
//! token's output is trained. Relevance maps then decide which tokens are
//! replaced by zero embeddings, and the effect on accuracy or logits is
//! summarized by the area under the masking curve.

mod ablation;
mod task;

pub use ablation::{ablate_build, ablate_layer, ablate_stack, Variant};
pub use task::{gen_task, Dataset, TaskRule, TaskSpec};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{
    argmax, attribution_from_gradients, attribution_gradients, explain, Classifier, Combine,
    GradMode, Method, Readout,
};
use crate::layers::{Arch, Model, ModelConfig};
use crate::numerics::{trapezoid_auc, Matrix, Rng};

/// Masking fractions `0.1, 0.2, …, 0.9`.
pub const FRACTIONS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Permutations averaged by the random-order baseline.
pub const RANDOM_PERMUTATIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Most relevant tokens first.
    #[serde(rename = "pos")]
    Positive,
    /// Least relevant tokens first.
    #[serde(rename = "neg")]
    Negative,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Self::Positive => "pos",
            Self::Negative => "neg",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" => Ok(Self::Positive),
            "neg" => Ok(Self::Negative),
            _ => Err(Error::Unknown {
                kind: "direction",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    /// Fraction of samples still classified correctly.
    #[serde(rename = "acc")]
    Accuracy,
    /// Mean squared change of the logits.
    #[serde(rename = "mse")]
    Mse,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Accuracy => "acc",
            Self::Mse => "mse",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acc" => Ok(Self::Accuracy),
            "mse" => Ok(Self::Mse),
            _ => Err(Error::Unknown {
                kind: "metric",
                name: s.to_string(),
            }),
        }
    }
}

/// Token order for masking: stable sort by relevance, ties by index.
pub fn mask_order(relevance: &[f64], direction: Direction) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..relevance.len()).collect();
    match direction {
        Direction::Positive => idx.sort_by(|a, b| relevance[*b].total_cmp(&relevance[*a])),
        Direction::Negative => idx.sort_by(|a, b| relevance[*a].total_cmp(&relevance[*b])),
    }
    idx
}

/// Number of tokens masked at `fraction` of `len`.
pub fn masked_count(fraction: f64, len: usize) -> usize {
    ((fraction * len as f64).round() as usize).min(len)
}

/// Optimization settings of the linear head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.1,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    /// Readout on raw (unstandardized) features.
    pub readout: Readout,
    /// Accuracy on the held-out set.
    pub accuracy: f64,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Multinomial logistic regression on standardized features, trained by
/// full-batch gradient descent.
pub fn train_linear_head(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    classes: usize,
    cfg: HeadConfig,
) -> Result<TrainedHead> {
    let (n, dim) = train_x.shape();
    if n != train_y.len() || test_x.rows() != test_y.len() || test_x.cols() != dim {
        return Err(Error::Shape("features and labels disagree".into()));
    }
    if !train_x.all_finite() || !test_x.all_finite() {
        return Err(Error::NonFinite("head features".into()));
    }
    if let Some(bad) = train_y.iter().chain(test_y).find(|y| **y >= classes) {
        return Err(Error::OutOfRange {
            what: "label",
            index: *bad,
            limit: classes,
        });
    }
    let first = train_y.first().copied();
    if first.is_none() || train_y.iter().all(|y| Some(*y) == first) {
        return Err(Error::InvalidArgument(
            "training labels contain a single class".into(),
        ));
    }

    let mean: Vec<f64> = (0..dim)
        .map(|k| train_x.col(k).iter().sum::<f64>() / n as f64)
        .collect();
    let sd: Vec<f64> = (0..dim)
        .map(|k| {
            let var = train_x
                .col(k)
                .iter()
                .map(|v| (v - mean[k]).powi(2))
                .sum::<f64>()
                / n as f64;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let xs = Matrix::from_fn(n, dim, |i, k| (train_x[(i, k)] - mean[k]) / sd[k]);

    let mut w = Matrix::zeros(dim, classes);
    let mut b = vec![0.0; classes];
    for _ in 0..cfg.steps {
        let logits = xs.matmul(&w)?.add_row(&b)?;
        let mut resid = Matrix::zeros(n, classes);
        for i in 0..n {
            let p = softmax(logits.row(i));
            for (c, pc) in p.iter().enumerate() {
                resid[(i, c)] = (pc - f64::from(u8::from(train_y[i] == c))) / n as f64;
            }
        }
        let gw = xs.transpose().matmul(&resid)?.add(&w.scale(cfg.l2))?;
        w = w.sub(&gw.scale(cfg.learning_rate))?;
        for (c, bc) in b.iter_mut().enumerate() {
            *bc -= cfg.learning_rate * resid.col(c).iter().sum::<f64>();
        }
    }

    let raw_w = Matrix::from_fn(dim, classes, |k, c| w[(k, c)] / sd[k]);
    let raw_b: Vec<f64> = (0..classes)
        .map(|c| b[c] - (0..dim).map(|k| mean[k] * raw_w[(k, c)]).sum::<f64>())
        .collect();
    let readout = Readout {
        position: None,
        weights: raw_w,
        bias: raw_b,
    };
    let correct = (0..test_x.rows())
        .filter(|i| {
            let logits = readout
                .logits(&test_x.select_rows(&[*i]))
                .expect("shape checked");
            argmax(&logits) == test_y[*i]
        })
        .count();
    let accuracy = if test_y.is_empty() {
        0.0
    } else {
        correct as f64 / test_y.len() as f64
    };
    Ok(TrainedHead { readout, accuracy })
}

/// Source of the per-token relevance driving the masking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scorer {
    Method(Method),
    /// Attribution with the operator factors of an ablation variant; the
    /// gradients are those of the unablated model.
    Ablated(Variant),
    /// Ground-truth informative positions of the task.
    Oracle,
    /// Uniformly random order, averaged over several permutations.
    Random,
}

/// Relevance over the input tokens (classification token excluded) for the
/// predicted class of sample `i`.
pub fn token_relevance(
    clf: &Classifier,
    data: &Dataset,
    i: usize,
    scorer: Scorer,
) -> Result<Vec<f64>> {
    let x = data.embed(i, &[])?;
    let cls = data.spec.seq_len;
    let pred = clf.predict(&x)?;
    let map = match scorer {
        Scorer::Method(m) => explain(clf, &x, m, pred)?,
        Scorer::Ablated(v) => {
            let (stack, grads) = attribution_gradients(clf, &x, pred, GradMode::Frozen)?;
            let ablated = ablate_stack(&stack, v)?;
            attribution_from_gradients(&ablated, &grads, cls, Some(pred), Combine::Rollout)?
        }
        Scorer::Oracle => return Ok(data.informative(i)),
        Scorer::Random => {
            return Err(Error::InvalidArgument(
                "random order has no relevance".into(),
            ))
        }
    };
    Ok(map.exclude(cls)?.scores)
}

/// Metric for one sample with the first `masked_count(fraction)` tokens of
/// `order` masked. Accuracy is 0/1; MSE is against the unmasked logits.
pub fn masked_metric(
    clf: &Classifier,
    data: &Dataset,
    i: usize,
    order: &[usize],
    fraction: f64,
    metric: Metric,
) -> Result<f64> {
    let m = masked_count(fraction, data.spec.seq_len);
    let logits = clf.logits(&data.embed(i, &order[..m])?)?;
    Ok(match metric {
        Metric::Accuracy => f64::from(u8::from(argmax(&logits) == data.labels[i])),
        Metric::Mse => {
            let base = clf.logits(&data.embed(i, &[])?)?;
            logits
                .iter()
                .zip(&base)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / base.len() as f64
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbCurve {
    pub fractions: Vec<f64>,
    pub values: Vec<f64>,
    pub auc: f64,
    pub direction: Direction,
    pub metric: Metric,
}

impl PerturbCurve {
    fn new(values: Vec<f64>, direction: Direction, metric: Metric) -> Result<Self> {
        let fractions = FRACTIONS.to_vec();
        let auc = trapezoid_auc(&fractions, &values)?;
        Ok(Self {
            fractions,
            values,
            auc,
            direction,
            metric,
        })
    }
}

/// Masking curve over `samples` of `data`, averaged across samples.
pub fn perturb_eval(
    clf: &Classifier,
    data: &Dataset,
    samples: &[usize],
    scorer: Scorer,
    direction: Direction,
    metric: Metric,
    seed: u64,
) -> Result<PerturbCurve> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to perturb".into()));
    }
    let root = Rng::new(seed);
    let mut sums = vec![0.0; FRACTIONS.len()];
    for &i in samples {
        let orders = match scorer {
            Scorer::Random => {
                let mut rng = root.split(i as u64);
                (0..RANDOM_PERMUTATIONS)
                    .map(|_| rng.permutation(data.spec.seq_len))
                    .collect()
            }
            _ => vec![mask_order(
                &token_relevance(clf, data, i, scorer)?,
                direction,
            )],
        };
        for order in &orders {
            for (k, f) in FRACTIONS.iter().enumerate() {
                sums[k] += masked_metric(clf, data, i, order, *f, metric)? / orders.len() as f64;
            }
        }
    }
    let values = sums.iter().map(|s| s / samples.len() as f64).collect();
    PerturbCurve::new(values, direction, metric)
}

/// Settings of the synthetic evaluation protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub arch: Arch,
    pub depth: usize,
    pub d_model: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub rule: TaskRule,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Test samples used for perturbation curves.
    pub perturb_samples: usize,
    pub head: HeadConfig,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            arch: Arch::Mamba,
            depth: 2,
            d_model: 32,
            seq_len: 9,
            vocab: 2,
            rule: TaskRule::Majority,
            train_samples: 1000,
            test_samples: 200,
            perturb_samples: 100,
            head: HeadConfig::default(),
        }
    }
}

/// One seed of the protocol: task, backbone and trained head.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub data: Dataset,
    pub classifier: Classifier,
    pub baseline_accuracy: f64,
    pub test: Vec<usize>,
}

impl SeedRun {
    pub fn prepare(p: &Protocol, seed: u64) -> Result<Self> {
        let total = p.train_samples + p.test_samples;
        let data = gen_task(&TaskSpec {
            seed,
            vocab: p.vocab,
            rule: p.rule,
            samples: total,
            seq_len: p.seq_len,
            d_model: p.d_model,
        })?;
        let cfg = ModelConfig::for_arch(p.arch, p.d_model, p.seq_len + 1, seed).with_depth(p.depth);
        let model = Model::new(cfg)?;
        let mut feats = Matrix::zeros(total, p.d_model);
        for i in 0..total {
            let out = model.forward(&data.embed(i, &[])?)?;
            feats.row_mut(i).copy_from_slice(out.row(p.seq_len));
        }
        let train: Vec<usize> = (0..p.train_samples).collect();
        let test: Vec<usize> = (p.train_samples..total).collect();
        let labels = |idx: &[usize]| idx.iter().map(|i| data.labels[*i]).collect::<Vec<_>>();
        let head = train_linear_head(
            &feats.select_rows(&train),
            &labels(&train),
            &feats.select_rows(&test),
            &labels(&test),
            data.classes(),
            p.head,
        )?;
        Ok(Self {
            seed,
            classifier: Classifier {
                model,
                readout: head.readout,
            },
            baseline_accuracy: head.accuracy,
            test,
            data,
        })
    }

    /// Test samples used for perturbation.
    pub fn perturb_set(&self, p: &Protocol) -> &[usize] {
        &self.test[..p.perturb_samples.min(self.test.len())]
    }

    pub fn curve(
        &self,
        p: &Protocol,
        scorer: Scorer,
        direction: Direction,
        metric: Metric,
    ) -> Result<PerturbCurve> {
        perturb_eval(
            &self.classifier,
            &self.data,
            self.perturb_set(p),
            scorer,
            direction,
            metric,
            self.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_order_examples() {
        let r = [0.9, 0.1, 0.5];
        assert_eq!(mask_order(&r, Direction::Positive), vec![0, 2, 1]);
        assert_eq!(mask_order(&r, Direction::Negative), vec![1, 2, 0]);
        for d in [Direction::Positive, Direction::Negative] {
            assert_eq!(mask_order(&[0.5, 0.5], d), vec![0, 1]);
        }
    }

    #[test]
    fn masked_counts_round() {
        assert_eq!(masked_count(0.1, 9), 1);
        assert_eq!(masked_count(0.5, 9), 5);
        assert_eq!(masked_count(0.9, 9), 8);
        assert_eq!(masked_count(0.0, 9), 0);
    }

    #[test]
    fn separable_fixture_is_learned() {
        let mut rng = Rng::new(1);
        let make = |rng: &mut Rng, n: usize| {
            let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let x = Matrix::from_fn(n, 2, |i, k| {
                let centre = if y[i] == 1 { 2.0 } else { -2.0 };
                if k == 0 {
                    centre + rng.normal(0.5)
                } else {
                    rng.normal(1.0)
                }
            });
            (x, y)
        };
        let (tx, ty) = make(&mut rng, 200);
        let (vx, vy) = make(&mut rng, 200);
        let head = train_linear_head(&tx, &ty, &vx, &vy, 2, HeadConfig::default()).unwrap();
        assert!(head.accuracy >= 0.99, "{}", head.accuracy);
    }

    #[test]
    fn zero_features_predict_majority_class() {
        let ty = vec![0, 0, 0, 1];
        let vy = vec![0, 1, 0, 0, 1];
        let head = train_linear_head(
            &Matrix::zeros(4, 3),
            &ty,
            &Matrix::zeros(5, 3),
            &vy,
            2,
            HeadConfig::default(),
        )
        .unwrap();
        assert_eq!(head.accuracy, 0.6);
    }

    #[test]
    fn single_class_is_rejected() {
        let r = train_linear_head(
            &Matrix::zeros(3, 2),
            &[1, 1, 1],
            &Matrix::zeros(1, 2),
            &[1],
            2,
            HeadConfig::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn names_parse() {
        assert_eq!("pos".parse::<Direction>().unwrap(), Direction::Positive);
        assert_eq!("neg".parse::<Direction>().unwrap(), Direction::Negative);
        assert_eq!("mse".parse::<Metric>().unwrap(), Metric::Mse);
        assert!("up".parse::<Direction>().is_err());
        assert!("auc".parse::<Metric>().is_err());
    }

    fn small_protocol() -> Protocol {
        Protocol {
            d_model: 8,
            train_samples: 200,
            test_samples: 40,
            perturb_samples: 20,
            ..Protocol::default()
        }
    }

    #[test]
    fn zero_fraction_reproduces_baseline() {
        let p = small_protocol();
        let run = SeedRun::prepare(&p, 3).unwrap();
        let order: Vec<usize> = (0..p.seq_len).collect();
        for &i in run.perturb_set(&p) {
            let x = run.data.embed(i, &[]).unwrap();
            let correct = f64::from(u8::from(
                run.classifier.predict(&x).unwrap() == run.data.labels[i],
            ));
            let acc = masked_metric(&run.classifier, &run.data, i, &order, 0.0, Metric::Accuracy);
            assert_eq!(acc.unwrap(), correct);
            let mse = masked_metric(&run.classifier, &run.data, i, &order, 0.0, Metric::Mse);
            assert_eq!(mse.unwrap(), 0.0);
        }
    }

    #[test]
    fn oracle_masking_degrades_accuracy() {
        let p = small_protocol();
        let run = SeedRun::prepare(&p, 5).unwrap();
        let curve = run
            .curve(&p, Scorer::Oracle, Direction::Positive, Metric::Accuracy)
            .unwrap();
        assert!(curve.values[8] <= curve.values[0], "{curve:?}");
    }
}
