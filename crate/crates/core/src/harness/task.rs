// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Labeling rule of the synthetic task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskRule {
    /// Label is the symbol occurring most often (ties are never generated).
    Majority,
    /// Label is 1 iff the last token equals the first.
    FirstMarkerMatch,
}

impl TaskRule {
    pub fn name(self) -> &'static str {
        match self {
            Self::Majority => "majority",
            Self::FirstMarkerMatch => "first-marker-match",
        }
    }
}

impl fmt::Display for TaskRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Majority, Self::FirstMarkerMatch]
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "task rule",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub seed: u64,
    pub vocab: usize,
    pub rule: TaskRule,
    pub samples: usize,
    pub seq_len: usize,
    pub d_model: usize,
}

impl TaskSpec {
    pub fn classes(&self) -> usize {
        match self.rule {
            TaskRule::Majority => self.vocab,
            TaskRule::FirstMarkerMatch => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.seq_len == 0 || self.d_model == 0 {
            return Err(Error::InvalidConfig(format!(
                "task needs vocab >= 2, seq_len >= 1 and d_model >= 1 (got {}, {}, {})",
                self.vocab, self.seq_len, self.d_model
            )));
        }
        if self.rule == TaskRule::FirstMarkerMatch && self.seq_len < 2 {
            return Err(Error::InvalidConfig(
                "first-marker-match needs at least two tokens".into(),
            ));
        }
        Ok(())
    }
}

/// Token sequences, labels and the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    /// `(vocab + 1) × d_model`; the last row embeds the classification token.
    pub embedding: Matrix,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    /// Embedded sample `i` with the classification token appended; tokens at
    /// `masked` positions become zero vectors.
    pub fn embed(&self, i: usize, masked: &[usize]) -> Result<Matrix> {
        let toks = self.tokens.get(i).ok_or(Error::OutOfRange {
            what: "sample",
            index: i,
            limit: self.len(),
        })?;
        let len = toks.len();
        if let Some(bad) = masked.iter().find(|m| **m >= len) {
            return Err(Error::OutOfRange {
                what: "masked position",
                index: *bad,
                limit: len,
            });
        }
        let mut x = Matrix::zeros(len + 1, self.spec.d_model);
        for (t, tok) in toks.iter().enumerate() {
            if !masked.contains(&t) {
                x.row_mut(t).copy_from_slice(self.embedding.row(*tok));
            }
        }
        x.row_mut(len)
            .copy_from_slice(self.embedding.row(self.spec.vocab));
        Ok(x)
    }

    /// Ground-truth relevance: 1 at positions that determine the label.
    pub fn informative(&self, i: usize) -> Vec<f64> {
        let toks = &self.tokens[i];
        match self.spec.rule {
            TaskRule::Majority => toks
                .iter()
                .map(|t| f64::from(u8::from(*t == self.labels[i])))
                .collect(),
            TaskRule::FirstMarkerMatch => (0..toks.len())
                .map(|t| f64::from(u8::from(t == 0 || t + 1 == toks.len())))
                .collect(),
        }
    }
}

fn majority(tokens: &[usize], vocab: usize) -> Option<usize> {
    let mut counts = vec![0usize; vocab];
    tokens.iter().for_each(|t| counts[*t] += 1);
    let best = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, c)| **c == best);
    let (first, _) = winners.next()?;
    winners.next().is_none().then_some(first)
}

/// Deterministic dataset: embeddings from stream 0 of the seed, sample `i`
/// from stream `i + 1`. Labels are drawn uniformly first, then a sequence
/// with that label.
pub fn gen_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut erng = root.split(0);
    let embedding = Matrix::from_fn(spec.vocab + 1, spec.d_model, |_, _| erng.normal(1.0));
    let (v, len) = (spec.vocab, spec.seq_len);
    let mut tokens = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let mut rng = root.split(i as u64 + 1);
        let label = rng.below(spec.classes());
        let seq = match spec.rule {
            TaskRule::Majority => loop {
                let s: Vec<usize> = (0..len).map(|_| rng.below(v)).collect();
                if majority(&s, v) == Some(label) {
                    break s;
                }
            },
            TaskRule::FirstMarkerMatch => {
                let mut s: Vec<usize> = (0..len).map(|_| rng.below(v)).collect();
                s[len - 1] = if label == 1 {
                    s[0]
                } else {
                    (s[0] + 1 + rng.below(v - 1)) % v
                };
                s
            }
        };
        tokens.push(seq);
        labels.push(label);
    }
    Ok(Dataset {
        spec: spec.clone(),
        tokens,
        labels,
        embedding,
    })
}
