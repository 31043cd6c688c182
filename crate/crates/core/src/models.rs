//! Relation encoders and the shared relation classifier.
//!
//! Both encoders embed each argument, run one tied filter bank per filter
//! set over each argument, join the two activation maps along time and pool
//! over the joined axis. The implicit encoder max-pools; the
//! connective-augmented encoder reads `connective + arg2` as its second
//! argument and averages the top-k activations.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;
use crate::text::EncodedExample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterSet {
    pub width: usize,
    pub count: usize,
}

/// Filter sets written as `WIDTHxCOUNT` items joined by commas, e.g. `2x64,4x64`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterSpec(pub Vec<FilterSet>);

impl FilterSpec {
    pub fn feature_dim(&self) -> usize {
        self.0.iter().map(|s| s.count).sum()
    }

    pub fn max_width(&self) -> usize {
        self.0.iter().map(|s| s.width).max().unwrap_or(0)
    }
}

impl Default for FilterSpec {
    fn default() -> Self {
        "2x64,4x64,8x64".parse().expect("default filter spec")
    }
}

impl FromStr for FilterSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let sets = s
            .split(',')
            .map(|item| {
                let (w, c) = item.trim().split_once('x').ok_or_else(|| {
                    Error::Config(format!("filter set `{item}` is not WIDTHxCOUNT"))
                })?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&n| n > 0)
                        .ok_or_else(|| Error::Config(format!("bad filter set `{item}`")))
                };
                Ok(FilterSet {
                    width: parse(w)?,
                    count: parse(c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if sets.is_empty() {
            return Err(Error::Config("empty filter spec".into()));
        }
        Ok(FilterSpec(sets))
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<String> = self
            .0
            .iter()
            .map(|s| format!("{}x{}", s.width, s.count))
            .collect();
        f.write_str(&items.join(","))
    }
}

impl Serialize for FilterSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FilterSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Max,
    AvgKMax(usize),
}

#[derive(Clone, Debug)]
pub struct FilterBank {
    pub width: usize,
    pub filters: ParamId,
    pub bias: ParamId,
}

/// One relation encoder. Parameters live in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub embedding: ParamId,
    pub banks: Vec<FilterBank>,
    pub pooling: Pooling,
}

impl Encoder {
    /// Registers `{prefix}.conv{i}.filters` / `.bias` for every filter set.
    /// `embedding` must already be registered.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        embedding: ParamId,
        spec: &FilterSpec,
        pooling: Pooling,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = match store.get(embedding).shape() {
            [_, d] => *d,
            s => return Err(Error::invalid(format!("embedding must be [V x D], got {s:?}"))),
        };
        let mut banks = Vec::with_capacity(spec.0.len());
        for (i, set) in spec.0.iter().enumerate() {
            let filters = store.insert(
                format!("{prefix}.conv{i}.filters"),
                Tensor::glorot(
                    &[set.count, set.width, dim],
                    set.width * dim,
                    set.count,
                    rng,
                ),
            )?;
            let bias = store.insert(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[set.count]))?;
            banks.push(FilterBank {
                width: set.width,
                filters,
                bias,
            });
        }
        Ok(Encoder {
            embedding,
            banks,
            pooling,
        })
    }

    pub fn feature_dim(&self, store: &ParamStore) -> usize {
        self.banks
            .iter()
            .map(|b| store.get(b.bias).len())
            .sum()
    }

    /// Parameters including the embedding table.
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.embedding];
        for b in &self.banks {
            out.push(b.filters);
            out.push(b.bias);
        }
        out
    }

    /// Encodes an argument pair. The same filter tensors are applied to both
    /// arguments.
    pub fn encode_pair(&self, tape: &mut Tape, arg1: &[usize], arg2: &[usize]) -> Result<Var> {
        let table = tape.param(self.embedding);
        let e1 = tape.gather(table, arg1)?;
        let e2 = tape.gather(table, arg2)?;
        let mut pooled = Vec::with_capacity(self.banks.len());
        for bank in &self.banks {
            let k = tape.param(bank.filters);
            let b = tape.param(bank.bias);
            let c1 = tape.conv1d(e1, k, b)?;
            let c1 = tape.tanh(c1);
            let c2 = tape.conv1d(e2, k, b)?;
            let c2 = tape.tanh(c2);
            let joined = tape.concat_rows(&[c1, c2])?;
            pooled.push(match self.pooling {
                Pooling::Max => tape.max_pool(joined)?,
                Pooling::AvgKMax(k) => tape.avg_kmax_pool(joined, k)?,
            });
        }
        tape.concat(&pooled)
    }
}

/// `H_I`: the implicit encoder over the raw argument pair.
pub fn icnn_features(tape: &mut Tape, encoder: &Encoder, ex: &EncodedExample) -> Result<Var> {
    if encoder.pooling != Pooling::Max {
        return Err(Error::invalid("icnn_features needs an encoder with max pooling"));
    }
    encoder.encode_pair(tape, &ex.arg1_ids, &ex.arg2_ids)
}

/// `H_A`: the augmented encoder with the connective prepended to arg2.
pub fn acnn_features(tape: &mut Tape, encoder: &Encoder, ex: &EncodedExample) -> Result<Var> {
    if !matches!(encoder.pooling, Pooling::AvgKMax(_)) {
        return Err(Error::invalid(
            "acnn_features needs an encoder with average k-max pooling",
        ));
    }
    encoder.encode_pair(tape, &ex.arg1_ids, &ex.augmented_arg2())
}

/// Word-vector baseline features: per-argument sums of embeddings, joined.
pub fn summed_embedding_features(
    tape: &mut Tape,
    embedding: ParamId,
    ex: &EncodedExample,
) -> Result<Var> {
    let table = tape.param(embedding);
    let e1 = tape.gather(table, &ex.arg1_ids)?;
    let e2 = tape.gather(table, &ex.arg2_ids)?;
    let s1 = tape.sum_rows(e1)?;
    let s2 = tape.sum_rows(e2)?;
    tape.concat(&[s1, s2])
}

/// One tanh hidden layer followed by a softmax output layer.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Classifier {
            hidden_w: store.insert(
                format!("{prefix}.hidden.weight"),
                Tensor::glorot(&[hidden, input_dim], input_dim, hidden, rng),
            )?,
            hidden_b: store.insert(format!("{prefix}.hidden.bias"), Tensor::zeros(&[hidden]))?,
            out_w: store.insert(
                format!("{prefix}.out.weight"),
                Tensor::glorot(&[n_classes, hidden], hidden, n_classes, rng),
            )?,
            out_b: store.insert(format!("{prefix}.out.bias"), Tensor::zeros(&[n_classes]))?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.hidden_w, self.hidden_b, self.out_w, self.out_b]
    }

    pub fn logits(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        let (hw, hb) = (tape.param(self.hidden_w), tape.param(self.hidden_b));
        let h = tape.dense(feature, hw, hb, Activation::Tanh)?;
        let (ow, ob) = (tape.param(self.out_w), tape.param(self.out_b));
        tape.dense(h, ow, ob, Activation::Identity)
    }

    /// Predictive distribution `C(H)`.
    pub fn classify(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        let z = self.logits(tape, feature)?;
        tape.softmax(z)
    }

    /// Cross-entropy `J(C(H), gold)`.
    pub fn xent(&self, tape: &mut Tape, feature: Var, gold: usize) -> Result<Var> {
        let z = self.logits(tape, feature)?;
        tape.softmax_xent(z, gold)
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
