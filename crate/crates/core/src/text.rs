//! Vocabulary, encoding to fixed-length id sequences, and embedding tables.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::corpus::RelationExample;
use crate::error::{Error, Result};
use crate::tape::PAD_ID;
use crate::tensor::Tensor;

pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_LEN: usize = 80;
pub const DEFAULT_EMBED_DIM: usize = 300;

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Every token seen at least `min_count` times across arguments and
    /// connectives. Ids follow descending frequency, then lexicographic order.
    pub fn build<'a, I>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a RelationExample>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut n_examples = 0;
        for ex in corpus {
            n_examples += 1;
            for field in [&ex.arg1, &ex.arg2, &ex.connective] {
                for tok in tokenize(field) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if n_examples == 0 {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        // BTreeMap order is lexicographic; the stable sort keeps it within ties
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        Ok(Self::from_tokens(
            ranked.into_iter().map(|(t, _)| t).collect::<Vec<_>>(),
        ))
    }

    /// Rebuilds a vocabulary from its non-reserved tokens in id order.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens);
        let ids = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens: all, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn ids_of(&self, text: &str) -> Vec<usize> {
        tokenize(text).map(|t| self.id(&t)).collect()
    }
}

/// Relation label names mapped to class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    /// Sorted distinct label names found in `corpus`.
    pub fn from_examples<'a, I>(corpus: I) -> Self
    where
        I: IntoIterator<Item = &'a RelationExample>,
    {
        let mut names: Vec<String> = corpus
            .into_iter()
            .flat_map(|ex| ex.labels.iter().cloned())
            .collect();
        names.sort();
        names.dedup();
        LabelSet { names }
    }

    pub fn new(names: Vec<String>) -> Self {
        LabelSet { names }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub arg1_ids: Vec<usize>,
    pub arg2_ids: Vec<usize>,
    pub connective_ids: Vec<usize>,
    pub gold_labels: Vec<usize>,
}

fn pad_to(mut ids: Vec<usize>, max_len: usize) -> Vec<usize> {
    ids.truncate(max_len);
    ids.resize(max_len, PAD_ID);
    ids
}

impl EncodedExample {
    pub fn max_len(&self) -> usize {
        self.arg1_ids.len()
    }

    /// Second-argument input for the connective-augmented encoder: the
    /// connective tokens followed by the argument, truncated so the
    /// connective is never cut.
    pub fn augmented_arg2(&self) -> Vec<usize> {
        let real = self.arg2_ids.iter().take_while(|&&i| i != PAD_ID).copied();
        let joined: Vec<usize> = self.connective_ids.iter().copied().chain(real).collect();
        pad_to(joined, self.max_len())
    }

    /// Copy without the connective, as seen at test time on implicit data.
    pub fn without_connective(&self) -> Self {
        EncodedExample {
            connective_ids: Vec::new(),
            ..self.clone()
        }
    }
}

/// Lowercases, splits on whitespace, maps unknown tokens to UNK and pads or
/// truncates both arguments to `max_len`. Labels outside `labels` are
/// dropped; the connective is kept as a separate sequence.
pub fn encode(
    example: &RelationExample,
    vocab: &Vocabulary,
    labels: &LabelSet,
    max_len: usize,
) -> EncodedExample {
    let mut gold = Vec::new();
    for idx in example.labels.iter().filter_map(|l| labels.index(l)) {
        if !gold.contains(&idx) {
            gold.push(idx);
        }
    }
    EncodedExample {
        arg1_ids: pad_to(vocab.ids_of(&example.arg1), max_len.max(1)),
        arg2_ids: pad_to(vocab.ids_of(&example.arg2), max_len.max(1)),
        connective_ids: vocab.ids_of(&example.connective),
        gold_labels: gold,
    }
}

/// Randomly initialized embedding table with an all-zero padding row.
pub fn init_embeddings<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::glorot(&[vocab_size, dim], vocab_size, dim, rng);
    t.values_mut()[..dim].iter_mut().for_each(|v| *v = 0.0);
    t
}

/// Overwrites rows of `table` with vectors from a plain-text file holding
/// `token v1 .. v_d` per line. Returns the number of rows replaced.
pub fn load_vectors(path: impl AsRef<Path>, vocab: &Vocabulary, table: &mut Tensor) -> Result<usize> {
    let path = path.as_ref();
    let dim = table.shape()[1];
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut replaced = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        if values.len() != dim {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let id = vocab.id(&token.to_lowercase());
        if id == PAD_ID || id == UNK_ID {
            continue;
        }
        table.values_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
        replaced += 1;
    }
    Ok(replaced)
}
