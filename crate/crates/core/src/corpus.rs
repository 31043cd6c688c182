//! Relation examples, the seeded synthetic corpus, and JSONL I/O.
//!
//! The generator gives each class a block of argument tokens and a small set
//! of connectives. Argument tokens carry a weak, noisy class signal while the
//! connective is strongly predictive, so a connective-aware model has a large
//! head start over one that only reads the arguments.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationExample {
    pub arg1: String,
    pub arg2: String,
    /// Empty when no connective is available.
    pub connective: String,
    pub labels: Vec<String>,
}

const RELATION_NAMES: [&str; 11] = [
    "Cause",
    "Contrast",
    "Conjunction",
    "Instantiation",
    "Restatement",
    "Asynchronous",
    "Concession",
    "Alternative",
    "List",
    "Synchrony",
    "Pragmatic",
];

pub fn class_name(c: usize) -> String {
    RELATION_NAMES
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("Class{c}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_classes: usize,
    pub vocab_size: usize,
    /// Argument tokens owned by each class; blocks partition the first
    /// `n_classes * block_size` vocabulary entries.
    pub block_size: usize,
    pub tokens_per_arg: usize,
    pub connectives_per_class: usize,
    /// Probability that an argument token comes from the class block.
    pub arg_signal: f64,
    /// Probability that the connective is swapped for one of a random class.
    pub connective_noise: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_classes: 6,
            vocab_size: 400,
            block_size: 10,
            tokens_per_arg: 12,
            connectives_per_class: 2,
            arg_signal: 0.08,
            connective_noise: 0.06,
            n_train: 10_000,
            n_dev: 2_000,
            n_test: 2_000,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.block_size == 0 || self.n_classes * self.block_size > self.vocab_size {
            return Err(Error::invalid(format!(
                "{} classes with blocks of {} tokens do not fit a vocabulary of {}",
                self.n_classes, self.block_size, self.vocab_size
            )));
        }
        if self.tokens_per_arg == 0 || self.connectives_per_class == 0 {
            return Err(Error::invalid(
                "tokens_per_arg and connectives_per_class must be positive",
            ));
        }
        for (name, p) in [
            ("arg_signal", self.arg_signal),
            ("connective_noise", self.connective_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.n_train == 0 {
            return Err(Error::invalid("n_train must be positive"));
        }
        Ok(())
    }

    pub fn word(&self, id: usize) -> String {
        format!("w{id:04}")
    }

    pub fn connective(&self, class: usize, j: usize) -> String {
        format!("conn{class}_{j}")
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.n_classes).map(class_name).collect()
    }

    fn sample_arg_ids<R: Rng>(&self, class: usize, rng: &mut R) -> Vec<usize> {
        let block = self.block_size;
        (0..self.tokens_per_arg)
            .map(|_| {
                if rng.gen::<f64>() < self.arg_signal {
                    class * block + rng.gen_range(0..block)
                } else {
                    rng.gen_range(0..self.vocab_size)
                }
            })
            .collect()
    }

    fn sample_connective_class<R: Rng>(&self, class: usize, rng: &mut R) -> usize {
        if rng.gen::<f64>() < self.connective_noise {
            rng.gen_range(0..self.n_classes)
        } else {
            class
        }
    }

    fn block_of(&self, id: usize) -> Option<usize> {
        let c = id / self.block_size;
        (c < self.n_classes).then_some(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<RelationExample>,
    pub dev: Vec<RelationExample>,
    pub test: Vec<RelationExample>,
}

/// Draws train/dev/test splits. No `(arg1, arg2)` pair appears twice.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut draw = |n: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let y = rng.gen_range(0..spec.n_classes);
            let a1 = spec.sample_arg_ids(y, rng);
            let a2 = spec.sample_arg_ids(y, rng);
            let cc = spec.sample_connective_class(y, rng);
            let cj = rng.gen_range(0..spec.connectives_per_class);
            let words = |ids: &[usize]| {
                ids.iter()
                    .map(|&i| spec.word(i))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let ex = RelationExample {
                arg1: words(&a1),
                arg2: words(&a2),
                connective: spec.connective(cc, cj),
                labels: vec![class_name(y)],
            };
            if seen.insert((ex.arg1.clone(), ex.arg2.clone())) {
                out.push(ex);
            }
        }
        out
    };
    let train = draw(spec.n_train, &mut rng);
    let dev = draw(spec.n_dev, &mut rng);
    let test = draw(spec.n_test, &mut rng);
    Ok(Corpus { train, dev, test })
}

/// Expected accuracy of a rule that predicts among tied maxima uniformly.
fn tie_credit(scores: &[f64], y: usize) -> f64 {
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ties = scores.iter().filter(|&&s| s == best).count();
    if scores[y] == best {
        1.0 / ties as f64
    } else {
        0.0
    }
}

fn log_token_ratio(spec: &CorpusSpec) -> f64 {
    // in-block vs. out-of-block likelihood of a token; +inf when the
    // background never emits tokens
    let bg = (1.0 - spec.arg_signal) / spec.vocab_size as f64;
    let own = spec.arg_signal / spec.block_size as f64 + bg;
    (own / bg).ln()
}

/// Monte-Carlo estimate of the Bayes-optimal accuracy from arguments alone.
///
/// Under the generator every in-block token multiplies its class's
/// likelihood by the same ratio, so the posterior ranks classes by their
/// block counts.
pub fn bayes_accuracy_args_only(spec: &CorpusSpec, samples: usize, seed: u64) -> Result<f64> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut credit = 0.0;
    let mut counts = vec![0.0; spec.n_classes];
    for _ in 0..samples {
        let y = rng.gen_range(0..spec.n_classes);
        counts.iter_mut().for_each(|c| *c = 0.0);
        for _ in 0..2 {
            for id in spec.sample_arg_ids(y, &mut rng) {
                if let Some(c) = spec.block_of(id) {
                    counts[c] += 1.0;
                }
            }
        }
        credit += tie_credit(&counts, y);
    }
    Ok(credit / samples as f64)
}

/// Monte-Carlo estimate of the Bayes-optimal accuracy given both arguments
/// and the connective.
pub fn bayes_accuracy_with_connective(
    spec: &CorpusSpec,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    spec.validate()?;
    let k = spec.n_classes as f64;
    let q = spec.connective_noise;
    // P(conn class = c | y): 1 - q + q/K when c == y, q/K otherwise
    let log_match = (1.0 - q + q / k).ln();
    let log_miss = (q / k).ln();
    let ratio = log_token_ratio(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut credit = 0.0;
    let mut scores = vec![0.0; spec.n_classes];
    for _ in 0..samples {
        let y = rng.gen_range(0..spec.n_classes);
        let mut counts = vec![0usize; spec.n_classes];
        for _ in 0..2 {
            for id in spec.sample_arg_ids(y, &mut rng) {
                if let Some(c) = spec.block_of(id) {
                    counts[c] += 1;
                }
            }
        }
        let cc = spec.sample_connective_class(y, &mut rng);
        for c in 0..spec.n_classes {
            let conn = if c == cc { log_match } else { log_miss };
            let args = if counts[c] == 0 {
                0.0
            } else {
                counts[c] as f64 * ratio
            };
            scores[c] = conn + args;
        }
        credit += tie_credit(&scores, y);
    }
    Ok(credit / samples as f64)
}

fn parse_line(line: &str, lineno: usize) -> Result<RelationExample> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: lineno,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        line: lineno,
        message: "expected a JSON object".into(),
    })?;
    let string_field = |name: &str| -> Result<String> {
        obj.get(name)
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .ok_or_else(|| Error::Schema {
                line: lineno,
                field: name.into(),
            })
    };
    let arg1 = string_field("arg1")?;
    let arg2 = string_field("arg2")?;
    let connective = match obj.get("connective") {
        None | Some(serde_json::Value::Null) => String::new(),
        Some(v) => v
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| Error::Schema {
                line: lineno,
                field: "connective".into(),
            })?,
    };
    let labels = obj
        .get("labels")
        .and_then(|v| v.as_array())
        .and_then(|arr| {
            arr.iter()
                .map(|l| l.as_str().map(str::to_owned))
                .collect::<Option<Vec<_>>>()
        })
        .filter(|l| !l.is_empty())
        .ok_or_else(|| Error::Schema {
            line: lineno,
            field: "labels".into(),
        })?;
    if arg1.trim().is_empty() {
        return Err(Error::Schema {
            line: lineno,
            field: "arg1".into(),
        });
    }
    if arg2.trim().is_empty() {
        return Err(Error::Schema {
            line: lineno,
            field: "arg2".into(),
        });
    }
    Ok(RelationExample {
        arg1,
        arg2,
        connective,
        labels,
    })
}

/// Parses one example per non-blank line.
pub fn parse_jsonl(text: &str) -> Result<Vec<RelationExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<RelationExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn to_jsonl(examples: &[RelationExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex).expect("example serializes"));
        s.push('\n');
    }
    s
}

pub fn save_jsonl(examples: &[RelationExample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(examples).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
