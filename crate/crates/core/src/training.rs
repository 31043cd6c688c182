//! Pretraining, the alternating adversarial game, and the baseline modes.
//!
//! Randomness is split into independent named streams (one per component
//! initializer and one per minibatch sampler). Runs that differ only in
//! components a mode adds therefore share the same implicit-network
//! trajectory: `adversarial` with `lambda1 = 0` and `l2reg` with
//! `l2reg_weight = 0` both retrace `cnn_only` exactly.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Mode, TrainConfig};
use crate::corpus::RelationExample;
use crate::discriminator::{predicts_augmented, DenseParams, Discriminator};
use crate::error::{Error, Result};
use crate::eval::{multiclass_accuracy, MetricsRecord};
use crate::losses;
use crate::models::{
    acnn_features, argmax, icnn_features, summed_embedding_features, Classifier, Encoder, Pooling,
};
use crate::optim::AdaGradState;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;
use crate::text::{encode, init_embeddings, load_vectors, EncodedExample, LabelSet, Vocabulary};

/// Deterministic RNG for a named purpose under a run seed.
pub fn stream_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// One training instance: an example paired with one of its gold labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Instance {
    pub example: usize,
    pub label: usize,
}

/// Expands multi-label examples into one instance per gold label.
pub fn expand_instances(examples: &[EncodedExample]) -> Vec<Instance> {
    examples
        .iter()
        .enumerate()
        .flat_map(|(i, ex)| {
            ex.gold_labels.iter().map(move |&label| Instance {
                example: i,
                label,
            })
        })
        .collect()
}

/// The network that reads implicit inputs only.
#[derive(Clone, Debug)]
pub enum ImplicitNet {
    Cnn(Encoder),
    Ensemble([Encoder; 2]),
    WordVector { embedding: ParamId },
}

impl ImplicitNet {
    pub fn params(&self) -> Vec<ParamId> {
        match self {
            ImplicitNet::Cnn(e) => e.params(),
            ImplicitNet::Ensemble([a, b]) => a.params().into_iter().chain(b.params()).collect(),
            ImplicitNet::WordVector { embedding } => vec![*embedding],
        }
    }

    /// Feature vectors fed to the classifier, one per ensemble member.
    pub fn features(&self, tape: &mut Tape, ex: &EncodedExample) -> Result<Vec<Var>> {
        Ok(match self {
            ImplicitNet::Cnn(e) => vec![icnn_features(tape, e, ex)?],
            ImplicitNet::Ensemble([a, b]) => {
                vec![icnn_features(tape, a, ex)?, icnn_features(tape, b, ex)?]
            }
            ImplicitNet::WordVector { embedding } => {
                vec![summed_embedding_features(tape, *embedding, ex)?]
            }
        })
    }
}

/// Every network of one experiment plus its parameters and optimizer state.
#[derive(Clone, Debug)]
pub struct System {
    pub config: TrainConfig,
    pub n_classes: usize,
    pub store: ParamStore,
    pub implicit: ImplicitNet,
    pub augmented: Option<Encoder>,
    pub classifier: Classifier,
    pub discriminator: Option<Discriminator>,
    /// Multitask connective head and its label inventory.
    pub connective_head: Option<DenseParams>,
    pub connectives: Vec<String>,
    opt: AdaGradState,
}

/// Adds a copy of `init` as `{prefix}.embedding`.
fn embedding_param(store: &mut ParamStore, prefix: &str, init: &Tensor) -> Result<ParamId> {
    store.insert(format!("{prefix}.embedding"), init.clone())
}

impl System {
    /// Builds the networks `config.mode` needs. `initial_embeddings` is
    /// copied into every encoder's own embedding table.
    pub fn new(
        config: &TrainConfig,
        n_classes: usize,
        initial_embeddings: Tensor,
        connectives: Vec<String>,
    ) -> Result<Self> {
        config.validate()?;
        if n_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least two relation classes, got {n_classes}"
            )));
        }
        let seed = config.seed;
        let mut store = ParamStore::new();
        let feat_dim = config.filters.feature_dim();
        let implicit = match config.mode {
            Mode::WordVector => ImplicitNet::WordVector {
                embedding: embedding_param(&mut store, "wv", &initial_embeddings)?,
            },
            Mode::Ensemble => {
                let mut members = Vec::new();
                for name in ["icnn", "icnn_b"] {
                    let emb = embedding_param(&mut store, name, &initial_embeddings)?;
                    members.push(Encoder::new(
                        &mut store,
                        name,
                        emb,
                        &config.filters,
                        Pooling::Max,
                        &mut stream_rng(seed, &format!("init.{name}")),
                    )?);
                }
                let b = members.pop().unwrap();
                let a = members.pop().unwrap();
                ImplicitNet::Ensemble([a, b])
            }
            _ => {
                let emb = embedding_param(&mut store, "icnn", &initial_embeddings)?;
                ImplicitNet::Cnn(Encoder::new(
                    &mut store,
                    "icnn",
                    emb,
                    &config.filters,
                    Pooling::Max,
                    &mut stream_rng(seed, "init.icnn"),
                )?)
            }
        };
        let augmented = match config.mode {
            Mode::Adversarial | Mode::L2reg => {
                let emb = embedding_param(&mut store, "acnn", &initial_embeddings)?;
                Some(Encoder::new(
                    &mut store,
                    "acnn",
                    emb,
                    &config.filters,
                    Pooling::AvgKMax(config.k),
                    &mut stream_rng(seed, "init.icnn"),
                )?)
            }
            _ => None,
        };
        let clf_input = match config.mode {
            Mode::WordVector => 2 * initial_embeddings.shape()[1],
            _ => feat_dim,
        };
        let classifier = Classifier::new(
            &mut store,
            "clf",
            clf_input,
            config.hidden_dim,
            n_classes,
            &mut stream_rng(seed, "init.clf"),
        )?;
        let discriminator = match config.mode {
            Mode::Adversarial => Some(Discriminator::new(
                &mut store,
                "disc",
                feat_dim,
                config.disc_width,
                &mut stream_rng(seed, "init.disc"),
            )?),
            _ => None,
        };
        let connective_head = match config.mode {
            Mode::Multitask => {
                if connectives.len() < 2 {
                    return Err(Error::invalid(
                        "multitask mode needs at least two distinct connectives in the training data",
                    ));
                }
                let mut rng = stream_rng(seed, "init.head");
                let weight = store.insert(
                    "head.weight",
                    Tensor::glorot(&[connectives.len(), feat_dim], feat_dim, connectives.len(), &mut rng),
                )?;
                let bias = store.insert("head.bias", Tensor::zeros(&[connectives.len()]))?;
                Some(DenseParams { weight, bias })
            }
            _ => None,
        };
        Ok(System {
            config: config.clone(),
            n_classes,
            store,
            implicit,
            augmented,
            classifier,
            discriminator,
            connective_head,
            connectives,
            opt: AdaGradState::new(config.learning_rate),
        })
    }

    pub fn augmented_frozen(&self) -> bool {
        self.config.freeze_augmented || self.config.lambda2 == 0.0
    }

    /// Parameters updated by the implicit-side objective.
    pub fn relation_group(&self) -> Vec<ParamId> {
        let mut g = self.implicit.params();
        g.extend(self.classifier.params());
        if let Some(h) = &self.connective_head {
            g.extend([h.weight, h.bias]);
        }
        if self.config.mode == Mode::Adversarial && !self.augmented_frozen() {
            if let Some(a) = &self.augmented {
                g.extend(a.params());
            }
        }
        g
    }

    fn connective_index(&self, ex: &EncodedExample, vocab_ids: &HashMap<Vec<usize>, usize>) -> Option<usize> {
        vocab_ids.get(&ex.connective_ids).copied()
    }

    // ---- inference -------------------------------------------------------

    /// Class distribution from implicit inputs (ensemble members averaged).
    pub fn predict_implicit(&self, ex: &EncodedExample) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.store);
        let feats = self.implicit.features(&mut tape, ex)?;
        let mut avg = vec![0.0; self.n_classes];
        for &h in &feats {
            let p = self.classifier.classify(&mut tape, h)?;
            for (a, v) in avg.iter_mut().zip(tape.value(p)) {
                *a += v / feats.len() as f64;
            }
        }
        Ok(avg)
    }

    pub fn predict_augmented(&self, ex: &EncodedExample) -> Result<Option<Vec<f64>>> {
        let Some(enc) = &self.augmented else {
            return Ok(None);
        };
        let mut tape = Tape::with_params(&self.store);
        let h = acnn_features(&mut tape, enc, ex)?;
        let p = self.classifier.classify(&mut tape, h)?;
        Ok(Some(tape.value(p).to_vec()))
    }

    /// `H_I` (first ensemble member for ensembles).
    pub fn implicit_feature(&self, ex: &EncodedExample) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.store);
        let feats = self.implicit.features(&mut tape, ex)?;
        Ok(tape.value(feats[0]).to_vec())
    }

    pub fn augmented_feature(&self, ex: &EncodedExample) -> Result<Option<Vec<f64>>> {
        let Some(enc) = &self.augmented else {
            return Ok(None);
        };
        let mut tape = Tape::with_params(&self.store);
        let h = acnn_features(&mut tape, enc, ex)?;
        Ok(Some(tape.value(h).to_vec()))
    }

    fn classify_feature(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.store);
        let h = tape.constant(Tensor::vector(feature.to_vec()));
        let p = self.classifier.classify(&mut tape, h)?;
        Ok(tape.value(p).to_vec())
    }

    pub fn discriminate_feature(&self, feature: &[f64]) -> Result<Option<f64>> {
        let Some(d) = &self.discriminator else {
            return Ok(None);
        };
        let mut tape = Tape::with_params(&self.store);
        let h = tape.constant(Tensor::vector(feature.to_vec()));
        let p = d.discriminate(&mut tape, h)?;
        Ok(Some(tape.scalar(p)))
    }

    // ---- optimization steps ---------------------------------------------

    /// Drops every AdaGrad accumulator.
    pub fn restart_optimizer(&mut self) {
        self.opt = AdaGradState::new(self.config.learning_rate);
    }

    fn apply(&mut self, grads: &crate::params::Gradients, group: &[ParamId]) {
        self.store.accumulate(grads, group);
        self.opt.step(&mut self.store, group);
    }

    /// One descent step of the implicit-side objective on `batch`.
    ///
    /// The objective is the implicit classification loss plus whichever
    /// extra terms the mode adds. `aug_cache` holds fixed `H_A` per example
    /// when the augmented encoder is frozen.
    fn relation_step(
        &mut self,
        data: &[EncodedExample],
        batch: &[Instance],
        adv_weight: f64,
        aug_cache: Option<&[Vec<f64>]>,
        conn_index: &HashMap<Vec<usize>, usize>,
    ) -> Result<StepLosses> {
        let mode = self.config.mode;
        let lambda2 = if self.augmented_frozen() { 0.0 } else { self.config.lambda2 };
        let l2_weight = if mode == Mode::L2reg { self.config.l2reg_weight } else { 0.0 };
        let mt_weight = if mode == Mode::Multitask { self.config.multitask_weight } else { 0.0 };

        let (grads, losses) = {
            let mut tape = Tape::with_params(&self.store);
            let mut xents = Vec::with_capacity(batch.len());
            let mut h_first = Vec::with_capacity(batch.len());
            let mut aux = Vec::new();
            let mut aug_pairs = Vec::new();
            for inst in batch {
                let ex = &data[inst.example];
                let feats = self.implicit.features(&mut tape, ex)?;
                let mut member_losses = Vec::with_capacity(feats.len());
                for &h in &feats {
                    member_losses.push(self.classifier.xent(&mut tape, h, inst.label)?);
                }
                xents.push(if member_losses.len() == 1 {
                    member_losses[0]
                } else {
                    tape.mean(&member_losses)?
                });
                h_first.push(feats[0]);

                if mt_weight != 0.0 {
                    if let (Some(head), Some(ci)) =
                        (&self.connective_head, self.connective_index(ex, conn_index))
                    {
                        let z = head.apply(&mut tape, feats[0], Activation::Identity)?;
                        aux.push(tape.softmax_xent(z, ci)?);
                    }
                }
                if l2_weight != 0.0 {
                    let ha = match aug_cache {
                        Some(cache) => tape.constant(Tensor::vector(cache[inst.example].clone())),
                        None => {
                            let enc = self.augmented.as_ref().expect("l2reg has an augmented encoder");
                            acnn_features(&mut tape, enc, ex)?
                        }
                    };
                    aux.push(tape.sq_dist(feats[0], ha)?);
                }
                if lambda2 != 0.0 {
                    let enc = self.augmented.as_ref().expect("augmented encoder");
                    let ha = acnn_features(&mut tape, enc, ex)?;
                    aug_pairs.push((ha, inst.label));
                }
            }
            let l_ic = tape.mean(&xents)?;
            let mut losses = StepLosses {
                ic: tape.scalar(l_ic),
                ..StepLosses::default()
            };
            let l_i = if adv_weight != 0.0 {
                let d = self.discriminator.as_ref().expect("adversarial mode has a discriminator");
                let v = losses::loss_adversarial(&mut tape, d, &h_first)?;
                losses.adv = Some(tape.scalar(v));
                Some(v)
            } else {
                None
            };
            let l_a = if aug_pairs.is_empty() {
                None
            } else {
                let v = losses::loss_augmented(&mut tape, &self.classifier, &aug_pairs)?;
                losses.aug = Some(tape.scalar(v));
                Some(v)
            };
            let mut total = losses::loss_joint(&mut tape, l_ic, l_i, l_a, adv_weight, lambda2)?;
            if !aux.is_empty() {
                let w = if mt_weight != 0.0 { mt_weight } else { l2_weight };
                let s = tape.mean(&aux)?;
                let m = tape.scale(s, w);
                total = tape.add(total, m)?;
            }
            (tape.backward(total)?, losses)
        };
        let group = self.relation_group();
        self.apply(&grads, &group);
        Ok(losses)
    }

    /// One descent step of the augmented classification loss over the
    /// augmented encoder only; the shared classifier is held fixed.
    fn augmented_step(&mut self, data: &[EncodedExample], batch: &[Instance]) -> Result<f64> {
        let enc = self.augmented.clone().ok_or_else(|| Error::invalid("no augmented encoder"))?;
        let (grads, loss) = {
            let mut tape = Tape::with_params(&self.store);
            let mut pairs = Vec::with_capacity(batch.len());
            for inst in batch {
                pairs.push((acnn_features(&mut tape, &enc, &data[inst.example])?, inst.label));
            }
            let l = losses::loss_augmented(&mut tape, &self.classifier, &pairs)?;
            (tape.backward(l)?, tape.scalar(l))
        };
        self.apply(&grads, &enc.params());
        Ok(loss)
    }

    /// One ascent step of the discriminator objective over `θ_D` only.
    fn discriminator_step(
        &mut self,
        data: &[EncodedExample],
        batch: &[Instance],
        aug_cache: Option<&[Vec<f64>]>,
    ) -> Result<f64> {
        let disc = self.discriminator.clone().ok_or_else(|| Error::invalid("no discriminator"))?;
        let mut h_i = Vec::with_capacity(batch.len());
        let mut h_a = Vec::with_capacity(batch.len());
        for inst in batch {
            let ex = &data[inst.example];
            h_i.push(self.implicit_feature(ex)?);
            h_a.push(match aug_cache {
                Some(c) => c[inst.example].clone(),
                None => self.augmented_feature(ex)?.expect("augmented encoder"),
            });
        }
        let (grads, value) = {
            let mut tape = Tape::with_params(&self.store);
            let pairs: Vec<(Var, Var)> = h_a
                .into_iter()
                .zip(h_i)
                .map(|(a, i)| {
                    (
                        tape.constant(Tensor::vector(a)),
                        tape.constant(Tensor::vector(i)),
                    )
                })
                .collect();
            let l_d = losses::loss_discriminator(&mut tape, &disc, &pairs)?;
            let value = tape.scalar(l_d);
            let neg = tape.scale(l_d, -1.0);
            (tape.backward(neg)?, value)
        };
        self.apply(&grads, &disc.params());
        Ok(value)
    }

    // ---- evaluation ------------------------------------------------------

    /// Multi-gold accuracy of the implicit network.
    pub fn implicit_accuracy(&self, data: &[EncodedExample]) -> Result<f64> {
        let preds = data
            .iter()
            .map(|ex| self.predict_implicit(ex).map(|p| argmax(&p)))
            .collect::<Result<Vec<_>>>()?;
        let golds: Vec<Vec<usize>> = data.iter().map(|e| e.gold_labels.clone()).collect();
        multiclass_accuracy(&preds, &golds)
    }

    fn augmented_features_of(&self, data: &[EncodedExample]) -> Result<Option<Vec<Vec<f64>>>> {
        if self.augmented.is_none() {
            return Ok(None);
        }
        data.iter()
            .map(|ex| self.augmented_feature(ex).map(|f| f.expect("augmented encoder")))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Accuracies on one split: implicit, augmented, and the discriminator's
    /// balanced accuracy over `(H_A, H_I)` of every example.
    fn split_metrics(
        &self,
        data: &[EncodedExample],
        with_disc: bool,
        aug_cache: Option<&[Vec<f64>]>,
    ) -> Result<SplitMetrics> {
        if data.is_empty() {
            return Ok(SplitMetrics::default());
        }
        let golds: Vec<Vec<usize>> = data.iter().map(|e| e.gold_labels.clone()).collect();
        let mut preds_i = Vec::with_capacity(data.len());
        let mut feats_i = Vec::with_capacity(data.len());
        let single = matches!(self.implicit, ImplicitNet::Cnn(_));
        for ex in data {
            if with_disc && single {
                let h = self.implicit_feature(ex)?;
                preds_i.push(argmax(&self.classify_feature(&h)?));
                feats_i.push(h);
            } else {
                preds_i.push(argmax(&self.predict_implicit(ex)?));
                if with_disc {
                    feats_i.push(self.implicit_feature(ex)?);
                }
            }
        }
        let mut out = SplitMetrics {
            acc_implicit: Some(multiclass_accuracy(&preds_i, &golds)?),
            ..SplitMetrics::default()
        };
        let computed;
        let feats_a = match aug_cache {
            Some(c) => Some(c),
            None => {
                computed = self.augmented_features_of(data)?;
                computed.as_deref()
            }
        };
        if let Some(fa) = feats_a {
            let preds_a = fa
                .iter()
                .map(|f| self.classify_feature(f).map(|p| argmax(&p)))
                .collect::<Result<Vec<_>>>()?;
            out.acc_augmented = Some(multiclass_accuracy(&preds_a, &golds)?);
            if with_disc && self.discriminator.is_some() {
                let mut correct = 0usize;
                for (a, i) in fa.iter().zip(&feats_i) {
                    let pa = self.discriminate_feature(a)?.unwrap();
                    let pi = self.discriminate_feature(i)?.unwrap();
                    correct += predicts_augmented(pa) as usize;
                    correct += (!predicts_augmented(pi)) as usize;
                }
                out.acc_disc = Some(correct as f64 / (2 * data.len()) as f64);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct StepLosses {
    ic: f64,
    adv: Option<f64>,
    aug: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
struct SplitMetrics {
    acc_implicit: Option<f64>,
    acc_augmented: Option<f64>,
    acc_disc: Option<f64>,
}

/// Encoded splits sharing one vocabulary and label inventory.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub labels: LabelSet,
    pub train: Vec<EncodedExample>,
    pub dev: Vec<EncodedExample>,
    pub test: Vec<EncodedExample>,
    /// Distinct non-empty training connectives, sorted.
    pub connectives: Vec<String>,
}

impl PreparedData {
    /// Builds the vocabulary and label inventory from `train`.
    pub fn new(
        train: &[RelationExample],
        dev: &[RelationExample],
        test: &[RelationExample],
        config: &TrainConfig,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let vocab = Vocabulary::build(train, config.min_count)?;
        let labels = LabelSet::from_examples(train);
        Self::with_vocab(vocab, labels, train, dev, test, config)
    }

    pub fn with_vocab(
        vocab: Vocabulary,
        labels: LabelSet,
        train: &[RelationExample],
        dev: &[RelationExample],
        test: &[RelationExample],
        config: &TrainConfig,
    ) -> Result<Self> {
        let enc = |xs: &[RelationExample]| {
            xs.iter()
                .map(|e| encode(e, &vocab, &labels, config.max_len))
                .collect::<Vec<_>>()
        };
        let mut connectives: Vec<String> = train
            .iter()
            .map(|e| e.connective.trim().to_lowercase())
            .filter(|c| !c.is_empty())
            .collect();
        connectives.sort();
        connectives.dedup();
        Ok(PreparedData {
            train: enc(train),
            dev: enc(dev),
            test: enc(test),
            vocab,
            labels,
            connectives,
        })
    }

    pub fn initial_embeddings(&self, config: &TrainConfig) -> Result<Tensor> {
        let mut rng = stream_rng(config.seed, "init.embedding");
        let mut table = init_embeddings(self.vocab.len(), config.embed_dim, &mut rng);
        if let Some(path) = &config.embeddings_path {
            load_vectors(path, &self.vocab, &mut table)?;
        }
        Ok(table)
    }
}

/// Result of a full run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub system: System,
    pub records: Vec<MetricsRecord>,
    /// Parameters at the end of pretraining (modes with a pretraining stage).
    pub pretrained: Option<ParamStore>,
}

/// Drives one experiment through its epochs.
pub struct Trainer<'d> {
    pub system: System,
    data: &'d PreparedData,
    instances: Vec<Instance>,
    conn_index: HashMap<Vec<usize>, usize>,
    relation_rng: ChaCha8Rng,
    augmented_rng: ChaCha8Rng,
    disc_rng: ChaCha8Rng,
    aug_cache: Option<Vec<Vec<f64>>>,
    dev_aug_cache: Option<Vec<Vec<f64>>>,
    test_aug_cache: Option<Vec<Vec<f64>>>,
    pub records: Vec<MetricsRecord>,
    epoch: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(config: &TrainConfig, data: &'d PreparedData) -> Result<Self> {
        let system = System::new(
            config,
            data.labels.len(),
            data.initial_embeddings(config)?,
            data.connectives.clone(),
        )?;
        Self::with_system(system, data)
    }

    pub fn with_system(system: System, data: &'d PreparedData) -> Result<Self> {
        let instances = expand_instances(&data.train);
        if instances.is_empty() {
            return Err(Error::invalid("training set has no labelled instances"));
        }
        let conn_index = data
            .connectives
            .iter()
            .enumerate()
            .map(|(i, c)| (data.vocab.ids_of(c), i))
            .collect();
        let seed = system.config.seed;
        Ok(Trainer {
            system,
            data,
            instances,
            conn_index,
            relation_rng: stream_rng(seed, "sample.relation"),
            augmented_rng: stream_rng(seed, "sample.augmented"),
            disc_rng: stream_rng(seed, "sample.disc"),
            aug_cache: None,
            dev_aug_cache: None,
            test_aug_cache: None,
            records: Vec::new(),
            epoch: 0,
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    fn shuffled(&self, rng: &mut ChaCha8Rng) -> Vec<Instance> {
        let mut order = self.instances.clone();
        order.shuffle(rng);
        order
    }

    /// One pretraining epoch: a pass of the implicit classification loss
    /// over `{θ_I, θ_C}`, then (when present) a pass of the augmented loss
    /// over `θ_A`.
    pub fn pretrain_epoch(&mut self) -> Result<&MetricsRecord> {
        let bs = self.system.config.batch_size;
        let order = self.shuffled(&mut self.relation_rng.clone());
        self.relation_rng = advance(&self.relation_rng, &self.instances);
        let mut ic = Vec::new();
        for batch in order.chunks(bs) {
            ic.push(
                self.system
                    .relation_step(&self.data.train, batch, 0.0, None, &self.conn_index)?
                    .ic,
            );
        }
        let mut la = Vec::new();
        if self.system.augmented.is_some() {
            let order = self.shuffled(&mut self.augmented_rng.clone());
            self.augmented_rng = advance(&self.augmented_rng, &self.instances);
            for batch in order.chunks(bs) {
                la.push(self.system.augmented_step(&self.data.train, batch)?);
            }
        }
        self.epoch += 1;
        let mut rec = MetricsRecord::new(self.epoch);
        rec.loss_ic = mean(&ic);
        rec.loss_a = mean(&la);
        self.fill_eval(&mut rec, false)?;
        self.records.push(rec);
        Ok(self.records.last().unwrap())
    }

    /// Freezes the augmented side: caches `H_A` for every split.
    fn ensure_aug_cache(&mut self) -> Result<()> {
        if self.aug_cache.is_some() || !self.system.augmented_frozen() {
            return Ok(());
        }
        if self.system.augmented.is_none() {
            return Ok(());
        }
        self.aug_cache = self.system.augmented_features_of(&self.data.train)?;
        self.dev_aug_cache = self.system.augmented_features_of(&self.data.dev)?;
        self.test_aug_cache = self.system.augmented_features_of(&self.data.test)?;
        Ok(())
    }

    /// One epoch of the alternating game: per iteration a discriminator
    /// ascent step on one minibatch, then a relation-network descent step
    /// on a fresh one.
    pub fn adversarial_epoch(&mut self) -> Result<&MetricsRecord> {
        if self.system.discriminator.is_none() {
            return Err(Error::invalid("adversarial epochs need a discriminator"));
        }
        self.ensure_aug_cache()?;
        let bs = self.system.config.batch_size;
        let lambda1 = self.system.config.lambda1;
        let rel_order = self.shuffled(&mut self.relation_rng.clone());
        self.relation_rng = advance(&self.relation_rng, &self.instances);
        let disc_order = self.shuffled(&mut self.disc_rng.clone());
        self.disc_rng = advance(&self.disc_rng, &self.instances);
        let (mut ld, mut ic, mut li, mut la) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (rb, db) in rel_order.chunks(bs).zip(disc_order.chunks(bs)) {
            ld.push(
                self.system
                    .discriminator_step(&self.data.train, db, self.aug_cache.as_deref())?,
            );
            let s = self.system.relation_step(
                &self.data.train,
                rb,
                lambda1,
                self.aug_cache.as_deref(),
                &self.conn_index,
            )?;
            ic.push(s.ic);
            li.extend(s.adv);
            la.extend(s.aug);
        }
        self.epoch += 1;
        let mut rec = MetricsRecord::new(self.epoch);
        rec.loss_ic = mean(&ic);
        rec.loss_i = mean(&li);
        rec.loss_d = mean(&ld);
        rec.loss_a = mean(&la);
        self.fill_eval(&mut rec, true)?;
        self.records.push(rec);
        Ok(self.records.last().unwrap())
    }

    /// A single discriminator ascent step on `batch`. Returns the objective
    /// before the step.
    pub fn discriminator_step(&mut self, batch: &[Instance]) -> Result<f64> {
        self.ensure_aug_cache()?;
        self.system
            .discriminator_step(&self.data.train, batch, self.aug_cache.as_deref())
    }

    /// A single descent step of the joint relation objective on `batch`.
    /// Returns the implicit classification loss before the step.
    pub fn joint_step(&mut self, batch: &[Instance]) -> Result<f64> {
        self.ensure_aug_cache()?;
        let lambda1 = self.system.config.lambda1;
        let s = self.system.relation_step(
            &self.data.train,
            batch,
            lambda1,
            self.aug_cache.as_deref(),
            &self.conn_index,
        )?;
        Ok(s.ic)
    }

    /// One epoch of a baseline objective (no discriminator).
    pub fn baseline_epoch(&mut self) -> Result<&MetricsRecord> {
        if self.system.config.mode == Mode::L2reg {
            self.ensure_aug_cache()?;
        }
        let bs = self.system.config.batch_size;
        let order = self.shuffled(&mut self.relation_rng.clone());
        self.relation_rng = advance(&self.relation_rng, &self.instances);
        let mut ic = Vec::new();
        for batch in order.chunks(bs) {
            ic.push(
                self.system
                    .relation_step(
                        &self.data.train,
                        batch,
                        0.0,
                        self.aug_cache.as_deref(),
                        &self.conn_index,
                    )?
                    .ic,
            );
        }
        self.epoch += 1;
        let mut rec = MetricsRecord::new(self.epoch);
        rec.loss_ic = mean(&ic);
        self.fill_eval(&mut rec, false)?;
        self.records.push(rec);
        Ok(self.records.last().unwrap())
    }

    fn fill_eval(&self, rec: &mut MetricsRecord, with_disc: bool) -> Result<()> {
        let dev = self.system.split_metrics(
            &self.data.dev,
            with_disc,
            self.dev_aug_cache.as_deref(),
        )?;
        let test = self
            .system
            .split_metrics(&self.data.test, false, self.test_aug_cache.as_deref())?;
        rec.acc_icnn_dev = dev.acc_implicit;
        rec.acc_acnn_dev = dev.acc_augmented;
        rec.acc_disc = dev.acc_disc;
        rec.acc_icnn_test = test.acc_implicit;
        rec.acc_acnn_test = test.acc_augmented;
        Ok(())
    }

    pub fn into_outcome(self, pretrained: Option<ParamStore>) -> TrainOutcome {
        TrainOutcome {
            system: self.system,
            records: self.records,
            pretrained,
        }
    }
}

/// The sampler state after drawing one permutation of `items`.
fn advance(rng: &ChaCha8Rng, items: &[Instance]) -> ChaCha8Rng {
    let mut r = rng.clone();
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut r);
    r
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Pretraining: `pretrain_epochs` epochs of [`Trainer::pretrain_epoch`].
pub fn pretrain(trainer: &mut Trainer) -> Result<()> {
    if trainer.system.config.pretrain_epochs == 0 {
        return Err(Error::invalid("pretraining needs at least one epoch"));
    }
    for _ in 0..trainer.system.config.pretrain_epochs {
        trainer.pretrain_epoch()?;
    }
    Ok(())
}

/// Pretrains, then plays the alternating game for `adversarial_epochs`.
pub fn adversarial_train(config: &TrainConfig, data: &PreparedData) -> Result<TrainOutcome> {
    if config.mode != Mode::Adversarial {
        return Err(Error::invalid(format!(
            "adversarial_train needs mode adversarial, got {}",
            config.mode
        )));
    }
    let mut t = Trainer::new(config, data)?;
    pretrain(&mut t)?;
    let snapshot = t.system.store.clone();
    if config.restart_optimizer {
        t.system.restart_optimizer();
    }
    for _ in 0..config.adversarial_epochs {
        t.adversarial_epoch()?;
    }
    Ok(t.into_outcome(Some(snapshot)))
}

/// Trains one of the non-adversarial modes for
/// `pretrain_epochs + adversarial_epochs` epochs in total. `l2reg` spends
/// the first `pretrain_epochs` pretraining both encoders.
pub fn train_baseline(config: &TrainConfig, data: &PreparedData) -> Result<TrainOutcome> {
    if config.mode == Mode::Adversarial {
        return Err(Error::invalid(
            "train_baseline does not handle mode adversarial; use adversarial_train",
        ));
    }
    let mut t = Trainer::new(config, data)?;
    let mut snapshot = None;
    let total = config.pretrain_epochs + config.adversarial_epochs;
    if config.mode == Mode::L2reg {
        pretrain(&mut t)?;
        snapshot = Some(t.system.store.clone());
        if config.restart_optimizer {
            t.system.restart_optimizer();
        }
        for _ in 0..config.adversarial_epochs {
            t.baseline_epoch()?;
        }
    } else {
        for e in 0..total {
            if e == config.pretrain_epochs && config.restart_optimizer {
                t.system.restart_optimizer();
            }
            t.baseline_epoch()?;
        }
    }
    Ok(t.into_outcome(snapshot))
}

/// Dispatches on `config.mode`.
pub fn train(config: &TrainConfig, data: &PreparedData) -> Result<TrainOutcome> {
    match config.mode {
        Mode::Adversarial => adversarial_train(config, data),
        _ => train_baseline(config, data),
    }
}
