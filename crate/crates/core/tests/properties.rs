use std::collections::HashSet;

use advimit::corpus::{generate, parse_jsonl, to_jsonl, CorpusSpec, RelationExample};
use advimit::eval::{
    balanced_binary_split, binary_f1, multiclass_accuracy, probe_separability, project_features_2d,
};
use advimit::models::{icnn_features, Encoder, FilterSpec, Pooling};
use advimit::optim::AdaGradState;
use advimit::params::ParamStore;
use advimit::tape::{softmax, Tape, PAD_ID};
use advimit::text::{encode, LabelSet, Vocabulary};
use advimit::training::{expand_instances, PreparedData, Trainer};
use advimit::{Mode, Tensor, TrainConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c)
            .prop_map(move |v| Tensor::new(vec![r, c], v).unwrap())
    })
}

proptest! {
    #[test]
    fn avg_kmax_with_k1_is_max_pool_bitwise(x in matrix(12, 6)) {
        let mut tape = Tape::new();
        let v = tape.input(x);
        let a = tape.max_pool(v).unwrap();
        let b = tape.avg_kmax_pool(v, 1).unwrap();
        let (a, b): (Vec<u64>, Vec<u64>) = (
            tape.value(a).iter().map(|f| f.to_bits()).collect(),
            tape.value(b).iter().map(|f| f.to_bits()).collect(),
        );
        prop_assert_eq!(a, b);
    }

    #[test]
    fn softmax_normalizes_and_xent_is_nonnegative(
        logits in prop::collection::vec(-30.0f64..30.0, 2..12),
        gold_seed in 0usize..100,
    ) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let gold = gold_seed % logits.len();
        let mut tape = Tape::new();
        let z = tape.input(Tensor::vector(logits));
        let j = tape.softmax_xent(z, gold).unwrap();
        prop_assert!(tape.scalar(j) >= 0.0);
    }

    #[test]
    fn tensor_shape_matches_length(shape in prop::collection::vec(1usize..5, 1..4), extra in 0usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n]).is_ok());
        if extra > 0 {
            prop_assert!(Tensor::new(shape, vec![0.0; n + extra]).is_err());
        }
    }

    #[test]
    fn adagrad_accumulators_never_decrease(grads in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..8)) {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::zeros(&[4])).unwrap();
        let mut opt = AdaGradState::new(0.1);
        let mut prev = vec![0.0; 4];
        for g in grads {
            store.get_mut(id).grad_mut().copy_from_slice(&g);
            opt.step(&mut store, &[id]);
            let acc = opt.accumulator(id).unwrap().to_vec();
            for (a, p) in acc.iter().zip(&prev) {
                prop_assert!(a >= p);
            }
            prev = acc;
        }
    }

    #[test]
    fn multiclass_accuracy_ignores_gold_order_and_duplicates(
        rows in prop::collection::vec((0usize..5, prop::collection::vec(0usize..5, 1..4)), 1..30),
        seed in any::<u64>(),
    ) {
        let preds: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let golds: Vec<Vec<usize>> = rows.iter().map(|r| r.1.clone()).collect();
        let base = multiclass_accuracy(&preds, &golds).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shuffled: Vec<Vec<usize>> = golds
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.push(g[0]);
                g.shuffle(&mut rng);
                g
            })
            .collect();
        prop_assert_eq!(base, multiclass_accuracy(&preds, &shuffled).unwrap());
    }

    #[test]
    fn multi_label_examples_expand_to_one_instance_per_label(
        label_counts in prop::collection::vec(1usize..4, 1..20),
    ) {
        let vocab = Vocabulary::from_tokens(vec!["a".into()]);
        let labels = LabelSet::new((0..4).map(|i| format!("R{i}")).collect());
        let examples: Vec<_> = label_counts
            .iter()
            .map(|&m| {
                let ex = RelationExample {
                    arg1: "a".into(),
                    arg2: "a".into(),
                    connective: String::new(),
                    labels: (0..m).map(|i| format!("R{i}")).collect(),
                };
                encode(&ex, &vocab, &labels, 3)
            })
            .collect();
        let inst = expand_instances(&examples);
        prop_assert_eq!(inst.len(), label_counts.iter().sum::<usize>());
        for (i, &m) in label_counts.iter().enumerate() {
            prop_assert_eq!(inst.iter().filter(|x| x.example == i).count(), m);
        }
    }

    #[test]
    fn balanced_split_sides_differ_by_at_most_one(
        labels in prop::collection::vec(0usize..4, 2..80),
        seed in any::<u64>(),
    ) {
        prop_assume!(labels.contains(&0) && labels.iter().any(|&l| l != 0));
        let train: Vec<RelationExample> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| RelationExample {
                arg1: format!("a{i}"),
                arg2: "b".into(),
                connective: String::new(),
                labels: vec![format!("R{l}")],
            })
            .collect();
        let split = balanced_binary_split(&train, "R0", seed).unwrap();
        let pos = split.iter().filter(|e| e.labels[0] == "R0").count();
        let neg = split.len() - pos;
        prop_assert!(pos.abs_diff(neg) <= 1);
    }

    #[test]
    fn binary_f1_scores_are_bounded(
        pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..50),
    ) {
        let (p, g): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let s = binary_f1(&p, &g).unwrap();
        for v in [s.precision, s.recall, s.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-15);
    }

    #[test]
    fn projection_is_invariant_to_input_order(
        rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 3..15),
        seed in any::<u64>(),
    ) {
        let base = project_features_2d(&rows).unwrap();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
        let proj = project_features_2d(&permuted).unwrap();
        for (k, &i) in order.iter().enumerate() {
            for axis in 0..2 {
                prop_assert!((proj[k][axis] - base[i][axis]).abs() <= 1e-9,
                    "point {} axis {}: {} vs {}", i, axis, proj[k][axis], base[i][axis]);
            }
        }
    }

    #[test]
    fn jsonl_round_trips(
        rows in prop::collection::vec(("[a-z][a-z ]{0,11}", "[a-z][a-z ]{0,11}", "[a-z]{0,6}", prop::collection::vec("[A-Z][a-z]{0,5}", 1..3)), 1..10),
    ) {
        let examples: Vec<RelationExample> = rows
            .into_iter()
            .map(|(arg1, arg2, connective, labels)| RelationExample { arg1, arg2, connective, labels })
            .collect();
        prop_assert_eq!(parse_jsonl(&to_jsonl(&examples)).unwrap(), examples);
    }

    #[test]
    fn encoding_is_idempotent(picks in prop::collection::vec(0usize..7, 1..6), max_len in 1usize..8) {
        let words = ["a", "b", "c", "d", "e", "f", "g"];
        let vocab = Vocabulary::from_tokens(words.iter().map(|s| s.to_string()).collect());
        let labels = LabelSet::new(vec!["R".into()]);
        let text: Vec<&str> = picks.iter().map(|&i| words[i]).collect();
        let ex = RelationExample {
            arg1: text.join(" "),
            arg2: text.join(" "),
            connective: String::new(),
            labels: vec!["R".into()],
        };
        let once = encode(&ex, &vocab, &labels, max_len);
        let decoded: Vec<&str> = once
            .arg1_ids
            .iter()
            .filter(|&&i| i != PAD_ID)
            .map(|&i| vocab.token(i).unwrap())
            .collect();
        let again = encode(
            &RelationExample { arg1: decoded.join(" "), arg2: decoded.join(" "), ..ex.clone() },
            &vocab, &labels, max_len,
        );
        prop_assert_eq!(once, again);
    }

    #[test]
    fn swapping_arguments_leaves_features_unchanged(
        a in prop::collection::vec(2usize..12, 1..8),
        b in prop::collection::vec(2usize..12, 1..8),
        seed in any::<u64>(),
    ) {
        // both arguments run through the same filter tensors, and pooling
        // spans the joined time axis
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = store.insert("e", Tensor::glorot(&[12, 4], 12, 4, &mut rng)).unwrap();
        let spec: FilterSpec = "2x3".parse().unwrap();
        let enc = Encoder::new(&mut store, "icnn", emb, &spec, Pooling::Max, &mut rng).unwrap();
        let pad = |v: &[usize]| { let mut v = v.to_vec(); v.resize(8, PAD_ID); v };
        let ex = |x: &[usize], y: &[usize]| advimit::text::EncodedExample {
            arg1_ids: pad(x), arg2_ids: pad(y), connective_ids: vec![], gold_labels: vec![0],
        };
        let mut tape = Tape::with_params(&store);
        let f1 = icnn_features(&mut tape, &enc, &ex(&a, &b)).unwrap();
        let f2 = icnn_features(&mut tape, &enc, &ex(&b, &a)).unwrap();
        prop_assert_eq!(tape.value(f1), tape.value(f2));
    }
}

#[test]
fn probe_null_hypothesis_is_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut total = 0.0;
    for seed in 0..10u64 {
        let pool: Vec<Vec<f64>> = (0..400)
            .map(|_| (0..6).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
            .collect();
        let mut shuffled = pool.clone();
        shuffled.shuffle(&mut rng);
        let (a, i) = shuffled.split_at(200);
        total += probe_separability(a, i, seed).unwrap();
    }
    let mean = total / 10.0;
    assert!((mean - 0.5).abs() <= 0.05, "{mean}");
}

#[test]
fn generated_splits_are_disjoint_and_balanced() {
    let spec = CorpusSpec::default();
    let c = generate(&spec).unwrap();
    let key = |e: &RelationExample| (e.arg1.clone(), e.arg2.clone());
    let train: HashSet<_> = c.train.iter().map(key).collect();
    let dev: HashSet<_> = c.dev.iter().map(key).collect();
    assert!(c.dev.iter().all(|e| !train.contains(&key(e))));
    assert!(c.test.iter().all(|e| !train.contains(&key(e)) && !dev.contains(&key(e))));

    let k = spec.n_classes as f64;
    for name in spec.labels() {
        let share = c.train.iter().filter(|e| e.labels[0] == name).count() as f64 / c.train.len() as f64;
        assert!((share - 1.0 / k).abs() <= 0.03, "{name}: {share}");
    }
}

fn tiny_data() -> (Vec<RelationExample>, Vec<RelationExample>, Vec<RelationExample>) {
    let spec = CorpusSpec {
        n_train: 120,
        n_dev: 40,
        n_test: 40,
        seed: 3,
        ..CorpusSpec::default()
    };
    let c = generate(&spec).unwrap();
    (c.train, c.dev, c.test)
}

fn tiny_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        embed_dim: 6,
        filters: "2x4,3x4".parse().unwrap(),
        hidden_dim: 8,
        disc_width: 6,
        max_len: 12,
        pretrain_epochs: 1,
        adversarial_epochs: 1,
        learning_rate: 0.05,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn padding_rows_stay_zero_through_training() {
    let (train, dev, test) = tiny_data();
    let config = tiny_config(Mode::Adversarial);
    let data = PreparedData::new(&train, &dev, &test, &config).unwrap();
    let out = advimit::training::train(&config, &data).unwrap();
    let store = &out.system.store;
    let tables = store.ids().filter(|&id| store.name(id).ends_with("embedding"));
    let mut n = 0;
    for id in tables {
        assert!(store.get(id).values()[..config.embed_dim].iter().all(|&v| v == 0.0));
        n += 1;
    }
    assert_eq!(n, 2);
}

#[test]
fn discriminator_sees_only_feature_values() {
    let (train, dev, test) = tiny_data();
    let config = tiny_config(Mode::Adversarial);
    let data = PreparedData::new(&train, &dev, &test, &config).unwrap();
    let out = advimit::training::train(&config, &data).unwrap();
    let sys = &out.system;
    let h = sys.augmented_feature(&data.dev[0]).unwrap().unwrap();
    let a = sys.discriminate_feature(&h).unwrap().unwrap();
    let b = sys.discriminate_feature(&h.clone()).unwrap().unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn pretraining_losses_do_not_rise() {
    let spec = CorpusSpec {
        n_train: 1500,
        n_dev: 200,
        n_test: 200,
        seed: 4,
        ..CorpusSpec::default()
    };
    let c = generate(&spec).unwrap();
    let config = TrainConfig {
        pretrain_epochs: 4,
        learning_rate: 0.003,
        embed_dim: 16,
        filters: "2x8,4x8".parse().unwrap(),
        hidden_dim: 32,
        disc_width: 16,
        max_len: 16,
        ..tiny_config(Mode::Adversarial)
    };
    let data = PreparedData::new(&c.train, &c.dev, &c.test, &config).unwrap();
    let mut t = Trainer::new(&config, &data).unwrap();
    advimit::training::pretrain(&mut t).unwrap();
    for w in t.records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        assert!(b.loss_ic.unwrap() <= a.loss_ic.unwrap() * 1.05, "{a:?} -> {b:?}");
        assert!(b.loss_a.unwrap() <= a.loss_a.unwrap() * 1.05, "{a:?} -> {b:?}");
    }
}
