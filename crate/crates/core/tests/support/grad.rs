//! Finite-difference checks shared by the gradient tests and the
//! acceptance run.

use advimit::discriminator::Discriminator;
use advimit::losses;
use advimit::models::{acnn_features, icnn_features, Classifier, Encoder, FilterSpec, Pooling};
use advimit::params::{ParamId, ParamStore};
use advimit::tape::{Activation, Tape, Var, PAD_ID};
use advimit::text::EncodedExample;
use advimit::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Pass threshold for every check in the suite.
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error, for coordinates whose true
/// gradient is zero.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn rng_for(name: &str) -> ChaCha8Rng {
    let seed = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Checks `d/dx_i sum(w * op(x))` for every input `x_i`, with `w` a fixed
/// random weighting of the op's output. `skip(i, j)` excludes coordinates
/// whose analytic gradient must be zero by construction; those are asserted
/// to be exactly zero instead.
pub fn check_op(
    name: &str,
    inputs: Vec<Tensor>,
    build: &Build,
    skip: &dyn Fn(usize, usize) -> bool,
) -> GradReport {
    let weighted = |inputs: &[Tensor], w: Option<&Tensor>| -> (f64, Vec<Vec<f64>>, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap_or_else(|e| panic!("{name}: {e}"));
        let shape = tape.shape(out).to_vec();
        let w = match w {
            Some(w) => w.clone(),
            None => random(&mut rng_for(&format!("{name}.weights")), &shape, -1.0, 1.0),
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        let value = tape.scalar(loss);
        tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| tape.grad(v)).collect(), w)
    };
    let (_, analytic, w) = weighted(&inputs, None);
    let mut probe = inputs.clone();
    let mut worst = 0.0f64;
    let mut coords = 0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            if skip(i, j) {
                assert_eq!(analytic[i][j], 0.0, "{name}: frozen coordinate ({i}, {j})");
                continue;
            }
            let orig = inputs[i].values()[j];
            probe[i].values_mut()[j] = orig + STEP;
            let plus = weighted(&probe, Some(&w)).0;
            probe[i].values_mut()[j] = orig - STEP;
            let minus = weighted(&probe, Some(&w)).0;
            probe[i].values_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[i][j], (plus - minus) / (2.0 * STEP)));
            coords += 1;
        }
    }
    GradReport {
        name: name.to_string(),
        max_rel_err: worst,
        coords,
    }
}

fn no_skip(_: usize, _: usize) -> bool {
    false
}

/// One check per tape primitive.
pub fn primitive_reports() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut rng = rng_for("primitives");
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| random(rng, s, -1.0, 1.0);

    out.push(check_op(
        "conv1d",
        vec![r(&mut rng, &[10, 4]), r(&mut rng, &[3, 3, 4]), r(&mut rng, &[3])],
        &|t, v| t.conv1d(v[0], v[1], v[2]),
        &no_skip,
    ));
    out.push(check_op(
        "conv1d_full_width",
        vec![r(&mut rng, &[5, 3]), r(&mut rng, &[2, 5, 3]), r(&mut rng, &[2])],
        &|t, v| t.conv1d(v[0], v[1], v[2]),
        &no_skip,
    ));
    out.push(check_op("tanh", vec![r(&mut rng, &[3, 4])], &|t, v| Ok(t.tanh(v[0])), &no_skip));
    out.push(check_op(
        "sigmoid",
        vec![random(&mut rng, &[3, 4], -3.0, 3.0)],
        &|t, v| Ok(t.sigmoid(v[0])),
        &no_skip,
    ));
    for (name, act) in [
        ("dense_identity", Activation::Identity),
        ("dense_tanh", Activation::Tanh),
        ("dense_sigmoid", Activation::Sigmoid),
    ] {
        out.push(check_op(
            name,
            vec![r(&mut rng, &[6]), r(&mut rng, &[4, 6]), r(&mut rng, &[4])],
            &move |t, v| t.dense(v[0], v[1], v[2], act),
            &no_skip,
        ));
    }
    out.push(check_op("max_pool", vec![r(&mut rng, &[7, 3])], &|t, v| t.max_pool(v[0]), &no_skip));
    for k in [1usize, 2, 3] {
        out.push(check_op(
            &format!("avg_kmax_pool_k{k}"),
            vec![r(&mut rng, &[7, 3])],
            &move |t, v| t.avg_kmax_pool(v[0], k),
            &no_skip,
        ));
    }
    out.push(check_op(
        "concat_rows",
        vec![r(&mut rng, &[2, 3]), r(&mut rng, &[4, 3])],
        &|t, v| t.concat_rows(&[v[0], v[1]]),
        &no_skip,
    ));
    out.push(check_op(
        "concat",
        vec![r(&mut rng, &[3]), r(&mut rng, &[2])],
        &|t, v| t.concat(&[v[0], v[1]]),
        &no_skip,
    ));
    // row PAD_ID of the table is a constant
    out.push(check_op(
        "gather",
        vec![r(&mut rng, &[5, 3])],
        &|t, v| t.gather(v[0], &[1, 3, PAD_ID, 1, 4]),
        &|_, j| j / 3 == PAD_ID,
    ));
    out.push(check_op("sum_rows", vec![r(&mut rng, &[4, 3])], &|t, v| t.sum_rows(v[0]), &no_skip));
    out.push(check_op(
        "softmax",
        vec![random(&mut rng, &[5], -2.0, 2.0)],
        &|t, v| t.softmax(v[0]),
        &no_skip,
    ));
    out.push(check_op(
        "softmax_xent",
        vec![random(&mut rng, &[5], -2.0, 2.0)],
        &|t, v| t.softmax_xent(v[0], 2),
        &no_skip,
    ));
    let pair = |rng: &mut ChaCha8Rng| vec![random(rng, &[2, 3], -1.0, 1.0), random(rng, &[2, 3], -1.0, 1.0)];
    out.push(check_op("add", pair(&mut rng), &|t, v| t.add(v[0], v[1]), &no_skip));
    out.push(check_op("sub", pair(&mut rng), &|t, v| t.sub(v[0], v[1]), &no_skip));
    out.push(check_op("mul", pair(&mut rng), &|t, v| t.mul(v[0], v[1]), &no_skip));
    out.push(check_op("sq_dist", pair(&mut rng), &|t, v| t.sq_dist(v[0], v[1]), &no_skip));
    out.push(check_op("scale", vec![r(&mut rng, &[4])], &|t, v| Ok(t.scale(v[0], -2.5)), &no_skip));
    out.push(check_op("one_minus", vec![r(&mut rng, &[4])], &|t, v| Ok(t.one_minus(v[0])), &no_skip));
    out.push(check_op(
        "log_clamped",
        vec![random(&mut rng, &[4], 0.05, 0.95)],
        &|t, v| Ok(t.log_clamped(v[0], 1e-7, 1.0 - 1e-7)),
        &no_skip,
    ));
    out.push(check_op("sum", vec![r(&mut rng, &[2, 3])], &|t, v| Ok(t.sum(v[0])), &no_skip));
    out.push(check_op(
        "mean",
        vec![r(&mut rng, &[1]), r(&mut rng, &[1]), r(&mut rng, &[1])],
        &|t, v| t.mean(v),
        &no_skip,
    ));
    out
}

/// A miniature relation system: both encoders with their own embedding
/// tables, the shared classifier and the discriminator.
pub struct Mini {
    pub store: ParamStore,
    pub icnn: Encoder,
    pub acnn: Encoder,
    pub classifier: Classifier,
    pub disc: Discriminator,
    pub examples: Vec<EncodedExample>,
}

pub const MINI_VOCAB: usize = 14;
pub const MINI_EMBED: usize = 6;
pub const MINI_SEQ: usize = 9;
pub const MINI_CLASSES: usize = 4;

impl Mini {
    pub fn new(seed: u64) -> Mini {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut table = random(&mut rng, &[MINI_VOCAB, MINI_EMBED], -0.8, 0.8);
        table.values_mut()[..MINI_EMBED].iter_mut().for_each(|v| *v = 0.0);
        let emb_i = store.insert("icnn.embedding", table.clone()).unwrap();
        let emb_a = store.insert("acnn.embedding", table).unwrap();
        let spec: FilterSpec = "2x3,3x2".parse().unwrap();
        let icnn = Encoder::new(&mut store, "icnn", emb_i, &spec, Pooling::Max, &mut rng).unwrap();
        let acnn =
            Encoder::new(&mut store, "acnn", emb_a, &spec, Pooling::AvgKMax(2), &mut rng).unwrap();
        let dim = spec.feature_dim();
        let classifier = Classifier::new(&mut store, "clf", dim, 7, MINI_CLASSES, &mut rng).unwrap();
        let disc = Discriminator::new(&mut store, "disc", dim, 5, &mut rng).unwrap();
        // biases start at zero; give them values so their gradients are generic
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if store.name(id).ends_with("bias") {
                for v in store.get_mut(id).values_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
        }
        let ids = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            let mut v: Vec<usize> = (0..n).map(|_| rng.gen_range(2..MINI_VOCAB)).collect();
            v.resize(MINI_SEQ, PAD_ID);
            v
        };
        let examples = (0..3)
            .map(|i| EncodedExample {
                arg1_ids: ids(5 + i, &mut rng),
                arg2_ids: ids(4 + 2 * i, &mut rng),
                connective_ids: vec![2 + i],
                gold_labels: vec![i % MINI_CLASSES],
            })
            .collect();
        Mini {
            store,
            icnn,
            acnn,
            classifier,
            disc,
            examples,
        }
    }

    fn features(&self, tape: &mut Tape) -> Result<(Vec<Var>, Vec<Var>)> {
        let mut hi = Vec::new();
        let mut ha = Vec::new();
        for ex in &self.examples {
            hi.push(icnn_features(tape, &self.icnn, ex)?);
            ha.push(acnn_features(tape, &self.acnn, ex)?);
        }
        Ok((hi, ha))
    }

    fn labelled(&self, feats: &[Var]) -> Vec<(Var, usize)> {
        feats
            .iter()
            .zip(&self.examples)
            .map(|(&h, ex)| (h, ex.gold_labels[0]))
            .collect()
    }

    /// Builds one of the five objectives on `tape`.
    pub fn objective(&self, tape: &mut Tape, which: Objective) -> Result<Var> {
        let (hi, ha) = self.features(tape)?;
        match which {
            Objective::Discriminator => {
                let pairs: Vec<(Var, Var)> = ha.iter().copied().zip(hi.iter().copied()).collect();
                losses::loss_discriminator(tape, &self.disc, &pairs)
            }
            Objective::ImplicitClassification => {
                losses::loss_implicit_classification(tape, &self.classifier, &self.labelled(&hi))
            }
            Objective::Adversarial => losses::loss_adversarial(tape, &self.disc, &hi),
            Objective::Augmented => {
                losses::loss_augmented(tape, &self.classifier, &self.labelled(&ha))
            }
            Objective::Joint => {
                let l_ic = losses::loss_implicit_classification(tape, &self.classifier, &self.labelled(&hi))?;
                let l_i = losses::loss_adversarial(tape, &self.disc, &hi)?;
                let l_a = losses::loss_augmented(tape, &self.classifier, &self.labelled(&ha))?;
                losses::loss_joint(tape, l_ic, Some(l_i), Some(l_a), 0.1, 0.7)
            }
        }
    }

    pub fn value(&self, store: &ParamStore, which: Objective) -> f64 {
        let mut tape = Tape::with_params(store);
        let v = self.objective(&mut tape, which).unwrap();
        tape.scalar(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Discriminator,
    ImplicitClassification,
    Adversarial,
    Augmented,
    Joint,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Discriminator,
        Objective::ImplicitClassification,
        Objective::Adversarial,
        Objective::Augmented,
        Objective::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Discriminator => "loss_discriminator",
            Objective::ImplicitClassification => "loss_implicit_classification",
            Objective::Adversarial => "loss_adversarial",
            Objective::Augmented => "loss_augmented",
            Objective::Joint => "loss_joint",
        }
    }
}

/// Every parameter coordinate of the miniature system, end to end. The
/// padding rows of both embedding tables must get exactly zero gradient.
pub fn objective_report(which: Objective) -> GradReport {
    let mini = Mini::new(17);
    let analytic = {
        let mut tape = Tape::with_params(&mini.store);
        let v = mini.objective(&mut tape, which).unwrap();
        tape.backward(v).unwrap()
    };
    let mut store = mini.store.clone();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst = 0.0f64;
    let mut coords = 0;
    for id in ids {
        let is_table = store.name(id).ends_with("embedding");
        for j in 0..store.get(id).len() {
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            if is_table && j / MINI_EMBED == PAD_ID {
                assert_eq!(a, 0.0, "{}: padding row got gradient", which.name());
                continue;
            }
            let orig = store.get(id).values()[j];
            store.get_mut(id).values_mut()[j] = orig + STEP;
            let plus = mini.value(&store, which);
            store.get_mut(id).values_mut()[j] = orig - STEP;
            let minus = mini.value(&store, which);
            store.get_mut(id).values_mut()[j] = orig;
            worst = worst.max(rel_err(a, (plus - minus) / (2.0 * STEP)));
            coords += 1;
        }
    }
    GradReport {
        name: which.name().to_string(),
        max_rel_err: worst,
        coords,
    }
}

pub fn full_suite() -> Vec<GradReport> {
    let mut out = primitive_reports();
    out.extend(Objective::ALL.into_iter().map(objective_report));
    out
}
