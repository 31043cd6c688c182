//! `advimit gen-data | train | eval | viz`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{save_components, Checkpoint, CheckpointKind};
use crate::config::{parse_flat, Mode, TrainConfig};
use crate::corpus::{generate, load_jsonl, save_jsonl, CorpusSpec, RelationExample};
use crate::error::{Error, Result};
use crate::eval::{
    balanced_binary_split, binary_f1, emit_metrics, emit_points, evaluate_augmented,
    evaluate_implicit, probe_separability, project_sources, rest_label, EvalResult,
};
use crate::models::{argmax, FilterSpec};
use crate::text::{encode, EncodedExample, Vocabulary};
use crate::training::{train, PreparedData, System};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

#[derive(Parser, Debug)]
#[command(name = "advimit", version, args_override_self = true, about = "Implicit discourse relation classification by adversarial connective imitation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus as train/dev/test JSONL.
    GenData(GenDataArgs),
    /// Train one mode and write checkpoints, metrics and a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Export 2-D projected features of an implicit/augmented checkpoint pair.
    Viz(VizArgs),
}

#[derive(Args, Debug, Default)]
pub struct GenDataArgs {
    /// Flat `key = value` corpus spec; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub tokens_per_arg: Option<usize>,
    #[arg(long)]
    pub connectives_per_class: Option<usize>,
    #[arg(long)]
    pub arg_signal: Option<f64>,
    #[arg(long)]
    pub connective_noise: Option<f64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_dev: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Every training hyperparameter as an optional override.
#[derive(Args, Debug, Default, Clone)]
pub struct TrainOverrides {
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub adversarial_epochs: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_parser = parse_filters)]
    pub filters: Option<FilterSpec>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub disc_width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub freeze_augmented: Option<bool>,
    #[arg(long)]
    pub restart_optimizer: Option<bool>,
    #[arg(long)]
    pub l2reg_weight: Option<f64>,
    #[arg(long)]
    pub multitask_weight: Option<f64>,
    #[arg(long)]
    pub embeddings_path: Option<String>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_filters(s: &str) -> std::result::Result<FilterSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl TrainOverrides {
    pub fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        set!(
            mode, lambda1, lambda2, learning_rate, batch_size, pretrain_epochs,
            adversarial_epochs, k, filters, embed_dim, max_len, min_count, hidden_dim,
            disc_width, seed, freeze_augmented, restart_optimizer, l2reg_weight, multitask_weight
        );
        if let Some(p) = &self.embeddings_path {
            c.embeddings_path = Some(p.clone());
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory holding train.jsonl, dev.jsonl and test.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `key = value` training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train on the balanced CLASS-vs-rest relabelling of the corpus.
    #[arg(long, value_name = "CLASS")]
    pub one_vs_all: Option<String>,
    /// Also write projected dev-set features of the final model to points.csv.
    #[arg(long)]
    pub points: bool,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Multiclass,
    OneVsAll,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value = "multiclass")]
    pub protocol: Protocol,
    /// Positive class for the one-vs-all protocol.
    #[arg(long)]
    pub class: Option<String>,
    /// Per-class scores as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[arg(long)]
    pub implicit: PathBuf,
    #[arg(long)]
    pub augmented: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "dev")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Run record written before training and finalized after it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: TrainConfig,
    pub seed: u64,
    pub one_vs_all: Option<String>,
    pub corpus_fingerprint: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    pub corpus_fingerprint: String,
    pub files: Vec<String>,
    pub created_at: String,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e.into()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// SHA-256 over the three split files in order.
pub fn corpus_fingerprint(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for split in SPLITS {
        let path = split_path(dir, split);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update(split.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub struct Splits {
    pub train: Vec<RelationExample>,
    pub dev: Vec<RelationExample>,
    pub test: Vec<RelationExample>,
}

impl Splits {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Splits {
            train: load_jsonl(split_path(dir, "train"))?,
            dev: load_jsonl(split_path(dir, "dev"))?,
            test: load_jsonl(split_path(dir, "test"))?,
        })
    }

    fn get(&self, split: &str) -> Result<&[RelationExample]> {
        match split {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::invalid(format!("unknown split `{other}`; use train, dev or test"))),
        }
    }
}

pub fn gen_data(args: &GenDataArgs) -> Result<CorpusManifest> {
    let mut spec: CorpusSpec = match &args.config {
        Some(p) => parse_flat(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => CorpusSpec::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = args.$f { spec.$f = v; } )* };
    }
    set!(
        n_classes, vocab_size, block_size, tokens_per_arg, connectives_per_class, arg_signal,
        connective_noise, n_train, n_dev, n_test, seed
    );
    spec.validate()?;
    let corpus = generate(&spec)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut files = Vec::new();
    for (split, data) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        let path = split_path(&args.out, split);
        save_jsonl(data, &path)?;
        files.push(path.display().to_string());
    }
    let manifest = CorpusManifest {
        spec,
        corpus_fingerprint: corpus_fingerprint(&args.out)?,
        files,
        created_at: now(),
    };
    write_json(&manifest, &args.out.join("manifest.json"))?;
    Ok(manifest)
}

pub fn resolve_config(config: Option<&Path>, overrides: &TrainOverrides) -> Result<TrainConfig> {
    let mut c = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut c);
    c.validate()?;
    Ok(c)
}

/// The training split a run actually used: the balanced relabelling for
/// one-vs-all runs, otherwise the file as is.
fn training_view(splits: &Splits, one_vs_all: Option<&str>, seed: u64) -> Result<Splits> {
    match one_vs_all {
        None => Ok(Splits {
            train: splits.train.clone(),
            dev: splits.dev.clone(),
            test: splits.test.clone(),
        }),
        Some(class) => {
            let relabel = |xs: &[RelationExample]| -> Vec<RelationExample> {
                xs.iter()
                    .map(|e| RelationExample {
                        labels: vec![if e.labels.iter().any(|l| l == class) {
                            class.to_string()
                        } else {
                            rest_label(class)
                        }],
                        ..e.clone()
                    })
                    .collect()
            };
            if !splits.train.iter().any(|e| e.labels.iter().any(|l| l == class)) {
                return Err(Error::invalid(format!("class `{class}` does not occur in the training data")));
            }
            Ok(Splits {
                train: balanced_binary_split(&splits.train, class, seed)?,
                dev: relabel(&splits.dev),
                test: relabel(&splits.test),
            })
        }
    }
}

fn with_store(system: &System, store: crate::params::ParamStore) -> System {
    let mut s = system.clone();
    s.store = store;
    s
}

pub fn train_command(args: &TrainArgs, argv: &[String]) -> Result<RunManifest> {
    let config = resolve_config(args.config.as_deref(), &args.overrides)?;
    let splits = Splits::load(&args.data)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let manifest_path = args.out.join("manifest.json");
    let mut manifest = RunManifest {
        command: argv.join(" "),
        config: config.clone(),
        seed: config.seed,
        one_vs_all: args.one_vs_all.clone(),
        corpus_fingerprint: corpus_fingerprint(&args.data)?,
        started_at: now(),
        finished_at: None,
        outputs: Vec::new(),
    };
    write_json(&manifest, &manifest_path)?;

    let view = training_view(&splits, args.one_vs_all.as_deref(), config.seed)?;
    let data = PreparedData::new(&view.train, &view.dev, &view.test, &config)?;
    let outcome = train(&config, &data)?;

    let mut outputs = save_components(&outcome.system, &data, &args.out, "", args.one_vs_all.as_deref())?;
    if let Some(store) = &outcome.pretrained {
        let pre = with_store(&outcome.system, store.clone());
        outputs.extend(save_components(&pre, &data, &args.out, "pretrain_", args.one_vs_all.as_deref())?);
    }
    let metrics = args.out.join("metrics.csv");
    emit_metrics(&outcome.records, &metrics)?;
    outputs.push(metrics);
    if args.points {
        if outcome.system.augmented.is_none() {
            return Err(Error::invalid(format!(
                "--points needs a mode with an augmented encoder, not {}",
                config.mode
            )));
        }
        let (hi, ha) = features(&outcome.system, &outcome.system, &data.dev)?;
        let path = args.out.join("points.csv");
        emit_points(&project_sources(&hi, &ha)?, &path)?;
        outputs.push(path);
    }
    manifest.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    manifest.finished_at = Some(now());
    write_json(&manifest, &manifest_path)?;
    Ok(manifest)
}

/// Restores a checkpoint and encodes `split` against its vocabulary,
/// refusing data whose training vocabulary differs.
fn load_for_eval(path: &Path, data_dir: &Path, split: &str) -> Result<(Checkpoint, System, Vec<EncodedExample>)> {
    let ck = Checkpoint::load(path)?;
    let splits = Splits::load(data_dir)?;
    let view = training_view(&splits, ck.one_vs_all.as_deref(), ck.config.seed)?;
    let rebuilt = Vocabulary::build(&view.train, ck.config.min_count)?;
    ck.check_compatible(&rebuilt)?;
    let system = ck.restore()?;
    let vocab = ck.vocabulary();
    let labels = ck.label_set();
    let encoded = view
        .get(split)?
        .iter()
        .map(|e| encode(e, &vocab, &labels, ck.config.max_len))
        .collect();
    Ok((ck, system, encoded))
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub kind: CheckpointKind,
    pub split: String,
    pub protocol: String,
    pub labels: Vec<String>,
    pub result: EvalResult,
    pub positive_class: Option<String>,
    pub binary: Option<crate::eval::BinaryScores>,
}

pub fn eval_command(args: &EvalArgs) -> Result<EvalReport> {
    let (ck, system, data) = load_for_eval(&args.checkpoint, &args.data, &args.split)?;
    let result = match ck.kind {
        CheckpointKind::Implicit => evaluate_implicit(&system, &data)?,
        CheckpointKind::Augmented => evaluate_augmented(&system, &data)?
            .ok_or_else(|| Error::Compatibility("checkpoint has no augmented encoder".into()))?,
        CheckpointKind::Discriminator => {
            return Err(Error::invalid("a discriminator checkpoint cannot classify relations"))
        }
    };
    let (positive_class, binary) = match args.protocol {
        Protocol::Multiclass => (None, None),
        Protocol::OneVsAll => {
            let class = args
                .class
                .clone()
                .or_else(|| ck.one_vs_all.clone())
                .ok_or_else(|| Error::invalid("--protocol one-vs-all needs --class"))?;
            let c = ck
                .label_set()
                .index(&class)
                .ok_or_else(|| Error::invalid(format!("class `{class}` is not a checkpoint label")))?;
            let mut preds = Vec::with_capacity(data.len());
            for ex in &data {
                let p = match ck.kind {
                    CheckpointKind::Implicit => system.predict_implicit(&ex.without_connective())?,
                    _ => system.predict_augmented(ex)?.expect("augmented encoder"),
                };
                preds.push(argmax(&p) == c);
            }
            let golds: Vec<bool> = data.iter().map(|e| e.gold_labels.contains(&c)).collect();
            (Some(class), Some(binary_f1(&preds, &golds)?))
        }
    };
    let report = EvalReport {
        kind: ck.kind,
        split: args.split.clone(),
        protocol: format!("{:?}", args.protocol).to_lowercase(),
        labels: ck.labels.clone(),
        result,
        positive_class,
        binary,
    };
    if let Some(out) = &args.out {
        write_eval_csv(&report, out)?;
    }
    Ok(report)
}

fn write_eval_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["class", "precision", "recall", "f1", "accuracy", "n_examples"])
        .map_err(io)?;
    for (name, s) in report.labels.iter().zip(&report.result.per_class) {
        w.write_record([
            name.clone(),
            s.precision.to_string(),
            s.recall.to_string(),
            s.f1.to_string(),
            String::new(),
            String::new(),
        ])
        .map_err(io)?;
    }
    if let (Some(c), Some(b)) = (&report.positive_class, &report.binary) {
        w.write_record([
            format!("{c} (one-vs-all)"),
            b.precision.to_string(),
            b.recall.to_string(),
            b.f1.to_string(),
            String::new(),
            String::new(),
        ])
        .map_err(io)?;
    }
    w.write_record([
        "all".to_string(),
        String::new(),
        String::new(),
        String::new(),
        report.result.accuracy.to_string(),
        report.result.n_examples.to_string(),
    ])
    .map_err(io)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// `H_I` from `implicit` and `H_A` from `augmented` over `data`.
pub fn features(
    implicit: &System,
    augmented: &System,
    data: &[EncodedExample],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut hi = Vec::with_capacity(data.len());
    let mut ha = Vec::with_capacity(data.len());
    for ex in data {
        hi.push(implicit.implicit_feature(&ex.without_connective())?);
        ha.push(
            augmented
                .augmented_feature(ex)?
                .ok_or_else(|| Error::Compatibility("checkpoint has no augmented encoder".into()))?,
        );
    }
    Ok((hi, ha))
}

#[derive(Clone, Debug, Serialize)]
pub struct VizReport {
    pub probe_accuracy: f64,
    pub n_points: usize,
}

pub fn viz_command(args: &VizArgs) -> Result<VizReport> {
    let (ck_i, sys_i, data) = load_for_eval(&args.implicit, &args.data, &args.split)?;
    let (ck_a, sys_a, _) = load_for_eval(&args.augmented, &args.data, &args.split)?;
    if ck_i.kind != CheckpointKind::Implicit || ck_a.kind != CheckpointKind::Augmented {
        return Err(Error::Compatibility(format!(
            "viz needs an implicit and an augmented checkpoint, got {:?} and {:?}",
            ck_i.kind, ck_a.kind
        )));
    }
    if ck_i.vocab_fingerprint != ck_a.vocab_fingerprint {
        return Err(Error::Compatibility("checkpoints were trained on different vocabularies".into()));
    }
    let (hi, ha) = features(&sys_i, &sys_a, &data)?;
    let probe_accuracy = probe_separability(&ha, &hi, args.seed)?;
    let points = project_sources(&hi, &ha)?;
    emit_points(&points, &args.out)?;
    Ok(VizReport {
        probe_accuracy,
        n_points: points.len(),
    })
}

/// Parses `argv` and runs the command, printing a short summary.
pub fn run(argv: Vec<String>) -> Result<()> {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("bad arguments");
            return Err(Error::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    match &cli.command {
        Command::GenData(a) => {
            let m = gen_data(a)?;
            println!(
                "wrote {} (fingerprint {})",
                m.files.join(", "),
                m.corpus_fingerprint
            );
        }
        Command::Train(a) => {
            let m = train_command(a, &argv)?;
            println!("wrote {}", m.outputs.join(", "));
        }
        Command::Eval(a) => {
            let r = eval_command(a)?;
            println!(
                "{} accuracy on {}: {:.4} ({} examples)",
                r.kind.file_stem(),
                r.split,
                r.result.accuracy,
                r.result.n_examples
            );
            for (name, s) in r.labels.iter().zip(&r.result.per_class) {
                println!("  {name:<16} P {:.4}  R {:.4}  F1 {:.4}", s.precision, s.recall, s.f1);
            }
            if let (Some(c), Some(b)) = (&r.positive_class, &r.binary) {
                println!(
                    "one-vs-all {c}: P {:.4}  R {:.4}  F1 {:.4}{}",
                    b.precision,
                    b.recall,
                    b.f1,
                    if b.degenerate { "  (zero denominator)" } else { "" }
                );
            }
        }
        Command::Viz(a) => {
            let r = viz_command(a)?;
            println!(
                "probe accuracy {:.4}; wrote {} points to {}",
                r.probe_accuracy,
                r.n_points,
                a.out.display()
            );
        }
    }
    Ok(())
}
