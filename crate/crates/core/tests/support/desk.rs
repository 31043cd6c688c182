//! Desk-scale experiment settings and the multi-seed runs built on them.

use std::time::{Duration, Instant};

use advimit::corpus::{generate, CorpusSpec};
use advimit::eval::{evaluate_implicit, probe_separability};
use advimit::training::train;
use advimit::{Mode, MetricsRecord, PreparedData, Result, System, TrainConfig};

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const PROBE_SEED: u64 = 17;

pub fn desk_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        embed_dim: 32,
        filters: "2x16,4x16,8x16".parse().expect("filter spec"),
        disc_width: 64,
        max_len: 24,
        learning_rate: 0.01,
        pretrain_epochs: 4,
        adversarial_epochs: 8,
        seed,
        ..TrainConfig::default()
    }
}

/// The same settings as CLI flags, for runs through the binary.
pub const DESK_FLAGS: [&str; 16] = [
    "--embed-dim", "32",
    "--filters", "2x16,4x16,8x16",
    "--disc-width", "64",
    "--max-len", "24",
    "--learning-rate", "0.01",
    "--pretrain-epochs", "4",
    "--adversarial-epochs", "8",
    "--lambda1", "0.1",
];

pub fn default_data() -> Result<PreparedData> {
    let corpus = generate(&CorpusSpec::default())?;
    PreparedData::new(&corpus.train, &corpus.dev, &corpus.test, &desk_config(Mode::CnnOnly, 0))
}

fn dev_pairs(system: &System, data: &PreparedData) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut a = Vec::with_capacity(data.dev.len());
    let mut i = Vec::with_capacity(data.dev.len());
    for ex in &data.dev {
        a.push(system.augmented_feature(ex)?.expect("augmented encoder"));
        i.push(system.implicit_feature(ex)?);
    }
    Ok((a, i))
}

#[derive(Clone, Debug)]
pub struct AdversarialRun {
    pub records: Vec<MetricsRecord>,
    pub final_test: f64,
    pub probe_pretrained: f64,
    pub probe_final: f64,
    pub elapsed: Duration,
}

pub fn adversarial_run(data: &PreparedData, seed: u64) -> Result<AdversarialRun> {
    let config = desk_config(Mode::Adversarial, seed);
    let start = Instant::now();
    let out = train(&config, data)?;
    let elapsed = start.elapsed();
    let final_test = evaluate_implicit(&out.system, &data.test)?.accuracy;
    let (a, i) = dev_pairs(&out.system, data)?;
    let probe_final = probe_separability(&a, &i, PROBE_SEED)?;
    let mut pretrained = out.system.clone();
    pretrained.store = out.pretrained.clone().expect("pretrain snapshot");
    let (a, i) = dev_pairs(&pretrained, data)?;
    let probe_pretrained = probe_separability(&a, &i, PROBE_SEED)?;
    Ok(AdversarialRun {
        records: out.records,
        final_test,
        probe_pretrained,
        probe_final,
        elapsed,
    })
}

pub fn baseline_test_accuracy(data: &PreparedData, mode: Mode, seed: u64) -> Result<f64> {
    let out = train(&desk_config(mode, seed), data)?;
    Ok(evaluate_implicit(&out.system, &data.test)?.accuracy)
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}
