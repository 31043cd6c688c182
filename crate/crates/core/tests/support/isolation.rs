//! Parameter-group isolation across the two alternating updates.

use advimit::corpus::{generate, CorpusSpec};
use advimit::params::ParamStore;
use advimit::training::Trainer;
use advimit::{Mode, PreparedData, Result, TrainConfig};

#[derive(Clone, Debug, Default)]
pub struct IsolationReport {
    /// Groups touched by a step that must leave them alone.
    pub violations: Vec<String>,
    /// Groups a step was supposed to move but did not.
    pub stuck: Vec<String>,
}

impl IsolationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.stuck.is_empty()
    }
}

const GROUPS: [&str; 4] = ["icnn.", "acnn.", "clf.", "disc."];

fn group_sums(store: &ParamStore) -> Vec<(&'static str, Vec<u64>)> {
    GROUPS
        .iter()
        .map(|&g| {
            let sums = store
                .ids_with_prefix(g)
                .into_iter()
                .map(|id| store.checksum(id))
                .collect();
            (g, sums)
        })
        .collect()
}

fn changed(before: &[(&'static str, Vec<u64>)], after: &[(&'static str, Vec<u64>)]) -> Vec<&'static str> {
    before
        .iter()
        .zip(after)
        .filter(|(b, a)| b.1 != a.1)
        .map(|(b, _)| b.0)
        .collect()
}

pub fn isolation_report() -> Result<IsolationReport> {
    let corpus = generate(&CorpusSpec {
        n_train: 60,
        n_dev: 20,
        n_test: 20,
        seed: 21,
        ..CorpusSpec::default()
    })?;
    let config = TrainConfig {
        mode: Mode::Adversarial,
        embed_dim: 6,
        filters: "2x4,3x4".parse()?,
        hidden_dim: 8,
        disc_width: 6,
        max_len: 12,
        learning_rate: 0.05,
        seed: 4,
        ..TrainConfig::default()
    };
    let data = PreparedData::new(&corpus.train, &corpus.dev, &corpus.test, &config)?;
    let mut trainer = Trainer::new(&config, &data)?;
    let batch: Vec<_> = trainer.instances()[..8].to_vec();
    let mut report = IsolationReport::default();

    let before = group_sums(&trainer.system.store);
    trainer.discriminator_step(&batch)?;
    let after = group_sums(&trainer.system.store);
    let moved = changed(&before, &after);
    for g in moved.iter().filter(|&&g| g != "disc.") {
        report.violations.push(format!("discriminator step changed {g}*"));
    }
    if !moved.contains(&"disc.") {
        report.stuck.push("discriminator step left disc.* unchanged".into());
    }

    let before = after;
    trainer.joint_step(&batch)?;
    let after = group_sums(&trainer.system.store);
    let moved = changed(&before, &after);
    for g in moved.iter().filter(|&&g| g == "disc." || g == "acnn.") {
        report.violations.push(format!("joint step changed {g}*"));
    }
    for g in ["icnn.", "clf."] {
        if !moved.contains(&g) {
            report.stuck.push(format!("joint step left {g}* unchanged"));
        }
    }
    Ok(report)
}
