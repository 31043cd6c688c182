//! JSON checkpoints of trained components.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::Tensor;
use crate::text::{LabelSet, Vocabulary};
use crate::training::{PreparedData, System};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Implicit network and the classifier: the model used at test time.
    Implicit,
    /// Connective-augmented encoder and the classifier.
    Augmented,
    Discriminator,
}

impl CheckpointKind {
    pub fn file_stem(self) -> &'static str {
        match self {
            CheckpointKind::Implicit => "icnn",
            CheckpointKind::Augmented => "acnn",
            CheckpointKind::Discriminator => "disc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: TrainConfig,
    pub labels: Vec<String>,
    pub vocab_tokens: Vec<String>,
    pub vocab_fingerprint: String,
    pub connectives: Vec<String>,
    /// Positive class when trained on a one-vs-all relabelling.
    #[serde(default)]
    pub one_vs_all: Option<String>,
    pub params: BTreeMap<String, StoredTensor>,
}

fn component_params(system: &System, kind: CheckpointKind) -> Option<Vec<ParamId>> {
    match kind {
        CheckpointKind::Implicit => {
            let mut ids = system.implicit.params();
            ids.extend(system.classifier.params());
            if let Some(h) = &system.connective_head {
                ids.extend([h.weight, h.bias]);
            }
            Some(ids)
        }
        CheckpointKind::Augmented => system.augmented.as_ref().map(|a| {
            let mut ids = a.params();
            ids.extend(system.classifier.params());
            ids
        }),
        CheckpointKind::Discriminator => system.discriminator.as_ref().map(|d| d.params()),
    }
}

impl Checkpoint {
    /// Captures one component of `system`; `None` if the mode lacks it.
    pub fn capture(
        system: &System,
        kind: CheckpointKind,
        vocab: &Vocabulary,
        labels: &LabelSet,
    ) -> Option<Self> {
        let ids = component_params(system, kind)?;
        let params = ids
            .into_iter()
            .map(|id| {
                let t = system.store.get(id);
                (
                    system.store.name(id).to_string(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.values().to_vec(),
                    },
                )
            })
            .collect();
        Some(Checkpoint {
            format_version: FORMAT_VERSION,
            kind,
            config: system.config.clone(),
            labels: labels.names().to_vec(),
            vocab_tokens: vocab.tokens().to_vec(),
            vocab_fingerprint: vocab.fingerprint(),
            connectives: system.connectives.clone(),
            one_vs_all: None,
            params,
        })
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.vocab_tokens.clone())
    }

    pub fn label_set(&self) -> LabelSet {
        LabelSet::new(self.labels.clone())
    }

    /// Fails unless `vocab` is the vocabulary this checkpoint was trained on.
    pub fn check_compatible(&self, vocab: &Vocabulary) -> Result<()> {
        let fp = vocab.fingerprint();
        if fp != self.vocab_fingerprint {
            return Err(Error::Compatibility(format!(
                "vocabulary fingerprint {fp} does not match checkpoint {}",
                self.vocab_fingerprint
            )));
        }
        Ok(())
    }

    /// Copies the stored tensors into `system`, by name and shape.
    pub fn load_into(&self, system: &mut System) -> Result<()> {
        for (name, stored) in &self.params {
            let id = system
                .store
                .id(name)
                .ok_or_else(|| Error::Compatibility(format!("checkpoint parameter `{name}` has no slot")))?;
            let slot = system.store.get_mut(id);
            if slot.shape() != stored.shape.as_slice() {
                return Err(Error::Compatibility(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    slot.shape(),
                    stored.shape
                )));
            }
            *slot = Tensor::new(stored.shape.clone(), stored.values.clone())?;
        }
        Ok(())
    }

    /// Rebuilds a system around this checkpoint. Components it does not
    /// cover keep their seeded initial values.
    pub fn restore(&self) -> Result<System> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let vocab = self.vocabulary();
        let table = Tensor::zeros(&[vocab.len(), self.config.embed_dim]);
        let mut system = System::new(&self.config, self.labels.len(), table, self.connectives.clone())?;
        self.load_into(&mut system)?;
        Ok(system)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::io(path, e.into()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Writes every component `system` has as `{prefix}{stem}.json` under
/// `dir`. Returns the written paths.
pub fn save_components(
    system: &System,
    data: &PreparedData,
    dir: &Path,
    prefix: &str,
    one_vs_all: Option<&str>,
) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for kind in [
        CheckpointKind::Implicit,
        CheckpointKind::Augmented,
        CheckpointKind::Discriminator,
    ] {
        if let Some(mut ck) = Checkpoint::capture(system, kind, &data.vocab, &data.labels) {
            ck.one_vs_all = one_vs_all.map(str::to_string);
            let path = dir.join(format!("{prefix}{}.json", kind.file_stem()));
            ck.save(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}
