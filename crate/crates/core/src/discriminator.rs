//! Gated MLP that scores whether a feature vector came from the
//! connective-augmented encoder.
//!
//! Four tanh layers; layer 2 feeds layer 3 and the output of layer 1 is
//! carried into layers 3 and 4 through highway-style gates:
//!
//! ```text
//! h1 = tanh(W1 x)        h2 = tanh(W2 h1)
//! h3 = gate(h1, tanh(W3 h2))
//! h4 = gate(h1, tanh(W4 h3))
//! D(x) = sigmoid(w . h4)
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct DenseParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseParams {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DenseParams {
            weight: store.insert(
                format!("{name}.weight"),
                Tensor::glorot(&[output, input], input, output, rng),
            )?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[output]))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var, act: Activation) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.dense(x, w, b, act)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub layers: [DenseParams; 4],
    pub gates: [DenseParams; 2],
    pub output: DenseParams,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let l1 = DenseParams::new(store, &format!("{prefix}.layer1"), input_dim, width, rng)?;
        let l2 = DenseParams::new(store, &format!("{prefix}.layer2"), width, width, rng)?;
        let l3 = DenseParams::new(store, &format!("{prefix}.layer3"), width, width, rng)?;
        let l4 = DenseParams::new(store, &format!("{prefix}.layer4"), width, width, rng)?;
        let g3 = DenseParams::new(store, &format!("{prefix}.gate3"), width, width, rng)?;
        let g4 = DenseParams::new(store, &format!("{prefix}.gate4"), width, width, rng)?;
        let out = DenseParams::new(store, &format!("{prefix}.out"), width, 1, rng)?;
        Ok(Discriminator {
            layers: [l1, l2, l3, l4],
            gates: [g3, g4],
            output: out,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .chain(&self.gates)
            .chain(std::iter::once(&self.output))
            .flat_map(|d| [d.weight, d.bias])
            .collect()
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.layers[0].weight).shape()[1]
    }

    /// Output logit before the sigmoid.
    pub fn logit(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        let h1 = self.layers[0].apply(tape, feature, Activation::Tanh)?;
        let h2 = self.layers[1].apply(tape, h1, Activation::Tanh)?;
        let t3 = self.layers[2].apply(tape, h2, Activation::Tanh)?;
        let h3 = gated_merge(tape, h1, t3, &self.gates[0])?;
        let t4 = self.layers[3].apply(tape, h3, Activation::Tanh)?;
        let h4 = gated_merge(tape, h1, t4, &self.gates[1])?;
        self.output.apply(tape, h4, Activation::Identity)
    }

    /// `D(H)`: probability that `feature` came from the augmented encoder.
    pub fn discriminate(&self, tape: &mut Tape, feature: Var) -> Result<Var> {
        let z = self.logit(tape, feature)?;
        Ok(tape.sigmoid(z))
    }
}

/// `g * transform + (1 - g) * carry` with `g = sigmoid(W carry + b)`.
pub fn gated_merge(tape: &mut Tape, carry: Var, transform: Var, gate: &DenseParams) -> Result<Var> {
    if tape.shape(carry) != tape.shape(transform) {
        return Err(Error::invalid(format!(
            "gated_merge shape mismatch: carry {:?}, transform {:?}",
            tape.shape(carry),
            tape.shape(transform)
        )));
    }
    let g = gate.apply(tape, carry, Activation::Sigmoid)?;
    let passed = tape.mul(g, transform)?;
    let keep = tape.one_minus(g);
    let kept = tape.mul(keep, carry)?;
    tape.add(passed, kept)
}

/// "Augmented" iff `D(H) > 0.5`; exactly 0.5 counts as implicit.
pub fn predicts_augmented(prob: f64) -> bool {
    prob > 0.5
}
