//! The five training objectives, built on a tape.
//!
//! * discriminator: `mean[ln D(H_A) + ln(1 - D(H_I))]`, maximized over D
//! * implicit classification: `mean J(C(H_I), y)`
//! * adversarial: `mean ln(1 - D(H_I))`, minimized by the implicit encoder
//! * augmented classification: `mean J(C(H_A), y)`
//! * joint: `L_IC + lambda1 * L_I + lambda2 * L_A`

use crate::discriminator::{Discriminator, PROB_CLAMP};
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tape::{Tape, Var};

fn clamped_ln(tape: &mut Tape, p: Var) -> Var {
    tape.log_clamped(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn clamped_ln_complement(tape: &mut Tape, p: Var) -> Var {
    let q = tape.one_minus(p);
    tape.log_clamped(q, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Discriminator objective from already computed probabilities
/// `D(H_A)` and `D(H_I)`, paired by position.
pub fn discriminator_objective(tape: &mut Tape, p_aug: &[Var], p_imp: &[Var]) -> Result<Var> {
    if p_aug.is_empty() || p_aug.len() != p_imp.len() {
        return Err(Error::invalid(format!(
            "discriminator loss needs a non-empty paired batch, got {} and {}",
            p_aug.len(),
            p_imp.len()
        )));
    }
    let mut terms = Vec::with_capacity(p_aug.len());
    for (&a, &i) in p_aug.iter().zip(p_imp) {
        let la = clamped_ln(tape, a);
        let li = clamped_ln_complement(tape, i);
        terms.push(tape.add(la, li)?);
    }
    tape.mean(&terms)
}

/// Mean of `ln D(H_A) + ln(1 - D(H_I))` over `(H_A, H_I)` feature pairs;
/// the discriminator maximizes it.
pub fn loss_discriminator(tape: &mut Tape, disc: &Discriminator, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::invalid("discriminator loss over an empty batch"));
    }
    let mut pa = Vec::with_capacity(pairs.len());
    let mut pi = Vec::with_capacity(pairs.len());
    for &(ha, hi) in pairs {
        pa.push(disc.discriminate(tape, ha)?);
        pi.push(disc.discriminate(tape, hi)?);
    }
    discriminator_objective(tape, &pa, &pi)
}

/// Adversarial objective from already computed `D(H_I)` values.
pub fn adversarial_objective(tape: &mut Tape, p_imp: &[Var]) -> Result<Var> {
    if p_imp.is_empty() {
        return Err(Error::invalid("adversarial loss over an empty batch"));
    }
    let terms: Vec<Var> = p_imp
        .iter()
        .map(|&p| clamped_ln_complement(tape, p))
        .collect();
    tape.mean(&terms)
}

pub fn loss_adversarial(tape: &mut Tape, disc: &Discriminator, features: &[Var]) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::invalid("adversarial loss over an empty batch"));
    }
    let mut probs = Vec::with_capacity(features.len());
    for &h in features {
        probs.push(disc.discriminate(tape, h)?);
    }
    adversarial_objective(tape, &probs)
}

/// Mean cross-entropy of the shared classifier over `(feature, gold)` pairs.
/// Used for both the implicit and the augmented classification losses.
pub fn loss_classification(tape: &mut Tape, clf: &Classifier, batch: &[(Var, usize)]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("classification loss over an empty batch"));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for &(h, y) in batch {
        terms.push(clf.xent(tape, h, y)?);
    }
    tape.mean(&terms)
}

pub fn loss_implicit_classification(
    tape: &mut Tape,
    clf: &Classifier,
    batch: &[(Var, usize)],
) -> Result<Var> {
    loss_classification(tape, clf, batch)
}

pub fn loss_augmented(tape: &mut Tape, clf: &Classifier, batch: &[(Var, usize)]) -> Result<Var> {
    loss_classification(tape, clf, batch)
}

/// `L_IC + lambda1 * L_I + lambda2 * L_A`. Terms with a zero weight (or
/// absent) are left out of the graph entirely.
pub fn loss_joint(
    tape: &mut Tape,
    l_ic: Var,
    l_i: Option<Var>,
    l_a: Option<Var>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    let mut total = l_ic;
    for (term, w) in [(l_i, lambda1), (l_a, lambda2)] {
        if let Some(t) = term {
            if w != 0.0 {
                let scaled = tape.scale(t, w);
                total = tape.add(total, scaled)?;
            }
        }
    }
    Ok(total)
}
