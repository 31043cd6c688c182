//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` returns the function value and its analytic gradient at the given point.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(x)?;
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        let orig = x.values()[j];
        probe.values_mut()[j] = orig + h;
        let (plus, _) = f(&probe)?;
        probe.values_mut()[j] = orig - h;
        let (minus, _) = f(&probe)?;
        probe.values_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_err(analytic[j], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of parameter gradients held in a store.
///
/// At most `max_coords` randomly chosen coordinates are probed per parameter
/// (all of them when the parameter is smaller).
pub fn check_params<F, R>(
    store: &mut ParamStore,
    params: &[ParamId],
    analytic: &Gradients,
    mut loss: F,
    h: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
    R: Rng + ?Sized,
{
    let mut worst = 0.0f64;
    for &id in params {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(rng, n, max_coords).into_vec()
        };
        for j in coords {
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            let orig = store.get(id).values()[j];
            store.get_mut(id).values_mut()[j] = orig + h;
            let plus = loss(store)?;
            store.get_mut(id).values_mut()[j] = orig - h;
            let minus = loss(store)?;
            store.get_mut(id).values_mut()[j] = orig;
            worst = worst.max(rel_err(a, (plus - minus) / (2.0 * h)));
        }
    }
    Ok(worst)
}
