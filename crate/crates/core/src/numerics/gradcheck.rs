//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParameterStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Coordinates to sample, spread evenly over parameters; 0 checks all.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<CoordinateCheck>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `loss` against central
/// differences `(f(w + eps) - f(w - eps)) / (2 eps)` on sampled parameter
/// coordinates. Parameters are restored before returning.
pub fn grad_check<F>(store: &mut ParameterStore, mut loss: F, options: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore) -> Result<(f64, Gradients)>,
{
    if !(1e-7..=1e-3).contains(&options.eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps {} outside [1e-7, 1e-3]",
            options.eps
        )));
    }
    let (base, analytic) = loss(store)?;
    if !base.is_finite() {
        return Err(Error::Numeric("loss is not finite at the base point".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let ids: Vec<_> = store.ids().collect();
    let per_param = if options.samples == 0 {
        usize::MAX
    } else {
        options.samples.div_ceil(ids.len().max(1))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for id in ids {
        let size = store.value(id).len();
        let coords: Vec<usize> = if per_param >= size {
            (0..size).collect()
        } else {
            let mut picked = sample(&mut rng, size, per_param).into_vec();
            picked.sort_unstable();
            picked
        };
        for index in coords {
            let original = store.value(id).values()[index];
            store.value_mut(id).values_mut()[index] = original + options.eps;
            let plus = loss(store).map(|(v, _)| v);
            store.value_mut(id).values_mut()[index] = original - options.eps;
            let minus = loss(store).map(|(v, _)| v);
            store.value_mut(id).values_mut()[index] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is not finite when perturbing `{}`[{index}]",
                    store.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * options.eps);
            let a = analytic.coordinate(id, index);
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(CoordinateCheck {
                    param: store.name(id).to_string(),
                    index,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
