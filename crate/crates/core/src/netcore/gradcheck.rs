//! Central-difference gradient checking in double precision.

use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter path and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Entries compared at a reduced step because the loss was not smooth
    /// within the requested one.
    pub refined: usize,
}

/// Step reductions tried at a non-smooth entry, each dividing the step by 10.
const MAX_REFINEMENTS: usize = 2;

/// One-sided slopes that differ by more than this fraction (of the larger
/// slope, or absolutely below 1) mark a kink inside the step.
const KINK_RATIO: f64 = 1e-4;

/// Compares graph gradients with central differences for a sample of entries
/// of every trainable parameter.
///
/// `build` must construct a scalar loss from `params`. It is called once on a
/// recording graph and twice per sampled entry on non-recording graphs.
/// Frozen weights and buffers are never sampled.
///
/// Piecewise-linear ops (ReLU, max pooling) make the loss non-differentiable
/// at isolated points. When the forward and backward one-sided slopes at an
/// entry disagree, a switch lies within `eps` of it and the central
/// difference there measures an average of two slopes; the step is then
/// reduced (down to `eps / 100`) until both sides agree.
pub fn gradient_check<F>(
    params: &mut ParameterSet<f64>,
    mut build: F,
    eps: f64,
    samples_per_param: usize,
    seed_value: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &mut ParameterSet<f64>) -> Result<Var<f64>>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "gradient check epsilon {eps} outside [1e-6, 1e-3]"
        )));
    }
    fn eval<F>(build: &mut F, params: &mut ParameterSet<f64>) -> Result<f64>
    where
        F: FnMut(&mut Graph<f64>, &mut ParameterSet<f64>) -> Result<Var<f64>>,
    {
        let mut g = Graph::no_grad();
        let loss = build(&mut g, params)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {v} during gradient check"
            )));
        }
        Ok(v)
    }

    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    if !loss.item().is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", loss.item())));
    }
    let grads = g.backward(&loss)?;
    drop(loss);
    let base = eval(&mut build, params)?;

    let names: Vec<String> = params
        .iter()
        .filter(|(_, e)| e.trainable())
        .map(|(n, _)| n.clone())
        .collect();
    let mut report = GradCheckReport::default();
    for name in names {
        let numel = params.value(&name)?.numel();
        let picks: Vec<usize> = if numel <= samples_per_param {
            (0..numel).collect()
        } else {
            let mut rng = seed::rng_for(seed_value, &name);
            let mut v = sample(&mut rng, numel, samples_per_param).into_vec();
            v.sort_unstable();
            v
        };
        for idx in picks {
            let analytic = grads.by_param.get(&name).map_or(0.0, |t| t.data()[idx]);
            let original = params.value(&name)?.data()[idx];
            let mut step = eps;
            let mut numeric;
            let mut refinements = 0;
            loop {
                params.get_mut(&name).expect("present").value.data_mut()[idx] = original + step;
                let plus = eval(&mut build, params);
                params.get_mut(&name).expect("present").value.data_mut()[idx] = original - step;
                let minus = eval(&mut build, params);
                params.get_mut(&name).expect("present").value.data_mut()[idx] = original;
                let (plus, minus) = (plus?, minus?);
                numeric = (plus - minus) / (2.0 * step);
                let forward = (plus - base) / step;
                let backward = (base - minus) / step;
                let smooth = (forward - backward).abs()
                    <= KINK_RATIO * 1f64.max(forward.abs()).max(backward.abs());
                if smooth || refinements == MAX_REFINEMENTS {
                    break;
                }
                refinements += 1;
                step /= 10.0;
            }
            if refinements > 0 {
                report.refined += 1;
            }
            let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
