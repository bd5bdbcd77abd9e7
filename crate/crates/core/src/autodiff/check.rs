use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so gradients that are zero up
/// to rounding do not blow the ratio up.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (parameter, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences on `samples` random coordinates of the unfrozen parameters
/// (every coordinate if there are fewer).
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, eps: f64, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let mut analytic = store.cast::<f64>();
    g.accumulate_into(&mut analytic);

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .filter(|&id| !store.is_frozen(id))
        .flat_map(|id| (0..store.value(id).len()).map(move |j| (id, j)))
        .collect();
    let picked: Vec<(ParamId, usize)> = if coords.len() <= samples {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples).map(|_| coords[rng.gen_range(0..coords.len())]).collect()
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (id, j) in picked {
        let x0 = store.value(id).data[j];
        probe.value_mut(id).data[j] = x0 + eps;
        let fp = eval(&f, &probe)?;
        probe.value_mut(id).data[j] = x0 - eps;
        let fm = eval(&f, &probe)?;
        probe.value_mut(id).data[j] = x0;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.grad(id)[j];
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
        }
        let e = rel_error(a, numeric);
        report.checked += 1;
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((store.name(id).to_string(), j, a, numeric));
        }
    }
    Ok(report)
}
