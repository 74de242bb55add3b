//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;

/// Options for a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check every coordinate when the total parameter count is at most this;
    /// otherwise probe a random coordinate subset.
    pub exhaustive_limit: usize,
    /// Number of random coordinate probes for large parameter sets.
    pub probes: usize,
    /// Seed for probe selection.
    pub seed: u64,
    /// Skip coordinates whose combined |analytic| + |numeric| magnitude is
    /// below this floor (0 disables). Central differences bottom out at
    /// machine-noise over the step, so comparisons below that are vacuous.
    pub grad_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            exhaustive_limit: 512,
            probes: 256,
            seed: 0,
            grad_floor: 0.0,
        }
    }
}

/// Result of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over probed coordinates of |ga - gfd| / max(1e-8, |ga| + |gfd|)
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

/// Compare an analytic gradient against central finite differences.
///
/// `f` is a scalar loss over the store; `names` selects the parameters under
/// test; `analytic` is their gradient flattened in `names` order.
pub fn grad_check<F>(
    f: F,
    store: &ParamStore,
    names: &[String],
    analytic: &[f64],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let total = store.total_len(names)?;
    if analytic.len() != total {
        return Err(Error::Dim(format!(
            "analytic gradient has {} entries, parameters have {}",
            analytic.len(),
            total
        )));
    }
    let coords: Vec<usize> = if total <= opts.exhaustive_limit {
        (0..total).collect()
    } else {
        let mut rng = Rng::new(opts.seed).split("gradcheck.probes");
        (0..opts.probes).map(|_| rng.below(total)).collect()
    };

    let mut work = store.clone();
    let mut flat = store.flatten(names)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: coords.len(),
    };

    for &c in &coords {
        let orig = flat[c];
        flat[c] = orig + opts.step;
        work.unflatten(names, &flat)?;
        let fp = f(&work)?;
        flat[c] = orig - opts.step;
        work.unflatten(names, &flat)?;
        let fm = f(&work)?;
        flat[c] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric("non-finite loss during gradient check".into()));
        }
        let gfd = (fp - fm) / (2.0 * opts.step);
        let ga = analytic[c];
        if opts.grad_floor > 0.0 && ga.abs() + gfd.abs() < opts.grad_floor {
            continue;
        }
        let rel = (ga - gfd).abs() / (1e-8f64).max(ga.abs() + gfd.abs());
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            let (name, idx) = locate(store, names, c)?;
            report.worst_param = name;
            report.worst_index = idx;
            report.analytic_at_worst = ga;
            report.numeric_at_worst = gfd;
        }
    }
    work.unflatten(names, &flat)?;
    Ok(report)
}

fn locate(store: &ParamStore, names: &[String], flat_index: usize) -> Result<(String, usize)> {
    let mut o = 0;
    for name in names {
        let n = store.get(name)?.len();
        if flat_index < o + n {
            return Ok((name.clone(), flat_index - o));
        }
        o += n;
    }
    Err(Error::Dim("flat index out of range".into()))
}
