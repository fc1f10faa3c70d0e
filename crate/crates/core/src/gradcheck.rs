//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Bindings, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that near-zero gradients
    /// are compared on an absolute scale.
    pub floor: f64,
    /// Cap on checked entries per tensor; entries are spread evenly.
    pub max_entries: Option<usize>,
    /// Random dense directions per tensor for the directional checks.
    pub directions: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, tolerance: 1e-4, floor: 1e-5, max_entries: None, directions: 4 }
    }
}

/// Outcome of one check.
///
/// Pass or fail is decided by directional derivatives: for random unit
/// directions `u` with entries of equal magnitude over each tensor, `grad · u`
/// against the central difference of the loss along `u`. Per-entry errors
/// are reported alongside. A single coordinate with a gradient far below the
/// loss scale has a central difference dominated by rounding, so it is a
/// diagnostic, not the verdict.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Number of directional checks.
    pub checked: usize,
    pub max_rel_error: f64,
    /// Number of single-entry checks and their worst relative error.
    pub entries: usize,
    pub max_entry_error: f64,
    /// `(tensor index, entry, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<34} directions={:<4} max_rel_err={:.3e}  entries={:<6} max_entry_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_error,
            self.entries,
            self.max_entry_error
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn entries(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(cap) if cap < len => {
            // Evenly spread, always including the first and last entries.
            let mut v: Vec<usize> = (0..cap).map(|i| i * (len - 1) / (cap - 1).max(1)).collect();
            v.dedup();
            v
        }
        _ => (0..len).collect(),
    }
}

fn compare(
    name: &str,
    mut values: Vec<Tensor>,
    analytic: &[Tensor],
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        name: name.to_owned(),
        checked: 0,
        max_rel_error: 0.0,
        entries: 0,
        max_entry_error: 0.0,
        worst: None,
        passed: true,
    };
    for t in 0..values.len() {
        for i in entries(values[t].numel(), opts.max_entries) {
            let orig = values[t].data()[i];
            values[t].data_mut()[i] = orig + opts.step;
            let plus = eval(&values)?;
            values[t].data_mut()[i] = orig - opts.step;
            let minus = eval(&values)?;
            values[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[t].data()[i];
            let err = relative_error(a, numeric, opts.floor);
            report.entries += 1;
            if err > report.max_entry_error || report.worst.is_none() {
                report.max_entry_error = report.max_entry_error.max(err);
                report.worst = Some((t, i, a, numeric));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let orig = values[t].clone();
        for _ in 0..opts.directions {
            // Unit length, so the step moves the point no further than a
            // single-entry check does.
            let unit = 1.0 / (orig.numel() as f64).sqrt();
            let u: Vec<f64> = (0..orig.numel()).map(|_| if rng.random_bool(0.5) { unit } else { -unit }).collect();
            let shifted = |sign: f64| {
                let mut v = orig.clone();
                for (x, d) in v.data_mut().iter_mut().zip(&u) {
                    *x += sign * opts.step * d;
                }
                v
            };
            values[t] = shifted(1.0);
            let plus = eval(&values)?;
            values[t] = shifted(-1.0);
            let minus = eval(&values)?;
            values[t] = orig.clone();
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a: f64 = analytic[t].data().iter().zip(&u).map(|(g, d)| g * d).sum();
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric, opts.floor));
        }
    }
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}

/// Reduces an arbitrary output to a scalar with a fixed random projection,
/// so that every output entry participates in the check.
pub fn project<'g>(out: Var<'g>, seed: u64) -> Result<Var<'g>> {
    if out.shape().iter().product::<usize>() == 1 {
        return Ok(out.sum());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut rng);
    out.mul(out.graph().constant(weights)).map(|v| v.sum())
}

/// Checks the gradient of `f` with respect to every entry of `inputs`.
pub fn check_function<F>(name: &str, inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    check_inputs(name, &ParamStore::new(), inputs, |p, v| f(p.graph(), v), opts)
}

/// Like [`check_function`], with `store` bound as constants so that `f` can
/// run modules whose parameters are held fixed.
pub fn check_inputs<F>(
    name: &str,
    store: &ParamStore,
    inputs: &[Tensor],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&Bindings<'g>, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::new();
        let p = Bindings::new(&g, store, false);
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = project(f(&p, &vars)?, 0x5eed)?;
        let mut grads = g.backward(loss)?;
        vars.iter().map(|&v| grads.take_or_zeros(v)).collect::<Vec<_>>()
    };
    let eval = |values: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let p = Bindings::new(&g, store, false);
        let vars: Vec<Var<'_>> = values.iter().map(|t| g.constant(t.clone())).collect();
        let loss = project(f(&p, &vars)?, 0x5eed)?;
        g.check()?;
        Ok(loss.item())
    };
    compare(name, inputs.to_vec(), &analytic, eval, opts)
}

/// Checks the gradient of a scalar loss with respect to every parameter in `store`.
pub fn check_parameters<F>(name: &str, store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&Bindings<'g>) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::new();
        let bind = Bindings::new(&g, store, true);
        let loss = f(&bind)?;
        bind.collect(g.backward(loss)?)
    };
    let mut scratch = store.clone();
    let eval = |values: &[Tensor]| -> Result<f64> {
        scratch.values_mut().clone_from_slice(values);
        let g = Graph::new();
        let bind = Bindings::new(&g, &scratch, false);
        let loss = f(&bind)?;
        g.check()?;
        Ok(loss.item())
    };
    compare(name, store.values().to_vec(), &analytic, eval, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::new(&[3], vec![-1.0, 0.5, 2.0]).unwrap();
        let ok = check_function("square", &[x.clone()], |_, v| v[0].mul(v[0]), &Default::default()).unwrap();
        assert!(ok.passed, "{ok}");
        let bad = check_function(
            "leaky",
            &[x],
            |g, v| {
                // Forward value is 2x but the constant copy hides half the gradient.
                let detached = g.constant((*v[0].value()).clone());
                v[0].add(detached)
            },
            &Default::default(),
        )
        .unwrap();
        assert!(!bad.passed);
    }

    #[test]
    fn sampled_entries_cover_ends() {
        assert_eq!(entries(10, Some(4)), vec![0, 3, 6, 9]);
        assert_eq!(entries(3, Some(8)), vec![0, 1, 2]);
    }
}
