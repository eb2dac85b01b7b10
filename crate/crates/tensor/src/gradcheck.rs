//! Central-difference gradient checking in 64-bit precision.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-4;

/// Floor on the relative-error denominator so that gradients that are zero
/// up to rounding do not blow the ratio up.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub name: String,
    /// Maximum relative error for each input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<40} max rel err {:.3e} (tol {:.0e}) {}",
            self.name,
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares the tape's gradient of `build`'s scalar output against central
/// differences for every element of every input.
///
/// `build` receives the graph and one tracked leaf per input and must return
/// a single-element output.
pub fn gradcheck<F>(
    name: &str,
    build: F,
    inputs: &[Tensor<f64>],
    tolerance: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = vals
            .iter()
            .map(|t| g.leaf(t.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, &var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[idx].len()]);
        let mut worst = 0.0f64;
        for (e, &exact) in analytic.iter().enumerate() {
            let orig = inputs[idx].data()[e];
            work[idx].data_mut()[e] = orig + STEP;
            let plus = eval(&work)?;
            work[idx].data_mut()[e] = orig - STEP;
            let minus = eval(&work)?;
            work[idx].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(exact, numeric));
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckReport {
        name: name.to_string(),
        per_input,
        max_rel_error,
        tolerance,
        passed: max_rel_error <= tolerance,
    })
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}
