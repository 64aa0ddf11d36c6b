//! Central finite-difference verification of tape gradients.

use super::{ParameterSet, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Multiplies the analytic gradient before comparison. `1.0` for a real
    /// check; anything else is a negative control.
    pub corrupt: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            floor: 1e-6,
            corrupt: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input or parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = rel;
            self.worst = Some((name.to_string(), idx));
        }
    }
}

/// Checks `d f / d inputs` for a scalar-valued `f` of free tensors.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for j in 0..inputs[k].len() {
            let orig = inputs[k].data()[j];
            work[k].data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            report.record(
                &format!("input{k}"),
                j,
                analytic.data()[j] * opts.corrupt,
                numeric,
                opts.floor,
            );
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar loss with respect to every value of every
/// parameter in `params` (or only those named in `only`, when given).
pub fn gradcheck_params<F>(
    params: &ParameterSet,
    f: F,
    only: Option<&[&str]>,
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let grads = tape.backward(out)?;
    let analytic = tape.param_grads(&grads);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        if let Some(only) = only {
            if !only.contains(&name.as_str()) {
                continue;
            }
        }
        let len = params.get(&name)?.len();
        let a = analytic.get(&name);
        for j in 0..len {
            let orig = params.get(&name)?.data()[j];
            work.get_mut(&name)?.data_mut()[j] = orig + opts.eps;
            let plus = {
                let mut t = Tape::new();
                let o = f(&mut t, &work)?;
                t.value(o).item()
            };
            work.get_mut(&name)?.data_mut()[j] = orig - opts.eps;
            let minus = {
                let mut t = Tape::new();
                let o = f(&mut t, &work)?;
                t.value(o).item()
            };
            work.get_mut(&name)?.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let an = a.map_or(0.0, |g| g.data()[j]);
            report.record(&name, j, an * opts.corrupt, numeric, opts.floor);
        }
    }
    Ok(report)
}
