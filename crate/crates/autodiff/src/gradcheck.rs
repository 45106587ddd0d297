//! Central finite-difference oracle for parameter gradients.

use crate::graph::{Graph, Var};
use crate::nn::{ParamId, ParamSet};
use crate::tensor::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Upper bound on checked entries per parameter (evenly strided); `None` checks all.
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            floor: 1e-3,
            max_per_param: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Parameters whose analytic gradient was entirely absent.
    pub unused: Vec<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares the tape gradient of `loss` against central differences for every
/// entry of every parameter.
pub fn check<F>(params: &ParamSet, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::with_params(params);
        let l = loss(&g)?;
        g.backward(l)?.params()
    };
    let eval = |p: &ParamSet| -> Result<f64> {
        let g = Graph::inference(p);
        Ok(loss(&g)?.item())
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        unused: Vec::new(),
    };
    let mut work = params.clone();
    for id in params.ids() {
        let n = params.get(id).len();
        let grad = analytic[id.0].as_ref();
        if grad.is_none() {
            report.unused.push(params.name(id).to_string());
        }
        let stride = match opts.max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let numeric = central_difference(&mut work, id, idx, opts.step, &eval)?;
            let a = grad.map_or(0.0, |g| g.data()[idx]);
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if report.checked == 1 || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = idx;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn central_difference(
    work: &mut ParamSet,
    id: ParamId,
    idx: usize,
    h: f64,
    eval: &impl Fn(&ParamSet) -> Result<f64>,
) -> Result<f64> {
    let orig = work.get(id).data()[idx];
    work.get_mut(id).data_mut()[idx] = orig + h;
    let plus = eval(work);
    work.get_mut(id).data_mut()[idx] = orig - h;
    let minus = eval(work);
    work.get_mut(id).data_mut()[idx] = orig;
    Ok((plus? - minus?) / (2.0 * h))
}
