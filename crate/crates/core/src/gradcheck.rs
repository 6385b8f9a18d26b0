//! Central-difference verification of tape gradients, in 64-bit.

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Where the worst error occurred: parameter name (or "x") and flat index.
    pub worst: (String, usize),
    pub checked: usize,
}

fn check_eps(eps: f64) -> Result<()> {
    ensure!(
        (1e-6..=1e-3).contains(&eps),
        "finite-difference step {eps} outside [1e-6, 1e-3]"
    );
    Ok(())
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    ensure!(
        g.value(v).len() == 1,
        "checked function must return a scalar, got {:?}",
        g.shape(v)
    );
    Ok(g.item(v))
}

/// Worst relative error between the reverse-mode gradient of `f` at `x`
/// and its central-difference estimate, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    Ok(grad_check_report(f, x, eps)?.max_relative_error)
}

pub fn grad_check_report<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let xv = g.variable(x.clone())?;
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t)?;
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: ("x".into(), 0),
        checked: x.len(),
    };
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = relative_error(a, numeric);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = ("x".into(), i);
        }
    }
    Ok(report)
}

/// Same check over the named entries of a parameter store. `f` builds the
/// scalar objective from the store on a fresh graph.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, names: &[&str], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let mut with_grads = store.clone();
    grads.write_to(&g, &mut with_grads)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    let mut probe = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };
    for &name in names {
        let len = store.tensor(name)?.len();
        let analytic = with_grads
            .tensor(name)?
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.tensor(name)?.data()[i];
            probe.get_mut(name)?.tensor.data_mut()[i] = orig + eps;
            let fp = eval(&probe)?;
            probe.get_mut(name)?.tensor.data_mut()[i] = orig - eps;
            let fm = eval(&probe)?;
            probe.get_mut(name)?.tensor.data_mut()[i] = orig;
            let err = relative_error(a, (fp - fm) / (2.0 * eps));
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (name.to_owned(), i);
            }
        }
    }
    Ok(report)
}
