//! Central finite-difference checks against the autodiff engine.
//!
//! Relative error per element is `|a - n| / max(|a|, |n|, floor)`; the floor
//! keeps entries whose true gradient is ~0 from dominating the report.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{MoleError, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tol: f64,
    pub floor: f64,
    /// Check at most this many entries per tensor (evenly strided).
    pub max_entries: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-6,
            tol: 1e-5,
            floor: 1e-4,
            max_entries: usize::MAX,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

struct Acc {
    abs: f64,
    rel: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let d = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        self.abs = self.abs.max(d);
        self.rel = self.rel.max(d / denom);
        self.n += 1;
        if !d.is_finite() {
            self.rel = f64::INFINITY;
        }
    }

    fn report(self, tol: f64) -> GradcheckReport {
        GradcheckReport {
            max_abs_error: self.abs,
            max_rel_error: self.rel,
            checked: self.n,
            passed: self.rel < tol,
        }
    }
}

fn strided(n: usize, max: usize) -> impl Iterator<Item = usize> {
    let step = if n <= max { 1 } else { n.div_ceil(max) };
    (0..n).step_by(step)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x);
    let y = f(&mut g, xv)?;
    if g.value(y).len() != 1 {
        return Err(MoleError::Contract(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            g.shape(y)
        )));
    }
    Ok(g.scalar(y))
}

/// Compares the autodiff gradient of scalar `f` at `x` with central differences.
pub fn gradcheck<F>(f: F, x: &Tensor, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x);
    let y = f(&mut g, xv)?;
    if g.value(y).len() != 1 {
        return Err(MoleError::Contract(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            g.shape(y)
        )));
    }
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut acc = Acc {
        abs: 0.0,
        rel: 0.0,
        n: 0,
    };
    let mut probe = x.clone();
    for i in strided(x.numel(), opts.max_entries) {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + opts.eps;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - opts.eps;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        acc.push(analytic[i], (up - down) / (2.0 * opts.eps), opts.floor);
    }
    Ok(acc.report(opts.tol))
}

/// Gradient check over every parameter of `store` for the scalar `f`.
pub fn gradcheck_params<F>(
    store: &ParamStore,
    f: F,
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let y = f(&mut g)?;
        Ok(g.scalar(y))
    };

    let grads = {
        let mut g = Graph::with_params(store);
        let y = f(&mut g)?;
        if g.value(y).len() != 1 {
            return Err(MoleError::Contract(
                "gradcheck needs a scalar function".into(),
            ));
        }
        g.backward(y)?;
        g.param_grads(store.len())
    };

    let mut acc = Acc {
        abs: 0.0,
        rel: 0.0,
        n: 0,
    };
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        for i in strided(n, opts.max_entries) {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + opts.eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - opts.eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            acc.push(analytic, (up - down) / (2.0 * opts.eps), opts.floor);
        }
    }
    Ok(acc.report(opts.tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_has_exact_gradient() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let r = gradcheck(|g, x| g.sum(x), &x, GradcheckOptions::default()).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = gradcheck(|g, x| g.tanh(x), &x, GradcheckOptions::default()).unwrap_err();
        assert!(matches!(err, MoleError::Contract(_)));
    }
}
