//! Central finite-difference gradient checking, compiled only with the
//! `testing` feature. Independent of the backward pass it audits: it only
//! evaluates forward values.

use crate::{Graph, Tensor, Var};

/// Worst elementwise disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients of `build` against central differences.
///
/// `build` receives a fresh graph plus the parameter handles, in order, and
/// returns the scalar loss.
pub fn check<F>(params: &[Tensor<f64>], eps: f64, floor: f64, mut build: F) -> GradCheck
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut eval = |ps: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).item()
    };

    let mut worst = GradCheck {
        max_rel_err: 0.0,
        param: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = params.to_vec();
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let up = eval(&work);
            work[p].data_mut()[i] = orig - eps;
            let down = eval(&work);
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[p].data()[i];
            let e = rel_err(a, numeric, floor);
            if e > worst.max_rel_err {
                worst = GradCheck {
                    max_rel_err: e,
                    param: p,
                    index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    worst
}
