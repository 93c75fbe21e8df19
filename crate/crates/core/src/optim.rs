//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    /// Number of correction pairs kept.
    pub history: usize,
    /// Stop once the gradient's Euclidean norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant.
    pub armijo_c1: f64,
    pub max_halvings: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            tol: 1e-5,
            max_iter: 100,
            armijo_c1: 1e-4,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when no step within `max_halvings` halvings decreased the loss.
    pub line_search_failed: bool,
    /// Loss at the start and after every accepted step.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Two-loop recursion: returns `-H g` for the implicit inverse Hessian `H`.
fn search_direction(grad: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|qi| *qi *= gamma);
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|qi| *qi = -*qi);
    q
}

/// Minimises `objective`, which returns the loss at `x` and writes its
/// gradient into the second argument. Only steps satisfying the Armijo
/// condition are accepted, so the loss never increases.
pub fn lbfgs_minimize<F>(mut objective: F, x0: Vec<f64>, cfg: &LbfgsConfig) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut f = objective(&x, &mut grad);
    let mut trace = vec![f];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.history);
    let mut x_new = vec![0.0; n];
    let mut grad_new = vec![0.0; n];

    for iter in 0..cfg.max_iter {
        let gnorm = norm(&grad);
        if !gnorm.is_finite() {
            break;
        }
        if gnorm < cfg.tol {
            return LbfgsOutcome {
                x,
                f,
                iterations: iter,
                converged: true,
                line_search_failed: false,
                trace,
            };
        }
        let mut dir = search_direction(&grad, &pairs);
        let mut slope = dot(&dir, &grad);
        // also catches a NaN slope
        if slope.is_nan() || slope >= 0.0 {
            pairs.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = if pairs.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };

        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            x_new
                .iter_mut()
                .zip(&x)
                .zip(&dir)
                .for_each(|((xn, xi), di)| *xn = xi + step * di);
            let f_new = objective(&x_new, &mut grad_new);
            if f_new.is_finite() && f_new <= f + cfg.armijo_c1 * step * slope {
                accepted = Some(f_new);
                break;
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else {
            return LbfgsOutcome {
                x,
                f,
                iterations: iter,
                converged: false,
                line_search_failed: true,
                trace,
            };
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if pairs.len() == cfg.history {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut grad, &mut grad_new);
        f = f_new;
        trace.push(f);
    }
    let converged = norm(&grad) < cfg.tol;
    LbfgsOutcome {
        x,
        f,
        iterations: cfg.max_iter,
        converged,
        line_search_failed: false,
        trace,
    }
}
