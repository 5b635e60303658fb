//! Descent solver used by the minimizing-movement steps and by preset
//! relaxation: L-BFGS directions with Armijo backtracking, falling back to
//! steepest descent, and rejection of infeasible trials (objective `+inf`).

#[derive(Debug, Clone)]
pub struct DescentOptions {
    /// Stop when ||grad||_2 <= tolerance.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub lbfgs_memory: usize,
    pub armijo_c1: f64,
    pub max_backtracks: usize,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            tolerance: 1e-8,
            max_iterations: 500,
            lbfgs_memory: 8,
            armijo_c1: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DescentResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize a smooth objective with possible `+inf` (infeasible) regions.
/// `eval` returns the value and, when `grad` is `Some`, fills the gradient.
/// The iterate never leaves the feasible region because trial points with
/// non-finite value are rejected by the backtracking.
pub fn minimize(
    mut eval: impl FnMut(&[f64], Option<&mut [f64]>) -> f64,
    x0: &[f64],
    opts: &DescentOptions,
) -> DescentResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; n];
    let mut value = eval(&x, Some(&mut grad));
    assert!(
        value.is_finite(),
        "descent must start from a feasible point (J = {value})"
    );

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut direction = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut new_grad = vec![0.0; n];

    let mut iterations = 0;
    loop {
        let gnorm = norm(&grad);
        if gnorm <= opts.tolerance {
            return DescentResult {
                x,
                value,
                grad_norm: gnorm,
                iterations,
                converged: true,
            };
        }
        if iterations >= opts.max_iterations {
            return DescentResult {
                x,
                value,
                grad_norm: gnorm,
                iterations,
                converged: false,
            };
        }
        iterations += 1;

        // L-BFGS two-loop recursion; plain steepest descent when no history.
        direction.copy_from_slice(&grad);
        let m = s_hist.len();
        let mut alphas = vec![0.0; m];
        for k in (0..m).rev() {
            let a = rho_hist[k] * dot(&s_hist[k], &direction);
            alphas[k] = a;
            for (dv, yv) in direction.iter_mut().zip(&y_hist[k]) {
                *dv -= a * yv;
            }
        }
        if m > 0 {
            let last = m - 1;
            let scale = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
            if scale.is_finite() && scale > 0.0 {
                direction.iter_mut().for_each(|v| *v *= scale);
            }
        }
        for k in 0..m {
            let b = rho_hist[k] * dot(&y_hist[k], &direction);
            for (dv, sv) in direction.iter_mut().zip(&s_hist[k]) {
                *dv += (alphas[k] - b) * sv;
            }
        }
        direction.iter_mut().for_each(|v| *v = -*v);

        let mut slope = dot(&direction, &grad);
        if !(slope < 0.0) {
            // Not a descent direction: reset memory, use steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            for (dv, gv) in direction.iter_mut().zip(&grad) {
                *dv = -gv;
            }
            slope = -gnorm * gnorm;
        }

        // Armijo backtracking with infeasibility rejection.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..opts.max_backtracks {
            for i in 0..n {
                trial[i] = x[i] + step * direction[i];
            }
            let tv = eval(&trial, None);
            if tv.is_finite() && tv <= value + opts.armijo_c1 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No progress possible along this direction at representable
            // steps; report the current point.
            return DescentResult {
                x,
                value,
                grad_norm: gnorm,
                iterations,
                converged: gnorm <= opts.tolerance,
            };
        }

        let new_value = eval(&trial, Some(&mut new_grad));
        // Curvature update.
        let mut s = vec![0.0; n];
        let mut yv = vec![0.0; n];
        for i in 0..n {
            s[i] = trial[i] - x[i];
            yv[i] = new_grad[i] - grad[i];
        }
        let sy = dot(&s, &yv);
        if sy > 1e-14 * norm(&s) * norm(&yv) {
            s_hist.push(s);
            y_hist.push(yv);
            rho_hist.push(1.0 / sy);
            if s_hist.len() > opts.lbfgs_memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
        }
        x.copy_from_slice(&trial);
        grad.copy_from_slice(&new_grad);
        value = new_value;
    }
}
