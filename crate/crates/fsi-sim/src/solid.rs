//! Structure sub-problem: minimizing-movement time stepping of the
//! regularized, penalized solid with the fluid-velocity matching term.
//!
//! Each substep minimizes
//! `J(eta) = E_eps(eta) + K_eps(eta) + dt R_eps(eta_k, (eta - eta_k)/dt)
//!           + (dt/2h) |(eta - eta_k)/dt - U_k|^2`
//! starting from `eta_k`, and the accepted point must satisfy the per-step
//! comparison estimate
//! `E_eps + K_eps + 2 dt R_eps + (dt/2h)|v - U_k|^2  <=
//!  E_eps(eta_k) + K_eps(eta_k) + (dt/2h)|U_k|^2`
//! within the optimizer tolerance budget.

use crate::contact::{penalty_eval, ContactParams};
use crate::error::{FsiError, Result};
use crate::grid::{Aabb, Field};
use crate::kinematics::DeformationField;
use crate::material::{
    dissipation_eval, elastic_eval, sobolev_norm_sq, sobolev_norm_sq_grad, MaterialParams,
};
use crate::optimizer::{minimize, DescentOptions};

/// Parameters of the minimizing-movement solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SspParams {
    /// Substeps per coupling window; `dt = h / substeps`.
    pub substeps: usize,
    /// Relative gradient tolerance; the stopping threshold is
    /// `tolerance * (1 + |J(eta_k)|)`.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SspParams {
    fn default() -> Self {
        SspParams {
            substeps: 4,
            tolerance: 1e-8,
            max_iterations: 500,
        }
    }
}

impl SspParams {
    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(FsiError::InvalidParameter(
                "ssp substeps must be at least 1".into(),
            ));
        }
        if !(self.tolerance > 0.0) {
            return Err(FsiError::InvalidParameter(
                "ssp tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fluid velocity sampled on solid nodes, averaged per minimizing-movement
/// substep of one coupling window.
#[derive(Debug, Clone)]
pub struct CouplingTrace {
    /// Window the data was recorded in; -1 marks initial-velocity data.
    pub source_window: i64,
    pub delta_t: f64,
    /// One nodal velocity field per substep bin.
    pub bins: Vec<Field>,
}

impl CouplingTrace {
    /// Window-0 data: the initial solid velocity, constant over the window.
    pub fn from_initial_velocity(v0: &Field, substeps: usize, delta_t: f64) -> CouplingTrace {
        CouplingTrace {
            source_window: -1,
            delta_t,
            bins: vec![v0.clone(); substeps],
        }
    }
}

/// Outcome of one minimizing-movement substep.
#[derive(Debug, Clone)]
pub struct MmReport {
    pub iterations: usize,
    /// Euler-Lagrange residual: gradient norm of J at the accepted point.
    pub grad_norm: f64,
    pub j_start: f64,
    pub j_end: f64,
    /// Left side of the per-step comparison estimate.
    pub estimate_lhs: f64,
    /// Right side of the per-step comparison estimate.
    pub estimate_rhs: f64,
    /// max(0, lhs - rhs); must stay within the tolerance budget.
    pub estimate_violation: f64,
    pub estimate_budget: f64,
    /// E_eps at the accepted point.
    pub e_eps: f64,
    /// K_eps at the accepted point.
    pub k_eps: f64,
    /// R_eps(eta_k, v) of the accepted step.
    pub r_eps: f64,
    /// Quadrature of |v - U_k|^2 over the solid.
    pub match_sq: f64,
    /// Quadrature of |U_k|^2 over the solid.
    pub u_sq: f64,
    /// Quadrature of |v|^2 over the solid.
    pub v_sq: f64,
    pub min_det: f64,
}

struct Objective<'a> {
    prev: &'a DeformationField,
    u_k: &'a Field,
    dt: f64,
    h: f64,
    eps: f64,
    mat: &'a MaterialParams,
    contact: &'a ContactParams,
    container: &'a Aabb,
    weights: Vec<f64>,
    reg_eps_pow: f64,
}

impl Objective<'_> {
    /// J and optionally its gradient at nodal positions `x`.
    fn eval(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let want_grad = grad.is_some();
        let mut state = self.prev.clone();
        state.positions.data.copy_from_slice(x);

        let elastic = match elastic_eval(&state, self.mat, want_grad) {
            Ok(e) => e,
            Err(_) => {
                return f64::INFINITY;
            }
        };
        if !elastic.value.is_finite() {
            return f64::INFINITY;
        }
        let (k_val, k_grad) =
            match penalty_eval(&state, self.container, self.contact, want_grad) {
                Ok(kv) => kv,
                Err(_) => return f64::INFINITY,
            };
        if !k_val.is_finite() {
            return f64::INFINITY;
        }

        // Velocity of the step and its quadratic terms.
        let n = x.len();
        let mut vel = self.prev.velocity.clone();
        for i in 0..n {
            vel.data[i] = (x[i] - self.prev.positions.data[i]) / self.dt;
        }
        let diss = dissipation_eval(self.prev, &vel, want_grad).expect("dissipation eval");
        let d = self.prev.dim();
        let mut match_sq = 0.0;
        for s in 0..self.weights.len() {
            let mut sq = 0.0;
            for c in 0..d {
                let dv = vel.at(s, c) - self.u_k.at(s, c);
                sq += dv * dv;
            }
            match_sq += self.weights[s] * sq;
        }

        let mut reg_e = 0.0;
        let mut reg_r = 0.0;
        if self.eps > 0.0 {
            reg_e = self.reg_eps_pow
                * sobolev_norm_sq(&state.positions, &state.grid, self.mat.reg_order)
                    .expect("sobolev norm");
            reg_r = self.eps
                * sobolev_norm_sq(&vel, &state.grid, self.mat.reg_order).expect("sobolev norm");
        }

        let value = elastic.value
            + reg_e
            + k_val
            + self.dt * (diss.value + reg_r)
            + self.dt / (2.0 * self.h) * match_sq;

        if let Some(g) = grad {
            let eg = elastic.gradient.unwrap();
            let kg = k_grad.unwrap();
            let dg = diss.gradient.unwrap();
            for i in 0..n {
                // dJ/dx = dE + dK + dt * D2R * (1/dt) + (1/h) w (v - U).
                g[i] = eg.data[i] + kg.data[i] + dg.data[i];
            }
            if self.eps > 0.0 {
                let sg = sobolev_norm_sq_grad(&state.positions, &state.grid, self.mat.reg_order)
                    .expect("sobolev grad");
                let sgr = sobolev_norm_sq_grad(&vel, &state.grid, self.mat.reg_order)
                    .expect("sobolev grad");
                for i in 0..n {
                    g[i] += self.reg_eps_pow * sg.data[i] + self.eps * sgr.data[i];
                }
            }
            for s in 0..self.weights.len() {
                for c in 0..d {
                    let dv = vel.at(s, c) - self.u_k.at(s, c);
                    g[s * d + c] += self.weights[s] * dv / self.h;
                }
            }
        }
        value
    }

    /// Pieces of the per-step estimate at positions `x`.
    fn estimate_pieces(&self, x: &[f64]) -> (f64, f64, f64, f64, f64, f64) {
        let mut state = self.prev.clone();
        state.positions.data.copy_from_slice(x);
        let e = elastic_eval(&state, self.mat, false).unwrap().value;
        let k = penalty_eval(&state, self.container, self.contact, false)
            .unwrap()
            .0;
        let mut vel = self.prev.velocity.clone();
        for i in 0..x.len() {
            vel.data[i] = (x[i] - self.prev.positions.data[i]) / self.dt;
        }
        let mut r = dissipation_eval(self.prev, &vel, false).unwrap().value;
        let mut e_eps = e;
        if self.eps > 0.0 {
            e_eps += self.reg_eps_pow
                * sobolev_norm_sq(&state.positions, &state.grid, self.mat.reg_order).unwrap();
            r += self.eps * sobolev_norm_sq(&vel, &state.grid, self.mat.reg_order).unwrap();
        }
        let d = self.prev.dim();
        let mut match_sq = 0.0;
        let mut u_sq = 0.0;
        let mut v_sq = 0.0;
        for s in 0..self.weights.len() {
            let mut msq = 0.0;
            let mut usq = 0.0;
            let mut vsq = 0.0;
            for c in 0..d {
                let dv = vel.at(s, c) - self.u_k.at(s, c);
                msq += dv * dv;
                usq += self.u_k.at(s, c) * self.u_k.at(s, c);
                vsq += vel.at(s, c) * vel.at(s, c);
            }
            match_sq += self.weights[s] * msq;
            u_sq += self.weights[s] * usq;
            v_sq += self.weights[s] * vsq;
        }
        (e_eps, k, r, match_sq, u_sq, v_sq)
    }
}

/// One minimizing-movement substep: descend J from `eta_k`, enforce the
/// per-step comparison estimate, and return the advanced state.
#[allow(clippy::too_many_arguments)]
pub fn mm_step(
    prev: &DeformationField,
    u_k: &Field,
    dt: f64,
    h: f64,
    eps: f64,
    params: &SspParams,
    mat: &MaterialParams,
    contact: &ContactParams,
    container: &Aabb,
) -> Result<(DeformationField, MmReport)> {
    let obj = Objective {
        prev,
        u_k,
        dt,
        h,
        eps,
        mat,
        contact,
        container,
        weights: prev.grid.node_weights(),
        reg_eps_pow: if eps > 0.0 { eps.powf(mat.reg_exp) } else { 0.0 },
    };

    let x0 = prev.positions.data.clone();
    let j_start = obj.eval(&x0, None);
    if !j_start.is_finite() {
        return Err(FsiError::InfiniteEnergy {
            reason: "minimizing movement started from infeasible state",
        });
    }
    let tol = params.tolerance * (1.0 + j_start.abs());
    let opts = DescentOptions {
        tolerance: tol,
        max_iterations: params.max_iterations,
        ..Default::default()
    };
    let mut result = minimize(|x, g| obj.eval(x, g), &x0, &opts);
    if !result.converged {
        return Err(FsiError::OptimizerStall {
            iterations: result.iterations,
            grad_norm: result.grad_norm,
            tolerance: tol,
        });
    }

    // Per-step comparison estimate at the accepted point. A failed check is
    // retried at a tighter tolerance before giving up.
    let budget = tol;
    let (e0, k0, _, _, u_sq0, _) = obj.estimate_pieces(&x0);
    let rhs = e0 + k0 + dt / (2.0 * h) * u_sq0;
    let mut attempt = 0;
    let (report, state) = loop {
        let (e_eps, k_eps, r_eps, match_sq, u_sq, v_sq) = obj.estimate_pieces(&result.x);
        let lhs = e_eps + k_eps + 2.0 * dt * r_eps + dt / (2.0 * h) * match_sq;
        let violation = (lhs - rhs).max(0.0);
        if violation <= budget {
            let mut state = prev.clone();
            state.positions.data.copy_from_slice(&result.x);
            for i in 0..state.velocity.data.len() {
                state.velocity.data[i] = (result.x[i] - prev.positions.data[i]) / dt;
            }
            state.time = prev.time + dt;
            state.positions.time = state.time;
            state.velocity.time = state.time;
            let min_det = crate::kinematics::deformation_gradient(&state)?.min_det;
            break (
                MmReport {
                    iterations: result.iterations,
                    grad_norm: result.grad_norm,
                    j_start,
                    j_end: result.value,
                    estimate_lhs: lhs,
                    estimate_rhs: rhs,
                    estimate_violation: violation,
                    estimate_budget: budget,
                    e_eps,
                    k_eps,
                    r_eps,
                    match_sq,
                    u_sq,
                    v_sq,
                    min_det,
                },
                state,
            );
        }
        attempt += 1;
        if attempt > 2 {
            return Err(FsiError::EstimateViolation {
                substep: 0,
                violation,
                budget,
            });
        }
        let tighter = DescentOptions {
            tolerance: tol * 10f64.powi(-2 * attempt),
            max_iterations: params.max_iterations,
            ..Default::default()
        };
        result = minimize(|x, g| obj.eval(x, g), &result.x, &tighter);
    };
    Ok((state, report))
}

/// Solid trajectory over one coupling window.
#[derive(Debug, Clone)]
pub struct SspWindow {
    /// States at the substep boundaries; `states[0]` is the window start.
    pub states: Vec<DeformationField>,
    pub reports: Vec<MmReport>,
    pub dt: f64,
    pub window_start: f64,
    /// Window inequality bookkeeping: left side, right side, slack.
    pub window_lhs: f64,
    pub window_rhs: f64,
}

impl SspWindow {
    /// Piecewise-affine-in-time position field at `t`.
    pub fn position_at(&self, t: f64) -> Field {
        let (k, theta) = self.locate(t);
        let a = &self.states[k].positions;
        let b = &self.states[k + 1].positions;
        let mut out = a.clone();
        for i in 0..out.data.len() {
            out.data[i] = (1.0 - theta) * a.data[i] + theta * b.data[i];
        }
        out.time = t;
        out
    }

    /// Per-bin constant velocity at `t` (forward difference of the bin).
    pub fn velocity_at(&self, t: f64) -> &Field {
        let (k, _) = self.locate(t);
        &self.states[k + 1].velocity
    }

    /// Bin index and local fraction of time `t`.
    fn locate(&self, t: f64) -> (usize, f64) {
        let m = self.states.len() - 1;
        let local = (t - self.window_start) / self.dt;
        let k = (local.floor() as usize).min(m - 1);
        let theta = (local - k as f64).clamp(0.0, 1.0);
        (k, theta)
    }

    /// Right-constant state at `t` (the discrete inequality holds for it).
    pub fn state_right(&self, t: f64) -> &DeformationField {
        let (k, theta) = self.locate(t);
        if theta == 0.0 && k == 0 {
            &self.states[0]
        } else {
            &self.states[k + 1]
        }
    }

    pub fn end_state(&self) -> &DeformationField {
        self.states.last().unwrap()
    }
}

/// Chain `substeps` minimizing movements across one window, consuming the
/// delayed coupling trace, and verify the summed window inequality.
#[allow(clippy::too_many_arguments)]
pub fn solve_ssp(
    start: &DeformationField,
    trace: &CouplingTrace,
    h: f64,
    eps: f64,
    params: &SspParams,
    mat: &MaterialParams,
    contact: &ContactParams,
    container: &Aabb,
) -> Result<SspWindow> {
    params.validate()?;
    if trace.bins.len() != params.substeps {
        return Err(FsiError::InvalidParameter(format!(
            "coupling trace has {} bins, expected {}",
            trace.bins.len(),
            params.substeps
        )));
    }
    let dt = h / params.substeps as f64;
    let mut states = vec![start.clone()];
    let mut reports = Vec::with_capacity(params.substeps);
    for k in 0..params.substeps {
        let (next, report) = mm_step(
            states.last().unwrap(),
            &trace.bins[k],
            dt,
            h,
            eps,
            params,
            mat,
            contact,
            container,
        )
        .map_err(|e| FsiError::SspSubstep {
            substep: k,
            source: Box::new(e),
        })?;
        states.push(next);
        reports.push(report);
    }

    // Summed window inequality: telescoping of the per-step estimates.
    let first = &reports[0];
    let last = reports.last().unwrap();
    let mut window_lhs = last.e_eps + last.k_eps;
    let mut window_rhs = first.estimate_rhs;
    for r in &reports {
        window_lhs += 2.0 * dt * r.r_eps + dt / (2.0 * h) * r.match_sq;
    }
    for r in reports.iter().skip(1) {
        window_rhs += dt / (2.0 * h) * r.u_sq;
    }
    // Subtract the double-counted E + K of intermediate states: rhs for step
    // k >= 1 contains E_eps + K_eps of state k which the telescoping cancels.
    // `estimate_rhs` of step 0 already carries the window-start energies.
    let budget: f64 = reports.iter().map(|r| r.estimate_budget).sum();
    if window_lhs > window_rhs + budget {
        return Err(FsiError::EstimateViolation {
            substep: params.substeps,
            violation: window_lhs - window_rhs,
            budget,
        });
    }

    Ok(SspWindow {
        states,
        reports,
        dt,
        window_start: start.time,
        window_lhs,
        window_rhs,
    })
}
