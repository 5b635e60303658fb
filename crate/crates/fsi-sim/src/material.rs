//! Prototype elastic energy and viscous dissipation of the solid, their exact
//! discrete gradients, and the eps-regularized forms.
//!
//! The stored energy is
//! `E = int (lambda_e/2)(tr G)^2 + mu_e |G|^2 + det(F)^{-a} + (1/q)|H|^q`
//! with `G = F^T F - I`, `F = grad eta`, `H = grad^2 eta`, and `+inf` whenever
//! `det F <= 0` somewhere. The dissipation is `R = int |B^T F + F^T B|^2` with
//! `B = grad b`. Gradients differentiate the quadrature sum itself, so they are
//! exact for the discretized functionals (what minimizing movements needs).

use crate::error::{FsiError, Result};
use crate::grid::{axis_derivative, differentiate, DiffOp, Field, SolidGrid};
use crate::kinematics::{det_dxd, invert_dxd, DeformationField};

/// Parameters of the energy/dissipation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialParams {
    /// First elastic modulus of the quadratic tensor (pressure units).
    pub lambda_e: f64,
    /// Second elastic modulus (pressure units), positive.
    pub mu_e: f64,
    /// Determinant-barrier exponent `a`.
    pub barrier_exp: f64,
    /// Second-gradient exponent `q`, must exceed the space dimension.
    pub grad_exp: f64,
    /// Regularization derivative order `k0`.
    pub reg_order: usize,
    /// Regularization exponent `a0` weighting `eps^{a0}`.
    pub reg_exp: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            lambda_e: 1.0,
            mu_e: 1.0,
            barrier_exp: 8.0,
            grad_exp: 4.0,
            reg_order: 3,
            reg_exp: 2.0,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let d = dim as f64;
        if self.mu_e <= 0.0 {
            return Err(FsiError::InvalidParameter("mu_e must be positive".into()));
        }
        if self.lambda_e < 0.0 {
            return Err(FsiError::InvalidParameter(
                "lambda_e must be nonnegative".into(),
            ));
        }
        if self.grad_exp <= d {
            return Err(FsiError::InvalidParameter(format!(
                "grad_exp q = {} must exceed the dimension {}",
                self.grad_exp, dim
            )));
        }
        let bound = d * self.grad_exp / (self.grad_exp - d);
        if self.barrier_exp <= bound {
            return Err(FsiError::InvalidParameter(format!(
                "barrier_exp a = {} must exceed d q / (q - d) = {}",
                self.barrier_exp, bound
            )));
        }
        if self.reg_order < 3 {
            return Err(FsiError::InvalidParameter(
                "reg_order k0 must be at least 3".into(),
            ));
        }
        if self.reg_exp <= 0.0 {
            return Err(FsiError::InvalidParameter(
                "reg_exp a0 must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Lower bound on min det implied by an energy bound, from the det^{-a} term
/// alone: at the worst node, E >= w_min det^{-a}.
pub fn det_bound_from_energy(e0: f64, grid: &SolidGrid, mat: &MaterialParams) -> f64 {
    let w_min = grid
        .node_weights()
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    (e0 / w_min).powf(-1.0 / mat.barrier_exp)
}

/// Scatter a tensor cofield S (comps d*d, S[c][a]) back to nodal vectors via
/// the adjoint of the gradient stencil: out_c = sum_a D1_a^T S[:, (c,a)].
fn scatter_gradient_adjoint(cofield: &Field) -> Result<Field> {
    let d = cofield.dim();
    let comps = cofield.comps / d;
    let mut out = Field {
        comps,
        data: vec![0.0; cofield.samples() * comps],
        ..cofield.clone()
    };
    for a in 0..d {
        let mut sub = Field {
            comps,
            data: vec![0.0; cofield.samples() * comps],
            ..cofield.clone()
        };
        for s in 0..cofield.samples() {
            for c in 0..comps {
                sub.data[s * comps + c] = cofield.at(s, c * d + a);
            }
        }
        let scattered = axis_derivative(&sub, a, 1, true)?;
        for (o, v) in out.data.iter_mut().zip(&scattered.data) {
            *o += v;
        }
    }
    Ok(out)
}

/// Scatter a third-order cofield T (comps d*d*d, T[c][a][b]) via the adjoint of
/// the hessian stencil (diagonal entries use the dedicated second-derivative
/// stencil, mixed entries the composed first derivatives).
fn scatter_hessian_adjoint(cofield: &Field) -> Result<Field> {
    let d = cofield.dim();
    let comps = cofield.comps / (d * d);
    let mut out = Field {
        comps,
        data: vec![0.0; cofield.samples() * comps],
        ..cofield.clone()
    };
    for a in 0..d {
        for b in 0..d {
            let mut sub = Field {
                comps,
                data: vec![0.0; cofield.samples() * comps],
                ..cofield.clone()
            };
            for s in 0..cofield.samples() {
                for c in 0..comps {
                    sub.data[s * comps + c] = cofield.at(s, (c * d + a) * d + b);
                }
            }
            let scattered = if a == b {
                axis_derivative(&sub, a, 2, true)?
            } else {
                // Forward was D1_a(D1_b(.)), so adjoint is D1_b^T(D1_a^T(.)).
                let inner = axis_derivative(&sub, a, 1, true)?;
                axis_derivative(&inner, b, 1, true)?
            };
            for (o, v) in out.data.iter_mut().zip(&scattered.data) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// Elastic energy of a state; `+inf` when the Jacobian is nonpositive anywhere.
pub fn elastic_energy(state: &DeformationField, mat: &MaterialParams) -> Result<f64> {
    Ok(elastic_eval(state, mat, false)?.value)
}

/// Exact gradient of the discretized elastic energy with respect to nodal
/// positions; errors when the energy is infinite.
pub fn elastic_energy_gradient(state: &DeformationField, mat: &MaterialParams) -> Result<Field> {
    let eval = elastic_eval(state, mat, true)?;
    eval.gradient.ok_or(FsiError::InfiniteEnergy {
        reason: "nonpositive jacobian",
    })
}

pub struct EnergyEval {
    pub value: f64,
    pub gradient: Option<Field>,
}

pub fn elastic_eval(
    state: &DeformationField,
    mat: &MaterialParams,
    want_grad: bool,
) -> Result<EnergyEval> {
    let d = state.dim();
    let grad_f = differentiate(&state.positions, DiffOp::Gradient)?;
    let hess = differentiate(&state.positions, DiffOp::Hessian)?;
    let weights = state.grid.node_weights();
    let n = grad_f.samples();
    let q = mat.grad_exp;
    let a = mat.barrier_exp;

    let mut value = 0.0;
    let mut df = if want_grad {
        Some(Field {
            comps: d * d,
            data: vec![0.0; n * d * d],
            ..grad_f.clone()
        })
    } else {
        None
    };
    let mut dh = if want_grad {
        Some(Field {
            comps: d * d * d,
            data: vec![0.0; n * d * d * d],
            ..hess.clone()
        })
    } else {
        None
    };

    let mut g = vec![0.0; d * d];
    let mut inv = vec![0.0; d * d];
    for s in 0..n {
        let f = &grad_f.data[s * d * d..(s + 1) * d * d];
        let det = det_dxd(f, d);
        if det <= 0.0 {
            return Ok(EnergyEval {
                value: f64::INFINITY,
                gradient: None,
            });
        }
        // G = F^T F - I.
        for i in 0..d {
            for j in 0..d {
                let mut v = 0.0;
                for k in 0..d {
                    v += f[k * d + i] * f[k * d + j];
                }
                g[i * d + j] = v - if i == j { 1.0 } else { 0.0 };
            }
        }
        let tr_g: f64 = (0..d).map(|i| g[i * d + i]).sum();
        let g_sq: f64 = g.iter().map(|v| v * v).sum();
        let h = &hess.data[s * d * d * d..(s + 1) * d * d * d];
        let h_sq: f64 = h.iter().map(|v| v * v).sum();
        let h_norm = h_sq.sqrt();
        let w = weights[s];

        value += w
            * (0.5 * mat.lambda_e * tr_g * tr_g
                + mat.mu_e * g_sq
                + det.powf(-a)
                + h_norm.powf(q) / q);

        if want_grad {
            let df = df.as_mut().unwrap();
            let dh = dh.as_mut().unwrap();
            // dW/dF = 2 lambda (tr G) F + 4 mu F G - a det^{-a} F^{-T}.
            let ok = invert_dxd(f, d, &mut inv);
            debug_assert!(ok);
            let det_pow = det.powf(-a);
            for c in 0..d {
                for b in 0..d {
                    let mut fg = 0.0;
                    for k in 0..d {
                        fg += f[c * d + k] * g[k * d + b];
                    }
                    let dw = 2.0 * mat.lambda_e * tr_g * f[c * d + b] + 4.0 * mat.mu_e * fg
                        - a * det_pow * inv[b * d + c];
                    df.data[(s * d + c) * d + b] = w * dw;
                }
            }
            // dPhi/dH = |H|^{q-2} H.
            if h_norm > 0.0 {
                let scale = w * h_norm.powf(q - 2.0);
                for (k, hv) in h.iter().enumerate() {
                    dh.data[s * d * d * d + k] = scale * hv;
                }
            }
        }
    }

    let gradient = if want_grad {
        let from_f = scatter_gradient_adjoint(&df.unwrap())?;
        let from_h = scatter_hessian_adjoint(&dh.unwrap())?;
        let mut total = from_f;
        for (o, v) in total.data.iter_mut().zip(&from_h.data) {
            *o += v;
        }
        Some(total)
    } else {
        None
    };
    Ok(EnergyEval { value, gradient })
}

/// Viscous dissipation rate `R(eta, b) = int |B^T F + F^T B|^2`, nonnegative
/// and 2-homogeneous in `b`.
pub fn dissipation_rate(
    state: &DeformationField,
    vel: &Field,
    _mat: &MaterialParams,
) -> Result<f64> {
    Ok(dissipation_eval(state, vel, false)?.value)
}

/// Exact gradient of the discrete dissipation in the velocity argument.
pub fn dissipation_gradient(
    state: &DeformationField,
    vel: &Field,
    _mat: &MaterialParams,
) -> Result<Field> {
    Ok(dissipation_eval(state, vel, true)?.gradient.unwrap())
}

pub fn dissipation_eval(state: &DeformationField, vel: &Field, want_grad: bool) -> Result<EnergyEval> {
    let d = state.dim();
    let grad_f = differentiate(&state.positions, DiffOp::Gradient)?;
    let grad_b = differentiate(vel, DiffOp::Gradient)?;
    let weights = state.grid.node_weights();
    let n = grad_f.samples();

    let mut value = 0.0;
    let mut db = if want_grad {
        Some(Field {
            comps: d * d,
            data: vec![0.0; n * d * d],
            ..grad_b.clone()
        })
    } else {
        None
    };

    let mut p = vec![0.0; d * d];
    for s in 0..n {
        let f = &grad_f.data[s * d * d..(s + 1) * d * d];
        let b = &grad_b.data[s * d * d..(s + 1) * d * d];
        // P = B^T F + F^T B.
        for i in 0..d {
            for j in 0..d {
                let mut v = 0.0;
                for k in 0..d {
                    v += b[k * d + i] * f[k * d + j] + f[k * d + i] * b[k * d + j];
                }
                p[i * d + j] = v;
            }
        }
        let w = weights[s];
        value += w * p.iter().map(|v| v * v).sum::<f64>();
        if want_grad {
            let db = db.as_mut().unwrap();
            // dR/dB = 4 F P (P symmetric).
            for c in 0..d {
                for a in 0..d {
                    let mut fp = 0.0;
                    for k in 0..d {
                        fp += f[c * d + k] * p[k * d + a];
                    }
                    db.data[(s * d + c) * d + a] = w * 4.0 * fp;
                }
            }
        }
    }
    let gradient = if want_grad {
        Some(scatter_gradient_adjoint(&db.unwrap())?)
    } else {
        None
    };
    Ok(EnergyEval { value, gradient })
}

/// Multi-indices alpha with |alpha| <= order, lexicographic, zero included.
fn sobolev_multi_indices(dim: usize, order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = vec![0usize; dim];
    loop {
        if current.iter().sum::<usize>() <= order {
            out.push(current.clone());
        }
        let mut axis = dim;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            current[axis] += 1;
            if current[axis] <= order {
                break;
            }
            current[axis] = 0;
        }
    }
}

fn apply_multi_derivative(field: &Field, alpha: &[usize], adjoint: bool) -> Result<Field> {
    let mut f = field.clone();
    if !adjoint {
        for (axis, &count) in alpha.iter().enumerate() {
            for _ in 0..count {
                f = axis_derivative(&f, axis, 1, false)?;
            }
        }
    } else {
        for (axis, &count) in alpha.iter().enumerate().rev() {
            for _ in 0..count {
                f = axis_derivative(&f, axis, 1, true)?;
            }
        }
    }
    Ok(f)
}

/// Discrete squared W^{k,2} norm: sum over multi-indices up to order `k` of
/// the quadrature of |D^alpha f|^2, with repeated first-difference stencils.
pub fn sobolev_norm_sq(field: &Field, grid: &SolidGrid, order: usize) -> Result<f64> {
    let weights = grid.node_weights();
    let mut total = 0.0;
    for alpha in sobolev_multi_indices(grid.dim(), order) {
        let da = apply_multi_derivative(field, &alpha, false)?;
        for s in 0..da.samples() {
            let mut sq = 0.0;
            for c in 0..da.comps {
                let v = da.at(s, c);
                sq += v * v;
            }
            total += weights[s] * sq;
        }
    }
    Ok(total)
}

/// Gradient of [`sobolev_norm_sq`] with respect to the nodal values.
pub fn sobolev_norm_sq_grad(field: &Field, grid: &SolidGrid, order: usize) -> Result<Field> {
    let weights = grid.node_weights();
    let mut out = Field {
        data: vec![0.0; field.data.len()],
        ..field.clone()
    };
    for alpha in sobolev_multi_indices(grid.dim(), order) {
        let mut da = apply_multi_derivative(field, &alpha, false)?;
        for s in 0..da.samples() {
            for c in 0..da.comps {
                let v = da.at(s, c);
                da.set(s, c, 2.0 * weights[s] * v);
            }
        }
        let scattered = apply_multi_derivative(&da, &alpha, true)?;
        for (o, v) in out.data.iter_mut().zip(&scattered.data) {
            *o += v;
        }
    }
    Ok(out)
}

/// Values and gradients of the regularized pair `E_eps`, `R_eps`.
pub struct RegularizedForms {
    pub e_value: f64,
    pub e_gradient: Field,
    pub r_value: f64,
    pub r_gradient: Field,
}

/// `E_eps = E + eps^{a0} |eta|_{W^{k0,2}}^2`, `R_eps = R + eps |b|_{W^{k0,2}}^2`,
/// with gradients extended accordingly. Errors when `E` is infinite.
pub fn regularized_forms(
    state: &DeformationField,
    vel: &Field,
    mat: &MaterialParams,
    eps: f64,
) -> Result<RegularizedForms> {
    let e = elastic_eval(state, mat, true)?;
    if !e.value.is_finite() {
        return Err(FsiError::InfiniteEnergy {
            reason: "nonpositive jacobian",
        });
    }
    let r = dissipation_eval(state, vel, true)?;
    let mut e_value = e.value;
    let mut e_gradient = e.gradient.unwrap();
    let mut r_value = r.value;
    let mut r_gradient = r.gradient.unwrap();
    if eps > 0.0 {
        let ew = eps.powf(mat.reg_exp);
        e_value += ew * sobolev_norm_sq(&state.positions, &state.grid, mat.reg_order)?;
        let sg = sobolev_norm_sq_grad(&state.positions, &state.grid, mat.reg_order)?;
        for (o, v) in e_gradient.data.iter_mut().zip(&sg.data) {
            *o += ew * v;
        }
        r_value += eps * sobolev_norm_sq(vel, &state.grid, mat.reg_order)?;
        let sgr = sobolev_norm_sq_grad(vel, &state.grid, mat.reg_order)?;
        for (o, v) in r_gradient.data.iter_mut().zip(&sgr.data) {
            *o += eps * v;
        }
    }
    Ok(RegularizedForms {
        e_value,
        e_gradient,
        r_value,
        r_gradient,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::grid::for_each_multi;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid17() -> SolidGrid {
        SolidGrid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![17, 17]).unwrap()
    }

    /// Smooth random admissible perturbation of the identity.
    pub(crate) fn random_admissible_state(grid: &SolidGrid, seed: u64) -> DeformationField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = DeformationField::identity(grid, &[0.0, 0.0]);
        let modes: Vec<(f64, f64, f64, f64, usize)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(-0.03..0.03),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0..2usize),
                )
            })
            .collect();
        let vel_modes: Vec<(f64, f64, f64, f64, usize)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(-0.5..0.5),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0..2usize),
                )
            })
            .collect();
        let mut samples = Vec::new();
        for_each_multi(&grid.resolution, |multi, _| {
            samples.push(grid.node_position(multi));
        });
        for (s, p) in samples.iter().enumerate() {
            for &(amp, kx, ky, phase, comp) in &modes {
                let v = amp * (kx * p[0] + ky * p[1] + phase).sin();
                state.positions.add(s, comp, v);
            }
            for &(amp, kx, ky, phase, comp) in &vel_modes {
                let v = amp * (kx * p[0] + ky * p[1] + phase).cos();
                state.velocity.add(s, comp, v);
            }
        }
        state
    }

    /// Max relative l2 deviation between an analytic gradient and central
    /// finite differences of `f`.
    pub(crate) fn finite_difference_error(
        f: &mut dyn FnMut(&Field) -> f64,
        base: &Field,
        grad: &Field,
        step: f64,
    ) -> f64 {
        let mut fd = vec![0.0; grad.data.len()];
        let mut probe = base.clone();
        for i in 0..base.data.len() {
            let orig = base.data[i];
            probe.data[i] = orig + step;
            let plus = f(&probe);
            probe.data[i] = orig - step;
            let minus = f(&probe);
            probe.data[i] = orig;
            fd[i] = (plus - minus) / (2.0 * step);
        }
        let num: f64 = fd
            .iter()
            .zip(&grad.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = grad.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        num / den.max(1e-10)
    }

    #[test]
    fn identity_energy_is_barrier_only() {
        let state = DeformationField::identity(&grid17(), &[0.0, 0.0]);
        let e = elastic_energy(&state, &MaterialParams::default()).unwrap();
        assert!((e - 1.0).abs() < 1e-12, "E = {e}");
    }

    #[test]
    fn dilation_energy_closed_form() {
        // F = 2I: tr G = 6, |G|^2 = 18, det = 4, hessian zero.
        let state = crate::kinematics::affine_deformation(
            &grid17(),
            &[2.0, 0.0, 0.0, 2.0],
            &[0.0, 0.0],
        );
        let e = elastic_energy(&state, &MaterialParams::default()).unwrap();
        assert!((e - 36.0000152587890625).abs() < 1e-11, "E = {e}");
    }

    #[test]
    fn reflection_energy_is_infinite() {
        let state = crate::kinematics::affine_deformation(
            &grid17(),
            &[0.0, 1.0, 1.0, 0.0],
            &[0.0, 0.0],
        );
        let e = elastic_energy(&state, &MaterialParams::default()).unwrap();
        assert!(e.is_infinite());
        assert!(matches!(
            elastic_energy_gradient(&state, &MaterialParams::default()),
            Err(FsiError::InfiniteEnergy { .. })
        ));
    }

    #[test]
    fn barrier_gradient_vanishes_at_interior_nodes() {
        // lambda = mu = 0 leaves only the det term; at the identity its
        // discrete gradient telescopes to pure boundary terms.
        let mat = MaterialParams {
            lambda_e: 0.0,
            mu_e: 0.0,
            ..Default::default()
        };
        let grid = grid17();
        let state = DeformationField::identity(&grid, &[0.0, 0.0]);
        let g = elastic_energy_gradient(&state, &mat).unwrap();
        for_each_multi(&grid.resolution, |multi, flat| {
            let interior = multi
                .iter()
                .zip(&grid.resolution)
                // One-sided closure rows reach two nodes inward.
                .all(|(&i, &n)| i >= 2 && i + 3 <= n);
            if interior {
                assert!(
                    g.at(flat, 0).abs() < 1e-12 && g.at(flat, 1).abs() < 1e-12,
                    "interior node {multi:?} gradient ({}, {})",
                    g.at(flat, 0),
                    g.at(flat, 1)
                );
            }
        });
    }

    #[test]
    fn elastic_gradient_matches_finite_differences() {
        let grid = grid17();
        let mat = MaterialParams::default();
        let state = random_admissible_state(&grid, 7);
        let grad = elastic_energy_gradient(&state, &mat).unwrap();
        let mut probe = state.clone();
        let mut f = |pos: &Field| {
            probe.positions = pos.clone();
            elastic_energy(&probe, &mat).unwrap()
        };
        let err = finite_difference_error(&mut f, &state.positions, &grad, 1e-6);
        assert!(err <= 1e-5, "relative FD error {err}");
    }

    #[test]
    fn gradient_is_translation_invariant() {
        let grid = grid17();
        let mat = MaterialParams::default();
        let state = random_admissible_state(&grid, 9);
        let e0 = elastic_energy(&state, &mat).unwrap();
        let g0 = elastic_energy_gradient(&state, &mat).unwrap();
        let mut shifted = state.clone();
        for s in 0..shifted.positions.samples() {
            shifted.positions.add(s, 0, 0.37);
            shifted.positions.add(s, 1, -0.21);
        }
        let e1 = elastic_energy(&shifted, &mat).unwrap();
        let g1 = elastic_energy_gradient(&shifted, &mat).unwrap();
        assert!((e0 - e1).abs() <= 1e-11 * e0.abs().max(1.0));
        let gmax = g0.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g0.data.iter().zip(&g1.data) {
            assert!((a - b).abs() <= 1e-9 * gmax.max(1.0));
        }
    }

    #[test]
    fn dissipation_basics() {
        let grid = grid17();
        let mat = MaterialParams::default();
        let state = random_admissible_state(&grid, 3);

        let zero = Field::zeros_on_nodes(&grid, 2);
        assert_eq!(dissipation_rate(&state, &zero, &mat).unwrap(), 0.0);
        let gz = dissipation_gradient(&state, &zero, &mat).unwrap();
        assert!(gz.data.iter().all(|v| *v == 0.0));

        // 2-homogeneity: R(eta, 2b) = 4 R(eta, b).
        let r1 = dissipation_rate(&state, &state.velocity, &mat).unwrap();
        let mut doubled = state.velocity.clone();
        doubled.data.iter_mut().for_each(|v| *v *= 2.0);
        let r2 = dissipation_rate(&state, &doubled, &mat).unwrap();
        assert!((r2 - 4.0 * r1).abs() <= 1e-10 * r1.max(1.0));

        // Rigid rotation generator on the identity: grad b skew, R = 0.
        let identity = DeformationField::identity(&grid, &[0.0, 0.0]);
        let mut rot = Field::zeros_on_nodes(&grid, 2);
        rot.fill_from(|p, c| if c == 0 { -p[1] } else { p[0] });
        let r_rot = dissipation_rate(&identity, &rot, &mat).unwrap();
        assert!(r_rot.abs() < 1e-20, "R = {r_rot}");
    }

    #[test]
    fn dissipation_euler_identity_and_fd() {
        let grid = grid17();
        let mat = MaterialParams::default();
        let state = random_admissible_state(&grid, 11);
        let r = dissipation_rate(&state, &state.velocity, &mat).unwrap();
        let g = dissipation_gradient(&state, &state.velocity, &mat).unwrap();
        let pairing: f64 = g
            .data
            .iter()
            .zip(&state.velocity.data)
            .map(|(a, b)| a * b)
            .sum();
        assert!(
            (pairing - 2.0 * r).abs() <= 1e-10 * r.max(1.0),
            "Euler identity: <D2R, b> = {pairing}, 2R = {}",
            2.0 * r
        );

        let mut f = |vel: &Field| dissipation_rate(&state, vel, &mat).unwrap();
        let err = finite_difference_error(&mut f, &state.velocity, &g, 1e-6);
        assert!(err <= 1e-6, "relative FD error {err}");
    }

    #[test]
    fn regularized_forms_reduce_to_plain_at_zero_eps() {
        let grid = grid17();
        let mat = MaterialParams::default();
        let state = random_admissible_state(&grid, 5);
        let forms = regularized_forms(&state, &state.velocity, &mat, 0.0).unwrap();
        let e = elastic_energy(&state, &mat).unwrap();
        let r = dissipation_rate(&state, &state.velocity, &mat).unwrap();
        assert_eq!(forms.e_value, e);
        assert_eq!(forms.r_value, r);
    }

    #[test]
    fn regularization_term_on_identity_is_documented_stencil_value() {
        // Identity map: all differences of order >= 2 vanish, leaving the L2
        // part and the first differences (which are exactly 1 per axis).
        let grid = grid17();
        let mat = MaterialParams::default();
        let state = DeformationField::identity(&grid, &[0.0, 0.0]);
        let eps = 0.1;
        let forms = regularized_forms(&state, &state.velocity, &mat, eps).unwrap();
        let e = elastic_energy(&state, &mat).unwrap();
        let norm = sobolev_norm_sq(&state.positions, &grid, mat.reg_order).unwrap();
        assert!((forms.e_value - e - 0.01 * norm).abs() < 1e-13);
        // The norm itself: int (x^2 + y^2) + int (1 + 1) by trapezoid.
        let mut sq = Field::zeros_on_nodes(&grid, 1);
        sq.fill_from(|p, _| p[0] * p[0] + p[1] * p[1]);
        let l2 = crate::grid::integrate(&sq).unwrap();
        assert!((norm - (l2 + 2.0)).abs() < 1e-12, "norm {norm} vs {}", l2 + 2.0);
    }

    #[test]
    fn regularized_gradients_match_finite_differences() {
        let grid = grid17();
        let mat = MaterialParams::default();
        let state = random_admissible_state(&grid, 13);
        let eps = 0.1;
        let forms = regularized_forms(&state, &state.velocity, &mat, eps).unwrap();

        let mut probe = state.clone();
        let mut fe = |pos: &Field| {
            probe.positions = pos.clone();
            let e = elastic_energy(&probe, &mat).unwrap();
            e + eps.powf(mat.reg_exp)
                * sobolev_norm_sq(pos, &probe.grid, mat.reg_order).unwrap()
        };
        let err_e = finite_difference_error(&mut fe, &state.positions, &forms.e_gradient, 1e-6);
        assert!(err_e <= 1e-5, "E_eps FD error {err_e}");

        let mut fr = |vel: &Field| {
            dissipation_rate(&state, vel, &mat).unwrap()
                + eps * sobolev_norm_sq(vel, &state.grid, mat.reg_order).unwrap()
        };
        let err_r = finite_difference_error(&mut fr, &state.velocity, &forms.r_gradient, 1e-6);
        assert!(err_r <= 1e-5, "R_eps FD error {err_r}");
    }

    #[test]
    fn energy_bound_implies_det_bound() {
        let grid = grid17();
        let mat = MaterialParams::default();
        for seed in 0..5 {
            let state = random_admissible_state(&grid, 100 + seed);
            let e = elastic_energy(&state, &mat).unwrap();
            let g = crate::kinematics::deformation_gradient(&state).unwrap();
            let bound = det_bound_from_energy(e, &grid, &mat);
            assert!(
                g.min_det >= bound,
                "min det {} below energy-implied bound {bound}",
                g.min_det
            );
        }
    }

    #[test]
    fn params_validation() {
        assert!(MaterialParams::default().validate(2).is_ok());
        let bad_q = MaterialParams {
            grad_exp: 2.0,
            ..Default::default()
        };
        assert!(bad_q.validate(2).is_err());
        let bad_a = MaterialParams {
            barrier_exp: 3.0,
            ..Default::default()
        };
        assert!(bad_a.validate(2).is_err());
    }
}
