//! Contact penalization: wall term plus pairwise self-contact term, with a
//! spatial hash so only pairs within the penalty range contribute.
//!
//! The kernel is `kappa(r) = 1/r + r - 2` on (0, 1), `+inf` at r <= 0 and 0
//! beyond 1; the scaled kernel is `kappa_eps(r) = kappa(r / eps)`, supported on
//! [0, eps). The pair term runs over the volumetric double quadrature of
//! reference nodes, excluding pairs closer than `sqrt(eps)` in the reference.

use std::collections::HashMap;

use crate::error::{FsiError, Result};
use crate::grid::{Aabb, Field};
use crate::kinematics::DeformationField;

/// Parameters of the contact penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactParams {
    /// Penalty range (length units); the kernel support is [0, eps).
    pub eps: f64,
}

impl ContactParams {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(FsiError::InvalidParameter(
                "contact eps must be positive".into(),
            ));
        }
        Ok(ContactParams { eps })
    }

    /// Reference-distance exclusion radius of the pair term.
    pub fn pair_cutoff(&self) -> f64 {
        self.eps.sqrt()
    }
}

/// Unscaled kernel value and derivative.
pub fn kappa(r: f64) -> (f64, f64) {
    if r <= 0.0 {
        (f64::INFINITY, f64::NEG_INFINITY)
    } else if r < 1.0 {
        (1.0 / r + r - 2.0, -1.0 / (r * r) + 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Scaled kernel `kappa_eps(r) = kappa(r / eps)` and its r-derivative.
pub fn kappa_eval(r: f64, eps: f64) -> (f64, f64) {
    let (v, dv) = kappa(r / eps);
    (v, dv / eps)
}

/// Spatial hash over deformed points; cell size equals the penalty range so a
/// 3^d neighborhood query covers the kernel support.
pub struct SpatialHash {
    cell: f64,
    dim: usize,
    buckets: HashMap<[i64; 3], Vec<u32>>,
}

impl SpatialHash {
    pub fn build(points: &[f64], dim: usize, cell: f64) -> SpatialHash {
        assert!(dim <= 3, "spatial hash supports up to 3 dimensions");
        let n = points.len() / dim;
        let mut buckets: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        for i in 0..n {
            let key = Self::key_of(&points[i * dim..(i + 1) * dim], cell);
            buckets.entry(key).or_default().push(i as u32);
        }
        SpatialHash { cell, dim, buckets }
    }

    fn key_of(p: &[f64], cell: f64) -> [i64; 3] {
        let mut key = [0i64; 3];
        for (a, &x) in p.iter().enumerate() {
            key[a] = (x / cell).floor() as i64;
        }
        key
    }

    /// Collect candidate indices from the 3^d buckets around `p` into `out`,
    /// in deterministic (bucket lexicographic, insertion) order.
    pub fn query(&self, p: &[f64], out: &mut Vec<u32>) {
        out.clear();
        let center = Self::key_of(p, self.cell);
        let mut offsets = [0i64; 3];
        let span = 3i64.pow(self.dim as u32);
        for code in 0..span {
            let mut c = code;
            for item in offsets.iter_mut().take(self.dim) {
                *item = c % 3 - 1;
                c /= 3;
            }
            let mut key = center;
            for a in 0..self.dim {
                key[a] += offsets[a];
            }
            if let Some(bucket) = self.buckets.get(&key) {
                out.extend_from_slice(bucket);
            }
        }
    }
}

/// Deformed node coordinates flattened into one vector.
fn deformed_points(state: &DeformationField) -> Vec<f64> {
    state.positions.data.clone()
}

/// Reference node coordinates flattened into one vector.
fn reference_points(state: &DeformationField) -> Vec<f64> {
    let mut pts = Vec::with_capacity(state.positions.data.len());
    crate::grid::for_each_multi(&state.grid.resolution, |multi, _| {
        pts.extend_from_slice(&state.grid.node_position(multi));
    });
    pts
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Contact penalty `K_eps`: wall quadrature plus the pairwise double
/// quadrature (ordered pairs, matching the double integral). Returns `+inf`
/// when a node touches or leaves the container or an admissible pair
/// coincides.
pub fn contact_penalty(
    state: &DeformationField,
    container: &Aabb,
    params: &ContactParams,
) -> Result<f64> {
    Ok(penalty_eval(state, container, params, false)?.0)
}

/// Exact gradient of the discrete penalty with respect to nodal positions.
pub fn contact_penalty_gradient(
    state: &DeformationField,
    container: &Aabb,
    params: &ContactParams,
) -> Result<Field> {
    let (value, grad) = penalty_eval(state, container, params, true)?;
    if !value.is_finite() {
        return Err(FsiError::InfiniteEnergy {
            reason: "infinite contact penalty",
        });
    }
    Ok(grad.unwrap())
}

pub fn penalty_eval(
    state: &DeformationField,
    container: &Aabb,
    params: &ContactParams,
    want_grad: bool,
) -> Result<(f64, Option<Field>)> {
    let d = state.dim();
    let eps = params.eps;
    let cutoff_sq = params.pair_cutoff() * params.pair_cutoff();
    let weights = state.grid.node_weights();
    let deformed = deformed_points(state);
    let reference = reference_points(state);
    let n = weights.len();

    let mut grad = want_grad.then(|| Field {
        comps: d,
        data: vec![0.0; n * d],
        ..state.positions.clone()
    });

    let mut value = 0.0;

    // Wall term.
    for i in 0..n {
        let p = &deformed[i * d..(i + 1) * d];
        let r = container.wall_distance(p);
        let (v, dv) = kappa_eval(r, eps);
        if v == 0.0 {
            continue;
        }
        if !v.is_finite() {
            return Ok((f64::INFINITY, None));
        }
        value += weights[i] * v;
        if let Some(g) = grad.as_mut() {
            // d dist / d p is the inward normal of the nearest face.
            let normal = container.wall_inward_normal(p);
            for c in 0..d {
                g.add(i, c, weights[i] * dv * normal[c]);
            }
        }
    }

    // Pair term over ordered pairs, hash-accelerated.
    let hash = SpatialHash::build(&deformed, d, eps);
    let mut candidates = Vec::new();
    for i in 0..n {
        let pi = &deformed[i * d..(i + 1) * d];
        let xi = &reference[i * d..(i + 1) * d];
        hash.query(pi, &mut candidates);
        for &j32 in &candidates {
            let j = j32 as usize;
            if j == i {
                continue;
            }
            let xj = &reference[j * d..(j + 1) * d];
            let ref_sq: f64 = xi
                .iter()
                .zip(xj)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if ref_sq < cutoff_sq {
                continue;
            }
            let pj = &deformed[j * d..(j + 1) * d];
            let r = dist(pi, pj);
            if r >= eps {
                continue;
            }
            let (v, dv) = kappa_eval(r, eps);
            if !v.is_finite() {
                return Ok((f64::INFINITY, None));
            }
            let w = weights[i] * weights[j];
            value += w * v;
            if let Some(g) = grad.as_mut() {
                // Force along the separation direction, acting on node i only;
                // the ordered double sum visits (j, i) for the reaction.
                let scale = w * dv / r;
                for c in 0..d {
                    g.add(i, c, scale * (pi[c] - pj[c]));
                }
            }
        }
    }

    Ok((value, grad))
}

/// Brute-force pair-term oracle used by tests: full O(n^2) double loop.
pub fn pair_term_brute_force(
    state: &DeformationField,
    params: &ContactParams,
) -> f64 {
    let d = state.dim();
    let eps = params.eps;
    let cutoff_sq = params.pair_cutoff() * params.pair_cutoff();
    let weights = state.grid.node_weights();
    let deformed = deformed_points(state);
    let reference = reference_points(state);
    let n = weights.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let ref_sq: f64 = (0..d)
                .map(|c| (reference[i * d + c] - reference[j * d + c]).powi(2))
                .sum();
            if ref_sq < cutoff_sq {
                continue;
            }
            let r = dist(&deformed[i * d..(i + 1) * d], &deformed[j * d..(j + 1) * d]);
            if r >= eps {
                continue;
            }
            total += weights[i] * weights[j] * kappa_eval(r, eps).0;
        }
    }
    total
}

/// Check the kernel growth bound `|kappa_eps'(r) r| <= c eps (kappa_eps(r)+1)`
/// by dense sampling of `r` in [lo, hi]; returns the largest ratio of left to
/// right side.
pub fn kappa_growth_ratio(eps: f64, c: f64, lo: f64, hi: f64, samples: usize) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..samples {
        let r = lo + (hi - lo) * (k as f64 + 0.5) / samples as f64;
        let (v, dv) = kappa_eval(r, eps);
        if !v.is_finite() {
            continue;
        }
        let lhs = (dv * r).abs();
        let rhs = c * eps * (v + 1.0);
        worst = worst.max(lhs / rhs);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SolidGrid;
    use crate::material::tests::{finite_difference_error, random_admissible_state};
    use proptest::prelude::*;

    fn grid9() -> SolidGrid {
        SolidGrid::new(vec![0.0, 0.0], vec![0.5, 0.5], vec![9, 9]).unwrap()
    }

    fn container() -> Aabb {
        Aabb::new(vec![0.0, 0.0], vec![2.0, 2.0])
    }

    #[test]
    fn kappa_canonical_values() {
        let (v, _) = kappa(0.5);
        assert!((v - 0.5).abs() < 1e-15);
        let (v1, d1) = kappa(1.5);
        assert_eq!(v1, 0.0);
        assert_eq!(d1, 0.0);
        // Derivative is continuous at r = 1.
        let (_, d) = kappa(1.0 - 1e-9);
        assert!(d.abs() < 3e-9);
        assert!(kappa(0.0).0.is_infinite());
        assert!(kappa(-1.0).0.is_infinite());
    }

    #[test]
    fn kappa_growth_bound_with_c3() {
        // At eps = 1 the scaled bound coincides with the base assumption
        // |kappa'(r) r| <= c (kappa(r) + 1), which holds with c = 3.
        let eps = 1.0;
        let ratio = kappa_growth_ratio(eps, 3.0, eps / 100.0, 2.0 * eps, 40_000);
        assert!(ratio <= 1.0, "growth ratio {ratio}");
    }

    #[test]
    fn kappa_is_convex_on_dense_grid() {
        let n = 5000;
        let h = 1.0 / n as f64;
        for k in 1..(2 * n - 1) {
            let r = k as f64 * h / 2.0 + h;
            let f = |x: f64| kappa(x).0;
            let second = f(r + h) - 2.0 * f(r) + f(r - h);
            assert!(second >= -1e-9, "nonconvex at r = {r}");
        }
    }

    #[test]
    fn separated_solid_has_zero_penalty() {
        let params = ContactParams::new(0.05).unwrap();
        let state = DeformationField::identity(&grid9(), &[0.7, 0.7]);
        let k = contact_penalty(&state, &container(), &params).unwrap();
        assert_eq!(k, 0.0);
        let g = contact_penalty_gradient(&state, &container(), &params).unwrap();
        assert!(g.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_wall_node_hand_value() {
        // Place the solid so exactly one corner node sits at wall distance
        // eps/2 and everything else is farther than eps from walls and pairs.
        let eps = 0.05;
        let params = ContactParams::new(eps).unwrap();
        let grid = grid9();
        let mut state = DeformationField::identity(&grid, &[0.5, 0.5]);
        // Pull the (0,0) corner node toward the x = 0 wall.
        state.positions.set(0, 0, eps / 2.0);
        let k = contact_penalty(&state, &container(), &params).unwrap();
        let w = grid.node_weight(&[0, 0]);
        // kappa(1/2) = 0.5; pair contributions vanish (all pair distances
        // remain far beyond eps).
        assert!(
            (k - 0.5 * w).abs() < 1e-12,
            "K = {k}, expected {}",
            0.5 * w
        );
    }

    #[test]
    fn coincident_far_pair_is_infinite() {
        let params = ContactParams::new(0.05).unwrap();
        let grid = grid9();
        let mut state = DeformationField::identity(&grid, &[0.5, 0.5]);
        // Collapse two reference-distant nodes onto the same deformed point.
        let n = grid.resolution[0];
        let far = (n - 1) * n + (n - 1); // opposite corner, reference distance ~0.7
        state.positions.set(far, 0, state.positions.at(0, 0));
        state.positions.set(far, 1, state.positions.at(0, 1));
        let k = contact_penalty(&state, &container(), &params).unwrap();
        assert!(k.is_infinite());
    }

    #[test]
    fn pair_gradient_balances_and_matches_fd() {
        let eps = 0.08;
        let params = ContactParams::new(eps).unwrap();
        let grid = grid9();
        let container = container();
        // Fold the square gently so opposite edges approach within eps while
        // staying away from the walls.
        let mut state = random_admissible_state(&grid, 21);
        for s in 0..state.positions.samples() {
            let x = state.positions.at(s, 0);
            let y = state.positions.at(s, 1);
            state.positions.set(s, 0, 0.9 + 0.2 * x);
            state
                .positions
                .set(s, 1, 0.9 + 0.2 * y + 0.5 * (x * 1.8).powi(2));
        }
        let k = contact_penalty(&state, &container, &params).unwrap();
        assert!(k.is_finite());

        let g = contact_penalty_gradient(&state, &container, &params).unwrap();
        // Wall term inactive here, so internal pair forces must balance.
        let mut sums = [0.0f64; 2];
        for s in 0..g.samples() {
            sums[0] += g.at(s, 0);
            sums[1] += g.at(s, 1);
        }
        let gmax = g.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(sums[0].abs() <= 1e-10 * gmax.max(1.0), "sum {}", sums[0]);
        assert!(sums[1].abs() <= 1e-10 * gmax.max(1.0), "sum {}", sums[1]);

        let mut probe = state.clone();
        let mut f = |pos: &crate::grid::Field| {
            probe.positions = pos.clone();
            contact_penalty(&probe, &container, &params).unwrap()
        };
        let err = finite_difference_error(&mut f, &state.positions, &g, 1e-7);
        assert!(err <= 1e-5, "relative FD error {err}");
    }

    #[test]
    fn hash_matches_brute_force() {
        let grid = grid9();
        for seed in 0..4 {
            let mut state = random_admissible_state(&grid, 50 + seed);
            // Compress into a narrow band to force many near pairs.
            for s in 0..state.positions.samples() {
                let y = state.positions.at(s, 1);
                state.positions.set(s, 1, 1.0 + 0.05 * y);
                let x = state.positions.at(s, 0);
                state.positions.set(s, 0, 0.8 + 0.4 * x);
            }
            let params = ContactParams::new(0.07).unwrap();
            let fast = penalty_eval(&state, &container(), &params, false)
                .unwrap()
                .0;
            let wall: f64 = {
                // Isolate the pair term by subtracting the wall term.
                let d = 2;
                let weights = grid.node_weights();
                let mut total = 0.0;
                for (i, w) in weights.iter().enumerate() {
                    let p = [state.positions.at(i, 0), state.positions.at(i, 1)];
                    let r = container().wall_distance(&p[..d]);
                    let (v, _) = kappa_eval(r, params.eps);
                    total += w * v;
                }
                total
            };
            let brute = pair_term_brute_force(&state, &params);
            assert!(
                ((fast - wall) - brute).abs() <= 1e-10 * brute.max(1.0),
                "hash {} vs brute {brute}",
                fast - wall
            );
        }
    }

    #[test]
    fn pair_term_is_translation_invariant() {
        let grid = grid9();
        let params = ContactParams::new(0.07).unwrap();
        let big = Aabb::new(vec![-10.0, -10.0], vec![30.0, 30.0]);
        let mut state = random_admissible_state(&grid, 33);
        for s in 0..state.positions.samples() {
            let y = state.positions.at(s, 1);
            state.positions.set(s, 1, 1.0 + 0.08 * y);
        }
        let k0 = contact_penalty(&state, &big, &params).unwrap();
        let mut shifted = state.clone();
        for s in 0..shifted.positions.samples() {
            shifted.positions.add(s, 0, 1.3);
            shifted.positions.add(s, 1, 2.1);
        }
        let k1 = contact_penalty(&shifted, &big, &params).unwrap();
        // Far from every wall both evaluations are pure pair terms.
        assert!((k0 - k1).abs() <= 1e-12 * k0.max(1.0));
    }

    proptest! {
        #[test]
        fn scaled_kernel_support(r in 0.0001f64..1.0, eps in 0.01f64..0.5) {
            let (v, dv) = kappa_eval(r, eps);
            if r >= eps {
                prop_assert_eq!(v, 0.0);
                prop_assert_eq!(dv, 0.0);
            } else {
                prop_assert!(v > 0.0 || r == eps);
            }
        }
    }
}
