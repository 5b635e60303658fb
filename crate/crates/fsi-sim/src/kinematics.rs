//! Deformation-field algebra: deformation gradient, Jacobian, Ciarlet-Nečas
//! residual, rasterization onto the Eulerian grid and inverse-map evaluation.

use crate::error::{FsiError, Result};
use crate::grid::{
    differentiate, flatten, for_each_multi, unflatten, Aabb, DiffOp, Field, FluidGrid, Layout,
    SolidGrid,
};

/// Lagrangian solid state: nodal deformation and nodal velocity on the
/// reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub grid: SolidGrid,
    /// Deformed positions, one d-vector per node.
    pub positions: Field,
    /// Material velocity, one d-vector per node.
    pub velocity: Field,
    pub time: f64,
}

impl DeformationField {
    /// Identity deformation translated by `shift`, zero velocity.
    pub fn identity(grid: &SolidGrid, shift: &[f64]) -> DeformationField {
        let d = grid.dim();
        let mut positions = Field::zeros_on_nodes(grid, d);
        positions.fill_from(|p, c| p[c] + shift[c]);
        let velocity = Field::zeros_on_nodes(grid, d);
        DeformationField {
            grid: grid.clone(),
            positions,
            velocity,
            time: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Deformed image of a reference point by multilinear interpolation.
    pub fn map_point(&self, x: &[f64], out: &mut [f64]) {
        self.positions.interpolate(x, out);
    }

    /// Quadrature-weighted center of mass of the deformed configuration.
    pub fn center_of_mass(&self) -> Vec<f64> {
        let d = self.dim();
        let weights = self.grid.node_weights();
        let mut com = vec![0.0; d];
        let mut wsum = 0.0;
        for (s, &w) in weights.iter().enumerate() {
            wsum += w;
            for c in 0..d {
                com[c] += w * self.positions.at(s, c);
            }
        }
        com.iter_mut().for_each(|v| *v /= wsum);
        com
    }
}

/// Determinant of a d x d matrix stored row-major. Closed form for d <= 3,
/// Gaussian elimination beyond.
pub fn det_dxd(m: &[f64], d: usize) -> f64 {
    match d {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => {
            let mut a = m.to_vec();
            let mut det = 1.0;
            for k in 0..d {
                let mut piv = k;
                for r in (k + 1)..d {
                    if a[r * d + k].abs() > a[piv * d + k].abs() {
                        piv = r;
                    }
                }
                if a[piv * d + k] == 0.0 {
                    return 0.0;
                }
                if piv != k {
                    for c in 0..d {
                        a.swap(k * d + c, piv * d + c);
                    }
                    det = -det;
                }
                det *= a[k * d + k];
                for r in (k + 1)..d {
                    let f = a[r * d + k] / a[k * d + k];
                    for c in k..d {
                        a[r * d + c] -= f * a[k * d + c];
                    }
                }
            }
            det
        }
    }
}

/// Inverse of a d x d matrix row-major; returns false when singular.
pub fn invert_dxd(m: &[f64], d: usize, out: &mut [f64]) -> bool {
    match d {
        1 => {
            if m[0] == 0.0 {
                return false;
            }
            out[0] = 1.0 / m[0];
            true
        }
        2 => {
            let det = det_dxd(m, 2);
            if det == 0.0 {
                return false;
            }
            out[0] = m[3] / det;
            out[1] = -m[1] / det;
            out[2] = -m[2] / det;
            out[3] = m[0] / det;
            true
        }
        _ => {
            // Gauss-Jordan with partial pivoting on [m | I].
            let mut a = m.to_vec();
            for (i, v) in out.iter_mut().enumerate() {
                *v = if i % (d + 1) == 0 { 1.0 } else { 0.0 };
            }
            for k in 0..d {
                let mut piv = k;
                for r in (k + 1)..d {
                    if a[r * d + k].abs() > a[piv * d + k].abs() {
                        piv = r;
                    }
                }
                if a[piv * d + k] == 0.0 {
                    return false;
                }
                if piv != k {
                    for c in 0..d {
                        a.swap(k * d + c, piv * d + c);
                        out.swap(k * d + c, piv * d + c);
                    }
                }
                let p = a[k * d + k];
                for c in 0..d {
                    a[k * d + c] /= p;
                    out[k * d + c] /= p;
                }
                for r in 0..d {
                    if r == k {
                        continue;
                    }
                    let f = a[r * d + k];
                    if f == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        a[r * d + c] -= f * a[k * d + c];
                        out[r * d + c] -= f * out[k * d + c];
                    }
                }
            }
            true
        }
    }
}

/// Deformation gradient F = grad eta and its determinant per node.
pub struct DeformationGradient {
    /// Tensor field, comps = d*d, F[c][a] = d eta_c / d x_a.
    pub tensor: Field,
    /// Scalar field of det F per node.
    pub det: Field,
    pub min_det: f64,
}

pub fn deformation_gradient(state: &DeformationField) -> Result<DeformationGradient> {
    let d = state.dim();
    let tensor = differentiate(&state.positions, DiffOp::Gradient)?;
    let mut det = Field {
        comps: 1,
        data: vec![0.0; tensor.samples()],
        ..state.positions.clone()
    };
    let mut min_det = f64::INFINITY;
    for s in 0..tensor.samples() {
        let f = &tensor.data[s * d * d..(s + 1) * d * d];
        let dv = det_dxd(f, d);
        det.data[s] = dv;
        min_det = min_det.min(dv);
    }
    Ok(DeformationGradient {
        tensor,
        det,
        min_det,
    })
}

/// Coverage of the Eulerian grid by the deformed solid.
///
/// `coverage` is the covered volume fraction per cell in [0, 1]; `weight` the
/// pushforward factor (det grad eta)^{-1} averaged over covering samples;
/// `velocity` the pushforward solid velocity per covered cell.
#[derive(Debug, Clone)]
pub struct SolidMask {
    pub dims: Vec<usize>,
    pub coverage: Vec<f64>,
    pub weight: Vec<f64>,
    pub velocity: Vec<f64>,
    pub dim: usize,
}

impl SolidMask {
    pub fn empty(grid: &FluidGrid) -> SolidMask {
        let n = grid.cell_count();
        SolidMask {
            dims: grid.resolution.clone(),
            coverage: vec![0.0; n],
            weight: vec![0.0; n],
            velocity: vec![0.0; n * grid.dim()],
            dim: grid.dim(),
        }
    }

    /// Full coverage with unit weight and zero velocity (test helper).
    pub fn full(grid: &FluidGrid) -> SolidMask {
        let n = grid.cell_count();
        SolidMask {
            dims: grid.resolution.clone(),
            coverage: vec![1.0; n],
            weight: vec![1.0; n],
            velocity: vec![0.0; n * grid.dim()],
            dim: grid.dim(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.coverage.iter().all(|&c| c == 0.0)
    }
}

/// Number of forward samples per solid cell per axis: four times the
/// solid-to-fluid spacing ratio, at least 2.
fn subdivision(solid: &SolidGrid, target_spacing: &[f64]) -> Vec<usize> {
    solid
        .spacing()
        .iter()
        .zip(target_spacing)
        .map(|(&ss, &fs)| ((4.0 * ss / fs).ceil() as usize).max(2))
        .collect()
}

struct ForwardSamples {
    /// Deformed sample positions, flattened d-vectors.
    positions: Vec<f64>,
    /// det grad eta at the reference sample.
    dets: Vec<f64>,
    /// Solid velocity at the reference sample, flattened d-vectors.
    velocities: Vec<f64>,
    /// Reference volume per sample.
    ref_volume: f64,
}

/// Forward-map midpoints of subdivided solid cells, carrying det and velocity.
fn forward_samples(
    state: &DeformationField,
    det_field: &Field,
    target_spacing: &[f64],
) -> ForwardSamples {
    let d = state.dim();
    let grid = &state.grid;
    let sub = subdivision(grid, target_spacing);
    let spacing = grid.spacing();
    let cells: Vec<usize> = grid.resolution.iter().map(|&r| r - 1).collect();
    let per_cell: usize = sub.iter().product();
    let n_cells: usize = cells.iter().product();
    let total = n_cells * per_cell;

    let mut positions = vec![0.0; total * d];
    let mut dets = vec![0.0; total];
    let mut velocities = vec![0.0; total * d];
    let ref_volume: f64 = spacing
        .iter()
        .zip(&sub)
        .map(|(&s, &k)| s / k as f64)
        .product();

    let mut x = vec![0.0; d];
    let mut out = vec![0.0; d];
    let mut idx = 0usize;
    for_each_multi(&cells, |cell, _| {
        for_each_multi(&sub, |sample, _| {
            for a in 0..d {
                x[a] = grid.origin[a]
                    + (cell[a] as f64 + (sample[a] as f64 + 0.5) / sub[a] as f64) * spacing[a];
            }
            state.positions.interpolate(&x, &mut out);
            positions[idx * d..(idx + 1) * d].copy_from_slice(&out);
            det_field.interpolate(&x, &mut out[..1]);
            dets[idx] = out[0];
            state.velocity.interpolate(&x, &mut out);
            velocities[idx * d..(idx + 1) * d].copy_from_slice(&out);
            idx += 1;
        });
    });

    ForwardSamples {
        positions,
        dets,
        velocities,
        ref_volume,
    }
}

/// Coverage fractions and pushforward data of the deformed solid on the
/// Eulerian grid.
pub fn rasterize_solid(state: &DeformationField, fluid_grid: &FluidGrid) -> Result<SolidMask> {
    let grad = deformation_gradient(state)?;
    if grad.min_det <= 0.0 {
        return Err(FsiError::DegenerateJacobian {
            min_det: grad.min_det,
        });
    }
    rasterize_with_gradient(state, &grad, fluid_grid)
}

/// Rasterization when the deformation gradient is already available.
pub fn rasterize_with_gradient(
    state: &DeformationField,
    grad: &DeformationGradient,
    fluid_grid: &FluidGrid,
) -> Result<SolidMask> {
    let d = state.dim();
    let samples = forward_samples(state, &grad.det, &fluid_grid.spacing());
    let mut mask = SolidMask::empty(fluid_grid);
    let n_samples = samples.dets.len();
    let cell_vol = fluid_grid.cell_volume();

    // Accumulators: deposited image volume, summed 1/det, summed velocity,
    // sample count per cell.
    let n_cells = fluid_grid.cell_count();
    let mut volume = vec![0.0; n_cells];
    let mut wsum = vec![0.0; n_cells];
    let mut count = vec![0u32; n_cells];

    let res = &fluid_grid.resolution;
    let spacing = fluid_grid.spacing();
    for i in 0..n_samples {
        let p = &samples.positions[i * d..(i + 1) * d];
        let mut inside = true;
        let mut flat = 0usize;
        for a in 0..d {
            let t = ((p[a] - fluid_grid.origin[a]) / spacing[a]).floor();
            if t < 0.0 || t >= res[a] as f64 {
                inside = false;
                break;
            }
            flat = flat * res[a] + t as usize;
        }
        if !inside {
            continue;
        }
        let det = samples.dets[i];
        volume[flat] += det * samples.ref_volume;
        wsum[flat] += 1.0 / det;
        count[flat] += 1;
        for c in 0..d {
            mask.velocity[flat * d + c] += samples.velocities[i * d + c];
        }
    }
    for cell in 0..n_cells {
        if count[cell] == 0 {
            continue;
        }
        mask.coverage[cell] = (volume[cell] / cell_vol).min(1.0);
        mask.weight[cell] = wsum[cell] / count[cell] as f64;
        for c in 0..d {
            mask.velocity[cell * d + c] /= count[cell] as f64;
        }
    }
    Ok(mask)
}

/// Ciarlet-Nečas residual: | vol_raster(eta(Omega_S)) - int det grad eta |.
///
/// The raster volume counts probe-grid cells hit by forward samples once, so a
/// self-overlapping deformation leaves a residual close to the overlap volume.
pub fn cn_residual(state: &DeformationField, probe_resolution: usize) -> Result<f64> {
    let d = state.dim();
    let grad = deformation_gradient(state)?;
    if grad.min_det <= 0.0 {
        return Err(FsiError::DegenerateJacobian {
            min_det: grad.min_det,
        });
    }

    // Probe box: bounding box of the deformed nodes with a small margin.
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for s in 0..state.positions.samples() {
        for a in 0..d {
            let v = state.positions.at(s, a);
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    let margin: f64 = (0..d).map(|a| hi[a] - lo[a]).fold(0.0, f64::max) * 0.02 + 1e-12;
    let probe_spacing: Vec<f64> = (0..d)
        .map(|a| (hi[a] - lo[a] + 2.0 * margin) / probe_resolution as f64)
        .collect();
    let probe_cell_vol: f64 = probe_spacing.iter().product();

    let samples = forward_samples(state, &grad.det, &probe_spacing);
    let n_probe: usize = probe_resolution.pow(d as u32);
    let mut hit = vec![false; n_probe];
    for i in 0..samples.dets.len() {
        let p = &samples.positions[i * d..(i + 1) * d];
        let mut flat = 0usize;
        let mut inside = true;
        for a in 0..d {
            let t = ((p[a] - (lo[a] - margin)) / probe_spacing[a]).floor();
            if t < 0.0 || t >= probe_resolution as f64 {
                inside = false;
                break;
            }
            flat = flat * probe_resolution + t as usize;
        }
        if inside {
            hit[flat] = true;
        }
    }
    let raster_volume = hit.iter().filter(|&&h| h).count() as f64 * probe_cell_vol;

    let jac_volume = crate::grid::integrate(&grad.det)?;
    Ok((raster_volume - jac_volume).abs())
}

/// Result of evaluating the inverse deformation at a point.
#[derive(Debug, Clone, PartialEq)]
pub enum InversePoint {
    Covered(Vec<f64>),
    NotCovered,
}

/// Newton inversion of eta at `point`, seeded from the nearest deformed node.
pub fn inverse_map(state: &DeformationField, point: &[f64]) -> Result<InversePoint> {
    let d = state.dim();
    let grad = deformation_gradient(state)?;
    if grad.min_det <= 0.0 {
        return Err(FsiError::DegenerateJacobian {
            min_det: grad.min_det,
        });
    }

    // Seed: reference position of the deformed node nearest to `point`.
    let mut best = f64::INFINITY;
    let mut seed = vec![0.0; d];
    let mut multi = vec![0usize; d];
    for s in 0..state.positions.samples() {
        let mut dist = 0.0;
        for a in 0..d {
            let dv = state.positions.at(s, a) - point[a];
            dist += dv * dv;
        }
        if dist < best {
            best = dist;
            unflatten(s, &state.grid.resolution, &mut multi);
            seed = state.grid.node_position(&multi);
        }
    }
    let spacing = state.grid.spacing();
    let min_spacing = spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    // Deformed cell diameter bound from the node-to-node map; if the nearest
    // node image is far beyond it, the point cannot be covered.
    let max_stretch = grad
        .tensor
        .data
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let diam: f64 = spacing.iter().map(|&s| s * s).sum::<f64>().sqrt() * max_stretch;
    if best.sqrt() > 2.0 * diam + 1e-12 {
        return Ok(InversePoint::NotCovered);
    }

    let tol = 1e-10 * min_spacing;
    let mut x = seed;
    let mut fx = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut inv = vec![0.0; d * d];
    let mut residual = f64::INFINITY;
    for _ in 0..50 {
        state.positions.interpolate(&x, &mut fx);
        residual = (0..d)
            .map(|a| (fx[a] - point[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= tol {
            let inside = (0..d).all(|a| {
                x[a] >= state.grid.origin[a] - 1e-9 * spacing[a]
                    && x[a] <= state.grid.origin[a] + state.grid.extent[a] + 1e-9 * spacing[a]
            });
            return Ok(if inside {
                InversePoint::Covered(x)
            } else {
                InversePoint::NotCovered
            });
        }
        grad.tensor.interpolate(&x, &mut jac);
        if !invert_dxd(&jac, d, &mut inv) {
            return Err(FsiError::DegenerateJacobian { min_det: 0.0 });
        }
        let mut moved_out = 0;
        for a in 0..d {
            let mut step = 0.0;
            for b in 0..d {
                step += inv[a * d + b] * (point[b] - fx[b]);
            }
            x[a] += step;
            // Clamp to a one-cell margin around the reference domain.
            let lo = state.grid.origin[a] - spacing[a];
            let hi = state.grid.origin[a] + state.grid.extent[a] + spacing[a];
            if x[a] < lo {
                x[a] = lo;
                moved_out += 1;
            } else if x[a] > hi {
                x[a] = hi;
                moved_out += 1;
            }
        }
        if moved_out == d {
            return Ok(InversePoint::NotCovered);
        }
    }
    Err(FsiError::InverseMapNoConvergence {
        iterations: 50,
        residual,
    })
}

/// Tolerances for [`admissibility_check`].
#[derive(Debug, Clone)]
pub struct AdmissibilityTolerances {
    /// Allowed Ciarlet-Nečas residual (volume units).
    pub cn_tolerance: f64,
    /// Probe resolution for the raster volume.
    pub probe_resolution: usize,
}

impl Default for AdmissibilityTolerances {
    fn default() -> Self {
        AdmissibilityTolerances {
            cn_tolerance: 0.02,
            probe_resolution: 128,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdmissibilityReport {
    pub min_det: f64,
    pub cn_residual: f64,
    pub contained: bool,
    pub admissible: bool,
}

/// Aggregate admissibility: positive Jacobian, Ciarlet-Nečas residual within
/// tolerance, deformed image inside the container.
pub fn admissibility_check(
    state: &DeformationField,
    container: &Aabb,
    tol: &AdmissibilityTolerances,
) -> Result<AdmissibilityReport> {
    let grad = deformation_gradient(state)?;
    let min_det = grad.min_det;
    let residual = if min_det > 0.0 {
        cn_residual(state, tol.probe_resolution)?
    } else {
        f64::INFINITY
    };
    let d = state.dim();
    let mut contained = true;
    'outer: for s in 0..state.positions.samples() {
        for a in 0..d {
            let v = state.positions.at(s, a);
            if v < container.origin[a] || v > container.origin[a] + container.extent[a] {
                contained = false;
                break 'outer;
            }
        }
    }
    let admissible = min_det > 0.0 && residual <= tol.cn_tolerance && contained;
    Ok(AdmissibilityReport {
        min_det,
        cn_residual: residual,
        contained,
        admissible,
    })
}

/// Apply an affine map `x -> A x + b` as a deformation on `grid`.
pub fn affine_deformation(grid: &SolidGrid, a: &[f64], b: &[f64]) -> DeformationField {
    let d = grid.dim();
    let mut state = DeformationField::identity(grid, &vec![0.0; d]);
    let mut samples = Vec::new();
    for_each_multi(&grid.resolution, |multi, _| {
        samples.push(grid.node_position(multi));
    });
    for (s, x) in samples.iter().enumerate() {
        for c in 0..d {
            let mut v = b[c];
            for k in 0..d {
                v += a[c * d + k] * x[k];
            }
            state.positions.set(s, c, v);
        }
    }
    state
}
