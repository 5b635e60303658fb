//! Uniform structured grids, discrete fields and finite-difference stencils.
//!
//! Two grids exist: the solid reference grid (nodal, trapezoid quadrature) and
//! the Eulerian container grid (cell-centered density, face-centered velocity).
//! All operators are dimension-parametric; d = 2 is the validated configuration.

use crate::error::{FsiError, Result};

/// Axis-aligned box, used for the container and for probe windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Aabb {
    pub origin: Vec<f64>,
    pub extent: Vec<f64>,
}

impl Aabb {
    pub fn new(origin: Vec<f64>, extent: Vec<f64>) -> Self {
        assert_eq!(origin.len(), extent.len());
        assert!(extent.iter().all(|&e| e > 0.0), "extent must be positive");
        Aabb { origin, extent }
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(&self.origin)
            .zip(&self.extent)
            .all(|((&x, &o), &e)| x >= o && x <= o + e)
    }

    /// Signed distance to the box boundary, positive inside.
    pub fn wall_distance(&self, p: &[f64]) -> f64 {
        let mut d = f64::INFINITY;
        for a in 0..self.dim() {
            d = d.min(p[a] - self.origin[a]);
            d = d.min(self.origin[a] + self.extent[a] - p[a]);
        }
        d
    }

    /// Inward direction of the nearest wall face (axis-aligned unit vector).
    /// Ties resolve to the lowest axis / low face.
    pub fn wall_inward_normal(&self, p: &[f64]) -> Vec<f64> {
        let mut best = f64::INFINITY;
        let mut normal = vec![0.0; self.dim()];
        for a in 0..self.dim() {
            let lo = p[a] - self.origin[a];
            if lo < best {
                best = lo;
                normal.iter_mut().for_each(|v| *v = 0.0);
                normal[a] = 1.0;
            }
            let hi = self.origin[a] + self.extent[a] - p[a];
            if hi < best {
                best = hi;
                normal.iter_mut().for_each(|v| *v = 0.0);
                normal[a] = -1.0;
            }
        }
        normal
    }

    pub fn volume(&self) -> f64 {
        self.extent.iter().product()
    }
}

/// Reference grid of the solid: nodes at `origin + i * spacing`,
/// `resolution` nodes per axis, `spacing = extent / (resolution - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolidGrid {
    pub origin: Vec<f64>,
    pub extent: Vec<f64>,
    pub resolution: Vec<usize>,
}

impl SolidGrid {
    pub fn new(origin: Vec<f64>, extent: Vec<f64>, resolution: Vec<usize>) -> Result<Self> {
        let d = origin.len();
        if extent.len() != d || resolution.len() != d {
            return Err(FsiError::InvalidParameter(
                "solid grid: origin/extent/resolution dimension mismatch".into(),
            ));
        }
        if resolution.iter().any(|&r| r < 4) {
            return Err(FsiError::InvalidParameter(
                "solid grid: resolution must be at least 4 per axis".into(),
            ));
        }
        if extent.iter().any(|&e| !(e > 0.0)) {
            return Err(FsiError::InvalidParameter(
                "solid grid: extent must be positive".into(),
            ));
        }
        Ok(SolidGrid {
            origin,
            extent,
            resolution,
        })
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn spacing(&self) -> Vec<f64> {
        self.extent
            .iter()
            .zip(&self.resolution)
            .map(|(&e, &r)| e / (r - 1) as f64)
            .collect()
    }

    pub fn node_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn node_position(&self, multi: &[usize]) -> Vec<f64> {
        let s = self.spacing();
        multi
            .iter()
            .enumerate()
            .map(|(a, &i)| self.origin[a] + i as f64 * s[a])
            .collect()
    }

    /// Trapezoid quadrature weight of a node (product of per-axis weights).
    pub fn node_weight(&self, multi: &[usize]) -> f64 {
        let s = self.spacing();
        let mut w = 1.0;
        for a in 0..self.dim() {
            let half = multi[a] == 0 || multi[a] == self.resolution[a] - 1;
            w *= s[a] * if half { 0.5 } else { 1.0 };
        }
        w
    }

    /// Flat vector of all node quadrature weights, row-major node order.
    pub fn node_weights(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.node_count()];
        let mut multi = vec![0usize; self.dim()];
        for (flat, w) in out.iter_mut().enumerate() {
            unflatten(flat, &self.resolution, &mut multi);
            *w = self.node_weight(&multi);
        }
        out
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::new(self.origin.clone(), self.extent.clone())
    }
}

/// Eulerian container grid: `resolution` cells per axis; density lives at cell
/// centers, velocity component `a` on faces normal to axis `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidGrid {
    pub origin: Vec<f64>,
    pub extent: Vec<f64>,
    pub resolution: Vec<usize>,
}

/// Staggering of a fluid-grid field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Staggering {
    CellCenteredDensity,
    FaceCenteredVelocity,
}

impl FluidGrid {
    pub fn new(origin: Vec<f64>, extent: Vec<f64>, resolution: Vec<usize>) -> Result<Self> {
        let d = origin.len();
        if extent.len() != d || resolution.len() != d {
            return Err(FsiError::InvalidParameter(
                "fluid grid: origin/extent/resolution dimension mismatch".into(),
            ));
        }
        if resolution.iter().any(|&r| r < 8) {
            return Err(FsiError::InvalidParameter(
                "fluid grid: resolution must be at least 8 cells per axis".into(),
            ));
        }
        if extent.iter().any(|&e| !(e > 0.0)) {
            return Err(FsiError::InvalidParameter(
                "fluid grid: extent must be positive".into(),
            ));
        }
        Ok(FluidGrid {
            origin,
            extent,
            resolution,
        })
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn spacing(&self) -> Vec<f64> {
        self.extent
            .iter()
            .zip(&self.resolution)
            .map(|(&e, &r)| e / r as f64)
            .collect()
    }

    pub fn cell_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().iter().product()
    }

    pub fn cell_center(&self, multi: &[usize]) -> Vec<f64> {
        let s = self.spacing();
        multi
            .iter()
            .enumerate()
            .map(|(a, &i)| self.origin[a] + (i as f64 + 0.5) * s[a])
            .collect()
    }

    /// Dimensions of the face lattice for velocity component `axis`.
    pub fn face_dims(&self, axis: usize) -> Vec<usize> {
        let mut dims = self.resolution.clone();
        dims[axis] += 1;
        dims
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::new(self.origin.clone(), self.extent.clone())
    }

    /// Cell index containing point `p`, clamped to the grid.
    pub fn cell_of(&self, p: &[f64]) -> Vec<usize> {
        let s = self.spacing();
        (0..self.dim())
            .map(|a| {
                let t = ((p[a] - self.origin[a]) / s[a]).floor();
                (t.max(0.0) as usize).min(self.resolution[a] - 1)
            })
            .collect()
    }
}

/// Sample layout of a [`Field`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Solid-grid nodes (includes domain boundary samples).
    Nodes,
    /// Fluid-grid cell centers.
    Cells,
    /// Fluid-grid faces normal to the given axis.
    Faces(usize),
}

/// Discrete field: `comps` values per sample, samples row-major (last axis
/// fastest), components fastest within a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub layout: Layout,
    pub dims: Vec<usize>,
    pub comps: usize,
    pub origin: Vec<f64>,
    pub spacing: Vec<f64>,
    pub data: Vec<f64>,
    pub time: f64,
}

pub fn flatten(multi: &[usize], dims: &[usize]) -> usize {
    let mut flat = 0;
    for (a, (&i, &n)) in multi.iter().zip(dims).enumerate() {
        debug_assert!(i < n, "index {i} out of bounds {n} on axis {a}");
        flat = flat * n + i;
    }
    flat
}

pub fn unflatten(mut flat: usize, dims: &[usize], multi: &mut [usize]) {
    for a in (0..dims.len()).rev() {
        multi[a] = flat % dims[a];
        flat /= dims[a];
    }
}

/// Visit all multi-indices of `dims` in row-major order.
pub fn for_each_multi(dims: &[usize], mut f: impl FnMut(&[usize], usize)) {
    let total: usize = dims.iter().product();
    let mut multi = vec![0usize; dims.len()];
    for flat in 0..total {
        f(&multi, flat);
        for a in (0..dims.len()).rev() {
            multi[a] += 1;
            if multi[a] < dims[a] {
                break;
            }
            multi[a] = 0;
        }
    }
}

impl Field {
    pub fn zeros_on_nodes(grid: &SolidGrid, comps: usize) -> Field {
        let n: usize = grid.node_count();
        Field {
            layout: Layout::Nodes,
            dims: grid.resolution.clone(),
            comps,
            origin: grid.origin.clone(),
            spacing: grid.spacing(),
            data: vec![0.0; n * comps],
            time: 0.0,
        }
    }

    pub fn zeros_on_cells(grid: &FluidGrid, comps: usize) -> Field {
        let n = grid.cell_count();
        Field {
            layout: Layout::Cells,
            dims: grid.resolution.clone(),
            comps,
            origin: grid.origin.clone(),
            spacing: grid.spacing(),
            data: vec![0.0; n * comps],
            time: 0.0,
        }
    }

    pub fn zeros_on_faces(grid: &FluidGrid, axis: usize) -> Field {
        let dims = grid.face_dims(axis);
        let n: usize = dims.iter().product();
        Field {
            layout: Layout::Faces(axis),
            dims,
            comps: 1,
            origin: grid.origin.clone(),
            spacing: grid.spacing(),
            data: vec![0.0; n],
            time: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn samples(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn at(&self, sample: usize, comp: usize) -> f64 {
        self.data[sample * self.comps + comp]
    }

    #[inline]
    pub fn set(&mut self, sample: usize, comp: usize, v: f64) {
        self.data[sample * self.comps + comp] = v;
    }

    #[inline]
    pub fn add(&mut self, sample: usize, comp: usize, v: f64) {
        self.data[sample * self.comps + comp] += v;
    }

    pub fn fill_from(&mut self, f: impl Fn(&[f64], usize) -> f64) {
        let comps = self.comps;
        let mut vals = Vec::with_capacity(self.samples());
        for_each_multi(&self.dims, |multi, _| {
            vals.push(self.sample_position(multi));
        });
        for (s, pos) in vals.iter().enumerate() {
            for c in 0..comps {
                self.data[s * comps + c] = f(pos, c);
            }
        }
    }

    /// Physical position of a sample, respecting the layout staggering.
    pub fn sample_position(&self, multi: &[usize]) -> Vec<f64> {
        match self.layout {
            Layout::Nodes => multi
                .iter()
                .enumerate()
                .map(|(a, &i)| self.origin[a] + i as f64 * self.spacing[a])
                .collect(),
            Layout::Cells => multi
                .iter()
                .enumerate()
                .map(|(a, &i)| self.origin[a] + (i as f64 + 0.5) * self.spacing[a])
                .collect(),
            Layout::Faces(axis) => multi
                .iter()
                .enumerate()
                .map(|(a, &i)| {
                    let off = if a == axis { 0.0 } else { 0.5 };
                    self.origin[a] + (i as f64 + off) * self.spacing[a]
                })
                .collect(),
        }
    }

    pub fn assert_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(FsiError::NonFinite(context))
        }
    }

    /// Multilinear interpolation at a physical point (clamped to the grid).
    /// Returns one value per component into `out`.
    pub fn interpolate(&self, p: &[f64], out: &mut [f64]) {
        let d = self.dim();
        debug_assert_eq!(out.len(), self.comps);
        // Local coordinates in sample-lattice units.
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0f64; d];
        for a in 0..d {
            let off = match self.layout {
                Layout::Nodes => 0.0,
                Layout::Cells => 0.5,
                Layout::Faces(axis) => {
                    if a == axis {
                        0.0
                    } else {
                        0.5
                    }
                }
            };
            let t = (p[a] - self.origin[a]) / self.spacing[a] - off;
            let t = t.clamp(0.0, (self.dims[a] - 1) as f64);
            let i = (t.floor() as usize).min(self.dims[a].saturating_sub(2));
            base[a] = i;
            frac[a] = t - i as f64;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        let corners = 1usize << d;
        let mut multi = vec![0usize; d];
        for corner in 0..corners {
            let mut w = 1.0;
            for a in 0..d {
                let hi = (corner >> a) & 1 == 1;
                multi[a] = base[a] + hi as usize;
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            let flat = flatten(&multi, &self.dims);
            for (c, v) in out.iter_mut().enumerate() {
                *v += w * self.at(flat, c);
            }
        }
    }
}

/// Differentiation modes for [`differentiate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffOp {
    Gradient,
    Divergence,
    Hessian,
    Laplacian,
}

/// Row of a 1-D stencil: output index `i` draws from `(offsets, coeffs)`.
fn d1_row(i: usize, n: usize, s: f64) -> ([usize; 4], [f64; 4], usize) {
    let h = 1.0 / (2.0 * s);
    if i == 0 {
        ([0, 1, 2, 0], [-3.0 * h, 4.0 * h, -h, 0.0], 3)
    } else if i == n - 1 {
        ([n - 3, n - 2, n - 1, 0], [h, -4.0 * h, 3.0 * h, 0.0], 3)
    } else {
        ([i - 1, i + 1, 0, 0], [-h, h, 0.0, 0.0], 2)
    }
}

fn d2_row(i: usize, n: usize, s: f64) -> ([usize; 4], [f64; 4], usize) {
    let h = 1.0 / (s * s);
    if i == 0 {
        ([0, 1, 2, 3], [2.0 * h, -5.0 * h, 4.0 * h, -h], 4)
    } else if i == n - 1 {
        (
            [n - 4, n - 3, n - 2, n - 1],
            [-h, 4.0 * h, -5.0 * h, 2.0 * h],
            4,
        )
    } else {
        ([i - 1, i, i + 1, 0], [h, -2.0 * h, h, 0.0], 3)
    }
}

fn min_samples(order: usize) -> usize {
    match order {
        1 => 3,
        _ => 5,
    }
}

/// Apply the 1-D derivative stencil of the given `order` along `axis`,
/// componentwise. `adjoint` applies the transpose (scatter) instead; it is the
/// building block for exact gradients of discretized energies.
pub fn axis_derivative(field: &Field, axis: usize, order: usize, adjoint: bool) -> Result<Field> {
    let n = field.dims[axis];
    let needed = min_samples(order);
    if n < needed {
        return Err(FsiError::StencilUnderflow {
            op: if order == 1 {
                "first derivative"
            } else {
                "second derivative"
            },
            needed,
            found: n,
        });
    }
    let s = field.spacing[axis];
    let mut out = Field {
        data: vec![0.0; field.data.len()],
        ..field.clone()
    };
    // Stride of one step along `axis` in sample units.
    let mut stride = 1usize;
    for a in (axis + 1)..field.dims.len() {
        stride *= field.dims[a];
    }
    let comps = field.comps;
    let line_len = n;
    let total = field.samples();
    let lines = total / n;

    // Enumerate line base sample indices: all samples with axis-index 0.
    let mut line_bases = Vec::with_capacity(lines);
    {
        let mut dims_wo = field.dims.clone();
        dims_wo[axis] = 1;
        for_each_multi(&dims_wo, |multi, _| {
            line_bases.push(flatten(multi, &field.dims));
        });
    }

    for &base in &line_bases {
        for i in 0..line_len {
            let (offs, coeffs, cnt) = if order == 1 {
                d1_row(i, n, s)
            } else {
                d2_row(i, n, s)
            };
            let si = base + i * stride;
            for k in 0..cnt {
                let sj = base + offs[k] * stride;
                let c0 = coeffs[k];
                for c in 0..comps {
                    if adjoint {
                        out.data[sj * comps + c] += c0 * field.data[si * comps + c];
                    } else {
                        out.data[si * comps + c] += c0 * field.data[sj * comps + c];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Finite-difference derivative operators on a field; see the module docs for
/// the stencil choices (second-order central, one-sided second-order closure).
pub fn differentiate(field: &Field, mode: DiffOp) -> Result<Field> {
    field.assert_finite("differentiate input")?;
    let d = field.dim();
    match mode {
        DiffOp::Gradient => {
            // out comps = comps * d, derivative axis appended last.
            let mut out = Field {
                comps: field.comps * d,
                data: vec![0.0; field.samples() * field.comps * d],
                ..field.clone()
            };
            for a in 0..d {
                let da = axis_derivative(field, a, 1, false)?;
                for s in 0..field.samples() {
                    for c in 0..field.comps {
                        out.data[(s * field.comps + c) * d + a] = da.at(s, c);
                    }
                }
            }
            Ok(out)
        }
        DiffOp::Divergence => {
            if field.comps % d != 0 || field.comps == 0 {
                return Err(FsiError::InvalidParameter(
                    "divergence requires a field of rank >= 1".into(),
                ));
            }
            let out_comps = field.comps / d;
            let mut out = Field {
                comps: out_comps,
                data: vec![0.0; field.samples() * out_comps],
                ..field.clone()
            };
            for a in 0..d {
                let da = axis_derivative(field, a, 1, false)?;
                for s in 0..field.samples() {
                    for c in 0..out_comps {
                        out.data[s * out_comps + c] += da.at(s, c * d + a);
                    }
                }
            }
            Ok(out)
        }
        DiffOp::Hessian => {
            let needed = min_samples(2);
            if field.dims.iter().any(|&n| n < needed) {
                return Err(FsiError::StencilUnderflow {
                    op: "hessian",
                    needed,
                    found: *field.dims.iter().min().unwrap(),
                });
            }
            let out_comps = field.comps * d * d;
            let mut out = Field {
                comps: out_comps,
                data: vec![0.0; field.samples() * out_comps],
                ..field.clone()
            };
            for a in 0..d {
                for b in 0..d {
                    let dd = if a == b {
                        axis_derivative(field, a, 2, false)?
                    } else {
                        let inner = axis_derivative(field, b, 1, false)?;
                        axis_derivative(&inner, a, 1, false)?
                    };
                    for s in 0..field.samples() {
                        for c in 0..field.comps {
                            out.data[((s * field.comps + c) * d + a) * d + b] = dd.at(s, c);
                        }
                    }
                }
            }
            Ok(out)
        }
        DiffOp::Laplacian => {
            let mut out = Field {
                data: vec![0.0; field.data.len()],
                ..field.clone()
            };
            for a in 0..d {
                let dd = axis_derivative(field, a, 2, false)?;
                for (o, v) in out.data.iter_mut().zip(&dd.data) {
                    *o += v;
                }
            }
            Ok(out)
        }
    }
}

/// Quadrature of a scalar field over its grid. Trapezoid rule on node layouts,
/// midpoint (exact) on cell layouts; deterministic row-major summation order.
pub fn integrate(field: &Field) -> Result<f64> {
    if field.comps != 1 {
        return Err(FsiError::InvalidParameter(
            "integrate expects a scalar field".into(),
        ));
    }
    field.assert_finite("integrate input")?;
    let d = field.dim();
    let mut total = 0.0;
    match field.layout {
        Layout::Nodes => {
            for_each_multi(&field.dims, |multi, flat| {
                let mut w = 1.0;
                for a in 0..d {
                    let half = multi[a] == 0 || multi[a] == field.dims[a] - 1;
                    w *= field.spacing[a] * if half { 0.5 } else { 1.0 };
                }
                total += w * field.data[flat];
            });
        }
        Layout::Cells | Layout::Faces(_) => {
            let vol: f64 = field.spacing.iter().product();
            for v in &field.data {
                total += vol * v;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_square_grid(n: usize) -> SolidGrid {
        SolidGrid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![n, n]).unwrap()
    }

    fn scalar_field(grid: &SolidGrid, f: impl Fn(&[f64]) -> f64) -> Field {
        let mut fld = Field::zeros_on_nodes(grid, 1);
        fld.fill_from(|p, _| f(p));
        fld
    }

    #[test]
    fn gradient_of_linear_field_is_exact() {
        let grid = unit_square_grid(9);
        let f = scalar_field(&grid, |p| 2.0 * p[0]);
        let g = differentiate(&f, DiffOp::Gradient).unwrap();
        for s in 0..g.samples() {
            assert!((g.at(s, 0) - 2.0).abs() < 1e-12);
            assert!(g.at(s, 1).abs() < 1e-12);
        }
    }

    #[test]
    fn derivatives_of_constant_vanish() {
        let grid = unit_square_grid(7);
        let f = scalar_field(&grid, |_| 3.25);
        for mode in [
            DiffOp::Gradient,
            DiffOp::Hessian,
            DiffOp::Laplacian,
        ] {
            let g = differentiate(&f, mode).unwrap();
            assert!(g.data.iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn hessian_exact_on_quadratic() {
        let grid = unit_square_grid(9);
        let f = scalar_field(&grid, |p| p[0] * p[0]);
        let h = differentiate(&f, DiffOp::Hessian).unwrap();
        // Symbolic oracle: d2f/dx2 = 2, all other entries 0; the stencils are
        // exact on quadratics including the one-sided closures.
        for s in 0..h.samples() {
            assert!((h.at(s, 0) - 2.0).abs() < 1e-10, "dxx at {s}");
            assert!(h.at(s, 1).abs() < 1e-10);
            assert!(h.at(s, 2).abs() < 1e-10);
            assert!(h.at(s, 3).abs() < 1e-10);
        }
    }

    #[test]
    fn divergence_of_linear_vector_field() {
        let grid = unit_square_grid(8);
        let mut f = Field::zeros_on_nodes(&grid, 2);
        f.fill_from(|p, c| if c == 0 { 3.0 * p[0] } else { -1.0 * p[1] });
        let div = differentiate(&f, DiffOp::Divergence).unwrap();
        for s in 0..div.samples() {
            assert!((div.at(s, 0) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stencil_underflow_reported() {
        let grid = unit_square_grid(4);
        let f = scalar_field(&grid, |p| p[0]);
        let err = differentiate(&f, DiffOp::Hessian).unwrap_err();
        assert!(matches!(err, FsiError::StencilUnderflow { .. }));
    }

    #[test]
    fn integrate_constants() {
        let grid = unit_square_grid(9);
        let f = scalar_field(&grid, |_| 1.0);
        assert!((integrate(&f).unwrap() - 1.0).abs() < 1e-14);

        let grid2 =
            SolidGrid::new(vec![0.0, 0.0], vec![2.0, 2.0], vec![6, 6]).unwrap();
        let f2 = scalar_field(&grid2, |_| 3.0);
        assert!((integrate(&f2).unwrap() - 12.0).abs() < 1e-13);
    }

    #[test]
    fn integrate_linear_exact() {
        let grid = unit_square_grid(11);
        let f = scalar_field(&grid, |p| p[0]);
        assert!((integrate(&f).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn integration_is_bitwise_deterministic() {
        let grid = unit_square_grid(13);
        let f = scalar_field(&grid, |p| (p[0] * 12.9898 + p[1] * 78.233).sin());
        let a = integrate(&f).unwrap();
        let b = integrate(&f).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn adjoint_is_transpose_of_apply() {
        // <D f, g> == <f, D^T g> for random-ish fields.
        let grid = unit_square_grid(7);
        let f = scalar_field(&grid, |p| (3.1 * p[0] + 1.7 * p[1]).cos());
        let g = scalar_field(&grid, |p| (2.3 * p[0] - 0.9 * p[1]).sin());
        for order in [1usize, 2] {
            for axis in 0..2 {
                let df = axis_derivative(&f, axis, order, false).unwrap();
                let dtg = axis_derivative(&g, axis, order, true).unwrap();
                let lhs: f64 = df.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
                let rhs: f64 = f.data.iter().zip(&dtg.data).map(|(a, b)| a * b).sum();
                assert!(
                    (lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()),
                    "order {order} axis {axis}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn face_field_positions_are_staggered() {
        let grid =
            FluidGrid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![8, 8]).unwrap();
        let ux = Field::zeros_on_faces(&grid, 0);
        assert_eq!(ux.dims, vec![9, 8]);
        let p = ux.sample_position(&[0, 0]);
        assert!((p[0] - 0.0).abs() < 1e-15);
        assert!((p[1] - 0.0625).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn differentiate_is_linear(seed in 0u64..1000) {
            let grid = unit_square_grid(6);
            let mk = |s: u64| {
                scalar_field(&grid, move |p| {
                    ((s as f64 + 1.0) * p[0] * 1.3 + p[1] * (s % 7) as f64).sin()
                })
            };
            let f = mk(seed);
            let g = mk(seed.wrapping_mul(31).wrapping_add(7));
            let (a, b) = (2.5, -1.25);
            let mut combo = f.clone();
            for (i, v) in combo.data.iter_mut().enumerate() {
                *v = a * f.data[i] + b * g.data[i];
            }
            let d_combo = differentiate(&combo, DiffOp::Gradient).unwrap();
            let df = differentiate(&f, DiffOp::Gradient).unwrap();
            let dg = differentiate(&g, DiffOp::Gradient).unwrap();
            for i in 0..d_combo.data.len() {
                let want = a * df.data[i] + b * dg.data[i];
                prop_assert!((d_combo.data[i] - want).abs() < 1e-9);
            }
        }

        #[test]
        fn integrate_nonnegative(seed in 0u64..1000) {
            let grid = unit_square_grid(5);
            let f = scalar_field(&grid, |p| {
                ((seed as f64).sin() * p[0] + p[1]).abs()
            });
            prop_assert!(integrate(&f).unwrap() >= 0.0);
        }
    }
}
