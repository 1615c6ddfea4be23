//! Discrete domain: an axis-aligned box with MAC staggering.
//!
//! Scalars (cell density, signal, pressure) live at cell centers; vector
//! quantities (velocity, fluxes) live on faces, component `i` on faces
//! normal to axis `i`. Arrays are row-major with the last axis fastest,
//! padded internally to three axes so the same kernels serve 2-d and 3-d.

use crate::error::{Error, Result};
use crate::reduce;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Zero normal flux for scalars, zero velocity at walls.
    NoFluxNoSlip,
    /// Wrap-around on every axis.
    Periodic,
}

/// Rectangular-box discretization descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    cells: Vec<usize>,
    lengths: Vec<f64>,
    spacing: Vec<f64>,
    boundary: Boundary,
}

/// Build a grid, validating the domain contract.
pub fn make_grid(
    dim: usize,
    cells: &[usize],
    lengths: &[f64],
    boundary: Boundary,
) -> Result<Grid> {
    if dim != 2 && dim != 3 {
        return Err(Error::InvalidExtent { axis: 0, detail: format!("dim must be 2 or 3, got {dim}") });
    }
    if cells.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: cells.len(), what: "cells" });
    }
    if lengths.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: lengths.len(), what: "lengths" });
    }
    for (axis, &n) in cells.iter().enumerate() {
        if n < 4 {
            return Err(Error::InvalidExtent { axis, detail: format!("cell count {n} < 4") });
        }
    }
    for (axis, &len) in lengths.iter().enumerate() {
        if !(len > 0.0) || !len.is_finite() {
            return Err(Error::InvalidExtent { axis, detail: format!("length {len} must be positive") });
        }
    }
    let spacing = cells.iter().zip(lengths).map(|(&n, &len)| len / n as f64).collect();
    Ok(Grid { dim, cells: cells.to_vec(), lengths: lengths.to_vec(), spacing, boundary })
}

impl Grid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn is_periodic(&self) -> bool {
        self.boundary == Boundary::Periodic
    }

    pub fn cell_count(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn domain_volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Cell shape padded to three axes (size 1 beyond `dim`).
    pub fn shape3(&self) -> [usize; 3] {
        let mut s = [1usize; 3];
        s[..self.dim].copy_from_slice(&self.cells);
        s
    }

    /// Spacing padded to three axes (1.0 beyond `dim`).
    pub fn spacing3(&self) -> [f64; 3] {
        let mut h = [1.0f64; 3];
        h[..self.dim].copy_from_slice(&self.spacing);
        h
    }

    /// Shape of the face array for the component normal to `axis`.
    pub fn face_shape(&self, axis: usize) -> [usize; 3] {
        let mut s = self.shape3();
        if !self.is_periodic() {
            s[axis] += 1;
        }
        s
    }

    pub fn face_count(&self, axis: usize) -> usize {
        let s = self.face_shape(axis);
        s[0] * s[1] * s[2]
    }

    /// Coordinate of the cell center `i` along `axis`.
    pub fn cell_center(&self, axis: usize, i: usize) -> f64 {
        (i as f64 + 0.5) * self.spacing[axis]
    }

    /// Coordinate of face `i` along `axis` (face `i` is the lower face of cell `i`).
    pub fn face_coord(&self, axis: usize, i: usize) -> f64 {
        i as f64 * self.spacing[axis]
    }
}

/// Row-major strides for a padded shape (last axis fastest).
pub(crate) fn strides(shape: [usize; 3]) -> [usize; 3] {
    [shape[1] * shape[2], shape[2], 1]
}

pub(crate) fn total(shape: [usize; 3]) -> usize {
    shape[0] * shape[1] * shape[2]
}

/// Visit every 1-d line of `shape` along `axis`: `f(base_offset)`.
/// Entries of the line are `base + k * strides(shape)[axis]`.
pub(crate) fn for_each_line(shape: [usize; 3], axis: usize, mut f: impl FnMut(usize)) {
    let st = strides(shape);
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for ia in 0..shape[a] {
        let off_a = ia * st[a];
        for ib in 0..shape[b] {
            f(off_a + ib * st[b]);
        }
    }
}

/// Cell-centered scalar samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Grid) -> Self {
        ScalarField { grid: grid.clone(), values: vec![0.0; grid.cell_count()] }
    }

    pub fn constant(grid: &Grid, value: f64) -> Self {
        ScalarField { grid: grid.clone(), values: vec![value; grid.cell_count()] }
    }

    /// Sample `f` at cell centers.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let shape = grid.shape3();
        let dim = grid.dim();
        let mut values = Vec::with_capacity(grid.cell_count());
        let mut x = [0.0f64; 3];
        for i0 in 0..shape[0] {
            x[0] = grid.cell_center(0, i0);
            for i1 in 0..shape[1] {
                x[1] = grid.cell_center(1, i1);
                for i2 in 0..shape[2] {
                    if dim > 2 {
                        x[2] = grid.cell_center(2, i2);
                    }
                    values.push(f(&x[..dim]));
                }
            }
        }
        ScalarField { grid: grid.clone(), values }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cell_count() {
            return Err(Error::DimensionMismatch {
                expected: grid.cell_count(),
                got: values.len(),
                what: "scalar field values",
            });
        }
        Ok(ScalarField { grid: grid.clone(), values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn max(&self) -> f64 {
        reduce::max_value(&self.values)
    }

    pub fn min(&self) -> f64 {
        reduce::min_value(&self.values)
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if reduce::all_finite(&self.values) {
            Ok(())
        } else {
            Err(Error::NonFinite { context })
        }
    }
}

/// Face-centered vector components in MAC layout.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid,
    comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(grid: &Grid) -> Self {
        let comps = (0..grid.dim()).map(|a| vec![0.0; grid.face_count(a)]).collect();
        VectorField { grid: grid.clone(), comps }
    }

    /// Sample component functions at face centers, then pin no-slip walls to zero.
    pub fn from_fn(grid: &Grid, f: impl Fn(usize, &[f64]) -> f64) -> Self {
        let mut v = VectorField::zeros(grid);
        let dim = grid.dim();
        for axis in 0..dim {
            let shape = grid.face_shape(axis);
            let mut x = [0.0f64; 3];
            let mut idx = 0;
            for i0 in 0..shape[0] {
                x[0] = if axis == 0 { grid.face_coord(0, i0) } else { grid.cell_center(0, i0) };
                for i1 in 0..shape[1] {
                    x[1] = if axis == 1 { grid.face_coord(1, i1) } else { grid.cell_center(1, i1) };
                    for i2 in 0..shape[2] {
                        if dim > 2 {
                            x[2] = if axis == 2 {
                                grid.face_coord(2, i2)
                            } else {
                                grid.cell_center(2, i2)
                            };
                        }
                        v.comps[axis][idx] = f(axis, &x[..dim]);
                        idx += 1;
                    }
                }
            }
        }
        v.enforce_noslip();
        v
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.comps[axis]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.comps[axis]
    }

    /// Set boundary-normal entries to exactly zero in no-slip mode.
    pub fn enforce_noslip(&mut self) {
        zero_boundary_normal(&self.grid, &mut self.comps);
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().map(|c| reduce::max_abs(c)).fold(0.0, f64::max)
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        for c in &self.comps {
            if !reduce::all_finite(c) {
                return Err(Error::NonFinite { context });
            }
        }
        Ok(())
    }

    /// Squared l2 norm weighted by cell volume: sum over components and faces.
    pub fn l2_norm_sq(&self) -> f64 {
        let vol = self.grid.cell_volume();
        let mut acc = 0.0;
        for c in &self.comps {
            acc += reduce::pairwise_dot(c, c);
        }
        acc * vol
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_sq().sqrt()
    }
}

pub(crate) fn zero_boundary_normal(grid: &Grid, comps: &mut [Vec<f64>]) {
    if grid.is_periodic() {
        return;
    }
    for axis in 0..grid.dim() {
        let shape = grid.face_shape(axis);
        let st = strides(shape);
        let n = shape[axis];
        let comp = &mut comps[axis];
        for_each_line(shape, axis, |base| {
            comp[base] = 0.0;
            comp[base + (n - 1) * st[axis]] = 0.0;
        });
    }
}

/// Discrete integral: fixed-order sum of cell values times cell volume.
pub fn integrate(field: &ScalarField) -> f64 {
    reduce::pairwise_sum(field.values()) * field.grid().cell_volume()
}

/// Discrete L^p norm: `(sum |v|^p vol)^(1/p)`.
///
/// Fractional exponents require a nonnegative field; values in
/// `(-1e-10, 0)` are treated as roundoff and clamped to zero.
pub fn lp_norm(field: &ScalarField, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::Validation { key: "p".into(), constraint: format!("p >= 1, got {p}") });
    }
    let vol = field.grid().cell_volume();
    let integer_p = p.fract() == 0.0;
    if !integer_p {
        let min = reduce::min_value(field.values());
        if min <= -1e-10 {
            return Err(Error::NegativeBase { value: min, p });
        }
    }
    let sum = if p == 1.0 {
        reduce::pairwise_map_sum(field.values(), f64::abs)
    } else if p == 2.0 {
        reduce::pairwise_map_sum(field.values(), |v| v * v)
    } else if integer_p && p <= 64.0 {
        let k = p as i32;
        reduce::pairwise_map_sum(field.values(), |v| v.abs().powi(k))
    } else {
        reduce::pairwise_map_sum(field.values(), |v| if v <= 0.0 { 0.0 } else { v.powf(p) })
    };
    Ok((sum * vol).powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid_2d(n: usize, boundary: Boundary) -> Grid {
        make_grid(2, &[n, n], &[1.0, 1.0], boundary).unwrap()
    }

    #[test]
    fn make_grid_computes_spacing() {
        let g = make_grid(2, &[8, 8], &[1.0, 1.0], Boundary::Periodic).unwrap();
        assert_eq!(g.spacing(), &[0.125, 0.125]);
        let g = make_grid(3, &[16, 16, 16], &[2.0, 2.0, 2.0], Boundary::NoFluxNoSlip).unwrap();
        assert_eq!(g.spacing(), &[0.125, 0.125, 0.125]);
    }

    #[test]
    fn make_grid_rejects_bad_input() {
        assert!(matches!(
            make_grid(2, &[8, 8, 8], &[1.0, 1.0], Boundary::Periodic),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            make_grid(2, &[8, 2], &[1.0, 1.0], Boundary::Periodic),
            Err(Error::InvalidExtent { .. })
        ));
        assert!(matches!(
            make_grid(2, &[8, 8], &[1.0, -1.0], Boundary::Periodic),
            Err(Error::InvalidExtent { .. })
        ));
        assert!(make_grid(4, &[8, 8, 8, 8], &[1.0; 4], Boundary::Periodic).is_err());
    }

    #[test]
    fn integrate_constant_and_zero() {
        let g = unit_grid_2d(8, Boundary::Periodic);
        assert_eq!(integrate(&ScalarField::constant(&g, 3.0)), 3.0);
        assert_eq!(integrate(&ScalarField::zeros(&g)), 0.0);
    }

    fn gaussian(x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|&xi| (xi - 0.5) * (xi - 0.5)).sum();
        5.0 * (-r2 / (2.0 * 0.1 * 0.1)).exp()
    }

    #[test]
    fn integrate_gaussian_matches_fine_quadrature() {
        // Oracle: 1024^2 composite midpoint quadrature of the same analytic blob.
        let fine = unit_grid_2d(1024, Boundary::NoFluxNoSlip);
        let oracle = integrate(&ScalarField::from_fn(&fine, gaussian));
        let g = unit_grid_2d(64, Boundary::NoFluxNoSlip);
        let got = integrate(&ScalarField::from_fn(&g, gaussian));
        assert!(
            (got - oracle).abs() <= 1e-6 * oracle.abs(),
            "got {got}, oracle {oracle}"
        );
    }

    #[test]
    fn integrate_is_linear() {
        let g = unit_grid_2d(32, Boundary::Periodic);
        let f = ScalarField::from_fn(&g, |x| (x[0] * 7.3).sin() + x[1]);
        let h = ScalarField::from_fn(&g, |x| (x[1] * 3.1).cos() - 2.0 * x[0]);
        let (a, b) = (2.5, -1.25);
        let combo = ScalarField::from_values(
            &g,
            f.values().iter().zip(h.values()).map(|(&x, &y)| a * x + b * y).collect(),
        )
        .unwrap();
        let lhs = integrate(&combo);
        let rhs = a * integrate(&f) + b * integrate(&h);
        let scale = lhs.abs().max(rhs.abs()).max(1e-300);
        assert!((lhs - rhs).abs() <= 1e-13 * scale);
    }

    #[test]
    fn integrate_is_repeatable_bitwise() {
        let g = unit_grid_2d(37, Boundary::Periodic);
        let f = ScalarField::from_fn(&g, |x| (x[0] * 13.7).sin() * (x[1] * 5.1).cos());
        let a = integrate(&f);
        let b = integrate(&f);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn lp_norm_constant() {
        let g = unit_grid_2d(8, Boundary::Periodic);
        let f = ScalarField::constant(&g, 2.0);
        assert!((lp_norm(&f, 2.0).unwrap() - 2.0).abs() < 1e-14);
    }

    /// Extended-precision reference: Neumaier compensated summation, a code
    /// path independent of the pairwise reduction.
    fn lp_norm_oracle(f: &ScalarField, p: f64) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for &v in f.values() {
            let term = if v <= 0.0 { 0.0 } else { v.powf(p) };
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
        }
        ((sum + comp) * f.grid().cell_volume()).powf(1.0 / p)
    }

    #[test]
    fn lp_norm_matches_compensated_oracle() {
        let g = unit_grid_2d(64, Boundary::Periodic);
        // Deterministic quasi-random nonnegative field.
        let f = ScalarField::from_fn(&g, |x| {
            0.5 + 0.49 * ((x[0] * 12.9898 + x[1] * 78.233).sin() * 43758.5453).fract().abs()
        });
        let p = 1.25;
        let got = lp_norm(&f, p).unwrap();
        let oracle = lp_norm_oracle(&f, p);
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs());
    }

    #[test]
    fn lp_norm_clamps_and_rejects_negatives() {
        let g = unit_grid_2d(8, Boundary::Periodic);
        let mut f = ScalarField::constant(&g, 1.0);
        f.values_mut()[3] = -1e-12; // roundoff-scale, clamped
        assert!(lp_norm(&f, 1.5).is_ok());
        f.values_mut()[3] = -1e-6;
        assert!(matches!(lp_norm(&f, 1.5), Err(Error::NegativeBase { .. })));
        // Integer p takes |v| and does not error.
        assert!(lp_norm(&f, 2.0).is_ok());
    }

    #[test]
    fn lp_norm_is_monotone_in_magnitude() {
        let g = unit_grid_2d(16, Boundary::Periodic);
        let f = ScalarField::from_fn(&g, |x| (x[0] * 9.1).sin().abs());
        let gfield = ScalarField::from_values(
            &g,
            f.values().iter().map(|&v| v + 0.25).collect(),
        )
        .unwrap();
        for &p in &[1.0, 2.0, 2.5, 16.0 / 3.0] {
            let nf = lp_norm(&f, p).unwrap();
            let ng = lp_norm(&gfield, p).unwrap();
            assert!(nf <= ng + 1e-13, "p = {p}: {nf} > {ng}");
        }
    }

    #[test]
    fn noslip_vector_has_zero_boundary_normals() {
        let g = unit_grid_2d(8, Boundary::NoFluxNoSlip);
        let v = VectorField::from_fn(&g, |_, x| 1.0 + x[0] + x[1]);
        for axis in 0..2 {
            let shape = g.face_shape(axis);
            let st = strides(shape);
            let n = shape[axis];
            for_each_line(shape, axis, |base| {
                assert_eq!(v.component(axis)[base], 0.0);
                assert_eq!(v.component(axis)[base + (n - 1) * st[axis]], 0.0);
            });
        }
    }

    #[test]
    fn face_counts_follow_layout() {
        let g = unit_grid_2d(8, Boundary::NoFluxNoSlip);
        assert_eq!(g.face_count(0), 9 * 8);
        assert_eq!(g.face_count(1), 8 * 9);
        let gp = unit_grid_2d(8, Boundary::Periodic);
        assert_eq!(gp.face_count(0), 64);
        assert_eq!(gp.face_count(1), 64);
    }
}
