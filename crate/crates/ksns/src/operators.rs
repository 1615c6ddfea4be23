//! Discrete differential operators on the MAC grid.
//!
//! All transport is in conservative flux form: a `FaceFlux` is assembled on
//! faces and its `divergence` is taken per cell, so mass bookkeeping
//! telescopes exactly and zero-flux walls are honored by construction.

use crate::error::{Error, Result};
use crate::mesh::{strides, Grid, ScalarField, VectorField};
use crate::reduce;

/// Face-centered flux components, same layout as `VectorField`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceFlux {
    grid: Grid,
    comps: Vec<Vec<f64>>,
}

impl FaceFlux {
    pub fn zeros(grid: &Grid) -> Self {
        let comps = (0..grid.dim()).map(|a| vec![0.0; grid.face_count(a)]).collect();
        FaceFlux { grid: grid.clone(), comps }
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

    /// Pin boundary-normal entries to zero in no-slip mode.
    pub fn enforce_zero_boundary(&mut self) {
        crate::mesh::zero_boundary_normal(&self.grid, &mut self.comps);
    }
}

/// Visit paired lines of two shapes that differ only along `axis`.
fn for_each_line_pair(
    shape_a: [usize; 3],
    shape_b: [usize; 3],
    axis: usize,
    mut f: impl FnMut(usize, usize),
) {
    let st_a = strides(shape_a);
    let st_b = strides(shape_b);
    let (p, q) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    debug_assert_eq!(shape_a[p], shape_b[p]);
    debug_assert_eq!(shape_a[q], shape_b[q]);
    for ip in 0..shape_a[p] {
        let off_p = (ip * st_a[p], ip * st_b[p]);
        for iq in 0..shape_a[q] {
            f(off_p.0 + iq * st_a[q], off_p.1 + iq * st_b[q]);
        }
    }
}

/// Second-order face difference of a cell-centered field.
///
/// Boundary faces are zero in no-slip mode (homogeneous Neumann); periodic
/// mode wraps, so a non-periodic profile aliases at the wrap face.
pub fn gradient(f: &ScalarField) -> FaceFlux {
    let mut out = FaceFlux::zeros(f.grid());
    gradient_into(f, &mut out);
    out
}

pub fn gradient_into(f: &ScalarField, out: &mut FaceFlux) {
    let grid = f.grid().clone();
    let cs = grid.shape3();
    let cst = strides(cs);
    let periodic = grid.is_periodic();
    let vals = f.values();
    for axis in 0..grid.dim() {
        let fs = grid.face_shape(axis);
        let fst = strides(fs);
        let n = cs[axis];
        let inv_h = 1.0 / grid.spacing()[axis];
        let comp = out.component_mut(axis);
        if periodic {
            for_each_line_pair(fs, cs, axis, |fb, cb| {
                comp[fb] = (vals[cb] - vals[cb + (n - 1) * cst[axis]]) * inv_h;
                for k in 1..n {
                    comp[fb + k * fst[axis]] =
                        (vals[cb + k * cst[axis]] - vals[cb + (k - 1) * cst[axis]]) * inv_h;
                }
            });
        } else {
            for_each_line_pair(fs, cs, axis, |fb, cb| {
                comp[fb] = 0.0;
                comp[fb + n * fst[axis]] = 0.0;
                for k in 1..n {
                    comp[fb + k * fst[axis]] =
                        (vals[cb + k * cst[axis]] - vals[cb + (k - 1) * cst[axis]]) * inv_h;
                }
            });
        }
    }
}

/// Per-cell sum of face differences: the discrete divergence.
pub fn divergence(flux: &FaceFlux) -> ScalarField {
    let mut out = ScalarField::zeros(flux.grid());
    divergence_into(flux, &mut out);
    out
}

pub fn divergence_into(flux: &FaceFlux, out: &mut ScalarField) {
    let grid = flux.grid().clone();
    let comps: Vec<&[f64]> = (0..grid.dim()).map(|a| flux.component(a)).collect();
    divergence_core(&grid, &comps, out.values_mut());
}

/// Divergence of a velocity field (same layout as a flux).
pub fn velocity_divergence(u: &VectorField) -> ScalarField {
    let grid = u.grid().clone();
    let comps: Vec<&[f64]> = (0..grid.dim()).map(|a| u.component(a)).collect();
    let mut out = ScalarField::zeros(&grid);
    divergence_core(&grid, &comps, out.values_mut());
    out
}

pub(crate) fn divergence_core(grid: &Grid, comps: &[&[f64]], vals: &mut [f64]) {
    let cs = grid.shape3();
    let cst = strides(cs);
    let periodic = grid.is_periodic();
    vals.fill(0.0);
    for axis in 0..grid.dim() {
        let fs = grid.face_shape(axis);
        let fst = strides(fs);
        let n = cs[axis];
        let inv_h = 1.0 / grid.spacing()[axis];
        let comp = comps[axis];
        if periodic {
            for_each_line_pair(fs, cs, axis, |fb, cb| {
                for k in 0..n - 1 {
                    vals[cb + k * cst[axis]] +=
                        (comp[fb + (k + 1) * fst[axis]] - comp[fb + k * fst[axis]]) * inv_h;
                }
                vals[cb + (n - 1) * cst[axis]] +=
                    (comp[fb] - comp[fb + (n - 1) * fst[axis]]) * inv_h;
            });
        } else {
            for_each_line_pair(fs, cs, axis, |fb, cb| {
                for k in 0..n {
                    vals[cb + k * cst[axis]] +=
                        (comp[fb + (k + 1) * fst[axis]] - comp[fb + k * fst[axis]]) * inv_h;
                }
            });
        }
    }
}

/// Compact-stencil Laplacian, defined as `divergence(gradient(f))` so the
/// operator-composition identity holds bitwise.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    divergence(&gradient(f))
}

pub(crate) fn pm_mobility(m: f64, nbar_plus_eps: f64) -> f64 {
    let e = m - 1.0;
    if e == 1.0 {
        m * nbar_plus_eps
    } else if e == 2.0 {
        m * nbar_plus_eps * nbar_plus_eps
    } else if e == 3.0 {
        m * nbar_plus_eps * nbar_plus_eps * nbar_plus_eps
    } else {
        m * nbar_plus_eps.powf(e)
    }
}

/// Conservative flux of the regularized porous-medium term:
/// `D_face * (n_r - n_l) / h` with `D_face = m * (navg + eps)^(m-1)`,
/// the arithmetic face average keeping `D_face >= m * eps^(m-1) > 0`.
pub fn porous_medium_flux(n: &ScalarField, eps: f64, m: f64) -> Result<FaceFlux> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Validation { key: "eps".into(), constraint: format!("eps in (0,1], got {eps}") });
    }
    if !(m > 1.0) {
        return Err(Error::Validation { key: "m".into(), constraint: format!("m > 1, got {m}") });
    }
    let min = n.min();
    if min < -1e-10 {
        return Err(Error::NonPhysicalDensity { min });
    }
    let grid = n.grid().clone();
    let cs = grid.shape3();
    let cst = strides(cs);
    let periodic = grid.is_periodic();
    let vals = n.values();
    let mut out = FaceFlux::zeros(&grid);
    let clamp = |v: f64| if v < 0.0 { 0.0 } else { v };
    for axis in 0..grid.dim() {
        let fs = grid.face_shape(axis);
        let fst = strides(fs);
        let ncells = cs[axis];
        let inv_h = 1.0 / grid.spacing()[axis];
        let comp = out.component_mut(axis);
        let face_flux = |left: f64, right: f64| {
            let l = clamp(left);
            let r = clamp(right);
            pm_mobility(m, 0.5 * (l + r) + eps) * (r - l) * inv_h
        };
        if periodic {
            for_each_line_pair(fs, cs, axis, |fb, cb| {
                comp[fb] = face_flux(vals[cb + (ncells - 1) * cst[axis]], vals[cb]);
                for k in 1..ncells {
                    comp[fb + k * fst[axis]] =
                        face_flux(vals[cb + (k - 1) * cst[axis]], vals[cb + k * cst[axis]]);
                }
            });
        } else {
            for_each_line_pair(fs, cs, axis, |fb, cb| {
                for k in 1..ncells {
                    comp[fb + k * fst[axis]] =
                        face_flux(vals[cb + (k - 1) * cst[axis]], vals[cb + k * cst[axis]]);
                }
            });
        }
    }
    Ok(out)
}

/// Chemotactic flux `n * grad(c)` with donor-cell upwinding of `n` by the
/// sign of the face gradient.
pub fn chemotaxis_flux(n: &ScalarField, c: &ScalarField) -> FaceFlux {
    chemotaxis_flux_with_grad(n, &gradient(c))
}

pub(crate) fn chemotaxis_flux_with_grad(n: &ScalarField, grad_c: &FaceFlux) -> FaceFlux {
    let grid = n.grid().clone();
    let cs = grid.shape3();
    let cst = strides(cs);
    let periodic = grid.is_periodic();
    let vals = n.values();
    let clamp = |v: f64| if v < 0.0 { 0.0 } else { v };
    let mut out = FaceFlux::zeros(&grid);
    for axis in 0..grid.dim() {
        let fs = grid.face_shape(axis);
        let fst = strides(fs);
        let ncells = cs[axis];
        let g = grad_c.component(axis);
        let comp = out.component_mut(axis);
        let upwind = |gface: f64, left: f64, right: f64| {
            let donor = if gface > 0.0 { clamp(left) } else { clamp(right) };
            donor * gface
        };
        if periodic {
            for_each_line_pair(fs, cs, axis, |fb, cb| {
                comp[fb] = upwind(g[fb], vals[cb + (ncells - 1) * cst[axis]], vals[cb]);
                for k in 1..ncells {
                    comp[fb + k * fst[axis]] = upwind(
                        g[fb + k * fst[axis]],
                        vals[cb + (k - 1) * cst[axis]],
                        vals[cb + k * cst[axis]],
                    );
                }
            });
        } else {
            for_each_line_pair(fs, cs, axis, |fb, cb| {
                for k in 1..ncells {
                    comp[fb + k * fst[axis]] = upwind(
                        g[fb + k * fst[axis]],
                        vals[cb + (k - 1) * cst[axis]],
                        vals[cb + k * cst[axis]],
                    );
                }
            });
        }
    }
    out
}

/// Max-norm of the discrete divergence of a velocity field.
pub fn divergence_max(u: &VectorField) -> f64 {
    reduce::max_abs(velocity_divergence(u).values())
}

/// Scale used for divergence-free checks: the velocity magnitude with a
/// unity floor, so the tolerance tracks the field size while staying an
/// absolute bound for order-one fields.
pub fn divergence_scale(u: &VectorField) -> f64 {
    1.0f64.max(u.max_abs())
}

pub(crate) fn check_divergence_free(u: &VectorField, tol: f64) -> Result<()> {
    let max_div = divergence_max(u);
    let bound = tol * divergence_scale(u);
    if max_div > bound {
        return Err(Error::NotDivergenceFree { max_div, tol: bound });
    }
    Ok(())
}

/// Conservative first-order upwind divergence of the advective flux `u f`.
///
/// `u` must be discretely divergence-free (checked at 1e-8, scaled); the
/// result is the tendency `div(u f)`.
pub fn advect_scalar(f: &ScalarField, u: &VectorField) -> Result<ScalarField> {
    check_divergence_free(u, 1e-8)?;
    Ok(advect_scalar_unchecked(f, u))
}

/// Advection tendency without the divergence-free precondition check, for
/// callers that validated `u` once for several transports.
pub(crate) fn advect_scalar_unchecked(f: &ScalarField, u: &VectorField) -> ScalarField {
    let grid = f.grid().clone();
    let cs = grid.shape3();
    let cst = strides(cs);
    let periodic = grid.is_periodic();
    let vals = f.values();
    let mut flux = FaceFlux::zeros(&grid);
    for axis in 0..grid.dim() {
        let fs = grid.face_shape(axis);
        let fst = strides(fs);
        let ncells = cs[axis];
        let vel = u.component(axis);
        let comp = flux.component_mut(axis);
        let upwind = |uface: f64, left: f64, right: f64| {
            if uface > 0.0 {
                uface * left
            } else {
                uface * right
            }
        };
        if periodic {
            for_each_line_pair(fs, cs, axis, |fb, cb| {
                comp[fb] = upwind(vel[fb], vals[cb + (ncells - 1) * cst[axis]], vals[cb]);
                for k in 1..ncells {
                    comp[fb + k * fst[axis]] = upwind(
                        vel[fb + k * fst[axis]],
                        vals[cb + (k - 1) * cst[axis]],
                        vals[cb + k * cst[axis]],
                    );
                }
            });
        } else {
            // Wall faces carry u = 0, so their flux vanishes.
            for_each_line_pair(fs, cs, axis, |fb, cb| {
                for k in 1..ncells {
                    comp[fb + k * fst[axis]] = upwind(
                        vel[fb + k * fst[axis]],
                        vals[cb + (k - 1) * cst[axis]],
                        vals[cb + k * cst[axis]],
                    );
                }
            });
        }
    }
    divergence(&flux)
}

/// First-order upwind evaluation of `(w . grad) u` per MAC component.
///
/// Tangential walls use odd reflection (the no-slip wall value is zero);
/// normal-wall entries of the output are zero.
pub fn advect_velocity(u: &VectorField, w: &VectorField) -> VectorField {
    let grid = u.grid().clone();
    let dim = grid.dim();
    let h = grid.spacing3();
    let periodic = grid.is_periodic();
    let mut out = VectorField::zeros(&grid);
    let cells = grid.shape3();

    for comp_i in 0..dim {
        let fs = grid.face_shape(comp_i);
        let fst = strides(fs);
        let ui = u.component(comp_i);
        let tend = out.component_mut(comp_i);

        let mut idx3 = [0usize; 3];
        for i0 in 0..fs[0] {
            idx3[0] = i0;
            for i1 in 0..fs[1] {
                idx3[1] = i1;
                let row = i0 * fst[0] + i1 * fst[1];
                for i2 in 0..fs[2] {
                    idx3[2] = i2;
                    let lin = row + i2;
                    if !periodic && (idx3[comp_i] == 0 || idx3[comp_i] == fs[comp_i] - 1) {
                        tend[lin] = 0.0;
                        continue;
                    }
                    let here = ui[lin];
                    let mut acc = 0.0;
                    for axis_j in 0..dim {
                        let wj = if axis_j == comp_i {
                            w.component(axis_j)[lin]
                        } else {
                            w_average(w, &cells, comp_i, axis_j, idx3, periodic, &grid)
                        };
                        if wj == 0.0 {
                            continue;
                        }
                        let n = fs[axis_j];
                        let s = fst[axis_j];
                        let k = idx3[axis_j];
                        let diff = if wj > 0.0 {
                            let prev = if k > 0 {
                                ui[lin - s]
                            } else if periodic {
                                ui[lin + (n - 1) * s]
                            } else {
                                // k == 0 tangential wall (normal walls skipped above).
                                -here
                            };
                            (here - prev) / h[axis_j]
                        } else {
                            let next = if k + 1 < n {
                                ui[lin + s]
                            } else if periodic {
                                ui[lin - (n - 1) * s]
                            } else {
                                -here
                            };
                            (next - here) / h[axis_j]
                        };
                        acc += wj * diff;
                    }
                    tend[lin] = acc;
                }
            }
        }
    }
    out
}

/// Four-point average of `w_j` onto the location of a `comp_i` face.
#[inline]
fn w_average(
    w: &VectorField,
    cells: &[usize; 3],
    comp_i: usize,
    axis_j: usize,
    idx3: [usize; 3],
    periodic: bool,
    grid: &Grid,
) -> f64 {
    let ws = grid.face_shape(axis_j);
    let wst = strides(ws);
    let n_i = cells[comp_i];
    let n_j = cells[axis_j];
    let fi = idx3[comp_i];
    let (ci_lo, ci_hi) = if periodic { ((fi + n_i - 1) % n_i, fi % n_i) } else { (fi - 1, fi) };
    let cj = idx3[axis_j];
    let (fj_lo, fj_hi) = if periodic { (cj, (cj + 1) % n_j) } else { (cj, cj + 1) };
    let comp = w.component(axis_j);
    let mut rest = 0usize;
    for a in 0..3 {
        if a != comp_i && a != axis_j {
            rest += idx3[a] * wst[a];
        }
    }
    let at = |ci: usize, fj: usize| comp[rest + ci * wst[comp_i] + fj * wst[axis_j]];
    0.25 * (at(ci_lo, fj_lo) + at(ci_lo, fj_hi) + at(ci_hi, fj_lo) + at(ci_hi, fj_hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{for_each_line, integrate, make_grid, Boundary};
    use std::f64::consts::PI;

    fn grid2(n: usize, boundary: Boundary) -> Grid {
        make_grid(2, &[n, n], &[1.0, 1.0], boundary).unwrap()
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        for b in [Boundary::Periodic, Boundary::NoFluxNoSlip] {
            let g = grid2(8, b);
            let f = ScalarField::constant(&g, 4.2);
            let q = gradient(&f);
            for a in 0..2 {
                assert!(q.component(a).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn gradient_of_ramp_wraps_on_periodic() {
        let g = grid2(8, Boundary::Periodic);
        let f = ScalarField::from_fn(&g, |x| x[0]);
        let q = gradient(&f);
        let comp = q.component(0);
        let fs = g.face_shape(0);
        let st = strides(fs);
        // Interior faces see slope 1; the wrap face sees the full drop.
        for_each_line(fs, 0, |base| {
            assert!((comp[base] - (0.0625 - 0.9375) / 0.125).abs() < 1e-12);
            for k in 1..8 {
                assert!((comp[base + k * st[0]] - 1.0).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn gradient_refinement_rate_is_second_order() {
        let mut errs = Vec::new();
        for &n in &[32usize, 64, 128] {
            let g = grid2(n, Boundary::Periodic);
            let f = ScalarField::from_fn(&g, |x| (2.0 * PI * x[0]).sin());
            let q = gradient(&f);
            let comp = q.component(0);
            let fs = g.face_shape(0);
            let st = strides(fs);
            let mut max_err = 0.0f64;
            for_each_line(fs, 0, |base| {
                for k in 0..n {
                    let x = g.face_coord(0, k);
                    let exact = 2.0 * PI * (2.0 * PI * x).cos();
                    max_err = max_err.max((comp[base + k * st[0]] - exact).abs());
                }
            });
            errs.push(max_err);
        }
        let r1 = (errs[0] / errs[1]).log2();
        let r2 = (errs[1] / errs[2]).log2();
        assert!(r1 >= 1.9 && r2 >= 1.9, "rates {r1}, {r2}");
    }

    #[test]
    fn divergence_of_zero_flux_is_zero() {
        let g = grid2(8, Boundary::NoFluxNoSlip);
        let div = divergence(&FaceFlux::zeros(&g));
        assert!(div.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_equals_divergence_of_gradient_bitwise() {
        for b in [Boundary::Periodic, Boundary::NoFluxNoSlip] {
            let g = grid2(16, b);
            let f = ScalarField::from_fn(&g, |x| (3.0 * x[0]).sin() + (2.0 * x[1]).cos());
            let a = laplacian(&f);
            let b2 = divergence(&gradient(&f));
            for (x, y) in a.values().iter().zip(b2.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    fn quasi_random_flux(g: &Grid, seed: u64) -> FaceFlux {
        let mut q = FaceFlux::zeros(g);
        let mut s = seed;
        for a in 0..g.dim() {
            for v in q.component_mut(a).iter_mut() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *v = ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            }
        }
        q.enforce_zero_boundary();
        q
    }

    #[test]
    fn divergence_integrates_to_zero() {
        for b in [Boundary::Periodic, Boundary::NoFluxNoSlip] {
            let g = grid2(16, b);
            let q = quasi_random_flux(&g, 17);
            let div = divergence(&q);
            assert!(integrate(&div).abs() <= 1e-13, "mode {b:?}");
        }
    }

    #[test]
    fn integration_by_parts_holds() {
        for b in [Boundary::Periodic, Boundary::NoFluxNoSlip] {
            let g = grid2(12, b);
            let f = ScalarField::from_fn(&g, |x| (5.0 * x[0]).sin() * (3.0 * x[1]).cos() + x[0]);
            let q = quasi_random_flux(&g, 99);
            let vol = g.cell_volume();
            let lhs: f64 = f
                .values()
                .iter()
                .zip(divergence(&q).values())
                .map(|(&a, &b)| a * b)
                .sum::<f64>()
                * vol;
            let gf = gradient(&f);
            let mut rhs = 0.0;
            for a in 0..2 {
                rhs += gf
                    .component(a)
                    .iter()
                    .zip(q.component(a))
                    .map(|(&x, &y)| x * y)
                    .sum::<f64>();
            }
            rhs *= -vol;
            let scale = lhs.abs().max(rhs.abs()).max(1e-30);
            assert!((lhs - rhs).abs() <= 1e-12 * scale, "mode {b:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn laplacian_refinement_on_sine_product() {
        let mut errs = Vec::new();
        for &n in &[32usize, 64, 128] {
            let g = grid2(n, Boundary::Periodic);
            let f = ScalarField::from_fn(&g, |x| (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).sin());
            let lap = laplacian(&f);
            let mut max_err = 0.0f64;
            for (l, v) in lap.values().iter().zip(f.values()) {
                max_err = max_err.max((l - (-8.0 * PI * PI * v)).abs());
            }
            errs.push(max_err);
        }
        let rate = (errs[0] / errs[2]).log2() / 2.0;
        assert!(rate >= 1.9, "rate {rate}");
    }

    #[test]
    fn laplacian_is_symmetric() {
        for b in [Boundary::Periodic, Boundary::NoFluxNoSlip] {
            let g = grid2(10, b);
            let f = ScalarField::from_fn(&g, |x| (4.0 * x[0]).sin() + x[1] * x[1]);
            let h = ScalarField::from_fn(&g, |x| (x[0] * 2.0 - x[1]).cos());
            let dot = |a: &ScalarField, b: &ScalarField| -> f64 {
                a.values().iter().zip(b.values()).map(|(&x, &y)| x * y).sum()
            };
            let lhs = dot(&f, &laplacian(&h));
            let rhs = dot(&h, &laplacian(&f));
            let scale = lhs.abs().max(rhs.abs()).max(1e-30);
            assert!((lhs - rhs).abs() <= 1e-12 * scale, "mode {b:?}");
        }
    }

    #[test]
    fn neumann_laplacian_sees_zero_wall_flux() {
        let g = grid2(16, Boundary::NoFluxNoSlip);
        let f = ScalarField::from_fn(&g, |x| (PI * x[0]).cos());
        let q = gradient(&f);
        let fs = g.face_shape(0);
        let st = strides(fs);
        for_each_line(fs, 0, |base| {
            assert_eq!(q.component(0)[base], 0.0);
            assert_eq!(q.component(0)[base + 16 * st[0]], 0.0);
        });
    }

    #[test]
    fn porous_medium_flux_constant_field_is_zero() {
        let g = grid2(8, Boundary::NoFluxNoSlip);
        let n = ScalarField::constant(&g, 1.7);
        let q = porous_medium_flux(&n, 0.01, 3.0).unwrap();
        for a in 0..2 {
            assert!(q.component(a).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn porous_medium_mobility_at_vacuum() {
        // n = 0, eps = 0.01, m = 3 gives D = 3e-4 on every face.
        assert!((pm_mobility(3.0, 0.01) - 3e-4).abs() < 1e-19);
    }

    #[test]
    fn porous_medium_flux_rejects_negative_density() {
        let g = grid2(8, Boundary::NoFluxNoSlip);
        let mut n = ScalarField::constant(&g, 1.0);
        n.values_mut()[0] = -1e-6;
        assert!(matches!(
            porous_medium_flux(&n, 0.01, 3.0),
            Err(Error::NonPhysicalDensity { .. })
        ));
    }

    #[test]
    fn porous_medium_flux_m2_matches_exact_gradient() {
        // m = 2: flux should converge to grad((n+eps)^2) at second order.
        let eps = 0.01;
        let mut errs = Vec::new();
        for &nc in &[32usize, 64, 128] {
            let g = grid2(nc, Boundary::Periodic);
            let n = ScalarField::from_fn(&g, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).sin());
            let q = porous_medium_flux(&n, eps, 2.0).unwrap();
            let comp = q.component(0);
            let fs = g.face_shape(0);
            let st = strides(fs);
            let mut max_err = 0.0f64;
            for_each_line(fs, 0, |base| {
                for k in 0..nc {
                    let x = g.face_coord(0, k);
                    let nv = 1.0 + 0.5 * (2.0 * PI * x).sin();
                    let exact = 2.0 * (nv + eps) * 0.5 * 2.0 * PI * (2.0 * PI * x).cos();
                    max_err = max_err.max((comp[base + k * st[0]] - exact).abs());
                }
            });
            errs.push(max_err);
        }
        let rate = (errs[0] / errs[2]).log2() / 2.0;
        assert!(rate >= 1.9, "rate {rate}, errs {errs:?}");
    }

    #[test]
    fn chemotaxis_flux_zero_for_constant_signal() {
        let g = grid2(8, Boundary::NoFluxNoSlip);
        let n = ScalarField::from_fn(&g, |x| x[0] + x[1]);
        let c = ScalarField::constant(&g, 2.0);
        let q = chemotaxis_flux(&n, &c);
        for a in 0..2 {
            assert!(q.component(a).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn chemotaxis_flux_reduces_to_gradient_for_unit_density() {
        let g = grid2(16, Boundary::NoFluxNoSlip);
        let n = ScalarField::constant(&g, 1.0);
        let c = ScalarField::from_fn(&g, |x| (x[0] - 0.3) * (x[1] + 0.2));
        let q = chemotaxis_flux(&n, &c);
        let gc = gradient(&c);
        for a in 0..2 {
            for (x, y) in q.component(a).iter().zip(gc.component(a)) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn chemotaxis_flux_donor_cell_matches_enumeration() {
        // 1-d profile n = x, c = x: gradient is +1, donor is the left cell.
        let g = grid2(8, Boundary::NoFluxNoSlip);
        let n = ScalarField::from_fn(&g, |x| x[0]);
        let c = ScalarField::from_fn(&g, |x| x[0]);
        let q = chemotaxis_flux(&n, &c);
        let comp = q.component(0);
        let fs = g.face_shape(0);
        let st = strides(fs);
        for_each_line(fs, 0, |base| {
            for k in 1..8 {
                let donor = g.cell_center(0, k - 1);
                assert!((comp[base + k * st[0]] - donor).abs() < 1e-14, "face {k}");
            }
        });
    }

    /// Discretely solenoidal field from a node-based stream function.
    fn solenoidal(g: &Grid, psi: impl Fn(f64, f64) -> f64) -> VectorField {
        assert!(g.is_periodic());
        let n = g.cells()[0];
        let h = g.spacing()[0];
        let mut u = VectorField::zeros(g);
        let node = |i: usize, j: usize| psi(i as f64 * h, j as f64 * h);
        // u_x at x-face (i, j+1/2) = (psi(i, j+1) - psi(i, j)) / h
        for i in 0..n {
            for j in 0..n {
                u.component_mut(0)[i * n + j] = (node(i, j + 1) - node(i, j)) / h;
                u.component_mut(1)[i * n + j] = -(node(i + 1, j) - node(i, j)) / h;
            }
        }
        u
    }

    #[test]
    fn advect_scalar_zero_velocity_gives_zero() {
        let g = grid2(8, Boundary::NoFluxNoSlip);
        let f = ScalarField::from_fn(&g, |x| x[0] * x[1]);
        let u = VectorField::zeros(&g);
        let t = advect_scalar(&f, &u).unwrap();
        assert!(t.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn advect_scalar_constant_field_is_consistent() {
        let g = grid2(16, Boundary::Periodic);
        let u = solenoidal(&g, |x, y| (2.0 * PI * x).sin() * (2.0 * PI * y).cos());
        let f = ScalarField::constant(&g, 3.0);
        let t = advect_scalar(&f, &u).unwrap();
        assert!(reduce::max_abs(t.values()) <= 1e-12);
    }

    #[test]
    fn advect_scalar_rejects_compressible_velocity() {
        let g = grid2(8, Boundary::Periodic);
        let u = VectorField::from_fn(&g, |axis, x| if axis == 0 { x[0] } else { 0.0 });
        let f = ScalarField::constant(&g, 1.0);
        assert!(matches!(advect_scalar(&f, &u), Err(Error::NotDivergenceFree { .. })));
    }

    #[test]
    fn rigid_translation_conserves_mass_and_monotonicity() {
        // One full revolution of a blob under uniform velocity.
        let n = 32;
        let g = grid2(n, Boundary::Periodic);
        let mut f = ScalarField::from_fn(&g, |x| {
            let r2 = (x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2);
            (-r2 / 0.02).exp()
        });
        let mut u = VectorField::zeros(&g);
        u.component_mut(0).fill(1.0);
        let mass0 = integrate(&f);
        let max0 = f.max();
        let min0 = f.min();
        let dt = 0.4 / (n as f64); // CFL 0.4
        let steps = (1.0 / dt).round() as usize;
        for _ in 0..steps {
            let tend = advect_scalar(&f, &u).unwrap();
            for (v, t) in f.values_mut().iter_mut().zip(tend.values()) {
                *v -= dt * t;
            }
        }
        let mass1 = integrate(&f);
        assert!((mass1 - mass0).abs() <= 1e-13 * mass0.abs());
        assert!(f.max() <= max0 + 1e-14);
        assert!(f.min() >= min0 - 1e-14);
    }

    #[test]
    fn upwind_never_creates_new_extrema() {
        let g = grid2(24, Boundary::Periodic);
        let u = solenoidal(&g, |x, y| 0.3 * (2.0 * PI * x).cos() * (4.0 * PI * y).sin());
        let mut f = ScalarField::from_fn(&g, |x| {
            0.5 + 0.5 * ((6.0 * x[0]).sin() * (5.0 * x[1]).cos())
        });
        let umax = u.max_abs();
        let dt = 0.4 * g.min_spacing() / (2.0 * umax);
        let (max0, min0) = (f.max(), f.min());
        for _ in 0..50 {
            let tend = advect_scalar(&f, &u).unwrap();
            for (v, t) in f.values_mut().iter_mut().zip(tend.values()) {
                *v -= dt * t;
            }
            assert!(f.max() <= max0 + 1e-13);
            assert!(f.min() >= min0 - 1e-13);
        }
    }

    #[test]
    fn advect_velocity_zero_w_gives_zero() {
        let g = grid2(8, Boundary::NoFluxNoSlip);
        let u = VectorField::from_fn(&g, |axis, x| if axis == 0 { x[1] } else { x[0] });
        let w = VectorField::zeros(&g);
        let t = advect_velocity(&u, &w);
        for a in 0..2 {
            assert!(t.component(a).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn advect_velocity_uniform_u_gives_zero() {
        let g = grid2(8, Boundary::Periodic);
        let mut u = VectorField::zeros(&g);
        u.component_mut(0).fill(0.7);
        u.component_mut(1).fill(-0.3);
        let t = advect_velocity(&u, &u);
        for a in 0..2 {
            assert!(reduce::max_abs(t.component(a)) <= 1e-12);
        }
    }

    #[test]
    fn advect_velocity_taylor_green_first_order() {
        let k = 2.0 * PI;
        let mut errs = Vec::new();
        for &nc in &[32usize, 64, 128] {
            let g = grid2(nc, Boundary::Periodic);
            let u = VectorField::from_fn(&g, |axis, x| {
                if axis == 0 {
                    (k * x[0]).sin() * (k * x[1]).cos()
                } else {
                    -(k * x[0]).cos() * (k * x[1]).sin()
                }
            });
            let t = advect_velocity(&u, &u);
            // (u . grad)u = (k/2) (sin 2kx, sin 2ky)
            let mut err = 0.0f64;
            let mut cnt = 0usize;
            let fs = g.face_shape(0);
            let st = strides(fs);
            for_each_line(fs, 0, |base| {
                for kk in 0..nc {
                    let x = g.face_coord(0, kk);
                    let exact = 0.5 * k * (2.0 * k * x).sin();
                    let d = t.component(0)[base + kk * st[0]] - exact;
                    err += d * d;
                    cnt += 1;
                }
            });
            errs.push((err / cnt as f64).sqrt());
        }
        let rate = (errs[0] / errs[2]).log2() / 2.0;
        assert!(rate >= 0.9, "rate {rate}, errs {errs:?}");
    }
}
