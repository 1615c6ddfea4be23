//! Linear solves and the two structural operators of the fluid part:
//! the Helmholtz–Leray projection and the resolvent `(1 + eps A)^{-1}`.
//!
//! Every system solved here has the form `beta I - alpha L` where `L` is
//! the compact-stencil Laplacian on either the cell-centered layout or a
//! face-centered (MAC component) layout. Solves use conjugate gradients;
//! the `MultigridCg` method wraps CG in a geometric V-cycle preconditioner
//! with a fixed, scheduling-independent sweep order, so results stay
//! bit-deterministic.

use crate::error::{Error, Result};
use crate::mesh::{integrate, strides, total, Grid, ScalarField, VectorField};
use crate::operators::{gradient, velocity_divergence};
use crate::reduce::{norm2, pairwise_dot, pairwise_sum};

/// Max-norm ceiling enforced on the divergence left after a projection.
pub(crate) const PROJECTION_RESIDUAL_CAP: f64 = 5e-9;

const MG_PRE_SWEEPS: usize = 2;
const MG_POST_SWEEPS: usize = 2;
const MG_COARSE_SWEEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Plain conjugate gradients, no preconditioning.
    ConjugateGradient,
    /// Conjugate gradients preconditioned by one geometric V-cycle.
    MultigridCg,
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub tol_rel: f64,
    pub tol_abs: f64,
    pub max_iter: usize,
    pub method: Method,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { tol_rel: 1e-8, tol_abs: 1e-12, max_iter: 10_000, method: Method::ConjugateGradient }
    }
}

impl SolverSettings {
    /// Defaults with the iteration budget sized to the grid (10 N per dimension).
    pub fn for_grid(grid: &Grid) -> Self {
        let n_max = grid.cells().iter().copied().max().unwrap_or(1);
        SolverSettings { max_iter: 10 * grid.dim() * n_max, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_rel > 0.0 && self.tol_rel <= 1e-2) {
            return Err(Error::Validation {
                key: "solver.tol_rel".into(),
                constraint: format!("tol_rel in (0, 1e-2], got {}", self.tol_rel),
            });
        }
        if !(self.tol_abs >= 0.0) {
            return Err(Error::Validation {
                key: "solver.tol_abs".into(),
                constraint: "tol_abs must be nonnegative".into(),
            });
        }
        if self.max_iter < 10 {
            return Err(Error::Validation {
                key: "solver.max_iter".into(),
                constraint: format!("max_iter >= 10, got {}", self.max_iter),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Cell,
    /// Faces normal to the given axis.
    Face(usize),
}

fn layout_shape(grid: &Grid, layout: Layout) -> [usize; 3] {
    match layout {
        Layout::Cell => grid.shape3(),
        Layout::Face(a) => grid.face_shape(a),
    }
}

/// Signed-offset tap encoding one neighbor of the second difference:
/// the neighbor value is `sgn * x[i + off]`. A missing zero-flux neighbor
/// is `(1, 0)` (difference vanishes); an odd-reflected wall is `(-1, 0)`.
#[derive(Clone, Copy)]
struct Tap {
    inv: f64,
    sgn_m: f64,
    off_m: isize,
    sgn_p: f64,
    off_p: isize,
}

#[derive(Clone, Copy, PartialEq)]
enum EndRule {
    /// Wrap to the far end of the line.
    Periodic,
    /// Missing neighbor contributes no flux (cell layout walls).
    ZeroFlux,
    /// Neighbor is the negated center (tangential no-slip walls).
    OddReflect,
    /// Identity row (wall-normal velocity entries).
    Pinned,
}

#[inline(always)]
fn stencil_entry<const OUTER: usize>(
    x: &[f64],
    idx: usize,
    outer: &[Tap; OUTER],
    inner: (f64, f64, isize, f64, isize),
    beta: f64,
    alpha: f64,
) -> f64 {
    let xc = x[idx];
    let mut acc = 0.0f64;
    for t in outer {
        let xm = t.sgn_m * x[(idx as isize + t.off_m) as usize];
        let xp = t.sgn_p * x[(idx as isize + t.off_p) as usize];
        acc += ((xp - xc) * t.inv - (xc - xm) * t.inv) * t.inv;
    }
    let (inv, sm, om, sp, op) = inner;
    let xm = sm * x[(idx as isize + om) as usize];
    let xp = sp * x[(idx as isize + op) as usize];
    acc += ((xp - xc) * inv - (xc - xm) * inv) * inv;
    if beta == 0.0 {
        -(alpha * acc)
    } else {
        beta * xc - alpha * acc
    }
}

/// Inner taps of the second difference at a line end, per end rule.
#[inline(always)]
fn end_taps(rule: EndRule, lo: bool, n: usize) -> (f64, isize, f64, isize) {
    let wrap = (n - 1) as isize;
    if lo {
        match rule {
            EndRule::Periodic => (1.0, wrap, 1.0, 1),
            EndRule::ZeroFlux => (1.0, 0, 1.0, 1),
            EndRule::OddReflect => (-1.0, 0, 1.0, 1),
            EndRule::Pinned => unreachable!(),
        }
    } else {
        match rule {
            EndRule::Periodic => (1.0, -1, 1.0, -wrap),
            EndRule::ZeroFlux => (1.0, -1, 1.0, 0),
            EndRule::OddReflect => (1.0, -1, -1.0, 0),
            EndRule::Pinned => unreachable!(),
        }
    }
}

/// One line along the contiguous axis. `outer` carries the line-constant
/// taps of the strided axes in ascending axis order, so the accumulation
/// order matches the axis-by-axis divergence-of-gradient composition.
#[inline(always)]
fn stencil_line<const OUTER: usize>(
    x: &[f64],
    out: &mut [f64],
    base: usize,
    n: usize,
    inv_in: f64,
    rule: EndRule,
    outer: &[Tap; OUTER],
    beta: f64,
    alpha: f64,
) {
    let entry = stencil_entry::<OUTER>;
    let wrap = (n - 1) as isize;
    // Low end.
    match rule {
        EndRule::Pinned => out[base] = x[base],
        EndRule::Periodic => {
            out[base] = entry(x, base, outer, (inv_in, 1.0, wrap, 1.0, 1), beta, alpha)
        }
        EndRule::ZeroFlux => {
            out[base] = entry(x, base, outer, (inv_in, 1.0, 0, 1.0, 1), beta, alpha)
        }
        EndRule::OddReflect => {
            out[base] = entry(x, base, outer, (inv_in, -1.0, 0, 1.0, 1), beta, alpha)
        }
    }
    // Interior: regular second difference, contiguous access.
    let inner = (inv_in, 1.0, -1, 1.0, 1);
    for k in 1..n - 1 {
        out[base + k] = entry(x, base + k, outer, inner, beta, alpha);
    }
    // High end.
    let hi = base + n - 1;
    match rule {
        EndRule::Pinned => out[hi] = x[hi],
        EndRule::Periodic => {
            out[hi] = entry(x, hi, outer, (inv_in, 1.0, -1, 1.0, -wrap), beta, alpha)
        }
        EndRule::ZeroFlux => out[hi] = entry(x, hi, outer, (inv_in, 1.0, -1, 1.0, 0), beta, alpha),
        EndRule::OddReflect => {
            out[hi] = entry(x, hi, outer, (inv_in, 1.0, -1, -1.0, 0), beta, alpha)
        }
    }
}

/// Apply `beta I - alpha L` for the given layout.
///
/// The cell-layout Laplacian reproduces `divergence(gradient(f))` bit for
/// bit (same difference expressions, same accumulation order); face
/// layouts pin wall-normal entries (identity rows) and use odd reflection
/// across tangential walls.
fn apply_stencil(grid: &Grid, layout: Layout, beta: f64, alpha: f64, x: &[f64], out: &mut [f64]) {
    let shape = layout_shape(grid, layout);
    let st = strides(shape);
    let dim = grid.dim();
    let periodic = grid.is_periodic();
    let h = grid.spacing3();
    let inv = [1.0 / h[0], 1.0 / h[1], 1.0 / h[2]];
    let normal_axis = match layout {
        Layout::Cell => usize::MAX,
        Layout::Face(a) => a,
    };

    // Line-constant tap for a strided axis at position k.
    let tap = |axis: usize, k: usize| -> Tap {
        let n = shape[axis];
        let s = st[axis] as isize;
        let (sgn_m, off_m, sgn_p, off_p) = if periodic {
            let om = if k == 0 { (n as isize - 1) * s } else { -s };
            let op = if k == n - 1 { -(n as isize - 1) * s } else { s };
            (1.0, om, 1.0, op)
        } else if axis == normal_axis {
            (1.0, -s, 1.0, s) // interior faces only; pinned lines never reach here
        } else if normal_axis == usize::MAX {
            let (sm, om) = if k == 0 { (1.0, 0) } else { (1.0, -s) };
            let (sp, op) = if k == n - 1 { (1.0, 0) } else { (1.0, s) };
            (sm, om, sp, op)
        } else {
            let (sm, om) = if k == 0 { (-1.0, 0) } else { (1.0, -s) };
            let (sp, op) = if k == n - 1 { (-1.0, 0) } else { (1.0, s) };
            (sm, om, sp, op)
        };
        Tap { inv: inv[axis], sgn_m, off_m, sgn_p, off_p }
    };

    let inner_axis = dim - 1;
    let inner_rule = if periodic {
        EndRule::Periodic
    } else if normal_axis == usize::MAX {
        EndRule::ZeroFlux
    } else if inner_axis == normal_axis {
        EndRule::Pinned
    } else {
        EndRule::OddReflect
    };
    let pinned_line = |axis: usize, k: usize| {
        !periodic && axis == normal_axis && (k == 0 || k == shape[axis] - 1)
    };

    if dim == 2 {
        for i0 in 0..shape[0] {
            let base = i0 * st[0];
            if pinned_line(0, i0) {
                out[base..base + shape[1]].copy_from_slice(&x[base..base + shape[1]]);
                continue;
            }
            stencil_line(x, out, base, shape[1], inv[1], inner_rule, &[tap(0, i0)], beta, alpha);
        }
    } else {
        for i0 in 0..shape[0] {
            let t0 = tap(0, i0);
            let p0 = pinned_line(0, i0);
            for i1 in 0..shape[1] {
                let base = i0 * st[0] + i1 * st[1];
                if p0 || pinned_line(1, i1) {
                    out[base..base + shape[2]].copy_from_slice(&x[base..base + shape[2]]);
                    continue;
                }
                stencil_line(
                    x,
                    out,
                    base,
                    shape[2],
                    inv[2],
                    inner_rule,
                    &[t0, tap(1, i1)],
                    beta,
                    alpha,
                );
            }
        }
    }
}

/// One Gauss–Seidel half-sweep over the given color class, in place.
/// Colors partition by index parity; the visit order is fixed by the data
/// layout, so the sweep is deterministic.
#[allow(clippy::too_many_arguments)]
fn gs_sweep(
    grid: &Grid,
    layout: Layout,
    beta: f64,
    alpha: f64,
    x: &mut [f64],
    b: &[f64],
    diag_inv: &[f64],
    color: usize,
) {
    let shape = layout_shape(grid, layout);
    let st = strides(shape);
    let dim = grid.dim();
    let periodic = grid.is_periodic();
    let h = grid.spacing3();
    let inv = [1.0 / h[0], 1.0 / h[1], 1.0 / h[2]];
    let normal_axis = match layout {
        Layout::Cell => usize::MAX,
        Layout::Face(a) => a,
    };
    let tap = |axis: usize, k: usize| -> Tap {
        let n = shape[axis];
        let sstep = st[axis] as isize;
        let (sgn_m, off_m, sgn_p, off_p) = if periodic {
            let om = if k == 0 { (n as isize - 1) * sstep } else { -sstep };
            let op = if k == n - 1 { -(n as isize - 1) * sstep } else { sstep };
            (1.0, om, 1.0, op)
        } else if axis == normal_axis {
            (1.0, -sstep, 1.0, sstep)
        } else if normal_axis == usize::MAX {
            let (sm, om) = if k == 0 { (1.0, 0) } else { (1.0, -sstep) };
            let (sp, op) = if k == n - 1 { (1.0, 0) } else { (1.0, sstep) };
            (sm, om, sp, op)
        } else {
            let (sm, om) = if k == 0 { (-1.0, 0) } else { (1.0, -sstep) };
            let (sp, op) = if k == n - 1 { (-1.0, 0) } else { (1.0, sstep) };
            (sm, om, sp, op)
        };
        Tap { inv: inv[axis], sgn_m, off_m, sgn_p, off_p }
    };
    let inner_axis = dim - 1;
    let inner_rule = if periodic {
        EndRule::Periodic
    } else if normal_axis == usize::MAX {
        EndRule::ZeroFlux
    } else if inner_axis == normal_axis {
        EndRule::Pinned
    } else {
        EndRule::OddReflect
    };
    let pinned_line = |axis: usize, k: usize| {
        !periodic && axis == normal_axis && (k == 0 || k == shape[axis] - 1)
    };

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn gs_line<const OUTER: usize>(
        x: &mut [f64],
        b: &[f64],
        dinv: &[f64],
        base: usize,
        n: usize,
        inv_in: f64,
        rule: EndRule,
        outer: &[Tap; OUTER],
        beta: f64,
        alpha: f64,
        start: usize,
    ) {
        // Low end.
        if start == 0 {
            let idx = base;
            if rule == EndRule::Pinned {
                x[idx] = b[idx];
            } else {
                let val = stencil_entry(x, idx, outer, end_taps_with(rule, true, n, inv_in), beta, alpha);
                x[idx] += (b[idx] - val) * dinv[idx];
            }
        }
        // Interior, stride two.
        let inner = (inv_in, 1.0, -1isize, 1.0, 1isize);
        let mut k = if start == 0 { 2 } else { start };
        while k < n - 1 {
            let idx = base + k;
            let val = stencil_entry(x, idx, outer, inner, beta, alpha);
            x[idx] += (b[idx] - val) * dinv[idx];
            k += 2;
        }
        // High end.
        if k == n - 1 {
            let idx = base + n - 1;
            if rule == EndRule::Pinned {
                x[idx] = b[idx];
            } else {
                let val =
                    stencil_entry(x, idx, outer, end_taps_with(rule, false, n, inv_in), beta, alpha);
                x[idx] += (b[idx] - val) * dinv[idx];
            }
        }
    }

    if dim == 2 {
        for i0 in 0..shape[0] {
            if pinned_line(0, i0) {
                continue; // pinned entries hold zero throughout the cycle
            }
            let base = i0 * st[0];
            let start = (color + i0) & 1;
            gs_line(x, b, diag_inv, base, shape[1], inv[1], inner_rule, &[tap(0, i0)], beta, alpha, start);
        }
    } else {
        for i0 in 0..shape[0] {
            let t0 = tap(0, i0);
            let p0 = pinned_line(0, i0);
            for i1 in 0..shape[1] {
                if p0 || pinned_line(1, i1) {
                    continue;
                }
                let base = i0 * st[0] + i1 * st[1];
                let start = (color + i0 + i1) & 1;
                gs_line(
                    x,
                    b,
                    diag_inv,
                    base,
                    shape[2],
                    inv[2],
                    inner_rule,
                    &[t0, tap(1, i1)],
                    beta,
                    alpha,
                    start,
                );
            }
        }
    }
}

#[inline(always)]
fn end_taps_with(rule: EndRule, lo: bool, n: usize, inv: f64) -> (f64, f64, isize, f64, isize) {
    let (sm, om, sp, op) = end_taps(rule, lo, n);
    (inv, sm, om, sp, op)
}

/// Diagonal of `beta I - alpha L`, inverted, for Jacobi smoothing.
fn diag_inv_stencil(grid: &Grid, layout: Layout, beta: f64, alpha: f64, out: &mut [f64]) {
    let shape = layout_shape(grid, layout);
    let dim = grid.dim();
    let periodic = grid.is_periodic();
    let h = grid.spacing3();
    let normal_axis = match layout {
        Layout::Cell => usize::MAX,
        Layout::Face(a) => a,
    };
    let mut lin = 0usize;
    for i0 in 0..shape[0] {
        for i1 in 0..shape[1] {
            for i2 in 0..shape[2] {
                let idx = [i0, i1, i2];
                if !periodic
                    && normal_axis != usize::MAX
                    && (idx[normal_axis] == 0 || idx[normal_axis] == shape[normal_axis] - 1)
                {
                    out[lin] = 1.0;
                    lin += 1;
                    continue;
                }
                let mut lap_diag = 0.0;
                for j in 0..dim {
                    let k = idx[j];
                    let n = shape[j];
                    let inv2 = 1.0 / (h[j] * h[j]);
                    let c = if periodic {
                        2.0
                    } else if j == normal_axis {
                        2.0
                    } else if normal_axis == usize::MAX {
                        if k == 0 || k == n - 1 {
                            1.0
                        } else {
                            2.0
                        }
                    } else if k == 0 || k == n - 1 {
                        3.0
                    } else {
                        2.0
                    };
                    lap_diag -= c * inv2;
                }
                out[lin] = 1.0 / (beta - alpha * lap_diag);
                lin += 1;
            }
        }
    }
}

/// Geometric multigrid hierarchy used as a CG preconditioner.
struct Multigrid {
    layout: Layout,
    grids: Vec<Grid>,
    diag_inv: Vec<Vec<f64>>,
    coeffs: Option<(f64, f64)>,
    x: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
}

impl Multigrid {
    fn new(grid: &Grid, layout: Layout) -> Multigrid {
        let mut grids = vec![grid.clone()];
        loop {
            let g = grids.last().unwrap();
            let can = g
                .cells()
                .iter()
                .all(|&n| n % 2 == 0 && n / 2 >= 4);
            if !can {
                break;
            }
            let coarse: Vec<usize> = g.cells().iter().map(|&n| n / 2).collect();
            let next = crate::mesh::make_grid(g.dim(), &coarse, g.lengths(), g.boundary())
                .expect("coarse grid construction");
            grids.push(next);
        }
        let sizes: Vec<usize> = grids.iter().map(|g| total(layout_shape(g, layout))).collect();
        Multigrid {
            layout,
            diag_inv: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            x: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            b: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            r: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            grids,
            coeffs: None,
        }
    }

    fn ensure_coeffs(&mut self, beta: f64, alpha: f64) {
        if self.coeffs == Some((beta, alpha)) {
            return;
        }
        for (l, g) in self.grids.iter().enumerate() {
            diag_inv_stencil(g, self.layout, beta, alpha, &mut self.diag_inv[l]);
        }
        self.coeffs = Some((beta, alpha));
    }

    /// One V-cycle applied to `rhs`, written to `z`. Linear and symmetric
    /// (red-black pre-smoothing, black-red post-smoothing), hence a valid
    /// SPD preconditioner.
    fn precondition(&mut self, beta: f64, alpha: f64, rhs: &[f64], z: &mut [f64], singular: bool) {
        self.ensure_coeffs(beta, alpha);
        self.b[0].copy_from_slice(rhs);
        self.x[0].fill(0.0);
        vcycle(
            &self.grids,
            self.layout,
            &self.diag_inv,
            &mut self.x,
            &mut self.b,
            &mut self.r,
            0,
            beta,
            alpha,
        );
        z.copy_from_slice(&self.x[0]);
        if singular {
            let mean = pairwise_sum(z) / z.len() as f64;
            for v in z.iter_mut() {
                *v -= mean;
            }
        }
    }
}

/// Red-black Gauss–Seidel sweeps; `reverse` flips the color order so a
/// pre/post pair is symmetric.
#[allow(clippy::too_many_arguments)]
fn gs_smooth(
    grid: &Grid,
    layout: Layout,
    beta: f64,
    alpha: f64,
    x: &mut [f64],
    b: &[f64],
    diag_inv: &[f64],
    sweeps: usize,
    reverse: bool,
) {
    let order: [usize; 2] = if reverse { [1, 0] } else { [0, 1] };
    for _ in 0..sweeps {
        for &color in &order {
            gs_sweep(grid, layout, beta, alpha, x, b, diag_inv, color);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn vcycle(
    grids: &[Grid],
    layout: Layout,
    diag_inv: &[Vec<f64>],
    x: &mut [Vec<f64>],
    b: &mut [Vec<f64>],
    r: &mut [Vec<f64>],
    level: usize,
    beta: f64,
    alpha: f64,
) {
    let g = &grids[level];
    if level + 1 == grids.len() {
        gs_smooth(g, layout, beta, alpha, &mut x[level], &b[level], &diag_inv[level], MG_COARSE_SWEEPS, false);
        return;
    }
    gs_smooth(g, layout, beta, alpha, &mut x[level], &b[level], &diag_inv[level], MG_PRE_SWEEPS, false);
    apply_stencil(g, layout, beta, alpha, &x[level], &mut r[level]);
    {
        let (rl, bl) = (&mut r[level], &b[level]);
        for i in 0..rl.len() {
            rl[i] = bl[i] - rl[i];
        }
    }
    restrict_field(g, &grids[level + 1], layout, &r[level], &mut b[level + 1]);
    x[level + 1].fill(0.0);
    vcycle(grids, layout, diag_inv, x, b, r, level + 1, beta, alpha);
    {
        let (head, tail) = x.split_at_mut(level + 1);
        prolong_add_field(g, &grids[level + 1], layout, &tail[0], &mut head[level]);
    }
    gs_smooth(g, layout, beta, alpha, &mut x[level], &b[level], &diag_inv[level], MG_POST_SWEEPS, true);
}

/// Restriction: cell layout averages the 2^d children; face layouts apply
/// (1/4, 1/2, 1/4) along the normal (linear-interpolation transpose) and
/// average tangentially. Cheap, symmetric against the prolongation below.
fn restrict_field(fine_g: &Grid, coarse_g: &Grid, layout: Layout, fine: &[f64], coarse: &mut [f64]) {
    let dim = fine_g.dim();
    let fs = layout_shape(fine_g, layout);
    let cs = layout_shape(coarse_g, layout);
    let fst = strides(fs);
    let periodic = fine_g.is_periodic();
    match layout {
        Layout::Cell => {
            let w = 1.0 / (1 << dim) as f64;
            let mut lin = 0usize;
            for i0 in 0..cs[0] {
                for i1 in 0..cs[1] {
                    for i2 in 0..cs[2] {
                        let base = 2 * i0 * fst[0] + 2 * i1 * fst[1] + 2 * i2 * fst[2];
                        let mut acc = 0.0;
                        let c2 = if dim > 2 { 2 } else { 1 };
                        for a in 0..2usize {
                            for b in 0..2usize {
                                for c in 0..c2 {
                                    acc += fine[base + a * fst[0] + b * fst[1] + c * fst[2]];
                                }
                            }
                        }
                        coarse[lin] = acc * w;
                        lin += 1;
                    }
                }
            }
        }
        Layout::Face(na) => {
            let wt = 1.0 / (1 << (dim - 1)) as f64;
            let n_fine = fs[na];
            let (t1, t2) = tangential_axes(na);
            let mut lin = 0usize;
            for i0 in 0..cs[0] {
                for i1 in 0..cs[1] {
                    for i2 in 0..cs[2] {
                        let ci = [i0, i1, i2];
                        if !periodic && (ci[na] == 0 || ci[na] == cs[na] - 1) {
                            coarse[lin] = 0.0;
                            lin += 1;
                            continue;
                        }
                        let kf = 2 * ci[na];
                        let (km, kp) = if periodic {
                            ((kf + n_fine - 1) % n_fine, (kf + 1) % n_fine)
                        } else {
                            (kf - 1, kf + 1)
                        };
                        let mut acc = 0.0;
                        let reps2 = if t2 < dim { 2 } else { 1 };
                        for a in 0..2usize {
                            for b in 0..reps2 {
                                let mut fi = [0usize; 3];
                                fi[na] = 0;
                                fi[t1] = 2 * ci[t1] + a;
                                if t2 < dim {
                                    fi[t2] = 2 * ci[t2] + b;
                                }
                                let off = fi[0] * fst[0] + fi[1] * fst[1] + fi[2] * fst[2];
                                let at = |k: usize| fine[off + k * fst[na]];
                                acc += 0.25 * at(km) + 0.5 * at(kf) + 0.25 * at(kp);
                            }
                        }
                        coarse[lin] = acc * wt;
                        lin += 1;
                    }
                }
            }
        }
    }
}

fn tangential_axes(normal: usize) -> (usize, usize) {
    match normal {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// Prolongation: piecewise-constant tangentially and into cell children,
/// linear along the face normal.
fn prolong_add_field(
    fine_g: &Grid,
    coarse_g: &Grid,
    layout: Layout,
    coarse: &[f64],
    fine: &mut [f64],
) {
    let fs = layout_shape(fine_g, layout);
    let cs = layout_shape(coarse_g, layout);
    let cst = strides(cs);
    let periodic = fine_g.is_periodic();
    match layout {
        Layout::Cell => {
            let mut lin = 0usize;
            for i0 in 0..fs[0] {
                for i1 in 0..fs[1] {
                    for i2 in 0..fs[2] {
                        let cbase = (i0 / 2) * cst[0] + (i1 / 2) * cst[1] + (i2 / 2) * cst[2];
                        fine[lin] += coarse[cbase];
                        lin += 1;
                    }
                }
            }
        }
        Layout::Face(na) => {
            let n_coarse = cs[na];
            let mut lin = 0usize;
            for i0 in 0..fs[0] {
                for i1 in 0..fs[1] {
                    for i2 in 0..fs[2] {
                        let fi = [i0, i1, i2];
                        if !periodic && (fi[na] == 0 || fi[na] == fs[na] - 1) {
                            lin += 1;
                            continue;
                        }
                        let mut ci = [fi[0] / 2, fi[1] / 2, fi[2] / 2];
                        let k = fi[na];
                        let val = if k % 2 == 0 {
                            ci[na] = k / 2;
                            coarse[ci[0] * cst[0] + ci[1] * cst[1] + ci[2] * cst[2]]
                        } else {
                            let klo = k / 2;
                            let khi = if periodic { (klo + 1) % n_coarse } else { klo + 1 };
                            ci[na] = klo;
                            let lo = coarse[ci[0] * cst[0] + ci[1] * cst[1] + ci[2] * cst[2]];
                            ci[na] = khi;
                            let hi = coarse[ci[0] * cst[0] + ci[1] * cst[1] + ci[2] * cst[2]];
                            0.5 * (lo + hi)
                        };
                        fine[lin] += val;
                        lin += 1;
                    }
                }
            }
        }
    }
}

struct SolveStats {
    iterations: usize,
    residual: f64,
}

/// How the convergence target is formed.
#[derive(Clone, Copy)]
enum Target {
    /// `tol_rel * |b| + tol_abs` from the settings.
    FromSettings,
    /// Settings target, but never looser than the given absolute value.
    Capped(f64),
    /// Fixed absolute target (used where the contract is an absolute bound).
    Exact(f64),
}

fn trace_enabled() -> bool {
    static ON: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *ON.get_or_init(|| std::env::var_os("KSNS_SOLVE_TRACE").is_some())
}

fn trace_solve(layout: Layout, beta: f64, alpha: f64, used_mg: bool, stats: &SolveStats) {
    if trace_enabled() {
        eprintln!(
            "solve {:?} beta={beta:.3e} alpha={alpha:.3e} mg={used_mg} iters={} res={:.3e}",
            layout, stats.iterations, stats.residual
        );
    }
}

/// Conjugate gradients on `beta I - alpha L`, optionally preconditioned.
/// A caller-supplied initial guess shortens the Krylov sweep; the guess is
/// always derived from solve inputs, so results stay reproducible.
#[allow(clippy::too_many_arguments)]
fn solve_system(
    grid: &Grid,
    layout: Layout,
    beta: f64,
    alpha: f64,
    b: &[f64],
    settings: &SolverSettings,
    target_rule: Target,
    singular: bool,
    mut mg: Option<&mut Multigrid>,
    guess: Option<&[f64]>,
) -> Result<(Vec<f64>, SolveStats)> {
    let n = b.len();
    let norm_b = norm2(b);
    let target = match target_rule {
        Target::FromSettings => settings.tol_rel * norm_b + settings.tol_abs,
        Target::Capped(cap) => (settings.tol_rel * norm_b + settings.tol_abs).min(cap),
        Target::Exact(t) => t,
    };
    if norm_b == 0.0 {
        trace_solve(layout, beta, alpha, mg.is_some(), &SolveStats { iterations: 0, residual: 0.0 });
        return Ok((vec![0.0; n], SolveStats { iterations: 0, residual: 0.0 }));
    }

    let mut x;
    let mut r;
    let mut ap = vec![0.0; n];
    match guess {
        Some(x0) => {
            x = x0.to_vec();
            apply_stencil(grid, layout, beta, alpha, &x, &mut ap);
            r = vec![0.0; n];
            for i in 0..n {
                r[i] = b[i] - ap[i];
            }
        }
        None => {
            x = vec![0.0; n];
            r = b.to_vec();
        }
    }
    if singular {
        remove_mean(&mut r);
    }
    let mut z = vec![0.0; n];
    let mut res = norm2(&r);
    if res <= target {
        if singular {
            remove_mean(&mut x);
        }
        trace_solve(layout, beta, alpha, mg.is_some(), &SolveStats { iterations: 0, residual: res });
        return Ok((x, SolveStats { iterations: 0, residual: res }));
    }

    apply_precond(&mut mg, beta, alpha, &r, &mut z, singular);
    let mut p = z.clone();
    let mut rz = pairwise_dot(&r, &z);
    let mut iter = 0usize;
    while iter < settings.max_iter {
        apply_stencil(grid, layout, beta, alpha, &p, &mut ap);
        let pap = pairwise_dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let a = rz / pap;
        for i in 0..n {
            x[i] += a * p[i];
        }
        for i in 0..n {
            r[i] -= a * ap[i];
        }
        if singular {
            remove_mean(&mut r);
        }
        iter += 1;
        res = norm2(&r);
        if res <= target {
            if singular {
                remove_mean(&mut x);
            }
            let stats = SolveStats { iterations: iter, residual: res };
            trace_solve(layout, beta, alpha, mg.is_some(), &stats);
            return Ok((x, stats));
        }
        apply_precond(&mut mg, beta, alpha, &r, &mut z, singular);
        let rz_new = pairwise_dot(&r, &z);
        let beta_cg = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta_cg * p[i];
        }
    }
    Err(Error::NoConvergence { iterations: iter, residual: res, target })
}

fn apply_precond(
    mg: &mut Option<&mut Multigrid>,
    beta: f64,
    alpha: f64,
    r: &[f64],
    z: &mut [f64],
    singular: bool,
) {
    match mg {
        Some(m) => m.precondition(beta, alpha, r, z, singular),
        None => z.copy_from_slice(r),
    }
}

fn remove_mean(v: &mut [f64]) {
    let mean = pairwise_sum(v) / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

/// Near-identity Helmholtz systems (small `alpha` against the stencil
/// ceiling) converge in a handful of plain CG sweeps; the V-cycle only
/// pays off once the operator is stiff. The cutoff depends on the grid
/// and coefficients alone, never on field data.
fn use_multigrid(grid: &Grid, method: Method, beta: f64, alpha: f64) -> bool {
    if method != Method::MultigridCg {
        return false;
    }
    if beta == 0.0 {
        return true;
    }
    let mut sigma_max = 0.0;
    for axis in 0..grid.dim() {
        let h = grid.spacing()[axis];
        sigma_max += 4.0 / (h * h);
    }
    alpha * sigma_max >= 3.0 * beta
}

/// Reusable solver state for a fixed grid: multigrid hierarchies are built
/// once and shared by every solve on that grid.
pub struct SolverContext {
    grid: Grid,
    cell_mg: Option<Multigrid>,
    face_mg: Vec<Option<Multigrid>>,
}

impl SolverContext {
    pub fn new(grid: &Grid) -> Self {
        SolverContext {
            grid: grid.clone(),
            cell_mg: None,
            face_mg: (0..grid.dim()).map(|_| None).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    fn cell_mg(&mut self) -> &mut Multigrid {
        if self.cell_mg.is_none() {
            self.cell_mg = Some(Multigrid::new(&self.grid, Layout::Cell));
        }
        self.cell_mg.as_mut().unwrap()
    }

    fn face_mg(&mut self, axis: usize) -> &mut Multigrid {
        if self.face_mg[axis].is_none() {
            self.face_mg[axis] = Some(Multigrid::new(&self.grid, Layout::Face(axis)));
        }
        self.face_mg[axis].as_mut().unwrap()
    }

    fn solve_cell(
        &mut self,
        beta: f64,
        alpha: f64,
        b: &[f64],
        settings: &SolverSettings,
        target: Target,
        singular: bool,
        guess: Option<&[f64]>,
    ) -> Result<(Vec<f64>, SolveStats)> {
        let grid = self.grid.clone();
        if use_multigrid(&grid, settings.method, beta, alpha) {
            let mg = self.cell_mg();
            solve_system(&grid, Layout::Cell, beta, alpha, b, settings, target, singular, Some(mg), guess)
        } else {
            solve_system(&grid, Layout::Cell, beta, alpha, b, settings, target, singular, None, guess)
        }
    }

    fn solve_face(
        &mut self,
        axis: usize,
        beta: f64,
        alpha: f64,
        b: &[f64],
        settings: &SolverSettings,
        guess: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let grid = self.grid.clone();
        let (x, _) = if use_multigrid(&grid, settings.method, beta, alpha) {
            let mg = self.face_mg(axis);
            solve_system(&grid, Layout::Face(axis), beta, alpha, b, settings, Target::FromSettings, false, Some(mg), guess)?
        } else {
            solve_system(&grid, Layout::Face(axis), beta, alpha, b, settings, Target::FromSettings, false, None, guess)?
        };
        Ok(x)
    }

    /// Solve `laplacian(p) = rhs` with the grid's natural boundary mode
    /// (zero-flux or periodic) and a mean-zero gauge.
    pub fn solve_poisson_neumann(
        &mut self,
        rhs: &ScalarField,
        settings: &SolverSettings,
    ) -> Result<ScalarField> {
        settings.validate()?;
        rhs.check_finite("poisson rhs")?;
        let vol = self.grid.cell_volume();
        let mean_integral = integrate(rhs);
        let l2 = (pairwise_dot(rhs.values(), rhs.values()) * vol).sqrt();
        if mean_integral.abs() > 1e-10 * l2 {
            return Err(Error::IncompatibleRHS { mean: mean_integral, tol: 1e-10 * l2 });
        }
        // Remove the roundoff-level mean so the singular system is exactly compatible.
        let mean = pairwise_sum(rhs.values()) / rhs.values().len() as f64;
        let b: Vec<f64> = rhs.values().iter().map(|&v| -(v - mean)).collect();
        let (mut x, _) = self.solve_cell(0.0, 1.0, &b, settings, Target::FromSettings, true, None)?;
        remove_mean(&mut x);
        ScalarField::from_values(&self.grid, x)
    }

    /// Solve `(I - alpha laplacian)` on the face layout of `axis`
    /// (one velocity component, no-slip or periodic walls).
    pub fn solve_face_component(
        &mut self,
        axis: usize,
        alpha: f64,
        b: &[f64],
        settings: &SolverSettings,
    ) -> Result<Vec<f64>> {
        settings.validate()?;
        if !(alpha >= 0.0) {
            return Err(Error::Validation {
                key: "alpha".into(),
                constraint: format!("alpha >= 0, got {alpha}"),
            });
        }
        if alpha == 0.0 {
            return Ok(b.to_vec());
        }
        self.solve_face(axis, 1.0, alpha, b, settings, Some(b))
    }

    /// Solve `(I - alpha laplacian) x = f`; `alpha = 0` returns `f` unchanged.
    pub fn solve_helmholtz(
        &mut self,
        f: &ScalarField,
        alpha: f64,
        settings: &SolverSettings,
    ) -> Result<ScalarField> {
        settings.validate()?;
        if !(alpha >= 0.0) {
            return Err(Error::Validation {
                key: "alpha".into(),
                constraint: format!("alpha >= 0, got {alpha}"),
            });
        }
        if alpha == 0.0 {
            return Ok(f.clone());
        }
        self.solve_helmholtz_capped(f, alpha, settings, None, None)
    }

    pub(crate) fn solve_helmholtz_capped(
        &mut self,
        f: &ScalarField,
        alpha: f64,
        settings: &SolverSettings,
        cap: Option<f64>,
        guess: Option<&[f64]>,
    ) -> Result<ScalarField> {
        let target = match cap {
            Some(c) => Target::Capped(c),
            None => Target::FromSettings,
        };
        let (x, _) = self.solve_cell(1.0, alpha, f.values(), settings, target, false, guess)?;
        ScalarField::from_values(&self.grid, x)
    }

    /// Helmholtz–Leray projection: returns `(w, p)` with `w = v - grad p`
    /// discretely divergence-free and `p` mean-zero.
    pub fn project_divergence_free(
        &mut self,
        v: &VectorField,
        settings: &SolverSettings,
    ) -> Result<(VectorField, ScalarField)> {
        self.project_divergence_free_guided(v, settings, None)
    }

    /// Projection with a caller-supplied pressure guess (for example the
    /// previous step's pressure), which shortens the Poisson solve.
    pub fn project_divergence_free_guided(
        &mut self,
        v: &VectorField,
        settings: &SolverSettings,
        pressure_guess: Option<&ScalarField>,
    ) -> Result<(VectorField, ScalarField)> {
        settings.validate()?;
        v.check_finite("projection input")?;
        let rhs = velocity_divergence(v);
        let mut b: Vec<f64> = rhs.values().to_vec();
        let mean = pairwise_sum(&b) / b.len() as f64;
        for val in b.iter_mut() {
            *val = -(*val - mean);
        }
        // The projection contract is an absolute divergence ceiling (scaled
        // by the velocity-gradient magnitude), not a residual relative to
        // the input divergence.
        let target = PROJECTION_RESIDUAL_CAP * crate::operators::divergence_scale(v);
        let guess = pressure_guess.map(|p| p.values());
        let (mut p_vals, _) =
            self.solve_cell(0.0, 1.0, &b, settings, Target::Exact(target), true, guess)?;
        remove_mean(&mut p_vals);
        let p = ScalarField::from_values(&self.grid, p_vals)?;
        let grad_p = gradient(&p);
        let mut w = v.clone();
        for axis in 0..self.grid.dim() {
            let g = grad_p.component(axis);
            let wc = w.component_mut(axis);
            for i in 0..wc.len() {
                wc[i] -= g[i];
            }
        }
        w.enforce_noslip();
        Ok((w, p))
    }

    /// Resolvent `(1 + eps A)^{-1} w`: componentwise `(I - eps laplacian)`
    /// solve followed by the Leray projection. `eps = 0` is the identity.
    pub fn yosida_resolvent(
        &mut self,
        w: &VectorField,
        eps: f64,
        settings: &SolverSettings,
    ) -> Result<VectorField> {
        settings.validate()?;
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Validation {
                key: "eps".into(),
                constraint: format!("eps in [0, 1], got {eps}"),
            });
        }
        crate::operators::check_divergence_free(w, 1e-8)?;
        if eps == 0.0 {
            return Ok(w.clone());
        }
        let mut v = VectorField::zeros(&self.grid);
        for axis in 0..self.grid.dim() {
            let x = self.solve_face(axis, 1.0, eps, w.component(axis), settings, None)?;
            v.component_mut(axis).copy_from_slice(&x);
        }
        v.enforce_noslip();
        let (projected, _) = self.project_divergence_free(&v, settings)?;
        Ok(projected)
    }
}

pub fn solve_poisson_neumann(rhs: &ScalarField, settings: &SolverSettings) -> Result<ScalarField> {
    SolverContext::new(rhs.grid()).solve_poisson_neumann(rhs, settings)
}

pub fn solve_helmholtz(f: &ScalarField, alpha: f64, settings: &SolverSettings) -> Result<ScalarField> {
    SolverContext::new(f.grid()).solve_helmholtz(f, alpha, settings)
}

pub fn project_divergence_free(
    v: &VectorField,
    settings: &SolverSettings,
) -> Result<(VectorField, ScalarField)> {
    SolverContext::new(v.grid()).project_divergence_free(v, settings)
}

pub fn yosida_resolvent(w: &VectorField, eps: f64, settings: &SolverSettings) -> Result<VectorField> {
    SolverContext::new(w.grid()).yosida_resolvent(w, eps, settings)
}

/// Discrete symbol of the Laplacian stencil for a periodic Fourier mode:
/// `sum_i 2 (1 - cos(k_i h_i)) / h_i^2`.
pub fn laplacian_symbol(grid: &Grid, mode: &[i32]) -> f64 {
    let mut s = 0.0;
    for (axis, &m) in mode.iter().enumerate() {
        let h = grid.spacing()[axis];
        let k = 2.0 * std::f64::consts::PI * m as f64 / grid.lengths()[axis];
        s += 2.0 * (1.0 - (k * h).cos()) / (h * h);
    }
    s
}
