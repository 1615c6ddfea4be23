//! Time integration of the regularized system with an IMEX splitting.
//!
//! Per step, in order: an explicit conservative update of the cell density
//! (porous-medium flux, chemotactic flux, upwind advection), an IMEX update
//! of the signal (explicit transport and source, implicit diffusion and
//! decay), and a Chorin-split velocity update (resolvent-smoothed explicit
//! convection, implicit viscosity, Leray projection).

use crate::elliptic::{SolverContext, SolverSettings};
use crate::error::{Error, Result};
use crate::mesh::{strides, Grid, ScalarField, VectorField};
use crate::operators::{
    advect_scalar_unchecked, advect_velocity, chemotaxis_flux_with_grad, divergence_into,
    divergence_max, divergence_scale, gradient, porous_medium_flux, FaceFlux,
};
use crate::reduce;

/// Hard-error threshold for negative densities, relative to the field scale;
/// anything between it and zero is treated as roundoff and clamped.
const CLAMP_HARD: f64 = 1e-10;

/// The potential driving the buoyancy force.
#[derive(Debug, Clone)]
pub enum Potential {
    /// `phi(x) = g . x`, so `grad phi = g` everywhere.
    Linear(Vec<f64>),
    /// Cell-centered samples of `phi`; the force uses its face gradient.
    GridSampled(ScalarField),
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub m: f64,
    pub kappa: f64,
    pub eps: f64,
    pub phi: Potential,
    /// Coefficient of the velocity Laplacian; the model fixes it to one.
    pub viscosity: f64,
    /// Ceiling on `max n` before the run aborts with `BlowUpSuspected`.
    pub n_ceiling: f64,
    /// Scenario switch for decoupling studies: disables the chemotactic flux.
    pub chemotaxis: bool,
}

impl ModelParams {
    pub fn new(m: f64, kappa: f64, eps: f64, phi: Potential) -> Result<Self> {
        let p = ModelParams {
            m,
            kappa,
            eps,
            phi,
            viscosity: 1.0,
            n_ceiling: 1e8,
            chemotaxis: true,
        };
        p.validate_scalars()?;
        Ok(p)
    }

    fn validate_scalars(&self) -> Result<()> {
        if !(self.m > 1.0) {
            return Err(Error::Validation {
                key: "params.m".into(),
                constraint: format!("m > 1, got {}", self.m),
            });
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return Err(Error::Validation {
                key: "params.eps".into(),
                constraint: format!("eps in (0, 1], got {}", self.eps),
            });
        }
        if !self.kappa.is_finite() {
            return Err(Error::Validation {
                key: "params.kappa".into(),
                constraint: "kappa must be finite".into(),
            });
        }
        if !(self.n_ceiling > 0.0) {
            return Err(Error::Validation {
                key: "params.n_ceiling".into(),
                constraint: "n_ceiling must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn validate_for_grid(&self, grid: &Grid) -> Result<()> {
        self.validate_scalars()?;
        match &self.phi {
            Potential::Linear(g) => {
                if g.len() != grid.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: grid.dim(),
                        got: g.len(),
                        what: "potential gradient",
                    });
                }
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::Validation {
                        key: "params.phi".into(),
                        constraint: "linear potential gradient must be finite".into(),
                    });
                }
            }
            Potential::GridSampled(f) => {
                if f.grid() != grid {
                    return Err(Error::Validation {
                        key: "params.phi".into(),
                        constraint: "sampled potential lives on a different grid".into(),
                    });
                }
                f.check_finite("potential")?;
            }
        }
        Ok(())
    }

    /// True when the diffusion exponent sits at or below the global-existence
    /// threshold; runs are permitted but flagged.
    pub fn below_existence_threshold(&self) -> bool {
        self.m <= 2.0
    }
}

/// The evolving triple `(n, c, u)` plus the diagnostic pressure and time.
#[derive(Debug, Clone)]
pub struct State {
    pub n: ScalarField,
    pub c: ScalarField,
    pub u: VectorField,
    pub p: ScalarField,
    pub t: f64,
}

impl State {
    pub fn rest(grid: &Grid) -> State {
        State {
            n: ScalarField::zeros(grid),
            c: ScalarField::zeros(grid),
            u: VectorField::zeros(grid),
            p: ScalarField::zeros(grid),
            t: 0.0,
        }
    }

    pub fn grid(&self) -> &Grid {
        self.n.grid()
    }

    pub fn validate(&self) -> Result<()> {
        self.n.check_finite("state n")?;
        self.c.check_finite("state c")?;
        self.u.check_finite("state u")?;
        self.p.check_finite("state p")?;
        let nmin = self.n.min();
        if nmin < 0.0 {
            return Err(Error::PositivityViolation { field: "n", min: nmin });
        }
        let cmin = self.c.min();
        if cmin < 0.0 {
            return Err(Error::PositivityViolation { field: "c", min: cmin });
        }
        let max_div = divergence_max(&self.u);
        let bound = 1e-8 * divergence_scale(&self.u);
        if max_div > bound {
            return Err(Error::NotDivergenceFree { max_div, tol: bound });
        }
        Ok(())
    }
}

/// Step-size policy.
#[derive(Debug, Clone)]
pub struct StepControl {
    pub cfl_advect: f64,
    pub cfl_diffuse: f64,
    pub dt_max: f64,
    pub dt_min: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl { cfl_advect: 0.4, cfl_diffuse: 0.25, dt_max: 0.1, dt_min: 1e-12 }
    }
}

impl StepControl {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(Error::Validation {
                key: "stepping.dt_min".into(),
                constraint: format!("0 < dt_min <= dt_max, got {} / {}", self.dt_min, self.dt_max),
            });
        }
        for (key, v) in [("cfl_advect", self.cfl_advect), ("cfl_diffuse", self.cfl_diffuse)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Validation {
                    key: format!("stepping.{key}"),
                    constraint: format!("must lie in (0, 1), got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// CFL-limited step size: advective bound from the fluid plus chemotactic
/// drift speed, diffusive bound from the porous-medium mobility ceiling.
pub fn compute_dt(state: &State, params: &ModelParams, ctl: &StepControl) -> Result<f64> {
    compute_dt_with_grad(state, params, ctl, &gradient(&state.c))
}

fn compute_dt_with_grad(
    state: &State,
    params: &ModelParams,
    ctl: &StepControl,
    grad_c: &FaceFlux,
) -> Result<f64> {
    let grid = state.grid();
    let dim = grid.dim();
    let h = grid.spacing();

    let n_max = state.n.max().max(0.0);
    let d_max = crate::operators::pm_mobility(params.m, n_max + params.eps);
    let h_min = grid.min_spacing();
    let dt_diff = ctl.cfl_diffuse * h_min * h_min / (2.0 * dim as f64 * d_max);

    let mut speed_sum = 0.0;
    for axis in 0..dim {
        let u_max = reduce::max_abs(state.u.component(axis));
        let g_max = if params.chemotaxis { reduce::max_abs(grad_c.component(axis)) } else { 0.0 };
        speed_sum += (u_max + g_max) / h[axis];
    }
    let dt_adv = if speed_sum > 0.0 { ctl.cfl_advect / speed_sum } else { f64::INFINITY };

    let dt = dt_adv.min(dt_diff).min(ctl.dt_max);
    if dt < ctl.dt_min {
        return Err(Error::StalledStep { required_dt: dt, dt_min: ctl.dt_min });
    }
    Ok(dt)
}

/// Reusable per-grid scratch for the stepper (solver hierarchies).
pub struct StepContext {
    solver: SolverContext,
}

impl StepContext {
    pub fn new(grid: &Grid) -> StepContext {
        StepContext { solver: SolverContext::new(grid) }
    }

    pub fn solver_mut(&mut self) -> &mut SolverContext {
        &mut self.solver
    }
}

/// Clamp roundoff negatives to zero; values below the scaled hard threshold
/// indicate a scheme failure.
fn clamp_nonnegative(field: &mut ScalarField, name: &'static str) -> Result<()> {
    let min = field.min();
    if min >= 0.0 {
        return Ok(());
    }
    let scale = reduce::max_abs(field.values()).max(1.0);
    if min < -CLAMP_HARD * scale {
        return Err(Error::PositivityViolation { field: name, min });
    }
    for v in field.values_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Buoyancy force `n grad(phi)` interpolated to faces (`n` arithmetically
/// averaged; wall faces carry no force in no-slip mode).
fn buoyancy_force(n: &ScalarField, params: &ModelParams) -> FaceFlux {
    let grid = n.grid().clone();
    let cs = grid.shape3();
    let cst = strides(cs);
    let periodic = grid.is_periodic();
    let vals = n.values();
    let mut out = FaceFlux::zeros(&grid);
    let sampled_grad = match &params.phi {
        Potential::Linear(_) => None,
        Potential::GridSampled(phi) => Some(gradient(phi)),
    };
    for axis in 0..grid.dim() {
        let fs = grid.face_shape(axis);
        let fst = strides(fs);
        let ncells = cs[axis];
        let g_const = match &params.phi {
            Potential::Linear(g) => Some(g[axis]),
            Potential::GridSampled(_) => None,
        };
        let gfield = sampled_grad.as_ref().map(|gf| gf.component(axis));
        let comp = out.component_mut(axis);
        let mut fill = |fb: usize, cb: usize| {
            let fsa = fst[axis];
            let csa = cst[axis];
            if periodic {
                for k in 0..ncells {
                    let left = vals[cb + ((k + ncells - 1) % ncells) * csa];
                    let right = vals[cb + k * csa];
                    let g = match g_const {
                        Some(gc) => gc,
                        None => gfield.unwrap()[fb + k * fsa],
                    };
                    comp[fb + k * fsa] = 0.5 * (left + right) * g;
                }
            } else {
                for k in 1..ncells {
                    let left = vals[cb + (k - 1) * csa];
                    let right = vals[cb + k * csa];
                    let g = match g_const {
                        Some(gc) => gc,
                        None => gfield.unwrap()[fb + k * fsa],
                    };
                    comp[fb + k * fsa] = 0.5 * (left + right) * g;
                }
            }
        };
        line_pairs(fs, cs, axis, &mut fill);
    }
    out
}

fn line_pairs(fs: [usize; 3], cs: [usize; 3], axis: usize, f: &mut impl FnMut(usize, usize)) {
    let fst = strides(fs);
    let cst = strides(cs);
    let (p, q) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for ip in 0..fs[p] {
        for iq in 0..fs[q] {
            f(ip * fst[p] + iq * fst[q], ip * cst[p] + iq * cst[q]);
        }
    }
}

/// Advance one step of size `compute_dt(..)`.
pub fn step(
    state: &State,
    params: &ModelParams,
    ctl: &StepControl,
    settings: &SolverSettings,
) -> Result<State> {
    let mut ctx = StepContext::new(state.grid());
    step_with(&mut ctx, state, params, ctl, settings, None)
}

/// Advance one step, reusing solver state; `dt_override` lets the driver
/// clip the step to land exactly on an output time (never larger than the
/// CFL bound).
pub fn step_with(
    ctx: &mut StepContext,
    state: &State,
    params: &ModelParams,
    ctl: &StepControl,
    settings: &SolverSettings,
    dt_override: Option<f64>,
) -> Result<State> {
    let grid = state.grid().clone();
    params.validate_for_grid(&grid)?;
    let grad_c = gradient(&state.c);
    let dt_cfl = compute_dt_with_grad(state, params, ctl, &grad_c)?;
    let dt = match dt_override {
        Some(d) => d.min(dt_cfl),
        None => dt_cfl,
    };
    crate::operators::check_divergence_free(&state.u, 1e-8)?;

    // (1) density: fully explicit conservative update.
    let pm = porous_medium_flux(&state.n, params.eps, params.m)?;
    let adv_n = advect_scalar_unchecked(&state.n, &state.u);
    let mut n_next = state.n.clone();
    {
        let mut tendency = ScalarField::zeros(&grid);
        divergence_into(&pm, &mut tendency);
        if params.chemotaxis {
            let chemo = chemotaxis_flux_with_grad(&state.n, &grad_c);
            let mut chemo_div = ScalarField::zeros(&grid);
            divergence_into(&chemo, &mut chemo_div);
            let t = tendency.values_mut();
            for (i, v) in chemo_div.values().iter().enumerate() {
                t[i] -= v;
            }
        }
        {
            let t = tendency.values_mut();
            for (i, v) in adv_n.values().iter().enumerate() {
                t[i] -= v;
            }
        }
        let nv = n_next.values_mut();
        for (i, v) in tendency.values().iter().enumerate() {
            nv[i] += dt * v;
        }
    }
    clamp_nonnegative(&mut n_next, "n")?;
    n_next.check_finite("n update")?;
    let n_max = n_next.max();
    if n_max > params.n_ceiling {
        return Err(Error::BlowUpSuspected { max_n: n_max, ceiling: params.n_ceiling });
    }

    // (2) signal: explicit transport and source, implicit diffusion + decay.
    //     ((1 + dt) I - dt lap) c = c + dt (n+ - div(u c)), solved with the
    //     zeroth-order term folded into a unit-diagonal Helmholtz system.
    let adv_c = advect_scalar_unchecked(&state.c, &state.u);
    let inv1p = 1.0 / (1.0 + dt);
    let mut rhs_c = ScalarField::zeros(&grid);
    {
        let r = rhs_c.values_mut();
        let c = state.c.values();
        let n = n_next.values();
        let a = adv_c.values();
        for i in 0..r.len() {
            r[i] = (c[i] + dt * (n[i] - a[i])) * inv1p;
        }
    }
    // Solve tightly enough that solver residual cannot masquerade as a
    // positivity violation after clamping.
    let cap_c = 5e-11 * reduce::max_abs(rhs_c.values()).max(1.0);
    let mut c_next = ctx.solver.solve_helmholtz_capped(
        &rhs_c,
        dt * inv1p,
        settings,
        Some(cap_c),
        Some(rhs_c.values()),
    )?;
    clamp_nonnegative(&mut c_next, "c")?;

    // (3) velocity: resolvent-smoothed convection, implicit viscosity,
    //     pressure projection.
    let force = buoyancy_force(&n_next, params);
    let mut rhs_u = state.u.clone();
    if params.kappa != 0.0 {
        let w = ctx.solver.yosida_resolvent(&state.u, params.eps, settings)?;
        let conv = advect_velocity(&state.u, &w);
        for axis in 0..grid.dim() {
            let r = rhs_u.component_mut(axis);
            let cv = conv.component(axis);
            let fv = force.component(axis);
            for i in 0..r.len() {
                r[i] += dt * (fv[i] - params.kappa * cv[i]);
            }
        }
    } else {
        for axis in 0..grid.dim() {
            let r = rhs_u.component_mut(axis);
            let fv = force.component(axis);
            for i in 0..r.len() {
                r[i] += dt * fv[i];
            }
        }
    }
    rhs_u.enforce_noslip();
    let mut u_star = VectorField::zeros(&grid);
    for axis in 0..grid.dim() {
        let x = ctx.solver.solve_face_component(
            axis,
            dt * params.viscosity,
            rhs_u.component(axis),
            settings,
        )?;
        u_star.component_mut(axis).copy_from_slice(&x);
    }
    u_star.enforce_noslip();
    let (u_next, p_next) =
        ctx.solver.project_divergence_free_guided(&u_star, settings, Some(&state.p))?;

    let next = State { n: n_next, c: c_next, u: u_next, p: p_next, t: state.t + dt };
    next.u.check_finite("u update")?;
    Ok(next)
}

/// Callbacks fired on a time cadence during `run`.
#[derive(Default)]
pub struct Hooks<'a> {
    pub diagnostics_every: Option<f64>,
    pub snapshot_every: Option<f64>,
    /// Receives the state and the time elapsed since the previous
    /// diagnostics callback (zero for the initial sample).
    #[allow(clippy::type_complexity)]
    pub on_diagnostics: Option<Box<dyn FnMut(&State, f64) -> Result<()> + 'a>>,
    pub on_snapshot: Option<Box<dyn FnMut(&State) -> Result<()> + 'a>>,
}

impl<'a> Hooks<'a> {
    pub fn none() -> Hooks<'a> {
        Hooks::default()
    }
}

/// Integrate from `initial` to `t_end`, firing hooks on their cadences.
/// Event times are exact multiples of each cadence, so the step is clipped
/// (never stretched) to land on them.
pub fn run(
    initial: &State,
    params: &ModelParams,
    ctl: &StepControl,
    settings: &SolverSettings,
    t_end: f64,
    hooks: &mut Hooks,
) -> Result<State> {
    ctl.validate()?;
    settings.validate()?;
    params.validate_for_grid(initial.grid())?;
    initial.validate()?;
    if !(t_end >= initial.t) {
        return Err(Error::Validation {
            key: "t_end".into(),
            constraint: format!("t_end >= initial time {}, got {t_end}", initial.t),
        });
    }

    let mut ctx = StepContext::new(initial.grid());
    let mut state = initial.clone();
    let t0 = state.t;
    let mut last_diag_t = t0;

    let fire_diag = |state: &State, hooks: &mut Hooks, last: &mut f64| -> Result<()> {
        if let Some(cb) = hooks.on_diagnostics.as_mut() {
            cb(state, state.t - *last)?;
        }
        *last = state.t;
        Ok(())
    };
    let fire_snap = |state: &State, hooks: &mut Hooks| -> Result<()> {
        if let Some(cb) = hooks.on_snapshot.as_mut() {
            cb(state)?;
        }
        Ok(())
    };

    fire_diag(&state, hooks, &mut last_diag_t)?;
    fire_snap(&state, hooks)?;
    if t_end == t0 {
        return Ok(state);
    }

    let mut k_diag: u64 = 1;
    let mut k_snap: u64 = 1;
    let mut step_index: u64 = 0;
    loop {
        let next_diag = hooks.diagnostics_every.map(|d| t0 + k_diag as f64 * d);
        let next_snap = hooks.snapshot_every.map(|d| t0 + k_snap as f64 * d);
        let mut event = t_end;
        for cand in [next_diag, next_snap].into_iter().flatten() {
            if cand < event {
                event = cand;
            }
        }
        let budget = event - state.t;
        let mut new_state = step_with(&mut ctx, &state, params, ctl, settings, Some(budget))
            .map_err(|e| Error::Step { step: step_index, time: state.t, source: Box::new(e) })?;
        step_index += 1;
        // Land exactly on the event time when the clip engaged.
        if (new_state.t - event).abs() <= 1e-9 * event.abs().max(1.0) && new_state.t >= event - 1e-9
        {
            new_state.t = event;
        }
        state = new_state;

        let mut fired_diag = false;
        if let (Some(d), Some(te)) = (hooks.diagnostics_every, next_diag) {
            let _ = d;
            if state.t >= te {
                fire_diag(&state, hooks, &mut last_diag_t)?;
                fired_diag = true;
                k_diag += 1;
            }
        }
        if let (Some(d), Some(te)) = (hooks.snapshot_every, next_snap) {
            let _ = d;
            if state.t >= te {
                fire_snap(&state, hooks)?;
                k_snap += 1;
            }
        }
        if state.t >= t_end {
            if !fired_diag {
                fire_diag(&state, hooks, &mut last_diag_t)?;
            }
            if hooks.snapshot_every.is_some() || hooks.on_snapshot.is_some() {
                // Final snapshot only when it does not duplicate a cadence hit.
                if next_snap.map(|te| (te - t_end).abs() > 1e-12).unwrap_or(true) {
                    fire_snap(&state, hooks)?;
                }
            }
            return Ok(state);
        }
    }
}
