//! Deterministic finite-volume solver for the one-dimensional homogeneous
//! kinetic equation
//!
//! ```text
//! d/dt f(v,t) = -d/dv [ Y(v,t) f(v,t) ] + f(-v,t) - f(v,t),
//! Y(v,t) = E - (E j~(t) / u~) v,
//! ```
//!
//! the density-level description of the independent process in one
//! dimension. Strang splitting isolates transport as the only source of
//! discretization error: the flip collision operator leaves the even part
//! of `f` fixed and damps the odd part at rate 2, which is applied in
//! closed form; transport uses a slope-limited second-order upwind flux.
//! The solver serves as an independent cross-check for both the solved
//! mean current and the particle marginals.

use crate::current::CurrentSolution;
use crate::error::{Error, Result};
use crate::util::{self, pairwise_sum, pairwise_sum_by};

/// Largest admissible advective CFL number for one step.
pub const CFL_LIMIT: f64 = 0.9;
/// Default target CFL used when the driver picks the step size.
pub const CFL_TARGET: f64 = 0.45;
/// Mass allowed to leave through the open boundary in a single step.
pub const OUTFLOW_LIMIT: f64 = 1e-10;

/// Cell-averaged density on a symmetric velocity grid `[-v_max, v_max]`.
///
/// The cell count is even so that the flip `v -> -v` maps cell `m` to cell
/// `M - 1 - m` exactly.
#[derive(Debug, Clone)]
pub struct VelocityGrid {
    v_max: f64,
    dv: f64,
    f: Vec<f64>,
}

/// Moments of a grid density: mass, mean velocity, mean square velocity,
/// and the spread of `v^2` about the measured mean square.
#[derive(Debug, Clone, Copy)]
pub struct Moments {
    pub mass: f64,
    pub j: f64,
    pub u: f64,
    pub a: f64,
}

impl VelocityGrid {
    /// Wrap explicit nonnegative cell averages.
    pub fn new(v_max: f64, f: Vec<f64>) -> Result<Self> {
        if !(v_max > 0.0) || !v_max.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "velocity cutoff must be positive and finite, got {v_max}"
            )));
        }
        let m = f.len();
        if m < 4 || m % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "cell count must be even and at least 4, got {m}"
            )));
        }
        for (i, &x) in f.iter().enumerate() {
            if !x.is_finite() || x < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "cell {i} holds an invalid density value {x}"
                )));
            }
        }
        let dv = 2.0 * v_max / m as f64;
        Ok(Self { v_max, dv, f })
    }

    /// Build cell averages of a pointwise density by per-cell quadrature.
    /// Tiny negative lobes (beyond roundoff) are rejected; roundoff-scale
    /// ones are clipped to zero.
    pub fn from_fn(v_max: f64, m: usize, density: &dyn Fn(f64) -> f64) -> Result<Self> {
        if !(v_max > 0.0) || !v_max.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "velocity cutoff must be positive and finite, got {v_max}"
            )));
        }
        if m < 4 || m % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "cell count must be even and at least 4, got {m}"
            )));
        }
        let dv = 2.0 * v_max / m as f64;
        let mut f = Vec::with_capacity(m);
        for i in 0..m {
            let a = -v_max + i as f64 * dv;
            let avg = util::gauss16(density, a, a + dv) / dv;
            if !avg.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "density is not finite on cell {i}"
                )));
            }
            f.push(avg);
        }
        let peak = f.iter().cloned().fold(0.0f64, f64::max);
        for (i, x) in f.iter_mut().enumerate() {
            if *x < 0.0 {
                if *x < -1e-13 * peak.max(1e-300) {
                    return Err(Error::InvalidParameter(format!(
                        "density is negative on cell {i}: {x}"
                    )));
                }
                *x = 0.0;
            }
        }
        Ok(Self { v_max, dv, f })
    }

    /// Centered Gaussian with mean square `u_tilde`, normalized to unit
    /// mass on the grid.
    pub fn maxwellian(v_max: f64, m: usize, u_tilde: f64) -> Result<Self> {
        if !(u_tilde > 0.0) || !u_tilde.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "reference energy must be positive, got {u_tilde}"
            )));
        }
        let norm = 1.0 / (2.0 * std::f64::consts::PI * u_tilde).sqrt();
        let mut grid = Self::from_fn(v_max, m, &|v| norm * (-v * v / (2.0 * u_tilde)).exp())?;
        grid.normalize();
        Ok(grid)
    }

    /// Rescale to unit mass.
    pub fn normalize(&mut self) {
        let mass = self.mass();
        if mass > 0.0 {
            let s = 1.0 / mass;
            for x in &mut self.f {
                *x *= s;
            }
        }
    }

    pub fn cell_count(&self) -> usize {
        self.f.len()
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn dv(&self) -> f64 {
        self.dv
    }

    /// Center of cell `i`.
    pub fn center(&self, i: usize) -> f64 {
        -self.v_max + (i as f64 + 0.5) * self.dv
    }

    pub fn values(&self) -> &[f64] {
        &self.f
    }

    pub fn mass(&self) -> f64 {
        pairwise_sum(&self.f) * self.dv
    }

    pub fn current(&self) -> f64 {
        pairwise_sum_by(0, self.f.len(), &|i| self.f[i] * self.center(i)) * self.dv
    }

    /// Moments computed exactly for the piecewise-constant density: each
    /// cell contributes its closed-form polynomial moment, so a uniform
    /// density reproduces its analytic moments to roundoff.
    pub fn moments(&self) -> Moments {
        let m = self.f.len();
        let dv2 = self.dv * self.dv;
        let mass = self.mass();
        let j = self.current();
        let u = pairwise_sum_by(0, m, &|i| {
            let c = self.center(i);
            self.f[i] * (c * c + dv2 / 12.0)
        }) * self.dv;
        let a = pairwise_sum_by(0, m, &|i| {
            let c = self.center(i);
            let c2 = c * c;
            let m2 = c2 + dv2 / 12.0;
            let m4 = c2 * c2 + 0.5 * c2 * dv2 + dv2 * dv2 / 80.0;
            self.f[i] * (m4 - 2.0 * u * m2 + u * u)
        }) * self.dv;
        Moments { mass, j, u, a }
    }
}

/// Solver state: the grid density, the time, and its current moments.
#[derive(Debug, Clone)]
pub struct VbeState {
    pub grid: VelocityGrid,
    pub t: f64,
    pub moments: Moments,
}

impl VbeState {
    pub fn new(grid: VelocityGrid) -> Self {
        let moments = grid.moments();
        Self {
            grid,
            t: 0.0,
            moments,
        }
    }
}

fn minmod(a: f64, b: f64) -> f64 {
    if a > 0.0 && b > 0.0 {
        a.min(b)
    } else if a < 0.0 && b < 0.0 {
        a.max(b)
    } else {
        0.0
    }
}

/// Exact half-step of the flip collision operator over a full-step span
/// `dt`: even part fixed, odd part multiplied by `exp(-dt)` (rate 2 over
/// the half span `dt / 2`).
fn collision_half(f: &mut [f64], kappa: f64) {
    let m = f.len();
    for i in 0..m / 2 {
        let jm = m - 1 - i;
        let even = 0.5 * (f[i] + f[jm]);
        let odd = 0.5 * (f[i] - f[jm]);
        f[i] = even + kappa * odd;
        f[jm] = even - kappa * odd;
    }
}

/// One slope-limited upwind evaluation of `-d/dv (a f)` with open
/// boundaries. Returns the instantaneous outflow rate through the cutoffs.
fn flux_divergence(f: &[f64], e: f64, lam: f64, v_max: f64, dv: f64, out: &mut [f64]) -> f64 {
    let m = f.len();
    let cell = |i: isize| -> f64 {
        if i < 0 || i >= m as isize {
            0.0
        } else {
            f[i as usize]
        }
    };
    let slope = |i: isize| -> f64 {
        if i < 0 || i >= m as isize {
            0.0
        } else {
            minmod(cell(i) - cell(i - 1), cell(i + 1) - cell(i))
        }
    };
    let mut outflow = 0.0;
    let mut flux_left = 0.0;
    for j in 0..=m {
        let x = -v_max + j as f64 * dv;
        let a = e - lam * x;
        let flux = if a >= 0.0 {
            a * (cell(j as isize - 1) + 0.5 * slope(j as isize - 1))
        } else {
            a * (cell(j as isize) - 0.5 * slope(j as isize))
        };
        if j == 0 {
            outflow += (-flux).max(0.0);
        } else {
            out[j - 1] = -(flux - flux_left) / dv;
            if j == m {
                outflow += flux.max(0.0);
            }
        }
        flux_left = flux;
    }
    outflow
}

fn clip_negative(f: &mut [f64]) {
    let peak = f.iter().cloned().fold(0.0f64, f64::max);
    let floor = -1e-13 * peak.max(1e-300);
    for x in f.iter_mut() {
        if *x < 0.0 {
            debug_assert!(*x > floor, "limited transport produced {x}");
            *x = 0.0;
        }
    }
}

fn check_drive_compat(e: f64, current: &CurrentSolution) -> Result<()> {
    let p = current.params();
    if p.dim() != 1 {
        return Err(Error::ParameterMismatch(format!(
            "the grid solver is one-dimensional but the current was solved in d = {}",
            p.dim()
        )));
    }
    if (p.e_field()[0] - e).abs() > 1e-12 * (1.0 + e.abs()) {
        return Err(Error::ParameterMismatch(format!(
            "field {} differs from the current solve's field {}",
            e,
            p.e_field()[0]
        )));
    }
    // The one-dimensional flip damps the mean at rate 2; a drive solved
    // with any other damping describes a different evolution.
    if (p.rho_k() - 2.0).abs() > 1e-9 {
        return Err(Error::ParameterMismatch(format!(
            "current solved with damping {} but the flip dynamics damps at 2",
            p.rho_k()
        )));
    }
    Ok(())
}

/// Advance one Strang-split step: exact collision half-step, one
/// second-order total-variation-diminishing transport step of
/// `d/dv (Y(v,t) f)`, exact collision half-step.
pub fn step_vbe(state: &VbeState, e: f64, dt: f64, current: &CurrentSolution) -> Result<VbeState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "step size must be positive and finite, got {dt}"
        )));
    }
    check_drive_compat(e, current)?;
    let t = state.t;
    let grid = &state.grid;
    let (v_max, dv, m) = (grid.v_max, grid.dv, grid.f.len());
    let lam1 = current.drive(t)?;
    let lam2 = current.drive(t + dt)?;
    let amax = [lam1, lam2]
        .iter()
        .map(|&l| (e - l * v_max).abs().max((e + l * v_max).abs()))
        .fold(0.0f64, f64::max);
    let cfl = amax * dt / dv;
    if cfl > CFL_LIMIT * (1.0 + 1e-9) {
        return Err(Error::SolverConstraint(format!(
            "advective CFL number {cfl:.3} exceeds the limit {CFL_LIMIT}"
        )));
    }

    let mut f = grid.f.clone();
    let kappa = (-dt).exp();
    collision_half(&mut f, kappa);

    // Heun / SSP-RK2 transport with the drive sampled at both endpoints.
    let mass_before = pairwise_sum(&f) * dv;
    let mut l1 = vec![0.0; m];
    let mut l2 = vec![0.0; m];
    flux_divergence(&f, e, lam1, v_max, dv, &mut l1);
    let mut f1: Vec<f64> = (0..m).map(|i| f[i] + dt * l1[i]).collect();
    clip_negative(&mut f1);
    flux_divergence(&f1, e, lam2, v_max, dv, &mut l2);
    for i in 0..m {
        f[i] = 0.5 * (f[i] + f1[i] + dt * l2[i]);
    }
    clip_negative(&mut f);
    let outflow = mass_before - pairwise_sum(&f) * dv;
    if outflow > OUTFLOW_LIMIT {
        return Err(Error::GridTooSmall {
            flux: outflow,
            limit: OUTFLOW_LIMIT,
        });
    }

    collision_half(&mut f, kappa);
    let grid = VelocityGrid {
        v_max,
        dv,
        f,
    };
    let moments = grid.moments();
    Ok(VbeState {
        grid,
        t: t + dt,
        moments,
    })
}

/// Driver controls for a grid solve.
#[derive(Debug, Clone)]
pub struct VbeOptions {
    /// Target advective CFL number used to pick the step (must stay within
    /// the step limit).
    pub cfl: f64,
    /// Observable sample spacing.
    pub sample_dt: f64,
    /// Keep full density snapshots at sample times.
    pub store_snapshots: bool,
}

impl VbeOptions {
    pub fn new(sample_dt: f64) -> Self {
        Self {
            cfl: CFL_TARGET,
            sample_dt,
            store_snapshots: false,
        }
    }
}

/// A finished grid solve: moment time series and the final state.
#[derive(Debug, Clone)]
pub struct VbeRun {
    pub times: Vec<f64>,
    pub masses: Vec<f64>,
    pub currents: Vec<f64>,
    pub energies: Vec<f64>,
    pub fourths: Vec<f64>,
    /// Total mass lost through the open boundary.
    pub outflow_total: f64,
    pub snapshots: Vec<(f64, Vec<f64>)>,
    pub final_state: VbeState,
    pub e: f64,
}

/// Integrate from `state0` to `t_end`, stepping at the target CFL number
/// and landing exactly on every sample time.
pub fn solve_vbe(
    state0: &VbeState,
    e: f64,
    current: &CurrentSolution,
    t_end: f64,
    opts: &VbeOptions,
) -> Result<VbeRun> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "final time must be positive and finite, got {t_end}"
        )));
    }
    if !(opts.sample_dt > 0.0) || !(opts.cfl > 0.0) || opts.cfl > CFL_LIMIT {
        return Err(Error::InvalidParameter(format!(
            "need sample spacing > 0 and CFL target in (0, {CFL_LIMIT}], got {} and {}",
            opts.sample_dt, opts.cfl
        )));
    }
    check_drive_compat(e, current)?;
    if current.t_end() < t_end - 1e-9 {
        return Err(Error::OutOfRange(format!(
            "current solved to t = {} but the grid solve runs to {t_end}",
            current.t_end()
        )));
    }
    let u_tilde = current.params().u_tilde();
    // |j~| <= sqrt(u~) bounds the drive, hence the worst face speed.
    let amax = e.abs() * (1.0 + state0.grid.v_max / u_tilde.sqrt());
    let dt_base = if amax > 0.0 {
        opts.cfl * state0.grid.dv / amax
    } else {
        opts.sample_dt
    };

    let grid_times = util::sample_grid(t_end, opts.sample_dt);
    let mut state = state0.clone();
    let mut run = VbeRun {
        times: Vec::with_capacity(grid_times.len()),
        masses: Vec::new(),
        currents: Vec::new(),
        energies: Vec::new(),
        fourths: Vec::new(),
        outflow_total: 0.0,
        snapshots: Vec::new(),
        final_state: state0.clone(),
        e,
    };
    let record = |run: &mut VbeRun, state: &VbeState| {
        run.times.push(state.t);
        run.masses.push(state.moments.mass);
        run.currents.push(state.moments.j);
        run.energies.push(state.moments.u);
        run.fourths.push(state.moments.a);
        if opts.store_snapshots {
            run.snapshots.push((state.t, state.grid.f.clone()));
        }
    };
    record(&mut run, &state);
    for w in grid_times.windows(2) {
        let span = w[1] - w[0];
        let nsub = (span / dt_base).ceil().max(1.0) as usize;
        let h = span / nsub as f64;
        for _ in 0..nsub {
            let mass_before = state.moments.mass;
            state = step_vbe(&state, e, h, current)?;
            run.outflow_total += mass_before - state.moments.mass;
        }
        record(&mut run, &state);
    }
    run.final_state = state;
    Ok(run)
}

/// Largest deviation between the grid solve's current and the
/// autonomously solved current over the run's sample times.
pub fn compare_current(run: &VbeRun, ode: &CurrentSolution) -> Result<f64> {
    check_drive_compat(run.e, ode)?;
    let u_run = run.energies.first().copied().ok_or_else(|| {
        Error::InsufficientData("the grid run recorded no samples".into())
    })?;
    let u_ode = ode.params().u_tilde();
    if (u_run - u_ode).abs() > 1e-3 * u_ode {
        return Err(Error::ParameterMismatch(format!(
            "grid mean energy {u_run} differs from the current solve's {u_ode}"
        )));
    }
    let mut worst = 0.0f64;
    for (k, &t) in run.times.iter().enumerate() {
        let j = ode.j_at(t)?[0];
        worst = worst.max((run.currents[k] - j).abs());
    }
    Ok(worst)
}
