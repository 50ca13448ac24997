//! Event-driven paths: the interacting process, the independent process,
//! and the coupled pair riding one shared collision history.
//!
//! A history is a merged unit-rate-per-particle Poisson schedule with the
//! angular randomness of every event pre-drawn at creation. Both processes
//! consume the same events: the interacting side reflects the struck
//! particle in a kernel-sampled normal, the independent side receives the
//! likelihood-preserving matched outcome. Records track the ensemble
//! distance, the per-collision isometry residual, and the energy floor of
//! the independent path.

use crate::current::CurrentSolution;
use crate::error::{Error, Result};
use crate::flows::{self, Ensemble, FlowWorkspace};
use crate::kernel::{self, Kernel, UnitVector};
use crate::rng::{Purpose, RandomStream};
use crate::util::{self, Vec3};
use rand::Rng;
use rand_distr::{Distribution, Exp};

/// One scheduled collision: time, struck particle, and the two uniform
/// variates that fix the scattering direction (ignored in d = 1).
#[derive(Debug, Clone, Copy)]
pub struct CollisionEvent {
    pub t: f64,
    pub particle: usize,
    pub u_theta: f64,
    pub u_omega: f64,
}

/// Ordered collision schedule on `[0, horizon)` for `n` particles.
#[derive(Debug, Clone)]
pub struct CollisionHistory {
    n: usize,
    horizon: f64,
    events: Vec<CollisionEvent>,
}

impl CollisionHistory {
    pub fn particle_count(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn events(&self) -> &[CollisionEvent] {
        &self.events
    }
}

/// Draw a collision history: a merged Poisson process of total rate `n`
/// (unit rate per particle), uniform particle indices, and pre-drawn
/// angular variates per event keyed by the event counter.
pub fn sample_history(n: usize, horizon: f64, stream: &RandomStream) -> Result<CollisionHistory> {
    if n == 0 {
        return Err(Error::InvalidParameter("history needs n >= 1".into()));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "horizon must be finite and >= 0, got {horizon}"
        )));
    }
    let mut schedule = stream.stream(Purpose::EventSchedule, 0, 0);
    let gap_law = Exp::new(n as f64)
        .map_err(|e| Error::InvalidParameter(format!("exponential rate: {e}")))?;
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut counter: u64 = 0;
    loop {
        let mut gap: f64 = gap_law.sample(&mut schedule);
        while gap <= 0.0 {
            gap = gap_law.sample(&mut schedule);
        }
        t += gap;
        if t >= horizon {
            break;
        }
        let particle = schedule.random_range(0..n);
        let mut angles = stream.stream(Purpose::EventAngles, 0, counter);
        let u_theta: f64 = angles.random();
        let u_omega: f64 = angles.random();
        events.push(CollisionEvent {
            t,
            particle,
            u_theta,
            u_omega,
        });
        counter += 1;
    }
    Ok(CollisionHistory { n, horizon, events })
}

/// Run controls shared by the path simulators.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Spacing of the observable sample grid (must be positive).
    pub sample_dt: f64,
    /// Flow substep cap; `None` picks the default for the parameter scales
    /// (and exact whole-segment streaming when all forces vanish).
    pub flow_dt: Option<f64>,
    /// Keep a full ensemble snapshot at every sample time (memory heavy);
    /// otherwise only the initial and final states are retained.
    pub store_states: bool,
}

impl RunOptions {
    pub fn new(sample_dt: f64) -> Self {
        Self {
            sample_dt,
            flow_dt: None,
            store_states: false,
        }
    }

    pub fn with_flow_dt(mut self, dt: f64) -> Self {
        self.flow_dt = Some(dt);
        self
    }

    pub fn with_states(mut self) -> Self {
        self.store_states = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.sample_dt > 0.0) || !self.sample_dt.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sample spacing must be positive and finite, got {}",
                self.sample_dt
            )));
        }
        if let Some(dt) = self.flow_dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "flow substep must be positive and finite, got {dt}"
                )));
            }
        }
        Ok(())
    }

    fn resolve_flow_dt(&self, u_ref: f64, e_mag: f64) -> f64 {
        match self.flow_dt {
            Some(dt) => dt,
            // All forces vanish without a field: the flows are exact free
            // streaming and a segment needs no substepping.
            None if e_mag == 0.0 => f64::INFINITY,
            None => flows::default_flow_dt(u_ref, e_mag),
        }
    }
}

/// Ensemble observables at one sample time.
#[derive(Debug, Clone, Copy)]
pub struct PathSample {
    pub t: f64,
    /// Empirical current `j(V)`.
    pub j: Vec3,
    /// Empirical mean energy `u(V)`.
    pub u: f64,
    /// Spread of `|v|^2` about the run's reference energy.
    pub a4: f64,
}

fn observe(ens: &Ensemble, t: f64, a_center: f64) -> PathSample {
    PathSample {
        t,
        j: ens.current(),
        u: ens.energy(),
        a4: ens.fourth_about(a_center),
    }
}

/// A finished single-process path.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<PathSample>,
    /// Stored states: always the initial and final ensembles, plus every
    /// sample time when requested.
    pub states: Vec<(f64, Ensemble)>,
    pub horizon: f64,
    /// Smallest monitored `sqrt(u)` along the path.
    pub energy_min: f64,
    pub events_applied: usize,
}

impl Trajectory {
    /// Single-particle phase points `(q, v)` at the stored time nearest `t`.
    pub fn marginal_samples(&self, t: f64) -> Result<Vec<(Vec3, Vec3)>> {
        if self.states.is_empty() {
            return Err(Error::InsufficientData("trajectory holds no states".into()));
        }
        if t < -1e-9 || t > self.horizon + 1e-9 {
            return Err(Error::OutOfRange(format!(
                "requested time {t} outside the simulated range [0, {}]",
                self.horizon
            )));
        }
        let (_, best) = self
            .states
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - t).abs();
                let db = (b.0 - t).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        Ok(best
            .positions
            .iter()
            .zip(&best.velocities)
            .map(|(q, v)| (*q, *v))
            .collect())
    }
}

use crate::util::sample_grid;

fn check_setup(kernel: &Kernel, v0: &Ensemble, history: &CollisionHistory) -> Result<()> {
    if kernel.dim() != v0.dim() {
        return Err(Error::ParameterMismatch(format!(
            "kernel dimension {} vs ensemble dimension {}",
            kernel.dim(),
            v0.dim()
        )));
    }
    if history.particle_count() != v0.len() {
        return Err(Error::ParameterMismatch(format!(
            "history built for {} particles but ensemble has {}",
            history.particle_count(),
            v0.len()
        )));
    }
    Ok(())
}

/// Outcome of a reflection at one event: velocities before/after. `None`
/// when the struck particle is at rest and no direction can be formed.
fn collide(
    kernel: &Kernel,
    v: &Vec3,
    ev: &CollisionEvent,
    d: usize,
) -> Result<Option<(UnitVector, Vec3)>> {
    if d == 1 {
        // Deterministic sign flip; no direction is consumed.
        if v[0] == 0.0 {
            return Ok(None);
        }
        let v_hat = UnitVector::new(v, 1)?;
        return Ok(Some((v_hat, [-v[0], 0.0, 0.0])));
    }
    let speed = util::norm(v);
    if speed < 1e-300 {
        return Ok(None);
    }
    let v_hat = UnitVector::new(v, d)?;
    let n_hat = kernel.direction_from_variates(&v_hat, ev.u_theta, ev.u_omega)?;
    Ok(Some((v_hat, kernel::reflect(v, &n_hat))))
}

/// Free-stream positions by `span` (velocities untouched); the exact flow
/// when every force vanishes.
fn free_stream(ens: &mut Ensemble, span: f64) {
    let d = ens.dim();
    for i in 0..ens.len() {
        for c in 0..d {
            let q = ens.positions[i][c] + span * ens.velocities[i][c];
            ens.positions[i][c] = q - q.floor();
            if ens.positions[i][c] >= 1.0 {
                ens.positions[i][c] = 0.0;
            }
        }
    }
}

enum FlowMode<'a> {
    A { u_target: f64 },
    B { current: &'a CurrentSolution },
}

/// Advance one ensemble from `t0` to `t1` with substeps capped at `flow_dt`,
/// tracking the smallest sqrt(energy) seen at substep boundaries.
fn flow_segment(
    ens: &mut Ensemble,
    e_field: &Vec3,
    mode: &FlowMode,
    t0: f64,
    t1: f64,
    flow_dt: f64,
    ws: &mut FlowWorkspace,
    energy_min: &mut f64,
) -> Result<()> {
    let span = t1 - t0;
    if span <= 0.0 {
        return Ok(());
    }
    let zero_forces = util::norm(e_field) == 0.0
        && match mode {
            FlowMode::A { .. } => true,
            FlowMode::B { current } => current.params().e_mag() == 0.0,
        };
    if zero_forces {
        free_stream(ens, span);
        return Ok(());
    }
    let nsub = if flow_dt.is_finite() {
        (span / flow_dt).ceil().max(1.0) as usize
    } else {
        1
    };
    let h = span / nsub as f64;
    for k in 0..nsub {
        match mode {
            FlowMode::A { u_target } => flows::step_a_in_place(ens, e_field, h, *u_target, ws)?,
            FlowMode::B { current } => {
                let s0 = t0 + k as f64 * h;
                flows::step_b_in_place(ens, e_field, current, s0, h)?
            }
        }
        let su = ens.energy().sqrt();
        if su < *energy_min {
            *energy_min = su;
        }
    }
    Ok(())
}

/// Simulate the interacting process along `history`: thermostatted flow
/// between events, kernel-sampled reflections at events. The empirical
/// energy is pinned to `u(V0)` along the whole path.
pub fn run_a(
    kernel: &Kernel,
    v0: &Ensemble,
    history: &CollisionHistory,
    e_field: &Vec3,
    opts: &RunOptions,
) -> Result<Trajectory> {
    check_setup(kernel, v0, history)?;
    opts.validate()?;
    let d = v0.dim();
    let u_target = v0.energy();
    if u_target <= flows::DEGENERATE_U {
        return Err(Error::DegenerateEnergy {
            u: u_target,
            threshold: flows::DEGENERATE_U,
        });
    }
    let e_mag = util::norm(e_field);
    let flow_dt = opts.resolve_flow_dt(u_target, e_mag);
    let horizon = history.horizon();
    let grid = sample_grid(horizon, opts.sample_dt);

    let mut ens = v0.clone();
    let mut ws = FlowWorkspace::default();
    let mut samples = Vec::with_capacity(grid.len());
    let mut states = Vec::new();
    let mut energy_min = u_target.sqrt();
    let mut events_applied = 0usize;

    samples.push(observe(&ens, 0.0, u_target));
    states.push((0.0, ens.clone()));

    let mode = FlowMode::A { u_target };
    let mut t = 0.0;
    let mut ev_idx = 0usize;
    let mut grid_idx = 1usize;
    while grid_idx < grid.len() {
        let t_sample = grid[grid_idx];
        let (t_target, is_event) = match history.events.get(ev_idx) {
            Some(ev) if ev.t < t_sample => (ev.t, true),
            _ => (t_sample, false),
        };
        flow_segment(
            &mut ens, e_field, &mode, t, t_target, flow_dt, &mut ws, &mut energy_min,
        )?;
        t = t_target;
        if is_event {
            let ev = &history.events[ev_idx];
            if let Some((_, v_post)) = collide(kernel, &ens.velocities[ev.particle], ev, d)? {
                ens.velocities[ev.particle] = v_post;
                events_applied += 1;
            }
            ev_idx += 1;
        } else {
            samples.push(observe(&ens, t, u_target));
            if opts.store_states && grid_idx + 1 < grid.len() {
                states.push((t, ens.clone()));
            }
            grid_idx += 1;
        }
    }
    states.push((horizon, ens));
    Ok(Trajectory {
        samples,
        states,
        horizon,
        energy_min,
        events_applied,
    })
}

/// Simulate the independent process along `history`: mean-field flow between
/// events (driven by the solved current), kernel-sampled reflections at the
/// events of each particle. Particles never interact, so each one is walked
/// through its own event/sample timeline in a single pass.
pub fn run_b(
    kernel: &Kernel,
    v0: &Ensemble,
    history: &CollisionHistory,
    e_field: &Vec3,
    current: &CurrentSolution,
    opts: &RunOptions,
) -> Result<Trajectory> {
    check_setup(kernel, v0, history)?;
    opts.validate()?;
    let d = v0.dim();
    let n = v0.len();
    let horizon = history.horizon();
    if current.t_end() < horizon - 1e-9 {
        return Err(Error::OutOfRange(format!(
            "current solved to t = {} but the history runs to {horizon}",
            current.t_end()
        )));
    }
    let u_tilde = current.params().u_tilde();
    let e_mag = util::norm(e_field);
    let flow_dt = opts.resolve_flow_dt(u_tilde, e_mag);
    let grid = sample_grid(horizon, opts.sample_dt);
    let n_samples = grid.len();

    // Bucket events by particle; indices stay time-ordered.
    let mut per_particle: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (k, ev) in history.events.iter().enumerate() {
        per_particle[ev.particle].push(k as u32);
    }

    // Per-sample accumulators, filled particle-by-particle in index order.
    let mut jsum = vec![util::ZERO3; n_samples];
    let mut usum = vec![0.0f64; n_samples];
    let mut asum = vec![0.0f64; n_samples];
    let mut stored: Vec<Ensemble> = if opts.store_states {
        grid.iter().map(|_| v0.clone()).collect()
    } else {
        vec![v0.clone()]
    };
    let mut events_applied = 0usize;

    let zero_forces = e_mag == 0.0 && current.params().e_mag() == 0.0;
    for i in 0..n {
        let mut q = v0.positions[i];
        let mut v = v0.velocities[i];
        let mut t = 0.0;
        let mut ev_pos = 0usize;
        let mut grid_idx = 0usize;
        loop {
            // Record samples due at the present time.
            while grid_idx < n_samples && grid[grid_idx] <= t {
                for c in 0..3 {
                    jsum[grid_idx][c] += v[c];
                }
                let vv = util::norm_sq(&v);
                usum[grid_idx] += vv;
                let dev = vv - u_tilde;
                asum[grid_idx] += dev * dev;
                if opts.store_states {
                    stored[grid_idx].positions[i] = q;
                    stored[grid_idx].velocities[i] = v;
                }
                grid_idx += 1;
            }
            if grid_idx >= n_samples && ev_pos >= per_particle[i].len() {
                break;
            }
            let t_sample = if grid_idx < n_samples {
                grid[grid_idx]
            } else {
                f64::INFINITY
            };
            let next_event = per_particle[i]
                .get(ev_pos)
                .map(|&k| history.events[k as usize].t)
                .unwrap_or(f64::INFINITY);
            let (t_target, is_event) = if next_event < t_sample {
                (next_event, true)
            } else {
                (t_sample, false)
            };
            // Advance this particle to the target.
            let span = t_target - t;
            if span > 0.0 {
                if zero_forces {
                    for c in 0..d {
                        let qq = q[c] + span * v[c];
                        q[c] = qq - qq.floor();
                        if q[c] >= 1.0 {
                            q[c] = 0.0;
                        }
                    }
                } else {
                    let nsub = if flow_dt.is_finite() {
                        (span / flow_dt).ceil().max(1.0) as usize
                    } else {
                        1
                    };
                    let h = span / nsub as f64;
                    for k in 0..nsub {
                        let s0 = t + k as f64 * h;
                        step_particle_b(&mut q, &mut v, e_field, current, s0, h, d)?;
                    }
                }
            }
            t = t_target;
            if is_event {
                let ev = &history.events[per_particle[i][ev_pos] as usize];
                if let Some((_, v_post)) = collide(kernel, &v, ev, d)? {
                    v = v_post;
                    events_applied += 1;
                }
                ev_pos += 1;
            }
        }
        if !opts.store_states {
            stored[0].positions[i] = q;
            stored[0].velocities[i] = v;
        }
    }

    let inv = 1.0 / n as f64;
    let samples: Vec<PathSample> = grid
        .iter()
        .enumerate()
        .map(|(k, &t)| PathSample {
            t,
            j: util::scale(&jsum[k], inv),
            u: usum[k] * inv,
            a4: asum[k] * inv,
        })
        .collect();
    let energy_min = samples
        .iter()
        .map(|s| s.u.sqrt())
        .fold(f64::INFINITY, f64::min);

    let states: Vec<(f64, Ensemble)> = if opts.store_states {
        grid.iter().copied().zip(stored).collect()
    } else {
        vec![(0.0, v0.clone()), (horizon, stored.pop().unwrap())]
    };
    Ok(Trajectory {
        samples,
        states,
        horizon,
        energy_min,
        events_applied,
    })
}

/// One RK4 step of a single independent particle (same stage arithmetic as
/// the ensemble stepper).
fn step_particle_b(
    q: &mut Vec3,
    v: &mut Vec3,
    e_field: &Vec3,
    current: &CurrentSolution,
    t: f64,
    h: f64,
    d: usize,
) -> Result<()> {
    let lam1 = current.drive(t)?;
    let lam2 = current.drive(t + 0.5 * h)?;
    let lam4 = current.drive(t + h)?;
    for c in 0..3 {
        let k1 = e_field[c] - lam1 * v[c];
        let mut vacc = k1;
        let mut qacc = v[c];
        let s2 = v[c] + 0.5 * h * k1;
        qacc += 2.0 * s2;
        let k2 = e_field[c] - lam2 * s2;
        vacc += 2.0 * k2;
        let s3 = v[c] + 0.5 * h * k2;
        qacc += 2.0 * s3;
        let k3 = e_field[c] - lam2 * s3;
        vacc += 2.0 * k3;
        let s4 = v[c] + h * k3;
        qacc += s4;
        let k4 = e_field[c] - lam4 * s4;
        vacc += k4;
        v[c] += h / 6.0 * vacc;
        q[c] += h / 6.0 * qacc;
    }
    for c in 0..d {
        let qq = q[c] - q[c].floor();
        q[c] = if qq >= 1.0 { 0.0 } else { qq };
    }
    Ok(())
}

/// Record of one coupled run: both processes on the same history.
#[derive(Debug, Clone)]
pub struct CouplingRecord {
    pub sample_times: Vec<f64>,
    /// Ensemble velocity distance `|V - V~|_N` per sample time.
    pub distance: Vec<f64>,
    /// Per-collision `|pre-distance - post-distance|`; structurally zero.
    pub iso_residuals: Vec<f64>,
    pub max_iso_residual: f64,
    /// Smallest monitored `sqrt(u(V~))` along the independent path.
    pub b_energy_min: f64,
    /// Whether the independent path dipped to the energy floor
    /// `sqrt(u~) / (2 sqrt(2))`.
    pub energy_floor_hit: bool,
    /// Observables of the interacting / independent ensembles per sample.
    pub a_samples: Vec<PathSample>,
    pub b_samples: Vec<PathSample>,
    /// Velocities of the tagged particle pair (0, 1) per sample time, for
    /// factorization diagnostics. Empty when N < 2.
    pub pair_a: Vec<[Vec3; 2]>,
    pub pair_b: Vec<[Vec3; 2]>,
    pub final_a: Ensemble,
    pub final_b: Ensemble,
    pub events_applied: usize,
}

fn distance_sq_sum(a: &Ensemble, b: &Ensemble) -> f64 {
    util::pairwise_sum_by(0, a.len(), &|i| {
        let d = util::sub(&a.velocities[i], &b.velocities[i]);
        util::norm_sq(&d)
    })
}

/// Evolve the interacting and independent processes side by side from the
/// same initial state on the same history. At each event the interacting
/// particle collides first; the independent partner receives the matched
/// outcome, which preserves the pairwise distance exactly. Velocities,
/// distances, and residuals are recorded on the sample grid.
pub fn run_coupled(
    kernel: &Kernel,
    v0: &Ensemble,
    history: &CollisionHistory,
    e_field: &Vec3,
    current: &CurrentSolution,
    opts: &RunOptions,
) -> Result<CouplingRecord> {
    check_setup(kernel, v0, history)?;
    opts.validate()?;
    let d = v0.dim();
    let n = v0.len();
    let horizon = history.horizon();
    if current.t_end() < horizon - 1e-9 {
        return Err(Error::OutOfRange(format!(
            "current solved to t = {} but the history runs to {horizon}",
            current.t_end()
        )));
    }
    let u_target = v0.energy();
    if u_target <= flows::DEGENERATE_U {
        return Err(Error::DegenerateEnergy {
            u: u_target,
            threshold: flows::DEGENERATE_U,
        });
    }
    let u_tilde = current.params().u_tilde();
    let e_mag = util::norm(e_field);
    let flow_dt = opts.resolve_flow_dt(u_target.max(u_tilde), e_mag);
    let grid = sample_grid(horizon, opts.sample_dt);

    let mut va = v0.clone();
    let mut vb = v0.clone();
    let mut ws = FlowWorkspace::default();
    let mode_a = FlowMode::A { u_target };
    let mode_b = FlowMode::B { current };

    let inv_n = 1.0 / n as f64;
    let mut sample_times = Vec::with_capacity(grid.len());
    let mut distance = Vec::with_capacity(grid.len());
    let mut a_samples = Vec::with_capacity(grid.len());
    let mut b_samples = Vec::with_capacity(grid.len());
    let mut pair_a = Vec::new();
    let mut pair_b = Vec::new();
    let mut iso_residuals = Vec::with_capacity(history.events.len());
    let mut b_energy_min = vb.energy().sqrt();
    let mut sink = f64::INFINITY; // interacting side's energy is pinned
    let mut events_applied = 0usize;

    let record_sample = |t: f64,
                             va: &Ensemble,
                             vb: &Ensemble,
                             sample_times: &mut Vec<f64>,
                             distance: &mut Vec<f64>,
                             a_samples: &mut Vec<PathSample>,
                             b_samples: &mut Vec<PathSample>,
                             pair_a: &mut Vec<[Vec3; 2]>,
                             pair_b: &mut Vec<[Vec3; 2]>| {
        sample_times.push(t);
        distance.push((distance_sq_sum(va, vb) * inv_n).sqrt());
        a_samples.push(observe(va, t, u_tilde));
        b_samples.push(observe(vb, t, u_tilde));
        if n >= 2 {
            pair_a.push([va.velocities[0], va.velocities[1]]);
            pair_b.push([vb.velocities[0], vb.velocities[1]]);
        }
    };

    record_sample(
        0.0,
        &va,
        &vb,
        &mut sample_times,
        &mut distance,
        &mut a_samples,
        &mut b_samples,
        &mut pair_a,
        &mut pair_b,
    );

    let mut t = 0.0;
    let mut ev_idx = 0usize;
    let mut grid_idx = 1usize;
    while grid_idx < grid.len() {
        let t_sample = grid[grid_idx];
        let (t_target, is_event) = match history.events.get(ev_idx) {
            Some(ev) if ev.t < t_sample => (ev.t, true),
            _ => (t_sample, false),
        };
        flow_segment(&mut va, e_field, &mode_a, t, t_target, flow_dt, &mut ws, &mut sink)?;
        flow_segment(
            &mut vb,
            e_field,
            &mode_b,
            t,
            t_target,
            flow_dt,
            &mut ws,
            &mut b_energy_min,
        )?;
        t = t_target;
        if is_event {
            let ev = &history.events[ev_idx];
            let i = ev.particle;
            let s_pre = distance_sq_sum(&va, &vb);
            let pre = (s_pre * inv_n).sqrt();
            let term_pre = {
                let diff = util::sub(&va.velocities[i], &vb.velocities[i]);
                util::norm_sq(&diff)
            };
            if let Some((v_hat, v_post)) = collide(kernel, &va.velocities[i], ev, d)? {
                let w = vb.velocities[i];
                let w_post = if w == va.velocities[i] {
                    // Identical partners undergo the identical collision —
                    // exact by the matching rules, and kept bit-exact here.
                    v_post
                } else {
                    let w_speed = util::norm(&w);
                    if w_speed < 1e-300 {
                        w
                    } else {
                        let w_hat = UnitVector::new(&w, d)?;
                        let v_post_hat = UnitVector::new(&v_post, d)?;
                        let w_post_hat = kernel::match_collision(&v_hat, &v_post_hat, &w_hat)?;
                        util::scale(w_post_hat.components(), w_speed)
                    }
                };
                va.velocities[i] = v_post;
                vb.velocities[i] = w_post;
                events_applied += 1;

                let term_post = {
                    let diff = util::sub(&va.velocities[i], &vb.velocities[i]);
                    util::norm_sq(&diff)
                };
                let s_post = (s_pre - term_pre + term_post).max(0.0);
                let post = (s_post * inv_n).sqrt();
                iso_residuals.push((pre - post).abs());
            } else {
                iso_residuals.push(0.0);
            }
            ev_idx += 1;
        } else {
            record_sample(
                t,
                &va,
                &vb,
                &mut sample_times,
                &mut distance,
                &mut a_samples,
                &mut b_samples,
                &mut pair_a,
                &mut pair_b,
            );
            grid_idx += 1;
        }
    }

    let max_iso_residual = iso_residuals.iter().copied().fold(0.0f64, f64::max);
    let floor = u_tilde.sqrt() / (2.0 * 2.0f64.sqrt());
    Ok(CouplingRecord {
        sample_times,
        distance,
        iso_residuals,
        max_iso_residual,
        b_energy_min,
        energy_floor_hit: b_energy_min <= floor,
        a_samples,
        b_samples,
        pair_a,
        pair_b,
        final_a: va,
        final_b: vb,
        events_applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::current::{solve_current, CurrentParams};
    use approx::assert_abs_diff_eq;

    fn uniform_kernel(d: usize) -> Kernel {
        Kernel::uniform(d).unwrap()
    }

    #[test]
    fn history_event_count_matches_the_poisson_mean() {
        let h = sample_history(1, 1e4, &RandomStream::new(41)).unwrap();
        let count = h.events().len() as f64;
        assert!(
            (count - 1e4).abs() < 4.0 * 100.0,
            "count {count} too far from the rate-1 mean 1e4"
        );
    }

    #[test]
    fn history_indices_are_uniform() {
        let n = 1000;
        let h = sample_history(n, 40.0, &RandomStream::new(42)).unwrap();
        let total = h.events().len() as f64;
        assert!((total / n as f64 - 40.0).abs() < 4.0 * (40.0 / n as f64).sqrt() * 4.0);
        // chi^2 over 50 bins of 20 particle indices each.
        let mut counts = [0f64; 50];
        for ev in h.events() {
            counts[ev.particle / 20] += 1.0;
        }
        let expect = total / 50.0;
        let chi2: f64 = counts.iter().map(|c| (c - expect) * (c - expect) / expect).sum();
        // df = 49: the 99th percentile is 74.9.
        assert!(chi2 < 85.0, "index chi^2 = {chi2}");
    }

    #[test]
    fn history_edge_cases() {
        assert!(sample_history(1, 0.0, &RandomStream::new(1)).unwrap().events().is_empty());
        let h = sample_history(7, 3.0, &RandomStream::new(43)).unwrap();
        let evs = h.events();
        for w in evs.windows(2) {
            assert!(w[1].t > w[0].t, "event times must strictly increase");
        }
        for ev in evs {
            assert!(ev.particle < 7);
            assert!((0.0..1.0).contains(&ev.u_theta));
            assert!((0.0..1.0).contains(&ev.u_omega));
        }
    }

    #[test]
    fn empty_history_reduces_to_the_pure_flow() {
        let v0 = Ensemble::maxwellian(32, 2, 1.0, &RandomStream::new(44), true).unwrap();
        let h = CollisionHistory {
            n: 32,
            horizon: 1.0,
            events: Vec::new(),
        };
        let traj = run_a(
            &uniform_kernel(2),
            &v0,
            &h,
            &[1.0, 0.0, 0.0],
            &RunOptions::new(0.25),
        )
        .unwrap();
        assert_eq!(traj.events_applied, 0);
        for s in &traj.samples {
            assert!(((s.u - 1.0) / 1.0).abs() < 1e-12, "u drifted to {}", s.u);
        }
    }

    #[test]
    fn single_particle_flip_dynamics() {
        // d = 1, no field: v(t) = +-1 switching exactly at the event times.
        let v0 = Ensemble::new(1, vec![[0.5, 0.0, 0.0]], vec![[1.0, 0.0, 0.0]]).unwrap();
        let h = sample_history(1, 5.0, &RandomStream::new(45)).unwrap();
        let traj = run_a(
            &uniform_kernel(1),
            &v0,
            &h,
            &util::ZERO3,
            &RunOptions::new(0.01).with_states(),
        )
        .unwrap();
        assert!(!h.events().is_empty());
        for (t, state) in &traj.states {
            let flips = h.events().iter().filter(|ev| ev.t <= *t).count();
            let expect = if flips % 2 == 0 { 1.0 } else { -1.0 };
            assert_eq!(state.velocities[0][0], expect, "wrong sign at t = {t}");
        }
    }

    #[test]
    fn zero_field_interacting_run_preserves_speeds_and_mixes_angles() {
        let n = 500;
        let v0 = Ensemble::maxwellian(n, 2, 1.0, &RandomStream::new(46), true).unwrap();
        let h = sample_history(n, 3.0, &RandomStream::new(47)).unwrap();
        let traj = run_a(
            &uniform_kernel(2),
            &v0,
            &h,
            &util::ZERO3,
            &RunOptions::new(1.0),
        )
        .unwrap();
        let final_state = &traj.states.last().unwrap().1;
        for i in 0..n {
            let s0 = util::norm(&v0.velocities[i]);
            let s1 = util::norm(&final_state.velocities[i]);
            assert!(((s1 - s0) / s0).abs() < 1e-12, "speed changed for particle {i}");
        }
        // Angles should be close to uniform after ~3 collisions/particle.
        let mut angles: Vec<f64> = final_state
            .velocities
            .iter()
            .map(|v| v[1].atan2(v[0]))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, &a) in angles.iter().enumerate() {
            let u = (a + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
            ks = ks
                .max((u - i as f64 / n as f64).abs())
                .max((u - (i + 1) as f64 / n as f64).abs());
        }
        assert!(ks < 0.1, "angular KS distance {ks} too large");
    }

    #[test]
    fn independent_ensemble_mean_tracks_the_solved_current() {
        let n = 5000;
        let (u, e) = (1.0, 0.5);
        let params = CurrentParams::new(2, &[e, 0.0], u, 1.0).unwrap();
        let sol = solve_current(&params, &[0.0, 0.0], 1.0, 1e-3).unwrap();
        let v0 = Ensemble::maxwellian(n, 2, u, &RandomStream::new(48), true).unwrap();
        let h = sample_history(n, 1.0, &RandomStream::new(49)).unwrap();
        let traj = run_b(
            &uniform_kernel(2),
            &v0,
            &h,
            &[e, 0.0, 0.0],
            &sol,
            &RunOptions::new(0.25),
        )
        .unwrap();
        let tol = 3.0 * (u / n as f64).sqrt();
        for s in &traj.samples {
            let j = sol.j_at(s.t).unwrap();
            for c in 0..2 {
                assert!(
                    (s.j[c] - j[c]).abs() < tol,
                    "mean velocity off the current at t = {}: {} vs {}",
                    s.t,
                    s.j[c],
                    j[c]
                );
            }
        }
    }

    #[test]
    fn zero_field_coupling_is_exactly_degenerate() {
        let n = 64;
        let params = CurrentParams::new(2, &[0.0, 0.0], 1.0, 1.0).unwrap();
        let sol = solve_current(&params, &[0.0, 0.0], 2.0, 1e-2).unwrap();
        let v0 = Ensemble::maxwellian(n, 2, 1.0, &RandomStream::new(50), true).unwrap();
        let h = sample_history(n, 2.0, &RandomStream::new(51)).unwrap();
        let rec = run_coupled(
            &uniform_kernel(2),
            &v0,
            &h,
            &util::ZERO3,
            &sol,
            &RunOptions::new(0.25),
        )
        .unwrap();
        assert!(rec.events_applied > 0);
        for &dist in &rec.distance {
            assert_eq!(dist, 0.0, "zero-field coupled paths must stay identical");
        }
        for &r in &rec.iso_residuals {
            assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn coupled_run_keeps_collisions_isometric() {
        for d in [1usize, 2, 3] {
            let n = 128;
            let u = 1.0;
            let mut e = util::ZERO3;
            e[0] = 0.4;
            let kernel = uniform_kernel(d);
            let rho = kernel.current_damping_rate().unwrap();
            let params = CurrentParams::new(d, &e[..d], u, rho).unwrap();
            let sol = solve_current(&params, &vec![0.0; d], 2.0, 1e-3).unwrap();
            let v0 = Ensemble::maxwellian(n, d, u, &RandomStream::new(52), true).unwrap();
            let h = sample_history(n, 2.0, &RandomStream::new(53 + d as u64)).unwrap();
            let rec = run_coupled(&kernel, &v0, &h, &e, &sol, &RunOptions::new(0.5)).unwrap();
            assert!(rec.events_applied > 100);
            assert!(
                rec.max_iso_residual < 1e-9 * u.sqrt(),
                "d = {d}: max residual {}",
                rec.max_iso_residual
            );
            assert_eq!(rec.distance[0], 0.0, "identical starts must begin at distance 0");
            // Interacting-side energy stays pinned through collisions.
            for s in &rec.a_samples {
                assert!(((s.u - u) / u).abs() < 1e-12);
            }
            // The distance must actually become positive once fields act.
            assert!(*rec.distance.last().unwrap() > 0.0);
        }
    }

    #[test]
    fn coupled_records_are_deterministic() {
        let n = 64;
        let params = CurrentParams::new(2, &[0.5, 0.0], 1.0, 1.0).unwrap();
        let sol = solve_current(&params, &[0.0, 0.0], 1.0, 1e-3).unwrap();
        let v0 = Ensemble::maxwellian(n, 2, 1.0, &RandomStream::new(54), true).unwrap();
        let h = sample_history(n, 1.0, &RandomStream::new(55)).unwrap();
        let opts = RunOptions::new(0.25);
        let kernel = uniform_kernel(2);
        let r1 = run_coupled(&kernel, &v0, &h, &[0.5, 0.0, 0.0], &sol, &opts).unwrap();
        let r2 = run_coupled(&kernel, &v0, &h, &[0.5, 0.0, 0.0], &sol, &opts).unwrap();
        assert_eq!(r1.distance, r2.distance);
        assert_eq!(r1.iso_residuals, r2.iso_residuals);
        assert_eq!(r1.final_a.velocities, r2.final_a.velocities);
        assert_eq!(r1.final_b.velocities, r2.final_b.velocities);
    }

    #[test]
    fn marginal_samples_round_trip() {
        let v0 = Ensemble::maxwellian(3, 2, 1.0, &RandomStream::new(56), true).unwrap();
        let h = sample_history(3, 1.0, &RandomStream::new(57)).unwrap();
        let traj = run_a(
            &uniform_kernel(2),
            &v0,
            &h,
            &[1.0, 0.0, 0.0],
            &RunOptions::new(0.5),
        )
        .unwrap();
        let at0 = traj.marginal_samples(0.0).unwrap();
        assert_eq!(at0.len(), 3);
        for (i, (q, v)) in at0.iter().enumerate() {
            assert_eq!(q, &v0.positions[i]);
            assert_eq!(v, &v0.velocities[i]);
        }
        assert!(traj.marginal_samples(5.0).is_err());
    }

    #[test]
    fn speed_shell_initialization_has_zero_energy_spread() {
        for d in [1usize, 2, 3] {
            let ens = Ensemble::speed_shell(256, d, 1.7, &RandomStream::new(58)).unwrap();
            for v in &ens.velocities {
                assert_abs_diff_eq!(util::norm_sq(v), 1.7, epsilon = 1e-12);
            }
            assert!(ens.fourth_about(1.7) < 1e-24);
        }
    }

    #[test]
    fn mismatched_setups_are_rejected() {
        let v0 = Ensemble::maxwellian(8, 2, 1.0, &RandomStream::new(59), true).unwrap();
        let h = sample_history(9, 1.0, &RandomStream::new(60)).unwrap();
        assert!(matches!(
            run_a(&uniform_kernel(2), &v0, &h, &util::ZERO3, &RunOptions::new(0.5)),
            Err(Error::ParameterMismatch(_))
        ));
        let h2 = sample_history(8, 1.0, &RandomStream::new(61)).unwrap();
        assert!(matches!(
            run_a(&uniform_kernel(3), &v0, &h2, &util::ZERO3, &RunOptions::new(0.5)),
            Err(Error::ParameterMismatch(_))
        ));
        // Current horizon shorter than the history horizon.
        let params = CurrentParams::new(2, &[0.5, 0.0], 1.0, 1.0).unwrap();
        let short = solve_current(&params, &[0.0, 0.0], 0.5, 1e-2).unwrap();
        assert!(matches!(
            run_b(
                &uniform_kernel(2),
                &v0,
                &h2,
                &[0.5, 0.0, 0.0],
                &short,
                &RunOptions::new(0.5)
            ),
            Err(Error::OutOfRange(_))
        ));
    }
}
