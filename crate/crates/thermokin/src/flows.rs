//! Between-collision dynamics of both particle systems.
//!
//! The interacting flow ("A") moves every particle under
//! `F_i = E - (E.j(V)/u(V)) v_i`, a thermostat that holds the mean kinetic
//! energy `u(V) = (1/N) sum |v_i|^2` exactly constant. The independent flow
//! ("B") replaces the empirical current `j(V)` with the deterministic
//! mean-field current `j~(t)`, making every particle an independent affine
//! ODE. Both are integrated with fixed-step RK4; the A-step finishes with an
//! exact energy projection. A finite-difference diagnostic checks the
//! flow-derivative growth bound `|DPsi_t| <= exp(4 t / sqrt(u))`.

use crate::current::CurrentSolution;
use crate::error::{Error, Result};
use crate::rng::{Purpose, RandomStream};
use crate::util::{self, pairwise_fold4, Vec3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Degenerate-energy threshold: the thermostat divides by `u(V)`.
pub const DEGENERATE_U: f64 = 1e-12;

/// Largest ensemble accepted by the finite-difference Jacobian diagnostic.
pub const JACOBIAN_MAX_N: usize = 64;

/// Particle states: torus positions in `[0,1)^d` and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    n: usize,
    d: usize,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

impl Ensemble {
    pub fn new(d: usize, positions: Vec<Vec3>, velocities: Vec<Vec3>) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return Err(Error::UnsupportedDimension(format!(
                "d = {d}; supported dimensions are 1, 2, 3"
            )));
        }
        if positions.len() != velocities.len() || positions.is_empty() {
            return Err(Error::InvalidParameter(
                "ensemble needs matching, non-empty position and velocity lists".into(),
            ));
        }
        for p in &positions {
            for c in 0..d {
                if !(0.0..1.0).contains(&p[c]) {
                    return Err(Error::InvalidParameter(format!(
                        "position component {} outside the torus cell [0,1)",
                        p[c]
                    )));
                }
            }
            if p[d..].iter().any(|&c| c != 0.0) {
                return Err(Error::InvalidParameter(
                    "position has nonzero components beyond the active dimension".into(),
                ));
            }
        }
        if velocities.iter().any(|v| v[d..].iter().any(|&c| c != 0.0)) {
            return Err(Error::InvalidParameter(
                "velocity has nonzero components beyond the active dimension".into(),
            ));
        }
        Ok(Self {
            n: positions.len(),
            d,
            positions,
            velocities,
        })
    }

    /// Draw `n` particles with uniform torus positions and Maxwellian
    /// velocities of mean energy `u_tilde` (`E|v|^2 = u_tilde`). With
    /// `normalize` the velocities are rescaled so the empirical energy
    /// equals `u_tilde` exactly, which pins the thermostat invariant of the
    /// interacting process to the mean-field value.
    pub fn maxwellian(
        n: usize,
        d: usize,
        u_tilde: f64,
        stream: &RandomStream,
        normalize: bool,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("ensemble needs n >= 1".into()));
        }
        if !(u_tilde > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mean energy must be positive, got {u_tilde}"
            )));
        }
        let sigma = (u_tilde / d as f64).sqrt();
        let mut positions = Vec::with_capacity(n);
        let mut velocities = Vec::with_capacity(n);
        for i in 0..n {
            let mut pos_rng = stream.stream(Purpose::InitPosition, i as u64, 0);
            let mut vel_rng = stream.stream(Purpose::InitVelocity, i as u64, 0);
            let mut q = util::ZERO3;
            let mut v = util::ZERO3;
            for c in 0..d {
                q[c] = pos_rng.random::<f64>();
                let g: f64 = StandardNormal.sample(&mut vel_rng);
                v[c] = sigma * g;
            }
            positions.push(q);
            velocities.push(v);
        }
        let mut ens = Self::new(d, positions, velocities)?;
        if normalize {
            let u = ens.energy();
            if u <= DEGENERATE_U {
                return Err(Error::DegenerateEnergy {
                    u,
                    threshold: DEGENERATE_U,
                });
            }
            let scale = (u_tilde / u).sqrt();
            for v in &mut ens.velocities {
                *v = util::scale(v, scale);
            }
        }
        Ok(ens)
    }

    /// Draw `n` particles with uniform torus positions and velocities
    /// uniform on the speed shell `|v| = sqrt(u_tilde)` — the second
    /// built-in initial family (zero spread of `|v|^2`).
    pub fn speed_shell(n: usize, d: usize, u_tilde: f64, stream: &RandomStream) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("ensemble needs n >= 1".into()));
        }
        if !(u_tilde > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mean energy must be positive, got {u_tilde}"
            )));
        }
        let speed = u_tilde.sqrt();
        let mut positions = Vec::with_capacity(n);
        let mut velocities = Vec::with_capacity(n);
        for i in 0..n {
            let mut pos_rng = stream.stream(Purpose::InitPosition, i as u64, 0);
            let mut vel_rng = stream.stream(Purpose::InitVelocity, i as u64, 0);
            let mut q = util::ZERO3;
            for c in 0..d {
                q[c] = pos_rng.random::<f64>();
            }
            let v = match d {
                1 => {
                    let s = if vel_rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
                    [s * speed, 0.0, 0.0]
                }
                2 => {
                    let ang = 2.0 * std::f64::consts::PI * vel_rng.random::<f64>();
                    [speed * ang.cos(), speed * ang.sin(), 0.0]
                }
                _ => {
                    let c = 1.0 - 2.0 * vel_rng.random::<f64>();
                    let s = (1.0 - c * c).max(0.0).sqrt();
                    let phi = 2.0 * std::f64::consts::PI * vel_rng.random::<f64>();
                    [speed * s * phi.cos(), speed * s * phi.sin(), speed * c]
                }
            };
            positions.push(q);
            velocities.push(v);
        }
        Self::new(d, positions, velocities)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Empirical current `j(V) = (1/N) sum v_i` (fixed-order reduction).
    pub fn current(&self) -> Vec3 {
        let [jx, jy, jz, _] = moments(&self.velocities);
        let inv = 1.0 / self.n as f64;
        [jx * inv, jy * inv, jz * inv]
    }

    /// Empirical mean energy `u(V) = (1/N) sum |v_i|^2`.
    pub fn energy(&self) -> f64 {
        let [_, _, _, u] = moments(&self.velocities);
        u / self.n as f64
    }

    /// Fourth central-speed statistic `(1/N) sum (|v_i|^2 - u)^2`.
    pub fn fourth_moment(&self) -> f64 {
        self.fourth_about(self.energy())
    }

    /// Spread of `|v|^2` about an external reference energy:
    /// `(1/N) sum (|v_i|^2 - center)^2`.
    pub fn fourth_about(&self, center: f64) -> f64 {
        util::pairwise_sum_by(0, self.n, &|i| {
            let s = util::norm_sq(&self.velocities[i]) - center;
            s * s
        }) / self.n as f64
    }
}

/// One fixed-order pass over velocities: `[sum vx, sum vy, sum vz, sum |v|^2]`.
fn moments(velocities: &[Vec3]) -> [f64; 4] {
    pairwise_fold4(0, velocities.len(), &|i| {
        let v: &Vec3 = &velocities[i];
        [v[0], v[1], v[2], util::norm_sq(v)]
    })
}

/// Ensemble norm `|V|_N = sqrt((1/N) sum |v_i|^2)` of a velocity block.
pub fn ensemble_norm(velocities: &[Vec3]) -> f64 {
    let [_, _, _, s] = pairwise_fold4(0, velocities.len(), &|i| {
        let v = &velocities[i];
        [0.0, 0.0, 0.0, util::norm_sq(v)]
    });
    (s / velocities.len() as f64).sqrt()
}

/// Thermostatted forces `F_i = E - (E.j/u) v_i`. The returned field is
/// orthogonal to `V` in the ensemble inner product, which is what freezes
/// `u(V)`. Errors when `u(V)` is too small to divide by.
pub fn force_a(velocities: &[Vec3], e_field: &Vec3) -> Result<Vec<Vec3>> {
    let mut out = vec![util::ZERO3; velocities.len()];
    force_a_into(velocities, e_field, &mut out)?;
    Ok(out)
}

/// Default flow step `1e-3 sqrt(u) / max(|E|, sqrt(u))`, resolving the
/// faster of the field and thermostat timescales.
pub fn default_flow_dt(u_tilde: f64, e_mag: f64) -> f64 {
    let su = u_tilde.sqrt();
    1e-3 * su / e_mag.max(su)
}

fn wrap_unit(x: f64) -> f64 {
    let w = x - x.floor();
    // x slightly below an integer can round to 1.0 exactly.
    if w >= 1.0 { 0.0 } else { w }
}

/// Reusable stage buffers for allocation-free interacting-flow steps.
#[derive(Debug, Default)]
pub struct FlowWorkspace {
    k: Vec<Vec3>,
    stage: Vec<Vec3>,
    vacc: Vec<Vec3>,
    qacc: Vec<Vec3>,
}

impl FlowWorkspace {
    fn resize(&mut self, n: usize) {
        for buf in [&mut self.k, &mut self.stage, &mut self.vacc, &mut self.qacc] {
            buf.resize(n, util::ZERO3);
        }
    }
}

/// Thermostatted forces written into `out` (see [`force_a`]).
pub fn force_a_into(velocities: &[Vec3], e_field: &Vec3, out: &mut [Vec3]) -> Result<()> {
    let n = velocities.len();
    let [jx, jy, jz, su] = moments(velocities);
    let u = su / n as f64;
    if u <= DEGENERATE_U {
        return Err(Error::DegenerateEnergy {
            u,
            threshold: DEGENERATE_U,
        });
    }
    let lam = (e_field[0] * jx + e_field[1] * jy + e_field[2] * jz) / (n as f64 * u);
    for (o, v) in out.iter_mut().zip(velocities) {
        for c in 0..3 {
            o[c] = e_field[c] - lam * v[c];
        }
    }
    Ok(())
}

/// In-place RK4 step of the interacting flow with exact projection of the
/// velocities onto the sphere `u(V) = u_target`. Projecting to an external
/// target (rather than each step's entry energy) keeps long runs pinned to
/// the invariant with no random-walk drift.
pub fn step_a_in_place(
    ensemble: &mut Ensemble,
    e_field: &Vec3,
    dt: f64,
    u_target: f64,
    ws: &mut FlowWorkspace,
) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "step must be positive and finite, got {dt}"
        )));
    }
    let n = ensemble.len();
    let h = dt;
    ws.resize(n);

    // Stage 1.
    force_a_into(&ensemble.velocities, e_field, &mut ws.k)?;
    for i in 0..n {
        ws.vacc[i] = ws.k[i];
        ws.qacc[i] = ensemble.velocities[i];
    }
    // Stage 2: v + h/2 k1.
    for i in 0..n {
        for c in 0..3 {
            ws.stage[i][c] = ensemble.velocities[i][c] + 0.5 * h * ws.k[i][c];
            ws.qacc[i][c] += 2.0 * ws.stage[i][c];
        }
    }
    force_a_into(&ws.stage, e_field, &mut ws.k)?;
    for i in 0..n {
        for c in 0..3 {
            ws.vacc[i][c] += 2.0 * ws.k[i][c];
        }
    }
    // Stage 3: v + h/2 k2.
    for i in 0..n {
        for c in 0..3 {
            ws.stage[i][c] = ensemble.velocities[i][c] + 0.5 * h * ws.k[i][c];
            ws.qacc[i][c] += 2.0 * ws.stage[i][c];
        }
    }
    force_a_into(&ws.stage, e_field, &mut ws.k)?;
    for i in 0..n {
        for c in 0..3 {
            ws.vacc[i][c] += 2.0 * ws.k[i][c];
        }
    }
    // Stage 4: v + h k3.
    for i in 0..n {
        for c in 0..3 {
            ws.stage[i][c] = ensemble.velocities[i][c] + h * ws.k[i][c];
            ws.qacc[i][c] += ws.stage[i][c];
        }
    }
    force_a_into(&ws.stage, e_field, &mut ws.k)?;
    for i in 0..n {
        for c in 0..3 {
            ws.vacc[i][c] += ws.k[i][c];
        }
    }

    let d = ensemble.d;
    for i in 0..n {
        for c in 0..3 {
            ensemble.velocities[i][c] += h / 6.0 * ws.vacc[i][c];
            ensemble.positions[i][c] += h / 6.0 * ws.qacc[i][c];
        }
        for c in 0..d {
            ensemble.positions[i][c] = wrap_unit(ensemble.positions[i][c]);
        }
    }

    // Exact energy projection.
    let u_after = ensemble.energy();
    if u_after <= DEGENERATE_U {
        return Err(Error::DegenerateEnergy {
            u: u_after,
            threshold: DEGENERATE_U,
        });
    }
    let scale = (u_target / u_after).sqrt();
    for v in &mut ensemble.velocities {
        *v = util::scale(v, scale);
    }
    Ok(())
}

/// One RK4 step of the interacting flow followed by exact energy projection
/// to `u_target` (returning variant of [`step_a_in_place`]).
pub fn step_a_to_target(
    ensemble: &Ensemble,
    e_field: &Vec3,
    dt: f64,
    u_target: f64,
) -> Result<Ensemble> {
    let mut out = ensemble.clone();
    let mut ws = FlowWorkspace::default();
    step_a_in_place(&mut out, e_field, dt, u_target, &mut ws)?;
    Ok(out)
}

/// One step of the interacting flow, projected to the energy at step entry.
pub fn step_a(ensemble: &Ensemble, e_field: &Vec3, dt: f64) -> Result<Ensemble> {
    step_a_to_target(ensemble, e_field, dt, ensemble.energy())
}

/// In-place RK4 step of the independent flow on `[t, t+dt]`: every particle
/// obeys `dv/dt = E - (E.j~(s)/u~) v` with the deterministic current queried
/// from `current`. No projection — this flow does not conserve the empirical
/// energy. Errors if the step leaves the solved current horizon.
///
/// The stage/accumulator arithmetic mirrors [`step_a_in_place`] term for
/// term, so that when both forces vanish (zero field) the two flows produce
/// bit-identical states from identical inputs.
pub fn step_b_in_place(
    ensemble: &mut Ensemble,
    e_field: &Vec3,
    current: &CurrentSolution,
    t: f64,
    dt: f64,
) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "step must be positive and finite, got {dt}"
        )));
    }
    let h = dt;
    let lam1 = current.drive(t)?;
    let lam2 = current.drive(t + 0.5 * h)?;
    let lam4 = current.drive(t + h)?;

    let n = ensemble.len();
    let d = ensemble.d;
    for i in 0..n {
        let v = ensemble.velocities[i];
        let mut vn = util::ZERO3;
        let mut qn = ensemble.positions[i];
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
            vn[c] = v[c] + h / 6.0 * vacc;
            qn[c] += h / 6.0 * qacc;
        }
        for c in 0..d {
            qn[c] = wrap_unit(qn[c]);
        }
        ensemble.velocities[i] = vn;
        ensemble.positions[i] = qn;
    }
    Ok(())
}

/// Returning variant of [`step_b_in_place`].
pub fn step_b(
    ensemble: &Ensemble,
    e_field: &Vec3,
    current: &CurrentSolution,
    t: f64,
    dt: f64,
) -> Result<Ensemble> {
    let mut out = ensemble.clone();
    step_b_in_place(&mut out, e_field, current, t, dt)?;
    Ok(out)
}

/// Diagnostics of one interacting-flow segment.
#[derive(Debug, Clone, Copy)]
pub struct FlowDiagnostics {
    /// `|u(V_t) - u(V_0)|` over the diagnostic run.
    pub u_drift: f64,
    /// Growth bound `exp(4 t / sqrt(u(V)))`.
    pub lyapunov_cap: f64,
    /// Finite-difference operator-norm estimate of the flow derivative in
    /// the ensemble norm.
    pub jacobian_estimate: f64,
}

/// Estimate the operator norm of the flow derivative `DPsi_t` by central
/// finite differences over all `2 N d` phase-space coordinates, and report
/// it against the growth bound `exp(4 t / sqrt(u))`. Cost is quadratic in
/// `N d`, so the ensemble is capped at [`JACOBIAN_MAX_N`] particles.
pub fn lyapunov_check(ensemble: &Ensemble, e_field: &Vec3, t: f64) -> Result<FlowDiagnostics> {
    let n = ensemble.len();
    let d = ensemble.dim();
    if n > JACOBIAN_MAX_N {
        return Err(Error::ResourceLimit(format!(
            "finite-difference flow derivative is O((Nd)^2); N = {n} exceeds the cap {JACOBIAN_MAX_N}"
        )));
    }
    if t < 0.0 {
        return Err(Error::InvalidParameter("diagnostic time must be >= 0".into()));
    }
    let u0 = ensemble.energy();
    let cap = (4.0 * t / u0.sqrt()).exp();
    if t == 0.0 {
        return Ok(FlowDiagnostics {
            u_drift: 0.0,
            lyapunov_cap: cap,
            jacobian_estimate: 1.0,
        });
    }

    let dim = 2 * n * d;
    let steps = (t / 5e-3).ceil().max(1.0) as usize;
    let dt = t / steps as f64;

    // Flow map as a function of the packed phase-space vector. Positions are
    // deliberately NOT wrapped here: the derivative needs the lift to R^d,
    // and the dynamics itself is position-independent.
    let flow = |x: &[f64]| -> Result<Vec<f64>> {
        let mut ens = ensemble.clone();
        unpack(x, &mut ens, d);
        let target = ens.energy();
        let mut t_acc = 0.0;
        let mut lifted: Vec<Vec3> = ens.positions.clone();
        for _ in 0..steps {
            let before = ens.positions.clone();
            ens = step_a_to_target(&ens, e_field, dt, target)?;
            for i in 0..ens.len() {
                for c in 0..d {
                    let mut delta = ens.positions[i][c] - before[i][c];
                    // Undo the torus wrap to keep the lift continuous.
                    if delta > 0.5 {
                        delta -= 1.0;
                    } else if delta < -0.5 {
                        delta += 1.0;
                    }
                    lifted[i][c] += delta;
                }
            }
            t_acc += dt;
        }
        let _ = t_acc;
        let mut out = vec![0.0; dim];
        pack_into(&lifted, &ens.velocities, d, &mut out);
        Ok(out)
    };

    let mut x0 = vec![0.0; dim];
    pack_into(&ensemble.positions, &ensemble.velocities, d, &mut x0);

    // Central differences, one phase-space column at a time.
    let h = 1e-6 * (1.0 + u0.sqrt());
    let mut jac = vec![vec![0.0; dim]; dim];
    for col in 0..dim {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[col] += h;
        xm[col] -= h;
        let fp = flow(&xp)?;
        let fm = flow(&xm)?;
        for (row, j_row) in jac.iter_mut().enumerate() {
            j_row[col] = (fp[row] - fm[row]) / (2.0 * h);
        }
    }

    // Operator 2-norm via power iteration on J^T J; the ensemble norm is a
    // uniform scaling of the Euclidean norm, so operator norms coincide.
    let mut vec_ = vec![0.0; dim];
    for (i, v) in vec_.iter_mut().enumerate() {
        *v = ((i * 2654435761 + 12345) as f64).sin();
    }
    let mut est = 0.0;
    for _ in 0..120 {
        // w = J v, z = J^T w
        let w: Vec<f64> = jac
            .iter()
            .map(|row| row.iter().zip(&vec_).map(|(a, b)| a * b).sum())
            .collect();
        let mut z = vec![0.0; dim];
        for (r, wr) in w.iter().enumerate() {
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += jac[r][c] * wr;
            }
        }
        let nz = z.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nz == 0.0 {
            break;
        }
        for (v, zv) in vec_.iter_mut().zip(&z) {
            *v = zv / nz;
        }
        est = nz.sqrt();
    }

    // Energy drift over the diagnostic horizon from the unperturbed run.
    let end = flow(&x0)?;
    let mut vels = vec![util::ZERO3; n];
    for (i, vel) in vels.iter_mut().enumerate() {
        for c in 0..d {
            vel[c] = end[(n + i) * d + c];
        }
    }
    let u_end = vels.iter().map(util::norm_sq).sum::<f64>() / n as f64;

    Ok(FlowDiagnostics {
        u_drift: (u_end - u0).abs(),
        lyapunov_cap: cap,
        jacobian_estimate: est,
    })
}

fn pack_into(positions: &[Vec3], velocities: &[Vec3], d: usize, out: &mut [f64]) {
    let n = positions.len();
    for i in 0..n {
        for c in 0..d {
            out[i * d + c] = positions[i][c];
            out[(n + i) * d + c] = velocities[i][c];
        }
    }
}

fn unpack(x: &[f64], ens: &mut Ensemble, d: usize) {
    let n = ens.len();
    for i in 0..n {
        for c in 0..d {
            // Positions re-enter the torus cell; the dynamics ignores them.
            ens.positions[i][c] = wrap_unit(x[i * d + c]);
            ens.velocities[i][c] = x[(n + i) * d + c];
        }
    }
}
