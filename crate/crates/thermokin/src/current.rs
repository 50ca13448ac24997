//! Mean-field current: the autonomous ODE
//! `dj/dt = E - (E.j / u) j - rho j`, its rest points, a fixed-step RK4
//! solver with dense output, and an a-posteriori residual audit.
//!
//! The solution drives the independent-particle process and the 1-D kinetic
//! solver; both query `j(t)` at arbitrary times inside the solved horizon.

use crate::error::{Error, Result};
use crate::util::{self, Vec3};

/// Parameters of the current equation.
#[derive(Debug, Clone, Copy)]
pub struct CurrentParams {
    d: usize,
    e: Vec3,
    u_tilde: f64,
    rho_k: f64,
}

impl CurrentParams {
    pub fn new(d: usize, e_field: &[f64], u_tilde: f64, rho_k: f64) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return Err(Error::UnsupportedDimension(format!(
                "d = {d}; supported dimensions are 1, 2, 3"
            )));
        }
        if !(u_tilde > 0.0) || !u_tilde.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "mean energy must be positive and finite, got {u_tilde}"
            )));
        }
        if !(rho_k >= 0.0) || !rho_k.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "collision rate constant must be non-negative, got {rho_k}"
            )));
        }
        Ok(Self {
            d,
            e: util::load(e_field, d)?,
            u_tilde,
            rho_k,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn e_field(&self) -> &Vec3 {
        &self.e
    }

    pub fn e_mag(&self) -> f64 {
        util::norm(&self.e)
    }

    pub fn u_tilde(&self) -> f64 {
        self.u_tilde
    }

    pub fn rho_k(&self) -> f64 {
        self.rho_k
    }

    /// Step size resolving both relaxation scales of the equation:
    /// `1e-3 * min(sqrt(u)/|E|, 1/max(rho, 1))`.
    pub fn default_dt(&self) -> f64 {
        let field_scale = if self.e_mag() > 0.0 {
            self.u_tilde.sqrt() / self.e_mag()
        } else {
            f64::INFINITY
        };
        1e-3 * field_scale.min(1.0 / self.rho_k.max(1.0))
    }

    /// Right-hand side `E - (E.j/u) j - rho j`.
    fn rhs(&self, j: &Vec3) -> Vec3 {
        let lam = util::dot(&self.e, j) / self.u_tilde + self.rho_k;
        [
            self.e[0] - lam * j[0],
            self.e[1] - lam * j[1],
            self.e[2] - lam * j[2],
        ]
    }
}

/// Rest points `(y_minus, y_plus)` of the parallel component:
/// `y = (u / 2|E|) (-rho +- sqrt(4|E|^2/u + rho^2))`. The dynamics converge
/// to `y_plus` from every admissible start; `y_minus < -sqrt(u)` is outside
/// the physical ball. Errors when `|E| = 0`, where the equation degenerates
/// to pure exponential decay and has no parallel axis.
pub fn fixed_points(params: &CurrentParams) -> Result<(f64, f64)> {
    let e = params.e_mag();
    if e == 0.0 {
        return Err(Error::ZeroField(
            "rest points are undefined for |E| = 0; the zero-field current is j0 exp(-rho t)"
                .into(),
        ));
    }
    let u = params.u_tilde;
    let rho = params.rho_k;
    let disc = (4.0 * e * e / u + rho * rho).sqrt();
    let y_plus = u / (2.0 * e) * (-rho + disc);
    let y_minus = u / (2.0 * e) * (-rho - disc);
    Ok((y_minus, y_plus))
}

/// Dense solution of the current equation on `[0, t_end]`.
#[derive(Debug, Clone)]
pub struct CurrentSolution {
    params: CurrentParams,
    times: Vec<f64>,
    j: Vec<Vec3>,
    /// RHS evaluated at each node; slopes for cubic Hermite dense output.
    dj: Vec<Vec3>,
    /// Parallel component y = j . E / |E| per node (zero field: |j|sign data
    /// unavailable, stores the first component).
    y: Vec<f64>,
    fixed: Option<(f64, f64)>,
    zero_field: bool,
    j0: Vec3,
}

/// Integrate the current equation from `j0` to `t_end` with fixed-step RK4
/// (step `dt`, last step adjusted to land on `t_end` exactly). Zero field
/// short-circuits to the exact solution `j0 exp(-rho t)`. `|j0| > sqrt(u)`
/// is physically inadmissible (the mean speed would exceed the energy bound).
pub fn solve_current(
    params: &CurrentParams,
    j0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<CurrentSolution> {
    let j0 = util::load(j0, params.d)?;
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "horizon must be positive and finite, got {t_end}"
        )));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "step must be positive and finite, got {dt}"
        )));
    }
    let cap = params.u_tilde.sqrt();
    if util::norm(&j0) > cap * (1.0 + 1e-12) {
        return Err(Error::Inadmissible(format!(
            "initial current magnitude {} exceeds sqrt(u) = {cap}",
            util::norm(&j0)
        )));
    }

    let n = ((t_end / dt - 1e-9).ceil().max(1.0)) as usize;
    let h = t_end / n as f64;
    let mut times = Vec::with_capacity(n + 1);
    let mut j_series = Vec::with_capacity(n + 1);

    let zero_field = params.e_mag() == 0.0;
    if zero_field {
        for i in 0..=n {
            let t = i as f64 * h;
            times.push(t);
            let decay = (-params.rho_k * t).exp();
            j_series.push(util::scale(&j0, decay));
        }
    } else {
        let mut j = j0;
        times.push(0.0);
        j_series.push(j);
        for i in 0..n {
            let k1 = params.rhs(&j);
            let k2 = params.rhs(&axpy(&j, 0.5 * h, &k1));
            let k3 = params.rhs(&axpy(&j, 0.5 * h, &k2));
            let k4 = params.rhs(&axpy(&j, h, &k3));
            for c in 0..3 {
                j[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
            }
            times.push((i + 1) as f64 * h);
            j_series.push(j);
        }
    }

    CurrentSolution::assemble(*params, times, j_series, j0, zero_field)
}

fn axpy(x: &Vec3, a: f64, y: &Vec3) -> Vec3 {
    [x[0] + a * y[0], x[1] + a * y[1], x[2] + a * y[2]]
}

impl CurrentSolution {
    fn assemble(
        params: CurrentParams,
        times: Vec<f64>,
        j: Vec<Vec3>,
        j0: Vec3,
        zero_field: bool,
    ) -> Result<Self> {
        let e = params.e_mag();
        let e_hat = if zero_field {
            [1.0, 0.0, 0.0]
        } else {
            util::scale(&params.e, 1.0 / e)
        };
        let y = j.iter().map(|ji| util::dot(ji, &e_hat)).collect();
        let dj = j.iter().map(|ji| params.rhs(ji)).collect();
        let fixed = if zero_field {
            None
        } else {
            Some(fixed_points(&params)?)
        };
        Ok(Self {
            params,
            times,
            j,
            dj,
            y,
            fixed,
            zero_field,
            j0,
        })
    }

    /// Rebuild a solution record from a raw time/current series (diagnostic
    /// ingest; nodal slopes are re-derived from the equation itself).
    pub fn from_series(params: &CurrentParams, times: Vec<f64>, j: Vec<Vec3>) -> Result<Self> {
        if times.len() != j.len() || times.len() < 2 {
            return Err(Error::InsufficientData(
                "series needs at least two matching time/current entries".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "series times must be strictly increasing".into(),
            ));
        }
        let j0 = j[0];
        CurrentSolution::assemble(*params, times, j, j0, params.e_mag() == 0.0)
    }

    pub fn params(&self) -> &CurrentParams {
        &self.params
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn j_series(&self) -> &[Vec3] {
        &self.j
    }

    pub fn y_series(&self) -> &[f64] {
        &self.y
    }

    /// Rest points `(y_minus, y_plus)`; `None` for the zero-field branch.
    pub fn fixed(&self) -> Option<(f64, f64)> {
        self.fixed
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// `|y(t_end) - y_plus|`; `None` for the zero-field branch.
    pub fn terminal_gap(&self) -> Option<f64> {
        self.fixed
            .map(|(_, y_plus)| (self.y.last().unwrap() - y_plus).abs())
    }

    /// Current vector at any `t` inside the horizon (cubic Hermite between
    /// nodes, exact exponential for zero field).
    pub fn j_at(&self, t: f64) -> Result<Vec3> {
        let t0 = self.times[0];
        let t1 = self.t_end();
        if t < t0 - 1e-9 || t > t1 + 1e-9 {
            return Err(Error::OutOfRange(format!(
                "query time {t} outside the solved horizon [{t0}, {t1}]"
            )));
        }
        let t = t.clamp(t0, t1);
        if self.zero_field {
            return Ok(util::scale(&self.j0, (-self.params.rho_k * t).exp()));
        }
        // Locate the segment (uniform grids hit directly, general grids by
        // binary search).
        let n = self.times.len() - 1;
        let mut i = ((t - t0) / (t1 - t0) * n as f64) as usize;
        i = i.min(n - 1);
        while t < self.times[i] {
            i -= 1;
        }
        while t > self.times[i + 1] {
            i += 1;
        }
        let h = self.times[i + 1] - self.times[i];
        let s = (t - self.times[i]) / h;
        let (h00, h10, h01, h11) = hermite_basis(s);
        let mut out = util::ZERO3;
        for c in 0..3 {
            out[c] = h00 * self.j[i][c]
                + h10 * h * self.dj[i][c]
                + h01 * self.j[i + 1][c]
                + h11 * h * self.dj[i + 1][c];
        }
        Ok(out)
    }

    /// Parallel component `j(t) . E / |E|` (first component for zero field).
    pub fn y_at(&self, t: f64) -> Result<f64> {
        let j = self.j_at(t)?;
        if self.zero_field {
            return Ok(j[0]);
        }
        Ok(util::dot(&j, &self.params.e) / self.params.e_mag())
    }

    /// The scalar drive `E . j(t) / u` multiplying `-v` in the mean-field
    /// force `E - (E.j/u) v`.
    pub fn drive(&self, t: f64) -> Result<f64> {
        Ok(util::dot(&self.j_at(t)?, &self.params.e) / self.params.u_tilde)
    }
}

fn hermite_basis(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (
        2.0 * s3 - 3.0 * s2 + 1.0,
        s3 - 2.0 * s2 + s,
        -2.0 * s3 + 3.0 * s2,
        s3 - s2,
    )
}

/// Max over interior nodes of |centered-difference dj/dt - RHS|; an
/// a-posteriori audit that the stored series actually solves the equation.
pub fn current_residual(solution: &CurrentSolution, params: &CurrentParams) -> Result<f64> {
    let times = &solution.times;
    if times.len() < 3 {
        return Err(Error::InsufficientData(
            "residual audit needs at least three time points".into(),
        ));
    }
    let mut worst: f64 = 0.0;
    for i in 1..times.len() - 1 {
        let dt2 = times[i + 1] - times[i - 1];
        let rhs = params.rhs(&solution.j[i]);
        let mut r2 = 0.0;
        for c in 0..3 {
            let fd = (solution.j[i + 1][c] - solution.j[i - 1][c]) / dt2;
            r2 += (fd - rhs[c]) * (fd - rhs[c]);
        }
        worst = worst.max(r2.sqrt());
    }
    Ok(worst)
}
