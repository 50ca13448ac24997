//! Chaos quantification: empirical measures, certified Lipschitz test
//! functions, two-particle factorization gaps with bootstrap error bars,
//! one-dimensional and sliced Wasserstein-1 distances, and audits of the
//! moment/energy bounds that underpin the coupling estimates.

use crate::error::{Error, Result};
use crate::processes::CouplingRecord;
use crate::rng::{Purpose, RandomStream};
use crate::util::{self, pairwise_sum_by, Vec3};
use crate::vbe1d::VelocityGrid;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

/// One phase point `(q, v)`.
pub type PhasePoint = (Vec3, Vec3);

/// Number of bootstrap resamples used for gap error bars.
pub const BOOTSTRAP_RESAMPLES: usize = 400;

/// Equal-weight empirical measure over phase points.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    d: usize,
    atoms: Vec<PhasePoint>,
}

impl EmpiricalMeasure {
    pub fn new(d: usize, atoms: Vec<PhasePoint>) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return Err(Error::UnsupportedDimension(format!(
                "d = {d}; supported dimensions are 1, 2, 3"
            )));
        }
        if atoms.is_empty() {
            return Err(Error::InvalidParameter(
                "an empirical measure needs at least one atom".into(),
            ));
        }
        Ok(Self { d, atoms })
    }

    /// Measure over velocities only (positions set to the origin).
    pub fn from_velocities(d: usize, velocities: &[Vec3]) -> Result<Self> {
        Self::new(
            d,
            velocities.iter().map(|v| (util::ZERO3, *v)).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn atoms(&self) -> &[PhasePoint] {
        &self.atoms
    }

    /// Velocity components along a unit direction.
    pub fn project_velocities(&self, dir: &Vec3) -> Vec<f64> {
        self.atoms.iter().map(|(_, v)| util::dot(v, dir)).collect()
    }

    /// First velocity coordinates (the d = 1 marginal).
    pub fn velocities_1d(&self) -> Result<Vec<f64>> {
        if self.d != 1 {
            return Err(Error::UnsupportedDimension(format!(
                "scalar marginal requested from a d = {} measure",
                self.d
            )));
        }
        Ok(self.atoms.iter().map(|(_, v)| v[0]).collect())
    }
}

/// A test observable on a pair of phase points with a certified Lipschitz
/// constant (at most 1, with respect to the Euclidean metric on the pair)
/// and a certified sup bound. The certificate is spot-checked on random
/// point pairs at construction.
pub struct TestFunction {
    name: String,
    f: Box<dyn Fn(&PhasePoint, &PhasePoint) -> f64 + Send + Sync>,
    lipschitz_bound: f64,
    sup_bound: f64,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, g: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        g.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("lipschitz_bound", &self.lipschitz_bound)
            .field("sup_bound", &self.sup_bound)
            .finish()
    }
}

fn pair_distance(x: &[PhasePoint; 2], y: &[PhasePoint; 2]) -> f64 {
    let mut s = 0.0;
    for k in 0..2 {
        let dq = util::sub(&x[k].0, &y[k].0);
        let dv = util::sub(&x[k].1, &y[k].1);
        s += util::norm_sq(&dq) + util::norm_sq(&dv);
    }
    s.sqrt()
}

impl TestFunction {
    /// Wrap an observable with claimed bounds; both claims are spot-checked
    /// on 10^4 random phase-point pairs in dimension `d`.
    pub fn new(
        name: &str,
        d: usize,
        f: Box<dyn Fn(&PhasePoint, &PhasePoint) -> f64 + Send + Sync>,
        lipschitz_bound: f64,
        sup_bound: f64,
        stream: &RandomStream,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&lipschitz_bound) {
            return Err(Error::InvalidParameter(format!(
                "certified Lipschitz bound must lie in [0, 1], got {lipschitz_bound}"
            )));
        }
        if !(1..=3).contains(&d) {
            return Err(Error::UnsupportedDimension(format!("d = {d}")));
        }
        let mut rng = stream.stream(Purpose::Probe, 0, 0);
        let draw_point = |rng: &mut rand_chacha::ChaCha8Rng| -> PhasePoint {
            let mut q = util::ZERO3;
            let mut v = util::ZERO3;
            for c in 0..d {
                q[c] = rng.random::<f64>();
                let g: f64 = rng.sample(StandardNormal);
                v[c] = 1.5 * g;
            }
            (q, v)
        };
        for trial in 0..10_000 {
            let x = [draw_point(&mut rng), draw_point(&mut rng)];
            let y = [draw_point(&mut rng), draw_point(&mut rng)];
            let fx = f(&x[0], &x[1]);
            let fy = f(&y[0], &y[1]);
            if !fx.is_finite() || fx.abs() > sup_bound * (1.0 + 1e-12) {
                return Err(Error::Inadmissible(format!(
                    "sup certificate failed for {name}: |{fx}| > {sup_bound} (trial {trial})"
                )));
            }
            let dist = pair_distance(&x, &y);
            if (fx - fy).abs() > lipschitz_bound * dist + 1e-12 {
                return Err(Error::Inadmissible(format!(
                    "Lipschitz certificate failed for {name}: |df| = {} over distance {dist} \
                     exceeds the claimed constant {lipschitz_bound} (trial {trial})",
                    (fx - fy).abs()
                )));
            }
        }
        Ok(Self {
            name: name.to_string(),
            f,
            lipschitz_bound,
            sup_bound,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    pub fn sup_bound(&self) -> f64 {
        self.sup_bound
    }

    pub fn eval(&self, x: &PhasePoint, y: &PhasePoint) -> f64 {
        (self.f)(x, y)
    }

    /// Built-in bank of bounded Lipschitz pair observables: speed clamps,
    /// a smooth bump, and a single-coordinate clamp. Products of two
    /// 1-Lipschitz, 1-bounded factors are scaled by 1/sqrt(2) so the pair
    /// constant stays certified at 1.
    pub fn bank(d: usize, stream: &RandomStream) -> Result<Vec<TestFunction>> {
        let half = std::f64::consts::FRAC_1_SQRT_2;
        let clamp = |v: &Vec3| util::norm(v).min(1.0);
        let bump = |v: &Vec3| (-util::norm_sq(v) / 2.0).exp();
        let mut bank = Vec::new();
        bank.push(TestFunction::new(
            "speed-clamp-product",
            d,
            Box::new(move |x: &PhasePoint, y: &PhasePoint| half * clamp(&x.1) * clamp(&y.1)),
            1.0,
            half,
            stream,
        )?);
        bank.push(TestFunction::new(
            "gaussian-bump-product",
            d,
            // Factor Lipschitz constant exp(-1/2) < 1/sqrt(2), so the pair
            // constant is below 1 without rescaling.
            Box::new(move |x: &PhasePoint, y: &PhasePoint| bump(&x.1) * bump(&y.1)),
            1.0,
            1.0,
            stream,
        )?);
        bank.push(TestFunction::new(
            "first-coordinate-clamp",
            d,
            Box::new(|x: &PhasePoint, _: &PhasePoint| x.1[0].clamp(-1.0, 1.0)),
            1.0,
            1.0,
            stream,
        )?);
        Ok(bank)
    }
}

/// Point estimate and bootstrap spread of a factorization gap.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GapEstimate {
    /// |mean over pairs - mean over independent products|.
    pub gap: f64,
    /// The same difference with its sign.
    pub signed: f64,
    /// Bootstrap standard error of the signed difference.
    pub stderr: f64,
    pub resamples: usize,
}

/// Gap between the paired expectation of `phi` over tagged two-particle
/// samples and its expectation over independent products, with a paired
/// bootstrap standard error. `f_samples` are consumed as disjoint
/// consecutive pairs.
pub fn factorization_gap(
    pair_samples: &[[PhasePoint; 2]],
    f_samples: &[PhasePoint],
    phi: &TestFunction,
    stream: &RandomStream,
) -> Result<GapEstimate> {
    let n = pair_samples.len();
    let m = f_samples.len() / 2;
    if n < 20 || m < 20 {
        return Err(Error::InsufficientData(format!(
            "gap estimation needs at least 20 replicas on both sides, got {n} paired and {m} product"
        )));
    }
    let paired: Vec<f64> = pair_samples
        .iter()
        .map(|p| phi.eval(&p[0], &p[1]))
        .collect();
    let product: Vec<f64> = (0..m)
        .map(|k| phi.eval(&f_samples[2 * k], &f_samples[2 * k + 1]))
        .collect();
    let mean = |xs: &[f64]| pairwise_sum_by(0, xs.len(), &|i| xs[i]) / xs.len() as f64;
    let signed = mean(&paired) - mean(&product);

    let mut diffs = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for b in 0..BOOTSTRAP_RESAMPLES {
        let mut rng = stream.stream(Purpose::Bootstrap, 0, b as u64);
        let mut sp = 0.0;
        for _ in 0..n {
            sp += paired[rng.random_range(0..n)];
        }
        let mut sq = 0.0;
        for _ in 0..m {
            sq += product[rng.random_range(0..m)];
        }
        diffs.push(sp / n as f64 - sq / m as f64);
    }
    let mb = mean(&diffs);
    let var = pairwise_sum_by(0, diffs.len(), &|i| (diffs[i] - mb) * (diffs[i] - mb))
        / (diffs.len() - 1) as f64;
    Ok(GapEstimate {
        gap: signed.abs(),
        signed,
        stderr: var.sqrt(),
        resamples: BOOTSTRAP_RESAMPLES,
    })
}

/// Factorization gap from matched two-particle samples: `pairs_a[k]` and
/// `pairs_b[k]` come from the same replica of a coupled run, so their
/// per-replica difference `phi(a) - phi(b)` cancels the shared sampling
/// noise and the bootstrap resamples replicas of that difference. This is
/// the low-variance estimator for gaps that shrink with the ensemble size.
pub fn factorization_gap_paired(
    pairs_a: &[[PhasePoint; 2]],
    pairs_b: &[[PhasePoint; 2]],
    phi: &TestFunction,
    stream: &RandomStream,
) -> Result<GapEstimate> {
    if pairs_a.len() != pairs_b.len() {
        return Err(Error::ParameterMismatch(format!(
            "matched gap needs equal replica counts, got {} and {}",
            pairs_a.len(),
            pairs_b.len()
        )));
    }
    let n = pairs_a.len();
    if n < 20 {
        return Err(Error::InsufficientData(format!(
            "gap estimation needs at least 20 replicas, got {n}"
        )));
    }
    let diffs: Vec<f64> = (0..n)
        .map(|k| phi.eval(&pairs_a[k][0], &pairs_a[k][1]) - phi.eval(&pairs_b[k][0], &pairs_b[k][1]))
        .collect();
    let mean = |xs: &[f64]| pairwise_sum_by(0, xs.len(), &|i| xs[i]) / xs.len() as f64;
    let signed = mean(&diffs);
    let mut boots = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for b in 0..BOOTSTRAP_RESAMPLES {
        let mut rng = stream.stream(Purpose::Bootstrap, 1, b as u64);
        let mut s = 0.0;
        for _ in 0..n {
            s += diffs[rng.random_range(0..n)];
        }
        boots.push(s / n as f64);
    }
    let mb = mean(&boots);
    let var = pairwise_sum_by(0, boots.len(), &|i| (boots[i] - mb) * (boots[i] - mb))
        / (boots.len() - 1) as f64;
    Ok(GapEstimate {
        gap: signed.abs(),
        signed,
        stderr: var.sqrt(),
        resamples: BOOTSTRAP_RESAMPLES,
    })
}

/// Mean absolute per-replica discrepancy `|phi(pair_a) - phi(pair_b)|`
/// with its standard error. This upper-bounds the matched gap (triangle
/// inequality) and scales like the pathwise coupling distance itself, so
/// its logarithm is stable enough for slope fits even when the signed gap
/// sits below the replica noise floor.
pub fn coupling_gap_envelope(
    pairs_a: &[[PhasePoint; 2]],
    pairs_b: &[[PhasePoint; 2]],
    phi: &TestFunction,
) -> Result<(f64, f64)> {
    if pairs_a.len() != pairs_b.len() {
        return Err(Error::ParameterMismatch(format!(
            "matched gap needs equal replica counts, got {} and {}",
            pairs_a.len(),
            pairs_b.len()
        )));
    }
    if pairs_a.len() < 20 {
        return Err(Error::InsufficientData(format!(
            "gap estimation needs at least 20 replicas, got {}",
            pairs_a.len()
        )));
    }
    let diffs: Vec<f64> = (0..pairs_a.len())
        .map(|k| {
            (phi.eval(&pairs_a[k][0], &pairs_a[k][1]) - phi.eval(&pairs_b[k][0], &pairs_b[k][1]))
                .abs()
        })
        .collect();
    mean_stderr(&diffs)
}

/// Exact Wasserstein-1 distance between two equal-weight empirical
/// measures on the line (CDF area between the merged samples).
pub fn w1_distance_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::InsufficientData(
            "both samples must be nonempty".into(),
        ));
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "samples must be finite".into(),
        ));
    }
    let mut xs = xs.to_vec();
    let mut ys = ys.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if xs.len() == ys.len() {
        // Equal counts: the optimal plan is the sorted matching.
        let n = xs.len();
        return Ok(pairwise_sum_by(0, n, &|i: usize| (xs[i] - ys[i]).abs()) / n as f64);
    }
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let mut i = 0usize;
    let mut j = 0usize;
    let mut acc = 0.0;
    let mut z = xs[0].min(ys[0]);
    while i < xs.len() || j < ys.len() {
        let next = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        acc += (i as f64 / n - j as f64 / m).abs() * (next - z);
        z = next;
        while i < xs.len() && xs[i] <= z {
            i += 1;
        }
        while j < ys.len() && ys[j] <= z {
            j += 1;
        }
    }
    Ok(acc)
}

/// Wasserstein-1 distance between an empirical sample and a unit-mass
/// piecewise-constant grid density (exact CDF area; the grid CDF is
/// piecewise linear).
pub fn w1_to_grid(samples: &[f64], grid: &VelocityGrid) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("empty sample".into()));
    }
    let mass = grid.mass();
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::Inadmissible(format!(
            "grid density has mass {mass}; normalize before comparing"
        )));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let m = grid.cell_count();
    let dv = grid.dv();
    let v_max = grid.v_max();
    // Grid CDF values at the cell edges.
    let mut cdf_edges = Vec::with_capacity(m + 1);
    cdf_edges.push(0.0);
    let mut c = 0.0;
    for i in 0..m {
        c += grid.values()[i] * dv;
        cdf_edges.push(c);
    }
    let grid_cdf = |x: f64| -> f64 {
        if x <= -v_max {
            0.0
        } else if x >= v_max {
            mass
        } else {
            let s = (x + v_max) / dv;
            let i = (s.floor() as usize).min(m - 1);
            cdf_edges[i] + grid.values()[i] * (x - (-v_max + i as f64 * dv))
        }
    };
    // Breakpoints: all sample points and all cell edges.
    let mut pts: Vec<f64> = Vec::with_capacity(xs.len() + m + 1);
    pts.extend_from_slice(&xs);
    for j in 0..=m {
        pts.push(-v_max + j as f64 * dv);
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();

    let mut acc = 0.0;
    let mut i = 0usize; // samples <= current left endpoint
    for w in pts.windows(2) {
        let (z0, z1) = (w[0], w[1]);
        while i < xs.len() && xs[i] <= z0 {
            i += 1;
        }
        let fe = i as f64 / n;
        let h0 = fe - grid_cdf(z0);
        let h1 = fe - grid_cdf(z1);
        let len = z1 - z0;
        acc += if h0 * h1 >= 0.0 {
            0.5 * (h0.abs() + h1.abs()) * len
        } else {
            (h0 * h0 + h1 * h1) * len / (2.0 * (h0.abs() + h1.abs()))
        };
    }
    Ok(acc)
}

/// Average of one-dimensional Wasserstein-1 distances of the velocity
/// marginals over random unit directions; deterministic given the stream.
pub fn sliced_w1(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    n_directions: usize,
    stream: &RandomStream,
) -> Result<f64> {
    if mu.dim() != nu.dim() {
        return Err(Error::ParameterMismatch(format!(
            "measures live in d = {} and d = {}",
            mu.dim(),
            nu.dim()
        )));
    }
    let d = mu.dim();
    if d < 2 {
        return Err(Error::UnsupportedDimension(
            "sliced distance needs d >= 2; use the exact 1-d distance instead".into(),
        ));
    }
    if n_directions == 0 {
        return Err(Error::InvalidParameter(
            "need at least one direction".into(),
        ));
    }
    let mut total = 0.0;
    for k in 0..n_directions {
        let mut rng = stream.stream(Purpose::SliceDirection, 0, k as u64);
        let mut dir = util::ZERO3;
        loop {
            for c in dir.iter_mut().take(d) {
                *c = rng.sample(StandardNormal);
            }
            let norm = util::norm(&dir);
            if norm > 1e-12 {
                dir = util::scale(&dir, 1.0 / norm);
                break;
            }
        }
        total += w1_distance_1d(&mu.project_velocities(&dir), &nu.project_velocities(&dir))?;
    }
    Ok(total / n_directions as f64)
}

/// Stopping threshold for the independent process's energy excursion: the
/// time scale `sqrt(u~)/E * log((2 + 2 sqrt(2)) / (1 + 2 sqrt(2)))`.
pub fn delta_threshold(u_tilde: f64, e_mag: f64) -> Result<f64> {
    if !(u_tilde > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "reference energy must be positive, got {u_tilde}"
        )));
    }
    if !(e_mag > 0.0) {
        return Err(Error::ZeroField(
            "the excursion threshold is undefined without a field".into(),
        ));
    }
    let s = 2.0f64.sqrt();
    Ok(u_tilde.sqrt() / e_mag * ((2.0 + 2.0 * s) / (1.0 + 2.0 * s)).ln())
}

/// Audit of the moment/energy bounds over a family of coupled runs that
/// share parameters and sample grids.
#[derive(Debug, Clone, Serialize)]
pub struct BoundAudit {
    /// Excursion time scale; absent without a field.
    pub delta: Option<f64>,
    /// Fraction of runs whose independent path hit the energy floor.
    pub floor_frequency: f64,
    pub floor_count: usize,
    pub runs: usize,
    pub times: Vec<f64>,
    /// Mean and standard error of the independent path's fourth-moment
    /// spread per sample time.
    pub mean_a: Vec<f64>,
    pub stderr_a: Vec<f64>,
    /// Growth envelope `exp(6 E t / sqrt(u~)) (a(0) + 3 u~^2)`.
    pub envelope: Vec<f64>,
    /// Sample times where the mean exceeds the envelope by more than three
    /// standard errors.
    pub envelope_violations: usize,
    /// Largest deviation of the independent path's mean energy from its
    /// initial value across all runs. Without a field the flow leaves
    /// velocities untouched and collisions preserve each speed, so this
    /// sits at roundoff.
    pub max_u_deviation: f64,
}

/// Compute the audit. All records must share the same sample grid.
pub fn bound_audit(records: &[CouplingRecord], e_mag: f64, u_tilde: f64) -> Result<BoundAudit> {
    if records.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "the audit needs at least 2 runs, got {}",
            records.len()
        )));
    }
    if !(u_tilde > 0.0) || !(e_mag >= 0.0) {
        return Err(Error::InvalidParameter(
            "need u~ > 0 and |E| >= 0".into(),
        ));
    }
    let times = records[0].sample_times.clone();
    for (k, r) in records.iter().enumerate() {
        if r.sample_times != times {
            return Err(Error::ParameterMismatch(format!(
                "run {k} was sampled on a different grid"
            )));
        }
    }
    let n_t = times.len();
    let n_r = records.len();
    let mut mean_a = vec![0.0; n_t];
    let mut stderr_a = vec![0.0; n_t];
    for k in 0..n_t {
        let vals: Vec<f64> = records.iter().map(|r| r.b_samples[k].a4).collect();
        let m = vals.iter().sum::<f64>() / n_r as f64;
        let var =
            vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n_r as f64 - 1.0);
        mean_a[k] = m;
        stderr_a[k] = (var / n_r as f64).sqrt();
    }
    let a0 = mean_a[0];
    let envelope: Vec<f64> = times
        .iter()
        .map(|&t| (6.0 * e_mag * t / u_tilde.sqrt()).exp() * (a0 + 3.0 * u_tilde * u_tilde))
        .collect();
    let envelope_violations = (0..n_t)
        .filter(|&k| mean_a[k] > envelope[k] + 3.0 * stderr_a[k])
        .count();
    let floor_count = records.iter().filter(|r| r.energy_floor_hit).count();
    let max_u_deviation = records
        .iter()
        .map(|r| {
            let u0 = r.b_samples[0].u;
            r.b_samples
                .iter()
                .map(|s| (s.u - u0).abs())
                .fold(0.0f64, f64::max)
        })
        .fold(0.0f64, f64::max);
    Ok(BoundAudit {
        delta: if e_mag > 0.0 {
            Some(delta_threshold(u_tilde, e_mag)?)
        } else {
            None
        },
        floor_frequency: floor_count as f64 / n_r as f64,
        floor_count,
        runs: n_r,
        times,
        mean_a,
        stderr_a,
        envelope,
        envelope_violations,
        max_u_deviation,
    })
}

/// Largest recorded coupling distance along one run.
pub fn sup_distance(record: &CouplingRecord) -> f64 {
    record.distance.iter().copied().fold(0.0, f64::max)
}

/// Mean and standard error of a sample (needs at least two values).
pub fn mean_stderr(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::InsufficientData(
            "mean/stderr needs at least two values".into(),
        ));
    }
    let n = xs.len() as f64;
    let m = pairwise_sum_by(0, xs.len(), &|i| xs[i]) / n;
    let var = pairwise_sum_by(0, xs.len(), &|i| (xs[i] - m) * (xs[i] - m)) / (n - 1.0);
    Ok((m, (var / n).sqrt()))
}

/// Summary of one ensemble size in a chaos sweep.
#[derive(Debug, Clone, Serialize)]
pub struct PocSweepPoint {
    pub n: usize,
    pub seeds: usize,
    pub mean_sup_distance: f64,
    pub stderr_sup_distance: f64,
    /// Named factorization gaps at the evaluation time.
    pub gaps: Vec<(String, GapEstimate)>,
}

/// Cross-size scaling report of a chaos sweep.
#[derive(Debug, Clone, Serialize)]
pub struct PocReport {
    pub n_values: Vec<usize>,
    pub points: Vec<PocSweepPoint>,
    /// Log-log slope of the mean sup-distance against N.
    pub distance_slope: f64,
    /// Log-log slope per named test function of the gap against N.
    pub gap_slopes: Vec<(String, f64)>,
}

/// Assemble a report from per-size summaries (at least two sizes, at
/// least 20 seeds each).
pub fn poc_report(points: Vec<PocSweepPoint>) -> Result<PocReport> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(
            "a scaling report needs at least two ensemble sizes".into(),
        ));
    }
    for p in &points {
        if p.seeds < 20 {
            return Err(Error::InsufficientData(format!(
                "N = {} has only {} seeds; at least 20 are required",
                p.n, p.seeds
            )));
        }
    }
    let ns: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let dist: Vec<f64> = points.iter().map(|p| p.mean_sup_distance).collect();
    let distance_slope = util::loglog_slope(&ns, &dist)?;
    let mut gap_slopes = Vec::new();
    if let Some(first) = points.first() {
        for (gi, (name, _)) in first.gaps.iter().enumerate() {
            let gaps: Vec<f64> = points.iter().map(|p| p.gaps[gi].1.gap).collect();
            if gaps.iter().all(|&g| g > 0.0) {
                gap_slopes.push((name.clone(), util::loglog_slope(&ns, &gaps)?));
            }
        }
    }
    Ok(PocReport {
        n_values: points.iter().map(|p| p.n).collect(),
        points,
        distance_slope,
        gap_slopes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::current::{solve_current, CurrentParams};
    use crate::flows::Ensemble;
    use crate::kernel::Kernel;
    use crate::processes::{run_coupled, sample_history, RunOptions};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn gaussian_phase(d: usize, n: usize, seed: u64) -> Vec<PhasePoint> {
        let stream = RandomStream::new(seed);
        let mut rng = stream.stream(Purpose::Probe, 7, 0);
        (0..n)
            .map(|_| {
                let mut v = util::ZERO3;
                for c in 0..d {
                    v[c] = rng.sample(StandardNormal);
                }
                (util::ZERO3, v)
            })
            .collect()
    }

    #[test]
    fn constant_observable_has_exactly_zero_gap() {
        let stream = RandomStream::new(70);
        let phi = TestFunction::new(
            "constant",
            1,
            Box::new(|_: &PhasePoint, _: &PhasePoint| 0.375),
            0.0,
            0.375,
            &stream,
        )
        .unwrap();
        let pairs: Vec<[PhasePoint; 2]> = gaussian_phase(1, 40, 71)
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect();
        let f_samples = gaussian_phase(1, 80, 72);
        let est = factorization_gap(&pairs, &f_samples, &phi, &stream).unwrap();
        assert_eq!(est.gap, 0.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn independent_pairs_show_no_gap_and_identical_pairs_do() {
        let stream = RandomStream::new(73);
        let bank = TestFunction::bank(1, &stream).unwrap();
        let phi = &bank[0];
        // Independent two-particle samples: gap compatible with zero.
        let pairs: Vec<[PhasePoint; 2]> = gaussian_phase(1, 400, 74)
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect();
        let f_samples = gaussian_phase(1, 2000, 75);
        let est = factorization_gap(&pairs, &f_samples, &phi, &stream).unwrap();
        assert!(est.stderr > 0.0);
        assert!(
            est.signed.abs() <= 2.0 * est.stderr,
            "independent data shows gap {} vs stderr {}",
            est.signed,
            est.stderr
        );
        // Perfectly correlated pairs: the gap must stand far above noise.
        let dup: Vec<[PhasePoint; 2]> = gaussian_phase(1, 200, 76)
            .into_iter()
            .map(|p| [p, p])
            .collect();
        // Analytic gap: 0.5 (E min(1,|v|)^2 - (E min(1,|v|))^2) = 0.0587.
        let est2 = factorization_gap(&dup, &f_samples, &phi, &stream).unwrap();
        assert!(
            est2.gap > 3.0 * est2.stderr && est2.gap > 0.03,
            "correlation invisible: gap {} stderr {}",
            est2.gap,
            est2.stderr
        );
        assert!(est2.gap < 0.09, "gap {} far above the analytic value", est2.gap);
    }

    #[test]
    fn paired_gap_cancels_shared_noise() {
        let stream = RandomStream::new(92);
        let bank = TestFunction::bank(1, &stream).unwrap();
        let phi = &bank[0];
        // B-pairs: independent Gaussians. A-pairs: the same points nudged
        // by a tiny common shift — the paired estimator must resolve a
        // mean difference far below the raw sampling noise.
        let base: Vec<[PhasePoint; 2]> = gaussian_phase(1, 80, 93)
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect();
        let nudged: Vec<[PhasePoint; 2]> = base
            .iter()
            .map(|p| {
                let mut q = *p;
                q[0].1[0] += 1e-3;
                q[1].1[0] += 1e-3;
                q
            })
            .collect();
        let est = factorization_gap_paired(&nudged, &base, phi, &stream).unwrap();
        assert!(est.gap > 0.0 && est.gap < 2e-3, "gap {}", est.gap);
        assert!(
            est.stderr < 1e-3,
            "paired stderr {} should sit at the nudge scale, not the sample scale",
            est.stderr
        );
        // Identical inputs: exactly zero.
        let zero = factorization_gap_paired(&base, &base, phi, &stream).unwrap();
        assert_eq!(zero.gap, 0.0);
        assert_eq!(zero.stderr, 0.0);
        // Mismatched replica counts are rejected.
        assert!(matches!(
            factorization_gap_paired(&base[..30], &base, phi, &stream),
            Err(Error::ParameterMismatch(_))
        ));
    }

    #[test]
    fn envelope_dominates_the_signed_gap() {
        let stream = RandomStream::new(94);
        let bank = TestFunction::bank(2, &stream).unwrap();
        let phi = &bank[0];
        let base: Vec<[PhasePoint; 2]> = gaussian_phase(2, 120, 95)
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect();
        let jittered: Vec<[PhasePoint; 2]> = base
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mut q = *p;
                // Sign-alternating jitter: near-zero signed gap, order-eps
                // absolute discrepancy.
                let eps = if k % 2 == 0 { 5e-2 } else { -5e-2 };
                q[0].1[0] += eps;
                q[1].1[1] -= eps;
                q
            })
            .collect();
        let signed = factorization_gap_paired(&jittered, &base, phi, &stream).unwrap();
        let (env, env_se) = coupling_gap_envelope(&jittered, &base, phi).unwrap();
        assert!(env >= signed.gap);
        assert!(env > 1e-3, "alternating jitter must leave a visible envelope");
        assert!(env_se < env, "envelope noise should be subdominant");
        let (zero, zero_se) = coupling_gap_envelope(&base, &base, phi).unwrap();
        assert_eq!(zero, 0.0);
        assert_eq!(zero_se, 0.0);
    }

    #[test]
    fn too_few_replicas_are_rejected() {
        let stream = RandomStream::new(77);
        let bank = TestFunction::bank(1, &stream).unwrap();
        let pairs: Vec<[PhasePoint; 2]> = gaussian_phase(1, 20, 78)
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect();
        let f_samples = gaussian_phase(1, 100, 79);
        assert!(matches!(
            factorization_gap(&pairs, &f_samples, &bank[0], &stream),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn lying_certificates_are_caught() {
        let stream = RandomStream::new(80);
        // Claimed Lipschitz constant far below the true slope 3.
        assert!(matches!(
            TestFunction::new(
                "steep",
                1,
                Box::new(|x: &PhasePoint, _: &PhasePoint| 3.0 * x.1[0]),
                1.0,
                1e9,
                &stream,
            ),
            Err(Error::Inadmissible(_))
        ));
        // Claimed sup bound smaller than the actual range.
        assert!(matches!(
            TestFunction::new(
                "tall",
                1,
                Box::new(|x: &PhasePoint, _: &PhasePoint| x.1[0].clamp(-1.0, 1.0)),
                1.0,
                0.1,
                &stream,
            ),
            Err(Error::Inadmissible(_))
        ));
    }

    #[test]
    fn scalar_distance_known_values() {
        assert_eq!(w1_distance_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(w1_distance_1d(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        // Translation by 0.3 moves every quantile by 0.3.
        let xs = [0.1, 0.4, 0.9, 1.7];
        let ys: Vec<f64> = xs.iter().map(|v| v + 0.3).collect();
        assert_abs_diff_eq!(w1_distance_1d(&xs, &ys).unwrap(), 0.3, epsilon = 1e-15);
        // Unequal counts: {0} vs {0, 1} has distance 1/2.
        assert_abs_diff_eq!(
            w1_distance_1d(&[0.0], &[0.0, 1.0]).unwrap(),
            0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn scalar_distance_is_a_metric_on_samples() {
        let a = gaussian_phase(1, 64, 81);
        let b = gaussian_phase(1, 64, 82);
        let c = gaussian_phase(1, 64, 83);
        let v = |pts: &[PhasePoint]| -> Vec<f64> { pts.iter().map(|p| p.1[0]).collect() };
        let (va, vb, vc) = (v(&a), v(&b), v(&c));
        let dab = w1_distance_1d(&va, &vb).unwrap();
        let dba = w1_distance_1d(&vb, &va).unwrap();
        let dbc = w1_distance_1d(&vb, &vc).unwrap();
        let dac = w1_distance_1d(&va, &vc).unwrap();
        assert_eq!(dab, dba);
        assert!(dac <= dab + dbc + 1e-12);
        assert!(dab > 0.0);
    }

    #[test]
    fn gaussian_sample_approaches_the_gaussian_grid() {
        let stream = RandomStream::new(84);
        let mut rng = stream.stream(Purpose::Probe, 1, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let grid = VelocityGrid::maxwellian(8.0, 4096, 1.0).unwrap();
        let w = w1_to_grid(&xs, &grid).unwrap();
        assert!(w < 0.01, "Monte Carlo distance {w}");
        assert!(w > 0.0);
    }

    #[test]
    fn grid_distance_detects_translation() {
        // Samples exactly at cell centers of the same grid: tiny distance;
        // shifted samples: distance near the shift.
        let grid = VelocityGrid::maxwellian(8.0, 2048, 1.0).unwrap();
        let stream = RandomStream::new(85);
        let mut rng = stream.stream(Purpose::Probe, 2, 0);
        let xs: Vec<f64> = (0..50_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let shifted: Vec<f64> = xs.iter().map(|v| v + 0.5).collect();
        let d0 = w1_to_grid(&xs, &grid).unwrap();
        let d1 = w1_to_grid(&shifted, &grid).unwrap();
        assert!(d1 > 0.45 && d1 < 0.55, "shift distance {d1}");
        assert!(d0 < 0.02);
    }

    #[test]
    fn sliced_distance_matches_the_mean_projected_shift() {
        let n = 2000;
        let base = gaussian_phase(2, n, 86);
        let shifted: Vec<PhasePoint> = base
            .iter()
            .map(|(q, v)| (*q, [v[0] + 1.0, v[1], v[2]]))
            .collect();
        let mu = EmpiricalMeasure::new(2, base).unwrap();
        let nu = EmpiricalMeasure::new(2, shifted).unwrap();
        let stream = RandomStream::new(87);
        let s = sliced_w1(&mu, &nu, 64, &stream).unwrap();
        let expect = 2.0 / std::f64::consts::PI;
        assert_relative_eq!(s, expect, max_relative = 0.1);
        // Identical measures: zero exactly.
        let same = sliced_w1(&mu, &mu, 16, &stream).unwrap();
        assert_eq!(same, 0.0);
        // Deterministic under the same stream.
        assert_eq!(s, sliced_w1(&mu, &nu, 64, &stream).unwrap());
    }

    #[test]
    fn sliced_distance_guards_its_domain() {
        let mu = EmpiricalMeasure::from_velocities(1, &[[0.1, 0.0, 0.0]]).unwrap();
        let nu = EmpiricalMeasure::from_velocities(1, &[[0.2, 0.0, 0.0]]).unwrap();
        let stream = RandomStream::new(88);
        assert!(matches!(
            sliced_w1(&mu, &nu, 8, &stream),
            Err(Error::UnsupportedDimension(_))
        ));
        let mu2 = EmpiricalMeasure::from_velocities(2, &[[0.1, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            sliced_w1(&mu2, &mu2, 0, &stream),
            Err(Error::InvalidParameter(_))
        ));
        let mu3 = EmpiricalMeasure::from_velocities(3, &[[0.1, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            sliced_w1(&mu2, &mu3, 8, &stream),
            Err(Error::ParameterMismatch(_))
        ));
    }

    #[test]
    fn two_sample_null_floor_is_small_but_positive() {
        let n = 1000;
        let mu = EmpiricalMeasure::new(2, gaussian_phase(2, n, 89)).unwrap();
        let nu = EmpiricalMeasure::new(2, gaussian_phase(2, n, 90)).unwrap();
        let stream = RandomStream::new(91);
        let floor = sliced_w1(&mu, &nu, 32, &stream).unwrap();
        assert!(floor > 0.0);
        // O(N^{-1/2}) sampling floor with a generous constant.
        assert!(floor < 5.0 / (n as f64).sqrt(), "null floor {floor}");
    }

    #[test]
    fn excursion_threshold_matches_independent_arithmetic() {
        // sqrt(u~)/E * ln((2 + 2 sqrt 2)/(1 + 2 sqrt 2)) at u~ = E = 1.
        let d = delta_threshold(1.0, 1.0).unwrap();
        assert_abs_diff_eq!(d, 0.23206672112596227, epsilon = 1e-15);
        // Scales as sqrt(u~)/E.
        let d2 = delta_threshold(4.0, 2.0).unwrap();
        assert_abs_diff_eq!(d2, d, epsilon = 1e-15);
        assert!(matches!(delta_threshold(1.0, 0.0), Err(Error::ZeroField(_))));
    }

    fn small_records(e: f64, seeds: u64) -> Vec<CouplingRecord> {
        let n = 48;
        let kernel = Kernel::uniform(2).unwrap();
        let mut e_vec = util::ZERO3;
        e_vec[0] = e;
        let params = CurrentParams::new(2, &[e, 0.0], 1.0, 1.0).unwrap();
        let sol = solve_current(&params, &[0.0, 0.0], 1.0, 1e-3).unwrap();
        (0..seeds)
            .map(|s| {
                let stream = RandomStream::new(1000 + s);
                let v0 = Ensemble::maxwellian(n, 2, 1.0, &stream.child(0), true).unwrap();
                let h = sample_history(n, 1.0, &stream.child(1)).unwrap();
                run_coupled(&kernel, &v0, &h, &e_vec, &sol, &RunOptions::new(0.25)).unwrap()
            })
            .collect()
    }

    #[test]
    fn audit_of_healthy_runs_reports_no_violations() {
        let records = small_records(0.5, 24);
        let audit = bound_audit(&records, 0.5, 1.0).unwrap();
        assert_eq!(audit.envelope_violations, 0);
        assert_eq!(audit.floor_count, 0);
        assert_eq!(audit.floor_frequency, 0.0);
        assert!(audit.delta.is_some());
        assert!(audit.max_u_deviation < 0.5);
        assert_eq!(audit.runs, 24);
        // The envelope dominates the mean by construction at t = 0.
        assert!(audit.envelope[0] > audit.mean_a[0]);
    }

    #[test]
    fn zero_field_audit_sees_constant_energy() {
        let records = small_records(0.0, 4);
        let audit = bound_audit(&records, 0.0, 1.0).unwrap();
        assert!(audit.delta.is_none());
        // The free flow is bit-exact; only collision re-rounding remains.
        assert!(audit.max_u_deviation < 1e-14);
    }

    #[test]
    fn mixed_sample_grids_are_rejected() {
        let mut records = small_records(0.5, 3);
        records[2].sample_times.push(99.0);
        assert!(matches!(
            bound_audit(&records, 0.5, 1.0),
            Err(Error::ParameterMismatch(_))
        ));
        assert!(matches!(
            bound_audit(&records[..1], 0.5, 1.0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn report_assembly_checks_replication_and_fits_slopes() {
        let est = GapEstimate {
            gap: 0.1,
            signed: 0.1,
            stderr: 0.01,
            resamples: 400,
        };
        let mk = |n: usize, dist: f64, gap: f64| PocSweepPoint {
            n,
            seeds: 20,
            mean_sup_distance: dist,
            stderr_sup_distance: dist / 10.0,
            gaps: vec![(
                "speed-clamp-product".into(),
                GapEstimate { gap, ..est },
            )],
        };
        // Exact N^{-1/2} data must fit slope -1/2.
        let points = vec![
            mk(100, 0.1, 0.05),
            mk(1000, 0.1 / 10.0f64.sqrt(), 0.05 / 10.0f64.sqrt()),
            mk(10000, 0.01, 0.005),
        ];
        let report = poc_report(points).unwrap();
        assert_abs_diff_eq!(report.distance_slope, -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(report.gap_slopes[0].1, -0.5, epsilon = 1e-12);
        // Too few seeds anywhere: rejected.
        let mut bad = vec![mk(100, 0.1, 0.05), mk(1000, 0.03, 0.02)];
        bad[1].seeds = 19;
        assert!(matches!(poc_report(bad), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn sup_distance_and_mean_stderr_helpers() {
        let records = small_records(0.5, 2);
        let s = sup_distance(&records[0]);
        assert!(s > 0.0);
        assert!(s >= *records[0].distance.last().unwrap());
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(m, 2.5, epsilon = 1e-15);
        // s^2 = 5/3, stderr = sqrt(5/3)/2.
        assert_abs_diff_eq!(se, (5.0f64 / 3.0).sqrt() / 2.0, epsilon = 1e-15);
        assert!(mean_stderr(&[1.0]).is_err());
    }
}
