//! Shared numerics: fixed-order pairwise reductions, deterministic adaptive
//! quadrature, monotone cubic (Fritsch–Carlson) interpolation, and small
//! fixed-dimension vector helpers.
//!
//! Every routine here is deterministic for a given input; reductions use a
//! fixed binary tree that does not depend on thread count, so ensemble
//! statistics are bit-identical across runs and `--threads` settings.

use crate::error::{Error, Result};

/// Velocities and fields are stored padded to three components; coordinates
/// beyond the active dimension stay exactly zero.
pub type Vec3 = [f64; 3];

pub const ZERO3: Vec3 = [0.0; 3];

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm_sq(a: &Vec3) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Copy the first `d` components of a flat slice into a padded vector.
#[inline]
pub fn load(slice: &[f64], d: usize) -> crate::error::Result<Vec3> {
    if slice.len() < d {
        return Err(crate::error::Error::InvalidParameter(format!(
            "vector has {} components but dimension is {d}",
            slice.len()
        )));
    }
    if slice.len() > 3 || slice[d.min(slice.len())..].iter().any(|&c| c != 0.0) {
        return Err(crate::error::Error::InvalidParameter(format!(
            "vector {slice:?} has nonzero components beyond dimension {d}"
        )));
    }
    let mut v = ZERO3;
    v[..d].copy_from_slice(&slice[..d]);
    Ok(v)
}

/// Leaf size of the pairwise-summation tree. The tree shape is a function of
/// the index range alone, which pins the floating-point result.
const PAIRWISE_LEAF: usize = 64;

/// Sum `f(i)` for `i` in `lo..hi` with fixed-order pairwise combination.
pub fn pairwise_sum_by<F>(lo: usize, hi: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Copy,
{
    if hi - lo <= PAIRWISE_LEAF {
        let mut acc = 0.0;
        for i in lo..hi {
            acc += f(i);
        }
        acc
    } else {
        let mid = lo + (hi - lo) / 2;
        pairwise_sum_by(lo, mid, f) + pairwise_sum_by(mid, hi, f)
    }
}

/// Pairwise sum of a slice.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    pairwise_sum_by(0, x.len(), |i| x[i])
}

/// Four simultaneous pairwise sums in one sweep (used for the current and
/// energy of an ensemble without touching memory twice).
pub fn pairwise_fold4<F>(lo: usize, hi: usize, f: F) -> [f64; 4]
where
    F: Fn(usize) -> [f64; 4] + Copy,
{
    if hi - lo <= PAIRWISE_LEAF {
        let mut acc = [0.0; 4];
        for i in lo..hi {
            let v = f(i);
            acc[0] += v[0];
            acc[1] += v[1];
            acc[2] += v[2];
            acc[3] += v[3];
        }
        acc
    } else {
        let mid = lo + (hi - lo) / 2;
        let a = pairwise_fold4(lo, mid, f);
        let b = pairwise_fold4(mid, hi, f);
        [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
    }
}

const SIMPSON_MAX_DEPTH: u32 = 48;

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
}

fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    whole: f64,
    m: f64,
    fm: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let (left, lm, flm) = simpson(f, a, fa, m, fm);
    let (right, rm, frm) = simpson(f, m, fm, b, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(Error::NonConvergent(format!(
            "adaptive quadrature exceeded depth {SIMPSON_MAX_DEPTH} on [{a:.6}, {b:.6}]"
        )));
    }
    let l = simpson_rec(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)?;
    let r = simpson_rec(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)?;
    Ok(l + r)
}

/// Deterministic adaptive Simpson quadrature with an absolute tolerance.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !(tol > 0.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::InvalidParameter(
            "quadrature needs finite bounds and tol > 0".into(),
        ));
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    simpson_rec(f, a, fa, b, fb, whole, m, fm, tol, SIMPSON_MAX_DEPTH)
}

/// Fixed-order 16-point Gauss–Legendre rule on [a, b]; used where a cheap
/// non-adaptive rule of high order is preferable (per-cell integrals).
pub fn gauss16(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    // Abscissae/weights for n = 16 on [-1, 1], positive half; mirrored below.
    const X: [f64; 8] = [
        0.0950125098376374,
        0.2816035507792589,
        0.4580167776572274,
        0.6178762444026438,
        0.7554044083550030,
        0.8656312023878318,
        0.9445750230732326,
        0.9894009349916499,
    ];
    const W: [f64; 8] = [
        0.1894506104550685,
        0.1826034150449236,
        0.1691565193950025,
        0.1495959888165767,
        0.1246289712555339,
        0.0951585116824928,
        0.0622535239386479,
        0.0271524594117541,
    ];
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut acc = 0.0;
    for k in 0..8 {
        acc += W[k] * (f(c - h * X[k]) + f(c + h * X[k]));
    }
    acc * h
}

/// Monotone cubic Hermite interpolant (Fritsch–Carlson slopes) on an
/// arbitrary strictly increasing abscissa grid.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    slope: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(Error::InvalidParameter(
                "interpolation needs two or more matching nodes".into(),
            ));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "interpolation abscissae must be strictly increasing".into(),
            ));
        }
        let slope = fritsch_carlson_slopes(&x, &y);
        Ok(Self { x, y, slope })
    }

    /// Build from non-decreasing nodes plus known exact derivatives (kept
    /// monotone by clamping each slope into the Fritsch–Carlson region
    /// `0 <= m_i <= 3 min(secant_left, secant_right)`).
    pub fn with_derivatives(x: Vec<f64>, y: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.len() != dy.len() || x.len() < 2 {
            return Err(Error::InvalidParameter(
                "interpolation needs two or more matching nodes".into(),
            ));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "interpolation abscissae must be strictly increasing".into(),
            ));
        }
        if y.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter(
                "derivative-based interpolant expects non-decreasing ordinates".into(),
            ));
        }
        let n = x.len();
        let mut slope = dy;
        for i in 0..n {
            let dl = if i > 0 {
                (y[i] - y[i - 1]) / (x[i] - x[i - 1])
            } else {
                f64::INFINITY
            };
            let dr = if i + 1 < n {
                (y[i + 1] - y[i]) / (x[i + 1] - x[i])
            } else {
                f64::INFINITY
            };
            let cap = 3.0 * dl.min(dr);
            slope[i] = slope[i].clamp(0.0, cap.max(0.0));
        }
        Ok(Self { x, y, slope })
    }

    fn segment(&self, t: f64) -> usize {
        match self
            .x
            .binary_search_by(|v| v.partial_cmp(&t).expect("finite abscissa"))
        {
            Ok(i) => i.min(self.x.len() - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(self.x.len() - 2),
        }
    }

    /// Evaluate at `t`, clamping to the boundary values outside the range.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return self.y[0];
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let i = self.segment(t);
        hermite(
            self.x[i],
            self.x[i + 1],
            self.y[i],
            self.y[i + 1],
            self.slope[i],
            self.slope[i + 1],
            t,
        )
    }

    pub fn x_nodes(&self) -> &[f64] {
        &self.x
    }

    pub fn y_nodes(&self) -> &[f64] {
        &self.y
    }

    /// Solve `eval(t) = target` on segment data that is non-decreasing.
    /// Newton iterations guarded by bisection; deterministic.
    pub fn invert_monotone(&self, target: f64) -> f64 {
        let n = self.x.len();
        if target <= self.y[0] {
            return self.x[0];
        }
        if target >= self.y[n - 1] {
            return self.x[n - 1];
        }
        // Locate the bracketing segment by value.
        let mut lo = 0usize;
        let mut hi = n - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.y[mid] <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (xa, xb) = (self.x[lo], self.x[lo + 1]);
        let (ya, yb) = (self.y[lo], self.y[lo + 1]);
        if yb <= ya {
            // Flat segment: any point maps to the same value; take the left edge.
            return xa;
        }
        let (ma, mb) = (self.slope[lo], self.slope[lo + 1]);
        let mut a = xa;
        let mut b = xb;
        let mut t = xa + (xb - xa) * (target - ya) / (yb - ya);
        for _ in 0..64 {
            let v = hermite(xa, xb, ya, yb, ma, mb, t) - target;
            if v.abs() <= 1e-15 * (1.0 + target.abs()) {
                break;
            }
            if v > 0.0 {
                b = t;
            } else {
                a = t;
            }
            let dv = hermite_deriv(xa, xb, ya, yb, ma, mb, t);
            let newton = t - v / dv;
            t = if dv > 0.0 && newton > a && newton < b {
                newton
            } else {
                0.5 * (a + b)
            };
        }
        t
    }
}

fn fritsch_carlson_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut m = vec![0.0; n];
    m[0] = delta[0];
    m[n - 1] = delta[n - 2];
    for i in 1..n - 1 {
        if delta[i - 1] * delta[i] <= 0.0 {
            m[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
        }
    }
    // Limit the end slopes to preserve monotone segments.
    for i in [0, n - 1] {
        let d = if i == 0 { delta[0] } else { delta[n - 2] };
        if m[i] * d <= 0.0 {
            m[i] = 0.0;
        } else if m[i].abs() > 3.0 * d.abs() {
            m[i] = 3.0 * d;
        }
    }
    m
}

#[inline]
fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, m0: f64, m1: f64, t: f64) -> f64 {
    let h = x1 - x0;
    let s = (t - x0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    h00 * y0 + h10 * h * m0 + h01 * y1 + h11 * h * m1
}

#[inline]
fn hermite_deriv(x0: f64, x1: f64, y0: f64, y1: f64, m0: f64, m1: f64, t: f64) -> f64 {
    let h = x1 - x0;
    let s = (t - x0) / h;
    let s2 = s * s;
    let d00 = (6.0 * s2 - 6.0 * s) / h;
    let d10 = 3.0 * s2 - 4.0 * s + 1.0;
    let d01 = (-6.0 * s2 + 6.0 * s) / h;
    let d11 = 3.0 * s2 - 2.0 * s;
    d00 * y0 + d10 * m0 + d01 * y1 + d11 * m1
}

/// Sample grid `0, dt, 2dt, ..., horizon` with the endpoint always included.
pub fn sample_grid(horizon: f64, dt: f64) -> Vec<f64> {
    let mut ts = Vec::new();
    let mut k: u64 = 0;
    loop {
        let t = (k as f64 * dt).min(horizon);
        ts.push(t);
        if t >= horizon {
            break;
        }
        k += 1;
    }
    ts
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InsufficientData(
            "log-log slope needs at least two matching points".into(),
        ));
    }
    if x.iter().chain(y.iter()).any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter(
            "log-log slope needs strictly positive data".into(),
        ));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..lx.len() {
        sxx += (lx[i] - mx) * (lx[i] - mx);
        sxy += (lx[i] - mx) * (ly[i] - my);
    }
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pairwise_matches_exact_rational_sum() {
        // 1 + 1/2 + ... + 1/2^k sums are exactly representable.
        let xs: Vec<f64> = (0..40).map(|k| 0.5f64.powi(k)).collect();
        let expect = 2.0 - 0.5f64.powi(39);
        assert_eq!(pairwise_sum(&xs), expect);
    }

    #[test]
    fn pairwise_sum_is_accurate_on_large_cancelling_data() {
        let n: usize = 1 << 18;
        let big = 1.0 + 1e-12;
        // The per-pair residue (big - 1.0) is exact in f64 (Sterbenz), and
        // n/2 is a power of two, so this product is the true sum.
        let exact = (n as f64 / 2.0) * (big - 1.0);
        let xs: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { big } else { -1.0 }).collect();
        let pw = pairwise_sum(&xs);
        assert_relative_eq!(pw, exact, max_relative = 1e-9);
    }

    #[test]
    fn pairwise_tree_is_independent_of_leaf_traversal() {
        // Same data, same result, every call — the tree is a pure function
        // of the range.
        let xs: Vec<f64> = (0..10_001).map(|i| ((i * 2654435761_usize) as f64).sin()).collect();
        let a = pairwise_sum(&xs);
        let b = pairwise_sum(&xs);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn simpson_integrates_smooth_functions_to_tolerance() {
        let val = adaptive_simpson(&|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-12).unwrap();
        assert_relative_eq!(val, 2.0, epsilon = 1e-11);
        let val = adaptive_simpson(&|x: f64| (-x * x).exp(), -8.0, 8.0, 1e-12).unwrap();
        assert_relative_eq!(val, std::f64::consts::PI.sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn simpson_agrees_with_gauss16_composite() {
        let f = |x: f64| (3.0 * x).cos() * (-0.5 * x).exp();
        let a = adaptive_simpson(&f, 0.0, 2.0, 1e-12).unwrap();
        let mut b = 0.0;
        for k in 0..16 {
            let lo = 2.0 * k as f64 / 16.0;
            b += gauss16(&f, lo, lo + 2.0 / 16.0);
        }
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn monotone_cubic_interpolates_and_preserves_monotonicity() {
        let x: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        let c = MonotoneCubic::new(x.clone(), y.clone()).unwrap();
        for (xi, yi) in x.iter().zip(y.iter()) {
            assert_relative_eq!(c.eval(*xi), *yi, epsilon = 1e-14);
        }
        let mut prev = f64::NEG_INFINITY;
        for k in 0..=1000 {
            let v = c.eval(k as f64 / 1000.0);
            assert!(v >= prev - 1e-14, "interpolant must stay monotone");
            prev = v;
        }
    }

    #[test]
    fn monotone_cubic_inversion_round_trips() {
        let x: Vec<f64> = (0..=64).map(|i| i as f64 / 64.0).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 0.2 * (2.5 * v).sin().powi(2)).collect();
        let c = MonotoneCubic::new(x, y).unwrap();
        for k in 0..=50 {
            let target = c.eval(k as f64 / 50.0);
            let t = c.invert_monotone(target);
            assert_relative_eq!(c.eval(t), target, epsilon = 1e-12);
        }
    }

    #[test]
    fn loglog_slope_recovers_power_law() {
        let x = [100.0, 316.0, 1000.0, 3162.0, 10000.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.7 * v.powf(-0.5)).collect();
        let s = loglog_slope(&x, &y).unwrap();
        assert_relative_eq!(s, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn vector_helpers() {
        let a = [1.0, 2.0, 2.0];
        assert_eq!(norm(&a), 3.0);
        let c = cross(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]);
        assert_eq!(c, [0.0, 0.0, 1.0]);
    }
}
