//! Collision kernels on the unit sphere, reflection geometry, and the
//! likelihood-preserving matching of collision outcomes between two
//! processes that share one event schedule.
//!
//! A kernel is an even probability density `k` on [-1, 1]: a collision of a
//! particle with unit velocity `v^` draws a virtual-scatterer normal `n^`
//! with density `k(v^ . n^)` on the sphere and reflects `v' = v - 2 (v.n^) n^`.
//! Dimensions 1, 2 and 3 are supported; in d = 1 the reflection is the
//! deterministic sign flip and no direction is sampled.

use crate::error::{Error, Result};
use crate::util::{self, adaptive_simpson, gauss16, MonotoneCubic, Vec3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Number of segments in the tabulated inverse-CDF used for direction
/// sampling (d >= 2).
pub const CDF_SEGMENTS: usize = 4096;

/// Two velocities closer than this are treated as a no-op collision when
/// reconstructing a normal.
pub const NOOP_SEPARATION: f64 = 1e-12;

const QUADRATURE_TOL: f64 = 1e-12;

/// Surface measure of the unit sphere `S^{m}` for m = 0, 1, 2.
fn sphere_surface(m: usize) -> f64 {
    match m {
        0 => 2.0,
        1 => 2.0 * PI,
        2 => 4.0 * PI,
        _ => unreachable!("dimension guard"),
    }
}

/// A direction on the unit sphere of the active dimension; components beyond
/// it are exactly zero and the stored norm is 1 up to rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVector {
    v: Vec3,
    d: usize,
}

impl UnitVector {
    /// Normalize the first `d` components of `v`. Errors on a near-zero
    /// vector, for which no direction is defined.
    pub fn new(v: &[f64], d: usize) -> Result<Self> {
        check_dim(d)?;
        let mut c = util::ZERO3;
        c[..d].copy_from_slice(&v[..d]);
        let n = util::norm(&c);
        if n < 1e-300 {
            return Err(Error::InvalidParameter(
                "cannot normalize a zero vector into a direction".into(),
            ));
        }
        Ok(Self {
            v: util::scale(&c, 1.0 / n),
            d,
        })
    }

    pub fn components(&self) -> &Vec3 {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        util::dot(&self.v, &other.v)
    }
}

/// Kernel description as configured.
#[derive(Debug, Clone)]
pub enum KernelShape {
    /// Direction-independent density `1 / |S^{d-1}|`.
    Uniform,
    /// Values of `k` at `cos(theta)` nodes; symmetrized and normalized on
    /// load, zero outside the node range.
    Table { nodes: Vec<f64>, values: Vec<f64> },
}

/// A loaded, normalized collision kernel for a fixed dimension.
#[derive(Debug, Clone)]
pub struct Kernel {
    d: usize,
    shape: KernelShape,
    /// Interpolant of the symmetrized raw table (None for uniform).
    table: Option<MonotoneCubic>,
    /// Normalization so the density integrates to 1 over the sphere.
    norm_const: f64,
    /// Tabulated CDF of theta = angle(v^, n^) for inverse sampling (d >= 2).
    cdf: Option<MonotoneCubic>,
}

fn check_dim(d: usize) -> Result<()> {
    if (1..=3).contains(&d) {
        Ok(())
    } else {
        Err(Error::UnsupportedDimension(format!(
            "d = {d}; supported dimensions are 1, 2, 3"
        )))
    }
}

impl Kernel {
    pub fn uniform(d: usize) -> Result<Self> {
        Self::new(d, KernelShape::Uniform)
    }

    pub fn new(d: usize, shape: KernelShape) -> Result<Self> {
        check_dim(d)?;
        let table = match &shape {
            KernelShape::Uniform => None,
            KernelShape::Table { nodes, values } => {
                if nodes.len() != values.len() || nodes.len() < 2 {
                    return Err(Error::InvalidParameter(
                        "kernel table needs at least two matching nodes/values".into(),
                    ));
                }
                if nodes.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidParameter(
                        "kernel table nodes must be strictly increasing".into(),
                    ));
                }
                if nodes[0] < -1.0 || *nodes.last().unwrap() > 1.0 {
                    return Err(Error::InvalidParameter(
                        "kernel table nodes must lie in [-1, 1]".into(),
                    ));
                }
                for (i, &v) in values.iter().enumerate() {
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "kernel table value at node index {i} (cos theta = {}) is {v}; \
                             values must be finite and non-negative",
                            nodes[i]
                        )));
                    }
                }
                if values.iter().all(|&v| v == 0.0) {
                    return Err(Error::InvalidParameter(
                        "kernel table is identically zero and cannot be normalized".into(),
                    ));
                }
                Some(MonotoneCubic::new(nodes.clone(), values.clone())?)
            }
        };

        let mut kernel = Kernel {
            d,
            shape,
            table,
            norm_const: 1.0,
            cdf: None,
        };

        // Normalize: the sphere integral of the density must be 1.
        let total = match d {
            1 => kernel.raw_sym(1.0) + kernel.raw_sym(-1.0),
            _ => {
                let dm2 = d - 2;
                let f = |theta: f64| kernel.raw_sym(theta.cos()) * theta.sin().powi(dm2 as i32);
                sphere_surface(dm2) * adaptive_simpson(&f, 0.0, PI, QUADRATURE_TOL)?
            }
        };
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "kernel normalization integral is {total}; kernel must have positive mass"
            )));
        }
        kernel.norm_const = 1.0 / total;

        if d >= 2 {
            kernel.cdf = Some(kernel.build_cdf()?);
        }
        Ok(kernel)
    }

    /// Raw symmetrized table value (before normalization); zero outside the
    /// tabulated range. Uniform kernels are the constant 1 here.
    fn raw_sym(&self, x: f64) -> f64 {
        match &self.table {
            None => 1.0,
            Some(t) => {
                let e = |x: f64| {
                    let nodes = t.x_nodes();
                    if x < nodes[0] || x > *nodes.last().unwrap() {
                        0.0
                    } else {
                        t.eval(x).max(0.0)
                    }
                };
                0.5 * (e(x) + e(-x))
            }
        }
    }

    /// Normalized density of the scatterer normal at `cos(theta) = x`.
    pub fn density(&self, x: f64) -> f64 {
        self.norm_const * self.raw_sym(x)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn shape(&self) -> &KernelShape {
        &self.shape
    }

    fn build_cdf(&self) -> Result<MonotoneCubic> {
        let dm2 = (self.d - 2) as i32;
        let w = |theta: f64| self.raw_sym(theta.cos()) * theta.sin().powi(dm2);
        let n = CDF_SEGMENTS;
        let h = PI / n as f64;
        let theta: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
        let mut g = vec![0.0; n + 1];
        for i in 0..n {
            g[i + 1] = g[i] + gauss16(&w, theta[i], theta[i + 1]).max(0.0);
        }
        let total = g[n];
        if !(total > 0.0) {
            return Err(Error::InvalidParameter(
                "kernel has no angular mass; cannot tabulate its CDF".into(),
            ));
        }
        let dens: Vec<f64> = theta.iter().map(|&t| w(t) / total).collect();
        for v in g.iter_mut() {
            *v /= total;
        }
        g[n] = 1.0;
        MonotoneCubic::with_derivatives(theta, g, dens)
    }

    /// Tabulated CDF of the polar collision angle (d >= 2 only).
    pub fn cdf_table(&self) -> Option<&MonotoneCubic> {
        self.cdf.as_ref()
    }

    /// Momentum-transfer coefficient
    /// `rho_k = 2 |S^{d-2}| Int_0^pi k(cos t) cos^2 t sin^{d-2} t dt` for
    /// d >= 2. For d = 1 this returns the conventional value 1; note that the
    /// deterministic d = 1 sign flip damps the mean velocity at rate 2, which
    /// is exposed separately as [`Kernel::current_damping_rate`].
    pub fn rho_k(&self) -> Result<f64> {
        if self.d == 1 {
            return Ok(1.0);
        }
        let dm2 = (self.d - 2) as i32;
        let f = |theta: f64| {
            let c = theta.cos();
            self.density(c) * c * c * theta.sin().powi(dm2)
        };
        Ok(2.0 * sphere_surface(self.d - 2) * adaptive_simpson(&f, 0.0, PI, QUADRATURE_TOL)?)
    }

    /// Rate at which collisions relax the ensemble-mean velocity: equals
    /// `rho_k` for d >= 2. In d = 1 every collision flips the sign of `v`,
    /// so the mean decays at rate 2 (twice the conventional `rho_k` value);
    /// the current ODE and the d = 1 PDE must be driven with this rate.
    pub fn current_damping_rate(&self) -> Result<f64> {
        if self.d == 1 {
            Ok(2.0)
        } else {
            self.rho_k()
        }
    }

    /// Integral of the density over the sphere; 1 up to quadrature error.
    /// Exposed so tests and diagnostics can audit normalization.
    pub fn normalization(&self) -> Result<f64> {
        match self.d {
            1 => Ok(self.density(1.0) + self.density(-1.0)),
            _ => {
                let dm2 = (self.d - 2) as i32;
                let f = |theta: f64| self.density(theta.cos()) * theta.sin().powi(dm2);
                Ok(sphere_surface(self.d - 2) * adaptive_simpson(&f, 0.0, PI, QUADRATURE_TOL)?)
            }
        }
    }

    /// Draw a scatterer normal for incoming direction `v_hat` (d >= 2).
    pub fn sample_direction(&self, v_hat: &UnitVector, rng: &mut ChaCha8Rng) -> Result<UnitVector> {
        let u_theta: f64 = rng.random();
        let u_omega: f64 = rng.random();
        self.direction_from_variates(v_hat, u_theta, u_omega)
    }

    /// Deterministically map pre-drawn uniform variates to a scatterer
    /// normal: `u_theta` fixes the polar angle through the tabulated inverse
    /// CDF, `u_omega` the azimuth around `v_hat`.
    pub fn direction_from_variates(
        &self,
        v_hat: &UnitVector,
        u_theta: f64,
        u_omega: f64,
    ) -> Result<UnitVector> {
        if self.d == 1 {
            return Err(Error::UnsupportedDimension(
                "direction sampling is undefined in d = 1 (reflection is the sign flip)".into(),
            ));
        }
        if v_hat.dim() != self.d {
            return Err(Error::InvalidParameter(format!(
                "direction dimension {} does not match kernel dimension {}",
                v_hat.dim(),
                self.d
            )));
        }
        let cdf = self.cdf.as_ref().expect("cdf built for d >= 2");
        let theta = cdf.invert_monotone(u_theta.clamp(0.0, 1.0));
        let (sin_t, cos_t) = theta.sin_cos();
        let v = v_hat.components();
        let n = match self.d {
            2 => {
                let sign = if u_omega < 0.5 { -1.0 } else { 1.0 };
                // Perpendicular obtained by a quarter turn.
                [
                    cos_t * v[0] - sign * sin_t * v[1],
                    cos_t * v[1] + sign * sin_t * v[0],
                    0.0,
                ]
            }
            _ => {
                let phi = 2.0 * PI * u_omega;
                let (sin_p, cos_p) = phi.sin_cos();
                let (e1, e2) = orthonormal_frame(v);
                let mut n = util::scale(v, cos_t);
                for k in 0..3 {
                    n[k] += sin_t * (cos_p * e1[k] + sin_p * e2[k]);
                }
                n
            }
        };
        UnitVector::new(&n, self.d)
    }
}

/// Deterministic orthonormal pair completing a unit vector in d = 3: pick
/// the coordinate axis least aligned with `v` and orthogonalize.
fn orthonormal_frame(v: &Vec3) -> (Vec3, Vec3) {
    let mut axis = 0;
    for k in 1..3 {
        if v[k].abs() < v[axis].abs() {
            axis = k;
        }
    }
    let mut a = util::ZERO3;
    a[axis] = 1.0;
    let raw = util::cross(&a, v);
    let e1 = util::scale(&raw, 1.0 / util::norm(&raw));
    let e2 = util::cross(v, &e1);
    (e1, e2)
}

/// Specular reflection `v - 2 (v . n^) n^`. In d = 1 this is the sign flip.
pub fn reflect(v: &Vec3, n_hat: &UnitVector) -> Vec3 {
    let n = n_hat.components();
    let c = 2.0 * util::dot(v, n);
    [v[0] - c * n[0], v[1] - c * n[1], v[2] - c * n[2]]
}

/// Given a collision `v^ -> v^'` of one process and the partner direction
/// `w^` of the other, construct the matched outcome `w^'` with
///
/// * equal likelihood:   `v^ . v^' = w^ . w^'`
/// * equal displacement: `v^ . w^  = v^' . w^'`
///
/// so that applying both collisions preserves the particlewise distance of
/// equal-speed partners. The construction is deterministic: d = 1 scales by
/// the sign, d = 2 applies the rotation taking `v^` to `v^'`, d = 3 solves
/// the two constraints in the plane of `v^'` and `w^` and completes with the
/// lexicographically larger unit normal of that plane.
pub fn match_collision(
    v_hat: &UnitVector,
    v_hat_post: &UnitVector,
    w_hat: &UnitVector,
) -> Result<UnitVector> {
    let d = v_hat.dim();
    if v_hat_post.dim() != d || w_hat.dim() != d {
        return Err(Error::InvalidParameter(
            "matched collision needs all directions in the same dimension".into(),
        ));
    }
    let v = v_hat.components();
    let vp = v_hat_post.components();
    let w = w_hat.components();
    match d {
        1 => {
            let s = v[0] * vp[0];
            UnitVector::new(&[s * w[0], 0.0, 0.0], 1)
        }
        2 => {
            let cos_a = v[0] * vp[0] + v[1] * vp[1];
            let sin_a = v[0] * vp[1] - v[1] * vp[0];
            UnitVector::new(
                &[cos_a * w[0] - sin_a * w[1], sin_a * w[0] + cos_a * w[1], 0.0],
                2,
            )
        }
        _ => {
            // Orthonormal basis (e1, e2) of the plane spanned by v^' and w^.
            let e1 = *vp;
            let c = util::dot(vp, w);
            let mut raw = [w[0] - c * e1[0], w[1] - c * e1[1], w[2] - c * e1[2]];
            let s = util::norm(&raw);
            let degenerate = s < 1e-12;
            let e2 = if degenerate {
                orthonormal_frame(&e1).0
            } else {
                raw = util::scale(&raw, 1.0 / s);
                raw
            };
            let x1 = util::dot(v, &e1);
            let x2 = util::dot(v, &e2);
            // In-plane part p of w^' solving both constraints: writing the
            // projection of v^ as a*v^' + b*w^, the solution swaps the
            // coefficients, p = b*v^' + a*w^; |p| = |P v^| <= 1.
            let p = if degenerate {
                // w^ = sign(c) v^': both constraints reduce to the same
                // in-plane condition, satisfied by the reflected projection.
                let sigma = if c >= 0.0 { 1.0 } else { -1.0 };
                [
                    sigma * (x1 * e1[0] + x2 * e2[0]),
                    sigma * (x1 * e1[1] + x2 * e2[1]),
                    sigma * (x1 * e1[2] + x2 * e2[2]),
                ]
            } else {
                let b = x2 / s;
                let a = x1 - b * c;
                [
                    b * vp[0] + a * w[0],
                    b * vp[1] + a * w[1],
                    b * vp[2] + a * w[2],
                ]
            };
            let p2 = util::norm_sq(&p).min(1.0);
            let out_of_plane = 1.0 - p2;
            if out_of_plane < 1e-14 {
                // Fully in-plane: renormalize instead of synthesizing a
                // sqrt-of-roundoff normal component.
                return UnitVector::new(&p, 3);
            }
            let mut z = util::cross(&e1, &e2);
            // Lexicographically larger of the two plane normals.
            for k in 0..3 {
                if z[k] != 0.0 {
                    if z[k] < 0.0 {
                        z = util::scale(&z, -1.0);
                    }
                    break;
                }
            }
            let zc = out_of_plane.sqrt();
            UnitVector::new(&[p[0] + zc * z[0], p[1] + zc * z[1], p[2] + zc * z[2]], 3)
        }
    }
}

/// Result of reconstructing a collision normal from a pre/post pair.
#[derive(Debug, Clone, Copy)]
pub enum CollisionNormal {
    Normal(UnitVector),
    /// `w` and `w'` coincide (within [`NOOP_SEPARATION`]); no normal exists
    /// and the event should be logged as a no-op rather than synthesized.
    NoOp,
}

/// Reconstruct the scatterer normal `(w - w') / |w - w'|` of a reflection.
/// Requires equal speeds; a pair closer than [`NOOP_SEPARATION`] is flagged
/// as a no-op collision instead of inventing a direction.
pub fn collision_normal(w: &Vec3, w_post: &Vec3, d: usize) -> Result<CollisionNormal> {
    check_dim(d)?;
    let speed = util::norm(w);
    let speed_post = util::norm(w_post);
    if (speed - speed_post).abs() > 1e-9 * (1.0 + speed) {
        return Err(Error::InvalidParameter(format!(
            "collision normal needs equal speeds; got |w| = {speed}, |w'| = {speed_post}"
        )));
    }
    let diff = util::sub(w, w_post);
    if util::norm(&diff) < NOOP_SEPARATION {
        return Ok(CollisionNormal::NoOp);
    }
    Ok(CollisionNormal::Normal(UnitVector::new(&diff, d)?))
}
