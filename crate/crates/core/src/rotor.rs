//! SO(3) rotation kernel.
//!
//! Rotations are active and right-handed: `rodrigues(n, a)` turns a vector
//! counter-clockwise by `a` when viewed from the tip of `n`. In spin language
//! that is the propagator `exp(-i a n.I)` acting on a classical moment.
//!
//! Everything is a plain 3x3 matrix. Long products drift off the rotation
//! manifold slowly; [`RotationChain`] re-orthogonalises by polar
//! decomposition every [`REORTHO_INTERVAL`] compositions.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `|axis| - 1` accepted by the constructors.
pub const UNIT_TOL: f64 = 1e-9;
/// Tolerance on `|R^T R - I|` and `det R - 1` for a valid rotation.
pub const ORTHO_TOL: f64 = 1e-9;
/// Compositions between polar re-orthogonalisations in a chain.
pub const REORTHO_INTERVAL: usize = 10_000;
/// Rotation angles below this are treated as the identity by the axis solver.
pub const MIN_AXIS_ANGLE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotorError {
    #[error("axis is not a unit vector (|n| = {0})")]
    NonUnitAxis(f64),
    #[error("non-finite input")]
    NonFinite,
    #[error("matrix is not a proper rotation (orthogonality error {0:.3e})")]
    NotRotation(f64),
    #[error("rotation angle {0:.3e} rad is too small to define an axis")]
    AxisUndefined(f64),
    #[error("axis solver failed: {0}")]
    SolverFailure(&'static str),
}

pub type Result<T> = std::result::Result<T, RotorError>;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Unit vector along `self`; fails on zero or non-finite input.
    pub fn normalized(self) -> Result<Vec3> {
        if !self.is_finite() {
            return Err(RotorError::NonFinite);
        }
        let n = self.norm();
        if n == 0.0 {
            return Err(RotorError::NonUnitAxis(0.0));
        }
        Ok(self.scale(1.0 / n))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }

    /// Angle between two nonzero vectors in `[0, pi]`, stable near 0 and pi.
    pub fn angle_to(self, o: Vec3) -> f64 {
        self.cross(o).norm().atan2(self.dot(o))
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        self.scale(s)
    }
}

type Mat = [[f64; 3]; 3];

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let mut c = [[0.0; 3]; 3];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

fn transpose(a: &Mat) -> Mat {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = *v;
        }
    }
    t
}

fn det(a: &Mat) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Inverse transpose via the cofactor matrix.
fn inverse_transpose(a: &Mat) -> Option<Mat> {
    let d = det(a);
    if d.abs() < 1e-300 || !d.is_finite() {
        return None;
    }
    let mut c = [[0.0; 3]; 3];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
            let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
            *cell = (a[i1][j1] * a[i2][j2] - a[i1][j2] * a[i2][j1]) / d;
        }
    }
    Some(c)
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            m = m.max((a[i][j] - b[i][j]).abs());
        }
    }
    m
}

const IDENTITY_MAT: Mat = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Proper orthogonal 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation3 {
    m: Mat,
}

impl Default for Rotation3 {
    fn default() -> Self {
        Rotation3::IDENTITY
    }
}

impl Rotation3 {
    pub const IDENTITY: Rotation3 = Rotation3 { m: IDENTITY_MAT };

    /// Validates orthogonality and handedness to [`ORTHO_TOL`].
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RotorError::NonFinite);
        }
        let r = Rotation3 { m };
        let err = r.orthogonality_error();
        if err > ORTHO_TOL {
            return Err(RotorError::NotRotation(err));
        }
        Ok(r)
    }

    /// Rotation by `|v|` about `v`; the zero vector maps to the identity.
    pub fn from_rotation_vector(v: Vec3) -> Result<Self> {
        if !v.is_finite() {
            return Err(RotorError::NonFinite);
        }
        let angle = v.norm();
        if angle == 0.0 {
            return Ok(Rotation3::IDENTITY);
        }
        Ok(rodrigues_unchecked(v.scale(1.0 / angle), angle))
    }

    pub fn about_x(angle: f64) -> Self {
        rodrigues_unchecked(Vec3::X, angle)
    }

    pub fn about_z(angle: f64) -> Self {
        rodrigues_unchecked(Vec3::Z, angle)
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn inverse(&self) -> Self {
        Rotation3 {
            m: transpose(&self.m),
        }
    }

    pub fn trace(&self) -> f64 {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        // atan2 of the skew norm and the symmetric part stays accurate at both ends.
        let w = self.skew_vector();
        let s = 0.5 * w.norm();
        let c = 0.5 * (self.trace() - 1.0);
        s.atan2(c)
    }

    /// `max(|R^T R - I|_max, |det R - 1|)`.
    pub fn orthogonality_error(&self) -> f64 {
        let rtr = mat_mul(&transpose(&self.m), &self.m);
        max_abs_diff(&rtr, &IDENTITY_MAT).max((det(&self.m) - 1.0).abs())
    }

    /// Nearest rotation in the Frobenius sense (orthogonal polar factor).
    pub fn reorthogonalize(&self) -> Self {
        let mut x = self.m;
        for _ in 0..32 {
            let Some(xit) = inverse_transpose(&x) else {
                break;
            };
            let mut next = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    next[i][j] = 0.5 * (x[i][j] + xit[i][j]);
                }
            }
            let delta = max_abs_diff(&next, &x);
            x = next;
            if delta < 1e-16 {
                break;
            }
        }
        Rotation3 { m: x }
    }

    /// `(m21 - m12, m02 - m20, m10 - m01)`, equal to `2 sin(a) n`.
    fn skew_vector(&self) -> Vec3 {
        let m = &self.m;
        Vec3::new(m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1])
    }
}

impl Mul for Rotation3 {
    type Output = Rotation3;
    /// `a * b` applies `b` first.
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        compose(&self, &rhs)
    }
}

impl Mul<Vec3> for Rotation3 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        self.apply(v)
    }
}

fn rodrigues_unchecked(n: Vec3, angle: f64) -> Rotation3 {
    let (s, c) = angle.sin_cos();
    let k = 1.0 - c;
    let (x, y, z) = (n.x, n.y, n.z);
    Rotation3 {
        m: [
            [c + k * x * x, k * x * y - s * z, k * x * z + s * y],
            [k * y * x + s * z, c + k * y * y, k * y * z - s * x],
            [k * z * x - s * y, k * z * y + s * x, c + k * z * z],
        ],
    }
}

/// `R = I + sin(a) [n]x + (1 - cos(a)) [n]x^2` for a unit axis `n`.
pub fn rodrigues(axis: Vec3, angle: f64) -> Result<Rotation3> {
    if !axis.is_finite() || !angle.is_finite() {
        return Err(RotorError::NonFinite);
    }
    let n = axis.norm();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(RotorError::NonUnitAxis(n));
    }
    Ok(rodrigues_unchecked(axis, angle))
}

/// `a * b`: apply `b`, then `a`.
pub fn compose(a: &Rotation3, b: &Rotation3) -> Rotation3 {
    Rotation3 {
        m: mat_mul(&a.m, &b.m),
    }
}

/// Unit axis `n` with `R n = n`, signed so that the rotation angle is in `(0, pi]`.
///
/// Uses the skew part away from pi and the largest column of the symmetric
/// part near pi, where the skew part vanishes.
pub fn invariant_axis(r: &Rotation3) -> Result<Vec3> {
    let angle = r.angle();
    if angle < MIN_AXIS_ANGLE {
        return Err(RotorError::AxisUndefined(angle));
    }
    let w = r.skew_vector();
    let c = 0.5 * (r.trace() - 1.0);
    let axis = if c > -0.9 {
        w.normalized()
            .map_err(|_| RotorError::SolverFailure("vanishing skew part"))?
    } else {
        // R + R^T = 2c I + 2(1 - c) n n^T
        let m = &r.m;
        let k = 1.0 - c;
        let mut b = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let delta = if i == j { c } else { 0.0 };
                b[i][j] = (0.5 * (m[i][j] + m[j][i]) - delta) / k;
            }
        }
        let col = (0..3)
            .max_by(|&i, &j| b[i][i].total_cmp(&b[j][j]))
            .unwrap_or(0);
        let v = Vec3::new(b[0][col], b[1][col], b[2][col]);
        let v = v
            .normalized()
            .map_err(|_| RotorError::SolverFailure("degenerate symmetric part"))?;
        if v.dot(w) < 0.0 {
            -v
        } else {
            v
        }
    };
    if !axis.is_finite() {
        return Err(RotorError::SolverFailure("non-finite axis"));
    }
    let residual = (r.apply(axis) - axis).norm();
    if residual > 1e-7 {
        return Err(RotorError::SolverFailure("axis is not invariant"));
    }
    Ok(axis)
}

/// Great-circle angle between two unit vectors, in `[0, pi]`.
pub fn geodesic_distance(a: Vec3, b: Vec3) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(RotorError::NonFinite);
    }
    for v in [a, b] {
        let n = v.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(RotorError::NonUnitAxis(n));
        }
    }
    Ok(a.angle_to(b))
}

/// Running left-multiplied product `R_k ... R_1` with periodic re-orthogonalisation.
#[derive(Clone, Debug)]
pub struct RotationChain {
    acc: Rotation3,
    since_reortho: usize,
    interval: usize,
}

impl Default for RotationChain {
    fn default() -> Self {
        RotationChain::new()
    }
}

impl RotationChain {
    pub fn new() -> Self {
        RotationChain::with_interval(REORTHO_INTERVAL)
    }

    /// `interval == 0` disables re-orthogonalisation.
    pub fn with_interval(interval: usize) -> Self {
        RotationChain {
            acc: Rotation3::IDENTITY,
            since_reortho: 0,
            interval,
        }
    }

    /// Applies `r` after everything already in the chain.
    pub fn push(&mut self, r: &Rotation3) {
        self.acc = compose(r, &self.acc);
        self.since_reortho += 1;
        if self.interval > 0 && self.since_reortho >= self.interval {
            self.acc = self.acc.reorthogonalize();
            self.since_reortho = 0;
        }
    }

    pub fn product(&self) -> Rotation3 {
        self.acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn unit(theta: f64, phi: f64) -> Vec3 {
        Vec3::new(
            theta.sin() * phi.cos(),
            theta.sin() * phi.sin(),
            theta.cos(),
        )
    }

    #[test]
    fn quarter_turn_about_z_takes_x_to_y() {
        let r = rodrigues(Vec3::Z, PI / 2.0).unwrap();
        let v = r.apply(Vec3::X);
        assert_abs_diff_eq!(v.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.y, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.z, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn half_turn_about_x_is_diag() {
        let r = rodrigues(Vec3::X, PI).unwrap();
        let expect = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(max_abs_diff(&r.matrix(), &expect) < 1e-15);
    }

    #[test]
    fn non_unit_axis_rejected() {
        assert!(matches!(
            rodrigues(Vec3::new(1.0, 1.0, 0.0), 0.3),
            Err(RotorError::NonUnitAxis(_))
        ));
    }

    #[test]
    fn orthogonal_diagonal_vectors_are_quarter_apart() {
        let a = Vec3::new(1.0, 1.0, 0.0).normalized().unwrap();
        let b = Vec3::new(1.0, -1.0, 0.0).normalized().unwrap();
        assert_abs_diff_eq!(geodesic_distance(a, b).unwrap(), PI / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn identity_has_no_axis() {
        assert!(matches!(
            invariant_axis(&Rotation3::IDENTITY),
            Err(RotorError::AxisUndefined(_))
        ));
    }

    #[test]
    fn axis_near_pi_uses_symmetric_part() {
        let n = unit(1.1, -2.3);
        for angle in [PI, PI - 1e-10, PI - 1e-6, PI - 0.3] {
            let r = rodrigues(n, angle).unwrap();
            let got = invariant_axis(&r).unwrap();
            let sign = if angle == PI {
                got.dot(n).signum()
            } else {
                1.0
            };
            assert!((got.scale(sign) - n).norm() < 1e-8, "angle {angle}");
        }
    }

    #[test]
    fn from_matrix_rejects_reflection() {
        let m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(matches!(
            Rotation3::from_matrix(m),
            Err(RotorError::NotRotation(_))
        ));
    }

    #[test]
    fn reorthogonalize_recovers_rotation() {
        let r = rodrigues(unit(0.4, 0.9), 1.2).unwrap();
        let mut m = r.matrix();
        m[0][1] += 1e-6;
        m[2][0] -= 2e-6;
        let fixed = Rotation3 { m }.reorthogonalize();
        assert!(fixed.orthogonality_error() < 1e-14);
        assert!(max_abs_diff(&fixed.matrix(), &r.matrix()) < 1e-5);
    }

    fn nalgebra_polar(m: &Mat) -> Mat {
        let a = nalgebra::Matrix3::from_fn(|i, j| m[i][j]);
        let svd = a.svd(true, true);
        let q = svd.u.unwrap() * svd.v_t.unwrap();
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = q[(i, j)];
            }
        }
        out
    }

    #[test]
    fn thousand_random_compositions_stay_orthogonal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut chain = RotationChain::with_interval(0);
        for _ in 0..1000 {
            let n = unit(rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI));
            let a = rng.random_range(-PI..PI);
            chain.push(&rodrigues(n, a).unwrap());
        }
        let p = chain.product();
        assert!(p.orthogonality_error() < 1e-9);
        let oracle = nalgebra_polar(&p.matrix());
        let ours = p.reorthogonalize();
        assert!(max_abs_diff(&ours.matrix(), &oracle) < 1e-12);
        assert!(max_abs_diff(&ours.matrix(), &p.matrix()) < 1e-9);
    }

    #[test]
    fn chain_reorthogonalizes_periodically() {
        let r = rodrigues(unit(0.7, 0.2), 0.013).unwrap();
        let mut chain = RotationChain::with_interval(100);
        for _ in 0..1000 {
            chain.push(&r);
        }
        let expect = rodrigues(unit(0.7, 0.2), 13.0).unwrap();
        assert!(max_abs_diff(&chain.product().matrix(), &expect.matrix()) < 1e-11);
        assert!(chain.product().orthogonality_error() < 1e-14);
    }

    fn arb_unit() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, 0.0..2.0 * PI).prop_map(|(c, phi)| {
            let s = (1.0 - c * c).sqrt();
            Vec3::new(s * phi.cos(), s * phi.sin(), c)
        })
    }

    proptest! {
        #[test]
        fn rodrigues_is_proper_orthogonal(n in arb_unit(), a in -10.0f64..10.0) {
            let r = rodrigues(n, a).unwrap();
            prop_assert!(r.orthogonality_error() < 1e-12);
        }

        #[test]
        fn axis_round_trip(n in arb_unit(), a in 1e-3f64..(PI - 1e-3)) {
            let r = rodrigues(n, a).unwrap();
            let got = invariant_axis(&r).unwrap();
            prop_assert!((got - n).norm() < 1e-9);
            prop_assert!((r.angle() - a).abs() < 1e-12);
        }

        #[test]
        fn negative_angle_flips_reported_axis(n in arb_unit(), a in 1e-3f64..(PI - 1e-3)) {
            let r = rodrigues(n, -a).unwrap();
            let got = invariant_axis(&r).unwrap();
            prop_assert!((got + n).norm() < 1e-9);
        }

        #[test]
        fn composition_is_associative(
            n1 in arb_unit(), n2 in arb_unit(), n3 in arb_unit(),
            a1 in -PI..PI, a2 in -PI..PI, a3 in -PI..PI,
        ) {
            let (r1, r2, r3) = (
                rodrigues(n1, a1).unwrap(),
                rodrigues(n2, a2).unwrap(),
                rodrigues(n3, a3).unwrap(),
            );
            let left = compose(&compose(&r1, &r2), &r3);
            let right = compose(&r1, &compose(&r2, &r3));
            prop_assert!(max_abs_diff(&left.matrix(), &right.matrix()) < 1e-14);
        }

        #[test]
        fn geodesic_is_symmetric_and_bounded(a in arb_unit(), b in arb_unit()) {
            let d1 = geodesic_distance(a, b).unwrap();
            let d2 = geodesic_distance(b, a).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-15);
            prop_assert!((0.0..=PI).contains(&d1));
        }
    }
}
