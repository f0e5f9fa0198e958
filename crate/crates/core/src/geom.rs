//! Elementary 3D geometry: vectors, unit quaternions, rigid transforms,
//! weighted rotation fitting (Kabsch), rigid registration (Umeyama without
//! scale), and farthest point sampling.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use crate::{Error, Result};

/// Relative singular-value floor below which a cross-covariance is treated
/// as rank-deficient for rotation recovery (rank ≤ 1: all offsets collinear
/// or zero). Rank 2 is fine: a planar point set still pins down a rotation.
const RANK_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Vec3

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub const fn vec3(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3 { x, y, z }
}

impl Vec3 {
    pub const ZERO: Vec3 = vec3(0.0, 0.0, 0.0);

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        vec3(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn dist_sq(self, o: Vec3) -> f64 {
        (self - o).norm_sq()
    }

    /// None when the vector is too short to carry a direction.
    pub fn try_normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n > 1e-300 {
            Some(self / n)
        } else {
            None
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Component-wise clamp into the box [lo, hi].
    pub fn clamp_box(self, lo: Vec3, hi: Vec3) -> Vec3 {
        vec3(
            self.x.clamp(lo.x, hi.x),
            self.y.clamp(lo.y, hi.y),
            self.z.clamp(lo.z, hi.z),
        )
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        vec3(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        vec3(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        vec3(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        vec3(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        vec3(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        vec3(self.x / s, self.y / s, self.z / s)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let mut c = Vec3::ZERO;
    for p in points {
        c += *p;
    }
    c / points.len() as f64
}

// ---------------------------------------------------------------------------
// Mat3

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        vec3(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, ok) in o.0.iter().enumerate() {
                    r[i][j] += self.0[i][k] * ok[j];
                }
            }
        }
        Mat3(r)
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

// ---------------------------------------------------------------------------
// UnitQuat

/// Unit quaternion (w, x, y, z), scalar first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    /// Normalizes the components to unit length. None for a near-zero or
    /// non-finite quaternion.
    pub fn try_new(w: f64, x: f64, y: f64, z: f64) -> Option<UnitQuat> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return None;
        }
        // Pure-scalar quaternions normalize exactly; this keeps identity
        // blends bit-stable instead of drifting through sqrt rounding.
        if x == 0.0 && y == 0.0 && z == 0.0 {
            if w == 0.0 {
                return None;
            }
            return Some(UnitQuat { w: if w > 0.0 { 1.0 } else { -1.0 }, x: 0.0, y: 0.0, z: 0.0 });
        }
        let n2 = w * w + x * x + y * y + z * z;
        if n2 < 1e-290 {
            return None;
        }
        if n2 == 1.0 {
            return Some(UnitQuat { w, x, y, z });
        }
        let n = n2.sqrt();
        Some(UnitQuat { w: w / n, x: x / n, y: y / n, z: z / n })
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Option<UnitQuat> {
        let dir = axis.try_normalized()?;
        let (s, c) = (angle / 2.0).sin_cos();
        UnitQuat::try_new(c, dir.x * s, dir.y * s, dir.z * s)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(self, o: UnitQuat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn conjugate(self) -> UnitQuat {
        UnitQuat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self ⊙ o` (apply `o` first, then `self`). Inputs are
    /// unit, so the product stays unit to rounding; no renormalization.
    pub fn compose(self, o: UnitQuat) -> UnitQuat {
        UnitQuat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    /// Rotates a vector. Written so the identity quaternion returns the input
    /// bitwise (t vanishes exactly when the vector part is zero).
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let q = vec3(self.x, self.y, self.z);
        let t = q.cross(v) * 2.0;
        v + t * self.w + q.cross(t)
    }

    pub fn to_mat3(self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ])
    }

    /// Shepperd's method; assumes `m` is a proper rotation.
    pub fn from_mat3(m: &Mat3) -> UnitQuat {
        let a = &m.0;
        let trace = a[0][0] + a[1][1] + a[2][2];
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (a[2][1] - a[1][2]) / s;
            y = (a[0][2] - a[2][0]) / s;
            z = (a[1][0] - a[0][1]) / s;
        } else if a[0][0] > a[1][1] && a[0][0] > a[2][2] {
            let s = (1.0 + a[0][0] - a[1][1] - a[2][2]).sqrt() * 2.0;
            w = (a[2][1] - a[1][2]) / s;
            x = 0.25 * s;
            y = (a[0][1] + a[1][0]) / s;
            z = (a[0][2] + a[2][0]) / s;
        } else if a[1][1] > a[2][2] {
            let s = (1.0 + a[1][1] - a[0][0] - a[2][2]).sqrt() * 2.0;
            w = (a[0][2] - a[2][0]) / s;
            x = (a[0][1] + a[1][0]) / s;
            y = 0.25 * s;
            z = (a[1][2] + a[2][1]) / s;
        } else {
            let s = (1.0 + a[2][2] - a[0][0] - a[1][1]).sqrt() * 2.0;
            w = (a[1][0] - a[0][1]) / s;
            x = (a[0][2] + a[2][0]) / s;
            y = (a[1][2] + a[2][1]) / s;
            z = 0.25 * s;
        }
        UnitQuat::try_new(w, x, y, z).unwrap_or(UnitQuat::IDENTITY)
    }

    /// Rotation angle in radians, in [0, π]. atan2 form stays well
    /// conditioned near the identity where acos(w) loses digits.
    pub fn angle(self) -> f64 {
        let v = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * v.atan2(self.w.abs())
    }

    /// Angular distance to another rotation, in radians.
    pub fn angle_to(self, o: UnitQuat) -> f64 {
        self.conjugate().compose(o).angle()
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

// ---------------------------------------------------------------------------
// RigidTransform

/// Proper rigid motion p ↦ R·p + t.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform =
        RigidTransform { rotation: Mat3::IDENTITY, translation: Vec3::ZERO };

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }
}

// ---------------------------------------------------------------------------
// Rotation / rigid fitting

#[derive(Clone, Copy, Debug)]
pub struct RotationFit {
    pub rotation: UnitQuat,
    /// True when the offsets were rank-deficient (collinear or zero) and the
    /// identity was returned instead of a least-squares solution.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct RigidFit {
    pub transform: RigidTransform,
    pub degenerate: bool,
}

/// Least-squares rotation R minimizing Σ_j ‖R(p_j − c_src) − (p'_j − c_dst)‖²
/// over SO(3), by SVD of the 3×3 cross-covariance with determinant sign
/// correction. Degenerate neighborhoods (all offsets collinear or zero) yield
/// the identity with the flag set.
pub fn fit_rotation(
    center_src: Vec3,
    center_dst: Vec3,
    neighbors_src: &[Vec3],
    neighbors_dst: &[Vec3],
) -> Result<RotationFit> {
    if neighbors_src.is_empty() {
        return Err(Error::invalid("fit_rotation: empty neighbor set"));
    }
    if neighbors_src.len() != neighbors_dst.len() {
        return Err(Error::shape(format!(
            "fit_rotation: {} source vs {} destination neighbors",
            neighbors_src.len(),
            neighbors_dst.len()
        )));
    }
    let mut cov = [[0.0; 3]; 3];
    for (s, d) in neighbors_src.iter().zip(neighbors_dst) {
        let a = *s - center_src;
        let b = *d - center_dst;
        let (a, b) = (a.to_array(), b.to_array());
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += b[i] * a[j];
            }
        }
    }
    Ok(kabsch(&cov))
}

/// Least-squares rigid transform mapping `src` toward `dst` (Umeyama without
/// scale). Fewer than 3 points or a rank-deficient covariance yields the
/// identity with the flag set; mismatched lengths are an error.
pub fn fit_rigid_transform(src: &[Vec3], dst: &[Vec3]) -> Result<RigidFit> {
    if src.len() != dst.len() {
        return Err(Error::shape(format!(
            "fit_rigid_transform: {} source vs {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Ok(RigidFit { transform: RigidTransform::IDENTITY, degenerate: true });
    }
    let c_src = centroid(src);
    let c_dst = centroid(dst);
    let mut cov = [[0.0; 3]; 3];
    for (s, d) in src.iter().zip(dst) {
        let a = (*s - c_src).to_array();
        let b = (*d - c_dst).to_array();
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += b[i] * a[j];
            }
        }
    }
    let fit = kabsch(&cov);
    if fit.degenerate {
        return Ok(RigidFit { transform: RigidTransform::IDENTITY, degenerate: true });
    }
    let rotation = fit.rotation.to_mat3();
    let translation = c_dst - rotation.mul_vec(c_src);
    Ok(RigidFit { transform: RigidTransform { rotation, translation }, degenerate: false })
}

/// Kabsch core: proper rotation closest to the cross-covariance `cov`
/// (Σ dst·srcᵀ over centered pairs).
fn kabsch(cov: &[[f64; 3]; 3]) -> RotationFit {
    let m = nalgebra::Matrix3::new(
        cov[0][0], cov[0][1], cov[0][2], cov[1][0], cov[1][1], cov[1][2], cov[2][0], cov[2][1],
        cov[2][2],
    );
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return RotationFit { rotation: UnitQuat::IDENTITY, degenerate: true },
    };
    // Order singular triplets descending so the sign correction lands on the
    // smallest singular value.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s0 = svd.singular_values[order[0]];
    let s1 = svd.singular_values[order[1]];
    if !(s0.is_finite() && s1.is_finite()) || s0 <= 0.0 || s1 <= RANK_TOL * s0 {
        return RotationFit { rotation: UnitQuat::IDENTITY, degenerate: true };
    }
    let u = nalgebra::Matrix3::from_columns(&[
        u.column(order[0]).into_owned(),
        u.column(order[1]).into_owned(),
        u.column(order[2]).into_owned(),
    ]);
    let v_t = nalgebra::Matrix3::from_rows(&[
        v_t.row(order[0]).into_owned(),
        v_t.row(order[1]).into_owned(),
        v_t.row(order[2]).into_owned(),
    ]);
    let sign = (u.determinant() * v_t.determinant()).signum();
    let d = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, sign));
    let r = u * d * v_t;
    let rot = Mat3([
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ]);
    RotationFit { rotation: UnitQuat::from_mat3(&rot), degenerate: false }
}

// ---------------------------------------------------------------------------
// Farthest point sampling

#[derive(Clone, Copy, Debug)]
pub enum FpsSelect {
    /// Exactly this many points.
    Count(usize),
    /// Keep selecting while the best candidate is at least this far from
    /// every selected point.
    MinDist(f64),
}

/// Greedy farthest point sampling. Selection starts from the point nearest
/// the centroid: the first selected index is the one farthest from that
/// seed, and each later index maximizes the min-distance to the already
/// selected set (the seed itself carries no weight after the first pick).
/// Ties break toward the lowest index, so the result is deterministic.
pub fn farthest_point_sample(points: &[Vec3], select: FpsSelect) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::invalid("farthest_point_sample: empty point set"));
    }
    match select {
        FpsSelect::Count(n) if n > points.len() => {
            return Err(Error::invalid(format!(
                "farthest_point_sample: requested {n} of {} points",
                points.len()
            )));
        }
        FpsSelect::MinDist(d) if !(d > 0.0) => {
            return Err(Error::invalid("farthest_point_sample: min_dist must be > 0"));
        }
        _ => {}
    }

    let c = centroid(points);
    let mut seed = 0;
    let mut best = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = p.dist_sq(c);
        if d < best {
            best = d;
            seed = i;
        }
    }

    let mut min_d2: Vec<f64> = points.iter().map(|p| p.dist_sq(points[seed])).collect();
    let mut taken = vec![false; points.len()];
    let mut selected = Vec::new();
    let target = match select {
        FpsSelect::Count(n) => n,
        FpsSelect::MinDist(_) => points.len(),
    };

    while selected.len() < target {
        let mut pick = usize::MAX;
        let mut pick_d2 = f64::NEG_INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            if !taken[i] && d2 > pick_d2 {
                pick_d2 = d2;
                pick = i;
            }
        }
        if let FpsSelect::MinDist(d) = select {
            // First pick is unconditional: even a fully coincident cloud
            // yields one representative.
            if !selected.is_empty() && pick_d2 < d * d {
                break;
            }
        }
        taken[pick] = true;
        selected.push(pick);
        if selected.len() == 1 {
            // The seed only anchors the first pick; from here the field is
            // the min-distance to the selected set alone.
            for (i, d2) in min_d2.iter_mut().enumerate() {
                *d2 = points[i].dist_sq(points[pick]);
            }
        } else {
            for (i, d2) in min_d2.iter_mut().enumerate() {
                let nd = points[i].dist_sq(points[pick]);
                if nd < *d2 {
                    *d2 = nd;
                }
            }
        }
    }
    Ok(selected)
}
