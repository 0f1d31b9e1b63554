//! Differentiable geometry kernels: quaternion rotation, covariance assembly,
//! EWA projection of 3D Gaussians into the image plane and 2D evaluation.
//!
//! Every forward kernel has a `_backward` companion returning the
//! vector-Jacobian product for a given upstream gradient.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::scene::Camera;

/// Added to both diagonal entries of the projected covariance (px²).
pub const BLUR_FLOOR: f64 = 0.3;
/// Minimum camera-space depth for a Gaussian to be projected.
pub const NEAR_PLANE: f64 = 0.01;
/// Frustum culling guard band, as a multiple of the image half-extent.
pub const GUARD_BAND: f64 = 1.3;
/// Footprint extent in standard deviations.
pub const RADIUS_SIGMAS: f64 = 3.0;

const DEGENERATE_QUAT_NORM: f64 = 1e-8;

/// Hamilton product of (w, x, y, z) quaternions.
#[inline]
pub fn quat_mul<T: Real>(a: &Vector4<T>, b: &Vector4<T>) -> Vector4<T> {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    Vector4::new(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )
}

/// Gradients of `quat_mul(a, b)` with respect to `a` and `b`.
pub fn quat_mul_backward<T: Real>(a: &Vector4<T>, b: &Vector4<T>, d_out: &Vector4<T>) -> (Vector4<T>, Vector4<T>) {
    // out = L(a) b = R(b) a, with L/R the left/right multiplication matrices.
    let left = |q: &Vector4<T>| {
        let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
        nalgebra::Matrix4::new(w, -x, -y, -z, x, w, -z, y, y, z, w, -x, z, -y, x, w)
    };
    let right = |q: &Vector4<T>| {
        let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
        nalgebra::Matrix4::new(w, -x, -y, -z, x, w, z, -y, y, -z, w, x, z, y, -x, w)
    };
    (right(b).transpose() * d_out, left(a).transpose() * d_out)
}

/// Unit quaternion in the direction of `q`. Inputs already unit-norm to
/// within a few ulps are returned unchanged, so the map is idempotent.
pub fn quat_normalize<T: Real>(q: &Vector4<T>) -> Result<Vector4<T>> {
    let n2 = q.norm_squared();
    let n2f = n2.to_f64();
    if !n2f.is_finite() || n2f.sqrt() < DEGENERATE_QUAT_NORM {
        return Err(Error::DegenerateQuaternion(n2f.sqrt()));
    }
    if (n2 - T::one()).abs() <= T::lit(4.0) * T::EPS {
        return Ok(*q);
    }
    Ok(*q / n2.sqrt())
}

/// Gradient of `quat_normalize` (the derivative of `q / |q|`).
pub fn quat_normalize_backward<T: Real>(q: &Vector4<T>, d_out: &Vector4<T>) -> Vector4<T> {
    let n = q.norm();
    let u = *q / n;
    (d_out - u * u.dot(d_out)) / n
}

/// Rotation matrix of the normalized quaternion `q = (w, x, y, z)`.
pub fn quat_to_rotation<T: Real>(q: &Vector4<T>) -> Result<Matrix3<T>> {
    let u = quat_normalize(q)?;
    Ok(unit_quat_to_rotation(&u))
}

fn unit_quat_to_rotation<T: Real>(u: &Vector4<T>) -> Matrix3<T> {
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let one = T::one();
    let two = T::lit(2.0);
    Matrix3::new(
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    )
}

pub fn quat_to_rotation_backward<T: Real>(q: &Vector4<T>, d_rot: &Matrix3<T>) -> Result<Vector4<T>> {
    let u = quat_normalize(q)?;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let g = |r: usize, c: usize| d_rot[(r, c)];
    let two = T::lit(2.0);
    let d_unit = Vector4::new(
        two * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        two * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - two * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - two * x * g(2, 2)),
        two * (-two * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - two * y * g(2, 2)),
        two * (-two * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - two * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1)),
    );
    Ok(quat_normalize_backward(q, &d_unit))
}

/// `Σ = R diag(s²) Rᵀ` for per-axis scales `s` and rotation `q`.
pub fn build_covariance<T: Real>(s: &Vector3<T>, q: &Vector4<T>) -> Result<Matrix3<T>> {
    let r = quat_to_rotation(q)?;
    let m = r * Matrix3::from_diagonal(s);
    Ok(m * m.transpose())
}

/// Returns `(dL/ds, dL/dq)` given `dL/dΣ`.
pub fn build_covariance_backward<T: Real>(
    s: &Vector3<T>,
    q: &Vector4<T>,
    d_sigma: &Matrix3<T>,
) -> Result<(Vector3<T>, Vector4<T>)> {
    let r = quat_to_rotation(q)?;
    let m = r * Matrix3::from_diagonal(s);
    let d_m = (d_sigma + d_sigma.transpose()) * m;
    let mut d_s = Vector3::zeros();
    let mut d_r = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            d_s[j] += d_m[(i, j)] * r[(i, j)];
            d_r[(i, j)] = d_m[(i, j)] * s[j];
        }
    }
    Ok((d_s, quat_to_rotation_backward(q, &d_r)?))
}

/// Camera parameters converted once per render pass.
#[derive(Clone, Copy, Debug)]
pub struct CameraView<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraView<T> {
    pub fn new(cam: &Camera) -> Self {
        Self {
            rotation: cam.rotation_as(),
            translation: cam.translation_as(),
            fx: T::lit(cam.fx),
            fy: T::lit(cam.fy),
            cx: T::lit(cam.cx),
            cy: T::lit(cam.cy),
            width: cam.width,
            height: cam.height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian<T: Real> {
    /// Center in pixel coordinates.
    pub mean2d: Vector2<T>,
    /// Regularized screen-space covariance (blur floor included).
    pub cov2d: Matrix2<T>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<T>,
    /// Camera-space z of the center.
    pub depth: T,
    /// `3 * sqrt(max eigenvalue of cov2d)`.
    pub radius: T,
    pub cam_point: Vector3<T>,
}

fn jacobian<T: Real>(t: &Vector3<T>, fx: T, fy: T) -> Matrix2x3<T> {
    let iz = T::one() / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(fx * iz, T::zero(), -fx * t.x * iz2, T::zero(), fy * iz, -fy * t.y * iz2)
}

/// Projects a world-space Gaussian. Returns `None` when culled by the near
/// plane or the frustum guard band.
pub fn project_gaussian<T: Real>(
    x: &Vector3<T>,
    sigma: &Matrix3<T>,
    cam: &CameraView<T>,
) -> Option<ProjectedGaussian<T>> {
    let t = cam.rotation * x + cam.translation;
    if t.z <= T::lit(NEAR_PLANE) {
        return None;
    }
    let px = cam.fx * t.x / t.z;
    let py = cam.fy * t.y / t.z;
    let band = T::lit(GUARD_BAND);
    let (w, h) = (T::lit(cam.width as f64), T::lit(cam.height as f64));
    if px < -band * cam.cx || px > band * (w - cam.cx) || py < -band * cam.cy || py > band * (h - cam.cy) {
        return None;
    }
    let tm = jacobian(&t, cam.fx, cam.fy) * cam.rotation;
    let floor = T::lit(BLUR_FLOOR);
    let cov2d = tm * sigma * tm.transpose() + Matrix2::identity() * floor;
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let det = a * c - b * b;
    if !(det > T::zero()) {
        return None;
    }
    let conic = Matrix2::new(c / det, -b / det, -b / det, a / det);
    let half = T::lit(0.5);
    let mid = half * (a + c);
    let lambda_max = mid + (half * (a - c) * half * (a - c) + b * b).sqrt();
    Some(ProjectedGaussian {
        mean2d: Vector2::new(px + cam.cx, py + cam.cy),
        cov2d,
        conic,
        depth: t.z,
        radius: T::lit(RADIUS_SIGMAS) * lambda_max.sqrt(),
        cam_point: t,
    })
}

/// Upstream gradients flowing into one projected Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGrad<T: Real> {
    pub mean2d: Vector2<T>,
    /// Gradient with respect to the full 2x2 conic matrix.
    pub conic: Matrix2<T>,
    pub depth: T,
}

impl<T: Real> Default for ProjectedGrad<T> {
    fn default() -> Self {
        Self { mean2d: Vector2::zeros(), conic: Matrix2::zeros(), depth: T::zero() }
    }
}

/// Returns `(dL/dx, dL/dΣ)` for a Gaussian that was not culled.
pub fn project_gaussian_backward<T: Real>(
    x: &Vector3<T>,
    sigma: &Matrix3<T>,
    cam: &CameraView<T>,
    proj: &ProjectedGaussian<T>,
    grad: &ProjectedGrad<T>,
) -> (Vector3<T>, Matrix3<T>) {
    let _ = x;
    let t = proj.cam_point;
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = T::one() / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let two = T::lit(2.0);

    let conic = proj.conic;
    let d_cov2d = -(conic * grad.conic * conic);

    let j = jacobian(&t, fx, fy);
    let tm = j * cam.rotation;
    let d_sigma = tm.transpose() * d_cov2d * tm;
    let d_tm = (d_cov2d + d_cov2d.transpose()) * tm * sigma;
    let d_j = d_tm * cam.rotation.transpose();

    let mut d_t = Vector3::zeros();
    d_t.x += d_j[(0, 2)] * (-fx * iz2);
    d_t.y += d_j[(1, 2)] * (-fy * iz2);
    d_t.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (two * fx * t.x * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (two * fy * t.y * iz3);

    d_t.x += grad.mean2d.x * fx * iz;
    d_t.y += grad.mean2d.y * fy * iz;
    d_t.z += -grad.mean2d.x * fx * t.x * iz2 - grad.mean2d.y * fy * t.y * iz2;
    d_t.z += grad.depth;

    (cam.rotation.transpose() * d_t, d_sigma)
}

/// Exponent `-½ Δᵀ C Δ` of the 2D Gaussian at `pixel`.
#[inline]
pub fn gaussian_power<T: Real>(g: &ProjectedGaussian<T>, pixel: &Vector2<T>) -> T {
    let d = pixel - g.mean2d;
    let c = &g.conic;
    T::lit(-0.5) * (c[(0, 0)] * d.x * d.x + c[(1, 1)] * d.y * d.y) - c[(0, 1)] * d.x * d.y
}

pub fn eval_gaussian_2d<T: Real>(g: &ProjectedGaussian<T>, pixel: &Vector2<T>) -> T {
    gaussian_power(g, pixel).exp()
}

/// Gradients of `eval_gaussian_2d` as `(dL/dmean2d, dL/dconic, dL/dpixel)`.
pub fn eval_gaussian_2d_backward<T: Real>(
    g: &ProjectedGaussian<T>,
    pixel: &Vector2<T>,
    d_value: T,
) -> (Vector2<T>, Matrix2<T>, Vector2<T>) {
    let d = pixel - g.mean2d;
    let value = eval_gaussian_2d(g, pixel);
    let d_power = d_value * value;
    // power = -½ dᵀ C d with C symmetric.
    let cd = g.conic * d;
    let d_pixel = -cd * d_power;
    let d_conic = d * d.transpose() * (T::lit(-0.5) * d_power);
    (-d_pixel, d_conic, d_pixel)
}
