//! Core data types shared by every stage: the canonical Gaussian cloud, the
//! pinhole camera, per-frame observations and render buffers.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::BackwardCache;
use crate::real::Real;

/// Dense row-major 2D buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<P> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<P>,
}

impl<P: Clone> Grid<P> {
    pub fn filled(width: usize, height: usize, value: P) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self { width, height, data }
    }
}

impl<P> Grid<P> {
    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &P {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut P {
        let w = self.width;
        &mut self.data[v * w + u]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<Q>(&self, other: &Grid<Q>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<Q>(&self, f: impl FnMut(&P) -> Q) -> Grid<Q> {
        Grid { width: self.width, height: self.height, data: self.data.iter().map(f).collect() }
    }
}

pub type RgbImage<T> = Grid<Vector3<T>>;
pub type ScalarImage<T> = Grid<T>;
/// `true` marks an occluder (tool) pixel.
pub type Mask = Grid<bool>;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Canonical-space Gaussian cloud, stored in unconstrained parameters:
/// scales as logs, opacities as logits, rotations as (w, x, y, z) quaternions.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet<T: Real> {
    pub positions: Vec<Vector3<T>>,
    pub log_scales: Vec<Vector3<T>>,
    pub rotations: Vec<Vector4<T>>,
    pub opacity_logits: Vec<T>,
    pub colors: Vec<Vector3<T>>,
    /// Spherical-harmonics degree of `colors`; only degree 0 is supported.
    pub sh_degree: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Empty,
    LengthMismatch { field: &'static str, len: usize, expected: usize },
    NonUnitQuaternion { index: usize, norm: f64 },
    InvalidScale { index: usize },
    NonFinite { field: &'static str, index: usize },
    ColorOutOfRange { index: usize },
    UnsupportedShDegree(u8),
}

pub const QUATERNION_UNIT_TOLERANCE: f64 = 1e-6;

impl<T: Real> Default for GaussianSet<T> {
    fn default() -> Self {
        Self {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            colors: Vec::new(),
            sh_degree: 0,
        }
    }
}

impl<T: Real> GaussianSet<T> {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            opacity_logits: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            sh_degree: 0,
        }
    }

    pub fn push(
        &mut self,
        position: Vector3<T>,
        log_scale: Vector3<T>,
        rotation: Vector4<T>,
        opacity_logit: T,
        color: Vector3<T>,
    ) {
        self.positions.push(position);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation);
        self.opacity_logits.push(opacity_logit);
        self.colors.push(color);
    }

    /// Appends a copy of Gaussian `i`.
    pub fn push_copy(&mut self, i: usize) {
        self.push(self.positions[i], self.log_scales[i], self.rotations[i], self.opacity_logits[i], self.colors[i]);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn opacity(&self, i: usize) -> T {
        sigmoid(self.opacity_logits[i])
    }

    pub fn scale(&self, i: usize) -> Vector3<T> {
        self.log_scales[i].map(|l| l.exp())
    }

    /// Keeps only the Gaussians for which `keep` is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        fn filter<X: Copy>(v: &mut Vec<X>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        filter(&mut self.positions, keep);
        filter(&mut self.log_scales, keep);
        filter(&mut self.rotations, keep);
        filter(&mut self.opacity_logits, keep);
        filter(&mut self.colors, keep);
    }

    pub fn renormalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = q.norm();
            if n > T::zero() {
                *q /= n;
            }
        }
    }

    pub fn clamp_colors(&mut self) {
        for c in &mut self.colors {
            *c = c.map(|v| v.max(T::zero()).min(T::one()));
        }
    }

    pub fn cast<U: Real>(&self) -> GaussianSet<U> {
        let v3 = |v: &Vector3<T>| v.map(|x| U::lit(x.to_f64()));
        GaussianSet {
            positions: self.positions.iter().map(v3).collect(),
            log_scales: self.log_scales.iter().map(v3).collect(),
            rotations: self.rotations.iter().map(|q| q.map(|x| U::lit(x.to_f64()))).collect(),
            opacity_logits: self.opacity_logits.iter().map(|&x| U::lit(x.to_f64())).collect(),
            colors: self.colors.iter().map(v3).collect(),
            sh_degree: self.sh_degree,
        }
    }

    /// 64-bit FNV-1a digest over every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |x: T| {
            let b = x.bits();
            for k in 0..8 {
                h ^= (b >> (8 * k)) & 0xff;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(T::lit(self.len() as f64));
        for i in 0..self.len() {
            self.positions[i].iter().for_each(|&x| eat(x));
            self.log_scales[i].iter().for_each(|&x| eat(x));
            self.rotations[i].iter().for_each(|&x| eat(x));
            eat(self.opacity_logits[i]);
            self.colors[i].iter().for_each(|&x| eat(x));
        }
        h
    }

    /// Reports every violated invariant; never aborts.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.positions.len();
        if n == 0 {
            out.push(Violation::Empty);
        }
        if self.sh_degree != 0 {
            out.push(Violation::UnsupportedShDegree(self.sh_degree));
        }
        let lens = [
            ("log_scales", self.log_scales.len()),
            ("rotations", self.rotations.len()),
            ("opacity_logits", self.opacity_logits.len()),
            ("colors", self.colors.len()),
        ];
        let mut consistent = true;
        for (field, len) in lens {
            if len != n {
                consistent = false;
                out.push(Violation::LengthMismatch { field, len, expected: n });
            }
        }
        if !consistent {
            return out;
        }
        for i in 0..n {
            if !self.positions[i].iter().all(|x| x.is_finite_val()) {
                out.push(Violation::NonFinite { field: "positions", index: i });
            }
            let norm = self.rotations[i].norm().to_f64();
            if !((norm - 1.0).abs() <= QUATERNION_UNIT_TOLERANCE) {
                out.push(Violation::NonUnitQuaternion { index: i, norm });
            }
            let scale_ok = self.log_scales[i].iter().all(|l| {
                let s = l.to_f64().exp();
                s.is_finite() && s > 0.0
            });
            if !scale_ok {
                out.push(Violation::InvalidScale { index: i });
            }
            if !self.opacity_logits[i].is_finite_val() {
                out.push(Violation::NonFinite { field: "opacity_logits", index: i });
            }
            let c = &self.colors[i];
            if !c.iter().all(|x| x.is_finite_val()) {
                out.push(Violation::NonFinite { field: "colors", index: i });
            } else if c.iter().any(|&x| x < T::zero() || x > T::one()) {
                out.push(Violation::ColorOutOfRange { index: i });
            }
        }
        out
    }
}

/// Gradient of a scalar loss with respect to every Gaussian parameter,
/// laid out like [`GaussianSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads<T: Real> {
    pub positions: Vec<Vector3<T>>,
    pub log_scales: Vec<Vector3<T>>,
    pub rotations: Vec<Vector4<T>>,
    pub opacity_logits: Vec<T>,
    pub colors: Vec<Vector3<T>>,
}

impl<T: Real> GaussianGrads<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            rotations: vec![Vector4::zeros(); n],
            opacity_logits: vec![T::zero(); n],
            colors: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.positions[i] += other.positions[i];
            self.log_scales[i] += other.log_scales[i];
            self.rotations[i] += other.rotations[i];
            self.opacity_logits[i] += other.opacity_logits[i];
            self.colors[i] += other.colors[i];
        }
    }

    pub fn scale(&mut self, k: T) {
        for i in 0..self.len() {
            self.positions[i] *= k;
            self.log_scales[i] *= k;
            self.rotations[i] *= k;
            self.opacity_logits[i] *= k;
            self.colors[i] *= k;
        }
    }

    /// All values flattened in field order, for comparisons in tests.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len() * 14);
        self.positions.iter().for_each(|v| out.extend(v.iter()));
        self.log_scales.iter().for_each(|v| out.extend(v.iter()));
        self.rotations.iter().for_each(|v| out.extend(v.iter()));
        out.extend(self.opacity_logits.iter());
        self.colors.iter().for_each(|v| out.extend(v.iter()));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite_val())
    }
}

/// Pinhole camera: intrinsics in pixels, world-to-camera rigid extrinsics.
///
/// Pixel `(u, v)` is evaluated at coordinates `(u, v)`; the principal point
/// is expressed in the same convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraFile", into = "CameraFile")]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub extrinsics: Matrix4<f64>,
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    /// Row-major world-to-camera transform.
    extrinsics: [[f64; 4]; 4],
}

impl From<Camera> for CameraFile {
    fn from(c: Camera) -> Self {
        let mut e = [[0.0; 4]; 4];
        for (r, row) in e.iter_mut().enumerate() {
            for (k, x) in row.iter_mut().enumerate() {
                *x = c.extrinsics[(r, k)];
            }
        }
        CameraFile { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: c.width, height: c.height, extrinsics: e }
    }
}

impl TryFrom<CameraFile> for Camera {
    type Error = Error;

    fn try_from(f: CameraFile) -> Result<Self> {
        let e = Matrix4::from_fn(|r, k| f.extrinsics[r][k]);
        Camera::new(f.fx, f.fy, f.cx, f.cy, f.width, f.height, e)
    }
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        extrinsics: Matrix4<f64>,
    ) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height, extrinsics };
        cam.check()?;
        Ok(cam)
    }

    /// Camera at the world origin looking down +z.
    pub fn identity_pose(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(fx, fy, cx, cy, width, height, Matrix4::identity())
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidCamera(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("resolution must be non-zero");
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return bad("principal point outside the image");
        }
        let r = self.rotation();
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(orth <= 1e-6) || (r.determinant() - 1.0).abs() > 1e-6 {
            return bad("extrinsic rotation block is not a proper rotation");
        }
        let last = self.extrinsics.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return bad("extrinsics last row must be (0, 0, 0, 1)");
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsics.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsics.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn rotation_as<T: Real>(&self) -> Matrix3<T> {
        self.rotation().map(T::lit)
    }

    pub fn translation_as<T: Real>(&self) -> Vector3<T> {
        self.translation().map(T::lit)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.translation())
    }

    /// Pixel coordinates and camera depth of a world point.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let c = self.world_to_camera(p);
        (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z)
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let c = Vector3::new((u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth);
        self.camera_to_world(&c)
    }
}

/// One observed timestep of the input video.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord<T: Real> {
    pub index: usize,
    /// Normalized time `index / (frame_count - 1)` in `[0, 1]`.
    pub time: f64,
    pub image: RgbImage<T>,
    /// Camera-space depth; 0 marks an invalid sample.
    pub depth: ScalarImage<T>,
    pub mask: Mask,
}

impl<T: Real> FrameRecord<T> {
    pub fn normalized_time(index: usize, frame_count: usize) -> f64 {
        if frame_count <= 1 {
            0.0
        } else {
            index as f64 / (frame_count - 1) as f64
        }
    }

    pub fn check_shapes(&self) -> Result<()> {
        if !self.image.same_shape(&self.depth) || !self.image.same_shape(&self.mask) {
            return Err(Error::Frame { index: self.index, message: "image, depth and mask resolutions differ".into() });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> FrameRecord<U> {
        FrameRecord {
            index: self.index,
            time: self.time,
            image: self.image.map(|c| c.map(|x| U::lit(x.to_f64()))),
            depth: self.depth.map(|&x| U::lit(x.to_f64())),
            mask: self.mask.clone(),
        }
    }
}

/// Composited buffers of one render pass.
#[derive(Clone, Debug)]
pub struct RenderOutput<T: Real> {
    pub color: RgbImage<T>,
    pub depth: ScalarImage<T>,
    pub alpha: ScalarImage<T>,
    /// Present for renders produced by the tile rasterizer.
    pub cache: Option<BackwardCache<T>>,
}

impl<T: Real> RenderOutput<T> {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            color: Grid::filled(width, height, Vector3::zeros()),
            depth: Grid::filled(width, height, T::zero()),
            alpha: Grid::filled(width, height, T::zero()),
            cache: None,
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one() -> GaussianSet<f64> {
        let mut s = GaussianSet::default();
        s.push(Vector3::zeros(), Vector3::zeros(), Vector4::new(1.0, 0.0, 0.0, 0.0), 0.0, Vector3::new(0.5, 0.5, 0.5));
        s
    }

    #[test]
    fn identity_gaussian_is_valid() {
        assert!(one().validate().is_empty());
    }

    #[test]
    fn non_unit_quaternion_reported_with_index() {
        let mut s = one();
        s.rotations[0] = Vector4::new(2.0, 0.0, 0.0, 0.0);
        assert_eq!(s.validate(), vec![Violation::NonUnitQuaternion { index: 0, norm: 2.0 }]);
    }

    #[test]
    fn length_mismatch_reported() {
        let mut s = one();
        s.positions.push(Vector3::zeros());
        s.log_scales.push(Vector3::zeros());
        s.rotations.push(Vector4::new(1.0, 0.0, 0.0, 0.0));
        s.opacity_logits.push(0.0);
        let v = s.validate();
        assert_eq!(v, vec![Violation::LengthMismatch { field: "colors", len: 1, expected: 2 }]);
    }

    #[test]
    fn overflowing_log_scale_is_invalid() {
        let mut s = one();
        s.log_scales[0].x = 1000.0;
        assert_eq!(s.validate(), vec![Violation::InvalidScale { index: 0 }]);
    }

    #[test]
    fn sigmoid_stays_open_interval_for_moderate_logits() {
        for &x in &[-30.0f64, -1.0, 0.0, 2.0, 30.0] {
            let a = sigmoid(x);
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn camera_rejects_principal_point_outside() {
        assert!(Camera::identity_pose(10.0, 10.0, 0.0, 4.0, 8, 8).is_err());
        assert!(Camera::identity_pose(10.0, 10.0, 4.0, 4.0, 8, 8).is_ok());
    }

    #[test]
    fn camera_json_is_row_major() {
        let mut e = Matrix4::identity();
        e[(0, 3)] = 5.0;
        let cam = Camera::new(1.0, 1.0, 2.0, 2.0, 4, 4, e).unwrap();
        let js = serde_json::to_value(&cam).unwrap();
        assert_eq!(js["extrinsics"][0][3], 5.0);
        let back: Camera = serde_json::from_value(js).unwrap();
        assert_eq!(back, cam);
    }

    #[test]
    fn unproject_inverts_project() {
        let mut e = Matrix4::identity();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&nalgebra::Rotation3::from_euler_angles(0.1, -0.2, 0.3).into_inner());
        e[(0, 3)] = 0.5;
        let cam = Camera::new(100.0, 90.0, 31.5, 20.0, 64, 40, e).unwrap();
        let p = cam.unproject(10.0, 7.0, 2.5);
        let (u, v, d) = cam.project(&p);
        assert!((u - 10.0).abs() < 1e-9 && (v - 7.0).abs() < 1e-9 && (d - 2.5).abs() < 1e-12);
    }
}
