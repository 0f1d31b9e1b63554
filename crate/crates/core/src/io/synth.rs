//! Procedural deforming-tissue scenes with exact ground truth.
//!
//! A textured surface (plane or cylinder patch) in front of an identity-pose
//! pinhole camera is displaced by a traveling sinusoid
//!
//! ```text
//! P(X, Y, t) = (X, Y, base(X)) + A sin(2π(kx X + ky Y) + 2π ω t + φ) · dir
//! ```
//!
//! and ray-traced per pixel with a Newton solve for the material point the
//! ray hits, so images and depth come from the analytic surface rather than
//! from Gaussians. A moving rectangle plays the tool; an optional static
//! patch is hidden in every frame.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::dataset::{default_holdout, DatasetManifest, FrameEntry, MANIFEST_VERSION};
use super::{quantize_u8, write_atomic, write_depth16, write_mask, write_rgb8};
use crate::error::{Error, Result};
use crate::scene::{Camera, FrameRecord, Grid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    Plane {
        depth: f64,
    },
    /// Axis parallel to image y; the patch recedes from the camera with |X|.
    Cylinder {
        depth: f64,
        radius: f64,
    },
}

impl Surface {
    fn base(&self, x: f64) -> (f64, f64) {
        match *self {
            Surface::Plane { depth } => (depth, 0.0),
            Surface::Cylinder { depth, radius } => {
                let x = x.clamp(-0.999 * radius, 0.999 * radius);
                let r = (radius * radius - x * x).sqrt();
                (depth + radius - r, x / r)
            }
        }
    }

    fn depth(&self) -> f64 {
        match *self {
            Surface::Plane { depth } | Surface::Cylinder { depth, .. } => depth,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    /// Smooth value noise; `cell` is the lattice spacing in world units.
    Noise {
        cell: f64,
        octaves: usize,
        contrast: f64,
    },
    Checker {
        cell: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Deformation {
    pub amplitude: f64,
    /// Spatial frequency in cycles per world unit along X and Y.
    pub wavevector: [f64; 2],
    /// Temporal cycles over the whole sequence.
    pub cycles: f64,
    pub phase: f64,
    /// Displacement direction (normalized on use).
    pub direction: [f64; 3],
}

impl Default for Deformation {
    fn default() -> Self {
        Self { amplitude: 0.05, wavevector: [0.5, 0.25], cycles: 1.0, phase: 0.0, direction: [0.3, 0.0, 1.0] }
    }
}

impl Deformation {
    pub fn phase_at(&self, t: f64) -> f64 {
        2.0 * PI * self.cycles * t + self.phase
    }

    fn dir(&self) -> Vector3<f64> {
        let d = Vector3::from(self.direction);
        let n = d.norm();
        if n > 0.0 {
            d / n
        } else {
            Vector3::z()
        }
    }

    /// Scalar displacement and its X/Y derivatives.
    fn scalar(&self, x: f64, y: f64, t: f64) -> (f64, f64, f64) {
        let [kx, ky] = self.wavevector;
        let theta = 2.0 * PI * (kx * x + ky * y) + self.phase_at(t);
        let c = self.amplitude * theta.cos() * 2.0 * PI;
        (self.amplitude * theta.sin(), c * kx, c * ky)
    }

    pub fn displacement(&self, x: f64, y: f64, t: f64) -> Vector3<f64> {
        self.dir() * self.scalar(x, y, t).0
    }
}

/// Axis-aligned rectangle in pixel centers, `min` inclusive, `max` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub min: [usize; 2],
    pub max: [usize; 2],
}

impl PixelRect {
    pub fn contains(&self, u: usize, v: usize) -> bool {
        u >= self.min[0] && u < self.max[0] && v >= self.min[1] && v < self.max[1]
    }

    pub fn area(&self) -> usize {
        self.max[0].saturating_sub(self.min[0]) * self.max[1].saturating_sub(self.min[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolProgram {
    /// Full width and height in pixels.
    pub size: [f64; 2],
    /// Center at t = 0 and t = 1, moving linearly between.
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub color: [f64; 3],
    pub depth: f64,
}

impl ToolProgram {
    pub fn covers(&self, u: usize, v: usize, t: f64) -> bool {
        let cu = self.start[0] + (self.end[0] - self.start[0]) * t;
        let cv = self.start[1] + (self.end[1] - self.start[1]) * t;
        (u as f64 - cu).abs() <= 0.5 * self.size[0] && (v as f64 - cv).abs() <= 0.5 * self.size[1]
    }
}

/// Region hidden in every frame over surface painted a known constant color.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenPatch {
    pub rect: PixelRect,
    pub color: [f64; 3],
    /// Extra pixels around `rect` painted with `color`, so the patch stays
    /// uniformly colored while the surface moves.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub seed: u64,
    pub focal: f64,
    pub surface: Surface,
    pub texture: Texture,
    pub deformation: Deformation,
    pub tool: Option<ToolProgram>,
    pub hidden_patch: Option<HiddenPatch>,
    pub depth_scale: f64,
    /// Color samples per pixel along each axis.
    pub supersample: usize,
    /// Held-out frames; `None` uses every 8th frame starting at 4.
    pub holdout: Option<Vec<usize>>,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            frames: 20,
            seed: 0,
            focal: 128.0,
            surface: Surface::Plane { depth: 2.0 },
            texture: Texture::Noise { cell: 0.25, octaves: 2, contrast: 0.6 },
            deformation: Deformation::default(),
            tool: Some(ToolProgram {
                size: [24.0, 40.0],
                start: [30.0, 40.0],
                end: [100.0, 90.0],
                color: [0.72, 0.72, 0.76],
                depth: 1.2,
            }),
            hidden_patch: None,
            depth_scale: 1e-4,
            supersample: 2,
            holdout: None,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn camera(&self) -> Result<Camera> {
        Camera::identity_pose(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }

    pub fn time(&self, i: usize) -> f64 {
        FrameRecord::<f32>::normalized_time(i, self.frames)
    }

    fn check(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 || self.supersample == 0 {
            return Err(Error::Config("synthetic scene needs positive size, frame count and supersampling".into()));
        }
        if !(self.depth_scale > 0.0) || !(self.surface.depth() > 0.0) {
            return Err(Error::Config("depth scale and surface depth must be positive".into()));
        }
        Ok(())
    }
}

fn hash(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, channel: u64) -> f64 {
    let h = hash(seed ^ hash(ix as u64 ^ hash(iy as u64 ^ hash(channel))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64, channel: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(x - fx), smooth(y - fy));
    let v00 = lattice(seed, ix, iy, channel);
    let v10 = lattice(seed, ix + 1, iy, channel);
    let v01 = lattice(seed, ix, iy + 1, channel);
    let v11 = lattice(seed, ix + 1, iy + 1, channel);
    let a = v00 + (v10 - v00) * sx;
    let b = v01 + (v11 - v01) * sx;
    a + (b - a) * sy
}

const TISSUE_BASE: [f64; 3] = [0.74, 0.42, 0.36];

/// Procedural scene renderer with exact geometry.
pub struct SyntheticScene {
    pub spec: SyntheticSceneSpec,
    pub camera: Camera,
}

/// One rendered frame before quantization.
pub struct RawFrame {
    pub image: Grid<Vector3<f64>>,
    pub depth: Grid<f64>,
    pub mask: Grid<bool>,
}

impl SyntheticScene {
    pub fn new(spec: SyntheticSceneSpec) -> Result<Self> {
        spec.check()?;
        Ok(Self { camera: spec.camera()?, spec })
    }

    /// Surface color of material point `(x, y)`.
    pub fn albedo(&self, x: f64, y: f64) -> Vector3<f64> {
        if let Some(p) = &self.spec.hidden_patch {
            let (z, _) = self.spec.surface.base(x);
            let u = self.camera.fx * x / z + self.camera.cx;
            let v = self.camera.fy * y / z + self.camera.cy;
            let m = p.margin;
            if u >= p.rect.min[0] as f64 - 0.5 - m
                && u <= p.rect.max[0] as f64 - 0.5 + m
                && v >= p.rect.min[1] as f64 - 0.5 - m
                && v <= p.rect.max[1] as f64 - 0.5 + m
            {
                return Vector3::from(p.color);
            }
        }
        let seed = self.spec.seed;
        match self.spec.texture {
            Texture::Noise { cell, octaves, contrast } => {
                let mut c = Vector3::from(TISSUE_BASE);
                for ch in 0..3 {
                    let (mut n, mut amp, mut freq, mut norm) = (0.0, 1.0, 1.0 / cell, 0.0);
                    for o in 0..octaves.max(1) {
                        n += amp * value_noise(seed.wrapping_add(o as u64 * 7919), x * freq, y * freq, ch as u64);
                        norm += amp;
                        amp *= 0.5;
                        freq *= 2.0;
                    }
                    c[ch] = (c[ch] + contrast * (n / norm - 0.5)).clamp(0.0, 1.0);
                }
                c
            }
            Texture::Checker { cell } => {
                let k = ((x / cell).floor() as i64 + (y / cell).floor() as i64).rem_euclid(2);
                if k == 0 {
                    Vector3::from(TISSUE_BASE)
                } else {
                    Vector3::new(0.45, 0.2, 0.2)
                }
            }
        }
    }

    /// Material point `(X, Y)` and camera depth hit by the ray through
    /// pixel coordinates `(u, v)` at time `t`.
    pub fn trace(&self, u: f64, v: f64, t: f64) -> Option<(f64, f64, f64)> {
        let a = (u - self.camera.cx) / self.camera.fx;
        let b = (v - self.camera.cy) / self.camera.fy;
        let def = &self.spec.deformation;
        let d = def.dir();
        let z0 = self.spec.surface.depth();
        let mut s = Vector3::new(a * z0, b * z0, z0);
        for _ in 0..60 {
            let (x, y, z) = (s.x, s.y, s.z);
            let (h, hx, hy) = def.scalar(x, y, t);
            let (base, dbase) = self.spec.surface.base(x);
            let f = Vector3::new(x + h * d.x - a * z, y + h * d.y - b * z, base + h * d.z - z);
            let j = Matrix3::new(
                1.0 + hx * d.x,
                hy * d.x,
                -a,
                hx * d.y,
                1.0 + hy * d.y,
                -b,
                dbase + hx * d.z,
                hy * d.z,
                -1.0,
            );
            let step = j.lu().solve(&f)?;
            s -= step;
            if step.norm() < 1e-14 * (1.0 + s.norm()) {
                return (s.z > 0.0).then_some((s.x, s.y, s.z));
            }
        }
        None
    }

    pub fn occluded(&self, u: usize, v: usize, t: f64) -> bool {
        self.spec.tool.as_ref().is_some_and(|tool| tool.covers(u, v, t))
            || self.spec.hidden_patch.as_ref().is_some_and(|p| p.rect.contains(u, v))
    }

    pub fn render_frame(&self, t: f64) -> RawFrame {
        let (w, h) = (self.spec.width, self.spec.height);
        let ss = self.spec.supersample;
        let mut image = Grid::filled(w, h, Vector3::zeros());
        let mut depth = Grid::filled(w, h, 0.0);
        let mut mask = Grid::filled(w, h, false);
        let tool = self.spec.tool;
        for v in 0..h {
            for u in 0..w {
                if self.occluded(u, v, t) {
                    let (color, d) = match &tool {
                        Some(tl) => (Vector3::from(tl.color), tl.depth),
                        None => (Vector3::repeat(0.7), self.spec.surface.depth() * 0.6),
                    };
                    *image.get_mut(u, v) = color;
                    *depth.get_mut(u, v) = d;
                    *mask.get_mut(u, v) = true;
                    continue;
                }
                if let Some((_, _, z)) = self.trace(u as f64, v as f64, t) {
                    *depth.get_mut(u, v) = z;
                }
                let mut acc = Vector3::zeros();
                for sy in 0..ss {
                    for sx in 0..ss {
                        let du = (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let dv = (sy as f64 + 0.5) / ss as f64 - 0.5;
                        if let Some((x, y, _)) = self.trace(u as f64 + du, v as f64 + dv, t) {
                            acc += self.albedo(x, y);
                        }
                    }
                }
                *image.get_mut(u, v) = acc / (ss * ss) as f64;
            }
        }
        RawFrame { image, depth, mask }
    }

    /// The frame exactly as stored on disk and decoded by the loader.
    pub fn quantized_frame(&self, index: usize) -> FrameRecord<f32> {
        let t = self.spec.time(index);
        let raw = self.render_frame(t);
        let scale = self.spec.depth_scale;
        FrameRecord {
            index,
            time: t,
            image: raw.image.map(|c| c.map(|x| quantize_u8(x) as f32 / 255.0)),
            depth: raw.depth.map(|&d| ((d / scale).round().clamp(0.0, 65535.0) as u16 as f64 * scale) as f32),
            mask: raw.mask,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub x: f64,
    pub y: f64,
    pub displacement: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarFrame {
    pub index: usize,
    pub time: f64,
    /// Temporal phase `2π ω t + φ` of the displacement wave.
    pub phase: f64,
    pub probes: Vec<Probe>,
}

/// Ground truth written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: SyntheticSceneSpec,
    pub frames: Vec<SidecarFrame>,
}

pub const PROBE_COORDS: [f64; 3] = [-0.25, 0.0, 0.25];

pub fn sidecar(spec: &SyntheticSceneSpec) -> Sidecar {
    let def = &spec.deformation;
    let frames = (0..spec.frames)
        .map(|i| {
            let t = spec.time(i);
            let mut probes = Vec::new();
            for &y in &PROBE_COORDS {
                for &x in &PROBE_COORDS {
                    probes.push(Probe { x, y, displacement: def.displacement(x, y, t).into() });
                }
            }
            SidecarFrame { index: i, time: t, phase: def.phase_at(t), probes }
        })
        .collect();
    Sidecar { spec: spec.clone(), frames }
}

pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub manifest: DatasetManifest,
    pub frames: Vec<FrameRecord<f32>>,
}

pub const MANIFEST_FILE: &str = "dataset.json";
pub const SIDECAR_FILE: &str = "ground_truth.json";

/// Renders every frame and writes a dataset tree under `out`.
pub fn generate_synthetic(spec: &SyntheticSceneSpec, out: &Path) -> Result<GeneratedDataset> {
    let scene = SyntheticScene::new(spec.clone())?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(spec.frames);
    let mut frames = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let entry = FrameEntry {
            image: format!("images/{i:04}.png").into(),
            depth: format!("depth/{i:04}.png").into(),
            mask: format!("masks/{i:04}.png").into(),
        };
        let frame = scene.quantized_frame(i);
        write_rgb8(&out.join(&entry.image), &frame.image)?;
        write_depth16(&out.join(&entry.depth), &frame.depth, spec.depth_scale)?;
        write_mask(&out.join(&entry.mask), &frame.mask)?;
        entries.push(entry);
        frames.push(frame);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        camera: scene.camera.clone(),
        depth_scale: spec.depth_scale,
        frames: entries,
        holdout: spec.holdout.clone().unwrap_or_else(|| default_holdout(spec.frames)),
    };
    manifest.check()?;
    let manifest_path = out.join(MANIFEST_FILE);
    write_atomic(&manifest_path, manifest.to_json().as_bytes())?;
    let sidecar_path = out.join(SIDECAR_FILE);
    let text = serde_json::to_string_pretty(&sidecar(spec)).expect("sidecar serializes");
    write_atomic(&sidecar_path, text.as_bytes())?;
    Ok(GeneratedDataset { manifest_path, sidecar_path, manifest, frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            width: 24,
            height: 20,
            frames: 3,
            focal: 24.0,
            tool: Some(ToolProgram {
                size: [6.0, 6.0],
                start: [5.0, 5.0],
                end: [18.0, 14.0],
                color: [0.7, 0.7, 0.7],
                depth: 1.0,
            }),
            ..SyntheticSceneSpec::default()
        }
    }

    #[test]
    fn traced_depth_satisfies_surface_equation() {
        let s = SyntheticScene::new(small()).unwrap();
        for &(u, v, t) in &[(3.0, 4.0, 0.0), (12.0, 10.0, 0.5), (20.5, 1.5, 1.0)] {
            let (x, y, z) = s.trace(u, v, t).unwrap();
            let p = Vector3::new(x, y, 2.0) + s.spec.deformation.displacement(x, y, t);
            let (pu, pv, pz) = s.camera.project(&p);
            assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
            assert!((pz - z).abs() < 1e-12);
        }
    }

    #[test]
    fn cylinder_surface_traces() {
        let mut spec = small();
        spec.surface = Surface::Cylinder { depth: 2.0, radius: 3.0 };
        let s = SyntheticScene::new(spec).unwrap();
        let (x, y, z) = s.trace(20.0, 3.0, 0.3).unwrap();
        let base = 2.0 + 3.0 - (9.0 - x * x).sqrt();
        let p = Vector3::new(x, y, base) + s.spec.deformation.displacement(x, y, 0.3);
        assert!((p.z - z).abs() < 1e-12);
        assert!(z > 2.0);
    }

    #[test]
    fn zero_amplitude_frames_match_outside_the_tool() {
        let mut spec = small();
        spec.deformation.amplitude = 0.0;
        let s = SyntheticScene::new(spec).unwrap();
        let a = s.render_frame(0.0);
        let b = s.render_frame(1.0);
        for i in 0..a.image.len() {
            if !a.mask.data[i] && !b.mask.data[i] {
                assert_eq!(a.image.data[i], b.image.data[i]);
                assert_eq!(a.depth.data[i], b.depth.data[i]);
            }
        }
    }

    #[test]
    fn sidecar_peak_displacement() {
        let mut spec = small();
        spec.frames = 5;
        spec.deformation.cycles = 1.0;
        spec.deformation.phase = 0.0;
        spec.deformation.direction = [0.0, 0.0, 1.0];
        // Frame 1 of 5 sits at t = 0.25, phase π/2.
        let sc = sidecar(&spec);
        let f = &sc.frames[1];
        assert!((f.phase - PI / 2.0).abs() < 1e-15);
        let origin = f.probes.iter().find(|p| p.x == 0.0 && p.y == 0.0).unwrap();
        assert_eq!(origin.displacement, [0.0, 0.0, spec.deformation.amplitude]);
    }

    #[test]
    fn mask_covers_tool_footprint_exactly() {
        let s = SyntheticScene::new(small()).unwrap();
        let f = s.render_frame(0.0);
        let n = f.mask.data.iter().filter(|&&m| m).count();
        // Center (5, 5), half-size 3: pixels 2..=8 on both axes.
        assert_eq!(n, 49);
        assert!(*f.mask.get(2, 8) && !*f.mask.get(9, 5));
    }
}
