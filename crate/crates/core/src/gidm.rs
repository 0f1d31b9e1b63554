//! Initialization of the canonical Gaussians from depth maps and tool masks.
//!
//! Pixels hidden by the tool in frame 0 are filled from the earliest later
//! frame that sees tissue there. The resulting refined frame is unprojected
//! to a colored point cloud which seeds one Gaussian per (downsampled) point.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::real::Real;
use crate::scene::{logit, FrameRecord, GaussianSet, Grid, Mask, RgbImage, ScalarImage};
use crate::Camera;

pub const INITIAL_OPACITY: f64 = 0.1;

/// Frame 0 with tool-hidden pixels harvested from later frames.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedFrame<T: Real> {
    pub image: RgbImage<T>,
    pub depth: ScalarImage<T>,
    /// Pixels occluded in every frame.
    pub mask: Mask,
    /// Frame index each pixel was taken from.
    pub source: Grid<usize>,
}

pub fn build_refined_frame<T: Real>(frames: &[FrameRecord<T>]) -> Result<RefinedFrame<T>> {
    let first = frames.first().ok_or_else(|| Error::ShapeMismatch("no frames to initialize from".into()))?;
    for f in frames {
        f.check_shapes()?;
        if !f.image.same_shape(&first.image) {
            return Err(Error::Frame {
                index: f.index,
                message: format!(
                    "resolution {}x{} differs from {}x{}",
                    f.image.width, f.image.height, first.image.width, first.image.height
                ),
            });
        }
    }
    let mut rf = RefinedFrame {
        image: first.image.clone(),
        depth: first.depth.clone(),
        mask: first.mask.clone(),
        source: Grid::filled(first.image.width, first.image.height, 0),
    };
    for (k, f) in frames.iter().enumerate().skip(1) {
        for i in 0..rf.mask.len() {
            if rf.mask.data[i] && !f.mask.data[i] {
                rf.image.data[i] = f.image.data[i];
                rf.depth.data[i] = f.depth.data[i];
                rf.mask.data[i] = false;
                rf.source.data[i] = k;
            }
        }
    }
    Ok(rf)
}

/// World-space points with their colors and source pixels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
    pub pixels: Vec<(usize, usize)>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Unprojects every unmasked pixel with positive depth.
pub fn backproject<T: Real>(rf: &RefinedFrame<T>, cam: &Camera) -> Result<PointCloud> {
    cam.check()?;
    if rf.image.width != cam.width || rf.image.height != cam.height {
        return Err(Error::ShapeMismatch(format!(
            "refined frame {}x{} vs camera {}x{}",
            rf.image.width, rf.image.height, cam.width, cam.height
        )));
    }
    let mut cloud = PointCloud::default();
    for v in 0..rf.image.height {
        for u in 0..rf.image.width {
            let d = rf.depth.get(u, v).to_f64();
            if *rf.mask.get(u, v) || !(d > 0.0) || !d.is_finite() {
                continue;
            }
            cloud.points.push(cam.unproject(u as f64, v as f64, d));
            cloud.colors.push(rf.image.get(u, v).map(|c| c.to_f64()));
            cloud.pixels.push((u, v));
        }
    }
    if cloud.is_empty() {
        return Err(Error::EmptyInitialization);
    }
    Ok(cloud)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Downsample {
    Off,
    /// Voxel edge = `factor` × median nearest-neighbor spacing.
    MedianSpacing {
        factor: f64,
    },
    Fixed {
        voxel: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedConfig {
    pub downsample: Downsample,
    /// Which nearest neighbor sets the initial isotropic scale.
    pub scale_neighbor: usize,
    /// Scale used when no positive neighbor distance exists.
    pub fallback_scale: f64,
    pub initial_opacity: f64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            downsample: Downsample::MedianSpacing { factor: 1.0 },
            scale_neighbor: 3,
            fallback_scale: 0.01,
            initial_opacity: INITIAL_OPACITY,
        }
    }
}

/// Median distance from each point to its nearest neighbor.
pub fn median_spacing(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let tree = KdTree::new(points);
    let mut d: Vec<f64> =
        points.iter().enumerate().map(|(i, p)| tree.nearest([p.x, p.y, p.z], 1, Some(i))[0].1.sqrt()).collect();
    let mid = d.len() / 2;
    *d.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Averages points (and colors) sharing a voxel; voxels keep first-seen order.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    if !(voxel > 0.0) {
        return cloud.clone();
    }
    let mut slots: HashMap<[i64; 3], usize> = HashMap::new();
    let mut sums: Vec<(Vector3<f64>, Vector3<f64>, usize, (usize, usize))> = Vec::new();
    for i in 0..cloud.len() {
        let p = cloud.points[i];
        let key = [(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64];
        let slot = *slots.entry(key).or_insert_with(|| {
            sums.push((Vector3::zeros(), Vector3::zeros(), 0, cloud.pixels[i]));
            sums.len() - 1
        });
        sums[slot].0 += p;
        sums[slot].1 += cloud.colors[i];
        sums[slot].2 += 1;
    }
    let mut out = PointCloud::default();
    for (p, c, n, px) in sums {
        out.points.push(p / n as f64);
        out.colors.push(c / n as f64);
        out.pixels.push(px);
    }
    out
}

pub fn seed_gaussians<T: Real>(cloud: &PointCloud, cfg: &SeedConfig) -> Result<GaussianSet<T>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInitialization);
    }
    let cloud = match cfg.downsample {
        Downsample::Off => cloud.clone(),
        Downsample::MedianSpacing { factor } => voxel_downsample(cloud, factor * median_spacing(&cloud.points)),
        Downsample::Fixed { voxel } => voxel_downsample(cloud, voxel),
    };
    let tree = KdTree::new(&cloud.points);
    let k = cfg.scale_neighbor.max(1).min(cloud.len().saturating_sub(1));
    let opacity = T::lit(logit(cfg.initial_opacity));
    let mut set = GaussianSet::with_capacity(cloud.len());
    for (i, p) in cloud.points.iter().enumerate() {
        let nn = tree.nearest([p.x, p.y, p.z], k, Some(i));
        let d = nn.last().map_or(0.0, |&(_, d2)| d2.sqrt());
        let scale = if d > 0.0 { d } else { cfg.fallback_scale };
        set.push(
            p.map(T::lit),
            Vector3::repeat(T::lit(scale.ln())),
            Vector4::new(T::one(), T::zero(), T::zero(), T::zero()),
            opacity,
            cloud.colors[i].map(|c| T::lit(c.clamp(0.0, 1.0))),
        );
    }
    Ok(set)
}

/// Full initialization: refined frame, point cloud and seeded Gaussians.
pub fn initialize<T: Real>(
    frames: &[FrameRecord<T>],
    cam: &Camera,
    cfg: &SeedConfig,
) -> Result<(RefinedFrame<T>, PointCloud, GaussianSet<T>)> {
    let rf = build_refined_frame(frames)?;
    let cloud = backproject(&rf, cam)?;
    let set = seed_gaussians(&cloud, cfg)?;
    Ok((rf, cloud, set))
}

/// Writes an ASCII PLY with float positions and 8-bit colors.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut text = String::new();
    text.push_str("ply\nformat ascii 1.0\n");
    text.push_str(&format!("element vertex {}\n", cloud.len()));
    text.push_str("property float x\nproperty float y\nproperty float z\n");
    text.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let b = c.map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8);
        text.push_str(&format!("{} {} {} {} {} {}\n", p.x, p.y, p.z, b.x, b.y, b.z));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(index: usize, w: usize, h: usize, shade: f64, masked: &[(usize, usize)]) -> FrameRecord<f64> {
        let mut mask = Grid::filled(w, h, false);
        for &(u, v) in masked {
            *mask.get_mut(u, v) = true;
        }
        FrameRecord {
            index,
            time: 0.0,
            image: Grid::filled(w, h, Vector3::repeat(shade)),
            depth: Grid::filled(w, h, 1.0 + shade),
            mask,
        }
    }

    #[test]
    fn single_unmasked_frame_is_unchanged() {
        let f = frame(0, 4, 3, 0.2, &[]);
        let rf = build_refined_frame(&[f.clone()]).unwrap();
        assert_eq!(rf.image, f.image);
        assert_eq!(rf.depth, f.depth);
        assert!(rf.mask.data.iter().all(|&m| !m));
    }

    #[test]
    fn harvests_from_earliest_visible_frame() {
        let frames = [
            frame(0, 4, 3, 0.1, &[(1, 1), (2, 1), (3, 2)]),
            frame(1, 4, 3, 0.2, &[(2, 1), (3, 2)]),
            frame(2, 4, 3, 0.3, &[(3, 2)]),
        ];
        let rf = build_refined_frame(&frames).unwrap();
        assert_eq!(*rf.image.get(1, 1), Vector3::repeat(0.2));
        assert_eq!(*rf.depth.get(2, 1), 1.3);
        assert_eq!(*rf.source.get(2, 1), 2);
        assert!(*rf.mask.get(3, 2));
        assert_eq!(*rf.image.get(3, 2), Vector3::repeat(0.1));
        assert_eq!(rf.mask.data.iter().filter(|&&m| m).count(), 1);
        assert_eq!(build_refined_frame(&frames).unwrap(), rf);
    }

    #[test]
    fn backprojection_examples() {
        let cam = Camera::identity_pose(100.0, 100.0, 50.0, 40.0, 200, 80).unwrap();
        let mut rf = RefinedFrame {
            image: Grid::filled(200, 80, Vector3::repeat(0.5)),
            depth: Grid::filled(200, 80, 0.0),
            mask: Grid::filled(200, 80, false),
            source: Grid::filled(200, 80, 0),
        };
        *rf.depth.get_mut(50, 40) = 2.0;
        *rf.depth.get_mut(150, 40) = 1.0;
        *rf.depth.get_mut(3, 3) = 1.0;
        *rf.mask.get_mut(3, 3) = true;
        let c = backproject(&rf, &cam).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.points[0], Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(c.points[1], Vector3::new(1.0, 0.0, 1.0));
        rf.depth.data.iter_mut().for_each(|d| *d = 0.0);
        assert!(matches!(backproject(&rf, &cam), Err(Error::EmptyInitialization)));
    }

    #[test]
    fn seeding_defaults() {
        let cloud = PointCloud {
            points: vec![Vector3::new(0.0, 0.0, 1.0)],
            colors: vec![Vector3::new(0.1, 0.2, 0.3)],
            pixels: vec![(0, 0)],
        };
        let s = seed_gaussians::<f64>(&cloud, &SeedConfig::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.rotations[0], Vector4::new(1.0, 0.0, 0.0, 0.0));
        assert!((s.opacity(0) - 0.1).abs() < 1e-12);
        assert_eq!(s.colors[0], Vector3::new(0.1, 0.2, 0.3));
    }

    #[test]
    fn grid_interior_scale_is_unit() {
        let mut cloud = PointCloud::default();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..5 {
                    cloud.points.push(Vector3::new(x as f64, y as f64, z as f64));
                    cloud.colors.push(Vector3::zeros());
                    cloud.pixels.push((0, 0));
                }
            }
        }
        let cfg = SeedConfig { downsample: Downsample::Off, ..SeedConfig::default() };
        let s = seed_gaussians::<f64>(&cloud, &cfg).unwrap();
        let centre = 2 * 25 + 2 * 5 + 2;
        assert!((s.scale(centre).x - 1.0).abs() < 1e-12);
        assert!((median_spacing(&cloud.points) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn voxel_downsample_averages() {
        let cloud = PointCloud {
            points: vec![Vector3::new(0.1, 0.1, 0.1), Vector3::new(0.3, 0.1, 0.1), Vector3::new(1.5, 0.1, 0.1)],
            colors: vec![Vector3::repeat(0.0), Vector3::repeat(1.0), Vector3::repeat(0.5)],
            pixels: vec![(0, 0), (1, 0), (2, 0)],
        };
        let d = voxel_downsample(&cloud, 1.0);
        assert_eq!(d.len(), 2);
        assert!((d.points[0].x - 0.2).abs() < 1e-12);
        assert_eq!(d.colors[0], Vector3::repeat(0.5));
        assert_eq!(d.pixels, vec![(0, 0), (2, 0)]);
    }
}
