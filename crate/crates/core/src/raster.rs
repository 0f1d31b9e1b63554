//! Tile-based front-to-back alpha compositing of color and depth, with the
//! matching analytic backward pass and a tile-free reference renderer.
//!
//! Per pixel `r`, with Gaussians visited in ascending camera depth:
//!
//! ```text
//! α'ᵢ = min(αᵢ·Gᵢ(r), 0.99)      (skipped when < 1/255 or outside 3σ)
//! wᵢ  = α'ᵢ · ∏_{j<i} (1 − α'ⱼ)
//! Ĉ   = Σ wᵢ cᵢ,   D̂ = Σ wᵢ dᵢ,   A = Σ wᵢ
//! ```
//!
//! Traversal stops before a Gaussian that would push transmittance below
//! 1e-4. The background is black.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian_math::{
    build_covariance, build_covariance_backward, eval_gaussian_2d, project_gaussian, project_gaussian_backward,
    CameraView, ProjectedGaussian, ProjectedGrad,
};
use crate::real::Real;
use crate::scene::{Camera, GaussianGrads, GaussianSet, Grid, RenderOutput, RgbImage, ScalarImage};

pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub tile_size: usize,
    /// Divide composited depth by accumulated alpha.
    pub normalize_depth: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { tile_size: 16, normalize_depth: false }
    }
}

/// Per-tile Gaussian lists, each sorted by ascending depth (ties by index).
#[derive(Clone, Debug, PartialEq)]
pub struct TileBinning<T: Real> {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub width: usize,
    pub height: usize,
    pub tiles: Vec<Vec<(usize, T)>>,
}

impl<T: Real> TileBinning<T> {
    pub fn tile(&self, tx: usize, ty: usize) -> &[(usize, T)] {
        &self.tiles[ty * self.tiles_x + tx]
    }

    /// Inclusive pixel bounds `(u0, v0, u1, v1)` of tile `t`.
    fn bounds(&self, t: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let u0 = tx * self.tile_size;
        let v0 = ty * self.tile_size;
        (u0, v0, (u0 + self.tile_size).min(self.width) - 1, (v0 + self.tile_size).min(self.height) - 1)
    }
}

fn disk_hits_rect<T: Real>(center: &Vector2<T>, radius: T, u0: usize, v0: usize, u1: usize, v1: usize) -> bool {
    let qx = center.x.max(T::lit(u0 as f64)).min(T::lit(u1 as f64));
    let qy = center.y.max(T::lit(v0 as f64)).min(T::lit(v1 as f64));
    let dx = center.x - qx;
    let dy = center.y - qy;
    dx * dx + dy * dy <= radius * radius
}

pub fn bin_and_sort<T: Real>(
    projected: &[Option<ProjectedGaussian<T>>],
    width: usize,
    height: usize,
    tile_size: usize,
) -> TileBinning<T> {
    let tile_size = tile_size.max(1);
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut binning =
        TileBinning { tile_size, tiles_x, tiles_y, width, height, tiles: vec![Vec::new(); tiles_x * tiles_y] };
    let ts = T::lit(tile_size as f64);
    for (i, p) in projected.iter().enumerate() {
        let Some(p) = p else { continue };
        let lo_x = ((p.mean2d.x - p.radius) / ts).floor().to_f64().max(0.0);
        let hi_x = ((p.mean2d.x + p.radius) / ts).floor().to_f64().min(tiles_x as f64 - 1.0);
        let lo_y = ((p.mean2d.y - p.radius) / ts).floor().to_f64().max(0.0);
        let hi_y = ((p.mean2d.y + p.radius) / ts).floor().to_f64().min(tiles_y as f64 - 1.0);
        if hi_x < lo_x || hi_y < lo_y {
            continue;
        }
        for ty in lo_y as usize..=hi_y as usize {
            for tx in lo_x as usize..=hi_x as usize {
                let t = ty * tiles_x + tx;
                let (u0, v0, u1, v1) = binning.bounds(t);
                if disk_hits_rect(&p.mean2d, p.radius, u0, v0, u1, v1) {
                    binning.tiles[t].push((i, p.depth));
                }
            }
        }
    }
    for list in &mut binning.tiles {
        list.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    }
    binning
}

/// Effective opacity of one Gaussian at a pixel, or `None` when it does not
/// contribute. Returns `(α', G, clamped)`.
#[inline]
fn contribution<T: Real>(g: &ProjectedGaussian<T>, opacity: T, pixel: &Vector2<T>) -> Option<(T, T, bool)> {
    let d = pixel - g.mean2d;
    if d.norm_squared() > g.radius * g.radius {
        return None;
    }
    let value = eval_gaussian_2d(g, pixel);
    let a = opacity * value;
    if a < T::lit(ALPHA_MIN) {
        return None;
    }
    let max = T::lit(ALPHA_MAX);
    if a > max {
        Some((max, value, true))
    } else {
        Some((a, value, false))
    }
}

/// Inputs of the compositing stage that do not depend on tiling.
#[derive(Clone, Debug)]
pub struct Projection<T: Real> {
    pub camera: CameraView<T>,
    pub covariances: Vec<Matrix3<T>>,
    pub projected: Vec<Option<ProjectedGaussian<T>>>,
    pub opacities: Vec<T>,
}

pub fn project_set<T: Real>(set: &GaussianSet<T>, cam: &Camera) -> Result<Projection<T>> {
    let camera = CameraView::new(cam);
    let n = set.len();
    let covariances = (0..n)
        .into_par_iter()
        .map(|i| build_covariance(&set.scale(i), &set.rotations[i]))
        .collect::<Result<Vec<_>>>()?;
    let projected =
        (0..n).into_par_iter().map(|i| project_gaussian(&set.positions[i], &covariances[i], &camera)).collect();
    let opacities = (0..n).map(|i| set.opacity(i)).collect();
    Ok(Projection { camera, covariances, projected, opacities })
}

/// Everything the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BackwardCache<T: Real> {
    pub fingerprint: u64,
    pub config: RenderConfig,
    pub projection: Projection<T>,
    pub binning: TileBinning<T>,
    /// Per pixel, exclusive end of the processed prefix of its tile list.
    pub last_contributor: Vec<u32>,
    pub final_transmittance: Vec<T>,
    /// Depth sum before optional alpha normalization.
    pub raw_depth: Vec<T>,
}

struct TileForward<T: Real> {
    color: Vec<Vector3<T>>,
    depth: Vec<T>,
    alpha: Vec<T>,
    last: Vec<u32>,
    final_t: Vec<T>,
}

pub fn composite_forward<T: Real>(
    binning: &TileBinning<T>,
    projection: &Projection<T>,
    colors: &[Vector3<T>],
) -> (RenderOutput<T>, Vec<u32>, Vec<T>) {
    let (width, height) = (binning.width, binning.height);
    let t_min = T::lit(TRANSMITTANCE_MIN);
    let per_tile: Vec<TileForward<T>> = (0..binning.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (u0, v0, u1, v1) = binning.bounds(t);
            let list = &binning.tiles[t];
            let npx = (u1 - u0 + 1) * (v1 - v0 + 1);
            let mut out = TileForward {
                color: Vec::with_capacity(npx),
                depth: Vec::with_capacity(npx),
                alpha: Vec::with_capacity(npx),
                last: Vec::with_capacity(npx),
                final_t: Vec::with_capacity(npx),
            };
            for v in v0..=v1 {
                for u in u0..=u1 {
                    let pixel = Vector2::new(T::lit(u as f64), T::lit(v as f64));
                    let mut trans = T::one();
                    let mut c = Vector3::zeros();
                    let mut d = T::zero();
                    let mut a = T::zero();
                    let mut last = 0u32;
                    for (k, &(gi, _)) in list.iter().enumerate() {
                        let g = projection.projected[gi].as_ref().unwrap();
                        let Some((alpha, _, _)) = contribution(g, projection.opacities[gi], &pixel) else {
                            continue;
                        };
                        let w = alpha * trans;
                        c += colors[gi] * w;
                        d += g.depth * w;
                        a += w;
                        trans *= T::one() - alpha;
                        last = k as u32 + 1;
                        if trans < t_min {
                            break;
                        }
                    }
                    out.color.push(c);
                    out.depth.push(d);
                    out.alpha.push(a);
                    out.last.push(last);
                    out.final_t.push(trans);
                }
            }
            out
        })
        .collect();

    let mut output = RenderOutput::empty(width, height);
    let mut last = vec![0u32; width * height];
    let mut final_t = vec![T::one(); width * height];
    for (t, tile) in per_tile.into_iter().enumerate() {
        let (u0, v0, u1, v1) = binning.bounds(t);
        let mut k = 0;
        for v in v0..=v1 {
            for u in u0..=u1 {
                let p = v * width + u;
                output.color.data[p] = tile.color[k];
                output.depth.data[p] = tile.depth[k];
                output.alpha.data[p] = tile.alpha[k];
                last[p] = tile.last[k];
                final_t[p] = tile.final_t[k];
                k += 1;
            }
        }
    }
    (output, last, final_t)
}

fn normalize_depth_in_place<T: Real>(out: &mut RenderOutput<T>) {
    for (d, &a) in out.depth.data.iter_mut().zip(&out.alpha.data) {
        if a > T::zero() {
            *d /= a;
        }
    }
}

/// Projects, bins and composites `set` as seen by `cam`.
pub fn render<T: Real>(set: &GaussianSet<T>, cam: &Camera, config: &RenderConfig) -> Result<RenderOutput<T>> {
    let projection = project_set(set, cam)?;
    let binning = bin_and_sort(&projection.projected, cam.width, cam.height, config.tile_size);
    let (mut out, last_contributor, final_transmittance) = composite_forward(&binning, &projection, &set.colors);
    let raw_depth = out.depth.data.clone();
    if config.normalize_depth {
        normalize_depth_in_place(&mut out);
    }
    out.cache = Some(BackwardCache {
        fingerprint: set.fingerprint(),
        config: *config,
        projection,
        binning,
        last_contributor,
        final_transmittance,
        raw_depth,
    });
    Ok(out)
}

/// Reference renderer: per pixel, every contributing Gaussian is globally
/// depth-sorted and composited without tiling or early termination.
pub fn render_naive_oracle<T: Real>(
    set: &GaussianSet<T>,
    cam: &Camera,
    config: &RenderConfig,
) -> Result<RenderOutput<T>> {
    let projection = project_set(set, cam)?;
    let mut order: Vec<usize> = (0..set.len()).filter(|&i| projection.projected[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let da = projection.projected[a].unwrap().depth;
        let db = projection.projected[b].unwrap().depth;
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    let mut out = RenderOutput::empty(cam.width, cam.height);
    for v in 0..cam.height {
        for u in 0..cam.width {
            let pixel = Vector2::new(T::lit(u as f64), T::lit(v as f64));
            let mut trans = T::one();
            let mut c = Vector3::zeros();
            let mut d = T::zero();
            let mut a = T::zero();
            for &gi in &order {
                let g = projection.projected[gi].as_ref().unwrap();
                let Some((alpha, _, _)) = contribution(g, projection.opacities[gi], &pixel) else {
                    continue;
                };
                let w = alpha * trans;
                c += set.colors[gi] * w;
                d += g.depth * w;
                a += w;
                trans *= T::one() - alpha;
            }
            let p = v * cam.width + u;
            out.color.data[p] = c;
            out.depth.data[p] = d;
            out.alpha.data[p] = a;
        }
    }
    if config.normalize_depth {
        normalize_depth_in_place(&mut out);
    }
    Ok(out)
}

/// Gradients produced by [`composite_backward`].
#[derive(Clone, Debug)]
pub struct RenderGrads<T: Real> {
    pub gaussians: GaussianGrads<T>,
    /// Screen-space gradient of each projected center (pixels).
    pub mean2d: Vec<Vector2<T>>,
    /// Whether each Gaussian survived culling in the forward pass.
    pub visible: Vec<bool>,
}

#[derive(Clone, Copy)]
struct PixelGrad<T: Real> {
    mean2d: Vector2<T>,
    conic: Matrix2<T>,
    opacity: T,
    color: Vector3<T>,
    depth: T,
}

impl<T: Real> Default for PixelGrad<T> {
    fn default() -> Self {
        Self {
            mean2d: Vector2::zeros(),
            conic: Matrix2::zeros(),
            opacity: T::zero(),
            color: Vector3::zeros(),
            depth: T::zero(),
        }
    }
}

/// Backpropagates `dL/dĈ`, `dL/dD̂` and optionally `dL/dA` from a render of
/// `set` to every Gaussian parameter.
pub fn composite_backward<T: Real>(
    set: &GaussianSet<T>,
    out: &RenderOutput<T>,
    d_color: &RgbImage<T>,
    d_depth: &ScalarImage<T>,
    d_alpha: Option<&ScalarImage<T>>,
) -> Result<RenderGrads<T>> {
    let cache = out.cache.as_ref().ok_or(Error::MissingCache)?;
    if cache.fingerprint != set.fingerprint() {
        return Err(Error::StaleCache);
    }
    let (width, height) = (out.width(), out.height());
    if !d_color.same_shape(&out.color)
        || !d_depth.same_shape(&out.depth)
        || d_alpha.is_some_and(|a| !a.same_shape(&out.alpha))
    {
        return Err(Error::ShapeMismatch("upstream gradient buffers differ from the render".into()));
    }

    // Fold the optional alpha normalization of depth into dD̂/dA.
    let mut d_depth_raw = d_depth.data.clone();
    let mut d_alpha_eff: Vec<T> = match d_alpha {
        Some(a) => a.data.clone(),
        None => vec![T::zero(); width * height],
    };
    if cache.config.normalize_depth {
        for p in 0..width * height {
            let a = out.alpha.data[p];
            if a > T::zero() {
                let s = cache.raw_depth[p];
                d_alpha_eff[p] -= d_depth.data[p] * s / (a * a);
                d_depth_raw[p] = d_depth.data[p] / a;
            }
        }
    }

    let binning = &cache.binning;
    let proj = &cache.projection;
    let per_tile: Vec<Vec<PixelGrad<T>>> = (0..binning.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (u0, v0, u1, v1) = binning.bounds(t);
            let list = &binning.tiles[t];
            let mut grads = vec![PixelGrad::default(); list.len()];
            for v in v0..=v1 {
                for u in u0..=u1 {
                    let p = v * width + u;
                    let last = cache.last_contributor[p] as usize;
                    if last == 0 {
                        continue;
                    }
                    let dc = d_color.data[p];
                    let dd = d_depth_raw[p];
                    let da = d_alpha_eff[p];
                    let pixel = Vector2::new(T::lit(u as f64), T::lit(v as f64));
                    let mut trans = cache.final_transmittance[p];
                    let mut suffix_c = Vector3::zeros();
                    let mut suffix_d = T::zero();
                    let mut suffix_a = T::zero();
                    for k in (0..last).rev() {
                        let gi = list[k].0;
                        let g = proj.projected[gi].as_ref().unwrap();
                        let opacity = proj.opacities[gi];
                        let Some((alpha, value, clamped)) = contribution(g, opacity, &pixel) else {
                            continue;
                        };
                        trans /= T::one() - alpha;
                        let w = alpha * trans;
                        let color = set.colors[gi];
                        let entry = &mut grads[k];
                        entry.color += dc * w;
                        entry.depth += dd * w;
                        let d_alpha = trans
                            * ((color - suffix_c).dot(&dc) + (g.depth - suffix_d) * dd + (T::one() - suffix_a) * da);
                        suffix_c = color * alpha + suffix_c * (T::one() - alpha);
                        suffix_d = g.depth * alpha + suffix_d * (T::one() - alpha);
                        suffix_a = alpha + suffix_a * (T::one() - alpha);
                        if clamped {
                            continue;
                        }
                        entry.opacity += d_alpha * value;
                        let d_power = d_alpha * opacity * value;
                        let delta = pixel - g.mean2d;
                        entry.mean2d += g.conic * delta * d_power;
                        entry.conic += delta * delta.transpose() * (T::lit(-0.5) * d_power);
                    }
                }
            }
            grads
        })
        .collect();

    let n = set.len();
    let mut acc = vec![PixelGrad::default(); n];
    for (t, grads) in per_tile.iter().enumerate() {
        for (k, g) in grads.iter().enumerate() {
            let gi = binning.tiles[t][k].0;
            let a = &mut acc[gi];
            a.mean2d += g.mean2d;
            a.conic += g.conic;
            a.opacity += g.opacity;
            a.color += g.color;
            a.depth += g.depth;
        }
    }

    let chained: Vec<Result<(Vector3<T>, Vector3<T>, nalgebra::Vector4<T>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let Some(p) = proj.projected[i].as_ref() else {
                return Ok((Vector3::zeros(), Vector3::zeros(), nalgebra::Vector4::zeros()));
            };
            let a = &acc[i];
            let pg = ProjectedGrad { mean2d: a.mean2d, conic: a.conic, depth: a.depth };
            let (dx, d_sigma) =
                project_gaussian_backward(&set.positions[i], &proj.covariances[i], &proj.camera, p, &pg);
            let scale = set.scale(i);
            let (d_scale, d_rot) = build_covariance_backward(&scale, &set.rotations[i], &d_sigma)?;
            Ok((dx, d_scale.component_mul(&scale), d_rot))
        })
        .collect();

    let mut gaussians = GaussianGrads::zeros(n);
    let mut mean2d = Vec::with_capacity(n);
    let mut visible = Vec::with_capacity(n);
    for (i, r) in chained.into_iter().enumerate() {
        let (dx, dl, dq) = r?;
        gaussians.positions[i] = dx;
        gaussians.log_scales[i] = dl;
        gaussians.rotations[i] = dq;
        let alpha = proj.opacities[i];
        gaussians.opacity_logits[i] = acc[i].opacity * alpha * (T::one() - alpha);
        gaussians.colors[i] = acc[i].color;
        mean2d.push(acc[i].mean2d);
        visible.push(proj.projected[i].is_some());
    }
    Ok(RenderGrads { gaussians, mean2d, visible })
}

/// Convenience: zero-filled upstream buffers matching a render.
pub fn zero_upstream<T: Real>(out: &RenderOutput<T>) -> (RgbImage<T>, ScalarImage<T>) {
    (Grid::filled(out.width(), out.height(), Vector3::zeros()), Grid::filled(out.width(), out.height(), T::zero()))
}
