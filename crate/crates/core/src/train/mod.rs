//! Optimization loop over the canonical Gaussians and the deformation net.
//!
//! Each iteration picks one training frame, deforms the canonical set to the
//! frame time, renders it, evaluates the weighted objective and applies one
//! Adam step to every parameter group. All randomness is derived from the
//! seed and the iteration number, so a resumed run matches an uninterrupted
//! one exactly.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod density;

use nalgebra::{Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::AdamState;
pub use config::{log_linear, DensifyConfig, LearningRates, TrainConfig};
pub use density::{density_control, DensifyReport, DensifyStats, GaussianOptim};

use crate::deform::{apply_deformation, apply_deformation_backward, DeformationNet};
use crate::error::{Error, Result};
use crate::gidm;
use crate::knn::NeighborGraph;
use crate::losses::{masked_ssim, psnr, total_loss, LossComponents, LossInputs};
use crate::raster::{composite_backward, render};
use crate::scene::{Camera, FrameRecord, GaussianGrads, GaussianSet, Mask, RenderOutput};

const STREAM_FRAME: u64 = 1;
const STREAM_NET_INIT: u64 = 2;
const STREAM_SPLIT: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for one purpose at one iteration, independent of history.
pub fn stream_rng(seed: u64, stream: u64, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(stream)) ^ iteration))
}

/// Index of the training frame used at `iteration`.
pub fn frame_for_iteration(seed: u64, iteration: u64, frame_count: usize) -> usize {
    stream_rng(seed, STREAM_FRAME, iteration).gen_range(0..frame_count)
}

/// Radius of the bounding sphere around the centroid, padded by 10%.
pub fn scene_extent(points: &[Vector3<f32>]) -> f64 {
    if points.is_empty() {
        return 1.0;
    }
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p.map(f64::from)) / points.len() as f64;
    let r = points.iter().map(|p| (p.map(f64::from) - c).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

/// Complete resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Iterations completed so far.
    pub iteration: u64,
    pub camera: Camera,
    pub extent: f64,
    pub gaussians: GaussianSet<f32>,
    pub net: DeformationNet<f32>,
    pub optim: GaussianOptim,
    pub net_optim: AdamState,
    pub stats: DensifyStats,
    pub graph: NeighborGraph,
    /// Pixels hidden in every training frame.
    pub occluded: Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u64,
    pub frame: usize,
    pub components: LossComponents,
    pub total: f64,
    pub gaussians: usize,
    /// Set when a non-finite gradient caused the update to be dropped.
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub densify: Option<DensifyReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub time: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn flat3(v: &[Vector3<f32>]) -> Vec<f32> {
    v.iter().flat_map(|x| x.iter().copied()).collect()
}

fn flat4(v: &[Vector4<f32>]) -> Vec<f32> {
    v.iter().flat_map(|x| x.iter().copied()).collect()
}

fn unflat3(flat: &[f32], out: &mut [Vector3<f32>]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = Vector3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]);
    }
}

fn unflat4(flat: &[f32], out: &mut [Vector4<f32>]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = Vector4::new(flat[4 * i], flat[4 * i + 1], flat[4 * i + 2], flat[4 * i + 3]);
    }
}

impl TrainState {
    /// Seeds the canonical set from the training frames.
    pub fn initialize(config: TrainConfig, camera: Camera, frames: &[FrameRecord<f32>]) -> Result<Self> {
        config.validate()?;
        camera.check()?;
        let (refined, _, gaussians) = gidm::initialize(frames, &camera, &config.init)?;
        Self::from_gaussians(config, camera, gaussians, refined.mask)
    }

    pub fn from_gaussians(
        config: TrainConfig,
        camera: Camera,
        gaussians: GaussianSet<f32>,
        occluded: Mask,
    ) -> Result<Self> {
        config.validate()?;
        if gaussians.is_empty() {
            return Err(Error::EmptyInitialization);
        }
        let net_seed = stream_rng(config.seed, STREAM_NET_INIT, 0).gen();
        let net = DeformationNet::new(config.net, net_seed);
        let n = gaussians.len();
        Ok(Self {
            extent: scene_extent(&gaussians.positions),
            graph: NeighborGraph::build(&gaussians.positions, config.neighbors),
            optim: GaussianOptim::new(n),
            net_optim: AdamState::new(net.param_count(), 1),
            stats: DensifyStats::new(n),
            config,
            iteration: 0,
            camera,
            gaussians,
            net,
            occluded,
        })
    }

    pub fn deformation_active(&self) -> bool {
        self.iteration >= self.config.warmup_iterations
    }

    /// Observation-space Gaussians at normalized time `t`.
    pub fn observed_at(&self, t: f64) -> Result<GaussianSet<f32>> {
        if !self.deformation_active() {
            return Ok(self.gaussians.clone());
        }
        let offsets = self.net.predict_offsets(&self.gaussians.positions, t);
        apply_deformation(&self.gaussians, &offsets)
    }

    pub fn render_at(&self, t: f64) -> Result<RenderOutput<f32>> {
        let mut out = render(&self.observed_at(t)?, &self.camera, &self.config.render)?;
        out.cache = None;
        Ok(out)
    }

    pub fn position_lr(&self) -> f64 {
        let lr = &self.config.lr;
        let steps = lr.position_decay_steps.unwrap_or(self.config.iterations);
        log_linear(lr.position_init * self.extent, lr.position_final * self.extent, self.iteration, steps)
    }

    pub fn net_lr(&self) -> f64 {
        let lr = &self.config.lr;
        match lr.net_final {
            Some(f) => log_linear(lr.net, f, self.iteration, self.config.iterations),
            None => lr.net,
        }
    }

    /// One iteration on a frame drawn from `frames`.
    pub fn step(&mut self, frames: &[FrameRecord<f32>]) -> Result<IterationReport> {
        if frames.is_empty() {
            return Err(Error::Config("no training frames".into()));
        }
        let k = frame_for_iteration(self.config.seed, self.iteration, frames.len());
        self.step_on(&frames[k])
    }

    /// One iteration on a given frame.
    pub fn step_on(&mut self, frame: &FrameRecord<f32>) -> Result<IterationReport> {
        frame.check_shapes()?;
        if frame.image.width != self.camera.width || frame.image.height != self.camera.height {
            return Err(Error::Frame { index: frame.index, message: "resolution differs from the camera".into() });
        }
        let active = self.deformation_active();
        let canonical = &self.gaussians;
        let deformation = if active {
            let (offsets, cache) = self.net.forward(&canonical.positions, frame.time);
            let observed = apply_deformation(canonical, &offsets)?;
            Some((offsets, cache, observed))
        } else {
            None
        };
        let observed = deformation.as_ref().map_or(canonical, |d| &d.2);

        let out = render(observed, &self.camera, &self.config.render)?;
        let occluded = self.occluded.same_shape(&frame.mask).then_some(&self.occluded);
        let inputs = LossInputs { render: &out, frame, occluded, canonical, observed, graph: &self.graph };
        let (components, loss_grads) = total_loss(&inputs, &self.config.weights)?;
        let render_grads = composite_backward(observed, &out, &loss_grads.color, &loss_grads.depth, None)?;

        let mut d_observed = render_grads.gaussians;
        d_observed.add_assign(&loss_grads.observed);
        let (mut d_canonical, d_net) = match &deformation {
            Some((offsets, cache, _)) => {
                let (dc, d_off) = apply_deformation_backward(canonical, offsets, &d_observed)?;
                (dc, Some(self.net.backward(cache, &d_off)))
            }
            None => (d_observed, None),
        };
        d_canonical.add_assign(&loss_grads.canonical);

        let mut report = IterationReport {
            iteration: self.iteration,
            frame: frame.index,
            total: components.total(&self.config.weights),
            components,
            gaussians: self.gaussians.len(),
            skipped: false,
            densify: None,
        };
        let finite = d_canonical.all_finite() && d_net.as_ref().map_or(true, |g| g.iter().all(|x| x.is_finite()));
        if finite {
            let (w, h) = (self.camera.width as f64 * 0.5, self.camera.height as f64 * 0.5);
            for (i, g) in render_grads.mean2d.iter().enumerate() {
                if render_grads.visible[i] {
                    let ndc = ((g.x as f64 * w).powi(2) + (g.y as f64 * h).powi(2)).sqrt();
                    self.stats.record(i, ndc);
                }
            }
            self.apply_gradients(&d_canonical, d_net.as_deref());
        } else {
            log::warn!("iteration {}: non-finite gradient, update skipped", self.iteration);
            report.skipped = true;
        }

        self.iteration += 1;
        report.densify = self.maintain();
        Ok(report)
    }

    fn apply_gradients(&mut self, g: &GaussianGrads<f32>, d_net: Option<&[f32]>) {
        let lr = &self.config.lr;
        let pos_lr = self.position_lr();
        let set = &mut self.gaussians;

        let mut p = flat3(&set.positions);
        self.optim.positions.step(&mut p, &flat3(&g.positions), pos_lr);
        unflat3(&p, &mut set.positions);

        let mut p = flat3(&set.log_scales);
        self.optim.log_scales.step(&mut p, &flat3(&g.log_scales), lr.scale);
        unflat3(&p, &mut set.log_scales);

        let mut p = flat4(&set.rotations);
        self.optim.rotations.step(&mut p, &flat4(&g.rotations), lr.rotation);
        unflat4(&p, &mut set.rotations);

        self.optim.opacities.step(&mut set.opacity_logits, &g.opacity_logits, lr.opacity);

        let mut p = flat3(&set.colors);
        self.optim.colors.step(&mut p, &flat3(&g.colors), lr.color);
        unflat3(&p, &mut set.colors);

        set.renormalize_rotations();
        set.clamp_colors();

        if let Some(d) = d_net {
            let net_lr = self.net_lr();
            self.net_optim.step(&mut self.net.params, d, net_lr);
        }
    }

    /// Density control and neighbor-graph refresh after an iteration.
    fn maintain(&mut self) -> Option<DensifyReport> {
        let it = self.iteration;
        let d = self.config.densify;
        let mut report = None;
        if d.enabled && it >= d.start && it <= d.end && it % d.interval == 0 {
            let mut rng = stream_rng(self.config.seed, STREAM_SPLIT, it);
            let r = density_control(&mut self.gaussians, &mut self.optim, &self.stats, &d, self.extent, &mut rng);
            self.stats = DensifyStats::new(self.gaussians.len());
            self.graph = NeighborGraph::build(&self.gaussians.positions, self.config.neighbors);
            report = Some(r);
        } else if self.config.graph_rebuild_interval > 0 && it % self.config.graph_rebuild_interval == 0 {
            self.graph = NeighborGraph::build(&self.gaussians.positions, self.config.neighbors);
        }
        report
    }

    /// Masked PSNR and SSIM of the current model on each frame.
    pub fn evaluate(&self, frames: &[FrameRecord<f32>]) -> Result<Vec<FrameMetrics>> {
        frames
            .iter()
            .map(|f| {
                let out = self.render_at(f.time)?;
                Ok(FrameMetrics {
                    index: f.index,
                    time: f.time,
                    psnr: psnr(&out.color, &f.image, &f.mask)?,
                    ssim: masked_ssim(&out.color, &f.image, &f.mask)? as f64,
                })
            })
            .collect()
    }
}

/// Mean of finite PSNR values (infinite ones are reported separately) and
/// mean SSIM.
pub fn aggregate(metrics: &[FrameMetrics]) -> (f64, f64) {
    if metrics.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = metrics.len() as f64;
    let psnr = metrics.iter().map(|m| m.psnr).sum::<f64>() / n;
    let ssim = metrics.iter().map(|m| m.ssim).sum::<f64>() / n;
    (psnr, ssim)
}
