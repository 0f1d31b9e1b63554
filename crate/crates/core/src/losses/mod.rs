//! Training objectives and evaluation metrics.
//!
//! Every loss returns its value together with the gradient with respect to
//! its inputs. [`total_loss`] combines them into the weighted objective
//!
//! ```text
//! L = L_color + λ1 (1 - SSIM) + λ2 L_depth + λ3 L_pos + λ4 L_cov + λ5 L_smooth
//! ```

pub mod ssim;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub use ssim::{masked_ssim, masked_ssim_grad};

use crate::error::{Error, Result};
use crate::gaussian_math::{build_covariance, build_covariance_backward};
use crate::knn::NeighborGraph;
use crate::real::Real;
use crate::scene::{FrameRecord, GaussianGrads, GaussianSet, Mask, RenderOutput, RgbImage, ScalarImage};

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn check_shape<P, Q>(a: &crate::Grid<P>, b: &crate::Grid<Q>, mask: &Mask, what: &str) -> Result<()> {
    if !a.same_shape(b) || !a.same_shape(mask) {
        return Err(Error::ShapeMismatch(format!("{what}: buffers differ in resolution")));
    }
    Ok(())
}

/// Mean absolute color error over tissue pixels and channels.
pub fn masked_l1_color<T: Real>(pred: &RgbImage<T>, gt: &RgbImage<T>, mask: &Mask) -> Result<(T, RgbImage<T>)> {
    check_shape(pred, gt, mask, "color loss")?;
    let n = mask.data.iter().filter(|&&m| !m).count();
    if n == 0 {
        return Err(Error::AllMasked);
    }
    let inv = T::one() / T::lit((3 * n) as f64);
    let mut grad = RgbImage::filled(pred.width, pred.height, Vector3::zeros());
    let mut sum = T::zero();
    for i in 0..pred.len() {
        if mask.data[i] {
            continue;
        }
        let d = pred.data[i] - gt.data[i];
        sum += d.abs().sum();
        grad.data[i] = d.map(|x| sign(x) * inv);
    }
    Ok((sum * inv, grad))
}

/// Mean absolute depth error over tissue pixels with valid (positive) depth.
pub fn masked_l1_depth<T: Real>(
    pred: &ScalarImage<T>,
    gt: &ScalarImage<T>,
    mask: &Mask,
) -> Result<(T, ScalarImage<T>)> {
    check_shape(pred, gt, mask, "depth loss")?;
    if mask.data.iter().all(|&m| m) {
        return Err(Error::AllMasked);
    }
    let valid = |i: usize| !mask.data[i] && gt.data[i] > T::zero();
    let n = (0..pred.len()).filter(|&i| valid(i)).count();
    let mut grad = ScalarImage::filled(pred.width, pred.height, T::zero());
    if n == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::lit(n as f64);
    let mut sum = T::zero();
    for i in 0..pred.len() {
        if valid(i) {
            let d = pred.data[i] - gt.data[i];
            sum += d.abs();
            grad.data[i] = sign(d) * inv;
        }
    }
    Ok((sum * inv, grad))
}

/// Squared-difference total variation at pixels of `region` against their
/// left and upper neighbors, averaged over the region size.
pub fn tv_smooth_loss<T: Real>(pred: &RgbImage<T>, region: &Mask) -> Result<(T, RgbImage<T>)> {
    if !pred.same_shape(region) {
        return Err(Error::ShapeMismatch("smoothness loss: buffers differ in resolution".into()));
    }
    let mut grad = RgbImage::filled(pred.width, pred.height, Vector3::zeros());
    let n = region.data.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::lit(n as f64);
    let two = T::lit(2.0);
    let mut sum = T::zero();
    for v in 0..pred.height {
        for u in 0..pred.width {
            if !*region.get(u, v) {
                continue;
            }
            let p = pred.index(u, v);
            let mut pair = |q: usize| {
                let d = pred.data[p] - pred.data[q];
                sum += d.norm_squared();
                grad.data[p] += d * (two * inv);
                grad.data[q] -= d * (two * inv);
            };
            if u > 0 {
                pair(p - 1);
            }
            if v > 0 {
                pair(p - pred.width);
            }
        }
    }
    Ok((sum * inv, grad))
}

/// Gradients of a neighbor-distance loss for both point sets.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrads<G> {
    pub canonical: Vec<G>,
    pub observed: Vec<G>,
}

/// `mean |‖x_c[i] - x_c[k]‖ - ‖x_o[i] - x_o[k]‖|` over all graph edges.
pub fn deformation_pos_loss<T: Real>(
    graph: &NeighborGraph,
    canonical: &[Vector3<T>],
    observed: &[Vector3<T>],
) -> Result<(T, PairGrads<Vector3<T>>)> {
    pair_loss(graph, canonical, observed, |a, b| a - b, |v| v.norm())
}

/// Same structure as [`deformation_pos_loss`] with the Frobenius distance
/// between covariance matrices.
pub fn deformation_cov_loss<T: Real>(
    graph: &NeighborGraph,
    canonical: &[Matrix3<T>],
    observed: &[Matrix3<T>],
) -> Result<(T, PairGrads<Matrix3<T>>)> {
    pair_loss(graph, canonical, observed, |a, b| a - b, |m| m.norm())
}

fn pair_loss<T, G>(
    graph: &NeighborGraph,
    canonical: &[G],
    observed: &[G],
    sub: impl Fn(&G, &G) -> G,
    norm: impl Fn(&G) -> T,
) -> Result<(T, PairGrads<G>)>
where
    T: Real,
    G: Clone + std::ops::AddAssign + std::ops::SubAssign + std::ops::Mul<T, Output = G> + num_zero::Zero,
{
    if canonical.len() != graph.len() || observed.len() != graph.len() {
        return Err(Error::ShapeMismatch(format!(
            "neighbor graph over {} gaussians, got {} canonical and {} observed",
            graph.len(),
            canonical.len(),
            observed.len()
        )));
    }
    let mut grads = PairGrads { canonical: vec![G::zero(); graph.len()], observed: vec![G::zero(); graph.len()] };
    let edges = graph.edge_count();
    if edges == 0 {
        return Ok((T::zero(), grads));
    }
    let inv = T::one() / T::lit(edges as f64);
    let mut sum = T::zero();
    for (i, nbrs) in graph.neighbors.iter().enumerate() {
        for &k in nbrs {
            let dc = sub(&canonical[i], &canonical[k]);
            let d_o = sub(&observed[i], &observed[k]);
            let (lc, lo) = (norm(&dc), norm(&d_o));
            let diff = lc - lo;
            sum += diff.abs();
            let s = sign(diff) * inv;
            if s != T::zero() && lc > T::zero() {
                let g = dc * (s / lc);
                grads.canonical[i] += g.clone();
                grads.canonical[k] -= g;
            }
            if s != T::zero() && lo > T::zero() {
                let g = d_o * (s / lo);
                grads.observed[i] -= g.clone();
                grads.observed[k] += g;
            }
        }
    }
    Ok((sum * inv, grads))
}

/// Minimal additive identity for the vector/matrix gradient types.
mod num_zero {
    use nalgebra::{Matrix3, Vector3};

    use crate::real::Real;

    pub trait Zero {
        fn zero() -> Self;
    }

    impl<T: Real> Zero for Vector3<T> {
        fn zero() -> Self {
            Vector3::zeros()
        }
    }

    impl<T: Real> Zero for Matrix3<T> {
        fn zero() -> Self {
            Matrix3::zeros()
        }
    }
}

/// Per-Gaussian covariances `R diag(s²) Rᵀ`.
pub fn covariances<T: Real>(set: &GaussianSet<T>) -> Result<Vec<Matrix3<T>>> {
    (0..set.len()).map(|i| build_covariance(&set.scale(i), &set.rotations[i])).collect()
}

/// Chains `dL/dΣ` into log-scale and rotation gradients, accumulating into `out`.
pub fn covariances_backward<T: Real>(
    set: &GaussianSet<T>,
    d_sigma: &[Matrix3<T>],
    out: &mut GaussianGrads<T>,
) -> Result<()> {
    for (i, ds) in d_sigma.iter().enumerate() {
        let s = set.scale(i);
        let (d_s, d_q) = build_covariance_backward(&s, &set.rotations[i], ds)?;
        out.log_scales[i] += d_s.component_mul(&s);
        out.rotations[i] += d_q;
    }
    Ok(())
}

/// Masked PSNR in dB with peak 1; `f64::INFINITY` when the images agree.
pub fn psnr<T: Real>(a: &RgbImage<T>, b: &RgbImage<T>, mask: &Mask) -> Result<f64> {
    check_shape(a, b, mask, "psnr")?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.len() {
        if !mask.data[i] {
            sum += (a.data[i] - b.data[i]).map(|x| x.to_f64()).norm_squared();
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::AllMasked);
    }
    let mse = sum / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ssim: f64,
    pub depth: f64,
    pub pos: f64,
    pub cov: f64,
    pub smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ssim: 0.2, depth: 0.001, pos: 1.0, cov: 200.0, smooth: 0.02 }
    }
}

/// Unweighted loss terms; `ssim` holds `1 - SSIM`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub color: f64,
    pub ssim: f64,
    pub depth: f64,
    pub pos: f64,
    pub cov: f64,
    pub smooth: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.color
            + w.ssim * self.ssim
            + w.depth * self.depth
            + w.pos * self.pos
            + w.cov * self.cov
            + w.smooth * self.smooth
    }
}

/// Everything the objective reads for one training frame.
pub struct LossInputs<'a, T: Real> {
    pub render: &'a RenderOutput<T>,
    pub frame: &'a FrameRecord<T>,
    /// Pixels hidden in every frame; `None` disables the smoothness term.
    pub occluded: Option<&'a Mask>,
    pub canonical: &'a GaussianSet<T>,
    pub observed: &'a GaussianSet<T>,
    pub graph: &'a NeighborGraph,
}

/// Gradients of the weighted objective.
#[derive(Clone, Debug)]
pub struct LossGrads<T: Real> {
    pub color: RgbImage<T>,
    pub depth: ScalarImage<T>,
    /// Direct dependence on canonical positions, scales and rotations.
    pub canonical: GaussianGrads<T>,
    /// Direct dependence on observation-space positions, scales and rotations
    /// through the rigidity terms (rendering gradients come separately).
    pub observed: GaussianGrads<T>,
}

pub fn total_loss<T: Real>(inputs: &LossInputs<'_, T>, w: &LossWeights) -> Result<(LossComponents, LossGrads<T>)> {
    let f = inputs.frame;
    let r = inputs.render;
    let (color, mut g_color) = masked_l1_color(&r.color, &f.image, &f.mask)?;
    let (s, g_ssim) = masked_ssim_grad(&r.color, &f.image, &f.mask)?;
    let (depth, g_depth) = masked_l1_depth(&r.depth, &f.depth, &f.mask)?;
    let (pos, g_pos) = deformation_pos_loss(inputs.graph, &inputs.canonical.positions, &inputs.observed.positions)?;
    let sc = covariances(inputs.canonical)?;
    let so = covariances(inputs.observed)?;
    let (cov, g_cov) = deformation_cov_loss(inputs.graph, &sc, &so)?;
    let (smooth, g_smooth) = match inputs.occluded {
        Some(m) => tv_smooth_loss(&r.color, m)?,
        None => (T::zero(), RgbImage::filled(r.width(), r.height(), Vector3::zeros())),
    };

    let lit = |x: f64| T::lit(x);
    for i in 0..g_color.len() {
        g_color.data[i] -= g_ssim.data[i] * lit(w.ssim);
        g_color.data[i] += g_smooth.data[i] * lit(w.smooth);
    }
    let g_depth = g_depth.map(|&d| d * lit(w.depth));

    let n = inputs.canonical.len();
    let mut canonical = GaussianGrads::zeros(n);
    let mut observed = GaussianGrads::zeros(n);
    for i in 0..n {
        canonical.positions[i] = g_pos.canonical[i] * lit(w.pos);
        observed.positions[i] = g_pos.observed[i] * lit(w.pos);
    }
    let scale = |v: Vec<Matrix3<T>>| v.into_iter().map(|m| m * lit(w.cov)).collect::<Vec<_>>();
    covariances_backward(inputs.canonical, &scale(g_cov.canonical), &mut canonical)?;
    covariances_backward(inputs.observed, &scale(g_cov.observed), &mut observed)?;

    let components = LossComponents {
        color: color.to_f64(),
        ssim: 1.0 - s.to_f64(),
        depth: depth.to_f64(),
        pos: pos.to_f64(),
        cov: cov.to_f64(),
        smooth: smooth.to_f64(),
    };
    Ok((components, LossGrads { color: g_color, depth: g_depth, canonical, observed }))
}
