//! Adaptive density control: clone small Gaussians and split large ones
//! where the view-space positional gradient is high, then prune nearly
//! transparent ones.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::config::DensifyConfig;
use crate::gaussian_math::quat_to_rotation;
use crate::scene::GaussianSet;

/// Accumulated view-space gradient norms since the last density update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self { grad_sum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn record(&mut self, i: usize, norm: f64) {
        self.grad_sum[i] += norm;
        self.count[i] += 1;
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

/// Adam moments for the five Gaussian parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOptim {
    pub positions: AdamState,
    pub log_scales: AdamState,
    pub rotations: AdamState,
    pub opacities: AdamState,
    pub colors: AdamState,
}

impl GaussianOptim {
    pub fn new(n: usize) -> Self {
        Self {
            positions: AdamState::new(n, 3),
            log_scales: AdamState::new(n, 3),
            rotations: AdamState::new(n, 4),
            opacities: AdamState::new(n, 1),
            colors: AdamState::new(n, 3),
        }
    }

    pub fn groups_mut(&mut self) -> [&mut AdamState; 5] {
        [&mut self.positions, &mut self.log_scales, &mut self.rotations, &mut self.opacities, &mut self.colors]
    }

    pub fn groups(&self) -> [&AdamState; 5] {
        [&self.positions, &self.log_scales, &self.rotations, &self.opacities, &self.colors]
    }

    pub fn rows(&self) -> usize {
        self.positions.rows()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

pub fn density_control<R: Rng>(
    set: &mut GaussianSet<f32>,
    optim: &mut GaussianOptim,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    extent: f64,
    rng: &mut R,
) -> DensifyReport {
    let n = set.len();
    let mut report = DensifyReport::default();
    let mut candidates: Vec<(f64, usize)> =
        (0..n).map(|i| (stats.mean(i), i)).filter(|&(g, _)| g >= cfg.grad_threshold).collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let dense_limit = cfg.percent_dense * extent;
    let is_small = |set: &GaussianSet<f32>, i: usize| set.scale(i).max() as f64 <= dense_limit;
    let mut budget = cfg.max_gaussians.map(|m| m.saturating_sub(n));
    let mut chosen = Vec::new();
    for &(_, i) in &candidates {
        let growth = if is_small(set, i) { 1 } else { cfg.split_samples.saturating_sub(1) };
        if let Some(b) = budget.as_mut() {
            if growth > *b {
                continue;
            }
            *b -= growth;
        }
        chosen.push(i);
    }
    chosen.sort_unstable();

    let mut removed = vec![false; n];
    for &i in &chosen {
        if is_small(set, i) {
            set.push_copy(i);
            report.cloned += 1;
        }
    }
    for &i in &chosen {
        if is_small(set, i) {
            continue;
        }
        let s = set.scale(i);
        let rot = match quat_to_rotation(&set.rotations[i]) {
            Ok(r) => r,
            Err(_) => continue,
        };
        let new_log_scale = (s / cfg.split_scale_divisor as f32).map(f32::ln);
        for _ in 0..cfg.split_samples {
            let z = Vector3::new(
                rng.sample::<f32, _>(StandardNormal),
                rng.sample::<f32, _>(StandardNormal),
                rng.sample::<f32, _>(StandardNormal),
            );
            let p = set.positions[i] + rot * s.component_mul(&z);
            set.push(p, new_log_scale, set.rotations[i], set.opacity_logits[i], set.colors[i]);
        }
        removed[i] = true;
        report.split += 1;
    }
    let added = set.len() - n;
    for g in optim.groups_mut() {
        g.extend_rows(added);
    }

    let threshold = cfg.prune_opacity as f32;
    let mut keep: Vec<bool> =
        (0..set.len()).map(|i| !removed.get(i).copied().unwrap_or(false) && set.opacity(i) >= threshold).collect();
    if !keep.iter().any(|&k| k) && !set.is_empty() {
        let best = (0..set.len()).max_by(|&a, &b| set.opacity_logits[a].total_cmp(&set.opacity_logits[b])).unwrap();
        keep[best] = true;
    }
    report.pruned = keep.iter().filter(|&&k| !k).count() - report.split;
    set.retain_mask(&keep);
    for g in optim.groups_mut() {
        g.retain_rows(&keep);
    }
    report
}
