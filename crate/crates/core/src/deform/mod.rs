//! Forward-mapping deformation field.
//!
//! A ReLU MLP reads the frequency-encoded canonical position and time and
//! predicts per-Gaussian offsets `(δx, δs, δq)`. They are applied as
//!
//! ```text
//! x_o = x_c + δx
//! ℓ_o = ℓ_c + δs                      (s_o = s_c · exp(δs))
//! q_o = normalize(q_c ⊗ normalize(δq + (1, 0, 0, 0)))
//! ```
//!
//! Opacity and color are not deformed. Canonical positions enter the network
//! as data only; no gradient reaches them through the encoding.

pub mod encoding;
pub mod mlp;

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

pub use encoding::{encode, encode_into, EncodingConfig};
use mlp::{MlpCache, MlpLayout};

use crate::error::{Error, Result};
use crate::gaussian_math::{quat_mul, quat_mul_backward, quat_normalize, quat_normalize_backward};
use crate::real::Real;
use crate::scene::{GaussianGrads, GaussianSet};

/// Output columns: δx (0..3), δs (3..6), δq (6..10).
pub const OUTPUT_DIM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden_layers: usize,
    pub width: usize,
    /// Hidden layer that also receives the encoded input; `None` disables it.
    pub skip_layer: Option<usize>,
    pub encoding: EncodingConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden_layers: 8, width: 256, skip_layer: Some(4), encoding: EncodingConfig::default() }
    }
}

impl NetConfig {
    pub fn layout(&self) -> MlpLayout {
        MlpLayout::new(self.encoding.input_dim(), self.hidden_layers, self.width, OUTPUT_DIM, self.skip_layer)
    }
}

/// Per-Gaussian offsets predicted for one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Offsets<T: Real> {
    pub dx: Vec<Vector3<T>>,
    pub ds: Vec<Vector3<T>>,
    pub dq: Vec<Vector4<T>>,
}

impl<T: Real> Offsets<T> {
    pub fn zeros(n: usize) -> Self {
        Self { dx: vec![Vector3::zeros(); n], ds: vec![Vector3::zeros(); n], dq: vec![Vector4::zeros(); n] }
    }

    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }

    fn from_rows(rows: &[T]) -> Self {
        let n = rows.len() / OUTPUT_DIM;
        let mut o = Self::zeros(n);
        for i in 0..n {
            let r = &rows[i * OUTPUT_DIM..(i + 1) * OUTPUT_DIM];
            o.dx[i] = Vector3::new(r[0], r[1], r[2]);
            o.ds[i] = Vector3::new(r[3], r[4], r[5]);
            o.dq[i] = Vector4::new(r[6], r[7], r[8], r[9]);
        }
        o
    }

    fn to_rows(&self) -> Vec<T> {
        let mut rows = Vec::with_capacity(self.len() * OUTPUT_DIM);
        for i in 0..self.len() {
            rows.extend(self.dx[i].iter());
            rows.extend(self.ds[i].iter());
            rows.extend(self.dq[i].iter());
        }
        rows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationNet<T: Real> {
    pub config: NetConfig,
    pub layout: MlpLayout,
    /// All weights and biases, layer by layer (weights row-major, then bias).
    pub params: Vec<T>,
}

/// Saved intermediates of [`DeformationNet::forward`].
#[derive(Clone, Debug)]
pub struct NetCache<T: Real> {
    mlp: MlpCache<T>,
}

impl<T: Real> DeformationNet<T> {
    /// Hidden layers drawn from `seed`; output heads start at exactly zero.
    pub fn new(config: NetConfig, seed: u64) -> Self {
        let layout = config.layout();
        let params = layout.init_params(seed);
        Self { config, layout, params }
    }

    pub fn from_params(config: NetConfig, params: Vec<T>) -> Result<Self> {
        let layout = config.layout();
        if params.len() != layout.param_count {
            return Err(Error::ShapeMismatch(format!(
                "deformation net expects {} parameters, got {}",
                layout.param_count,
                params.len()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn param_count(&self) -> usize {
        self.layout.param_count
    }

    /// Encoded `[γ(x), γ(t)]` rows for every position.
    pub fn encode_inputs(&self, positions: &[Vector3<T>], time: f64) -> Vec<T> {
        let enc = &self.config.encoding;
        let t = encode(&[T::lit(time)], enc.time_freqs, enc.include_input);
        let mut rows = Vec::with_capacity(positions.len() * enc.input_dim());
        for p in positions {
            encode_into(p.as_slice(), enc.position_freqs, enc.include_input, &mut rows);
            rows.extend_from_slice(&t);
        }
        rows
    }

    pub fn predict_offsets(&self, positions: &[Vector3<T>], time: f64) -> Offsets<T> {
        let input = self.encode_inputs(positions, time);
        let (out, _) = mlp::forward(&self.layout, &self.params, &input, positions.len(), false);
        Offsets::from_rows(&out)
    }

    pub fn forward(&self, positions: &[Vector3<T>], time: f64) -> (Offsets<T>, NetCache<T>) {
        let input = self.encode_inputs(positions, time);
        let (out, cache) = mlp::forward(&self.layout, &self.params, &input, positions.len(), true);
        (Offsets::from_rows(&out), NetCache { mlp: cache.unwrap() })
    }

    /// Gradient with respect to [`Self::params`].
    pub fn backward(&self, cache: &NetCache<T>, d_offsets: &Offsets<T>) -> Vec<T> {
        mlp::backward(&self.layout, &self.params, &cache.mlp, &d_offsets.to_rows())
    }
}

/// Increment quaternion `normalize(δq + identity)`.
fn increment<T: Real>(dq: &Vector4<T>) -> Vector4<T> {
    dq + Vector4::new(T::one(), T::zero(), T::zero(), T::zero())
}

/// Observation-space Gaussians from canonical ones and offsets.
pub fn apply_deformation<T: Real>(set: &GaussianSet<T>, offsets: &Offsets<T>) -> Result<GaussianSet<T>> {
    if offsets.len() != set.len() {
        return Err(Error::ShapeMismatch(format!("{} offsets for {} gaussians", offsets.len(), set.len())));
    }
    let mut out = set.clone();
    for i in 0..set.len() {
        out.positions[i] = set.positions[i] + offsets.dx[i];
        out.log_scales[i] = set.log_scales[i] + offsets.ds[i];
        let r = quat_normalize(&increment(&offsets.dq[i]))?;
        out.rotations[i] = quat_normalize(&quat_mul(&set.rotations[i], &r))?;
    }
    Ok(out)
}

/// Splits observation-space gradients into canonical-parameter gradients and
/// offset gradients.
pub fn apply_deformation_backward<T: Real>(
    set: &GaussianSet<T>,
    offsets: &Offsets<T>,
    d_observed: &GaussianGrads<T>,
) -> Result<(GaussianGrads<T>, Offsets<T>)> {
    let n = set.len();
    let mut d_canonical = d_observed.clone();
    let mut d_offsets = Offsets::zeros(n);
    for i in 0..n {
        d_offsets.dx[i] = d_observed.positions[i];
        d_offsets.ds[i] = d_observed.log_scales[i];
        let raw = increment(&offsets.dq[i]);
        let r = quat_normalize(&raw)?;
        let prod = quat_mul(&set.rotations[i], &r);
        let d_prod = quat_normalize_backward(&prod, &d_observed.rotations[i]);
        let (d_qc, d_r) = quat_mul_backward(&set.rotations[i], &r, &d_prod);
        d_canonical.rotations[i] = d_qc;
        d_offsets.dq[i] = quat_normalize_backward(&raw, &d_r);
    }
    Ok((d_canonical, d_offsets))
}
