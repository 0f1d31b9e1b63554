//! Sinusoidal frequency encoding of positions and time.

use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    /// Number of octaves for each position component.
    pub position_freqs: usize,
    /// Number of octaves for the time input.
    pub time_freqs: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { position_freqs: 10, time_freqs: 6, include_input: true }
    }
}

impl EncodingConfig {
    pub fn position_dim(&self) -> usize {
        3 * (2 * self.position_freqs + usize::from(self.include_input))
    }

    pub fn time_dim(&self) -> usize {
        2 * self.time_freqs + usize::from(self.include_input)
    }

    pub fn input_dim(&self) -> usize {
        self.position_dim() + self.time_dim()
    }
}

/// Appends `[p, sin(2⁰πp), cos(2⁰πp), …, sin(2^{L-1}πp), cos(2^{L-1}πp)]`
/// to `out`, each block spanning every component of `p`.
pub fn encode_into<T: Real>(p: &[T], freqs: usize, include_input: bool, out: &mut Vec<T>) {
    if include_input {
        out.extend_from_slice(p);
    }
    let pi = T::pi();
    let mut scale = T::one();
    for _ in 0..freqs {
        out.extend(p.iter().map(|&x| (scale * pi * x).sin()));
        out.extend(p.iter().map(|&x| (scale * pi * x).cos()));
        scale *= T::lit(2.0);
    }
}

pub fn encode<T: Real>(p: &[T], freqs: usize, include_input: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(p.len() * (2 * freqs + 1));
    encode_into(p, freqs, include_input, &mut out);
    out
}
