//! Batched ReLU MLP with an optional input skip connection, stored as one
//! flat parameter vector so the optimizer and checkpoints see a single tensor.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::real::Real;

/// Rows per independent work unit in forward and backward passes.
const CHUNK_ROWS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerShape {
    fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpLayout {
    pub input_dim: usize,
    pub width: usize,
    pub output_dim: usize,
    /// Hidden layer that receives `[h, input]` instead of `h`.
    pub skip_layer: Option<usize>,
    pub hidden: Vec<LayerShape>,
    pub head: LayerShape,
    pub param_count: usize,
}

impl MlpLayout {
    pub fn new(
        input_dim: usize,
        hidden_layers: usize,
        width: usize,
        output_dim: usize,
        skip_layer: Option<usize>,
    ) -> Self {
        let skip_layer = skip_layer.filter(|&s| s >= 1 && s < hidden_layers);
        let mut offset = 0;
        let mut shape = |in_dim: usize, out_dim: usize| {
            let s = LayerShape { in_dim, out_dim, weight_offset: offset, bias_offset: offset + in_dim * out_dim };
            offset += s.param_count();
            s
        };
        let mut hidden = Vec::with_capacity(hidden_layers);
        for l in 0..hidden_layers {
            let in_dim = if l == 0 {
                input_dim
            } else if Some(l) == skip_layer {
                width + input_dim
            } else {
                width
            };
            hidden.push(shape(in_dim, width));
        }
        let head_in = if hidden_layers == 0 { input_dim } else { width };
        let head = shape(head_in, output_dim);
        Self { input_dim, width, output_dim, skip_layer, hidden, head, param_count: offset }
    }

    /// He-uniform hidden weights, zero biases and a zero head.
    pub fn init_params<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); self.param_count];
        for layer in &self.hidden {
            let bound = (6.0 / layer.in_dim as f64).sqrt();
            for w in &mut params[layer.weight_offset..layer.bias_offset] {
                *w = T::lit(rng.gen_range(-bound..bound));
            }
        }
        params
    }
}

/// Saved activations for one chunk of rows.
#[derive(Clone, Debug)]
struct ChunkCache<T: Real> {
    rows: usize,
    /// Input matrix of every hidden layer, then the head input.
    layer_inputs: Vec<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T: Real> {
    chunks: Vec<ChunkCache<T>>,
}

fn affine<T: Real>(params: &[T], shape: &LayerShape, input: &[T], rows: usize, out: &mut [T]) {
    let bias = &params[shape.bias_offset..shape.bias_offset + shape.out_dim];
    for r in 0..rows {
        out[r * shape.out_dim..(r + 1) * shape.out_dim].copy_from_slice(bias);
    }
    // out (rows x out) += input (rows x in) · Wᵀ, W stored (out x in) row-major.
    T::gemm(
        rows,
        shape.in_dim,
        shape.out_dim,
        T::one(),
        input,
        shape.in_dim,
        1,
        &params[shape.weight_offset..shape.bias_offset],
        1,
        shape.in_dim,
        T::one(),
        out,
        shape.out_dim,
        1,
    );
}

fn concat_rows<T: Real>(a: &[T], a_cols: usize, b: &[T], b_cols: usize, rows: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * (a_cols + b_cols));
    for r in 0..rows {
        out.extend_from_slice(&a[r * a_cols..(r + 1) * a_cols]);
        out.extend_from_slice(&b[r * b_cols..(r + 1) * b_cols]);
    }
    out
}

fn forward_chunk<T: Real>(
    layout: &MlpLayout,
    params: &[T],
    input: &[T],
    rows: usize,
    keep: bool,
) -> (Vec<T>, Option<ChunkCache<T>>) {
    let mut layer_inputs = Vec::new();
    let mut h: Vec<T> = input.to_vec();
    let mut h_cols = layout.input_dim;
    for (l, shape) in layout.hidden.iter().enumerate() {
        let layer_in = if Some(l) == layout.skip_layer {
            concat_rows(&h, h_cols, input, layout.input_dim, rows)
        } else {
            std::mem::take(&mut h)
        };
        let mut z = vec![T::zero(); rows * shape.out_dim];
        affine(params, shape, &layer_in, rows, &mut z);
        for v in &mut z {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        if keep {
            layer_inputs.push(layer_in);
        }
        h = z;
        h_cols = shape.out_dim;
    }
    let mut out = vec![T::zero(); rows * layout.output_dim];
    affine(params, &layout.head, &h, rows, &mut out);
    let cache = keep.then(|| {
        layer_inputs.push(h);
        ChunkCache { rows, layer_inputs }
    });
    (out, cache)
}

/// Accumulates `dW += dZᵀ · input` and `db += colsum(dZ)` into `grad`.
fn accumulate_param_grad<T: Real>(shape: &LayerShape, d_z: &[T], input: &[T], rows: usize, grad: &mut [T]) {
    T::gemm(
        shape.out_dim,
        rows,
        shape.in_dim,
        T::one(),
        d_z,
        1,
        shape.out_dim,
        input,
        shape.in_dim,
        1,
        T::one(),
        &mut grad[shape.weight_offset..shape.bias_offset],
        shape.in_dim,
        1,
    );
    let db = &mut grad[shape.bias_offset..shape.bias_offset + shape.out_dim];
    for r in 0..rows {
        for (b, &d) in db.iter_mut().zip(&d_z[r * shape.out_dim..(r + 1) * shape.out_dim]) {
            *b += d;
        }
    }
}

/// `dX = dZ · W` for a layer.
fn input_grad<T: Real>(params: &[T], shape: &LayerShape, d_z: &[T], rows: usize) -> Vec<T> {
    let mut d_in = vec![T::zero(); rows * shape.in_dim];
    T::gemm(
        rows,
        shape.out_dim,
        shape.in_dim,
        T::one(),
        d_z,
        shape.out_dim,
        1,
        &params[shape.weight_offset..shape.bias_offset],
        shape.in_dim,
        1,
        T::zero(),
        &mut d_in,
        shape.in_dim,
        1,
    );
    d_in
}

fn backward_chunk<T: Real>(layout: &MlpLayout, params: &[T], cache: &ChunkCache<T>, d_out: &[T]) -> Vec<T> {
    let rows = cache.rows;
    let mut grad = vec![T::zero(); layout.param_count];
    let n_hidden = layout.hidden.len();
    accumulate_param_grad(&layout.head, d_out, &cache.layer_inputs[n_hidden], rows, &mut grad);
    if n_hidden == 0 {
        return grad;
    }
    let mut d_h = input_grad(params, &layout.head, d_out, rows);
    for l in (0..n_hidden).rev() {
        let shape = &layout.hidden[l];
        // ReLU mask from the layer output, which is the next layer's input
        // (its leading `width` columns when that layer is the skip target).
        let out_act = &cache.layer_inputs[l + 1];
        let out_cols = if l + 1 < n_hidden { layout.hidden[l + 1].in_dim } else { layout.width };
        for r in 0..rows {
            for c in 0..shape.out_dim {
                if !(out_act[r * out_cols + c] > T::zero()) {
                    d_h[r * shape.out_dim + c] = T::zero();
                }
            }
        }
        accumulate_param_grad(shape, &d_h, &cache.layer_inputs[l], rows, &mut grad);
        if l == 0 {
            break;
        }
        let d_in = input_grad(params, shape, &d_h, rows);
        d_h = if Some(l) == layout.skip_layer {
            let mut d = Vec::with_capacity(rows * layout.width);
            for r in 0..rows {
                d.extend_from_slice(&d_in[r * shape.in_dim..r * shape.in_dim + layout.width]);
            }
            d
        } else {
            d_in
        };
    }
    grad
}

/// Forward pass over `rows` rows of `input`; returns the outputs and, when
/// requested, the cache for [`backward`].
pub fn forward<T: Real>(
    layout: &MlpLayout,
    params: &[T],
    input: &[T],
    rows: usize,
    keep_cache: bool,
) -> (Vec<T>, Option<MlpCache<T>>) {
    assert_eq!(input.len(), rows * layout.input_dim);
    assert_eq!(params.len(), layout.param_count);
    let starts: Vec<usize> = (0..rows).step_by(CHUNK_ROWS).collect();
    let results: Vec<(Vec<T>, Option<ChunkCache<T>>)> = starts
        .par_iter()
        .map(|&s| {
            let n = CHUNK_ROWS.min(rows - s);
            forward_chunk(layout, params, &input[s * layout.input_dim..(s + n) * layout.input_dim], n, keep_cache)
        })
        .collect();
    let mut out = Vec::with_capacity(rows * layout.output_dim);
    let mut chunks = Vec::new();
    for (o, c) in results {
        out.extend(o);
        if let Some(c) = c {
            chunks.push(c);
        }
    }
    (out, keep_cache.then_some(MlpCache { chunks }))
}

/// Parameter gradient given `dL/doutput`; chunk contributions are summed in
/// chunk order so the result does not depend on scheduling.
pub fn backward<T: Real>(layout: &MlpLayout, params: &[T], cache: &MlpCache<T>, d_out: &[T]) -> Vec<T> {
    let mut offsets = Vec::with_capacity(cache.chunks.len());
    let mut s = 0;
    for c in &cache.chunks {
        offsets.push(s);
        s += c.rows;
    }
    assert_eq!(d_out.len(), s * layout.output_dim);
    let partial: Vec<Vec<T>> = cache
        .chunks
        .par_iter()
        .zip(offsets.par_iter())
        .map(|(c, &o)| {
            backward_chunk(layout, params, c, &d_out[o * layout.output_dim..(o + c.rows) * layout.output_dim])
        })
        .collect();
    let mut grad = vec![T::zero(); layout.param_count];
    for p in partial {
        for (g, v) in grad.iter_mut().zip(p) {
            *g += v;
        }
    }
    grad
}
