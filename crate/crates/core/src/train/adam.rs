//! Adam with bias correction over flat parameter groups.

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// Moment buffers for one parameter group laid out as `rows × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub width: usize,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(rows: usize, width: usize) -> Self {
        Self { width, step: 0, m: vec![0.0; rows * width], v: vec![0.0; rows * width] }
    }

    pub fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.m.len() / self.width
        }
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter/moment length mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient/moment length mismatch");
        self.step += 1;
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = EPSILON as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let denom = self.v[i].sqrt() / bc2_sqrt + eps;
            params[i] -= step_size * self.m[i] / denom;
        }
    }

    /// Keeps rows whose flag is set.
    pub fn retain_rows(&mut self, keep: &[bool]) {
        let w = self.width;
        let filter = |buf: &mut Vec<f32>| {
            let mut out = Vec::with_capacity(buf.len());
            for (r, &k) in keep.iter().enumerate() {
                if k {
                    out.extend_from_slice(&buf[r * w..(r + 1) * w]);
                }
            }
            *buf = out;
        };
        filter(&mut self.m);
        filter(&mut self.v);
    }

    /// Appends zeroed rows.
    pub fn extend_rows(&mut self, rows: usize) {
        let n = self.m.len() + rows * self.width;
        self.m.resize(n, 0.0);
        self.v.resize(n, 0.0);
    }
}
