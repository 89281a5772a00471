//! Small fully-connected networks with hand-written backpropagation, plus
//! orthogonal initialization and an Adam optimizer. Everything is f64 and
//! deterministic given the seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Standard normal draw via Box-Muller.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major: w[o * in_dim + i].
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    /// Orthogonal weights scaled by `gain`, zero biases.
    pub fn orthogonal(in_dim: usize, out_dim: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut w = vec![0.0; in_dim * out_dim];
        let rows: Vec<Vec<f64>> = orthonormal_rows(out_dim.min(in_dim), out_dim.max(in_dim), rng);
        for o in 0..out_dim {
            for i in 0..in_dim {
                // When out_dim <= in_dim the orthonormal rows are the weight
                // rows; otherwise they are the columns.
                let v = if out_dim <= in_dim { rows[o][i] } else { rows[i][o] };
                w[o * in_dim + i] = gain * v;
            }
        }
        Self { in_dim, out_dim, w, b: vec![0.0; out_dim] }
    }

    pub fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x.iter()) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

/// Rows of an orthonormal matrix via modified Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(n_rows: usize, n_cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    assert!(n_rows <= n_cols);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_rows);
    while rows.len() < n_rows {
        let mut v: Vec<f64> = (0..n_cols).map(|_| gaussian(rng)).collect();
        for r in &rows {
            let dot: f64 = r.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            for (vi, ri) in v.iter_mut().zip(r.iter()) {
                *vi -= dot * ri;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            rows.push(v);
        }
    }
    rows
}

/// Two tanh hidden layers and a linear output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

/// Post-activation values saved by the forward pass for backprop.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub x: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

/// Gradient accumulator with the same shapes as [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl Mlp {
    pub fn new(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        head_gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden_gain = std::f64::consts::SQRT_2;
        Self {
            l1: Linear::orthogonal(in_dim, hidden, hidden_gain, rng),
            l2: Linear::orthogonal(hidden, hidden, hidden_gain, rng),
            l3: Linear::orthogonal(hidden, out_dim, head_gain, rng),
        }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut h1 = Vec::new();
        self.l1.forward(x, &mut h1);
        for v in h1.iter_mut() {
            *v = v.tanh();
        }
        let mut h2 = Vec::new();
        self.l2.forward(&h1, &mut h2);
        for v in h2.iter_mut() {
            *v = v.tanh();
        }
        let mut out = Vec::new();
        self.l3.forward(&h2, &mut out);
        (out, MlpCache { x: x.to_vec(), h1, h2 })
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: vec![0.0; self.l1.w.len()],
            b1: vec![0.0; self.l1.b.len()],
            w2: vec![0.0; self.l2.w.len()],
            b2: vec![0.0; self.l2.b.len()],
            w3: vec![0.0; self.l3.w.len()],
            b3: vec![0.0; self.l3.b.len()],
        }
    }

    /// Accumulate parameter gradients for one sample given d(loss)/d(output).
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grads: &mut MlpGrads) {
        let (n1, n2) = (self.l1.out_dim, self.l2.out_dim);

        // Output layer.
        let mut d_h2 = vec![0.0; n2];
        for o in 0..self.l3.out_dim {
            grads.b3[o] += d_out[o];
            for j in 0..n2 {
                grads.w3[o * n2 + j] += d_out[o] * cache.h2[j];
                d_h2[j] += d_out[o] * self.l3.w[o * n2 + j];
            }
        }

        // Second hidden layer (tanh).
        let mut d_h1 = vec![0.0; n1];
        for o in 0..n2 {
            let dz = d_h2[o] * (1.0 - cache.h2[o] * cache.h2[o]);
            grads.b2[o] += dz;
            for j in 0..n1 {
                grads.w2[o * n1 + j] += dz * cache.h1[j];
                d_h1[j] += dz * self.l2.w[o * n1 + j];
            }
        }

        // First hidden layer (tanh).
        let nx = self.l1.in_dim;
        for o in 0..n1 {
            let dz = d_h1[o] * (1.0 - cache.h1[o] * cache.h1[o]);
            grads.b1[o] += dz;
            for j in 0..nx {
                grads.w1[o * nx + j] += dz * cache.x[j];
            }
        }
    }

    pub fn n_params(&self) -> usize {
        self.l1.w.len()
            + self.l1.b.len()
            + self.l2.w.len()
            + self.l2.b.len()
            + self.l3.w.len()
            + self.l3.b.len()
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.l1.w);
        out.extend_from_slice(&self.l1.b);
        out.extend_from_slice(&self.l2.w);
        out.extend_from_slice(&self.l2.b);
        out.extend_from_slice(&self.l3.w);
        out.extend_from_slice(&self.l3.b);
    }

    pub fn read_flat(&mut self, flat: &[f64], pos: &mut usize) {
        for dst in [
            &mut self.l1.w,
            &mut self.l1.b,
            &mut self.l2.w,
            &mut self.l2.b,
            &mut self.l3.w,
            &mut self.l3.b,
        ] {
            let len = dst.len();
            dst.copy_from_slice(&flat[*pos..*pos + len]);
            *pos += len;
        }
    }
}

impl MlpGrads {
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(&self.w3);
        out.extend_from_slice(&self.b3);
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
