//! Reference implementations used as oracles by the integration tests.
//!
//! Everything here is written directly from textbook definitions and shares
//! no numerical code with the library.

#![allow(dead_code)]

use seed_cl::config::RunConfig;
use seed_cl::net::{Activation, Mlp};
use seed_cl::rng::SeededRng;

/// Determinant and inverse by Gauss–Jordan elimination with partial pivoting.
pub fn det_and_inverse(a: &[f64], n: usize) -> (f64, Vec<f64>) {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))
            .unwrap();
        if piv != col {
            for j in 0..n {
                m.swap(piv * n + j, col * n + j);
                inv.swap(piv * n + j, col * n + j);
            }
            det = -det;
        }
        let p = m[col * n + col];
        det *= p;
        for j in 0..n {
            m[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                if f != 0.0 {
                    for j in 0..n {
                        m[r * n + j] -= f * m[col * n + j];
                        inv[r * n + j] -= f * inv[col * n + j];
                    }
                }
            }
        }
    }
    (det, inv)
}

/// Gaussian log-density evaluated with an explicit determinant and inverse.
pub fn brute_log_density(mean: &[f64], cov: &[f64], x: &[f64]) -> f64 {
    let n = mean.len();
    let (det, inv) = det_and_inverse(cov, n);
    let d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            q += d[i] * inv[i * n + j] * d[j];
        }
    }
    -0.5 * (det.ln() + n as f64 * (2.0 * std::f64::consts::PI).ln() + q)
}

/// Lower Cholesky factor, plain textbook loop.
pub fn chol(a: &[f64], n: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                l[i * n + i] = (a[i * n + i] - s).sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    l
}

/// Log-density through a precomputed Cholesky factor.
pub struct Density {
    pub mean: Vec<f64>,
    pub l: Vec<f64>,
    pub log_norm: f64,
}

impl Density {
    pub fn new(mean: &[f64], cov: &[f64]) -> Self {
        let n = mean.len();
        let l = chol(cov, n);
        let logdet: f64 = (0..n).map(|i| 2.0 * l[i * n + i].ln()).sum();
        Self {
            mean: mean.to_vec(),
            l,
            log_norm: -0.5 * (logdet + n as f64 * (2.0 * std::f64::consts::PI).ln()),
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let n = self.mean.len();
        let mut z = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| self.l[i * n + k] * z[k]).sum();
            z[i] = (x[i] - self.mean[i] - s) / self.l[i * n + i];
        }
        self.log_norm - 0.5 * z.iter().map(|v| v * v).sum::<f64>()
    }

    /// Draws `mean + L·z` with standard normal `z`.
    pub fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        let n = self.mean.len();
        let z: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        (0..n)
            .map(|i| self.mean[i] + (0..=i).map(|k| self.l[i * n + k] * z[k]).sum::<f64>())
            .collect()
    }
}

/// Random SPD matrix `A·Aᵀ + floor·I`.
pub fn random_spd(n: usize, floor: f64, rng: &mut SeededRng) -> Vec<f64> {
    let a: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = (0..n).map(|k| a[i * n + k] * a[j * n + k]).sum::<f64>();
        }
        m[i * n + i] += floor;
    }
    m
}

/// Forward pass of an MLP read straight from its layer fields.
pub fn mlp_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    let last = mlp.layers.len().saturating_sub(1);
    for (i, layer) in mlp.layers.iter().enumerate() {
        let mut out = vec![0.0; layer.outputs];
        for o in 0..layer.outputs {
            let mut s = layer.bias[o];
            for k in 0..layer.inputs {
                s += layer.weights[o * layer.inputs + k] * v[k];
            }
            out[o] = s;
        }
        if i < last || mlp.activate_last {
            for z in &mut out {
                *z = match mlp.activation {
                    Activation::Relu => z.max(0.0),
                    Activation::Tanh => z.tanh(),
                };
            }
        }
        v = out;
    }
    v
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Small blob stream used by the pipeline tests.
pub fn small_config(seed: u64, experts: usize, tasks: usize, classes_per_task: usize) -> RunConfig {
    let classes = tasks * classes_per_task;
    let text = format!(
        r#"
seed = {seed}
[scenario]
source = "blobs"
[scenario.blobs]
classes = {classes}
input_dim = 6
spread = 3.0
cov_scale = 1.0
train_per_class = 40
test_per_class = 20
[scenario.split]
kind = "equal"
tasks = {tasks}
[model]
input_dim = 6
trunk_layers = [16]
head_layers = [16]
embed_dim = 4
[training]
experts = {experts}
epochs = 4
batch_size = 16
lr = 0.01
milestones = []
"#
    );
    let cfg = RunConfig::from_toml(&text).unwrap();
    cfg.validate().unwrap();
    cfg
}

pub fn drift_benchmark() -> RunConfig {
    let text = include_str!("../fixtures/drift_benchmark.toml");
    let cfg = RunConfig::from_toml(text).unwrap();
    cfg.validate().unwrap();
    cfg
}
