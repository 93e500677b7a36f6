//! Seeded synthetic problems.
//!
//! Latent functions are one-hidden-layer networks with cosine units,
//! `f(x) = Σ_j v_j cos(ω_jᵀx + b_j)`, with `ω_j ~ N(0, I/ℓ²)`,
//! `b_j ~ U(0, 2π)` and `v_j ~ N(0, 2σ²/H)`. As `H` grows this is a draw from
//! the squared-exponential GP prior with variance `σ²` and lengthscale `ℓ`.
//! Values, gradients and segment integrals are all available in closed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{segment_length, OperatorTag};
use crate::model::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineNetwork {
    omegas: Vec<Vec<f64>>,
    biases: Vec<f64>,
    weights: Vec<f64>,
}

impl CosineNetwork {
    pub fn new(dim: usize, hidden: usize, variance: f64, lengthscale: f64, rng: &mut ChaCha8Rng) -> Self {
        let freq = Normal::new(0.0, 1.0 / lengthscale).expect("positive lengthscale");
        let amp = Normal::new(0.0, (2.0 * variance / hidden as f64).sqrt()).expect("positive variance");
        let omegas = (0..hidden)
            .map(|_| (0..dim).map(|_| freq.sample(rng)).collect())
            .collect();
        let biases = (0..hidden)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        let weights = (0..hidden).map(|_| amp.sample(rng)).collect();
        Self {
            omegas,
            biases,
            weights,
        }
    }

    fn phase(&self, j: usize, x: &[f64]) -> f64 {
        self.omegas[j].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[j]
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (0..self.weights.len())
            .map(|j| self.weights[j] * self.phase(j, x).cos())
            .sum()
    }

    /// `∂f/∂x_d`.
    pub fn derivative(&self, x: &[f64], d: usize) -> f64 {
        (0..self.weights.len())
            .map(|j| -self.weights[j] * self.omegas[j][d] * self.phase(j, x).sin())
            .sum()
    }

    /// `∫ f` along the segment `a → b` with respect to arc length.
    pub fn line_integral(&self, a: &[f64], b: &[f64]) -> f64 {
        let len = segment_length(a, b);
        let dir: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
        (0..self.weights.len())
            .map(|j| {
                let alpha = self.phase(j, a);
                let beta: f64 = self.omegas[j].iter().zip(&dir).map(|(w, v)| w * v).sum();
                let mean_cos = if beta.abs() < 1e-8 {
                    alpha.cos() - 0.5 * beta * alpha.sin()
                } else {
                    ((alpha + beta).sin() - alpha.sin()) / beta
                };
                self.weights[j] * len * mean_cos
            })
            .sum()
    }

    /// Value of the functional `op` at `x`.
    pub fn apply(&self, x: &[f64], op: &OperatorTag) -> f64 {
        match op {
            OperatorTag::Identity => self.value(x),
            OperatorTag::Derivative { dim } => self.derivative(x, *dim),
            OperatorTag::Integral { a, b, .. } => self.line_integral(a, b),
        }
    }
}

/// Held-out evaluation points with noiseless truths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub x: Vec<f64>,
    pub op: OperatorTag,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSet {
    pub train: Vec<Observation>,
    pub test: Vec<Probe>,
    /// Latent values on a regular evaluation grid, when generated.
    pub latent: Vec<Probe>,
}

fn noisy(rng: &mut ChaCha8Rng, truth: f64, sigma: f64) -> f64 {
    truth + sigma * Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

fn uniform_point(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random::<f64>()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldParams {
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub variance: f64,
    pub lengthscale: f64,
    pub hidden: usize,
}

impl Default for FieldParams {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 500,
            noise: 0.1,
            variance: 1.0,
            lengthscale: 0.1,
            hidden: 512,
        }
    }
}

/// Noisy point observations of a smooth field on `[0, 1]²`.
pub fn field2d(params: &FieldParams, seed: u64) -> Result<SyntheticSet> {
    if !(params.noise > 0.0) {
        return Err(Error::NonPositiveNoise(params.noise));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = CosineNetwork::new(2, params.hidden, params.variance, params.lengthscale, &mut rng);
    let train = (0..params.n_train)
        .map(|_| {
            let x = uniform_point(&mut rng, 2);
            let y = noisy(&mut rng, f.value(&x), params.noise);
            Observation::identity(x, y, params.noise)
        })
        .collect::<Result<_>>()?;
    let test = (0..params.n_test)
        .map(|_| {
            let x = uniform_point(&mut rng, 2);
            Probe {
                truth: f.value(&x),
                x,
                op: OperatorTag::Identity,
            }
        })
        .collect();
    Ok(SyntheticSet {
        train,
        test,
        latent: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LineIntegralParams {
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub variance: f64,
    pub lengthscale: f64,
    pub hidden: usize,
    /// Points per axis of the latent evaluation grid.
    pub latent_per_axis: usize,
}

impl Default for LineIntegralParams {
    fn default() -> Self {
        Self {
            dim: 3,
            n_train: 1000,
            n_test: 200,
            noise: 0.01,
            variance: 1.0,
            lengthscale: 0.25,
            hidden: 512,
            latent_per_axis: 8,
        }
    }
}

/// Noisy integrals of a density field along segments from the origin to
/// uniform points in `[0, 1]^D`, held-out segments, and latent truths on a
/// regular grid.
pub fn line_integrals(params: &LineIntegralParams, seed: u64) -> Result<SyntheticSet> {
    if !(params.noise > 0.0) {
        return Err(Error::NonPositiveNoise(params.noise));
    }
    if params.dim == 0 {
        return Err(Error::InvalidConfig("dimension must be at least 1".into()));
    }
    let d = params.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = CosineNetwork::new(d, params.hidden, params.variance, params.lengthscale, &mut rng);
    let origin = vec![0.0; d];
    let segment = |rng: &mut ChaCha8Rng| {
        let b = uniform_point(rng, d);
        let op = OperatorTag::integral(origin.clone(), b.clone());
        (b, op)
    };
    let train = (0..params.n_train)
        .map(|_| {
            let (b, op) = segment(&mut rng);
            let y = noisy(&mut rng, f.apply(&b, &op), params.noise);
            Observation::new(b, op, y, params.noise)
        })
        .collect::<Result<_>>()?;
    let test = (0..params.n_test)
        .map(|_| {
            let (b, op) = segment(&mut rng);
            Probe {
                truth: f.apply(&b, &op),
                x: b,
                op,
            }
        })
        .collect();
    let k = params.latent_per_axis.max(1);
    let n_latent = k.pow(d as u32);
    let latent = (0..n_latent)
        .map(|i| {
            let idx = crate::grid::unravel(i, &vec![k; d]);
            let x: Vec<f64> = idx.iter().map(|&j| (j as f64 + 0.5) / k as f64).collect();
            Probe {
                truth: f.value(&x),
                x,
                op: OperatorTag::Identity,
            }
        })
        .collect();
    Ok(SyntheticSet { train, test, latent })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerivativeDemoParams {
    pub n_function: usize,
    pub n_derivative: usize,
    pub n_test: usize,
    pub function_noise: f64,
    pub derivative_noise: f64,
    pub variance: f64,
    pub lengthscale: f64,
    pub hidden: usize,
}

impl Default for DerivativeDemoParams {
    fn default() -> Self {
        Self {
            n_function: 100,
            n_derivative: 20,
            n_test: 100,
            function_noise: 0.05,
            derivative_noise: 0.2,
            variance: 0.5,
            lengthscale: 0.1,
            hidden: 256,
        }
    }
}

/// 1D function and derivative observations on `[0, 1]`, with evenly spaced
/// latent test points. Function observations come first in `train`.
pub fn derivative_demo(params: &DerivativeDemoParams, seed: u64) -> Result<SyntheticSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = CosineNetwork::new(1, params.hidden, params.variance, params.lengthscale, &mut rng);
    let mut train = Vec::with_capacity(params.n_function + params.n_derivative);
    for _ in 0..params.n_function {
        let x = vec![rng.random::<f64>()];
        let y = noisy(&mut rng, f.value(&x), params.function_noise);
        train.push(Observation::identity(x, y, params.function_noise)?);
    }
    for _ in 0..params.n_derivative {
        let x = vec![rng.random::<f64>()];
        let op = OperatorTag::Derivative { dim: 0 };
        let y = noisy(&mut rng, f.apply(&x, &op), params.derivative_noise);
        train.push(Observation::new(x, op, y, params.derivative_noise)?);
    }
    let n = params.n_test.max(1);
    let test = (0..params.n_test)
        .map(|i| {
            let x = vec![if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 }];
            Probe {
                truth: f.value(&x),
                x,
                op: OperatorTag::Identity,
            }
        })
        .collect();
    Ok(SyntheticSet {
        train,
        test,
        latent: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn net(dim: usize) -> CosineNetwork {
        CosineNetwork::new(dim, 32, 1.0, 0.3, &mut ChaCha8Rng::seed_from_u64(5))
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let f = net(2);
        let x = [0.3, 0.7];
        let h = 1e-6;
        for d in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[d] += h;
            xm[d] -= h;
            assert_relative_eq!(
                f.derivative(&x, d),
                (f.value(&xp) - f.value(&xm)) / (2.0 * h),
                max_relative = 1e-6
            );
        }
    }

    #[test]
    fn integral_matches_quadrature() {
        let f = net(3);
        let a = [0.0, 0.0, 0.0];
        let b = [0.9, 0.2, 0.6];
        let n = 20_000;
        let len = segment_length(&a, &b);
        let quad: f64 = (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) / n as f64;
                let p: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + t * (y - x)).collect();
                f.value(&p)
            })
            .sum::<f64>()
            * len
            / n as f64;
        assert_relative_eq!(f.line_integral(&a, &b), quad, max_relative = 1e-6);
    }

    #[test]
    fn generators_are_seeded() {
        let p = FieldParams {
            n_train: 10,
            n_test: 5,
            ..Default::default()
        };
        assert_eq!(field2d(&p, 1).unwrap(), field2d(&p, 1).unwrap());
        assert_ne!(field2d(&p, 1).unwrap(), field2d(&p, 2).unwrap());
        let l = LineIntegralParams {
            n_train: 4,
            n_test: 2,
            latent_per_axis: 2,
            ..Default::default()
        };
        let s = line_integrals(&l, 0).unwrap();
        assert_eq!(s.latent.len(), 8);
        assert!(s.train.iter().all(|o| matches!(o.op, OperatorTag::Integral { .. })));
        let d = derivative_demo(&DerivativeDemoParams::default(), 3).unwrap();
        assert_eq!(d.train.len(), 120);
        assert_eq!(d.test.len(), 100);
    }
}
