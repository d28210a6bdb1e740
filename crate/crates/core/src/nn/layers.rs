//! Row-wise layers. Inputs are row-major `[rows, features]` buffers for a
//! single sample (tokens for the transformer, one row for heads).

use super::param::{join, Module, Param};
use super::real::{matmul, Mat, Real};
use crate::seed::Rng;

#[derive(Debug, Clone)]
pub struct Linear<R> {
    pub weight: Param<R>,
    pub bias: Param<R>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl<R: Real> Linear<R> {
    /// Gaussian weights with variance `gain / fan_in`; zero bias.
    pub fn new(fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        Linear {
            weight: Param::normal(vec![fan_out, fan_in], (gain / fan_in as f64).sqrt(), rng),
            bias: Param::filled(vec![fan_out], 0.0),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, x: &[R], rows: usize) -> Vec<R> {
        let mut y = vec![R::zero(); rows * self.fan_out];
        matmul(
            Mat::new(x, rows, self.fan_in),
            Mat::t(&self.weight.value, self.fan_in, self.fan_out),
            &mut y,
            false,
        );
        for row in y.chunks_exact_mut(self.fan_out) {
            for (v, b) in row.iter_mut().zip(&self.bias.value) {
                *v += *b;
            }
        }
        y
    }

    /// Accumulates parameter gradients; returns `dL/dx` when `want_input_grad`.
    pub fn backward(&mut self, x: &[R], dy: &[R], rows: usize, want_input_grad: bool) -> Option<Vec<R>> {
        matmul(
            Mat::t(dy, self.fan_out, rows),
            Mat::new(x, rows, self.fan_in),
            &mut self.weight.grad,
            true,
        );
        for row in dy.chunks_exact(self.fan_out) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += *d;
            }
        }
        want_input_grad.then(|| {
            let mut dx = vec![R::zero(); rows * self.fan_in];
            matmul(
                Mat::new(dy, rows, self.fan_out),
                Mat::new(&self.weight.value, self.fan_out, self.fan_in),
                &mut dx,
                false,
            );
            dx
        })
    }
}

impl<R: Real> Module<R> for Linear<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<R> {
    pub gamma: Param<R>,
    pub beta: Param<R>,
    pub dim: usize,
    pub eps: f64,
}

pub struct LayerNormCache<R> {
    xhat: Vec<R>,
    rstd: Vec<R>,
}

impl<R: Real> LayerNorm<R> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::filled(vec![dim], 1.0),
            beta: Param::filled(vec![dim], 0.0),
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &[R], rows: usize) -> (Vec<R>, LayerNormCache<R>) {
        let d = self.dim;
        let n = R::c(d as f64);
        let mut y = vec![R::zero(); rows * d];
        let mut xhat = vec![R::zero(); rows * d];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<R>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
            let s = R::one() / (var + R::c(self.eps)).sqrt();
            rstd.push(s);
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                y[r * d + j] = h * self.gamma.value[j] + self.beta.value[j];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<R>, dy: &[R], rows: usize) -> Vec<R> {
        let d = self.dim;
        let n = R::c(d as f64);
        let mut dx = vec![R::zero(); rows * d];
        let mut dxhat = vec![R::zero(); d];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let g = &dy[r * d..(r + 1) * d];
            for j in 0..d {
                self.gamma.grad[j] += g[j] * xh[j];
                self.beta.grad[j] += g[j];
                dxhat[j] = g[j] * self.gamma.value[j];
            }
            let mean_d = dxhat.iter().copied().sum::<R>() / n;
            let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<R>() / n;
            let s = cache.rstd[r];
            for j in 0..d {
                dx[r * d + j] = s * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }
}

impl<R: Real> Module<R> for LayerNorm<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

pub fn relu<R: Real>(x: &mut [R]) {
    for v in x {
        if *v < R::zero() {
            *v = R::zero();
        }
    }
}

/// Masks `dy` in place by the sign of the ReLU output.
pub fn relu_backward<R: Real>(y: &[R], dy: &mut [R]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if v <= R::zero() {
            *g = R::zero();
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<R: Real>(x: &[R]) -> Vec<R> {
    let (k, c, half) = (R::c(GELU_K), R::c(GELU_C), R::c(0.5));
    x.iter()
        .map(|&v| half * v * (R::one() + (k * (v + c * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward<R: Real>(x: &[R], dy: &[R]) -> Vec<R> {
    let (k, c, half, three) = (R::c(GELU_K), R::c(GELU_C), R::c(0.5), R::c(3.0));
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let t = (k * (v + c * v * v * v)).tanh();
            let dt = (R::one() - t * t) * k * (R::one() + three * c * v * v);
            g * (half * (R::one() + t) + half * v * dt)
        })
        .collect()
}
