//! 3x3x3 convolution over a single `[channels, d0, d1, d2]` sample,
//! lowered to a matrix product through an explicit column buffer.

use super::param::{join, Module, Param};
use super::real::{matmul, Mat, Real};
use crate::seed::Rng;

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL * KERNEL;

#[derive(Debug, Clone)]
pub struct Conv3d<R> {
    pub weight: Param<R>,
    pub bias: Param<R>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

pub struct ConvCache<R> {
    col: Vec<R>,
    in_dims: [usize; 3],
}

pub fn out_dims(dims: [usize; 3], stride: usize) -> [usize; 3] {
    // padding 1, kernel 3
    dims.map(|d| (d - 1) / stride + 1)
}

/// Output positions `lo..hi` along the fastest axis whose input tap
/// `ox * stride + k - 1` lies inside `[0, d)`.
fn valid_span(d: usize, od: usize, stride: usize, k: usize) -> (usize, usize) {
    let lo = usize::from(k == 0);
    let hi = if d >= k { ((d - k) / stride + 1).min(od) } else { 0 };
    (lo, hi.max(lo))
}

impl<R: Real> Conv3d<R> {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, gain: f64, rng: &mut Rng) -> Self {
        let fan_in = in_channels * TAPS;
        Conv3d {
            weight: Param::normal(
                vec![out_channels, in_channels, KERNEL, KERNEL, KERNEL],
                (gain / fan_in as f64).sqrt(),
                rng,
            ),
            bias: Param::filled(vec![out_channels], 0.0),
            in_channels,
            out_channels,
            stride,
        }
    }

    fn im2col(&self, x: &[R], dims: [usize; 3]) -> Vec<R> {
        let od = out_dims(dims, self.stride);
        let p = od[0] * od[1] * od[2];
        let s = self.stride;
        let mut col = vec![R::zero(); self.in_channels * TAPS * p];
        for ci in 0..self.in_channels {
            let plane = &x[ci * dims[0] * dims[1] * dims[2]..(ci + 1) * dims[0] * dims[1] * dims[2]];
            for kz in 0..KERNEL {
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let row = (ci * TAPS + kz * 9 + ky * 3 + kx) * p;
                        for oz in 0..od[0] {
                            let z = (oz * s + kz) as isize - 1;
                            if z < 0 || z >= dims[0] as isize {
                                continue;
                            }
                            for oy in 0..od[1] {
                                let y = (oy * s + ky) as isize - 1;
                                if y < 0 || y >= dims[1] as isize {
                                    continue;
                                }
                                let src = (z as usize * dims[1] + y as usize) * dims[2];
                                let dst = row + (oz * od[1] + oy) * od[2];
                                let (lo, hi) = valid_span(dims[2], od[2], s, kx);
                                if s == 1 {
                                    col[dst + lo..dst + hi].copy_from_slice(&plane[src + lo + kx - 1..src + hi + kx - 1]);
                                } else {
                                    for ox in lo..hi {
                                        col[dst + ox] = plane[src + ox * s + kx - 1];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[R], dims: [usize; 3]) -> Vec<R> {
        let od = out_dims(dims, self.stride);
        let p = od[0] * od[1] * od[2];
        let s = self.stride;
        let vol = dims[0] * dims[1] * dims[2];
        let mut dx = vec![R::zero(); self.in_channels * vol];
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * vol..(ci + 1) * vol];
            for kz in 0..KERNEL {
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let row = (ci * TAPS + kz * 9 + ky * 3 + kx) * p;
                        for oz in 0..od[0] {
                            let z = (oz * s + kz) as isize - 1;
                            if z < 0 || z >= dims[0] as isize {
                                continue;
                            }
                            for oy in 0..od[1] {
                                let y = (oy * s + ky) as isize - 1;
                                if y < 0 || y >= dims[1] as isize {
                                    continue;
                                }
                                let dst = (z as usize * dims[1] + y as usize) * dims[2];
                                let src = row + (oz * od[1] + oy) * od[2];
                                let (lo, hi) = valid_span(dims[2], od[2], s, kx);
                                if s == 1 {
                                    let out = &mut plane[dst + lo + kx - 1..dst + hi + kx - 1];
                                    for (o, &c) in out.iter_mut().zip(&col[src + lo..src + hi]) {
                                        *o += c;
                                    }
                                } else {
                                    for ox in lo..hi {
                                        plane[dst + ox * s + kx - 1] += col[src + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the `[out_channels, od0, od1, od2]` output and its output dims.
    pub fn forward(&self, x: &[R], dims: [usize; 3]) -> (Vec<R>, [usize; 3], ConvCache<R>) {
        assert_eq!(x.len(), self.in_channels * dims.iter().product::<usize>());
        let od = out_dims(dims, self.stride);
        let p: usize = od.iter().product();
        let k = self.in_channels * TAPS;
        let col = self.im2col(x, dims);
        let mut y = vec![R::zero(); self.out_channels * p];
        matmul(
            Mat::new(&self.weight.value, self.out_channels, k),
            Mat::new(&col, k, p),
            &mut y,
            false,
        );
        for (plane, &b) in y.chunks_exact_mut(p).zip(&self.bias.value) {
            plane.iter_mut().for_each(|v| *v += b);
        }
        (y, od, ConvCache { col, in_dims: dims })
    }

    pub fn backward(&mut self, cache: &ConvCache<R>, dy: &[R], want_input_grad: bool) -> Option<Vec<R>> {
        let od = out_dims(cache.in_dims, self.stride);
        let p: usize = od.iter().product();
        let k = self.in_channels * TAPS;
        matmul(
            Mat::new(dy, self.out_channels, p),
            Mat::t(&cache.col, p, k),
            &mut self.weight.grad,
            true,
        );
        for (g, plane) in self.bias.grad.iter_mut().zip(dy.chunks_exact(p)) {
            *g += plane.iter().copied().sum::<R>();
        }
        want_input_grad.then(|| {
            let mut dcol = vec![R::zero(); k * p];
            matmul(
                Mat::t(&self.weight.value, k, self.out_channels),
                Mat::new(dy, self.out_channels, p),
                &mut dcol,
                false,
            );
            self.col2im(&dcol, cache.in_dims)
        })
    }
}

impl<R: Real> Module<R> for Conv3d<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    /// Direct 7-loop convolution.
    fn reference(conv: &Conv3d<f64>, x: &[f64], dims: [usize; 3]) -> Vec<f64> {
        let od = out_dims(dims, conv.stride);
        let mut y = vec![0.0; conv.out_channels * od.iter().product::<usize>()];
        for co in 0..conv.out_channels {
            for oz in 0..od[0] {
                for oy in 0..od[1] {
                    for ox in 0..od[2] {
                        let mut acc = conv.bias.value[co];
                        for ci in 0..conv.in_channels {
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let z = (oz * conv.stride + kz) as isize - 1;
                                        let yy = (oy * conv.stride + ky) as isize - 1;
                                        let xx = (ox * conv.stride + kx) as isize - 1;
                                        let inside = [z, yy, xx]
                                            .iter()
                                            .zip(dims)
                                            .all(|(&c, d)| c >= 0 && c < d as isize);
                                        if inside {
                                            let xi = ((ci * dims[0] + z as usize) * dims[1] + yy as usize) * dims[2]
                                                + xx as usize;
                                            let wi = (((co * conv.in_channels + ci) * 3 + kz) * 3 + ky) * 3 + kx;
                                            acc += conv.weight.value[wi] * x[xi];
                                        }
                                    }
                                }
                            }
                        }
                        y[((co * od[0] + oz) * od[1] + oy) * od[2] + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = seed::rng(7);
        for stride in [1, 2] {
            let mut conv = Conv3d::<f64>::new(2, 3, stride, 2.0, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3];
            let dims = [5, 4, 6];
            let x: Vec<f64> = (0..2 * 5 * 4 * 6).map(|i| ((i * 31 % 17) as f64 - 8.0) / 8.0).collect();
            let (y, od, _) = conv.forward(&x, dims);
            assert_eq!(od, out_dims(dims, stride));
            let want = reference(&conv, &x, dims);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_even_dims() {
        assert_eq!(out_dims([32, 32, 32], 2), [16, 16, 16]);
        assert_eq!(out_dims([2, 2, 2], 2), [1, 1, 1]);
        assert_eq!(out_dims([5, 5, 5], 1), [5, 5, 5]);
    }
}
