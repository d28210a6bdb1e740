use rand_distr::{Distribution, Normal};

use super::real::Real;
use crate::seed::Rng;

/// A trainable tensor with its gradient accumulator and momentum slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<R> {
    pub shape: Vec<usize>,
    pub value: Vec<R>,
    pub grad: Vec<R>,
    pub velocity: Vec<R>,
}

impl<R: Real> Param<R> {
    pub fn from_values(shape: Vec<usize>, value: Vec<R>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "shape/value length mismatch");
        Param {
            shape,
            value,
            grad: vec![R::zero(); n],
            velocity: vec![R::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self::from_values(shape, vec![R::c(v); n])
    }

    pub fn normal(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = (0..n).map(|_| R::c(dist.sample(rng))).collect();
        Self::from_values(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = R::zero());
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.iter_mut().for_each(|v| *v = R::zero());
    }
}

/// Anything owning named parameters.
pub trait Module<R: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
