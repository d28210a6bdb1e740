use serde::{Deserialize, Serialize};

use crate::error::{CdaError, Result};
use crate::nn::layers::{relu, relu_backward, Linear};
use crate::nn::param::{join, Module, Param};
use crate::nn::real::Real;
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden_dim: 64,
            num_classes: 3,
        }
    }
}

/// Two fully connected layers with a ReLU between them; emits logits.
#[derive(Debug, Clone)]
pub struct Classifier<R> {
    fc1: Linear<R>,
    fc2: Linear<R>,
}

pub struct ClassifierCache<R> {
    input: Vec<R>,
    hidden: Vec<R>,
}

impl<R: Real> Classifier<R> {
    pub fn new(input_dim: usize, config: &ClassifierConfig, rng: &mut Rng) -> Result<Self> {
        if config.num_classes < 2 || config.hidden_dim == 0 || input_dim == 0 {
            return Err(CdaError::Config(format!(
                "classifier needs K >= 2 and positive widths, got K={} hidden={} input={input_dim}",
                config.num_classes, config.hidden_dim
            )));
        }
        Ok(Classifier {
            fc1: Linear::new(input_dim, config.hidden_dim, 2.0, rng),
            fc2: Linear::new(config.hidden_dim, config.num_classes, 1.0, rng),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.fan_in
    }

    pub fn num_classes(&self) -> usize {
        self.fc2.fan_out
    }

    pub fn forward(&self, feature: &[R]) -> Result<(Vec<R>, ClassifierCache<R>)> {
        if feature.len() != self.input_dim() {
            return Err(CdaError::Config(format!(
                "classifier expects a {}-wide feature, got {}",
                self.input_dim(),
                feature.len()
            )));
        }
        let mut hidden = self.fc1.forward(feature, 1);
        relu(&mut hidden);
        let logits = self.fc2.forward(&hidden, 1);
        Ok((
            logits,
            ClassifierCache {
                input: feature.to_vec(),
                hidden,
            },
        ))
    }

    pub fn logits(&self, feature: &[R]) -> Result<Vec<R>> {
        self.forward(feature).map(|(l, _)| l)
    }

    /// Accumulates parameter gradients and returns `dL/dfeature`.
    pub fn backward(&mut self, cache: &ClassifierCache<R>, dlogits: &[R]) -> Vec<R> {
        let mut dhidden = self.fc2.backward(&cache.hidden, dlogits, 1, true).expect("input grad");
        relu_backward(&cache.hidden, &mut dhidden);
        self.fc1.backward(&cache.input, &dhidden, 1, true).expect("input grad")
    }

    /// Sets every weight and bias to zero; used to force uniform outputs in tests.
    pub fn zero_all(&mut self) {
        self.visit_mut("", &mut |_, p| p.value.iter_mut().for_each(|v| *v = R::zero()));
    }
}

impl<R: Real> Module<R> for Classifier<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}
