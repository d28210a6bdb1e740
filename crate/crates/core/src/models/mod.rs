//! The dual-branch network: a patch-transformer encoder and a residual
//! convolutional encoder, each paired with a classifier head. Both encoders
//! emit features of the same width so either head can read either encoder.

pub mod checkpoint;
pub mod classifier;
pub mod cnn;
pub mod vit;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::Volume;
use crate::error::{CdaError, Result};
use crate::nn::param::{Module, Param};
use crate::nn::real::Real;
use crate::seed::{self, stream};

pub use classifier::{Classifier, ClassifierCache, ClassifierConfig};
pub use cnn::{CnnCache, CnnConfig, CnnEncoder};
pub use vit::{VitCache, VitConfig, VitEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderConfig {
    Vit(VitConfig),
    Cnn(CnnConfig),
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        match self {
            EncoderConfig::Vit(c) => c.embed_dim,
            EncoderConfig::Cnn(c) => c.embed_dim,
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            EncoderConfig::Vit(_) => EncoderKind::Vit,
            EncoderConfig::Cnn(_) => EncoderKind::Cnn,
        }
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        match self {
            EncoderConfig::Vit(c) => c.validate(dims),
            EncoderConfig::Cnn(c) => c.validate(dims),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Vit,
    Cnn,
}

/// The two branch slots. Under homogeneous-backbone variants the slot name
/// is a role, not an architecture: the `Vit` slot may hold a conv encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Vit,
    Cnn,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Vit, Branch::Cnn];

    pub fn other(self) -> Branch {
        match self {
            Branch::Vit => Branch::Cnn,
            Branch::Cnn => Branch::Vit,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Branch::Vit => "v",
            Branch::Cnn => "c",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Vit => "vit",
            Branch::Cnn => "cnn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder(Branch),
    Classifier(Branch),
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder(Branch::Vit),
        ParamGroup::Encoder(Branch::Cnn),
        ParamGroup::Classifier(Branch::Vit),
        ParamGroup::Classifier(Branch::Cnn),
    ];

    pub fn branch(self) -> Branch {
        match self {
            ParamGroup::Encoder(b) | ParamGroup::Classifier(b) => b,
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Encoder(b) => write!(f, "enc_{}", b.tag()),
            ParamGroup::Classifier(b) => write!(f, "cls_{}", b.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dims: [usize; 3],
    pub encoder_v: EncoderConfig,
    pub encoder_c: EncoderConfig,
    pub classifier: ClassifierConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dims: [32, 32, 32],
            encoder_v: EncoderConfig::Vit(VitConfig::default()),
            encoder_c: EncoderConfig::Cnn(CnnConfig::default()),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder_v.validate(self.input_dims)?;
        self.encoder_c.validate(self.input_dims)?;
        let (dv, dc) = (self.encoder_v.embed_dim(), self.encoder_c.embed_dim());
        if dv != dc {
            return Err(CdaError::Config(format!(
                "both encoders must share one feature width so each classifier can read \
                 either encoder (got {dv} and {dc})"
            )));
        }
        if self.classifier.num_classes < 2 {
            return Err(CdaError::Config("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder_v.embed_dim()
    }

    pub fn encoder(&self, branch: Branch) -> &EncoderConfig {
        match branch {
            Branch::Vit => &self.encoder_v,
            Branch::Cnn => &self.encoder_c,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Encoder<R> {
    Vit(VitEncoder<R>),
    Cnn(CnnEncoder<R>),
}

pub enum EncoderCache<R> {
    Vit(VitCache<R>),
    Cnn(CnnCache<R>),
}

impl<R: Real> Encoder<R> {
    pub fn new(config: &EncoderConfig, dims: [usize; 3], rng: &mut seed::Rng) -> Result<Self> {
        Ok(match config {
            EncoderConfig::Vit(c) => Encoder::Vit(VitEncoder::new(c, dims, rng)?),
            EncoderConfig::Cnn(c) => Encoder::Cnn(CnnEncoder::new(c, dims, rng)?),
        })
    }

    pub fn forward(&self, x: &[R]) -> (Vec<R>, EncoderCache<R>) {
        match self {
            Encoder::Vit(e) => {
                let (f, c) = e.forward(x);
                (f, EncoderCache::Vit(c))
            }
            Encoder::Cnn(e) => {
                let (f, c) = e.forward(x);
                (f, EncoderCache::Cnn(c))
            }
        }
    }

    pub fn encode(&self, x: &[R]) -> Vec<R> {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &EncoderCache<R>, dfeature: &[R]) {
        match (self, cache) {
            (Encoder::Vit(e), EncoderCache::Vit(c)) => e.backward(c, dfeature),
            (Encoder::Cnn(e), EncoderCache::Cnn(c)) => e.backward(c, dfeature),
            _ => panic!("encoder/cache kind mismatch"),
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Vit(_) => EncoderKind::Vit,
            Encoder::Cnn(_) => EncoderKind::Cnn,
        }
    }
}

impl<R: Real> Module<R> for Encoder<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        match self {
            Encoder::Vit(e) => e.visit(prefix, f),
            Encoder::Cnn(e) => e.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        match self {
            Encoder::Vit(e) => e.visit_mut(prefix, f),
            Encoder::Cnn(e) => e.visit_mut(prefix, f),
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<R: Real>(logits: &[R]) -> Vec<R> {
    let m = logits.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
    let mut out: Vec<R> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z = out.iter().copied().sum::<R>();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// Backpropagates `dL/dp` through `p = softmax(logits)`.
pub fn softmax_backward<R: Real>(p: &[R], dp: &[R]) -> Vec<R> {
    let dot = p.iter().zip(dp).map(|(&a, &b)| a * b).sum::<R>();
    p.iter().zip(dp).map(|(&pi, &gi)| pi * (gi - dot)).collect()
}

fn fingerprint_params<R: Real>(visit: impl FnOnce(&mut dyn FnMut(&str, &Param<R>))) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    visit(&mut |name, p| {
        hasher.update(name.as_bytes());
        for &d in &p.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        buf.clear();
        for &v in &p.value {
            v.write_le(&mut buf);
        }
        hasher.update(&buf);
    });
    hex::encode(hasher.finalize())
}

/// Full dual-branch model state.
#[derive(Debug, Clone)]
pub struct CdaModel<R> {
    config: ModelConfig,
    enc_v: Encoder<R>,
    enc_c: Encoder<R>,
    cls_v: Classifier<R>,
    cls_c: Classifier<R>,
}

impl<R: Real> CdaModel<R> {
    /// Seeded initialization. Every tensor, including the classifiers' final
    /// layers, is drawn at random; the four groups use independent sub-seeds.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let sub = |tag: u64| seed::rng_for(&[seed, stream::INIT, tag]);
        let d = config.embed_dim();
        Ok(CdaModel {
            config: config.clone(),
            enc_v: Encoder::new(&config.encoder_v, config.input_dims, &mut sub(1))?,
            enc_c: Encoder::new(&config.encoder_c, config.input_dims, &mut sub(2))?,
            cls_v: Classifier::new(d, &config.classifier, &mut sub(3))?,
            cls_c: Classifier::new(d, &config.classifier, &mut sub(4))?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.classifier.num_classes
    }

    pub fn encoder(&self, b: Branch) -> &Encoder<R> {
        match b {
            Branch::Vit => &self.enc_v,
            Branch::Cnn => &self.enc_c,
        }
    }

    pub fn encoder_mut(&mut self, b: Branch) -> &mut Encoder<R> {
        match b {
            Branch::Vit => &mut self.enc_v,
            Branch::Cnn => &mut self.enc_c,
        }
    }

    pub fn classifier(&self, b: Branch) -> &Classifier<R> {
        match b {
            Branch::Vit => &self.cls_v,
            Branch::Cnn => &self.cls_c,
        }
    }

    pub fn classifier_mut(&mut self, b: Branch) -> &mut Classifier<R> {
        match b {
            Branch::Vit => &mut self.cls_v,
            Branch::Cnn => &mut self.cls_c,
        }
    }

    /// Converts a volume into encoder input, checking its grid.
    pub fn prepare_input(&self, volume: &Volume) -> Result<Vec<R>> {
        if volume.dims != self.config.input_dims {
            return Err(CdaError::Config(format!(
                "model expects {:?} volumes, got {:?}",
                self.config.input_dims, volume.dims
            )));
        }
        Ok(volume.data.iter().map(|&v| R::c(f64::from(v))).collect())
    }

    pub fn encode(&self, b: Branch, input: &[R]) -> Vec<R> {
        self.encoder(b).encode(input)
    }

    /// Logits of classifier `head` on features of encoder `enc`.
    pub fn logits(&self, enc: Branch, head: Branch, input: &[R]) -> Result<Vec<R>> {
        let f = self.encode(enc, input);
        self.classifier(head).logits(&f)
    }

    pub fn visit_group(&self, group: ParamGroup, f: &mut dyn FnMut(&str, &Param<R>)) {
        let name = group.to_string();
        match group {
            ParamGroup::Encoder(b) => self.encoder(b).visit(&name, f),
            ParamGroup::Classifier(b) => self.classifier(b).visit(&name, f),
        }
    }

    pub fn visit_group_mut(&mut self, group: ParamGroup, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        let name = group.to_string();
        match group {
            ParamGroup::Encoder(b) => self.encoder_mut(b).visit_mut(&name, f),
            ParamGroup::Classifier(b) => self.classifier_mut(b).visit_mut(&name, f),
        }
    }

    /// SHA-256 over names, shapes and values of one parameter group.
    pub fn fingerprint(&self, group: ParamGroup) -> String {
        fingerprint_params(|f| self.visit_group(group, f))
    }

    pub fn fingerprint_all(&self) -> String {
        fingerprint_params(|f| {
            for g in ParamGroup::ALL {
                self.visit_group(g, f);
            }
        })
    }

    pub fn zero_grad(&mut self) {
        for g in ParamGroup::ALL {
            self.visit_group_mut(g, &mut |_, p| p.zero_grad());
        }
    }

    pub fn reset_velocity(&mut self) {
        for g in ParamGroup::ALL {
            self.visit_group_mut(g, &mut |_, p| p.reset_velocity());
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        for g in ParamGroup::ALL {
            self.visit_group(g, &mut |_, p| n += p.len());
        }
        n
    }

    /// Deep copies of both classifiers.
    pub fn snapshot_classifiers(&self, supervised: bool) -> ClassifierSnapshot<R> {
        ClassifierSnapshot {
            vit: self.cls_v.clone(),
            cnn: self.cls_c.clone(),
            supervised,
        }
    }
}

/// Frozen copies of the two classifiers taken after source training. There is
/// no mutable access; the copies never change after construction.
#[derive(Debug, Clone)]
pub struct ClassifierSnapshot<R> {
    vit: Classifier<R>,
    cnn: Classifier<R>,
    supervised: bool,
}

impl<R: Real> ClassifierSnapshot<R> {
    pub fn classifier(&self, b: Branch) -> &Classifier<R> {
        match b {
            Branch::Vit => &self.vit,
            Branch::Cnn => &self.cnn,
        }
    }

    /// False when the snapshot was taken from an untrained model.
    pub fn supervised(&self) -> bool {
        self.supervised
    }

    pub fn fingerprint(&self, b: Branch) -> String {
        let prefix = ParamGroup::Classifier(b).to_string();
        fingerprint_params(|f| self.classifier(b).visit(&prefix, f))
    }
}
