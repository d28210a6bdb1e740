//! Patch transformer encoder: non-overlapping cubic patches, learned position
//! embeddings, pre-norm self-attention blocks, mean pooling over tokens, then a
//! LayerNorm of the pooled vector.

use serde::{Deserialize, Serialize};

use crate::error::{CdaError, Result};
use crate::nn::layers::{gelu, gelu_backward, LayerNorm, LayerNormCache, Linear};
use crate::nn::param::{join, Module, Param};
use crate::nn::real::{matmul, Mat, Real};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            patch_size: 8,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
        }
    }
}

impl VitConfig {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 {
            return Err(CdaError::Config("transformer sizes must be positive".into()));
        }
        if let Some(d) = dims.iter().find(|&&d| d % self.patch_size != 0) {
            return Err(CdaError::Config(format!(
                "volume dim {d} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(CdaError::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_hidden() == 0 {
            return Err(CdaError::Config("mlp_ratio yields an empty hidden layer".into()));
        }
        Ok(())
    }

    pub fn num_tokens(&self, dims: [usize; 3]) -> usize {
        dims.iter().map(|d| d / self.patch_size).product()
    }

    fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Clone)]
struct Block<R> {
    ln1: LayerNorm<R>,
    qkv: Linear<R>,
    proj: Linear<R>,
    ln2: LayerNorm<R>,
    fc1: Linear<R>,
    fc2: Linear<R>,
    heads: usize,
}

struct BlockCache<R> {
    ln1: LayerNormCache<R>,
    h1: Vec<R>,
    qkv: Vec<R>,
    attn: Vec<Vec<R>>,
    mixed: Vec<R>,
    ln2: LayerNormCache<R>,
    h2: Vec<R>,
    pre_act: Vec<R>,
    act: Vec<R>,
}

/// Copies head `h` of section `part` (0 = query, 1 = key, 2 = value) out of
/// the fused `[n, 3d]` projection.
fn head_slice<R: Real>(qkv: &[R], n: usize, d: usize, hd: usize, part: usize, h: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(n * hd);
    for t in 0..n {
        let start = t * 3 * d + part * d + h * hd;
        out.extend_from_slice(&qkv[start..start + hd]);
    }
    out
}

fn scatter_head<R: Real>(dst: &mut [R], src: &[R], n: usize, stride: usize, offset: usize, hd: usize) {
    for t in 0..n {
        let start = t * stride + offset;
        for (o, s) in dst[start..start + hd].iter_mut().zip(&src[t * hd..(t + 1) * hd]) {
            *o += *s;
        }
    }
}

impl<R: Real> Block<R> {
    fn new(d: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Self {
        Block {
            ln1: LayerNorm::new(d),
            qkv: Linear::new(d, 3 * d, 1.0, rng),
            proj: Linear::new(d, d, 1.0, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, hidden, 2.0, rng),
            fc2: Linear::new(hidden, d, 1.0, rng),
            heads,
        }
    }

    fn forward(&self, x: &[R], n: usize) -> (Vec<R>, BlockCache<R>) {
        let d = self.ln1.dim;
        let hd = d / self.heads;
        let scale = R::c(1.0 / (hd as f64).sqrt());
        let (h1, ln1) = self.ln1.forward(x, n);
        let qkv = self.qkv.forward(&h1, n);
        let mut mixed = vec![R::zero(); n * d];
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = head_slice(&qkv, n, d, hd, 0, h);
            let k = head_slice(&qkv, n, d, hd, 1, h);
            let v = head_slice(&qkv, n, d, hd, 2, h);
            let mut s = vec![R::zero(); n * n];
            matmul(Mat::new(&q, n, hd), Mat::t(&k, hd, n), &mut s, false);
            for row in s.chunks_exact_mut(n) {
                let m = row.iter().fold(R::neg_infinity(), |a, &b| a.max(b * scale));
                let mut z = R::zero();
                for v in row.iter_mut() {
                    *v = (*v * scale - m).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            let mut o = vec![R::zero(); n * hd];
            matmul(Mat::new(&s, n, n), Mat::new(&v, n, hd), &mut o, false);
            scatter_head(&mut mixed, &o, n, d, h * hd, hd);
            attn.push(s);
        }
        let a = self.proj.forward(&mixed, n);
        let mid: Vec<R> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
        let (h2, ln2) = self.ln2.forward(&mid, n);
        let pre_act = self.fc1.forward(&h2, n);
        let act = gelu(&pre_act);
        let m = self.fc2.forward(&act, n);
        let out = mid.iter().zip(&m).map(|(&u, &v)| u + v).collect();
        (
            out,
            BlockCache {
                ln1,
                h1,
                qkv,
                attn,
                mixed,
                ln2,
                h2,
                pre_act,
                act,
            },
        )
    }

    fn backward(&mut self, c: &BlockCache<R>, dout: &[R], n: usize) -> Vec<R> {
        let d = self.ln1.dim;
        let hd = d / self.heads;
        let hidden = self.fc1.fan_out;
        let scale = R::c(1.0 / (hd as f64).sqrt());

        let dact = self.fc2.backward(&c.act, dout, n, true).expect("input grad");
        debug_assert_eq!(dact.len(), n * hidden);
        let dpre = gelu_backward(&c.pre_act, &dact);
        let dh2 = self.fc1.backward(&c.h2, &dpre, n, true).expect("input grad");
        let dln2 = self.ln2.backward(&c.ln2, &dh2, n);
        let dmid: Vec<R> = dout.iter().zip(&dln2).map(|(&a, &b)| a + b).collect();

        let dmixed = self.proj.backward(&c.mixed, &dmid, n, true).expect("input grad");
        let mut dqkv = vec![R::zero(); n * 3 * d];
        for h in 0..self.heads {
            let q = head_slice(&c.qkv, n, d, hd, 0, h);
            let k = head_slice(&c.qkv, n, d, hd, 1, h);
            let v = head_slice(&c.qkv, n, d, hd, 2, h);
            let a = &c.attn[h];
            let mut dout_h = Vec::with_capacity(n * hd);
            for t in 0..n {
                dout_h.extend_from_slice(&dmixed[t * d + h * hd..t * d + (h + 1) * hd]);
            }
            let mut da = vec![R::zero(); n * n];
            matmul(Mat::new(&dout_h, n, hd), Mat::t(&v, hd, n), &mut da, false);
            let mut dv = vec![R::zero(); n * hd];
            matmul(Mat::t(a, n, n), Mat::new(&dout_h, n, hd), &mut dv, false);
            // softmax backward, folded with the score scale
            let mut ds = vec![R::zero(); n * n];
            for r in 0..n {
                let ar = &a[r * n..(r + 1) * n];
                let dr = &da[r * n..(r + 1) * n];
                let dot = ar.iter().zip(dr).map(|(&x, &y)| x * y).sum::<R>();
                for j in 0..n {
                    ds[r * n + j] = ar[j] * (dr[j] - dot) * scale;
                }
            }
            let mut dq = vec![R::zero(); n * hd];
            matmul(Mat::new(&ds, n, n), Mat::new(&k, n, hd), &mut dq, false);
            let mut dk = vec![R::zero(); n * hd];
            matmul(Mat::t(&ds, n, n), Mat::new(&q, n, hd), &mut dk, false);
            scatter_head(&mut dqkv, &dq, n, 3 * d, h * hd, hd);
            scatter_head(&mut dqkv, &dk, n, 3 * d, d + h * hd, hd);
            scatter_head(&mut dqkv, &dv, n, 3 * d, 2 * d + h * hd, hd);
        }
        let dh1 = self.qkv.backward(&c.h1, &dqkv, n, true).expect("input grad");
        let dln1 = self.ln1.backward(&c.ln1, &dh1, n);
        dmid.iter().zip(&dln1).map(|(&a, &b)| a + b).collect()
    }
}

impl<R: Real> Module<R> for Block<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct VitEncoder<R> {
    pub config: VitConfig,
    pub input_dims: [usize; 3],
    patch_embed: Linear<R>,
    pos_embed: Param<R>,
    blocks: Vec<Block<R>>,
    norm: LayerNorm<R>,
}

pub struct VitCache<R> {
    tokens_in: Vec<R>,
    blocks: Vec<BlockCache<R>>,
    norm: LayerNormCache<R>,
}

impl<R: Real> VitEncoder<R> {
    pub fn new(config: &VitConfig, input_dims: [usize; 3], rng: &mut Rng) -> Result<Self> {
        config.validate(input_dims)?;
        let d = config.embed_dim;
        let n = config.num_tokens(input_dims);
        let p3 = config.patch_size.pow(3);
        let patch_embed = Linear::new(p3, d, 1.0, rng);
        let pos_embed = Param::normal(vec![n, d], 0.02, rng);
        let blocks = (0..config.depth)
            .map(|_| Block::new(d, config.heads, config.mlp_hidden(), rng))
            .collect();
        Ok(VitEncoder {
            config: config.clone(),
            input_dims,
            patch_embed,
            pos_embed,
            blocks,
            norm: LayerNorm::new(d),
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.config.num_tokens(self.input_dims)
    }

    /// Rows of flattened patches, tokens in `[i0][i1][i2]` order.
    fn patchify(&self, x: &[R]) -> Vec<R> {
        let p = self.config.patch_size;
        let [d0, d1, d2] = self.input_dims;
        let (g0, g1, g2) = (d0 / p, d1 / p, d2 / p);
        let mut out = Vec::with_capacity(x.len());
        for a in 0..g0 {
            for b in 0..g1 {
                for c in 0..g2 {
                    for z in 0..p {
                        for y in 0..p {
                            let start = ((a * p + z) * d1 + b * p + y) * d2 + c * p;
                            out.extend_from_slice(&x[start..start + p]);
                        }
                    }
                }
            }
        }
        debug_assert_eq!(out.len(), g0 * g1 * g2 * p * p * p);
        out
    }

    pub fn forward(&self, x: &[R]) -> (Vec<R>, VitCache<R>) {
        let n = self.num_tokens();
        let d = self.config.embed_dim;
        let tokens_in = self.patchify(x);
        let mut h = self.patch_embed.forward(&tokens_in, n);
        for (v, p) in h.iter_mut().zip(&self.pos_embed.value) {
            *v += *p;
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = block.forward(&h, n);
            h = out;
            blocks.push(cache);
        }
        let inv = R::c(1.0 / n as f64);
        let mut pooled = vec![R::zero(); d];
        for row in h.chunks_exact(d) {
            for (f, v) in pooled.iter_mut().zip(row) {
                *f += *v * inv;
            }
        }
        let (feature, norm) = self.norm.forward(&pooled, 1);
        (
            feature,
            VitCache {
                tokens_in,
                blocks,
                norm,
            },
        )
    }

    pub fn backward(&mut self, cache: &VitCache<R>, dfeature: &[R]) {
        let n = self.num_tokens();
        let inv = R::c(1.0 / n as f64);
        let dpooled = self.norm.backward(&cache.norm, dfeature, 1);
        let mut dh: Vec<R> = (0..n).flat_map(|_| dpooled.iter().map(move |&g| g * inv)).collect();
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dh = block.backward(bc, &dh, n);
        }
        for (g, d) in self.pos_embed.grad.iter_mut().zip(&dh) {
            *g += *d;
        }
        self.patch_embed.backward(&cache.tokens_in, &dh, n, false);
    }
}

impl<R: Real> Module<R> for VitEncoder<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
