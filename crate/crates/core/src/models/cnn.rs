//! Residual 3D convolutional encoder. Each stage halves the grid with a
//! strided convolution, then applies residual blocks; global average pooling
//! and a linear projection produce the feature vector.

use serde::{Deserialize, Serialize};

use crate::error::{CdaError, Result};
use crate::nn::conv::{ConvCache, Conv3d};
use crate::nn::layers::{relu, relu_backward, Linear};
use crate::nn::param::{join, Module, Param};
use crate::nn::real::Real;
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embed_dim: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            stage_channels: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            embed_dim: 128,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) || self.embed_dim == 0 {
            return Err(CdaError::Config("conv channel counts must be positive".into()));
        }
        if dims.contains(&0) {
            return Err(CdaError::Config("volume dims must be positive".into()));
        }
        Ok(())
    }

    /// Spatial grid left after all strided stages.
    pub fn final_grid(&self, dims: [usize; 3]) -> [usize; 3] {
        self.stage_channels
            .iter()
            .fold(dims, |d, _| crate::nn::conv::out_dims(d, 2))
    }
}

#[derive(Debug, Clone)]
struct ResBlock<R> {
    conv_a: Conv3d<R>,
    conv_b: Conv3d<R>,
}

#[derive(Debug, Clone)]
struct Stage<R> {
    down: Conv3d<R>,
    blocks: Vec<ResBlock<R>>,
}

struct BlockCache<R> {
    a: ConvCache<R>,
    hidden: Vec<R>,
    b: ConvCache<R>,
    out: Vec<R>,
}

struct StageCache<R> {
    down: ConvCache<R>,
    down_out: Vec<R>,
    blocks: Vec<BlockCache<R>>,
}

#[derive(Debug, Clone)]
pub struct CnnEncoder<R> {
    pub config: CnnConfig,
    pub input_dims: [usize; 3],
    stages: Vec<Stage<R>>,
    proj: Linear<R>,
}

pub struct CnnCache<R> {
    stages: Vec<StageCache<R>>,
    pooled: Vec<R>,
    grid: usize,
}

impl<R: Real> CnnEncoder<R> {
    pub fn new(config: &CnnConfig, input_dims: [usize; 3], rng: &mut Rng) -> Result<Self> {
        config.validate(input_dims)?;
        let mut in_ch = 1;
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        for &ch in &config.stage_channels {
            let down = Conv3d::new(in_ch, ch, 2, 2.0, rng);
            let blocks = (0..config.blocks_per_stage)
                .map(|_| ResBlock {
                    conv_a: Conv3d::new(ch, ch, 1, 2.0, rng),
                    conv_b: Conv3d::new(ch, ch, 1, 0.5, rng),
                })
                .collect();
            stages.push(Stage { down, blocks });
            in_ch = ch;
        }
        let proj = Linear::new(in_ch, config.embed_dim, 1.0, rng);
        Ok(CnnEncoder {
            config: config.clone(),
            input_dims,
            stages,
            proj,
        })
    }

    pub fn forward(&self, x: &[R]) -> (Vec<R>, CnnCache<R>) {
        let mut h = x.to_vec();
        let mut dims = self.input_dims;
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (mut y, od, down) = stage.down.forward(&h, dims);
            relu(&mut y);
            dims = od;
            let down_out = y.clone();
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (mut hidden, _, a) = block.conv_a.forward(&y, dims);
                relu(&mut hidden);
                let (r, _, b) = block.conv_b.forward(&hidden, dims);
                let mut out: Vec<R> = y.iter().zip(&r).map(|(&u, &v)| u + v).collect();
                relu(&mut out);
                y = out.clone();
                blocks.push(BlockCache { a, hidden, b, out });
            }
            h = y;
            caches.push(StageCache {
                down,
                down_out,
                blocks,
            });
        }
        let grid: usize = dims.iter().product();
        let inv = R::c(1.0 / grid as f64);
        let pooled: Vec<R> = h.chunks_exact(grid).map(|c| c.iter().copied().sum::<R>() * inv).collect();
        let feature = self.proj.forward(&pooled, 1);
        (
            feature,
            CnnCache {
                stages: caches,
                pooled,
                grid,
            },
        )
    }

    pub fn backward(&mut self, cache: &CnnCache<R>, dfeature: &[R]) {
        let dpooled = self.proj.backward(&cache.pooled, dfeature, 1, true).expect("input grad");
        let inv = R::c(1.0 / cache.grid as f64);
        let mut dh: Vec<R> = dpooled
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * inv, cache.grid))
            .collect();
        let n_stages = self.stages.len();
        for (si, (stage, sc)) in self.stages.iter_mut().zip(&cache.stages).enumerate().rev() {
            for (block, bc) in stage.blocks.iter_mut().zip(&sc.blocks).rev() {
                relu_backward(&bc.out, &mut dh);
                let mut dhidden = block.conv_b.backward(&bc.b, &dh, true).expect("input grad");
                relu_backward(&bc.hidden, &mut dhidden);
                let dskip = block.conv_a.backward(&bc.a, &dhidden, true).expect("input grad");
                for (g, s) in dh.iter_mut().zip(&dskip) {
                    *g += *s;
                }
            }
            relu_backward(&sc.down_out, &mut dh);
            let first = si == 0;
            match stage.down.backward(&sc.down, &dh, !first) {
                Some(dx) => dh = dx,
                None => debug_assert!(first && n_stages > 0),
            }
        }
    }
}

impl<R: Real> Module<R> for CnnEncoder<R> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<R>)) {
        for (i, s) in self.stages.iter().enumerate() {
            let sp = join(prefix, &format!("stage{i}"));
            s.down.visit(&join(&sp, "down"), f);
            for (j, b) in s.blocks.iter().enumerate() {
                let bp = join(&sp, &format!("block{j}"));
                b.conv_a.visit(&join(&bp, "conv_a"), f);
                b.conv_b.visit(&join(&bp, "conv_b"), f);
            }
        }
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<R>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let sp = join(prefix, &format!("stage{i}"));
            s.down.visit_mut(&join(&sp, "down"), f);
            for (j, b) in s.blocks.iter_mut().enumerate() {
                let bp = join(&sp, &format!("block{j}"));
                b.conv_a.visit_mut(&join(&bp, "conv_a"), f);
                b.conv_b.visit_mut(&join(&bp, "conv_b"), f);
            }
        }
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}
