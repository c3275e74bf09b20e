use crate::autograd::{Tape, Var};
use crate::config::StageConfig;
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm2d_train, bilinear_pool, join, maxpool2d, ActivationKind, BatchNormParams, BatchStats,
    BilinearConfig, Conv2dParams, LinearParams, Module,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STEM_CHANNELS: usize = 16;
pub const BLOCK_CHANNELS: [usize; 5] = [32, 64, 64, 128, 128];
/// Blocks followed by a 2×2, stride 2 max pool.
pub const POOL_AFTER: [bool; 5] = [true, true, true, false, true];
pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug)]
pub struct Block {
    pub conv: Conv2dParams,
    pub bn: BatchNormParams,
    pub act: ActivationKind,
    pub pool: bool,
}

/// Strided stem, five conv/batch-norm/activation blocks, bilinear pooling and
/// a linear classifier.
#[derive(Clone, Debug)]
pub struct BasicNetwork {
    pub stem: Conv2dParams,
    pub stem_act: ActivationKind,
    pub blocks: Vec<Block>,
    pub head: LinearParams,
    pub bilinear: BilinearConfig,
    in_channels: usize,
}

pub fn build_basic_network(
    in_channels: usize,
    cfg: &StageConfig,
    rng: &mut Rng,
) -> Result<BasicNetwork> {
    if in_channels != 3 && in_channels != 6 {
        return Err(Error::Config(format!(
            "basic network takes 3 or 6 input channels, not {in_channels}"
        )));
    }
    let stem = Conv2dParams::new(in_channels, STEM_CHANNELS, 5, 2, 2, rng)?;
    let stem_act = ActivationKind::new(cfg.activation, STEM_CHANNELS)?;
    let mut blocks = Vec::with_capacity(BLOCK_CHANNELS.len());
    let mut c_in = STEM_CHANNELS;
    for (&c_out, &pool) in BLOCK_CHANNELS.iter().zip(&POOL_AFTER) {
        blocks.push(Block {
            conv: Conv2dParams::new(c_in, c_out, 3, 1, 1, rng)?,
            bn: BatchNormParams::new(c_out)?,
            act: ActivationKind::new(cfg.activation, c_out)?,
            pool,
        });
        c_in = c_out;
    }
    let head = LinearParams::new(c_in * c_in, NUM_CLASSES, rng)?;
    Ok(BasicNetwork {
        stem,
        stem_act,
        blocks,
        head,
        bilinear: cfg.bilinear(),
        in_channels,
    })
}

/// Spatial side of the final feature map for a square input.
pub fn final_map_size(input: usize) -> usize {
    let mut s = (input + 2 * 2 - 5) / 2 + 1;
    for &p in &POOL_AFTER {
        if p {
            s = (s - 2) / 2 + 1;
        }
    }
    s
}

impl BasicNetwork {
    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Width of the bilinear feature vector.
    pub fn feature_width(&self) -> usize {
        self.head.in_features()
    }

    /// Everything up to and including bilinear pooling. In training mode the
    /// batch statistics of each block are returned for the caller to fold in.
    fn trunk(
        &self,
        tape: &mut Tape,
        prefix: &str,
        x: Var,
        training: bool,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let mut h = self.stem.forward(tape, &join(prefix, "stem"), x)?;
        h = self.stem_act.forward(tape, &join(prefix, "stem_act"), h)?;
        let mut stats = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{}", i + 1));
            h = b.conv.forward(tape, &join(&p, "conv"), h)?;
            if training {
                let bp = join(&p, "bn");
                let g = tape.param(&join(&bp, "gamma"), &b.bn.gamma);
                let be = tape.param(&join(&bp, "beta"), &b.bn.beta);
                let (y, s) = batchnorm2d_train(tape, h, g, be, b.bn.eps)?;
                stats.push(s);
                h = y;
            } else {
                h = b.bn.forward_eval(tape, &join(&p, "bn"), h)?;
            }
            h = b.act.forward(tape, &join(&p, "act"), h)?;
            if b.pool {
                h = maxpool2d(tape, h, 2, 2)?;
            }
        }
        Ok((bilinear_pool(tape, h, self.bilinear)?, stats))
    }

    /// Training-mode features; batch statistics update the running averages.
    pub fn features_train(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let (f, stats) = self.trunk(tape, prefix, x, true)?;
        for (b, s) in self.blocks.iter_mut().zip(&stats) {
            b.bn.update_running(s);
        }
        Ok(f)
    }

    pub fn features_eval(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        Ok(self.trunk(tape, prefix, x, false)?.0)
    }

    pub fn classify(&self, tape: &mut Tape, prefix: &str, features: Var) -> Result<Var> {
        self.head.forward(tape, &join(prefix, "head"), features)
    }

    /// Project activation parameters back into their valid range.
    pub fn clamp_parameters(&mut self) {
        self.stem_act.clamp_parameters();
        for b in &mut self.blocks {
            b.act.clamp_parameters();
        }
    }
}

impl Module for BasicNetwork {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.stem_act.visit(&join(prefix, "stem_act"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("block{}", i + 1));
            b.conv.visit(&join(&p, "conv"), f);
            b.bn.visit(&join(&p, "bn"), f);
            b.act.visit(&join(&p, "act"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.stem_act.visit_mut(&join(prefix, "stem_act"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{}", i + 1));
            b.conv.visit_mut(&join(&p, "conv"), f);
            b.bn.visit_mut(&join(&p, "bn"), f);
            b.act.visit_mut(&join(&p, "act"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
