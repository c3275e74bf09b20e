//! The basic network, the five pipeline stages and checkpoints.
//!
//! Parameter names are dotted paths: `sd.m`, `net.block3.bn.gamma`,
//! `net.head.weight`. Hybrid models prefix their components with `a.` and
//! `b.` and add the fusion layer `fc`.

mod checkpoint;
mod network;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use network::{
    build_basic_network, final_map_size, BasicNetwork, Block, BLOCK_CHANNELS, NUM_CLASSES,
    POOL_AFTER, STEM_CHANNELS,
};

use crate::autograd::{concat_dim1, Tape, Var};
use crate::config::{Stage, StageConfig};
use crate::dct::dct_layer_forward;
use crate::error::{Error, Result};
use crate::nn::{join, set_trainable, BatchNormParams, LinearParams, Module};
use crate::rng::Rng;
use crate::stain::{init_stain_matrix, rgb_to_od, StainMatrix};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Body {
    /// S1, S2 and S2C: stain layer, optional DCT branch, basic network.
    Single { sd: StainMatrix, net: BasicNetwork },
    /// S3 and S3C: two frozen components and a fusion layer.
    Hybrid {
        a: Box<Model>,
        b: Box<Model>,
        fc: LinearParams,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: StageConfig,
    pub body: Body,
    training: bool,
}

/// Build a stage. Hybrids take their two trained components, which are
/// switched to eval mode and frozen.
pub fn build_stage(
    cfg: &StageConfig,
    components: Option<(Model, Model)>,
    rng: &mut Rng,
) -> Result<Model> {
    cfg.validate()?;
    let body = match (cfg.stage.components(), components) {
        (None, None) => {
            let mut sd = init_stain_matrix(cfg.stain_init, &mut rng.derive(1))?;
            sd.set_frozen(cfg.freeze_stain);
            let in_ch = cfg.stage.in_channels().expect("single stage");
            let net = build_basic_network(in_ch, cfg, &mut rng.derive(2))?;
            Body::Single { sd, net }
        }
        (None, Some(_)) => {
            return Err(Error::Config(format!(
                "stage {} takes no component models",
                cfg.stage
            )));
        }
        (Some((ea, eb)), None) => {
            return Err(Error::Config(format!(
                "stage {} needs trained {ea} and {eb} components",
                cfg.stage
            )));
        }
        (Some((ea, eb)), Some((mut a, mut b))) => {
            if a.stage() != ea || b.stage() != eb {
                return Err(Error::Config(format!(
                    "stage {} expects components ({ea}, {eb}), got ({}, {})",
                    cfg.stage,
                    a.stage(),
                    b.stage()
                )));
            }
            if a.cfg.input_size != cfg.input_size || b.cfg.input_size != cfg.input_size {
                return Err(Error::Config(format!(
                    "hybrid input size {} differs from component input sizes ({}, {})",
                    cfg.input_size, a.cfg.input_size, b.cfg.input_size
                )));
            }
            for m in [&mut a, &mut b] {
                m.set_training(false);
                set_trainable(m, false, |_| false);
            }
            let width = a.feature_width() + b.feature_width();
            let fc = LinearParams::new(width, NUM_CLASSES, &mut rng.derive(3))?;
            Body::Hybrid {
                a: Box::new(a),
                b: Box::new(b),
                fc,
            }
        }
    };
    Ok(Model {
        cfg: cfg.clone(),
        body,
        training: false,
    })
}

impl Model {
    pub fn config(&self) -> &StageConfig {
        &self.cfg
    }

    pub fn stage(&self) -> Stage {
        self.cfg.stage
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Training mode uses batch statistics in batch norm; hybrid components
    /// always stay in eval mode.
    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    /// Width of the vector fed to the final linear layer.
    pub fn feature_width(&self) -> usize {
        match &self.body {
            Body::Single { net, .. } => net.feature_width(),
            Body::Hybrid { fc, .. } => fc.in_features(),
        }
    }

    /// Tensors that are statistics rather than trainable weights.
    pub fn is_buffer(name: &str) -> bool {
        BatchNormParams::is_buffer(name)
    }

    /// Quantity images after the stain layer, and the network input planes.
    fn input_planes(
        sd: &StainMatrix,
        stage: Stage,
        cfg: &StageConfig,
        tape: &mut Tape,
        prefix: &str,
        rgb: &Tensor,
    ) -> Result<Var> {
        let s = rgb.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!(
                "model input must be n×3×h×w, got {s:?}"
            )));
        }
        let od = tape.constant(rgb_to_od(rgb)?);
        let q = sd.forward(tape, &join(prefix, "sd"), od)?;
        match stage {
            Stage::S1 => Ok(q),
            Stage::S2 => dct_layer_forward(tape, q, &cfg.dct),
            Stage::S2C => {
                let d = dct_layer_forward(tape, q, &cfg.dct)?;
                concat_dim1(tape, &[q, d])
            }
            Stage::S3 | Stage::S3C => unreachable!("hybrids have no input planes"),
        }
    }

    /// Stain-layer output for `rgb` (the identity branch of S2C).
    pub fn quantity_images(&self, rgb: &Tensor) -> Result<Tensor> {
        match &self.body {
            Body::Single { sd, .. } => {
                let mut tape = Tape::inference();
                let od = tape.constant(rgb_to_od(rgb)?);
                let q = sd.forward(&mut tape, "sd", od)?;
                Ok(tape.value(q).clone())
            }
            Body::Hybrid { .. } => Err(Error::Contract("hybrid models have no stain layer".into())),
        }
    }

    /// Bilinear features in eval mode, recorded on `tape` under `prefix`.
    pub fn features_on(&self, tape: &mut Tape, prefix: &str, rgb: &Tensor) -> Result<Var> {
        match &self.body {
            Body::Single { sd, net } => {
                let x = Self::input_planes(sd, self.cfg.stage, &self.cfg, tape, prefix, rgb)?;
                net.features_eval(tape, &join(prefix, "net"), x)
            }
            Body::Hybrid { a, b, .. } => {
                let fa = a.features_on(tape, &join(prefix, "a"), rgb)?;
                let fb = b.features_on(tape, &join(prefix, "b"), rgb)?;
                concat_dim1(tape, &[fa, fb])
            }
        }
    }

    /// Logits for a batch of RGB images in `[0, 255]`. In training mode batch
    /// norm uses batch statistics and folds them into the running averages.
    pub fn forward(&mut self, tape: &mut Tape, rgb: &Tensor) -> Result<Var> {
        if !self.training {
            return self.forward_eval(tape, rgb);
        }
        let (stage, cfg) = (self.cfg.stage, self.cfg.clone());
        match &mut self.body {
            Body::Single { sd, net } => {
                let x = Self::input_planes(sd, stage, &cfg, tape, "", rgb)?;
                let f = net.features_train(tape, "net", x)?;
                net.classify(tape, "net", f)
            }
            Body::Hybrid { .. } => self.forward_eval(tape, rgb),
        }
    }

    /// Logits in eval mode regardless of the training flag.
    pub fn forward_eval(&self, tape: &mut Tape, rgb: &Tensor) -> Result<Var> {
        match &self.body {
            Body::Single { net, .. } => {
                let f = self.features_on(tape, "", rgb)?;
                net.classify(tape, "net", f)
            }
            Body::Hybrid { .. } => {
                let f = self.features_on(tape, "", rgb)?;
                self.fuse(tape, f)
            }
        }
    }

    /// Apply the hybrid fusion layer to precomputed features.
    pub fn fuse(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        match &self.body {
            Body::Hybrid { fc, .. } => fc.forward(tape, "fc", features),
            Body::Single { .. } => Err(Error::Contract(
                "fusion layer exists only on hybrid stages".into(),
            )),
        }
    }

    /// Eval-mode logits without recording gradients.
    pub fn predict(&self, rgb: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let y = self.forward_eval(&mut tape, rgb)?;
        Ok(tape.value(y).clone())
    }

    /// Post-pooling, pre-classifier vectors `[n × width]`. Refuses a model in
    /// training mode so no statistic can change.
    pub fn extract_features(&self, rgb: &Tensor) -> Result<Tensor> {
        if self.training {
            return Err(Error::Contract(
                "extract_features needs a model in eval mode".into(),
            ));
        }
        let mut tape = Tape::inference();
        let f = self.features_on(&mut tape, "", rgb)?;
        Ok(tape.value(f).clone())
    }

    /// Constraint projections after an optimiser step: keep the stain matrix
    /// invertible and PTELU parameters non-negative.
    pub fn post_step(&mut self) {
        if let Body::Single { sd, net } = &mut self.body {
            if !sd.is_frozen() {
                sd.enforce_invertible();
            }
            net.clamp_parameters();
        }
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match &self.body {
            Body::Single { sd, net } => {
                sd.visit(&join(prefix, "sd"), f);
                net.visit(&join(prefix, "net"), f);
            }
            Body::Hybrid { a, b, fc } => {
                a.visit(&join(prefix, "a"), f);
                b.visit(&join(prefix, "b"), f);
                fc.visit(&join(prefix, "fc"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match &mut self.body {
            Body::Single { sd, net } => {
                sd.visit_mut(&join(prefix, "sd"), f);
                net.visit_mut(&join(prefix, "net"), f);
            }
            Body::Hybrid { a, b, fc } => {
                a.visit_mut(&join(prefix, "a"), f);
                b.visit_mut(&join(prefix, "b"), f);
                fc.visit_mut(&join(prefix, "fc"), f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{named_tensors, parameter_count, Activation};

    fn small(stage: Stage) -> StageConfig {
        StageConfig {
            stage,
            input_size: 40,
            ..Default::default()
        }
    }

    fn rgb(n: usize, size: usize, seed: u64) -> Tensor {
        Tensor::rand_uniform(&[n, 3, size, size], 0.0, 255.0, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn final_map_sizes() {
        assert_eq!(final_map_size(350), 10);
        assert_eq!(final_map_size(96), 3);
        assert_eq!(final_map_size(40), 1);
    }

    #[test]
    fn parameter_budget() {
        for stage in [Stage::S1, Stage::S2C] {
            let m = build_stage(&StageConfig::for_stage(stage), None, &mut Rng::new(0)).unwrap();
            let n = parameter_count(&m);
            assert!(n < 2_000_000, "{n}");
            assert_eq!(m.feature_width(), 128 * 128);
        }
    }

    #[test]
    fn single_stages_produce_finite_logits() {
        for stage in [Stage::S1, Stage::S2, Stage::S2C] {
            for act in [Activation::Relu, Activation::Prelu, Activation::Ptelu] {
                let cfg = StageConfig {
                    activation: act,
                    ..small(stage)
                };
                let mut m = build_stage(&cfg, None, &mut Rng::new(1)).unwrap();
                m.set_training(true);
                let mut tape = Tape::new();
                let y = m.forward(&mut tape, &rgb(2, 40, 2)).unwrap();
                assert_eq!(tape.shape(y), &[2, 2]);
                assert!(tape.value(y).all_finite());
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_stage(&small(Stage::S2C), None, &mut Rng::new(5)).unwrap();
        let b = build_stage(&small(Stage::S2C), None, &mut Rng::new(5)).unwrap();
        let (ta, tb) = (named_tensors(&a), named_tensors(&b));
        assert_eq!(ta.len(), tb.len());
        for ((na, a), (nb, b)) in ta.iter().zip(&tb) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn hybrid_component_checks() {
        let mut rng = Rng::new(3);
        let s1 = build_stage(&small(Stage::S1), None, &mut rng).unwrap();
        let s2 = build_stage(&small(Stage::S2), None, &mut rng).unwrap();
        let err =
            build_stage(&small(Stage::S3C), Some((s1.clone(), s2.clone())), &mut rng).unwrap_err();
        assert!(
            matches!(err, Error::Config(ref m) if m.contains("S2C")),
            "{err}"
        );
        assert!(build_stage(&small(Stage::S3), None, &mut rng).is_err());
        let h = build_stage(&small(Stage::S3), Some((s1, s2)), &mut rng).unwrap();
        assert_eq!(h.feature_width(), 2 * 128 * 128);
    }

    #[test]
    fn extract_features_requires_eval_mode() {
        let mut m = build_stage(&small(Stage::S1), None, &mut Rng::new(0)).unwrap();
        m.set_training(true);
        assert!(matches!(
            m.extract_features(&rgb(1, 40, 0)),
            Err(Error::Contract(_))
        ));
    }
}
