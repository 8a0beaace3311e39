//! The full scorer: backbone, feedback blocks, context encoder and the fusion
//! regressor that turns each time step into a predicted MOS.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneVariant};
use crate::encoder::{ContextEncoder, EncoderConfig};
use crate::error::{config, Error, Result};
use crate::feedback::{FeedbackConfig, FeedbackNet};
use crate::graph::{Tape, Var};
use crate::imaging::Image;
use crate::losses::LossConfig;
use crate::par::Exec;
use crate::params::{lecun_normal, ParamGrads, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Width of the fused per-step feature.
pub const FUSION_WIDTH: usize = 128;

/// Fusion regressor widths and the fixed map from its raw output to the MOS range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorConfig {
    pub hidden: usize,
    /// `score = output_offset + output_scale * raw`.
    pub output_offset: f64,
    pub output_scale: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            output_offset: 50.0,
            output_scale: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssessorConfig {
    pub backbone: BackboneConfig,
    pub feedback: FeedbackConfig,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub regressor: RegressorConfig,
    #[serde(default)]
    pub loss: LossConfig,
    /// Number of feedback steps.
    #[serde(rename = "T")]
    pub steps: usize,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
}

impl AssessorConfig {
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            feedback: FeedbackConfig::tiny(),
            encoder: EncoderConfig::tiny(),
            regressor: RegressorConfig::default(),
            loss: LossConfig::default(),
            steps: 4,
            init_seed: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            backbone: BackboneConfig::full(),
            feedback: FeedbackConfig::full(),
            encoder: EncoderConfig::full(),
            ..Self::tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.feedback.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        if self.steps != self.loss.steps {
            return config(format!(
                "T = {} does not match the loss configuration (T = {})",
                self.steps, self.loss.steps
            ));
        }
        let fused = self.encoder.context_dim + 3 * self.feedback.head_dim;
        if fused != FUSION_WIDTH {
            return config(format!(
                "fused feature width is {fused}; context and quality vectors must give {FUSION_WIDTH}"
            ));
        }
        if self.regressor.hidden == 0 || !self.regressor.output_scale.is_finite() {
            return config("regressor hidden width must be positive and its scale finite");
        }
        self.encoder.patch_count(self.backbone.input_size)?;
        Ok(())
    }
}

/// `scores[t]` is the prediction after feedback step `t + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScores {
    pub scores: Vec<f64>,
}

impl StepScores {
    /// Prediction of the last step.
    pub fn last(&self) -> f64 {
        *self.scores.last().expect("at least one step")
    }
}

#[derive(Debug, Clone)]
struct Regressor {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    offset: f64,
    scale: f64,
}

impl Regressor {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, fused: Var) -> Var {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let h = tape.linear(fused, w1, b1);
        let h = tape.gelu(h);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let raw = tape.linear(h, w2, b2);
        tape.affine(raw, self.scale, self.offset)
    }
}

/// A recorded forward pass kept alive for the backward sweep.
pub struct ForwardPass {
    pub tape: Tape,
    /// One `[1, 1]` node per step.
    pub score_vars: Vec<Var>,
}

impl ForwardPass {
    pub fn scores(&self) -> StepScores {
        StepScores {
            scores: self
                .score_vars
                .iter()
                .map(|&v| self.tape.value(v).data()[0])
                .collect(),
        }
    }

    /// Parameter gradients given `d loss / d score_t` for every step.
    pub fn param_grads(&self, store: &ParamStore, d_scores: &[f64]) -> ParamGrads {
        assert_eq!(d_scores.len(), self.score_vars.len());
        let seeds: Vec<(Var, Tensor)> = self
            .score_vars
            .iter()
            .zip(d_scores)
            .map(|(&v, &g)| (v, Tensor::new([1, 1], vec![g])))
            .collect();
        let grads = self.tape.backward_seeded(&seeds);
        let mut out = store.zero_grads();
        grads.accumulate_params(&self.tape, &mut out);
        out
    }
}

/// Scorer structure plus its parameters.
#[derive(Debug, Clone)]
pub struct Assessor {
    cfg: AssessorConfig,
    pub store: ParamStore,
    backbone: Backbone,
    feedback: FeedbackNet,
    encoder: ContextEncoder,
    regressor: Regressor,
}

impl Assessor {
    /// Randomly initialized parameters drawn from `cfg.init_seed`.
    pub fn new(cfg: &AssessorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&cfg.backbone, &mut store, &mut rng)?;
        let ch = cfg.backbone.stage_channels;
        let feedback =
            FeedbackNet::new(&cfg.feedback, [ch[0], ch[1], ch[2]], &mut store, &mut rng)?;
        let encoder = ContextEncoder::new(
            &cfg.encoder,
            ch[3],
            cfg.backbone.input_size,
            &mut store,
            &mut rng,
        )?;
        let h = cfg.regressor.hidden;
        let g = ParamGroup::Other;
        let regressor = Regressor {
            w1: store.add(
                "regressor.fc1.weight",
                g,
                lecun_normal([FUSION_WIDTH, h], FUSION_WIDTH, &mut rng),
            ),
            b1: store.add("regressor.fc1.bias", g, Tensor::zeros([h])),
            w2: store.add("regressor.fc2.weight", g, lecun_normal([h, 1], h, &mut rng)),
            b2: store.add("regressor.fc2.bias", g, Tensor::zeros([1])),
            offset: cfg.regressor.output_offset,
            scale: cfg.regressor.output_scale,
        };
        let mut model = Self {
            cfg: cfg.clone(),
            store,
            backbone,
            feedback,
            encoder,
            regressor,
        };
        if let (BackboneVariant::Full, Some(path)) =
            (cfg.backbone.variant, &cfg.backbone.pretrained)
        {
            if let Err(e) = crate::checkpoint::load_pretrained_backbone(&mut model.store, path) {
                log::warn!(
                    "pretrained backbone weights unavailable ({e}); continuing with random initialization"
                );
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &AssessorConfig {
        &self.cfg
    }

    pub fn steps(&self) -> usize {
        self.cfg.steps
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let side = self.cfg.backbone.input_size;
        if image.height() != side || image.width() != side {
            return config(format!(
                "expected a {side}x{side} image, got {}x{}",
                image.height(),
                image.width()
            ));
        }
        Ok(())
    }

    /// Records the scorer on `tape` for a normalized `[3, S, S]` input node.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Vec<Var>> {
        let [fm1, fm2, fm3, fm4] = self.backbone.forward(tape, store, input)?;
        let context = self.encoder.forward(tape, store, fm4)?;
        let steps = self
            .feedback
            .run_feedback(tape, store, [fm1, fm2, fm3], self.cfg.steps)?;
        let mut scores = Vec::with_capacity(steps.len());
        for [q1, q2, q3] in steps {
            let fused = tape.concat_cols(&[context, q1, q2, q3]);
            scores.push(self.regressor.forward(tape, store, fused));
        }
        for &s in &scores {
            if !tape.value(s).all_finite() {
                return Err(Error::Numeric("non-finite predicted score".into()));
            }
        }
        Ok(scores)
    }

    /// Forward pass over `store` (which may differ from `self.store` during training).
    pub fn forward_pass(&self, store: &ParamStore, image: &Image) -> Result<ForwardPass> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let input = tape.constant(Backbone::normalize_input(&image.to_chw()));
        let score_vars = self.forward(&mut tape, store, input)?;
        Ok(ForwardPass { tape, score_vars })
    }

    pub fn predict(&self, image: &Image) -> Result<StepScores> {
        Ok(self.forward_pass(&self.store, image)?.scores())
    }

    pub fn predict_batch(&self, images: &[Image], exec: Exec) -> Result<Vec<StepScores>> {
        if let Some(first) = images.first() {
            if images
                .iter()
                .any(|im| im.height() != first.height() || im.width() != first.width())
            {
                return config("batch images differ in size");
            }
        }
        exec.try_map(images.len(), |i| self.predict(&images[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_at(side: usize) -> AssessorConfig {
        let mut cfg = AssessorConfig::tiny();
        cfg.backbone.input_size = side;
        cfg
    }

    fn noise_image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(
            side,
            side,
            (0..side * side * 3).map(|_| rng.random()).collect(),
        )
    }

    #[test]
    fn tiny_predicts_t_scores() {
        let model = Assessor::new(&AssessorConfig::tiny()).unwrap();
        let img = noise_image(64, 1);
        let s = model.predict(&img).unwrap();
        assert_eq!(s.scores.len(), 4);
        assert!(s.scores.iter().all(|v| v.is_finite()));
        assert_eq!(s, model.predict(&img).unwrap());
        assert!(model.predict(&noise_image(96, 1)).is_err());
    }

    #[test]
    fn config_checks() {
        let mut cfg = AssessorConfig::tiny();
        cfg.steps = 3;
        assert!(Assessor::new(&cfg).is_err());
        let mut cfg = AssessorConfig::tiny();
        cfg.encoder.context_dim = 16;
        assert!(Assessor::new(&cfg).is_err());
        let mut cfg = AssessorConfig::tiny();
        cfg.backbone.input_size = 48;
        assert!(Assessor::new(&cfg).is_err());
        let full = AssessorConfig::full();
        full.validate().unwrap();
        assert_eq!(
            full.encoder.context_dim + 3 * full.feedback.head_dim,
            FUSION_WIDTH
        );
    }

    #[test]
    fn batch_matches_single_calls() {
        let model = Assessor::new(&tiny_at(32)).unwrap();
        let imgs: Vec<Image> = (0..5).map(|i| noise_image(32, i)).collect();
        let single: Vec<_> = imgs.iter().map(|im| model.predict(im).unwrap()).collect();
        for exec in [Exec::Sequential, Exec::Parallel] {
            assert_eq!(model.predict_batch(&imgs, exec).unwrap(), single);
        }
        let mut rev = imgs.clone();
        rev.reverse();
        let mut back = model.predict_batch(&rev, Exec::Parallel).unwrap();
        back.reverse();
        assert_eq!(back, single);
        assert_eq!(
            model.predict_batch(&imgs[..1], Exec::Sequential).unwrap()[0],
            single[0]
        );
        let mixed = vec![noise_image(32, 0), noise_image(64, 0)];
        assert!(model.predict_batch(&mixed, Exec::Sequential).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Assessor::new(&AssessorConfig::tiny()).unwrap();
        let b = Assessor::new(&AssessorConfig::tiny()).unwrap();
        let img = noise_image(64, 3);
        assert_eq!(a.predict(&img).unwrap(), b.predict(&img).unwrap());
        let mut cfg = AssessorConfig::tiny();
        cfg.init_seed = 1;
        let c = Assessor::new(&cfg).unwrap();
        assert_ne!(a.predict(&img).unwrap(), c.predict(&img).unwrap());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = Assessor::new(&tiny_at(32)).unwrap();
        let input = Backbone::normalize_input(&noise_image(32, 4).to_chw());
        let weights = [0.7, -0.2, 0.4, 1.0];
        let objective = |x: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let s = model.forward(&mut tape, &model.store, v).unwrap();
            s.iter()
                .zip(weights)
                .map(|(&v, w)| w * tape.value(v).data()[0])
                .sum::<f64>()
        };
        let mut tape = Tape::new();
        let v = tape.variable(input.clone());
        let s = model.forward(&mut tape, &model.store, v).unwrap();
        let seeds: Vec<_> = s
            .iter()
            .zip(weights)
            .map(|(&v, w)| (v, Tensor::new([1, 1], vec![w])))
            .collect();
        let grads = tape.backward_seeded(&seeds);
        let g = grads.wrt(v).unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
        // a 4x4 patch in every channel
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for c in 0..3 {
            for y in 10..14 {
                for x in 10..14 {
                    let i = c * 32 * 32 + y * 32 + x;
                    let mut p = input.clone();
                    p.data_mut()[i] += h;
                    let mut m = input.clone();
                    m.data_mut()[i] -= h;
                    let fd = (objective(&p) - objective(&m)) / (2.0 * h);
                    worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3));
                }
            }
        }
        assert!(worst <= 1e-3, "relative error {worst}");
    }

    #[test]
    fn param_grads_follow_seeds() {
        let model = Assessor::new(&tiny_at(32)).unwrap();
        let pass = model
            .forward_pass(&model.store, &noise_image(32, 5))
            .unwrap();
        let zero = pass.param_grads(&model.store, &[0.0; 4]);
        assert_eq!(zero.norm(), 0.0);
        let g1 = pass.param_grads(&model.store, &[0.0, 0.0, 0.0, 1.0]);
        let mut g2 = pass.param_grads(&model.store, &[0.0, 0.0, 0.0, 2.0]);
        assert!(g1.norm() > 0.0 && g1.all_finite());
        g2.scale(0.5);
        assert!((g1.norm() - g2.norm()).abs() < 1e-12 * g1.norm());
    }
}
