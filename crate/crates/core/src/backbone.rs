//! Multi-scale feature extraction with taps at strides 4, 8, 16 and 32.
//!
//! Two variants share the tap contract:
//! - `full`: a 50-layer bottleneck residual network (conv1 .. layer4) with
//!   frozen batch-norm statistics folded into per-channel affine maps. Its
//!   parameter names follow the common torchvision layout, so ImageNet weights
//!   exported to safetensors load directly.
//! - `tiny`: a small four-stage residual stack for CPU-scale experiments.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::graph::{Tape, Var};
use crate::params::{he_normal, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// ImageNet channel statistics applied to inputs of both variants.
const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub const TAP_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    Full,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Output channels of the four taps.
    pub stage_channels: [usize; 4],
    /// Side of the square network input.
    pub input_size: usize,
    /// Safetensors file with pretrained weights (`full` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            variant: BackboneVariant::Tiny,
            stage_channels: [8, 16, 32, 64],
            input_size: 64,
            pretrained: None,
        }
    }

    pub fn full() -> Self {
        Self {
            variant: BackboneVariant::Full,
            stage_channels: [256, 512, 1024, 2048],
            input_size: 224,
            pretrained: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_input_side(self.input_size)?;
        if self.stage_channels.contains(&0) {
            return config("stage channels must be positive");
        }
        if self.variant == BackboneVariant::Full && self.stage_channels.iter().any(|c| c % 4 != 0) {
            return config("bottleneck stages need channel counts divisible by 4");
        }
        Ok(())
    }

    /// Spatial side of tap `d` (0-based) for a square input of side `side`.
    pub fn tap_side(side: usize, d: usize) -> usize {
        side / TAP_STRIDES[d]
    }
}

fn check_input_side(side: usize) -> Result<()> {
    if side == 0 || !side.is_multiple_of(32) {
        return config(format!(
            "input side {side} must be a positive multiple of 32"
        ));
    }
    Ok(())
}

/// The four taps as plain tensors, each `[C_d, H / s_d, W / s_d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub fm1: Tensor,
    pub fm2: Tensor,
    pub fm3: Tensor,
    pub fm4: Tensor,
}

impl FeatureMaps {
    pub fn taps(&self) -> [&Tensor; 4] {
        [&self.fm1, &self.fm2, &self.fm3, &self.fm4]
    }
}

/// Convolution plus per-channel affine (`full`) or bias (`tiny`).
#[derive(Debug, Clone)]
struct ConvUnit {
    weight: ParamId,
    scale: Option<ParamId>,
    shift: ParamId,
    stride: usize,
    pad: usize,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        norm_name: Option<&str>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let mut w = he_normal([cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        w.data_mut().iter_mut().for_each(|v| *v *= gain);
        let weight = store.add(format!("{name}.weight"), ParamGroup::Backbone, w);
        let (scale, shift) = match norm_name {
            Some(bn) => (
                Some(store.add(
                    format!("{bn}.scale"),
                    ParamGroup::Backbone,
                    Tensor::filled([cout], 1.0),
                )),
                store.add(
                    format!("{bn}.shift"),
                    ParamGroup::Backbone,
                    Tensor::zeros([cout]),
                ),
            ),
            None => (
                None,
                store.add(
                    format!("{name}.bias"),
                    ParamGroup::Backbone,
                    Tensor::zeros([cout]),
                ),
            ),
        };
        Self {
            weight,
            scale,
            shift,
            stride,
            pad: kernel / 2,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let mut y = tape.conv2d(x, w, self.stride, self.pad);
        if let Some(scale) = self.scale {
            let s = tape.param(store, scale);
            y = tape.mul_channel(y, s);
        }
        let b = tape.param(store, self.shift);
        tape.add_channel_bias(y, b)
    }
}

/// Two 3x3 convolutions with an identity shortcut.
#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvUnit,
    conv2: ConvUnit,
}

impl BasicBlock {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.conv1.forward(tape, store, x);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h);
        let y = tape.add(x, h);
        tape.relu(y)
    }
}

/// 1x1 -> 3x3 (strided) -> 1x1 bottleneck with optional projection shortcut.
#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: ConvUnit,
    conv2: ConvUnit,
    conv3: ConvUnit,
    downsample: Option<ConvUnit>,
}

impl Bottleneck {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.conv1.forward(tape, store, x);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h);
        let h = tape.relu(h);
        let h = self.conv3.forward(tape, store, h);
        let shortcut = match &self.downsample {
            Some(d) => d.forward(tape, store, x),
            None => x,
        };
        let y = tape.add(shortcut, h);
        tape.relu(y)
    }
}

#[derive(Debug, Clone)]
enum Layers {
    Tiny {
        stem: [ConvUnit; 2],
        /// Per stage: optional strided transition, then one residual block.
        stages: Vec<(Option<ConvUnit>, BasicBlock)>,
    },
    Full {
        stem: ConvUnit,
        stages: Vec<Vec<Bottleneck>>,
    },
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    layers: Layers,
}

impl Backbone {
    /// Registers randomly initialized parameters in `store`.
    pub fn new(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = match cfg.variant {
            BackboneVariant::Tiny => build_tiny(cfg, store, rng),
            BackboneVariant::Full => build_full(cfg, store, rng),
        };
        Ok(Self {
            cfg: cfg.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Normalized `[3, H, W]` network input from `[0, 1]` RGB planes.
    pub fn normalize_input(chw: &Tensor) -> Tensor {
        let (c, h, w) = chw.chw();
        assert_eq!(c, 3, "expected an RGB input");
        let mut out = chw.clone();
        for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            plane
                .iter_mut()
                .for_each(|v| *v = (*v - INPUT_MEAN[ch]) / INPUT_STD[ch]);
        }
        out
    }

    /// Records the forward pass of a normalized `[3, H, W]` input.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<[Var; 4]> {
        let (c, h, w) = tape.value(input).chw();
        if c != 3 {
            return config(format!("backbone expects 3 input channels, got {c}"));
        }
        check_input_side(h)?;
        check_input_side(w)?;
        let taps = match &self.layers {
            Layers::Tiny { stem, stages } => {
                let mut x = input;
                for unit in stem {
                    x = unit.forward(tape, store, x);
                    x = tape.relu(x);
                }
                let mut taps = Vec::with_capacity(4);
                for (transition, block) in stages {
                    if let Some(t) = transition {
                        x = t.forward(tape, store, x);
                        x = tape.relu(x);
                    }
                    x = block.forward(tape, store, x);
                    taps.push(x);
                }
                taps
            }
            Layers::Full { stem, stages } => {
                let x = stem.forward(tape, store, input);
                let x = tape.relu(x);
                let mut x = tape.max_pool_3x3_s2(x);
                let mut taps = Vec::with_capacity(4);
                for stage in stages {
                    for block in stage {
                        x = block.forward(tape, store, x);
                    }
                    taps.push(x);
                }
                taps
            }
        };
        Ok([taps[0], taps[1], taps[2], taps[3]])
    }

    /// Feature maps of an `H x W x 3` image given as `[3, H, W]` RGB planes in `[0, 1]`.
    pub fn extract(&self, store: &ParamStore, image_chw: &Tensor) -> Result<FeatureMaps> {
        let mut tape = Tape::new();
        let x = tape.constant(Self::normalize_input(image_chw));
        let [a, b, c, d] = self.forward(&mut tape, store, x)?;
        Ok(FeatureMaps {
            fm1: tape.value(a).clone(),
            fm2: tape.value(b).clone(),
            fm3: tape.value(c).clone(),
            fm4: tape.value(d).clone(),
        })
    }
}

fn build_tiny(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Layers {
    let c = cfg.stage_channels;
    let stem = [
        ConvUnit::new(store, rng, "backbone.stem.0", None, 3, c[0], 3, 2, 1.0),
        ConvUnit::new(store, rng, "backbone.stem.1", None, c[0], c[0], 3, 2, 1.0),
    ];
    let mut stages = Vec::with_capacity(4);
    for d in 0..4 {
        let transition = (d > 0).then(|| {
            ConvUnit::new(
                store,
                rng,
                &format!("backbone.stage{}.down", d + 1),
                None,
                c[d - 1],
                c[d],
                3,
                2,
                1.0,
            )
        });
        let name = format!("backbone.stage{}.block", d + 1);
        let block = BasicBlock {
            conv1: ConvUnit::new(
                store,
                rng,
                &format!("{name}.conv1"),
                None,
                c[d],
                c[d],
                3,
                1,
                1.0,
            ),
            // damped residual branch keeps activations bounded at init
            conv2: ConvUnit::new(
                store,
                rng,
                &format!("{name}.conv2"),
                None,
                c[d],
                c[d],
                3,
                1,
                0.5,
            ),
        };
        stages.push((transition, block));
    }
    Layers::Tiny { stem, stages }
}

/// Blocks per stage of the 50-layer network.
const FULL_DEPTHS: [usize; 4] = [3, 4, 6, 3];

fn build_full(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Layers {
    let stem = ConvUnit::new(store, rng, "conv1", Some("bn1"), 3, 64, 7, 2, 1.0);
    let mut cin = 64;
    let mut stages = Vec::with_capacity(4);
    for (s, (&depth, &cout)) in FULL_DEPTHS.iter().zip(&cfg.stage_channels).enumerate() {
        let width = cout / 4;
        let mut blocks = Vec::with_capacity(depth);
        for b in 0..depth {
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            let p = format!("layer{}.{b}", s + 1);
            let conv1 = ConvUnit::new(
                store,
                rng,
                &format!("{p}.conv1"),
                Some(&format!("{p}.bn1")),
                cin,
                width,
                1,
                1,
                1.0,
            );
            let conv2 = ConvUnit::new(
                store,
                rng,
                &format!("{p}.conv2"),
                Some(&format!("{p}.bn2")),
                width,
                width,
                3,
                stride,
                1.0,
            );
            let conv3 = ConvUnit::new(
                store,
                rng,
                &format!("{p}.conv3"),
                Some(&format!("{p}.bn3")),
                width,
                cout,
                1,
                1,
                1.0,
            );
            // Zero-initialized residual gain: a randomly initialized block starts as identity.
            store
                .get_mut(conv3.scale.expect("bottleneck convs carry a norm"))
                .data_mut()
                .fill(0.0);
            let downsample = (b == 0).then(|| {
                ConvUnit::new(
                    store,
                    rng,
                    &format!("{p}.downsample.0"),
                    Some(&format!("{p}.downsample.1")),
                    cin,
                    cout,
                    1,
                    stride,
                    1.0,
                )
            });
            blocks.push(Bottleneck {
                conv1,
                conv2,
                conv3,
                downsample,
            });
            cin = cout;
        }
        stages.push(blocks);
    }
    Layers::Full { stem, stages }
}
