//! Residual backbone producing the two deepest feature maps and a pooled
//! embedding.
//!
//! Stride pattern: a 7x7/2 stem, then four residual stages where the first
//! keeps resolution and the other three halve it. Batch statistics are
//! replaced by a learned per-channel affine map after every convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{he_uniform, ParamRegistry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand with a 4x channel expansion.
    Bottleneck,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(BlockKind::Basic),
            "bottleneck" => Ok(BlockKind::Bottleneck),
            other => Err(Error::config(format!("unknown block kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Stem width followed by the four stage widths.
    pub stage_channels: [usize; 5],
    pub blocks_per_stage: [usize; 4],
    pub block: BlockKind,
    /// Start the last affine scale of every residual branch at zero.
    pub zero_init_residual: bool,
}

/// Stride of each residual stage (stages 2..=5).
pub const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

impl BackboneConfig {
    /// Full-width channel plan (64/256/512/1024/2048) with bottleneck blocks,
    /// one block per stage.
    pub fn full_width(in_channels: usize) -> Self {
        BackboneConfig {
            in_channels,
            stage_channels: [64, 256, 512, 1024, 2048],
            blocks_per_stage: [1, 1, 1, 1],
            block: BlockKind::Bottleneck,
            zero_init_residual: false,
        }
    }

    /// ResNet-50 depth on top of [`BackboneConfig::full_width`].
    pub fn resnet50(in_channels: usize) -> Self {
        BackboneConfig { blocks_per_stage: [3, 4, 6, 3], ..Self::full_width(in_channels) }
    }

    /// Desk-scale widths with basic blocks.
    pub fn tiny(in_channels: usize) -> Self {
        BackboneConfig {
            in_channels,
            stage_channels: [8, 8, 16, 32, 64],
            blocks_per_stage: [1, 1, 1, 1],
            block: BlockKind::Basic,
            zero_init_residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("backbone in_channels must be positive"));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::config(format!("stage channels must be positive: {:?}", self.stage_channels)));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::config(format!("every stage needs a block: {:?}", self.blocks_per_stage)));
        }
        let [_, c2, c3, c4, c5] = self.stage_channels;
        if c4 % 4 != 0 || c5 % 4 != 0 {
            return Err(Error::config(format!("c4={c4} and c5={c5} must be divisible by 4")));
        }
        if self.block == BlockKind::Bottleneck && [c2, c3].iter().any(|c| c % 4 != 0) {
            return Err(Error::config(format!(
                "bottleneck stages need widths divisible by 4, got {:?}",
                self.stage_channels
            )));
        }
        Ok(())
    }

    pub fn c4(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn c5(&self) -> usize {
        self.stage_channels[4]
    }

    /// Spatial size after the stem and each stage, for an `h x w` input.
    pub fn spatial_chain(&self, h: usize, w: usize) -> [(usize, usize); 5] {
        let stem = ((h + 6 - 7) / 2 + 1, (w + 6 - 7) / 2 + 1);
        let mut out = [stem; 5];
        for (s, &stride) in STAGE_STRIDES.iter().enumerate() {
            let (ph, pw) = out[s];
            out[s + 1] = ((ph + 2 - 3) / stride + 1, (pw + 2 - 3) / stride + 1);
        }
        out
    }

    /// Number of scalar weights the backbone registers.
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
        let mut total = conv(self.in_channels, self.stage_channels[0], 7);
        let mut cin = self.stage_channels[0];
        for s in 0..4 {
            let cout = self.stage_channels[s + 1];
            for b in 0..self.blocks_per_stage[s] {
                let stride = if b == 0 { STAGE_STRIDES[s] } else { 1 };
                total += match self.block {
                    BlockKind::Basic => conv(cin, cout, 3) + conv(cout, cout, 3),
                    BlockKind::Bottleneck => {
                        let mid = cout / 4;
                        conv(cin, mid, 1) + conv(mid, mid, 3) + conv(mid, cout, 1)
                    }
                };
                if cin != cout || stride != 1 {
                    total += conv(cin, cout, 1);
                }
                cin = cout;
            }
        }
        total
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    /// Stage-4 output `[N,c4,H4,W4]`.
    pub f_m4: Var,
    /// Stage-5 output `[N,c5,H5,W5]`.
    pub f_m5: Var,
    /// Global average of `f_m5`, `[N,c5]`.
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    prefix: String,
}

struct ConvSpec {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Backbone {
    pub fn new(config: BackboneConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        Ok(Backbone { config, prefix: prefix.to_string() })
    }

    fn name(&self, rest: &str) -> String {
        format!("{}.{rest}", self.prefix)
    }

    /// Convolutions of one block in registration order, plus the optional projection.
    fn block_layout(&self, cin: usize, cout: usize, stride: usize) -> (Vec<ConvSpec>, Option<ConvSpec>) {
        let main = match self.config.block {
            BlockKind::Basic => vec![
                ConvSpec { cin, cout, k: 3, stride, pad: 1 },
                ConvSpec { cin: cout, cout, k: 3, stride: 1, pad: 1 },
            ],
            BlockKind::Bottleneck => {
                let mid = cout / 4;
                vec![
                    ConvSpec { cin, cout: mid, k: 1, stride: 1, pad: 0 },
                    ConvSpec { cin: mid, cout: mid, k: 3, stride, pad: 1 },
                    ConvSpec { cin: mid, cout, k: 1, stride: 1, pad: 0 },
                ]
            }
        };
        let proj = (cin != cout || stride != 1).then_some(ConvSpec { cin, cout, k: 1, stride, pad: 0 });
        (main, proj)
    }

    /// `(block prefix, in channels, out channels, stride)` for every block.
    fn blocks(&self) -> Vec<(String, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut cin = self.config.stage_channels[0];
        for s in 0..4 {
            let cout = self.config.stage_channels[s + 1];
            for b in 0..self.config.blocks_per_stage[s] {
                let stride = if b == 0 { STAGE_STRIDES[s] } else { 1 };
                out.push((format!("res{}.{b}", s + 2), cin, cout, stride));
                cin = cout;
            }
        }
        out
    }

    fn register_conv(&self, reg: &mut ParamRegistry, rng: &mut ChaCha8Rng, base: &str, spec: &ConvSpec, zero_scale: bool) -> Result<()> {
        let fan_in = spec.cin * spec.k * spec.k;
        reg.insert(&self.name(&format!("{base}.weight")), he_uniform(&[spec.cout, spec.cin, spec.k, spec.k], fan_in, rng))?;
        let scale = if zero_scale { 0.0 } else { 1.0 };
        reg.insert(&self.name(&format!("{base}.scale")), Tensor::full(&[spec.cout], scale))?;
        reg.insert(&self.name(&format!("{base}.shift")), Tensor::zeros(&[spec.cout]))?;
        Ok(())
    }

    /// Register every weight, drawing from `rng` in a fixed order.
    pub fn register(&self, reg: &mut ParamRegistry, rng: &mut ChaCha8Rng) -> Result<()> {
        let c = &self.config;
        let stem = ConvSpec { cin: c.in_channels, cout: c.stage_channels[0], k: 7, stride: 2, pad: 3 };
        self.register_conv(reg, rng, "conv1", &stem, false)?;
        for (block, cin, cout, stride) in self.blocks() {
            let (main, proj) = self.block_layout(cin, cout, stride);
            let last = main.len() - 1;
            for (i, spec) in main.iter().enumerate() {
                let zero = c.zero_init_residual && i == last;
                self.register_conv(reg, rng, &format!("{block}.conv{}", i + 1), spec, zero)?;
            }
            if let Some(spec) = proj {
                self.register_conv(reg, rng, &format!("{block}.proj"), &spec, false)?;
            }
        }
        Ok(())
    }

    fn conv_affine(&self, tape: &mut Tape, reg: &ParamRegistry, x: Var, base: &str, spec: &ConvSpec) -> Result<Var> {
        let w = tape.param(reg, &self.name(&format!("{base}.weight")))?;
        let scale = tape.param(reg, &self.name(&format!("{base}.scale")))?;
        let shift = tape.param(reg, &self.name(&format!("{base}.shift")))?;
        let y = tape.conv2d(x, w, None, spec.stride, spec.pad)?;
        tape.channel_affine(y, scale, shift)
    }

    pub fn forward(&self, tape: &mut Tape, reg: &ParamRegistry, x: Var) -> Result<FeaturePyramid> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::config(format!(
                "backbone expects [N,{},H,W] input, got {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[2] < 16 || shape[3] < 16 {
            return Err(Error::config(format!(
                "input {}x{} too small for the stride chain (need at least 16x16)",
                shape[2], shape[3]
            )));
        }
        let c = &self.config;
        let stem = ConvSpec { cin: c.in_channels, cout: c.stage_channels[0], k: 7, stride: 2, pad: 3 };
        let y = self.conv_affine(tape, reg, x, "conv1", &stem)?;
        let mut h = tape.relu(y);

        let blocks = self.blocks();
        let res4_end = c.blocks_per_stage[..3].iter().sum::<usize>();
        let mut f_m4 = None;
        for (idx, (block, cin, cout, stride)) in blocks.into_iter().enumerate() {
            let (main, proj) = self.block_layout(cin, cout, stride);
            let mut y = h;
            let last = main.len() - 1;
            for (i, spec) in main.iter().enumerate() {
                y = self.conv_affine(tape, reg, y, &format!("{block}.conv{}", i + 1), spec)?;
                if i != last {
                    y = tape.relu(y);
                }
            }
            let shortcut = match proj {
                Some(spec) => self.conv_affine(tape, reg, h, &format!("{block}.proj"), &spec)?,
                None => h,
            };
            let sum = tape.add(y, shortcut)?;
            h = tape.relu(sum);
            if idx + 1 == res4_end {
                f_m4 = Some(h);
            }
        }
        let f_m4 = f_m4.expect("stage 4 has at least one block");
        let embedding = tape.global_avg_pool(h)?;
        Ok(FeaturePyramid { f_m4, f_m5: h, embedding })
    }
}

/// Build a backbone and its freshly initialized parameters under `backbone.*`.
pub fn build_backbone(config: BackboneConfig, seed: u64) -> Result<(Backbone, ParamRegistry)> {
    let backbone = Backbone::new(config, "backbone")?;
    let mut reg = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    backbone.register(&mut reg, &mut rng)?;
    Ok((backbone, reg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let (_, a) = build_backbone(BackboneConfig::tiny(3), 7).unwrap();
        let (_, b) = build_backbone(BackboneConfig::tiny(3), 7).unwrap();
        let (_, c) = build_backbone(BackboneConfig::tiny(3), 8).unwrap();
        let flat = |r: &ParamRegistry| r.iter().flat_map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn tiny_parameter_count_matches_hand_formula() {
        // widths [8,8,16,32,64], one basic block per stage, 3 input channels.
        // conv+affine contributes cin*cout*k*k + 2*cout.
        let stem = 3 * 8 * 49 + 16;
        let res2 = (8 * 8 * 9 + 16) * 2; // no projection: 8 -> 8, stride 1
        let res3 = (8 * 16 * 9 + 32) + (16 * 16 * 9 + 32) + (8 * 16 + 32);
        let res4 = (16 * 32 * 9 + 64) + (32 * 32 * 9 + 64) + (16 * 32 + 64);
        let res5 = (32 * 64 * 9 + 128) + (64 * 64 * 9 + 128) + (32 * 64 + 128);
        let expected = stem + res2 + res3 + res4 + res5;
        let (_, reg) = build_backbone(BackboneConfig::tiny(3), 0).unwrap();
        assert_eq!(reg.num_scalars(), expected);
        assert_eq!(BackboneConfig::tiny(3).parameter_count(), expected);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = BackboneConfig::tiny(1);
        c.stage_channels[3] = 30;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = BackboneConfig::tiny(1);
        c.stage_channels[0] = 0;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::full_width(3);
        c.stage_channels[1] = 254;
        assert!(c.validate().is_err());
    }

    #[test]
    fn spatial_chain_follows_the_stride_pattern() {
        let c = BackboneConfig::full_width(3);
        assert_eq!(c.spatial_chain(224, 224), [(112, 112), (112, 112), (56, 56), (28, 28), (14, 14)]);
        assert_eq!(c.spatial_chain(201, 64), [(101, 32), (101, 32), (51, 16), (26, 8), (13, 4)]);
    }

    #[test]
    fn tiny_forward_shapes_and_zero_propagation() {
        let mut config = BackboneConfig::tiny(1);
        config.zero_init_residual = true;
        let (bb, reg) = build_backbone(config, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 64, 48]));
        let out = bb.forward(&mut tape, &reg, x).unwrap();
        assert_eq!(tape.shape(out.f_m4), &[2, 32, 8, 6]);
        assert_eq!(tape.shape(out.f_m5), &[2, 64, 4, 3]);
        assert_eq!(tape.shape(out.embedding), &[2, 64]);
        assert!(tape.value(out.embedding).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_channels_and_tiny_inputs() {
        let (bb, reg) = build_backbone(BackboneConfig::tiny(1), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        assert!(bb.forward(&mut tape, &reg, x).is_err());
        let x = tape.constant(Tensor::zeros(&[1, 1, 8, 32]));
        assert!(matches!(bb.forward(&mut tape, &reg, x), Err(Error::Config(_))));
    }
}
