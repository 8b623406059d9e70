//! The full network: backbone, attention fusion, scene graphs, graph
//! convolution and an affine classifier over graph readout plus embedding.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fusion::{AttentionFusion, FusedFeatureMap};
use crate::gcn::{self, GcnBranch};
use crate::graph::{self, ScenePlan};
use crate::params::{lecun_uniform, ParamRegistry};
use crate::tensor::Tensor;

/// Node counts accepted without `allow_any_k`.
pub const STANDARD_NODE_COUNTS: [usize; 5] = [8, 12, 16, 20, 24];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "visual" => Ok(Modality::Visual),
            other => Err(Error::config(format!("unknown modality {other:?} (expected audio or visual)"))),
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Modality::Audio => 1,
            Modality::Visual => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgcnConfig {
    pub modality: Modality,
    pub backbone: BackboneConfig,
    /// Input height and width (time x mel bands for audio).
    pub input_h: usize,
    pub input_w: usize,
    pub k_nodes: usize,
    pub allow_any_k: bool,
    pub gcn_out_channels: usize,
    pub gcn_layers: usize,
    /// When false the graph readout is replaced by zeros (ablation).
    pub gcn_enabled: bool,
    pub num_classes: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl AgcnConfig {
    /// Full-width visual model on 3x224x224 inputs.
    pub fn full_visual(num_classes: usize) -> Self {
        AgcnConfig {
            modality: Modality::Visual,
            backbone: BackboneConfig::full_width(3),
            input_h: 224,
            input_w: 224,
            k_nodes: 20,
            allow_any_k: false,
            gcn_out_channels: 256,
            gcn_layers: 1,
            gcn_enabled: true,
            num_classes,
            lr0: 0.01,
            momentum: 0.9,
            lr_decay_factor: 10.0,
            lr_decay_every: 20,
            epochs: 60,
            batch_size: 8,
            seed: 0,
        }
    }

    /// Full-width audio model on 1x201x64 log-Mel inputs.
    pub fn full_audio(num_classes: usize) -> Self {
        AgcnConfig {
            modality: Modality::Audio,
            backbone: BackboneConfig::full_width(1),
            input_h: 201,
            input_w: 64,
            ..Self::full_visual(num_classes)
        }
    }

    /// Desk-scale model for training and gradient checks.
    pub fn tiny(modality: Modality, num_classes: usize) -> Self {
        let (input_h, input_w) = match modality {
            Modality::Visual => (48, 48),
            Modality::Audio => (101, 32),
        };
        AgcnConfig {
            modality,
            backbone: BackboneConfig::tiny(modality.channels()),
            input_h,
            input_w,
            k_nodes: 8,
            gcn_out_channels: 8,
            ..Self::full_visual(num_classes)
        }
    }

    /// Smallest visual model used for whole-network gradient checks: stage
    /// widths `[4,8,8,16,32]`, `k = 8`, two classes, 40x40 input.
    pub fn gradcheck_tiny() -> Self {
        let mut c = Self::tiny(Modality::Visual, 2);
        c.backbone.stage_channels = [4, 8, 8, 16, 32];
        (c.input_h, c.input_w) = (40, 40);
        c
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.backbone.in_channels, self.input_h, self.input_w]
    }

    /// Spatial size of the fused map the graphs are built on.
    pub fn graph_grid(&self) -> (usize, usize) {
        self.backbone.spatial_chain(self.input_h, self.input_w)[3]
    }

    pub fn readout_width(&self) -> usize {
        2 * self.k_nodes * self.gcn_out_channels
    }

    pub fn classifier_input_width(&self) -> usize {
        self.readout_width() + self.backbone.c5()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.in_channels != self.modality.channels() {
            return Err(Error::config(format!(
                "{} input has {} channels, backbone expects {}",
                self.modality.as_str(),
                self.modality.channels(),
                self.backbone.in_channels
            )));
        }
        if self.input_h < 16 || self.input_w < 16 {
            return Err(Error::config(format!("input {}x{} is below 16x16", self.input_h, self.input_w)));
        }
        if !self.allow_any_k && !STANDARD_NODE_COUNTS.contains(&self.k_nodes) {
            return Err(Error::config(format!(
                "k_nodes={} not in {STANDARD_NODE_COUNTS:?} (set model.allow_any_k to override)",
                self.k_nodes
            )));
        }
        let (h, w) = self.graph_grid();
        graph::check_node_count(self.k_nodes, h, w)?;
        if self.gcn_out_channels == 0 || self.gcn_layers == 0 {
            return Err(Error::config("gcn_out_channels and gcn_layers must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes={} must be at least 2", self.num_classes)));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0={} must be positive", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum={} must lie in [0,1)", self.momentum)));
        }
        if !(self.lr_decay_factor >= 1.0) || self.lr_decay_every == 0 {
            return Err(Error::config("lr decay needs factor >= 1 and a positive period"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Tape handles and graph plan from one forward pass.
#[derive(Clone, Debug)]
pub struct AgcnOutput {
    pub logits: Var,
    /// `[N, classifier_input_width]`.
    pub features: Var,
    pub f_ffr: Var,
    pub embedding: Var,
    pub plan: ScenePlan,
}

/// Feature extractor shared by [`Agcn`] and [`AvscModel`]: everything up to
/// the classifier input.
#[derive(Clone, Debug)]
struct Trunk {
    config: AgcnConfig,
    backbone: Backbone,
    afm: AttentionFusion,
    sag: GcnBranch,
    cag: GcnBranch,
}

struct TrunkOutput {
    features: Var,
    f_ffr: Var,
    embedding: Var,
    plan: ScenePlan,
}

impl Trunk {
    fn new(config: AgcnConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let (c4, c5) = (config.backbone.c4(), config.backbone.c5());
        let (cout, layers) = (config.gcn_out_channels, config.gcn_layers);
        Ok(Trunk {
            backbone: Backbone::new(config.backbone.clone(), &format!("{prefix}backbone"))?,
            afm: AttentionFusion::new(c4, c5, &format!("{prefix}afm")),
            sag: GcnBranch::new(c4, cout, layers, &format!("{prefix}gcn.sag"))?,
            cag: GcnBranch::new(c4, cout, layers, &format!("{prefix}gcn.cag"))?,
            config,
        })
    }

    fn register(&self, reg: &mut ParamRegistry, rng: &mut ChaCha8Rng) -> Result<()> {
        self.backbone.register(reg, rng)?;
        self.afm.register(reg, rng)?;
        self.sag.register(reg, rng)?;
        self.cag.register(reg, rng)
    }

    fn fuse(&self, tape: &mut Tape, reg: &ParamRegistry, x: Var) -> Result<(FeaturePyramid, FusedFeatureMap)> {
        let want = self.config.input_shape();
        let got = tape.shape(x);
        if got.len() != 4 || got[1..] != want {
            return Err(Error::config(format!("model expects [N,{},{},{}] input, got {got:?}", want[0], want[1], want[2])));
        }
        let pyr = self.backbone.forward(tape, reg, x)?;
        let fused = self.afm.forward(tape, reg, pyr.f_m4, pyr.f_m5)?;
        Ok((pyr, fused))
    }

    fn forward(&self, tape: &mut Tape, reg: &ParamRegistry, x: Var) -> Result<TrunkOutput> {
        let n = tape.shape(x).first().copied().unwrap_or(0);
        let (pyr, fused) = self.fuse(tape, reg, x)?;
        let plan = graph::plan_scene_graphs(tape.value(fused.f_ffr), self.config.k_nodes)?;
        let readout = if self.config.gcn_enabled {
            let v_sag = tape.gather_positions(fused.f_ffr, plan.salient.indices.clone())?;
            let v_cag = tape.gather_positions(fused.f_ffr, plan.contextual.indices.clone())?;
            let y_sag = self.sag.forward(tape, reg, v_sag, &gcn::batch_propagation(&plan.salient)?)?;
            let y_cag = self.cag.forward(tape, reg, v_cag, &gcn::batch_propagation(&plan.contextual)?)?;
            gcn::readout(tape, y_sag, y_cag)?
        } else {
            tape.constant(Tensor::zeros(&[n, self.config.readout_width()]))
        };
        let features = tape.concat(&[readout, pyr.embedding])?;
        Ok(TrunkOutput { features, f_ffr: fused.f_ffr, embedding: pyr.embedding, plan })
    }
}

fn register_head(reg: &mut ParamRegistry, rng: &mut ChaCha8Rng, prefix: &str, classes: usize, width: usize) -> Result<()> {
    reg.insert(&format!("{prefix}.weight"), lecun_uniform(&[classes, width], width, rng))?;
    reg.insert(&format!("{prefix}.bias"), Tensor::zeros(&[classes]))
}

fn apply_head(tape: &mut Tape, reg: &ParamRegistry, prefix: &str, features: Var) -> Result<Var> {
    let w = tape.param(reg, &format!("{prefix}.weight"))?;
    let b = tape.param(reg, &format!("{prefix}.bias"))?;
    tape.linear(features, w, Some(b))
}

/// Single-modality network.
#[derive(Clone, Debug)]
pub struct Agcn {
    trunk: Trunk,
}

impl Agcn {
    pub fn new(config: AgcnConfig) -> Result<Self> {
        Ok(Agcn { trunk: Trunk::new(config, "")? })
    }

    pub fn config(&self) -> &AgcnConfig {
        &self.trunk.config
    }

    /// Fresh parameters drawn from `ChaCha8Rng(config.seed)`.
    pub fn init_params(&self) -> Result<ParamRegistry> {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config().seed);
        self.trunk.register(&mut reg, &mut rng)?;
        let c = self.config();
        register_head(&mut reg, &mut rng, "head", c.num_classes, c.classifier_input_width())?;
        Ok(reg)
    }

    pub fn forward(&self, tape: &mut Tape, reg: &ParamRegistry, x: Var) -> Result<AgcnOutput> {
        let t = self.trunk.forward(tape, reg, x)?;
        let logits = apply_head(tape, reg, "head", t.features)?;
        Ok(AgcnOutput { logits, features: t.features, f_ffr: t.f_ffr, embedding: t.embedding, plan: t.plan })
    }

    /// Logits for a batch `[N,C,H,W]` without keeping the tape.
    pub fn predict_logits(&self, reg: &ParamRegistry, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, reg, xv)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Fused feature map `F_ffr` of a batch, without the graph branches or head.
    pub fn fused_map(&self, reg: &ParamRegistry, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (_, fused) = self.trunk.fuse(&mut tape, reg, xv)?;
        Ok(tape.value(fused.f_ffr).clone())
    }

    /// Scene graphs of a batch with the configured node count.
    pub fn scene_plan(&self, reg: &ParamRegistry, x: &Tensor) -> Result<ScenePlan> {
        self.scene_plan_with(reg, x, self.config().k_nodes)
    }

    /// Scene graphs with `k` nodes per graph. `k` is checked against the
    /// fused-map size before any computation.
    pub fn scene_plan_with(&self, reg: &ParamRegistry, x: &Tensor, k: usize) -> Result<ScenePlan> {
        let (h, w) = self.config().graph_grid();
        graph::check_node_count(k, h, w)?;
        graph::plan_scene_graphs(&self.fused_map(reg, x)?, k)
    }

    /// Mean cross-entropy of a labelled batch on a fresh tape.
    pub fn loss(&self, tape: &mut Tape, reg: &ParamRegistry, x: &Tensor, labels: &[usize]) -> Result<Var> {
        let xv = tape.constant(x.clone());
        let out = self.forward(tape, reg, xv)?;
        tape.softmax_cross_entropy(out.logits, labels)
    }

    /// Write parameters and the config manifest into `dir`.
    pub fn save_checkpoint(&self, reg: &ParamRegistry, dir: &Path) -> Result<()> {
        reg.save_dir(dir)?;
        std::fs::write(dir.join(crate::config::MANIFEST_FILE), crate::config::to_kv_string(self.config()))?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<(Agcn, ParamRegistry)> {
        let config = crate::config::load_config(&dir.join(crate::config::MANIFEST_FILE))?;
        let model = Agcn::new(config)?;
        let mut reg = model.init_params()?;
        reg.load_dir(dir)?;
        Ok((model, reg))
    }
}

/// Audio-visual late fusion: both trunks feed one joint classifier.
#[derive(Clone, Debug)]
pub struct AvscModel {
    audio: Trunk,
    visual: Trunk,
    pub num_classes: usize,
    pub seed: u64,
}

impl AvscModel {
    pub fn new(audio: AgcnConfig, visual: AgcnConfig, num_classes: usize, seed: u64) -> Result<Self> {
        if audio.modality != Modality::Audio || visual.modality != Modality::Visual {
            return Err(Error::config("late fusion needs one audio and one visual config"));
        }
        Ok(AvscModel {
            audio: Trunk::new(audio, "audio.")?,
            visual: Trunk::new(visual, "visual.")?,
            num_classes,
            seed,
        })
    }

    pub fn classifier_input_width(&self) -> usize {
        self.audio.config.classifier_input_width() + self.visual.config.classifier_input_width()
    }

    pub fn init_params(&self) -> Result<ParamRegistry> {
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.audio.register(&mut reg, &mut rng)?;
        self.visual.register(&mut reg, &mut rng)?;
        register_head(&mut reg, &mut rng, "avsc.head", self.num_classes, self.classifier_input_width())?;
        Ok(reg)
    }

    /// Joint logits for paired audio `[N,1,T,M]` and visual `[N,3,H,W]` batches.
    pub fn forward(&self, tape: &mut Tape, reg: &ParamRegistry, audio: Var, visual: Var) -> Result<Var> {
        if tape.shape(audio)[0] != tape.shape(visual)[0] {
            return Err(Error::config("audio and visual batches differ in size"));
        }
        let a = self.audio.forward(tape, reg, audio)?;
        let v = self.visual.forward(tape, reg, visual)?;
        let joint = tape.concat(&[a.features, v.features])?;
        apply_head(tape, reg, "avsc.head", joint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(cfg: &AgcnConfig, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = cfg.input_shape();
        Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn full_visual_classifier_width() {
        let cfg = AgcnConfig::full_visual(7);
        assert_eq!(cfg.classifier_input_width(), 12288);
        assert_eq!(cfg.graph_grid(), (28, 28));
        assert_eq!(AgcnConfig::full_audio(10).graph_grid(), (26, 8));
        cfg.validate().unwrap();
    }

    #[test]
    fn tiny_logits_shape_and_row_determinism() {
        let cfg = AgcnConfig::tiny(Modality::Visual, 3);
        let model = Agcn::new(cfg.clone()).unwrap();
        let reg = model.init_params().unwrap();
        let one = random_input(&cfg, 1, 5);
        let two = Tensor::stack(&[&one.batch_item(0).reshape(&cfg.input_shape()).unwrap(); 2]).unwrap();
        let logits = model.predict_logits(&reg, &two).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert_eq!(logits.data()[..3], logits.data()[3..]);
        assert!(logits.is_finite());
    }

    #[test]
    fn node_count_validation() {
        let mut cfg = AgcnConfig::tiny(Modality::Visual, 2);
        cfg.k_nodes = 10;
        assert!(matches!(Agcn::new(cfg.clone()), Err(Error::Config(_))));
        cfg.k_nodes = 4;
        assert!(Agcn::new(cfg.clone()).is_err());
        cfg.allow_any_k = true;
        Agcn::new(cfg.clone()).unwrap();
        cfg.k_nodes = 16; // 6x6 grid holds at most k=12
        assert!(Agcn::new(cfg).is_err());
    }

    #[test]
    fn ablation_zeroes_the_readout() {
        let mut cfg = AgcnConfig::tiny(Modality::Visual, 2);
        cfg.gcn_enabled = false;
        let model = Agcn::new(cfg.clone()).unwrap();
        let reg = model.init_params().unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_input(&cfg, 2, 1));
        let out = model.forward(&mut tape, &reg, x).unwrap();
        let f = tape.value(out.features);
        let width = cfg.classifier_input_width();
        for row in f.data().chunks(width) {
            assert!(row[..cfg.readout_width()].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let cfg = AgcnConfig::tiny(Modality::Audio, 2);
        let model = Agcn::new(cfg).unwrap();
        let reg = model.init_params().unwrap();
        assert!(matches!(model.predict_logits(&reg, &Tensor::zeros(&[1, 3, 48, 48])), Err(Error::Config(_))));
    }

    #[test]
    fn late_fusion_joint_head() {
        let a = AgcnConfig::tiny(Modality::Audio, 3);
        let v = AgcnConfig::tiny(Modality::Visual, 3);
        let m = AvscModel::new(a.clone(), v.clone(), 3, 0).unwrap();
        let reg = m.init_params().unwrap();
        assert_eq!(reg.get("avsc.head.weight").unwrap().shape(), &[3, a.classifier_input_width() + v.classifier_input_width()]);
        assert!(reg.get("audio.backbone.conv1.weight").is_some());
        assert!(reg.get("visual.gcn.cag.theta").is_some());
        let mut tape = Tape::new();
        let xa = tape.constant(random_input(&a, 2, 1));
        let xv = tape.constant(random_input(&v, 2, 2));
        let logits = m.forward(&mut tape, &reg, xa, xv).unwrap();
        assert_eq!(tape.shape(logits), &[2, 3]);
        assert!(AvscModel::new(v.clone(), a, 3, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = AgcnConfig::tiny(Modality::Visual, 2);
        let model = Agcn::new(cfg.clone()).unwrap();
        let reg = model.init_params().unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save_checkpoint(&reg, dir.path()).unwrap();
        let (back, reg2) = Agcn::load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.config(), &cfg);
        let x = random_input(&cfg, 1, 9);
        let a = model.predict_logits(&reg, &x).unwrap();
        let b = back.predict_logits(&reg2, &x).unwrap();
        // Parameters pass through f32 on disk.
        assert!(a.max_abs_diff(&b) < 1e-4);
    }
}
