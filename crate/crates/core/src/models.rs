//! Tiny residual networks: a 2D image teacher, and Res3D / R(2+1)D video
//! students that mirror its topology block for block.
//!
//! Parameter names follow a dotted scheme shared by every variant, e.g.
//! `stem.conv.weight`, `stage1.block0.bn1.gamma`,
//! `stage2.block0.downsample.conv.weight`, `stage2.block1.conv2.conv_spatial.weight`,
//! `head.weight` (teacher) and `heads.<id>.weight` (students).

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, Conv2Plus1dLayer, Conv2dLayer, Conv3dLayer, Linear, Mode};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Model builders, addressed by name in configs and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "teacher2d-tiny")]
    Teacher2dTiny,
    #[serde(rename = "res3d-tiny")]
    Res3dTiny,
    #[serde(rename = "r2plus1d-tiny")]
    R2Plus1dTiny,
}

impl Architecture {
    pub const ALL: [Architecture; 3] =
        [Architecture::Teacher2dTiny, Architecture::Res3dTiny, Architecture::R2Plus1dTiny];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Teacher2dTiny => "teacher2d-tiny",
            Architecture::Res3dTiny => "res3d-tiny",
            Architecture::R2Plus1dTiny => "r2plus1d-tiny",
        }
    }

    pub fn is_student(self) -> bool {
        self != Architecture::Teacher2dTiny
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`")))
    }
}

/// Trunk hyperparameters shared by teacher and students.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrunkConfig {
    pub in_channels: usize,
    /// Channel width of the two residual stages; the stem uses the first.
    pub widths: [usize; 2],
    pub blocks_per_stage: usize,
    /// Spatial stride of the stem and of the first block of each stage.
    pub stem_stride: usize,
    pub stage_strides: [usize; 2],
    /// Temporal kernel extent of every 3D / (2+1)D convolution.
    pub temporal_kernel: usize,
    /// Zero-pad in time so clips keep their length; when off, every temporal
    /// convolution is "valid" and residual shortcuts are center-cropped.
    pub temporal_padding: bool,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig {
            in_channels: 1,
            widths: [8, 16],
            blocks_per_stage: 2,
            stem_stride: 2,
            stage_strides: [2, 2],
            temporal_kernel: 3,
            temporal_padding: true,
        }
    }
}

impl TrunkConfig {
    pub fn feature_dim(&self) -> usize {
        self.widths[1]
    }

    /// Number of temporal convolutions on the longest path through the trunk.
    pub fn temporal_depth(&self) -> usize {
        1 + 2 * 2 * self.blocks_per_stage
    }

    /// Shortest clip a valid-in-time trunk accepts.
    pub fn min_frames(&self) -> usize {
        if self.temporal_padding {
            1
        } else {
            1 + self.temporal_depth() * (self.temporal_kernel - 1)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.widths.contains(&0)
            || self.blocks_per_stage == 0
            || self.stem_stride == 0
            || self.stage_strides.contains(&0)
            || self.temporal_kernel == 0
        {
            return Err(Error::Config(format!("invalid trunk config {self:?}")));
        }
        if self.temporal_padding && self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Config("temporal padding needs an odd temporal kernel".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvFlavor {
    Image,
    Full3d,
    Factorized,
}

/// One convolution of the trunk in whichever flavor the network uses.
#[derive(Clone, Debug, PartialEq)]
enum ConvUnit {
    D2(Conv2dLayer),
    D3(Conv3dLayer),
    D2p1(Conv2Plus1dLayer),
}

impl ConvUnit {
    fn build(
        flavor: ConvFlavor,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        cfg: &TrunkConfig,
    ) -> Self {
        let pad = k / 2;
        let kt = if k == 1 { 1 } else { cfg.temporal_kernel };
        let pt = if cfg.temporal_padding { kt / 2 } else { 0 };
        match flavor {
            ConvFlavor::Image => {
                ConvUnit::D2(Conv2dLayer::new(prefix, cin, cout, [k, k], [stride, stride], [pad, pad]))
            }
            ConvFlavor::Full3d => {
                ConvUnit::D3(Conv3dLayer::new(prefix, cin, cout, [kt, k, k], [1, stride, stride], [pt, pad, pad]))
            }
            ConvFlavor::Factorized if k == 1 => {
                ConvUnit::D3(Conv3dLayer::new(prefix, cin, cout, [1, 1, 1], [1, stride, stride], [0, 0, 0]))
            }
            ConvFlavor::Factorized => ConvUnit::D2p1(Conv2Plus1dLayer::new(
                prefix,
                cin,
                cout,
                [kt, k, k],
                [1, stride, stride],
                [pt, pad, pad],
            )),
        }
    }

    fn init<S: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        match self {
            ConvUnit::D2(c) => c.init(store, rng),
            ConvUnit::D3(c) => c.init(store, rng),
            ConvUnit::D2p1(c) => c.init(store, rng),
        }
    }

    fn forward<S: Real>(&self, g: &mut Graph<S>, store: &mut ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        match self {
            ConvUnit::D2(c) => c.forward(g, store, x),
            ConvUnit::D3(c) => c.forward(g, store, x),
            ConvUnit::D2p1(c) => c.forward(g, store, x, mode),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBn {
    conv: ConvUnit,
    bn: BatchNormLayer,
}

impl ConvBn {
    fn init<S: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        self.conv.init(store, rng);
        self.bn.init(store, rng);
    }

    fn forward<S: Real>(&self, g: &mut Graph<S>, store: &mut ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv.forward(g, store, x, mode)?;
        self.bn.forward(g, store, h, mode)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn init<S: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        if let Some(d) = &self.downsample {
            d.init(store, rng);
        }
    }

    fn forward<S: Real>(&self, g: &mut Graph<S>, store: &mut ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(g, store, x, mode)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h, mode)?;
        let mut shortcut = match &self.downsample {
            Some(d) => d.forward(g, store, x, mode)?,
            None => x,
        };
        let (hs, ss) = (g.shape(h).to_vec(), g.shape(shortcut).to_vec());
        if hs.len() == 5 && hs[2] < ss[2] {
            // valid temporal convolutions shrank the main path
            shortcut = g.crop_time(shortcut, (ss[2] - hs[2]) / 2, hs[2])?;
        }
        let sum = g.add(h, shortcut)?;
        Ok(g.relu(sum))
    }
}

/// Stem plus two residual stages plus global average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    flavor: ConvFlavor,
    config: TrunkConfig,
    stem: ConvBn,
    blocks: Vec<BasicBlock>,
}

impl Trunk {
    fn new(flavor: ConvFlavor, cfg: &TrunkConfig) -> Result<Self> {
        cfg.validate()?;
        let unit = |prefix: &str, cin, cout, k, stride| ConvUnit::build(flavor, prefix, cin, cout, k, stride, cfg);
        let stem = ConvBn {
            conv: unit("stem.conv", cfg.in_channels, cfg.widths[0], 3, cfg.stem_stride),
            bn: BatchNormLayer::new("stem.bn", cfg.widths[0]),
        };
        let mut blocks = Vec::new();
        let mut cin = cfg.widths[0];
        for (s, (&width, &stride)) in cfg.widths.iter().zip(&cfg.stage_strides).enumerate() {
            for b in 0..cfg.blocks_per_stage {
                let p = format!("stage{}.block{b}", s + 1);
                let stride = if b == 0 { stride } else { 1 };
                let downsample = (stride != 1 || cin != width).then(|| ConvBn {
                    conv: unit(&format!("{p}.downsample.conv"), cin, width, 1, stride),
                    bn: BatchNormLayer::new(format!("{p}.downsample.bn"), width),
                });
                blocks.push(BasicBlock {
                    conv1: ConvBn {
                        conv: unit(&format!("{p}.conv1"), cin, width, 3, stride),
                        bn: BatchNormLayer::new(format!("{p}.bn1"), width),
                    },
                    conv2: ConvBn {
                        conv: unit(&format!("{p}.conv2"), width, width, 3, 1),
                        bn: BatchNormLayer::new(format!("{p}.bn2"), width),
                    },
                    downsample,
                });
                cin = width;
            }
        }
        Ok(Trunk { flavor, config: cfg.clone(), stem, blocks })
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.config
    }

    fn init<S: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        self.stem.init(store, rng);
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    /// Pooled `B×feature_dim` features.
    fn forward<S: Real>(&self, g: &mut Graph<S>, store: &mut ParamStore<S>, x: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(x);
        let expected_rank = if self.flavor == ConvFlavor::Image { 4 } else { 5 };
        if shape.len() != expected_rank || shape[1] != self.config.in_channels {
            return Err(Error::invalid(
                "trunk",
                format!("expected rank-{expected_rank} input with {} channels, got {shape:?}", self.config.in_channels),
            ));
        }
        if expected_rank == 5 && shape[2] < self.config.min_frames() {
            return Err(Error::invalid(
                "trunk",
                format!("clip of {} frames is shorter than the {} the trunk needs", shape[2], self.config.min_frames()),
            ));
        }
        let h = self.stem.forward(g, store, x, mode)?;
        let mut h = g.relu(h);
        for b in &self.blocks {
            h = b.forward(g, store, h, mode)?;
        }
        g.global_avg_pool(h)
    }
}

fn trunk_names<S: Real>(store: &ParamStore<S>) -> Vec<String> {
    store.names().filter(|n| !n.starts_with("head.") && !n.starts_with("heads.")).map(str::to_string).collect()
}

/// 2D residual image classifier.
#[derive(Clone, Debug)]
pub struct TeacherNet2D<S: Real = f32> {
    pub trunk: Trunk,
    pub head: Linear,
    pub params: ParamStore<S>,
    pub mode: Mode,
}

impl<S: Real> TeacherNet2D<S> {
    pub fn new<R: Rng + ?Sized>(cfg: &TrunkConfig, num_classes: usize, rng: &mut R) -> Result<Self> {
        let trunk = Trunk::new(ConvFlavor::Image, cfg)?;
        let head = Linear::new("head", cfg.feature_dim(), num_classes);
        let mut params = ParamStore::new();
        trunk.init(&mut params, rng);
        head.init(&mut params, rng);
        Ok(TeacherNet2D { trunk, head, params, mode: Mode::Train })
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features
    }

    pub fn trunk_param_names(&self) -> Vec<String> {
        trunk_names(&self.params)
    }

    /// Logits for a `B×C×H×W` batch in the network's current mode.
    pub fn forward(&mut self, g: &mut Graph<S>, frames: Var) -> Result<Var> {
        let f = self.trunk.forward(g, &mut self.params, frames, self.mode)?;
        self.head.forward(g, &self.params, f)
    }

    /// Frozen-teacher inference: eval mode, no gradients, no state change.
    pub fn logits(&self, frames: &Tensor<S>) -> Result<Tensor<S>> {
        if self.mode != Mode::Eval {
            return Err(Error::invalid("teacher_logits", "teacher must be in eval mode"));
        }
        if frames.shape()[0] == 0 {
            return Err(Error::invalid("teacher_logits", "empty batch"));
        }
        let mut g = Graph::inference();
        // eval-mode forward never writes to the store; the scratch copy keeps
        // that guarantee structural
        let mut store = self.params.clone();
        let x = g.constant(frames.clone());
        let f = self.trunk.forward(&mut g, &mut store, x, Mode::Eval)?;
        let y = self.head.forward(&mut g, &store, f)?;
        Ok(g.value(y).clone())
    }
}

/// Which 3D trunk a student uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentKind {
    Res3d,
    R2Plus1d,
}

impl StudentKind {
    pub fn architecture(self) -> Architecture {
        match self {
            StudentKind::Res3d => Architecture::Res3dTiny,
            StudentKind::R2Plus1d => Architecture::R2Plus1dTiny,
        }
    }

    pub fn from_architecture(a: Architecture) -> Result<Self> {
        match a {
            Architecture::Res3dTiny => Ok(StudentKind::Res3d),
            Architecture::R2Plus1dTiny => Ok(StudentKind::R2Plus1d),
            Architecture::Teacher2dTiny => Err(Error::Config(format!("`{a}` is not a video model"))),
        }
    }
}

/// Spatiotemporal student with one linear head per attached teacher (or
/// task) over shared pooled trunk features.
#[derive(Clone, Debug)]
pub struct StudentNet<S: Real = f32> {
    pub kind: StudentKind,
    pub trunk: Trunk,
    pub heads: IndexMap<String, Linear>,
    pub params: ParamStore<S>,
    pub mode: Mode,
}

impl<S: Real> StudentNet<S> {
    pub fn new<R: Rng + ?Sized>(kind: StudentKind, cfg: &TrunkConfig, rng: &mut R) -> Result<Self> {
        let flavor = match kind {
            StudentKind::Res3d => ConvFlavor::Full3d,
            StudentKind::R2Plus1d => ConvFlavor::Factorized,
        };
        let trunk = Trunk::new(flavor, cfg)?;
        let mut params = ParamStore::new();
        trunk.init(&mut params, rng);
        Ok(StudentNet { kind, trunk, heads: IndexMap::new(), params, mode: Mode::Train })
    }

    pub fn architecture(&self) -> Architecture {
        self.kind.architecture()
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.config.feature_dim()
    }

    pub fn trunk_param_names(&self) -> Vec<String> {
        trunk_names(&self.params)
    }

    /// Attaches a freshly initialized `feature_dim → classes` head.
    pub fn add_head<R: Rng + ?Sized>(&mut self, id: &str, classes: usize, rng: &mut R) -> Result<()> {
        if self.heads.contains_key(id) {
            return Err(Error::invalid("add_head", format!("head `{id}` already exists")));
        }
        if id.is_empty() || id.contains('.') {
            return Err(Error::invalid("add_head", format!("bad head id `{id}`")));
        }
        let head = Linear::new(format!("heads.{id}"), self.feature_dim(), classes);
        head.init(&mut self.params, rng);
        self.heads.insert(id.to_string(), head);
        Ok(())
    }

    /// Registers a head whose parameters are already in the store (checkpoint load).
    pub fn attach_existing_head(&mut self, id: &str) -> Result<()> {
        let weight = self.params.value(&format!("heads.{id}.weight"))?;
        let classes = weight.shape()[0];
        let head = Linear::new(format!("heads.{id}"), self.feature_dim(), classes);
        self.params.value(&head.bias_name())?;
        self.heads.insert(id.to_string(), head);
        Ok(())
    }

    pub fn remove_head(&mut self, id: &str) -> Result<()> {
        let head =
            self.heads.shift_remove(id).ok_or_else(|| Error::invalid("remove_head", format!("no head `{id}`")))?;
        self.params.remove(&head.weight_name());
        self.params.remove(&head.bias_name());
        Ok(())
    }

    pub fn head(&self, id: &str) -> Result<&Linear> {
        self.heads.get(id).ok_or_else(|| Error::invalid("student_forward", format!("unknown head `{id}`")))
    }

    /// Pooled trunk features of a `B×C×T×H×W` clip batch.
    pub fn features(&mut self, g: &mut Graph<S>, clips: Var) -> Result<Var> {
        if g.shape(clips).first() == Some(&0) {
            return Err(Error::invalid("student_forward", "empty batch"));
        }
        self.trunk.forward(g, &mut self.params, clips, self.mode)
    }

    /// Logits of each requested head, all computed from one trunk pass.
    pub fn forward_heads(&mut self, g: &mut Graph<S>, clips: Var, heads: &[&str]) -> Result<Vec<Var>> {
        for id in heads {
            self.head(id)?;
        }
        let f = self.features(g, clips)?;
        heads.iter().map(|id| self.heads[*id].forward(g, &self.params, f)).collect()
    }

    pub fn forward(&mut self, g: &mut Graph<S>, clips: Var, head: &str) -> Result<Var> {
        Ok(self.forward_heads(g, clips, &[head])?.remove(0))
    }

    /// Eval-mode logits of one head without recording gradients.
    pub fn logits(&self, clips: &Tensor<S>, head: &str) -> Result<Tensor<S>> {
        let mut net = self.clone();
        net.mode = Mode::Eval;
        let mut g = Graph::inference();
        let x = g.constant(clips.clone());
        let y = net.forward(&mut g, x, head)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn architecture_names_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(a.name().parse::<Architecture>().unwrap(), a);
        }
        assert!("resnet18".parse::<Architecture>().is_err());
    }

    #[test]
    fn res3d_mirrors_teacher_names() {
        let cfg = TrunkConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = TeacherNet2D::<f32>::new(&cfg, 5, &mut rng).unwrap();
        let s = StudentNet::<f32>::new(StudentKind::Res3d, &cfg, &mut rng).unwrap();
        assert_eq!(t.trunk_param_names(), s.trunk_param_names());
        for name in t.trunk_param_names() {
            let (a, b) = (t.params.value(&name).unwrap(), s.params.value(&name).unwrap());
            if name.ends_with(".weight") {
                assert_eq!(b.rank(), a.rank() + 1, "{name}");
                assert_eq!(a.shape()[..2], b.shape()[..2]);
                assert_eq!(a.shape()[2..], b.shape()[3..]);
            } else {
                assert_eq!(a.shape(), b.shape(), "{name}");
            }
        }
    }

    #[test]
    fn r2plus1d_has_no_teacher_correspondence() {
        let cfg = TrunkConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = TeacherNet2D::<f32>::new(&cfg, 5, &mut rng).unwrap();
        let s = StudentNet::<f32>::new(StudentKind::R2Plus1d, &cfg, &mut rng).unwrap();
        assert_ne!(t.trunk_param_names(), s.trunk_param_names());
        assert!(s.params.contains("stage2.block1.conv1.conv_spatial.weight"));
        assert!(s.params.contains("stage2.block1.conv1.bn_mid.gamma"));
    }

    #[test]
    fn min_frames_for_valid_time() {
        let cfg = TrunkConfig { temporal_padding: false, ..TrunkConfig::default() };
        assert_eq!(cfg.min_frames(), 19);
        assert_eq!(TrunkConfig::default().min_frames(), 1);
    }
}
