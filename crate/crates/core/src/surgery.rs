//! Backbone descriptions, conversion of tail stages into pathway form, and the
//! train/inference forward contracts of the resulting network.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apconv::{self, nested_channels, ApConv, ApConvSpec, PathwayOutput};
use crate::augment::{stack, Image, ViewBatch};
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Conv2d, ConvShape, ForwardCtx, Linear, ModelState, NormId};
use crate::objective::PathwayFeatures;
use crate::tape::{Graph, ParamId, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand (×4).
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 3×3 stride-2 max pooling after the stem.
    #[serde(default)]
    pub max_pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub block: BlockKind,
    pub blocks: usize,
    /// Inner width; the stage outputs `width · expansion` channels.
    pub width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
}

fn default_in_channels() -> usize {
    3
}

fn backbone_or_preset<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<BackboneSpec, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        Preset(String),
        Spec(BackboneSpec),
    }
    match Either::deserialize(d)? {
        Either::Preset(name) => BackboneSpec::preset(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown backbone preset `{name}`"))),
        Either::Spec(s) => Ok(s),
    }
}

impl BackboneSpec {
    /// ResNet-50 layout (bottleneck stages of 3, 4, 6, 3 blocks).
    pub fn resnet50() -> Self {
        let stage = |blocks, width, stride| StageSpec {
            block: BlockKind::Bottleneck,
            blocks,
            width,
            stride,
        };
        Self {
            in_channels: 3,
            stem: StemSpec {
                out_channels: 64,
                kernel: 7,
                stride: 2,
                max_pool: true,
            },
            stages: vec![stage(3, 64, 1), stage(4, 128, 2), stage(6, 256, 2), stage(3, 512, 2)],
        }
    }

    /// ResNet-18 layout (basic stages of 2 blocks each).
    pub fn resnet18() -> Self {
        let stage = |width, stride| StageSpec {
            block: BlockKind::Basic,
            blocks: 2,
            width,
            stride,
        };
        Self {
            stages: vec![stage(64, 1), stage(128, 2), stage(256, 2), stage(512, 2)],
            ..Self::resnet50()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "resnet18" => Some(Self::resnet18()),
            "resnet50" => Some(Self::resnet50()),
            "tiny" => Some(Self::tiny([16, 32, 64])),
            _ => None,
        }
    }

    /// A small three-stage residual network for 32×32 inputs.
    pub fn tiny(widths: [usize; 3]) -> Self {
        let stage = |width, stride| StageSpec {
            block: BlockKind::Basic,
            blocks: 1,
            width,
            stride,
        };
        Self {
            in_channels: 3,
            stem: StemSpec {
                out_channels: widths[0],
                kernel: 3,
                stride: 1,
                max_pool: false,
            },
            stages: vec![stage(widths[0], 1), stage(widths[1], 2), stage(widths[2], 2)],
        }
    }

    pub fn classifier_dim(&self) -> usize {
        self.stages
            .last()
            .map(|s| s.width * s.block.expansion())
            .unwrap_or(self.stem.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidPlan("backbone needs at least one stage".into()));
        }
        if self.in_channels == 0 || self.stem.out_channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return Err(Error::InvalidPlan("stem dimensions must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.width == 0 || s.stride == 0 {
                return Err(Error::InvalidPlan(format!("stage {i} has a zero dimension")));
            }
        }
        Ok(())
    }
}

/// A backbone plus the surgery directive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    /// A full description or a preset name (`resnet18`, `resnet50`, `tiny`).
    #[serde(deserialize_with = "backbone_or_preset")]
    pub backbone: BackboneSpec,
    pub num_classes: usize,
    /// Pathway order; equals the number of view levels. `1` is the plain
    /// backbone.
    pub k: usize,
    /// Stages to convert; defaults to the last stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replace_stages: Option<Vec<usize>>,
    /// Per-pathway channel fractions; defaults to `1/k` each.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Vec<f64>>,
}

impl NetworkPlan {
    pub fn new(backbone: BackboneSpec, num_classes: usize, k: usize) -> Self {
        Self {
            backbone,
            num_classes,
            k,
            replace_stages: None,
            split: None,
        }
    }

    /// The same backbone without pathways.
    pub fn baseline(&self) -> Self {
        Self::new(self.backbone.clone(), self.num_classes, 1)
    }

    pub fn replaced_stages(&self) -> Vec<usize> {
        if self.k < 2 {
            return Vec::new();
        }
        match &self.replace_stages {
            Some(s) => s.clone(),
            None => vec![self.backbone.stages.len() - 1],
        }
    }

    pub fn fractions(&self) -> Vec<f64> {
        match &self.split {
            Some(f) => f.clone(),
            None => vec![1.0 / self.k as f64; self.k],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.k == 0 {
            return Err(Error::InvalidPlan("k must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidPlan("num_classes must be positive".into()));
        }
        if self.k == 1 {
            return Ok(());
        }
        let fr = self.fractions();
        if fr.len() != self.k {
            return Err(Error::InvalidPlan(format!(
                "{} split fractions for k={}",
                fr.len(),
                self.k
            )));
        }
        if fr.iter().any(|&f| !(f > 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPlan(format!(
                "split fractions {fr:?} must be positive and sum to 1"
            )));
        }
        let replaced = self.replaced_stages();
        let n = self.backbone.stages.len();
        if replaced.is_empty() {
            return Err(Error::InvalidPlan("k >= 2 needs at least one replaced stage".into()));
        }
        let mut sorted = replaced.clone();
        sorted.sort_unstable();
        sorted.dedup();
        let first = sorted[0];
        if sorted.len() != replaced.len() || sorted != (first..n).collect::<Vec<_>>() {
            return Err(Error::InvalidPlan(format!(
                "replaced stages {replaced:?} must be a contiguous tail of {n} stages"
            )));
        }
        Ok(())
    }

    /// Every convolution of the plan in execution order.
    pub fn layers(&self, input: (usize, usize)) -> Result<Vec<LayerPlan>> {
        self.validate()?;
        let replaced = self.replaced_stages();
        let fractions = self.fractions();
        let mut out = Vec::new();
        let bb = &self.backbone;
        let stem = ConvShape {
            in_channels: bb.in_channels,
            out_channels: bb.stem.out_channels,
            kernel: (bb.stem.kernel, bb.stem.kernel),
            stride: bb.stem.stride,
            padding: bb.stem.kernel / 2,
            bias: false,
        };
        let mut size = stem
            .output_size(input)
            .ok_or_else(|| Error::InvalidPlan(format!("input {input:?} too small for the stem")))?;
        out.push(LayerPlan::new("stem".into(), stem, input, None)?);
        if bb.stem.max_pool {
            size = pool_size(size).ok_or_else(|| Error::InvalidPlan("input too small for pooling".into()))?;
        }
        let mut channels = bb.stem.out_channels;
        for (si, stage) in bb.stages.iter().enumerate() {
            let pathway = replaced.contains(&si).then_some(fractions.as_slice());
            for bi in 0..stage.blocks {
                let stride = if bi == 0 { stage.stride } else { 1 };
                let prefix = format!("stage{si}.block{bi}");
                let w = stage.width;
                let expanded = w * stage.block.expansion();
                let convs: Vec<(&str, ConvShape)> = match stage.block {
                    BlockKind::Basic => vec![
                        ("conv1", conv_shape(channels, w, 3, stride)),
                        ("conv2", conv_shape(w, w, 3, 1)),
                    ],
                    BlockKind::Bottleneck => vec![
                        ("conv1", conv_shape(channels, w, 1, 1)),
                        ("conv2", conv_shape(w, w, 3, stride)),
                        ("conv3", conv_shape(w, expanded, 1, 1)),
                    ],
                };
                let block_in = size;
                for (name, shape) in convs {
                    let next = shape
                        .output_size(size)
                        .ok_or_else(|| Error::InvalidPlan(format!("{prefix}.{name}: feature map vanished")))?;
                    out.push(LayerPlan::new(format!("{prefix}.{name}"), shape, size, pathway)?);
                    size = next;
                }
                if stride != 1 || channels != expanded {
                    let shape = conv_shape(channels, expanded, 1, stride);
                    out.push(LayerPlan::new(format!("{prefix}.shortcut"), shape, block_in, pathway)?);
                }
                channels = expanded;
            }
        }
        Ok(out)
    }

    /// Integer parameter and MAC accounting for an `input`-sized image.
    pub fn account(&self, input: (usize, usize)) -> Result<Accounting> {
        let layers = self.layers(input)?;
        let k = self.k;
        let fractions = self.fractions();
        let head_widths: Vec<usize> = if k == 1 {
            vec![self.backbone.classifier_dim()]
        } else {
            nested_channels(self.backbone.classifier_dim(), &fractions)?
        };
        let norm_params = layers.iter().map(|l| 2 * l.shape.out_channels as u64).sum();
        let head_params = head_widths
            .iter()
            .map(|&w| (w * self.num_classes + self.num_classes) as u64)
            .collect();
        Ok(Accounting {
            input,
            head_macs: (self.backbone.classifier_dim() * self.num_classes) as u64,
            layers: layers.into_iter().map(LayerAccount::from).collect(),
            norm_params,
            head_params,
        })
    }
}

fn conv_shape(cin: usize, cout: usize, kernel: usize, stride: usize) -> ConvShape {
    ConvShape {
        in_channels: cin,
        out_channels: cout,
        kernel: (kernel, kernel),
        stride,
        padding: kernel / 2,
        bias: false,
    }
}

fn pool_size((h, w): (usize, usize)) -> Option<(usize, usize)> {
    Some((
        crate::tape::conv_out_len(h, 3, 2, 1)?,
        crate::tape::conv_out_len(w, 3, 2, 1)?,
    ))
}

/// One convolution of a plan: its dense shape, input size, and pathway split
/// when it lies in a replaced stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub name: String,
    pub shape: ConvShape,
    pub input: (usize, usize),
    pub pathway: Option<ApConvSpec>,
}

impl LayerPlan {
    fn new(name: String, shape: ConvShape, input: (usize, usize), fractions: Option<&[f64]>) -> Result<Self> {
        let pathway = match fractions {
            Some(f) => Some(ApConvSpec::from_split(&shape, f).map_err(|e| Error::InvalidPlan(format!("{name}: {e}")))?),
            None => None,
        };
        Ok(Self {
            name,
            shape,
            input,
            pathway,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAccount {
    pub name: String,
    pub params: u64,
    pub dense_params: u64,
    pub macs: u64,
    pub dense_macs: u64,
    pub pathway: bool,
}

impl From<LayerPlan> for LayerAccount {
    fn from(l: LayerPlan) -> Self {
        let dense_params = l.shape.param_count();
        let dense_macs = l.shape.mac_count(l.input).expect("validated by layers()");
        let (params, macs) = match &l.pathway {
            Some(spec) => (
                apconv::param_count(spec).total,
                apconv::mac_count(spec, l.input).expect("validated by layers()"),
            ),
            None => (dense_params, dense_macs),
        };
        Self {
            name: l.name,
            params,
            dense_params,
            macs,
            dense_macs,
            pathway: l.pathway.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub input: (usize, usize),
    pub layers: Vec<LayerAccount>,
    /// Affine parameters of every normalisation layer.
    pub norm_params: u64,
    /// Parameters of head `j`; only the first is used at inference.
    pub head_params: Vec<u64>,
    pub head_macs: u64,
}

impl Accounting {
    pub fn conv_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    /// Parameters needed at inference: every convolution, the norms and the
    /// main head.
    pub fn params_infer(&self) -> u64 {
        self.conv_params() + self.norm_params + self.head_params[0]
    }

    /// Every allocated parameter, auxiliary heads included.
    pub fn params_train(&self) -> u64 {
        self.conv_params() + self.norm_params + self.head_params.iter().sum::<u64>()
    }

    /// `Σ_t δ_t` over the replaced layers.
    pub fn delta(&self) -> u64 {
        self.layers.iter().map(|l| l.dense_params - l.params).sum()
    }

    /// Multiply-accumulates of the level-1 forward, convolutions plus head.
    pub fn macs_infer(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum::<u64>() + self.head_macs
    }
}

#[derive(Debug, Clone)]
enum ConvLayer {
    Standard(Conv2d),
    Pathway(ApConv),
}

impl ConvLayer {
    fn forward(
        &self,
        g: &mut Graph,
        state: &ModelState,
        x: Var,
        level: usize,
        features: &mut Vec<PathwayFeatures>,
    ) -> Result<Var> {
        match self {
            ConvLayer::Standard(c) => c.forward(g, &state.params, x),
            ConvLayer::Pathway(c) => {
                let out: PathwayOutput = c.forward_level(g, &state.params, x, level)?;
                features.push((&out).into());
                Ok(out.out)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    convs: Vec<(ConvLayer, NormId)>,
    shortcut: Option<(ConvLayer, NormId)>,
}

/// A backbone whose tail stages have been converted to pathway convolutions,
/// with one classification head per view level.
#[derive(Debug, Clone)]
pub struct PathwayNetwork {
    pub plan: NetworkPlan,
    pub state: ModelState,
    stem: (Conv2d, NormId),
    blocks: Vec<(usize, Block)>,
    heads: Vec<Linear>,
    /// Index of the first replaced stage and the level widths entering it.
    entry: Option<(usize, Vec<usize>)>,
    ap_layers: Vec<ApConv>,
}

/// Logits per level plus the pathway outputs the regulariser needs.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub logits: Vec<Var>,
    pub features: Vec<PathwayFeatures>,
}

impl PathwayNetwork {
    /// Builds the network described by `plan`, initialised from `seed`.
    pub fn surgerize(plan: &NetworkPlan, seed: u64) -> Result<Self> {
        // Spatial sizes only matter for accounting; any input large enough works.
        let layers = plan.layers((1024, 1024))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = ModelState::default();
        let k = plan.k;
        let fractions = plan.fractions();
        let level_widths = |n: usize, pathway: bool| -> Result<Vec<usize>> {
            if pathway {
                nested_channels(n, &fractions)
            } else {
                Ok(vec![n; k])
            }
        };
        let build = |l: &LayerPlan, state: &mut ModelState, rng: &mut ChaCha8Rng| -> Result<(ConvLayer, NormId)> {
            let conv = match &l.pathway {
                Some(spec) => ConvLayer::Pathway(ApConv::new(spec.clone(), &mut state.params, &l.name, rng)?),
                None => ConvLayer::Standard(Conv2d::new(l.shape, &mut state.params, &l.name, rng)),
            };
            let norm = state.add_norm(
                &format!("{}.norm", l.name),
                level_widths(l.shape.out_channels, l.pathway.is_some())?,
            );
            Ok((conv, norm))
        };
        let mut iter = layers.iter();
        let stem_plan = iter.next().expect("stem is always present");
        let stem = match build(stem_plan, &mut state, &mut rng)? {
            (ConvLayer::Standard(c), n) => (c, n),
            _ => unreachable!("the stem is never replaced"),
        };
        let mut blocks = Vec::new();
        let mut ap_layers = Vec::new();
        let replaced = plan.replaced_stages();
        let mut entry = None;
        for (si, stage) in plan.backbone.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let n_convs = match stage.block {
                    BlockKind::Basic => 2,
                    BlockKind::Bottleneck => 3,
                };
                let mut convs = Vec::with_capacity(n_convs);
                for _ in 0..n_convs {
                    let l = iter.next().expect("layer list matches the plan");
                    if entry.is_none() && replaced.contains(&si) {
                        let spec = l.pathway.as_ref().expect("replaced stage");
                        entry = Some((si, spec.pathway_in.clone()));
                    }
                    convs.push(build(l, &mut state, &mut rng)?);
                }
                let shortcut = match iter.clone().next() {
                    Some(l) if l.name == format!("stage{si}.block{bi}.shortcut") => {
                        iter.next();
                        Some(build(l, &mut state, &mut rng)?)
                    }
                    _ => None,
                };
                for (c, _) in convs.iter().chain(shortcut.iter()) {
                    if let ConvLayer::Pathway(ap) = c {
                        ap_layers.push(ap.clone());
                    }
                }
                blocks.push((si, Block { convs, shortcut }));
            }
        }
        let head_widths = if k == 1 {
            vec![plan.backbone.classifier_dim()]
        } else {
            nested_channels(plan.backbone.classifier_dim(), &fractions)?
        };
        let heads = head_widths
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                Linear::new(
                    w,
                    plan.num_classes,
                    &mut state.params,
                    &format!("head{}", j + 1),
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            plan: plan.clone(),
            state,
            stem,
            blocks,
            heads,
            entry,
            ap_layers,
        })
    }

    pub fn k(&self) -> usize {
        self.plan.k
    }

    pub fn num_classes(&self) -> usize {
        self.plan.num_classes
    }

    /// Forward of one view level (1-based) through the shared layers and the
    /// pathways `level..k` of every pathway layer.
    pub fn forward_level(
        &self,
        g: &mut Graph,
        x: Var,
        level: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Vec<PathwayFeatures>)> {
        if level == 0 || level > self.k() {
            return Err(Error::LevelOutOfRange { level, max: self.k() });
        }
        let st = &self.state;
        let mut features = Vec::new();
        let mut h = self.stem.0.forward(g, &st.params, x)?;
        h = st.norm(g, self.stem.1, h, level, ctx)?;
        h = g.relu(h);
        if self.plan.backbone.stem.max_pool {
            h = g.max_pool(h, 3, 2, 1)?;
        }
        let mut entered = false;
        for (si, block) in &self.blocks {
            if let Some((entry_stage, widths)) = &self.entry {
                if !entered && si == entry_stage {
                    entered = true;
                    let n = widths[0];
                    let m = widths[level - 1];
                    if m != n {
                        h = g.narrow(h, 1, n - m, m)?;
                    }
                }
            }
            let input = h;
            for (i, (conv, norm)) in block.convs.iter().enumerate() {
                h = conv.forward(g, st, h, level, &mut features)?;
                h = st.norm(g, *norm, h, level, ctx)?;
                if i + 1 < block.convs.len() {
                    h = g.relu(h);
                }
            }
            let skip = match &block.shortcut {
                Some((conv, norm)) => {
                    let s = conv.forward(g, st, input, level, &mut features)?;
                    st.norm(g, *norm, s, level, ctx)?
                }
                None => input,
            };
            h = g.add(h, skip)?;
            h = g.relu(h);
        }
        let pooled = g.global_avg_pool(h)?;
        let logits = self.heads[level - 1].forward(g, &st.params, pooled)?;
        Ok((logits, features))
    }

    /// Runs view `j` (`views[j-1]`, a `(B, C, H, W)` tensor) through level `j`.
    pub fn forward_train(&self, g: &mut Graph, views: &[Tensor], ctx: &mut ForwardCtx) -> Result<TrainOutput> {
        if views.len() != self.k() {
            return Err(Error::InvalidPlan(format!(
                "{} view levels for a network of order k={}",
                views.len(),
                self.k()
            )));
        }
        let batch = views[0].shape()[0];
        let mut logits = Vec::with_capacity(views.len());
        let mut features = Vec::new();
        for (j, v) in views.iter().enumerate() {
            if v.shape()[0] != batch {
                return Err(Error::Shape("view levels disagree on batch size".into()));
            }
            let x = g.constant(v.clone());
            let (l, f) = self.forward_level(g, x, j + 1, ctx)?;
            logits.push(l);
            features.extend(f);
        }
        Ok(TrainOutput { logits, features })
    }

    pub fn forward_batch(&self, g: &mut Graph, batch: &ViewBatch, ctx: &mut ForwardCtx) -> Result<TrainOutput> {
        let views = (0..batch.levels())
            .map(|j| batch.level_tensor(j))
            .collect::<Result<Vec<_>>>()?;
        self.forward_train(g, &views, ctx)
    }

    /// Class probabilities of the main head for a `(B, C, H, W)` batch.
    pub fn infer_batch(&self, x: &Tensor) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let mut ctx = ForwardCtx::eval();
        let (logits, _) = self.forward_level(&mut g, v, 1, &mut ctx)?;
        softmax_rows(g.value(logits))
    }

    /// Class probabilities for one (already preprocessed) image; only the main
    /// pathway and head run.
    pub fn infer(&self, img: &Image) -> Result<Vec<f64>> {
        let x = stack(std::slice::from_ref(img))?;
        Ok(self.infer_batch(&x)?.row(0).to_vec())
    }

    pub fn head_params(&self, level: usize) -> Vec<ParamId> {
        self.heads[level - 1].param_ids().to_vec()
    }

    pub fn pathway_layers(&self) -> &[ApConv] {
        &self.ap_layers
    }

    /// Sub-convolution parameters owned by pathway `j` across all pathway
    /// layers.
    pub fn pathway_params(&self, j: usize) -> Vec<ParamId> {
        self.ap_layers.iter().flat_map(|l| l.pathway_params(j)).collect()
    }

    pub fn param_count(&self) -> u64 {
        self.state.params.scalar_count() as u64
    }
}
