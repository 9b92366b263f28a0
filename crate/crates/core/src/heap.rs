//! Heterogeneous pathways: each pathway runs at its own resolution and width,
//! and heavier pathways feed lighter ones through learnable stride-2
//! downsampling.
//!
//! Pathway `j` sees its input at `1/scale_j` of the view resolution. Its stage
//! input is `concat(own_j, down(out_i) for i in fusion_j)`, where `own_j` is a
//! stem over the resized view and `out_i` the output of pathway `i`'s blocks.
//! Fusion happens once, at stage entry. A level-`j` view runs pathways
//! `j..k`; only head `j` reads it.

use ndarray::{Array2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{stack, Image};
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Conv2d, ConvShape, ForwardCtx, Linear, ModelState, NormId};
use crate::objective::PathwayFeatures;
use crate::surgery::TrainOutput;
use crate::tape::{Graph, ParamId, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeapPathwaySpec {
    /// Resolution divisor relative to the view; a power of two.
    pub scale: usize,
    pub width: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeapStageSpec {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    /// Ordered lightest (main) to heaviest.
    pub pathways: Vec<HeapPathwaySpec>,
    /// `fusion[j]` lists the 0-based heavier pathways fused into pathway `j`;
    /// defaults to every heavier pathway.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<Vec<Vec<usize>>>,
}

fn default_in_channels() -> usize {
    3
}

fn stem_shape(cin: usize, w: usize) -> ConvShape {
    ConvShape {
        in_channels: cin,
        out_channels: w,
        kernel: (3, 3),
        stride: 1,
        padding: 1,
        bias: false,
    }
}

fn down_shape(w: usize) -> ConvShape {
    ConvShape {
        in_channels: w,
        out_channels: w,
        kernel: (2, 2),
        stride: 2,
        padding: 0,
        bias: true,
    }
}

fn up_shape(cin: usize, cout: usize) -> ConvShape {
    ConvShape {
        in_channels: cin,
        out_channels: cout,
        kernel: (1, 1),
        stride: 1,
        padding: 0,
        bias: true,
    }
}

/// `(conv1, conv2, projection)` shapes of one basic block.
fn block_shapes(cin: usize, w: usize) -> (ConvShape, ConvShape, Option<ConvShape>) {
    let c3 = |a, b| ConvShape {
        in_channels: a,
        out_channels: b,
        kernel: (3, 3),
        stride: 1,
        padding: 1,
        bias: false,
    };
    let proj = (cin != w).then_some(ConvShape {
        in_channels: cin,
        out_channels: w,
        kernel: (1, 1),
        stride: 1,
        padding: 0,
        bias: false,
    });
    (c3(cin, w), c3(w, w), proj)
}

impl HeapStageSpec {
    pub fn k(&self) -> usize {
        self.pathways.len()
    }

    pub fn fusion_map(&self) -> Vec<Vec<usize>> {
        match &self.fusion {
            Some(f) => f.clone(),
            None => (0..self.k()).map(|j| (j + 1..self.k()).collect()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::InvalidPlan(
                "heap stage needs pathways, classes and input channels".into(),
            ));
        }
        for (j, p) in self.pathways.iter().enumerate() {
            if p.width == 0 || p.blocks == 0 {
                return Err(Error::InvalidPlan(format!(
                    "pathway {} needs positive width and blocks",
                    j + 1
                )));
            }
            if !p.scale.is_power_of_two() {
                return Err(Error::InvalidPlan(format!(
                    "pathway {} scale {} is not a power of two",
                    j + 1,
                    p.scale
                )));
            }
        }
        for w in self.pathways.windows(2) {
            if w[1].scale >= w[0].scale {
                return Err(Error::InvalidPlan(
                    "heavier pathways must run at strictly higher resolution".into(),
                ));
            }
        }
        let fusion = self.fusion_map();
        if fusion.len() != k {
            return Err(Error::InvalidPlan(format!(
                "fusion map has {} entries for {k} pathways",
                fusion.len()
            )));
        }
        for (j, srcs) in fusion.iter().enumerate() {
            let mut seen = srcs.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != srcs.len() || srcs.iter().any(|&i| i <= j || i >= k) {
                return Err(Error::InvalidPlan(format!(
                    "pathway {} may only fuse distinct heavier pathways, got {srcs:?}",
                    j + 1
                )));
            }
        }
        Ok(())
    }

    /// Downsampling steps from pathway `i` to pathway `j`.
    pub fn down_steps(&self, i: usize, j: usize) -> usize {
        (self.pathways[j].scale / self.pathways[i].scale).trailing_zeros() as usize
    }

    /// Channels entering pathway `j`'s blocks after fusion.
    pub fn fused_width(&self, j: usize) -> usize {
        self.pathways[j].width
            + self.fusion_map()[j]
                .iter()
                .map(|&i| self.pathways[i].width)
                .sum::<usize>()
    }

    fn blocks_params(&self, j: usize, cin: usize) -> u64 {
        let p = &self.pathways[j];
        let mut total = 0;
        let mut c = cin;
        for _ in 0..p.blocks {
            let (a, b, proj) = block_shapes(c, p.width);
            total += a.param_count() + b.param_count() + 4 * p.width as u64;
            if let Some(s) = proj {
                total += s.param_count() + 2 * p.width as u64;
            }
            c = p.width;
        }
        total
    }

    fn head_params(&self, j: usize) -> u64 {
        ((self.pathways[j].width + 1) * self.num_classes) as u64
    }

    fn stem_params(&self, j: usize) -> u64 {
        let w = self.pathways[j].width;
        stem_shape(self.in_channels, w).param_count() + 2 * w as u64
    }

    /// Parameters used at inference: everything except heads `2..k`.
    pub fn params_infer(&self) -> Result<u64> {
        self.validate()?;
        let fusion = self.fusion_map();
        let mut total = self.head_params(0);
        for j in 0..self.k() {
            total += self.stem_params(j) + self.blocks_params(j, self.fused_width(j));
            for &i in &fusion[j] {
                total += self.down_steps(i, j) as u64 * down_shape(self.pathways[i].width).param_count();
            }
        }
        Ok(total)
    }

    pub fn params_train(&self) -> Result<u64> {
        Ok(self.params_infer()? + (1..self.k()).map(|j| self.head_params(j)).sum::<u64>())
    }

    /// Parameters of the equal-width multi-branch stage with full exchange:
    /// every pathway also receives every lighter pathway through a 1×1
    /// convolution followed by upsampling.
    pub fn full_fusion_params(&self) -> Result<u64> {
        self.validate()?;
        let k = self.k();
        let all: u64 = self.pathways.iter().map(|p| p.width as u64).sum();
        let mut total: u64 = (0..k).map(|j| self.head_params(j)).sum();
        for j in 0..k {
            total += self.stem_params(j) + self.blocks_params(j, all as usize);
            for i in 0..k {
                let wi = self.pathways[i].width;
                if i > j {
                    total += self.down_steps(i, j) as u64 * down_shape(wi).param_count();
                } else if i < j {
                    total += up_shape(wi, wi).param_count();
                }
            }
        }
        Ok(total)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: (Conv2d, NormId),
    conv2: (Conv2d, NormId),
    proj: Option<(Conv2d, NormId)>,
}

#[derive(Debug, Clone)]
struct Pathway {
    stem: (Conv2d, NormId),
    /// `(source pathway, stride-2 chain)` per fused heavier pathway.
    downs: Vec<(usize, Vec<Conv2d>)>,
    blocks: Vec<BasicBlock>,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct HeapNetwork {
    pub spec: HeapStageSpec,
    pub state: ModelState,
    pathways: Vec<Pathway>,
}

/// Sets a `(w, w, 2, 2)` kernel to per-channel averaging.
fn averaging_kernel(w: usize) -> Tensor {
    let mut t = Tensor::zeros(IxDyn(&[w, w, 2, 2]));
    for c in 0..w {
        for y in 0..2 {
            for x in 0..2 {
                t[[c, c, y, x]] = 0.25;
            }
        }
    }
    t
}

/// Bilinearly resizes every image of a `(B, C, H, W)` batch by `1/scale`.
pub fn downscale_batch(x: &Tensor, scale: usize) -> Result<Tensor> {
    if scale == 1 {
        return Ok(x.clone());
    }
    let s = x.shape();
    if s.len() != 4 || !s[2].is_multiple_of(scale) || !s[3].is_multiple_of(scale) {
        return Err(Error::Shape(format!("{s:?} is not divisible by scale {scale}")));
    }
    let (h, w) = (s[2] / scale, s[3] / scale);
    let images: Vec<Image> = x
        .axis_iter(Axis(0))
        .map(|img| {
            let data = img.to_owned().into_dimensionality::<ndarray::Ix3>().expect("4-d batch");
            Image::new(data).resize(h, w)
        })
        .collect();
    stack(&images)
}

impl HeapNetwork {
    pub fn new(spec: &HeapStageSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = ModelState::default();
        let k = spec.k();
        let fusion = spec.fusion_map();
        let mut pathways = Vec::with_capacity(k);
        for (j, p) in spec.pathways.iter().enumerate() {
            let name = format!("pathway{}", j + 1);
            let mut conv_norm = |shape: ConvShape, label: &str, state: &mut ModelState| {
                let conv = Conv2d::new(shape, &mut state.params, &format!("{name}.{label}"), &mut rng);
                let norm = state.add_norm(&format!("{name}.{label}.norm"), vec![shape.out_channels; k]);
                (conv, norm)
            };
            let stem = conv_norm(stem_shape(spec.in_channels, p.width), "stem", &mut state);
            let mut blocks = Vec::with_capacity(p.blocks);
            let mut cin = spec.fused_width(j);
            for b in 0..p.blocks {
                let (s1, s2, proj) = block_shapes(cin, p.width);
                blocks.push(BasicBlock {
                    conv1: conv_norm(s1, &format!("block{b}.conv1"), &mut state),
                    conv2: conv_norm(s2, &format!("block{b}.conv2"), &mut state),
                    proj: proj.map(|s| conv_norm(s, &format!("block{b}.proj"), &mut state)),
                });
                cin = p.width;
            }
            let mut downs = Vec::new();
            for &i in &fusion[j] {
                let wi = spec.pathways[i].width;
                let chain = (0..spec.down_steps(i, j))
                    .map(|s| {
                        let conv = Conv2d::new(
                            down_shape(wi),
                            &mut state.params,
                            &format!("{name}.down{}.{s}", i + 1),
                            &mut rng,
                        );
                        *state.params.value_mut(conv.weight) = averaging_kernel(wi);
                        state
                            .params
                            .value_mut(conv.bias.expect("downsample has bias"))
                            .fill(0.0);
                        conv
                    })
                    .collect();
                downs.push((i, chain));
            }
            let head = Linear::new(
                p.width,
                spec.num_classes,
                &mut state.params,
                &format!("head{}", j + 1),
                &mut rng,
            );
            pathways.push(Pathway {
                stem,
                downs,
                blocks,
                head,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            state,
            pathways,
        })
    }

    pub fn k(&self) -> usize {
        self.spec.k()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn conv_norm(
        &self,
        g: &mut Graph,
        (conv, norm): &(Conv2d, NormId),
        x: Var,
        level: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let h = conv.forward(g, &self.state.params, x)?;
        self.state.norm(g, *norm, h, level, ctx)
    }

    /// Forward of view level `level` (1-based): pathways `level..k` run on the
    /// view, heaviest first, and head `level` reads pathway `level`.
    pub fn forward_level(
        &self,
        g: &mut Graph,
        view: &Tensor,
        level: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Vec<PathwayFeatures>)> {
        let k = self.k();
        if level == 0 || level > k {
            return Err(Error::LevelOutOfRange { level, max: k });
        }
        let mut outs: Vec<Option<Var>> = vec![None; k];
        let mut features = Vec::new();
        for j in (level - 1..k).rev() {
            let p = &self.pathways[j];
            let x = g.constant(downscale_batch(view, self.spec.pathways[j].scale)?);
            let own = self.conv_norm(g, &p.stem, x, level, ctx)?;
            let own = g.relu(own);
            let own_hw = g.value(own).shape()[2..].to_vec();
            let mut parts = vec![own];
            for (i, chain) in &p.downs {
                let mut h = outs[*i].expect("heavier pathways run first");
                for conv in chain {
                    h = conv.forward(g, &self.state.params, h)?;
                }
                let hw = &g.value(h).shape()[2..];
                if hw != own_hw.as_slice() {
                    return Err(Error::Shape(format!(
                        "pathway {} downsampled to {hw:?}, pathway {} runs at {own_hw:?}",
                        i + 1,
                        j + 1
                    )));
                }
                parts.push(h);
            }
            if j + 1 == level && parts.len() > 1 {
                features.push(PathwayFeatures {
                    level,
                    pathways: parts.clone(),
                });
            }
            let mut h = if parts.len() == 1 {
                parts[0]
            } else {
                g.concat(&parts, 1)?
            };
            for b in &p.blocks {
                let r = self.conv_norm(g, &b.conv1, h, level, ctx)?;
                let r = g.relu(r);
                let r = self.conv_norm(g, &b.conv2, r, level, ctx)?;
                let skip = match &b.proj {
                    Some(cn) => self.conv_norm(g, cn, h, level, ctx)?,
                    None => h,
                };
                let sum = g.add(r, skip)?;
                h = g.relu(sum);
            }
            outs[j] = Some(h);
        }
        let pooled = g.global_avg_pool(outs[level - 1].expect("computed above"))?;
        let logits = self.pathways[level - 1].head.forward(g, &self.state.params, pooled)?;
        Ok((logits, features))
    }

    pub fn forward_train(&self, g: &mut Graph, views: &[Tensor], ctx: &mut ForwardCtx) -> Result<TrainOutput> {
        if views.len() != self.k() {
            return Err(Error::InvalidPlan(format!(
                "{} view levels for {} pathways",
                views.len(),
                self.k()
            )));
        }
        let mut logits = Vec::with_capacity(views.len());
        let mut features = Vec::new();
        for (j, v) in views.iter().enumerate() {
            let (l, f) = self.forward_level(g, v, j + 1, ctx)?;
            logits.push(l);
            features.extend(f);
        }
        Ok(TrainOutput { logits, features })
    }

    /// Main-head class probabilities for a `(B, C, H, W)` batch.
    pub fn infer_batch(&self, x: &Tensor) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let (logits, _) = self.forward_level(&mut g, x, 1, &mut ctx)?;
        softmax_rows(g.value(logits))
    }

    pub fn infer(&self, img: &Image) -> Result<Vec<f64>> {
        let x = stack(std::slice::from_ref(img))?;
        Ok(self.infer_batch(&x)?.row(0).to_vec())
    }

    pub fn head_params(&self, level: usize) -> Vec<ParamId> {
        self.pathways[level - 1].head.param_ids().to_vec()
    }

    /// Every parameter owned by pathway `level` (stem, downsampling into it,
    /// blocks, norms and head).
    pub fn pathway_params(&self, level: usize) -> Vec<ParamId> {
        let p = &self.pathways[level - 1];
        let norms = &self.state.norms;
        let mut ids = Vec::new();
        let push_cn = |(c, n): &(Conv2d, NormId), ids: &mut Vec<ParamId>| {
            ids.extend(c.param_ids());
            ids.push(norms.get(*n).gamma);
            ids.push(norms.get(*n).beta);
        };
        push_cn(&p.stem, &mut ids);
        for b in &p.blocks {
            push_cn(&b.conv1, &mut ids);
            push_cn(&b.conv2, &mut ids);
            if let Some(cn) = &b.proj {
                push_cn(cn, &mut ids);
            }
        }
        for (_, chain) in &p.downs {
            for c in chain {
                ids.extend(c.param_ids());
            }
        }
        ids.extend(p.head.param_ids());
        ids
    }

    /// Parameters of the downsampling chains feeding pathway `level`.
    pub fn fusion_params(&self, level: usize) -> Vec<ParamId> {
        self.pathways[level - 1]
            .downs
            .iter()
            .flat_map(|(_, chain)| chain.iter().flat_map(|c| c.param_ids()))
            .collect()
    }

    pub fn param_count(&self) -> u64 {
        self.state.params.scalar_count() as u64
    }
}
