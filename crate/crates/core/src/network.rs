//! The cascaded illuminant estimator.
//!
//! A SqueezeNet-style backbone and an illuminant head are shared by all
//! stages; each stage owns its own attention modules (ISAMs), inserted before
//! every max-pool of the backbone except the first. Stage `i` sees the input
//! corrected by the cumulative estimate of the stages before it:
//!
//! ```text
//! ℓ'_0 = (1,1,1)
//! e_i  = head(backbone_i(I / ℓ'_{i-1}))
//! ℓ'_i = normalize(ℓ'_{i-1} ⊙ e_i)
//! ```
//!
//! Parameters live in one ordered store with dotted names (`backbone.`,
//! `head.`, `isam.{stage}.{site}.`) and are bound into a [`Graph`] once per
//! forward pass, so every stage reads the very same nodes.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::color::LinearImage;
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, NodeId, Tensor};

/// Stage estimates below this are rejected: the next stage divides by them.
pub const MIN_STAGE_COMPONENT: f64 = 1e-6;

/// Summed confidence at or below this counts as "no confidence" in the FC4
/// head.
const CONF_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneScale {
    /// Stem conv 3→16 and two fire blocks, 32 output channels.
    Toy,
    /// The first twelve layers of SqueezeNet 1.1, 512 output channels.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Lightweight,
    Fc4Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub scale: BackboneScale,
    pub head: HeadKind,
    pub stages: usize,
    /// Channel reduction ratio inside the ISAM channel gate.
    pub isam_reduction: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { scale: BackboneScale::Toy, head: HeadKind::Lightweight, stages: 3, isam_reduction: 4, init_seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::invalid("a cascade needs at least one stage"));
        }
        let ch = self.scale.isam_channels();
        if self.isam_reduction == 0 || ch.iter().any(|c| c % self.isam_reduction != 0) {
            return Err(Error::invalid(format!(
                "isam_reduction {} must divide the attention channel counts {ch:?}",
                self.isam_reduction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Layer {
    /// Conv + relu with TF-style "same" padding.
    Conv { name: &'static str, cin: usize, cout: usize, k: usize, stride: usize },
    Fire { name: &'static str, cin: usize, squeeze: usize, expand: usize },
    Isam { site: usize, channels: usize },
    Pool,
}

impl BackboneScale {
    fn plan(self) -> Vec<Layer> {
        use Layer::*;
        match self {
            BackboneScale::Toy => vec![
                Conv { name: "stem", cin: 3, cout: 16, k: 3, stride: 2 },
                Pool,
                Fire { name: "fire1", cin: 16, squeeze: 8, expand: 16 },
                Isam { site: 0, channels: 32 },
                Pool,
                Fire { name: "fire2", cin: 32, squeeze: 8, expand: 16 },
                Isam { site: 1, channels: 32 },
                Pool,
            ],
            BackboneScale::Paper => vec![
                Conv { name: "conv1", cin: 3, cout: 64, k: 3, stride: 2 },
                Pool,
                Fire { name: "fire2", cin: 64, squeeze: 16, expand: 64 },
                Fire { name: "fire3", cin: 128, squeeze: 16, expand: 64 },
                Isam { site: 0, channels: 128 },
                Pool,
                Fire { name: "fire4", cin: 128, squeeze: 32, expand: 128 },
                Fire { name: "fire5", cin: 256, squeeze: 32, expand: 128 },
                Isam { site: 1, channels: 256 },
                Pool,
                Fire { name: "fire6", cin: 256, squeeze: 48, expand: 192 },
                Fire { name: "fire7", cin: 384, squeeze: 48, expand: 192 },
                Fire { name: "fire8", cin: 384, squeeze: 64, expand: 256 },
            ],
        }
    }

    pub fn feature_channels(self) -> usize {
        match self {
            BackboneScale::Toy => 32,
            BackboneScale::Paper => 512,
        }
    }

    /// Channel count at each ISAM site.
    pub fn isam_channels(self) -> Vec<usize> {
        self.plan()
            .iter()
            .filter_map(|l| match l {
                Layer::Isam { channels, .. } => Some(*channels),
                _ => None,
            })
            .collect()
    }
}

/// Name, shape and fan-in of one parameter tensor.
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize) {
    out.push(ParamSpec { name: format!("{prefix}.w"), shape: vec![cout, cin, k, k], fan_in: cin * k * k });
    out.push(ParamSpec { name: format!("{prefix}.b"), shape: vec![cout], fan_in: 0 });
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, fin: usize, fout: usize) {
    out.push(ParamSpec { name: format!("{prefix}.w"), shape: vec![fin, fout], fan_in: fin });
    out.push(ParamSpec { name: format!("{prefix}.b"), shape: vec![fout], fan_in: 0 });
}

fn isam_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, r: usize) {
    linear_specs(out, &format!("{prefix}.fc1"), c, c / r);
    linear_specs(out, &format!("{prefix}.fc2"), c / r, c);
    conv_specs(out, &format!("{prefix}.spatial"), 2, 1, 7);
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    for layer in cfg.scale.plan() {
        match layer {
            Layer::Conv { name, cin, cout, k, .. } => conv_specs(&mut s, &format!("backbone.{name}"), cin, cout, k),
            Layer::Fire { name, cin, squeeze, expand } => {
                conv_specs(&mut s, &format!("backbone.{name}.squeeze"), cin, squeeze, 1);
                conv_specs(&mut s, &format!("backbone.{name}.expand1"), squeeze, expand, 1);
                conv_specs(&mut s, &format!("backbone.{name}.expand3"), squeeze, expand, 3);
            }
            Layer::Isam { .. } | Layer::Pool => {}
        }
    }
    let ch = cfg.scale.feature_channels();
    match cfg.head {
        HeadKind::Lightweight => {
            let (c4, c8) = (ch / 4, ch / 8);
            conv_specs(&mut s, "head.local.reduce", ch, c4, 1);
            conv_specs(&mut s, "head.local.nl.theta", c4, c8, 1);
            conv_specs(&mut s, "head.local.nl.phi", c4, c8, 1);
            conv_specs(&mut s, "head.local.nl.g", c4, c8, 1);
            conv_specs(&mut s, "head.local.nl.out", c8, c4, 1);
            conv_specs(&mut s, "head.local.out", c4, 3, 1);
            linear_specs(&mut s, "head.global.fc1", ch, c8);
            linear_specs(&mut s, "head.global.fc2", c8, 3);
        }
        HeadKind::Fc4Baseline => {
            conv_specs(&mut s, "head.conv6", ch, 64, 6);
            conv_specs(&mut s, "head.conv7", 64, 4, 1);
        }
    }
    for stage in 0..cfg.stages {
        for (site, c) in cfg.scale.isam_channels().into_iter().enumerate() {
            isam_specs(&mut s, &format!("isam.{stage}.{site}"), c, cfg.isam_reduction);
        }
    }
    s
}

/// Parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub head: usize,
    /// One stage's ISAM set.
    pub isam_per_stage: usize,
    pub isam_total: usize,
    pub total: usize,
}

pub fn param_counts(cfg: &ModelConfig) -> ParamCounts {
    let count = |prefix: &str| -> usize {
        param_specs(cfg)
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    };
    let (backbone, head, isam_per_stage, isam_total) = (count("backbone."), count("head."), count("isam.0."), count("isam."));
    ParamCounts { backbone, head, isam_per_stage, isam_total, total: backbone + head + isam_total }
}

/// Per-stage outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct CascadeOutput {
    /// Cumulative estimates `ℓ'_1..ℓ'_M`, each `[N, 3]`.
    pub stages: Vec<NodeId>,
    /// Samples whose FC4 confidence map was all zero and fell back to
    /// uniform weights.
    pub conf_fallbacks: usize,
}

#[derive(Debug, Clone)]
pub struct CascadeModel {
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl CascadeModel {
    /// Fresh model with He-uniform weights and zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.init_seed);
        let params = param_specs(&config)
            .into_iter()
            .map(|s| {
                let t = init_tensor(&mut rng, &s);
                (s.name, t)
            })
            .collect();
        Ok(Self::from_params(config, params))
    }

    fn from_params(config: ModelConfig, params: Vec<(String, Tensor)>) -> Self {
        let index = params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Self { config, params, index }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].1)
    }

    pub fn counts(&self) -> ParamCounts {
        param_counts(&self.config)
    }

    /// Adds every parameter to `g` (as trainable leaves when `trainable`),
    /// in store order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<NodeId>> {
        self.params
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Runs all stages on `image` (`[N, 3, H, W]`, gamma-encoded) using the
    /// parameter nodes returned by [`CascadeModel::bind`].
    pub fn forward(&self, g: &mut Graph, ids: &[NodeId], image: NodeId) -> Result<CascadeOutput> {
        self.forward_stages(g, ids, image, self.config.stages)
    }

    /// Like [`CascadeModel::forward`] but stops after `stages` stages.
    pub fn forward_stages(&self, g: &mut Graph, ids: &[NodeId], image: NodeId, stages: usize) -> Result<CascadeOutput> {
        if ids.len() != self.params.len() {
            return Err(Error::invalid(format!("{} parameter nodes bound, model has {}", ids.len(), self.params.len())));
        }
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("cascade input must be [N,3,H,W], got {s:?}")));
        }
        let n = s[0];
        let mut ctx = Ctx { g, ids, index: &self.index, conf_fallbacks: 0 };
        let mut gains: Option<NodeId> = None;
        let mut out = Vec::with_capacity(stages);
        for stage in 0..stages.min(self.config.stages) {
            let input = match gains {
                None => image,
                Some(l) => {
                    let l4 = ctx.g.reshape(l, &[n, 3, 1, 1])?;
                    ctx.g.div(image, l4)?
                }
            };
            let feats = backbone(&mut ctx, self.config.scale, stage, input)?;
            let e = match self.config.head {
                HeadKind::Lightweight => lightweight_head(&mut ctx, feats)?,
                HeadKind::Fc4Baseline => fc4_head(&mut ctx, feats)?,
            };
            if let Some(v) = ctx.g.value(e).data().iter().find(|v| **v < MIN_STAGE_COMPONENT) {
                return Err(Error::NumericFault(format!("stage {} estimate component {v:e} below {MIN_STAGE_COMPONENT:e}", stage + 1)));
            }
            // ℓ'_0 is all ones, so the first cumulative estimate is e_1 itself.
            let next = match gains {
                None => e,
                Some(l) => {
                    let p = ctx.g.mul(l, e)?;
                    ctx.g.l2_normalize(p, 1)?
                }
            };
            out.push(next);
            gains = Some(next);
        }
        Ok(CascadeOutput { stages: out, conf_fallbacks: ctx.conf_fallbacks })
    }

    /// Per-stage estimates for a batch, without gradients.
    pub fn predict(&self, batch: Tensor) -> Result<Vec<Vec<[f64; 3]>>> {
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false)?;
        let image = g.constant(batch)?;
        let out = self.forward(&mut g, &ids, image)?;
        Ok(out.stages.iter().map(|&id| rows3(g.value(id))).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.params)
    }

    /// Loads a checkpoint written by [`CascadeModel::save`], inferring the
    /// configuration from tensor names and shapes.
    pub fn load(path: &Path) -> Result<Self> {
        let tensors = read_checkpoint(path)?;
        let config = infer_config(&tensors)?;
        let mut model = Self::new(config)?;
        model.load_params(tensors)?;
        Ok(model)
    }

    /// Replaces every parameter; names and shapes must match exactly.
    pub fn load_params(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in tensors {
            let own = self
                .param_mut(&name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("unexpected tensor `{name}`")))?;
            if own.shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{name}`: checkpoint shape {:?}, model {:?}",
                    t.shape(),
                    own.shape()
                )));
            }
            *own = t;
        }
        Ok(())
    }
}

/// Layers that emit the illuminant start near zero so an untrained stage
/// predicts roughly white instead of saturating softplus/sigmoid.
const OUTPUT_LAYERS: [&str; 3] = ["head.local.out.w", "head.global.fc2.w", "head.conv7.w"];

fn init_tensor(rng: &mut Rng, spec: &ParamSpec) -> Tensor {
    let len = spec.shape.iter().product();
    if spec.name == "head.conv7.b" {
        // Positive bias keeps the relu'd FC4 estimates and confidences alive.
        return Tensor::full(&spec.shape, 1.0);
    }
    if spec.fan_in == 0 {
        return Tensor::zeros(&spec.shape);
    }
    let gain = if OUTPUT_LAYERS.contains(&spec.name.as_str()) { 0.01 } else { 1.0 };
    let a = gain * (6.0 / spec.fan_in as f64).sqrt();
    let data = (0..len).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(spec.shape.clone(), data).expect("spec shape matches data")
}

fn infer_config(tensors: &[(String, Tensor)]) -> Result<ModelConfig> {
    let find = |n: &str| tensors.iter().find(|(name, _)| name == n).map(|(_, t)| t);
    let scale = if find("backbone.stem.w").is_some() {
        BackboneScale::Toy
    } else if find("backbone.conv1.w").is_some() {
        BackboneScale::Paper
    } else {
        return Err(Error::CheckpointMismatch("no recognizable backbone stem".into()));
    };
    let head = if find("head.conv6.w").is_some() { HeadKind::Fc4Baseline } else { HeadKind::Lightweight };
    let stages = tensors
        .iter()
        .filter_map(|(n, _)| n.strip_prefix("isam.")?.split('.').next()?.parse::<usize>().ok())
        .max()
        .map_or(0, |s| s + 1);
    let fc1 = find("isam.0.0.fc1.w").ok_or_else(|| Error::CheckpointMismatch("missing isam.0.0.fc1.w".into()))?;
    let (c, hidden) = (fc1.shape()[0], fc1.shape()[1]);
    if hidden == 0 || c % hidden != 0 {
        return Err(Error::CheckpointMismatch(format!("isam.0.0.fc1.w has shape {:?}", fc1.shape())));
    }
    Ok(ModelConfig { scale, head, stages, isam_reduction: c / hidden, init_seed: 0 })
}

/// Rows of an `[N, 3]` tensor.
pub fn rows3(t: &Tensor) -> Vec<[f64; 3]> {
    t.data().chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect()
}

/// Stacks equally sized images into an `[N, 3, H, W]` tensor.
pub fn image_batch(images: &[&LinearImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if (img.width(), img.height()) != (w, h) {
            return Err(Error::Shape(format!("batch mixes {w}x{h} and {}x{}", img.width(), img.height())));
        }
        for c in 0..3 {
            data.extend(img.pixels().iter().map(|p| p[c] as f64));
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

struct Ctx<'a> {
    g: &'a mut Graph,
    ids: &'a [NodeId],
    index: &'a HashMap<String, usize>,
    conf_fallbacks: usize,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> Result<NodeId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::invalid(format!("model has no parameter `{name}`")))
    }

    fn conv(&mut self, x: NodeId, prefix: &str, stride: usize, pad: usize) -> Result<NodeId> {
        let (w, b) = (self.p(&format!("{prefix}.w"))?, self.p(&format!("{prefix}.b"))?);
        self.g.conv2d(x, w, Some(b), stride, pad)
    }

    fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let (w, b) = (self.p(&format!("{prefix}.w"))?, self.p(&format!("{prefix}.b"))?);
        self.g.linear(x, w, Some(b))
    }

    /// Zero-pads `x` on the spatial axes (top, bottom, left, right).
    fn pad(&mut self, x: NodeId, top: usize, bottom: usize, left: usize, right: usize) -> Result<NodeId> {
        let mut x = x;
        for (axis, before, after) in [(2, top, bottom), (3, left, right)] {
            if before + after == 0 {
                continue;
            }
            let mut parts = Vec::new();
            let zeros = |g: &mut Graph, len: usize, x: NodeId| -> Result<NodeId> {
                let mut s = g.shape(x).to_vec();
                s[axis] = len;
                g.constant(Tensor::zeros(&s))
            };
            if before > 0 {
                parts.push(zeros(self.g, before, x)?);
            }
            parts.push(x);
            if after > 0 {
                parts.push(zeros(self.g, after, x)?);
            }
            x = self.g.concat(&parts, axis)?;
        }
        Ok(x)
    }
}

/// Output extent `ceil(len / stride)`, padding split with the extra pixel at
/// the end.
fn same_padding(len: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(len);
    (total / 2, total - total / 2)
}

fn backbone(ctx: &mut Ctx, scale: BackboneScale, stage: usize, x: NodeId) -> Result<NodeId> {
    let mut x = x;
    for layer in scale.plan() {
        x = match layer {
            Layer::Conv { name, k, stride, .. } => {
                let s = ctx.g.shape(x).to_vec();
                let (t, b) = same_padding(s[2], k, stride);
                let (l, r) = same_padding(s[3], k, stride);
                let padded = ctx.pad(x, t, b, l, r)?;
                let y = ctx.conv(padded, &format!("backbone.{name}"), stride, 0)?;
                ctx.g.relu(y)?
            }
            Layer::Fire { name, .. } => {
                let s = ctx.conv(x, &format!("backbone.{name}.squeeze"), 1, 0)?;
                let s = ctx.g.relu(s)?;
                let e1 = ctx.conv(s, &format!("backbone.{name}.expand1"), 1, 0)?;
                let e1 = ctx.g.relu(e1)?;
                let e3 = ctx.conv(s, &format!("backbone.{name}.expand3"), 1, 1)?;
                let e3 = ctx.g.relu(e3)?;
                ctx.g.concat(&[e1, e3], 1)?
            }
            Layer::Isam { site, .. } => isam(ctx, &format!("isam.{stage}.{site}"), x)?,
            Layer::Pool => {
                let s = ctx.g.shape(x);
                if s[2] < 2 || s[3] < 2 {
                    return Err(Error::Shape(format!("input too small: feature map {:?} cannot be pooled", s)));
                }
                ctx.g.maxpool2d(x, 2, 2)?
            }
        };
    }
    Ok(x)
}

/// Channel gate from shared FCs over max- and average-pooled descriptors,
/// then a spatial gate from a 7×7 conv over channel max and mean maps.
fn isam(ctx: &mut Ctx, prefix: &str, x: NodeId) -> Result<NodeId> {
    let s = ctx.g.shape(x).to_vec();
    let (n, c) = (s[0], s[1]);
    let want = ctx.g.shape(ctx.p(&format!("{prefix}.fc1.w"))?)[0];
    if want != c {
        return Err(Error::Shape(format!("{prefix}: expects {want} channels, got {c}")));
    }
    fn branch(ctx: &mut Ctx, prefix: &str, pooled: NodeId, n: usize, c: usize) -> Result<NodeId> {
        let v = ctx.g.reshape(pooled, &[n, c])?;
        let h = ctx.linear(v, &format!("{prefix}.fc1"))?;
        let h = ctx.g.relu(h)?;
        ctx.linear(h, &format!("{prefix}.fc2"))
    }
    let gmp = ctx.g.global_maxpool(x)?;
    let gap = ctx.g.global_avgpool(x)?;
    let a = branch(ctx, prefix, gmp, n, c)?;
    let b = branch(ctx, prefix, gap, n, c)?;
    let sum = ctx.g.add(a, b)?;
    let gate = ctx.g.sigmoid(sum)?;
    let gate = ctx.g.reshape(gate, &[n, c, 1, 1])?;
    let x1 = ctx.g.mul(x, gate)?;

    let mx = ctx.g.max_axis(x1, 1)?;
    let mean = ctx.g.mean_axis(x1, 1)?;
    let maps = ctx.g.concat(&[mx, mean], 1)?;
    let sp = ctx.conv(maps, &format!("{prefix}.spatial"), 1, 3)?;
    let sgate = ctx.g.sigmoid(sp)?;
    ctx.g.mul(x1, sgate)
}

/// Channel-gated, spatially gated output of one ISAM given explicit
/// parameters; exposed for tests and diagnostics.
pub fn isam_forward(g: &mut Graph, x: NodeId, params: &IsamParams) -> Result<NodeId> {
    let names = ["fc1.w", "fc1.b", "fc2.w", "fc2.b", "spatial.w", "spatial.b"];
    let ids = [params.fc1_w, params.fc1_b, params.fc2_w, params.fc2_b, params.spatial_w, params.spatial_b];
    let index: HashMap<String, usize> = names.iter().enumerate().map(|(i, n)| (format!("m.{n}"), i)).collect();
    let mut ctx = Ctx { g, ids: &ids, index: &index, conf_fallbacks: 0 };
    isam(&mut ctx, "m", x)
}

/// Graph nodes of one ISAM's parameters.
#[derive(Debug, Clone, Copy)]
pub struct IsamParams {
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
    pub spatial_w: NodeId,
    pub spatial_b: NodeId,
}

fn lightweight_head(ctx: &mut Ctx, f: NodeId) -> Result<NodeId> {
    let s = ctx.g.shape(f).to_vec();
    let n = s[0];
    if s[2] < 2 || s[3] < 2 {
        return Err(Error::Shape(format!("lightweight head needs spatial extent >= 2, got {}x{}", s[2], s[3])));
    }
    // Local branch.
    let pooled = ctx.g.maxpool2d(f, 2, 2)?;
    let z = ctx.conv(pooled, "head.local.reduce", 1, 0)?;
    let z = ctx.g.relu(z)?;
    let z = non_local(ctx, z)?;
    let local = ctx.conv(z, "head.local.out", 1, 0)?;
    let local = ctx.g.global_avgpool(local)?;
    let local = ctx.g.reshape(local, &[n, 3])?;
    let local = ctx.g.softplus(local)?;
    // Global branch.
    let v = ctx.g.global_avgpool(f)?;
    let v = ctx.g.reshape(v, &[n, s[1]])?;
    let h = ctx.linear(v, "head.global.fc1")?;
    let h = ctx.g.relu(h)?;
    let h = ctx.linear(h, "head.global.fc2")?;
    let global = ctx.g.sigmoid(h)?;

    let prod = ctx.g.mul(local, global)?;
    ctx.g.l2_normalize(prod, 1)
}

/// Embedded-Gaussian non-local block with a residual connection.
fn non_local(ctx: &mut Ctx, x: NodeId) -> Result<NodeId> {
    let s = ctx.g.shape(x).to_vec();
    let (n, positions) = (s[0], s[2] * s[3]);
    let embed = |ctx: &mut Ctx, name: &str| -> Result<NodeId> {
        let y = ctx.conv(x, &format!("head.local.nl.{name}"), 1, 0)?;
        let inner = ctx.g.shape(y)[1];
        ctx.g.reshape(y, &[n, inner, positions])
    };
    let theta = embed(ctx, "theta")?;
    let phi = embed(ctx, "phi")?;
    let gv = embed(ctx, "g")?;
    let inner = ctx.g.shape(theta)[1];
    let theta_t = ctx.g.permute(theta, &[0, 2, 1])?;
    let affinity = ctx.g.matmul(theta_t, phi)?;
    let attn = ctx.g.softmax(affinity)?;
    let g_t = ctx.g.permute(gv, &[0, 2, 1])?;
    let y = ctx.g.matmul(attn, g_t)?;
    let y = ctx.g.permute(y, &[0, 2, 1])?;
    let y = ctx.g.reshape(y, &[n, inner, s[2], s[3]])?;
    let wz = ctx.conv(y, "head.local.nl.out", 1, 0)?;
    ctx.g.add(x, wz)
}

/// FC4-style head: per-location RGB estimates pooled with learned
/// confidences.
fn fc4_head(ctx: &mut Ctx, f: NodeId) -> Result<NodeId> {
    let y = ctx.conv(f, "head.conv6", 1, 3)?;
    let y = ctx.g.relu(y)?;
    let y = ctx.conv(y, "head.conv7", 1, 0)?;
    let y = ctx.g.relu(y)?;
    let rgb = ctx.g.slice(y, 1, 0, 3)?;
    let conf = ctx.g.slice(y, 1, 3, 1)?;
    confidence_pool(ctx.g, rgb, conf, &mut ctx.conf_fallbacks)
}

/// `normalize(Σ conf·rgb / Σ conf)` per sample over all locations. Samples
/// with no confidence anywhere get uniform weights instead.
pub fn confidence_pool(g: &mut Graph, rgb: NodeId, conf: NodeId, fallbacks: &mut usize) -> Result<NodeId> {
    let s = g.shape(rgb).to_vec();
    let (n, positions) = (s[0], s[2] * s[3]);
    let sums: Vec<f64> = g.value(conf).data().chunks(positions).map(|c| c.iter().sum()).collect();
    let dead: Vec<f64> = sums.iter().map(|&v| if v <= CONF_EPS { 1.0 } else { 0.0 }).collect();
    let conf = if dead.iter().any(|&d| d > 0.0) {
        *fallbacks += dead.iter().filter(|&&d| d > 0.0).count();
        let shift = g.constant(Tensor::new(vec![n, 1, 1, 1], dead)?)?;
        g.add(conf, shift)?
    } else {
        conf
    };
    let weighted = g.mul(rgb, conf)?;
    let weighted = g.reshape(weighted, &[n, 3, positions])?;
    let num = g.sum_axis(weighted, 2)?;
    let num = g.reshape(num, &[n, 3])?;
    let c = g.reshape(conf, &[n, 1, positions])?;
    let den = g.sum_axis(c, 2)?;
    let den = g.reshape(den, &[n, 1])?;
    let est = g.div(num, den)?;
    g.l2_normalize(est, 1)
}
