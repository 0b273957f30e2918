//! Plain (single-resolution) patch-token backbones.
//!
//! Both teacher and student share one layout: linear patch embedding,
//! optional class token at index 0, learnable positional embedding, then
//! `num_blocks` pre-norm residual blocks alternating a token mixer with a
//! GELU channel mixer. Only the token mixer differs between the two.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::mask::MaskSpec;
use crate::error::{Error, Result};
use crate::mixers::{self, normal_tensor, AttentionParams, Mamba2Params, INIT_STD};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Attention,
    Mamba2,
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MixerKind::Attention => "attention",
            MixerKind::Mamba2 => "mamba2",
        })
    }
}

impl std::str::FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(MixerKind::Attention),
            "mamba2" => Ok(MixerKind::Mamba2),
            other => Err(Error::Config(format!("unknown mixer kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub num_blocks: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub mixer: MixerKind,
    pub use_class_token: bool,
}

impl ModelConfig {
    /// ViT-Base/16 at 224 px.
    pub fn vit_base() -> Self {
        ModelConfig {
            embed_dim: 768,
            mlp_dim: 3072,
            num_blocks: 12,
            patch_size: 16,
            image_size: 224,
            channels: 3,
            mixer: MixerKind::Attention,
            use_class_token: true,
        }
    }

    /// Adventurer-Base/16 at 224 px.
    pub fn adventurer_base() -> Self {
        ModelConfig {
            mlp_dim: 1920,
            mixer: MixerKind::Mamba2,
            ..Self::vit_base()
        }
    }

    /// Desk-scale teacher: 32 px images, 4 px patches, 64 channels, 4 blocks.
    pub fn toy_teacher() -> Self {
        ModelConfig {
            embed_dim: 64,
            mlp_dim: 256,
            num_blocks: 4,
            patch_size: 4,
            image_size: 32,
            channels: 3,
            mixer: MixerKind::Attention,
            use_class_token: true,
        }
    }

    /// Desk-scale student; MLP ratio 2.5 as in the Adventurer family.
    pub fn toy_student() -> Self {
        ModelConfig {
            mlp_dim: 160,
            mixer: MixerKind::Mamba2,
            ..Self::toy_teacher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.mlp_dim == 0 || self.patch_size == 0 || self.channels == 0 {
            return Err(Error::Config(format!("zero-sized dimension in {self:?}")));
        }
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let side = self.image_size / self.patch_size;
        (side, side)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Token count including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + usize::from(self.use_class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Row of patch `i` in the token sequence.
    pub fn token_index(&self, patch: usize) -> usize {
        patch + usize::from(self.use_class_token)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer<T = Tensor> {
    Attention(AttentionParams<T>),
    Mamba2(Mamba2Params<T>),
}

impl<T> Mixer<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Mixer<U> {
        match self {
            Mixer::Attention(p) => Mixer::Attention(p.map(prefix, f)),
            Mixer::Mamba2(p) => Mixer::Mamba2(p.map(prefix, f)),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        match self {
            Mixer::Attention(p) => p.for_each_mut(prefix, f),
            Mixer::Mamba2(p) => p.for_each_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = Tensor> {
    pub norm1_gain: T,
    pub norm1_bias: T,
    pub mixer: Mixer<T>,
    pub norm2_gain: T,
    pub norm2_bias: T,
    pub fc1_w: T,
    pub fc1_b: T,
    pub fc2_w: T,
    pub fc2_b: T,
}

impl Block {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, h) = (cfg.embed_dim, cfg.mlp_dim);
        let mixer = match cfg.mixer {
            MixerKind::Attention => Mixer::Attention(AttentionParams::init(d, rng)),
            MixerKind::Mamba2 => Mixer::Mamba2(Mamba2Params::init(d, rng)),
        };
        Block {
            norm1_gain: Tensor::from_parts(vec![d], vec![1.0; d]),
            norm1_bias: Tensor::zeros(&[d]),
            mixer,
            norm2_gain: Tensor::from_parts(vec![d], vec![1.0; d]),
            norm2_bias: Tensor::zeros(&[d]),
            fc1_w: normal_tensor(rng, &[d, h], INIT_STD),
            fc1_b: Tensor::zeros(&[h]),
            fc2_w: normal_tensor(rng, &[h, d], INIT_STD),
            fc2_b: Tensor::zeros(&[d]),
        }
    }
}

impl<T> Block<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Block<U> {
        Block {
            norm1_gain: f(&format!("{prefix}.norm1_gain"), &self.norm1_gain),
            norm1_bias: f(&format!("{prefix}.norm1_bias"), &self.norm1_bias),
            mixer: self.mixer.map(&format!("{prefix}.mixer"), f),
            norm2_gain: f(&format!("{prefix}.norm2_gain"), &self.norm2_gain),
            norm2_bias: f(&format!("{prefix}.norm2_bias"), &self.norm2_bias),
            fc1_w: f(&format!("{prefix}.fc1_w"), &self.fc1_w),
            fc1_b: f(&format!("{prefix}.fc1_b"), &self.fc1_b),
            fc2_w: f(&format!("{prefix}.fc2_w"), &self.fc2_w),
            fc2_b: f(&format!("{prefix}.fc2_b"), &self.fc2_b),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        f(&format!("{prefix}.norm1_gain"), &mut self.norm1_gain);
        f(&format!("{prefix}.norm1_bias"), &mut self.norm1_bias);
        self.mixer.for_each_mut(&format!("{prefix}.mixer"), f);
        f(&format!("{prefix}.norm2_gain"), &mut self.norm2_gain);
        f(&format!("{prefix}.norm2_bias"), &mut self.norm2_bias);
        f(&format!("{prefix}.fc1_w"), &mut self.fc1_w);
        f(&format!("{prefix}.fc1_b"), &mut self.fc1_b);
        f(&format!("{prefix}.fc2_w"), &mut self.fc2_w);
        f(&format!("{prefix}.fc2_b"), &mut self.fc2_b);
    }
}

impl Block<Var> {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.layer_norm_rows(x)?;
        let h = g.mul_row(h, self.norm1_gain)?;
        let h = g.add_row(h, self.norm1_bias)?;
        let m = match &self.mixer {
            Mixer::Attention(p) => mixers::attention(g, h, p)?,
            Mixer::Mamba2(p) => mixers::mamba2(g, h, p)?,
        };
        let x = g.add(x, m)?;
        let h = g.layer_norm_rows(x)?;
        let h = g.mul_row(h, self.norm2_gain)?;
        let h = g.add_row(h, self.norm2_bias)?;
        let h = g.matmul(h, self.fc1_w)?;
        let h = g.add_row(h, self.fc1_b)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, self.fc2_w)?;
        let h = g.add_row(h, self.fc2_b)?;
        g.add(x, h)
    }
}

/// Student-only parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentExtras<T = Tensor> {
    /// Shared embedding substituted at every masked patch.
    pub mask_token: T,
    /// `d_student × d_teacher` map into the teacher's feature space.
    pub projection: T,
}

impl<T> StudentExtras<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> StudentExtras<U> {
        StudentExtras {
            mask_token: f("mask_token", &self.mask_token),
            projection: f("projection", &self.projection),
        }
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("mask_token", &mut self.mask_token);
        f("projection", &mut self.projection);
    }
}

/// A backbone whose parameters are either concrete tensors or graph handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = Tensor> {
    pub config: ModelConfig,
    pub embed_w: T,
    pub embed_b: T,
    pub cls_token: Option<T>,
    pub pos_embed: T,
    pub blocks: Vec<Block<T>>,
    pub extras: Option<StudentExtras<T>>,
}

/// Final feature map plus the requested intermediate block outputs.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T = Var> {
    pub output: T,
    pub stages: Vec<T>,
}

impl Model {
    fn init(config: &ModelConfig, teacher_dim: Option<usize>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let embed_w = normal_tensor(rng, &[config.patch_dim(), d], INIT_STD);
        let cls_token = config
            .use_class_token
            .then(|| normal_tensor(rng, &[1, d], INIT_STD));
        let pos_embed = normal_tensor(rng, &[config.seq_len(), d], INIT_STD);
        let blocks = (0..config.num_blocks)
            .map(|_| Block::init(config, rng))
            .collect();
        let extras = teacher_dim.map(|td| StudentExtras {
            mask_token: normal_tensor(rng, &[d], INIT_STD),
            projection: normal_tensor(rng, &[d, td], INIT_STD),
        });
        Ok(Model {
            config: config.clone(),
            embed_w,
            embed_b: Tensor::zeros(&[d]),
            cls_token,
            pos_embed,
            blocks,
            extras,
        })
    }

    pub fn teacher(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::init(config, None, rng)
    }

    /// A model carrying a mask token and a projection to `teacher_dim`.
    pub fn student(config: &ModelConfig, teacher_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::init(config, Some(teacher_dim), rng)
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }

    /// Registers every parameter on `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Model<Var> {
        self.map(&mut |_, t| {
            let t = t.detached();
            if trainable {
                g.param(t)
            } else {
                g.constant(t)
            }
        })
    }

    /// Forward pass without recording gradients.
    pub fn forward_values(
        &self,
        patches: &Tensor,
        mask: Option<&MaskSpec>,
        taps: &[usize],
    ) -> Result<ForwardOutput<Tensor>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(patches.detached());
        let out = bound.forward(&mut g, x, mask, taps)?;
        // Stages may alias the output, so copy rather than take.
        Ok(ForwardOutput {
            stages: out.stages.iter().map(|&s| g.value(s).detached()).collect(),
            output: g.take(out.output),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&Checkpoint::from_model(self))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        ckpt.into_model()
    }
}

impl<T> Model<T> {
    /// Applies `f` to every parameter with its dotted path, in a fixed order.
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> Model<U> {
        Model {
            config: self.config.clone(),
            embed_w: f("embed_w", &self.embed_w),
            embed_b: f("embed_b", &self.embed_b),
            cls_token: self.cls_token.as_ref().map(|t| f("cls_token", t)),
            pos_embed: f("pos_embed", &self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}"), f))
                .collect(),
            extras: self.extras.as_ref().map(|e| e.map(f)),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&str, &T)) {
        self.map(&mut |name, t| f(name, t));
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("embed_w", &mut self.embed_w);
        f("embed_b", &mut self.embed_b);
        if let Some(t) = &mut self.cls_token {
            f("cls_token", t);
        }
        f("pos_embed", &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("blocks.{i}"), f);
        }
        if let Some(e) = &mut self.extras {
            e.for_each_mut(f);
        }
    }
}

impl Model<Var> {
    /// Runs the backbone on `patches[L_patch × patch_dim]`.
    ///
    /// With a mask, the patch embeddings at masked positions are replaced by
    /// the mask token before the class token and positional embedding are
    /// added. `taps` lists 1-based block counts whose outputs are returned as
    /// stage features, in the given order.
    pub fn forward(
        &self,
        g: &mut Graph,
        patches: Var,
        mask: Option<&MaskSpec>,
        taps: &[usize],
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if let Some(&bad) = taps.iter().find(|&&t| t == 0 || t > self.blocks.len()) {
            return Err(Error::InvalidArgument(format!(
                "stage tap {bad} outside 1..={}",
                self.blocks.len()
            )));
        }
        let (l_patch, pdim) = g.value(patches).dims2()?;
        if l_patch != cfg.num_patches() || pdim != cfg.patch_dim() {
            return Err(Error::Shape {
                op: "patch_embed",
                lhs: vec![l_patch, pdim],
                rhs: vec![cfg.num_patches(), cfg.patch_dim()],
            });
        }
        let mut x = g.matmul(patches, self.embed_w)?;
        x = g.add_row(x, self.embed_b)?;
        if let Some(mask) = mask {
            let extras = self.extras.as_ref().ok_or_else(|| {
                Error::InvalidArgument("mask given to a model without a mask token".into())
            })?;
            if mask.num_patches() != l_patch {
                return Err(Error::InvalidArgument(format!(
                    "mask covers {} patches, input has {l_patch}",
                    mask.num_patches()
                )));
            }
            if !mask.masked.is_empty() {
                x = g.replace_rows(x, extras.mask_token, &mask.masked)?;
            }
        }
        if let Some(cls) = self.cls_token {
            x = g.concat_rows(cls, x)?;
        }
        x = g.add(x, self.pos_embed)?;
        let mut stages = vec![None; taps.len()];
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x)?;
            for (slot, &t) in stages.iter_mut().zip(taps) {
                if t == i + 1 {
                    *slot = Some(x);
                }
            }
        }
        Ok(ForwardOutput {
            output: x,
            stages: stages.into_iter().map(|s| s.expect("validated tap")).collect(),
        })
    }

    /// `y · P` into the teacher's feature space.
    pub fn project_to_teacher(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let extras = self
            .extras
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no projection layer".into()))?;
        g.matmul(y, extras.projection)
    }
}

/// Value route of the teacher projection.
pub fn project_to_teacher(y: &Tensor, extras: &StudentExtras) -> Result<Tensor> {
    crate::tensor::matmul(y, &extras.projection)
}

/// Splits an `H×W×C` image into non-overlapping `p×p` patches, row-major over
/// the patch grid. Each output row is a patch flattened as (row, col, channel).
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let [h, w, c] = *image.shape() else {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "expected H×W×C".into(),
        });
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: format!("not divisible into {p}×{p} patches"),
        });
    }
    let (gh, gw) = (h / p, w / p);
    let px = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..p {
                let start = ((pr * p + r) * w + pc * p) * c;
                out.extend_from_slice(&px[start..start + p * c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![gh * gw, p * p * c], out))
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, p: usize, h: usize, w: usize, c: usize) -> Result<Tensor> {
    let (n, dim) = patches.dims2()?;
    if p == 0 || h % p != 0 || w % p != 0 || n != (h / p) * (w / p) || dim != p * p * c {
        return Err(Error::InvalidShape {
            shape: patches.shape().to_vec(),
            reason: format!("incompatible with a {h}×{w}×{c} image and patch size {p}"),
        });
    }
    let gw = w / p;
    let mut out = vec![0.0; h * w * c];
    for (idx, patch) in patches.data().chunks(dim).enumerate() {
        let (pr, pc) = (idx / gw, idx % gw);
        for r in 0..p {
            let start = ((pr * p + r) * w + pc * p) * c;
            out[start..start + p * c].copy_from_slice(&patch[r * p * c..(r + 1) * p * c]);
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Self-describing checkpoint: config plus a path → tensor map.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Feature width of the teacher the projection targets; students only.
    pub teacher_dim: Option<usize>,
    pub params: BTreeMap<String, StoredTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "linearizer-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut params = BTreeMap::new();
        model.for_each(&mut |name, t| {
            params.insert(
                name.to_string(),
                StoredTensor {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            );
        });
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            teacher_dim: model.extras.as_ref().map(|e| e.projection.shape()[1]),
            params,
        }
    }

    pub fn into_model(mut self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Model::init(&self.config, self.teacher_dim, &mut rng)?;
        let mut failure = None;
        model.for_each_mut(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            match self.params.remove(name) {
                None => failure = Some(format!("missing parameter {name}")),
                Some(stored) if stored.shape != t.shape() => {
                    failure = Some(format!(
                        "parameter {name}: shape {:?}, expected {:?}",
                        stored.shape,
                        t.shape()
                    ))
                }
                Some(stored) => match Tensor::new(stored.shape, stored.data) {
                    Ok(v) => *t = v,
                    Err(e) => failure = Some(format!("parameter {name}: {e}")),
                },
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Checkpoint(msg));
        }
        if let Some(extra) = self.params.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }
}
