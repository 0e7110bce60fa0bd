//! Frozen CLIP-style Vision Transformer that records the CLS token after
//! every block.
//!
//! Images enter as `b × 3 × side × side` tensors (channel, row, column),
//! already cropped to `image_side`. [`Backbone::normalize`] applies the
//! per-channel mean/std stored in the weight container; [`encode_collect`]
//! then runs patch embedding and the `n` pre-norm blocks and returns the
//! `b × n × d` stack of raw block-output CLS tokens. No final LayerNorm and no
//! multimodal projection are applied to the recorded tokens.
//!
//! Linear weights use the `out × in` layout of the source checkpoints. The
//! patch projection is `d × (3·P·P)` with input features flattened in
//! (channel, row, column) order, matching [`patchify`].

use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::rng::Rng;
use crate::tensor::{self, matmul_bt, softmax_slice, Scalar, Tensor};
use crate::{Error, Result};

pub const CONTAINER_KIND: &str = "vit";

fn default_ln_eps() -> f32 {
    1e-5
}

/// MLP activation. Exact GELU is the default; checkpoints trained with the
/// sigmoid approximation (OpenAI CLIP) declare `quick_gelu` in their manifest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    QuickGelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Embedding width.
    pub d: usize,
    /// Number of transformer blocks.
    pub n: usize,
    /// Patch side length in pixels.
    pub patch: usize,
    pub heads: usize,
    pub image_side: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f32,
    #[serde(default)]
    pub activation: Activation,
}

impl ViTConfig {
    pub fn new(d: usize, n: usize, patch: usize, heads: usize, image_side: usize) -> Self {
        Self {
            d,
            n,
            patch,
            heads,
            image_side,
            ln_eps: default_ln_eps(),
            activation: Activation::Gelu,
        }
    }

    /// CLIP ViT-B/32 image tower geometry.
    pub fn vit_b32() -> Self {
        Self::new(768, 12, 32, 12, 224)
    }

    /// CLIP ViT-L/14 image tower geometry.
    pub fn vit_l14() -> Self {
        Self::new(1024, 24, 14, 16, 224)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Param(m));
        if self.d == 0 || self.n == 0 || self.patch == 0 || self.heads == 0 {
            return bad(format!("zero-sized ViT config {self:?}"));
        }
        if !self.image_side.is_multiple_of(self.patch) {
            return bad(format!(
                "image side {} not divisible by patch {}",
                self.image_side, self.patch
            ));
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.d, self.heads));
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("layer norm eps {} must be positive", self.ln_eps));
        }
        Ok(())
    }

    /// `p = side² / P²`.
    pub fn num_patches(&self) -> usize {
        (self.image_side / self.patch).pow(2)
    }

    /// Sequence length including the CLS token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Per-channel input normalization, `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn apply(&self, x: &Tensor, eps: f32) -> Result<Tensor> {
        tensor::layer_norm(x, &self.gamma, &self.beta, eps)
    }
}

/// Dense layer with an `out × in` weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul_bt(x, &self.weight)?;
        if let Some(b) = &self.bias {
            y.add_row_vector(b)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTWeights {
    pub patch_projection: Linear,
    pub cls_token: Tensor,
    /// `(p + 1) × d`; row 0 belongs to the CLS token.
    pub positional: Tensor,
    /// LayerNorm applied to the embedded sequence before block 1, when the
    /// source checkpoint has one.
    pub pre_ln: Option<LayerNormParams>,
    pub blocks: Vec<BlockWeights>,
    pub normalization: Normalization,
}

/// Stack of per-block CLS tokens, `b × n × d`. Block `l` (1-based in the
/// usual notation) lives at index `l - 1` of the middle axis.
#[derive(Clone, Debug, PartialEq)]
pub struct RineTensorK {
    pub values: Tensor,
}

impl RineTensorK {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Shape(format!(
                "CLS stack must be b×n×d, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn blocks(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// `b × 1 × d` slice holding only block `index` (0-based).
    pub fn block(&self, index: usize) -> Result<RineTensorK> {
        let (b, n, d) = (self.batch(), self.blocks(), self.dim());
        if index >= n {
            return Err(Error::Shape(format!("block {index} out of range for n={n}")));
        }
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            let start = (i * n + index) * d;
            data.extend_from_slice(&self.values.data()[start..start + d]);
        }
        RineTensorK::new(Tensor::new(vec![b, 1, d], data)?)
    }

    pub fn last_block(&self) -> RineTensorK {
        self.block(self.blocks() - 1).expect("n ≥ 1")
    }

    /// Rows `indices` of the batch, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<RineTensorK> {
        let per = self.blocks() * self.dim();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.batch() {
                return Err(Error::Shape(format!("row {i} out of range for batch {}", self.batch())));
            }
            data.extend_from_slice(&self.values.data()[i * per..(i + 1) * per]);
        }
        RineTensorK::new(Tensor::new(vec![indices.len(), self.blocks(), self.dim()], data)?)
    }

    pub fn concat(parts: &[RineTensorK]) -> Result<RineTensorK> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero CLS stacks".into()))?;
        let (n, d) = (first.blocks(), first.dim());
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            if p.blocks() != n || p.dim() != d {
                return Err(Error::Shape(format!(
                    "concat of {:?} with {:?}",
                    first.values.shape(),
                    p.values.shape()
                )));
            }
            b += p.batch();
            data.extend_from_slice(p.values.data());
        }
        RineTensorK::new(Tensor::new(vec![b, n, d], data)?)
    }
}

/// Cuts `b × 3 × side × side` images into `b × p × (3·P·P)` patches. Patches
/// are numbered row-major over the patch grid and each is flattened in
/// (channel, row, column) order.
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = images.shape() else {
        return Err(Error::Shape(format!(
            "images must be b×3×h×w, got {:?}",
            images.shape()
        )));
    };
    let (b, c, h, w) = (*b, *c, *h, *w);
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}×{w} not divisible by patch {patch}; crop first"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(b * gh * gw * pd);
    for img in 0..b {
        for pr in 0..gh {
            for pc in 0..gw {
                for ch in 0..c {
                    for r in 0..patch {
                        let row = pr * patch + r;
                        let base = ((img * c + ch) * h + row) * w + pc * patch;
                        out.extend_from_slice(&src[base..base + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, pd], out)
}

/// Builds the encoder input `Z_0` for one image: CLS token followed by the
/// projected patches, plus positional embeddings. Pre-LN is not applied here.
fn embed_one(patches: &Tensor, weights: &ViTWeights) -> Result<Tensor> {
    let projected = weights.patch_projection.forward(patches)?;
    let (p, d) = (projected.shape()[0], projected.shape()[1]);
    weights.positional.expect_shape(&[p + 1, d], "positional embedding")?;
    let mut z = Vec::with_capacity((p + 1) * d);
    z.extend_from_slice(weights.cls_token.data());
    z.extend_from_slice(projected.data());
    let mut z = Tensor::new(vec![p + 1, d], z)?;
    z.add_assign(&weights.positional)?;
    Ok(z)
}

/// `b × p × (3·P·P)` patches to `b × (p+1) × d` tokens.
pub fn embed(patches: &Tensor, weights: &ViTWeights, config: &ViTConfig) -> Result<Tensor> {
    let [b, p, pd] = patches.shape() else {
        return Err(Error::Shape(format!("patches must be b×p×pd, got {:?}", patches.shape())));
    };
    let (b, p, pd) = (*b, *p, *pd);
    if p != config.num_patches() || pd != config.patch_dim() {
        return Err(Error::Shape(format!(
            "patches {:?} do not match config p={} patch_dim={}",
            patches.shape(),
            config.num_patches(),
            config.patch_dim()
        )));
    }
    let mut out = Vec::with_capacity(b * (p + 1) * config.d);
    for i in 0..b {
        let one = Tensor::new(vec![p, pd], patches.data()[i * p * pd..(i + 1) * p * pd].to_vec())?;
        out.extend(embed_one(&one, weights)?.into_data());
    }
    Tensor::new(vec![b, p + 1, config.d], out)
}

fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Gelu => tensor::gelu(x),
        Activation::QuickGelu => x.map(|v| v / (1.0 + (-1.702 * v).exp())),
    }
}

/// One pre-norm block on a single `T × d` sequence. Returns the block output
/// and, when requested, the `heads × T × T` attention probabilities.
fn block_one(
    z: &Tensor,
    w: &BlockWeights,
    config: &ViTConfig,
    keep_attention: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let (t, d) = (z.shape()[0], z.shape()[1]);
    let (heads, dh) = (config.heads, config.head_dim());
    let x = w.ln1.apply(z, config.ln_eps)?;
    let q = w.q.forward(&x)?;
    let k = w.k.forward(&x)?;
    let v = w.v.forward(&x)?;
    let scale = 1.0 / (dh as f32).sqrt();

    let mut mixed = vec![0.0f32; t * d];
    let mut attn_all = keep_attention.then(|| Vec::with_capacity(heads * t * t));
    let mut scores = vec![0.0f32; t];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let qi = &q.row(i)[cols.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = tensor::dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            softmax_slice(&mut scores);
            let out = &mut mixed[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, &a) in scores.iter().enumerate() {
                for (o, &vj) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += a * vj;
                }
            }
            if let Some(all) = attn_all.as_mut() {
                all.extend_from_slice(&scores);
            }
        }
    }
    let mixed = Tensor::new(vec![t, d], mixed)?;
    let mut z_mid = w.out.forward(&mixed)?;
    z_mid.add_assign(z)?;

    let x2 = w.ln2.apply(&z_mid, config.ln_eps)?;
    let hidden = activation(&w.fc1.forward(&x2)?, config.activation);
    let mut z_out = w.fc2.forward(&hidden)?;
    z_out.add_assign(&z_mid)?;

    let attn = attn_all.map(|a| Tensor::new(vec![heads, t, t], a)).transpose()?;
    Ok((z_out, attn))
}

fn per_sequence(
    z: &Tensor,
    d: usize,
    mut f: impl FnMut(&Tensor) -> Result<(Tensor, Option<Tensor>)>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let [b, t, zd] = z.shape() else {
        return Err(Error::Shape(format!("tokens must be b×T×d, got {:?}", z.shape())));
    };
    if *zd != d {
        return Err(Error::Shape(format!("token width {zd} != config d {d}")));
    }
    let (b, t) = (*b, *t);
    let mut out = Vec::with_capacity(z.len());
    let mut attn = Vec::new();
    for i in 0..b {
        let seq = Tensor::new(vec![t, d], z.data()[i * t * d..(i + 1) * t * d].to_vec())?;
        let (y, a) = f(&seq)?;
        out.extend(y.into_data());
        attn.extend(a);
    }
    Ok((Tensor::new(vec![b, t, d], out)?, attn))
}

/// `Z̃ = MSA(LN(Z)) + Z`, then `Z' = MLP(LN(Z̃)) + Z̃`, over a `b × T × d` batch.
pub fn transformer_block(z: &Tensor, w: &BlockWeights, config: &ViTConfig) -> Result<Tensor> {
    Ok(per_sequence(z, config.d, |s| block_one(s, w, config, false))?.0)
}

/// Like [`transformer_block`] but also returns attention probabilities,
/// `b × heads × T × T`.
pub fn transformer_block_with_attention(
    z: &Tensor,
    w: &BlockWeights,
    config: &ViTConfig,
) -> Result<(Tensor, Tensor)> {
    let (out, attn) = per_sequence(z, config.d, |s| block_one(s, w, config, true))?;
    let (b, t) = (z.shape()[0], z.shape()[1]);
    let data = attn.into_iter().flat_map(Tensor::into_data).collect();
    Ok((out, Tensor::new(vec![b, config.heads, t, t], data)?))
}

/// Frozen encoder: geometry plus weights. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: ViTConfig,
    pub weights: ViTWeights,
}

impl Backbone {
    pub fn new(config: ViTConfig, weights: ViTWeights) -> Result<Self> {
        config.validate()?;
        check_weights(&config, &weights)?;
        Ok(Self { config, weights })
    }

    /// Randomly initialized backbone for toy experiments and tests.
    pub fn random(config: ViTConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let weights = random_weights(&config, rng);
        Self::new(config, weights)
    }

    /// Applies the container's per-channel normalization to `b × 3 × h × w`
    /// pixels in `[0, 1]`.
    pub fn normalize(&self, images: &Tensor) -> Result<Tensor> {
        let [_, c, h, w] = images.shape() else {
            return Err(Error::Shape(format!("images must be b×3×h×w, got {:?}", images.shape())));
        };
        if *c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let plane = h * w;
        let norm = &self.weights.normalization;
        let mut out = images.clone();
        for (idx, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = idx % 3;
            let (m, s) = (norm.mean[ch], norm.std[ch]);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let side = self.config.image_side;
        match images.shape() {
            [_, 3, h, w] if *h == side && *w == side => Ok(()),
            s => Err(Error::Shape(format!(
                "images {s:?} do not match encoder input 3×{side}×{side}"
            ))),
        }
    }

    /// Runs one normalized image through the encoder, returning the CLS token
    /// after each block (`n × d`), or only after the last block.
    fn encode_one(&self, patches: &Tensor, last_only: bool) -> Result<Vec<f32>> {
        let cfg = &self.config;
        let mut z = embed_one(patches, &self.weights)?;
        if let Some(ln) = &self.weights.pre_ln {
            z = ln.apply(&z, cfg.ln_eps)?;
        }
        let mut cls = Vec::with_capacity(cfg.n * cfg.d);
        for (l, block) in self.weights.blocks.iter().enumerate() {
            z = block_one(&z, block, cfg, false)?.0;
            if !last_only || l + 1 == cfg.n {
                cls.extend_from_slice(z.row(0));
            }
        }
        Ok(cls)
    }

    fn encode_impl(&self, images: &Tensor, last_only: bool) -> Result<RineTensorK> {
        self.check_images(images)?;
        let patches = patchify(images, self.config.patch)?;
        let (b, p, pd) = (patches.shape()[0], patches.shape()[1], patches.shape()[2]);
        // Images are independent; collecting in index order keeps the result
        // identical regardless of thread count.
        let rows: Vec<Vec<f32>> = (0..b)
            .into_par_iter()
            .map(|i| {
                let one = Tensor::new(vec![p, pd], patches.data()[i * p * pd..(i + 1) * p * pd].to_vec())?;
                self.encode_one(&one, last_only)
            })
            .collect::<Result<_>>()?;
        let blocks = if last_only { 1 } else { self.config.n };
        RineTensorK::new(Tensor::new(
            vec![b, blocks, self.config.d],
            rows.into_iter().flatten().collect(),
        )?)
    }

    /// CLS tokens of every block for already-normalized images.
    pub fn encode_collect(&self, images: &Tensor) -> Result<RineTensorK> {
        self.encode_impl(images, false)
    }

    /// Only the final block's CLS token, `b × 1 × d`.
    pub fn encode_final(&self, images: &Tensor) -> Result<RineTensorK> {
        self.encode_impl(images, true)
    }

    /// Normalizes raw `[0, 1]` pixels, then [`encode_collect`](Self::encode_collect).
    pub fn encode_pixels(&self, images: &Tensor) -> Result<RineTensorK> {
        self.encode_collect(&self.normalize(images)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }

    pub fn to_container(&self) -> Container {
        let w = &self.weights;
        let mut c = Container::new(
            CONTAINER_KIND,
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        c.meta.insert(
            "normalization".into(),
            serde_json::to_value(&w.normalization).expect("normalization serializes"),
        );
        c.meta.insert("pre_ln".into(), json!(w.pre_ln.is_some()));
        c.meta.insert("patch_bias".into(), json!(w.patch_projection.bias.is_some()));

        let put_linear = |c: &mut Container, name: &str, l: &Linear| {
            c.insert(format!("{name}.weight"), l.weight.clone());
            if let Some(b) = &l.bias {
                c.insert(format!("{name}.bias"), b.clone());
            }
        };
        let put_ln = |c: &mut Container, name: &str, ln: &LayerNormParams| {
            c.insert(format!("{name}.gamma"), ln.gamma.clone());
            c.insert(format!("{name}.beta"), ln.beta.clone());
        };
        put_linear(&mut c, "patch_embed", &w.patch_projection);
        c.insert("cls_token", w.cls_token.clone());
        c.insert("positional", w.positional.clone());
        if let Some(ln) = &w.pre_ln {
            put_ln(&mut c, "pre_ln", ln);
        }
        for (k, b) in w.blocks.iter().enumerate() {
            let p = format!("block.{k}");
            put_ln(&mut c, &format!("{p}.ln1"), &b.ln1);
            put_linear(&mut c, &format!("{p}.attn.q"), &b.q);
            put_linear(&mut c, &format!("{p}.attn.k"), &b.k);
            put_linear(&mut c, &format!("{p}.attn.v"), &b.v);
            put_linear(&mut c, &format!("{p}.attn.out"), &b.out);
            put_ln(&mut c, &format!("{p}.ln2"), &b.ln2);
            put_linear(&mut c, &format!("{p}.mlp.fc1"), &b.fc1);
            put_linear(&mut c, &format!("{p}.mlp.fc2"), &b.fc2);
        }
        c
    }

    /// Parses and fully validates a backbone container. Every tensor implied
    /// by the config must be present with the right shape, and nothing else.
    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind(CONTAINER_KIND)?;
        let config: ViTConfig = serde_json::from_value(c.config.clone())
            .map_err(|e| Error::container("config", e.to_string()))?;
        config
            .validate()
            .map_err(|e| Error::container("config", e.to_string()))?;
        let normalization: Normalization = c
            .meta
            .get("normalization")
            .cloned()
            .ok_or_else(|| Error::container("normalization", "missing from manifest"))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| Error::container("normalization", e.to_string()))
            })?;
        let flag = |c: &Container, key: &str| c.meta.get(key).and_then(|v| v.as_bool()).unwrap_or(false);
        let has_pre_ln = flag(&c, "pre_ln");
        let has_patch_bias = flag(&c, "patch_bias");

        let (d, h) = (config.d, config.mlp_hidden());
        let linear = |c: &mut Container, name: &str, out: usize, inp: usize, bias: bool| -> Result<Linear> {
            Ok(Linear {
                weight: c.take(&format!("{name}.weight"), &[out, inp])?,
                bias: if bias { Some(c.take(&format!("{name}.bias"), &[out])?) } else { None },
            })
        };
        let ln = |c: &mut Container, name: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gamma: c.take(&format!("{name}.gamma"), &[d])?,
                beta: c.take(&format!("{name}.beta"), &[d])?,
            })
        };

        let patch_projection = linear(&mut c, "patch_embed", d, config.patch_dim(), has_patch_bias)?;
        let cls_token = c.take("cls_token", &[d])?;
        let positional = c.take("positional", &[config.tokens(), d])?;
        let pre_ln = if has_pre_ln { Some(ln(&mut c, "pre_ln")?) } else { None };
        let mut blocks = Vec::with_capacity(config.n);
        for k in 0..config.n {
            let p = format!("block.{k}");
            blocks.push(BlockWeights {
                ln1: ln(&mut c, &format!("{p}.ln1"))?,
                q: linear(&mut c, &format!("{p}.attn.q"), d, d, true)?,
                k: linear(&mut c, &format!("{p}.attn.k"), d, d, true)?,
                v: linear(&mut c, &format!("{p}.attn.v"), d, d, true)?,
                out: linear(&mut c, &format!("{p}.attn.out"), d, d, true)?,
                ln2: ln(&mut c, &format!("{p}.ln2"))?,
                fc1: linear(&mut c, &format!("{p}.mlp.fc1"), h, d, true)?,
                fc2: linear(&mut c, &format!("{p}.mlp.fc2"), d, h, true)?,
            });
        }
        c.expect_consumed()?;
        Backbone::new(
            config,
            ViTWeights {
                patch_projection,
                cls_token,
                positional,
                pre_ln,
                blocks,
                normalization,
            },
        )
    }
}

fn check_weights(cfg: &ViTConfig, w: &ViTWeights) -> Result<()> {
    let d = cfg.d;
    w.patch_projection
        .weight
        .expect_shape(&[d, cfg.patch_dim()], "patch projection")?;
    w.cls_token.expect_shape(&[d], "cls token")?;
    w.positional.expect_shape(&[cfg.tokens(), d], "positional")?;
    if w.blocks.len() != cfg.n {
        return Err(Error::Shape(format!(
            "{} blocks for config n={}",
            w.blocks.len(),
            cfg.n
        )));
    }
    for (k, b) in w.blocks.iter().enumerate() {
        for (name, l, out, inp) in [
            ("q", &b.q, d, d),
            ("k", &b.k, d, d),
            ("v", &b.v, d, d),
            ("out", &b.out, d, d),
            ("fc1", &b.fc1, cfg.mlp_hidden(), d),
            ("fc2", &b.fc2, d, cfg.mlp_hidden()),
        ] {
            l.weight.expect_shape(&[out, inp], &format!("block.{k}.{name}"))?;
        }
    }
    Ok(())
}

fn random_weights(cfg: &ViTConfig, rng: &mut Rng) -> ViTWeights {
    let d = cfg.d;
    let mut normal = |shape: &[usize], std: f64| -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
    };
    let mut linear = |out: usize, inp: usize| Linear {
        weight: normal(&[out, inp], 1.0 / (inp as f64).sqrt()),
        bias: Some(Tensor::zeros(&[out])),
    };
    let ln = || LayerNormParams {
        gamma: Tensor::full(&[d], 1.0),
        beta: Tensor::zeros(&[d]),
    };
    let patch_projection = Linear {
        bias: None,
        ..linear(d, cfg.patch_dim())
    };
    let blocks = (0..cfg.n)
        .map(|_| BlockWeights {
            ln1: ln(),
            q: linear(d, d),
            k: linear(d, d),
            v: linear(d, d),
            out: linear(d, d),
            ln2: ln(),
            fc1: linear(cfg.mlp_hidden(), d),
            fc2: linear(d, cfg.mlp_hidden()),
        })
        .collect();
    let cls_token = normal(&[d], 1.0);
    let positional = normal(&[cfg.tokens(), d], 0.1);
    ViTWeights {
        patch_projection,
        cls_token,
        positional,
        pre_ln: None,
        blocks,
        normalization: Normalization {
            mean: [0.5; 3],
            std: [0.25; 3],
        },
    }
}
