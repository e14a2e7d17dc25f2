//! Frozen image/text encoders with multi-level feature taps.
//!
//! Two interchangeable backbones sit behind the same interface:
//!
//! * [`ToyBackbone`] — a small transformer-free encoder (patchify followed by
//!   per-layer linear + tanh stages) with seeded random frozen weights. It
//!   keeps the whole gradient path identical in shape while running in
//!   seconds, so the full pipeline can be exercised at desk scale.
//! * [`VitBackbone`] — a CLIP-style vision transformer pair loaded from a
//!   weights container (see [`crate::container`]). The container's text block
//!   is the weights manifest recording encoder identity, tap layers, feature
//!   width and grid side.
//!
//! Vision encoding is plain (no gradients ever reach it); text encoding runs
//! on the autodiff tape so gradients can flow into learnable prompt tokens
//! while encoder weights stay constants.

use crate::autodiff::{NodeId, Tape};
use crate::container::Container;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    Pretrained,
    Toy,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Pretrained => "pretrained",
            BackboneKind::Toy => "toy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(BackboneKind::Pretrained),
            "toy" => Ok(BackboneKind::Toy),
            other => Err(Error::Config(format!("unknown backbone kind `{other}`"))),
        }
    }
}

/// Backbone geometry and tap configuration.
#[derive(Clone, Debug)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Square input side in pixels.
    pub input_size: usize,
    /// Strictly increasing 1-based encoder layers to tap.
    pub tap_layers: Vec<usize>,
    /// Patch feature width `d`.
    pub vision_dim: usize,
    /// Text embedding width; adapter heads project into this space.
    pub text_dim: usize,
    /// Patches per side; the grid holds `grid_side^2` patches.
    pub grid_side: usize,
    pub depth: usize,
    pub text_depth: usize,
    pub text_ctx: usize,
    /// Tap features after the encoder's per-layer normalization (default)
    /// or before it.
    pub tap_after_norm: bool,
}

impl BackboneSpec {
    pub fn toy_default() -> Self {
        BackboneSpec {
            kind: BackboneKind::Toy,
            input_size: 64,
            tap_layers: vec![1, 2, 3, 4],
            vision_dim: 32,
            text_dim: 32,
            grid_side: 8,
            depth: 4,
            text_depth: 2,
            text_ctx: 32,
            tap_after_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap_layers.is_empty() {
            return Err(Error::Config("tap_layers must not be empty".into()));
        }
        if !self.tap_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "tap_layers must be strictly increasing".into(),
            ));
        }
        if self.tap_layers[0] < 1 || *self.tap_layers.last().unwrap() > self.depth {
            return Err(Error::Config(format!(
                "tap_layers must lie in 1..={}",
                self.depth
            )));
        }
        if self.vision_dim == 0 || self.text_dim == 0 || self.grid_side == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.kind == BackboneKind::Toy && self.input_size % self.grid_side != 0 {
            return Err(Error::Config(format!(
                "toy input_size {} is not divisible by grid_side {}",
                self.input_size, self.grid_side
            )));
        }
        Ok(())
    }

    /// Patch count `G`.
    pub fn grid_len(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

/// Patches per side of a stride-`patch` patch embedder on a square input.
pub fn patch_grid_side(input_size: usize, patch: usize) -> usize {
    (input_size - patch) / patch + 1
}

/// Per-layer patch-feature grids tapped from the frozen vision encoder.
#[derive(Clone, Debug)]
pub struct FeatureStack<S: Scalar> {
    /// `(tap layer, [G, d] patch features)` in tap order.
    pub layers: Vec<(usize, Tensor<S>)>,
}

impl<S: Scalar> FeatureStack<S> {
    pub fn get(&self, layer: usize) -> Option<&Tensor<S>> {
        self.layers
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, t)| t)
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        let keys: Vec<usize> = self.layers.iter().map(|(l, _)| *l).collect();
        if keys != spec.tap_layers {
            return Err(Error::Contract(format!(
                "feature stack layers {keys:?} do not match tap_layers {:?}",
                spec.tap_layers
            )));
        }
        for (layer, t) in &self.layers {
            if t.shape != vec![spec.grid_len(), spec.vision_dim] {
                return Err(Error::Contract(format!(
                    "layer {layer} features have shape {:?}",
                    t.shape
                )));
            }
            if !t.all_finite() {
                return Err(Error::Contract(format!(
                    "layer {layer} features contain non-finite values"
                )));
            }
        }
        Ok(())
    }
}

// ── Toy backbone ─────────────────────────────────────────────────────────

pub struct ToyBackbone<S: Scalar> {
    spec: BackboneSpec,
    patch: usize,
    patch_embed: Tensor<S>,
    vision_layers: Vec<(Tensor<S>, Tensor<S>)>,
    text_layers: Vec<(Tensor<S>, Tensor<S>)>,
    word_seed: u64,
    sos: Tensor<S>,
    eos: Tensor<S>,
    checksum: String,
}

fn uniform_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    Tensor::new(
        (0..n)
            .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
            .collect(),
        shape.to_vec(),
    )
}

fn fan_in_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

fn fnv1a(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl<S: Scalar> ToyBackbone<S> {
    /// Build a frozen toy encoder pair, reproducible from the seed.
    pub fn new(seed: u64, spec: BackboneSpec) -> Result<Self> {
        if spec.kind != BackboneKind::Toy {
            return Err(Error::Config("toy backbone requires kind = toy".into()));
        }
        spec.validate()?;
        let patch = spec.input_size / spec.grid_side;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_embed = uniform_tensor(
            &mut rng,
            &[patch * patch * 3, spec.vision_dim],
            fan_in_bound(patch * patch * 3),
        );
        let mut vision_layers = Vec::with_capacity(spec.depth);
        for _ in 0..spec.depth {
            let w = uniform_tensor(
                &mut rng,
                &[spec.vision_dim, spec.vision_dim],
                fan_in_bound(spec.vision_dim),
            );
            let b = uniform_tensor(&mut rng, &[spec.vision_dim], 0.1);
            vision_layers.push((w, b));
        }
        let mut text_layers = Vec::with_capacity(spec.text_depth);
        for _ in 0..spec.text_depth {
            let w = uniform_tensor(
                &mut rng,
                &[spec.text_dim, spec.text_dim],
                fan_in_bound(spec.text_dim),
            );
            let b = uniform_tensor(&mut rng, &[spec.text_dim], 0.1);
            text_layers.push((w, b));
        }
        let word_seed = rng.gen::<u64>();
        let sos = word_embedding(word_seed, "<sos>", spec.text_dim);
        let eos = word_embedding(word_seed, "<eos>", spec.text_dim);

        let mut hasher = ChecksumBuilder::new();
        hasher.add("toy.patch_embed", &patch_embed);
        for (i, (w, b)) in vision_layers.iter().enumerate() {
            hasher.add(&format!("toy.vision.{i}.w"), w);
            hasher.add(&format!("toy.vision.{i}.b"), b);
        }
        for (i, (w, b)) in text_layers.iter().enumerate() {
            hasher.add(&format!("toy.text.{i}.w"), w);
            hasher.add(&format!("toy.text.{i}.b"), b);
        }
        let checksum = hasher.finish();

        Ok(ToyBackbone {
            spec,
            patch,
            patch_embed,
            vision_layers,
            text_layers,
            word_seed,
            sos,
            eos,
            checksum,
        })
    }
}

fn word_embedding<S: Scalar>(word_seed: u64, word: &str, dim: usize) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(word_seed ^ fnv1a(word));
    uniform_tensor(&mut rng, &[dim], 0.5)
}

// ── CLIP-style ViT backbone ──────────────────────────────────────────────

/// Architecture line of a pretrained weights container.
#[derive(Clone, Debug)]
pub struct VitArch {
    pub identity: String,
    pub input_size: usize,
    pub patch: usize,
    pub vision_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub text_ctx: usize,
    pub tap_layers: Vec<usize>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub logit_scale: f64,
}

impl VitArch {
    /// ViT-L/14 geometry at 240 px (17x17 patch grid, d = 1024).
    pub fn vit_l_14_240() -> Self {
        VitArch {
            identity: "clip-vit-l-14-240px".into(),
            input_size: 240,
            patch: 14,
            vision_dim: 1024,
            depth: 24,
            heads: 16,
            text_dim: 768,
            text_depth: 12,
            text_heads: 12,
            text_ctx: 77,
            tap_layers: vec![6, 12, 18, 24],
            mean: [0.48145466, 0.4578275, 0.40821073],
            std: [0.26862954, 0.26130258, 0.27577711],
            logit_scale: 100.0,
        }
    }

    /// Tiny geometry for pipeline tests with synthesized weights.
    pub fn tiny(input_size: usize) -> Self {
        VitArch {
            identity: "clip-vit-tiny-test".into(),
            input_size,
            patch: 8,
            vision_dim: 24,
            depth: 4,
            heads: 3,
            text_dim: 16,
            text_depth: 2,
            text_heads: 2,
            text_ctx: 24,
            tap_layers: vec![1, 2, 3, 4],
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
            logit_scale: 100.0,
        }
    }

    pub fn grid_side(&self) -> usize {
        patch_grid_side(self.input_size, self.patch)
    }

    /// Weights-manifest text embedded in the container (and written as a
    /// sidecar `.manifest.txt` for the record).
    pub fn manifest(&self) -> String {
        format!(
            "identity = {}\ninput_size = {}\npatch = {}\nvision_dim = {}\ndepth = {}\n\
             heads = {}\ntext_dim = {}\ntext_depth = {}\ntext_heads = {}\ntext_ctx = {}\n\
             tap_layers = {}\ngrid_side = {}\nmean = {},{},{}\nstd = {},{},{}\nlogit_scale = {}\n",
            self.identity,
            self.input_size,
            self.patch,
            self.vision_dim,
            self.depth,
            self.heads,
            self.text_dim,
            self.text_depth,
            self.text_heads,
            self.text_ctx,
            self.tap_layers
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
            self.grid_side(),
            self.mean[0],
            self.mean[1],
            self.mean[2],
            self.std[0],
            self.std[1],
            self.std[2],
            self.logit_scale,
        )
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<&String> {
            map.get(k)
                .ok_or_else(|| Error::Load(format!("weights manifest is missing `{k}`")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Load(format!("weights manifest `{k}` is not an integer")))
        };
        let parse_f64_list = |k: &str, n: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = get(k)?
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Load(format!("weights manifest `{k}` is malformed")))?;
            if vals.len() != n {
                return Err(Error::Load(format!(
                    "weights manifest `{k}` needs {n} values"
                )));
            }
            Ok(vals)
        };
        let taps: Vec<usize> = get("tap_layers")?
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Load("weights manifest tap_layers is malformed".into()))?;
        let mean = parse_f64_list("mean", 3)?;
        let std = parse_f64_list("std", 3)?;
        Ok(VitArch {
            identity: get("identity")?.clone(),
            input_size: parse_usize("input_size")?,
            patch: parse_usize("patch")?,
            vision_dim: parse_usize("vision_dim")?,
            depth: parse_usize("depth")?,
            heads: parse_usize("heads")?,
            text_dim: parse_usize("text_dim")?,
            text_depth: parse_usize("text_depth")?,
            text_heads: parse_usize("text_heads")?,
            text_ctx: parse_usize("text_ctx")?,
            tap_layers: taps,
            mean: [mean[0], mean[1], mean[2]],
            std: [std[0], std[1], std[2]],
            logit_scale: get("logit_scale")?
                .parse()
                .map_err(|_| Error::Load("weights manifest logit_scale is malformed".into()))?,
        })
    }

    /// Randomly initialized weights container with this architecture, for
    /// exercising the pretrained loading/inference path without real
    /// checkpoints. `words` lists every word embedding the container should
    /// provide (prompt synonyms and objective words).
    pub fn synthesize<S: Scalar>(&self, seed: u64, words: &[&str]) -> Container<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Container::new(self.manifest());
        let d = self.vision_dim;
        let dt = self.text_dim;
        let g = self.grid_side() * self.grid_side();
        c.push(
            "vision.patch_embed",
            uniform_tensor(&mut rng, &[self.patch * self.patch * 3, d], fan_in_bound(self.patch * self.patch * 3)),
        );
        c.push("vision.class_embed", uniform_tensor(&mut rng, &[1, d], 0.02));
        c.push("vision.pos_embed", uniform_tensor(&mut rng, &[g + 1, d], 0.02));
        push_ln(&mut c, "vision.ln_pre", d, &mut rng);
        for i in 0..self.depth {
            push_block(&mut c, &format!("vision.block{i}"), d, &mut rng);
        }
        push_ln(&mut c, "vision.ln_post", d, &mut rng);

        c.push(
            "text.pos_embed",
            uniform_tensor(&mut rng, &[self.text_ctx, dt], 0.02),
        );
        for i in 0..self.text_depth {
            push_block(&mut c, &format!("text.block{i}"), dt, &mut rng);
        }
        push_ln(&mut c, "text.ln_final", dt, &mut rng);
        c.push("text.proj", uniform_tensor(&mut rng, &[dt, dt], fan_in_bound(dt)));
        c.push("text.sos", uniform_tensor(&mut rng, &[dt], 0.5));
        c.push("text.eos", uniform_tensor(&mut rng, &[dt], 0.5));
        for word in words {
            c.push(
                format!("word.{word}"),
                uniform_tensor(&mut rng, &[dt], 0.5),
            );
        }
        c
    }
}

fn push_ln<S: Scalar>(c: &mut Container<S>, name: &str, dim: usize, _rng: &mut ChaCha8Rng) {
    c.push(format!("{name}.gamma"), Tensor::new(vec![S::one(); dim], vec![dim]));
    c.push(format!("{name}.beta"), Tensor::zeros(&[dim]));
}

fn push_block<S: Scalar>(c: &mut Container<S>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    let bound = fan_in_bound(d) * 0.5;
    push_ln(c, &format!("{prefix}.ln1"), d, rng);
    for w in ["wq", "wk", "wv", "wo"] {
        c.push(format!("{prefix}.attn.{w}"), uniform_tensor(rng, &[d, d], bound));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        c.push(format!("{prefix}.attn.{b}"), uniform_tensor(rng, &[d], 0.02));
    }
    push_ln(c, &format!("{prefix}.ln2"), d, rng);
    c.push(format!("{prefix}.mlp.w1"), uniform_tensor(rng, &[d, 4 * d], fan_in_bound(d) * 0.5));
    c.push(format!("{prefix}.mlp.b1"), uniform_tensor(rng, &[4 * d], 0.02));
    c.push(format!("{prefix}.mlp.w2"), uniform_tensor(rng, &[4 * d, d], fan_in_bound(4 * d) * 0.5));
    c.push(format!("{prefix}.mlp.b2"), uniform_tensor(rng, &[d], 0.02));
}

struct AttnHead<S: Scalar> {
    wq: Tensor<S>,
    bq: Tensor<S>,
    wk: Tensor<S>,
    bk: Tensor<S>,
    wv: Tensor<S>,
    bv: Tensor<S>,
}

struct TransformerBlock<S: Scalar> {
    ln1: (Tensor<S>, Tensor<S>),
    heads: Vec<AttnHead<S>>,
    wo: Tensor<S>,
    bo: Tensor<S>,
    ln2: (Tensor<S>, Tensor<S>),
    w1: Tensor<S>,
    b1: Tensor<S>,
    w2: Tensor<S>,
    b2: Tensor<S>,
}

pub struct VitBackbone<S: Scalar> {
    arch: VitArch,
    spec: BackboneSpec,
    patch_embed: Tensor<S>,
    class_embed: Tensor<S>,
    pos_embed: Tensor<S>,
    ln_pre: (Tensor<S>, Tensor<S>),
    vision_blocks: Vec<TransformerBlock<S>>,
    ln_post: (Tensor<S>, Tensor<S>),
    text_pos_embed: Tensor<S>,
    text_blocks: Vec<TransformerBlock<S>>,
    ln_final: (Tensor<S>, Tensor<S>),
    text_proj: Tensor<S>,
    sos: Tensor<S>,
    eos: Tensor<S>,
    words: BTreeMap<String, Tensor<S>>,
    checksum: String,
}

fn split_heads<S: Scalar>(
    c: &Container<S>,
    prefix: &str,
    d: usize,
    heads: usize,
) -> Result<Vec<AttnHead<S>>> {
    if d % heads != 0 {
        return Err(Error::Load(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let take_cols = |t: &Tensor<S>, h: usize| -> Tensor<S> {
        let mut data = Vec::with_capacity(d * dh);
        for row in 0..d {
            data.extend_from_slice(&t.data[row * d + h * dh..row * d + (h + 1) * dh]);
        }
        Tensor::new(data, vec![d, dh])
    };
    let take_bias = |t: &Tensor<S>, h: usize| -> Tensor<S> {
        Tensor::new(t.data[h * dh..(h + 1) * dh].to_vec(), vec![dh])
    };
    let wq = c.require(&format!("{prefix}.wq"))?;
    let wk = c.require(&format!("{prefix}.wk"))?;
    let wv = c.require(&format!("{prefix}.wv"))?;
    let bq = c.require(&format!("{prefix}.bq"))?;
    let bk = c.require(&format!("{prefix}.bk"))?;
    let bv = c.require(&format!("{prefix}.bv"))?;
    Ok((0..heads)
        .map(|h| AttnHead {
            wq: take_cols(wq, h),
            bq: take_bias(bq, h),
            wk: take_cols(wk, h),
            bk: take_bias(bk, h),
            wv: take_cols(wv, h),
            bv: take_bias(bv, h),
        })
        .collect())
}

fn load_block<S: Scalar>(
    c: &Container<S>,
    prefix: &str,
    d: usize,
    heads: usize,
) -> Result<TransformerBlock<S>> {
    Ok(TransformerBlock {
        ln1: (
            c.require(&format!("{prefix}.ln1.gamma"))?.clone(),
            c.require(&format!("{prefix}.ln1.beta"))?.clone(),
        ),
        heads: split_heads(c, &format!("{prefix}.attn"), d, heads)?,
        wo: c.require(&format!("{prefix}.attn.wo"))?.clone(),
        bo: c.require(&format!("{prefix}.attn.bo"))?.clone(),
        ln2: (
            c.require(&format!("{prefix}.ln2.gamma"))?.clone(),
            c.require(&format!("{prefix}.ln2.beta"))?.clone(),
        ),
        w1: c.require(&format!("{prefix}.mlp.w1"))?.clone(),
        b1: c.require(&format!("{prefix}.mlp.b1"))?.clone(),
        w2: c.require(&format!("{prefix}.mlp.w2"))?.clone(),
        b2: c.require(&format!("{prefix}.mlp.b2"))?.clone(),
    })
}

impl<S: Scalar> VitBackbone<S> {
    pub fn load(path: &Path, tap_after_norm: bool) -> Result<Self> {
        let container = Container::<S>::load(path)?;
        Self::from_container(&container, tap_after_norm)
    }

    pub fn from_container(container: &Container<S>, tap_after_norm: bool) -> Result<Self> {
        let arch = VitArch::from_manifest(&container.text)?;
        let grid_side = arch.grid_side();
        let spec = BackboneSpec {
            kind: BackboneKind::Pretrained,
            input_size: arch.input_size,
            tap_layers: arch.tap_layers.clone(),
            vision_dim: arch.vision_dim,
            text_dim: arch.text_dim,
            grid_side,
            depth: arch.depth,
            text_depth: arch.text_depth,
            text_ctx: arch.text_ctx,
            tap_after_norm,
        };
        spec.validate()?;

        let mut vision_blocks = Vec::with_capacity(arch.depth);
        for i in 0..arch.depth {
            vision_blocks.push(load_block(
                container,
                &format!("vision.block{i}"),
                arch.vision_dim,
                arch.heads,
            )?);
        }
        let mut text_blocks = Vec::with_capacity(arch.text_depth);
        for i in 0..arch.text_depth {
            text_blocks.push(load_block(
                container,
                &format!("text.block{i}"),
                arch.text_dim,
                arch.text_heads,
            )?);
        }
        let mut words = BTreeMap::new();
        for (name, tensor) in &container.arrays {
            if let Some(word) = name.strip_prefix("word.") {
                words.insert(word.to_string(), tensor.clone());
            }
        }
        let pos_embed = container.require("vision.pos_embed")?.clone();
        let expected_rows = grid_side * grid_side + 1;
        if pos_embed.rows() != expected_rows {
            return Err(Error::Load(format!(
                "vision.pos_embed has {} rows; the {}px/{} patch grid needs {expected_rows}",
                pos_embed.rows(),
                arch.input_size,
                arch.patch
            )));
        }

        let mut hasher = ChecksumBuilder::new();
        for (name, tensor) in &container.arrays {
            hasher.add(name, tensor);
        }
        let checksum = hasher.finish();

        Ok(VitBackbone {
            spec,
            patch_embed: container.require("vision.patch_embed")?.clone(),
            class_embed: container.require("vision.class_embed")?.clone(),
            pos_embed,
            ln_pre: (
                container.require("vision.ln_pre.gamma")?.clone(),
                container.require("vision.ln_pre.beta")?.clone(),
            ),
            vision_blocks,
            ln_post: (
                container.require("vision.ln_post.gamma")?.clone(),
                container.require("vision.ln_post.beta")?.clone(),
            ),
            text_pos_embed: container.require("text.pos_embed")?.clone(),
            text_blocks,
            ln_final: (
                container.require("text.ln_final.gamma")?.clone(),
                container.require("text.ln_final.beta")?.clone(),
            ),
            text_proj: container.require("text.proj")?.clone(),
            sos: container.require("text.sos")?.clone(),
            eos: container.require("text.eos")?.clone(),
            words,
            arch,
            checksum,
        })
    }
}

// ── Eager transformer math (vision path; frozen, gradient-free) ─────────

const LN_EPS: f64 = 1e-5;

fn layernorm_affine<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Tensor<S> {
    let (r, c) = (x.rows(), x.cols());
    let cn = S::from_f64(c as f64);
    let eps = S::from_f64(LN_EPS);
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let mean = row.iter().fold(S::zero(), |a, &b| a + b) / cn;
        let var = row
            .iter()
            .fold(S::zero(), |a, &b| a + (b - mean) * (b - mean))
            / cn;
        let inv = (var + eps).sqrt().recip();
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) * inv * gamma.data[j] + beta.data[j];
        }
    }
    Tensor::new(out, x.shape.clone())
}

fn add_rowvec_eager<S: Scalar>(x: &Tensor<S>, v: &Tensor<S>) -> Tensor<S> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = x.data.clone();
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] += v.data[j];
        }
    }
    Tensor::new(out, x.shape.clone())
}

fn softmax_rows_eager<S: Scalar>(x: &mut Tensor<S>) {
    let (r, c) = (x.rows(), x.cols());
    for i in 0..r {
        let row = &mut x.data[i * c..(i + 1) * c];
        let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut denom = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
}

fn block_forward_eager<S: Scalar>(x: &Tensor<S>, block: &TransformerBlock<S>) -> Tensor<S> {
    let normed = layernorm_affine(x, &block.ln1.0, &block.ln1.1);
    let dh = block.heads[0].wq.cols();
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let head_outputs: Vec<Tensor<S>> = block
        .heads
        .iter()
        .map(|head| {
            let q = add_rowvec_eager(&normed.matmul(&head.wq), &head.bq);
            let k = add_rowvec_eager(&normed.matmul(&head.wk), &head.bk);
            let v = add_rowvec_eager(&normed.matmul(&head.wv), &head.bv);
            let mut scores = q.matmul_nt(&k).map(|s| s * scale);
            softmax_rows_eager(&mut scores);
            scores.matmul(&v)
        })
        .collect();
    // Concatenate heads along columns.
    let r = x.rows();
    let total: usize = head_outputs.iter().map(|t| t.cols()).sum();
    let mut ctx = Vec::with_capacity(r * total);
    for i in 0..r {
        for h in &head_outputs {
            let c = h.cols();
            ctx.extend_from_slice(&h.data[i * c..(i + 1) * c]);
        }
    }
    let ctx = Tensor::new(ctx, vec![r, total]);
    let attn_out = add_rowvec_eager(&ctx.matmul(&block.wo), &block.bo);
    let x = x.zip(&attn_out, |a, b| a + b);

    let normed2 = layernorm_affine(&x, &block.ln2.0, &block.ln2.1);
    let hidden = add_rowvec_eager(&normed2.matmul(&block.w1), &block.b1)
        .map(|v| v * sigmoid_eager(S::from_f64(1.702) * v));
    let mlp_out = add_rowvec_eager(&hidden.matmul(&block.w2), &block.b2);
    x.zip(&mlp_out, |a, b| a + b)
}

fn sigmoid_eager<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

// ── Tape-side transformer block (text path; differentiable inputs) ──────

fn block_forward_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    block: &TransformerBlock<S>,
    causal_mask: Option<NodeId>,
) -> NodeId {
    let eps = S::from_f64(LN_EPS);
    let g1 = tape.constant(block.ln1.0.clone());
    let b1 = tape.constant(block.ln1.1.clone());
    let normed = tape.layernorm_rows(x, eps);
    let normed = tape.mul_rowvec(normed, g1);
    let normed = tape.add_rowvec(normed, b1);

    let dh = block.heads[0].wq.cols();
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let mut head_nodes = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        let wq = tape.constant(head.wq.clone());
        let bq = tape.constant(head.bq.clone());
        let wk = tape.constant(head.wk.clone());
        let bk = tape.constant(head.bk.clone());
        let wv = tape.constant(head.wv.clone());
        let bv = tape.constant(head.bv.clone());
        let q = tape.matmul(normed, wq);
        let q = tape.add_rowvec(q, bq);
        let k = tape.matmul(normed, wk);
        let k = tape.add_rowvec(k, bk);
        let v = tape.matmul(normed, wv);
        let v = tape.add_rowvec(v, bv);
        let scores = tape.matmul_nt(q, k);
        let mut scores = tape.scale(scores, scale);
        if let Some(mask) = causal_mask {
            scores = tape.add(scores, mask);
        }
        let attn = tape.softmax_rows(scores);
        head_nodes.push(tape.matmul(attn, v));
    }
    let ctx = tape.concat_cols(&head_nodes);
    let wo = tape.constant(block.wo.clone());
    let bo = tape.constant(block.bo.clone());
    let attn_out = tape.matmul(ctx, wo);
    let attn_out = tape.add_rowvec(attn_out, bo);
    let x = tape.add(x, attn_out);

    let g2 = tape.constant(block.ln2.0.clone());
    let b2c = tape.constant(block.ln2.1.clone());
    let normed2 = tape.layernorm_rows(x, eps);
    let normed2 = tape.mul_rowvec(normed2, g2);
    let normed2 = tape.add_rowvec(normed2, b2c);
    let w1 = tape.constant(block.w1.clone());
    let b1m = tape.constant(block.b1.clone());
    let hidden = tape.matmul(normed2, w1);
    let hidden = tape.add_rowvec(hidden, b1m);
    let hidden = tape.quick_gelu(hidden);
    let w2 = tape.constant(block.w2.clone());
    let b2m = tape.constant(block.b2.clone());
    let mlp_out = tape.matmul(hidden, w2);
    let mlp_out = tape.add_rowvec(mlp_out, b2m);
    tape.add(x, mlp_out)
}

// ── Unified backbone ─────────────────────────────────────────────────────

pub enum Backbone<S: Scalar> {
    Toy(ToyBackbone<S>),
    Vit(VitBackbone<S>),
}

impl<S: Scalar> Backbone<S> {
    pub fn spec(&self) -> &BackboneSpec {
        match self {
            Backbone::Toy(t) => &t.spec,
            Backbone::Vit(v) => &v.spec,
        }
    }

    /// Checksum of all frozen encoder weights; must never change.
    pub fn weights_checksum(&self) -> &str {
        match self {
            Backbone::Toy(t) => &t.checksum,
            Backbone::Vit(v) => &v.checksum,
        }
    }

    /// Identity string stored in checkpoints for compatibility checks.
    pub fn fingerprint(&self) -> String {
        let spec = self.spec();
        format!(
            "{}:d{}:dt{}:g{}:taps{:?}:{}",
            spec.kind.as_str(),
            spec.vision_dim,
            spec.text_dim,
            spec.grid_side,
            spec.tap_layers,
            self.weights_checksum()
        )
    }

    /// Initial value for the learnable softmax logit scale.
    pub fn logit_scale_init(&self) -> f64 {
        match self {
            Backbone::Toy(_) => 1.0 / 0.07,
            Backbone::Vit(v) => v.arch.logit_scale,
        }
    }

    /// Resize to the model input side and standardize channels (the toy
    /// backbone uses identity normalization).
    pub fn preprocess(&self, image: &Image<S>) -> Result<Image<S>> {
        if !image.all_finite() {
            return Err(Error::Input("image contains non-finite pixels".into()));
        }
        let side = self.spec().input_size;
        let resized = image.resize_bilinear(side, side);
        match self {
            Backbone::Toy(_) => Ok(resized),
            Backbone::Vit(v) => {
                let mut data = resized.data;
                let mean: Vec<S> = v.arch.mean.iter().map(|&m| S::from_f64(m)).collect();
                let std: Vec<S> = v.arch.std.iter().map(|&s| S::from_f64(s)).collect();
                for px in data.chunks_mut(3) {
                    for c in 0..3 {
                        px[c] = (px[c] - mean[c]) / std[c];
                    }
                }
                Ok(Image::new(side, side, data))
            }
        }
    }

    /// Run the frozen vision encoder and collect one `[G, d]` patch grid per
    /// configured tap layer (class token excluded).
    pub fn encode_image_multilevel(&self, image: &Image<S>) -> Result<FeatureStack<S>> {
        let spec = self.spec();
        if image.h != spec.input_size || image.w != spec.input_size {
            return Err(Error::Input(format!(
                "expected a preprocessed {0}x{0} image, found {1}x{2}",
                spec.input_size, image.h, image.w
            )));
        }
        if !image.all_finite() {
            return Err(Error::Input("image contains non-finite pixels".into()));
        }
        let stack = match self {
            Backbone::Toy(t) => t.encode_image(image),
            Backbone::Vit(v) => v.encode_image(image),
        };
        stack.validate(spec)?;
        Ok(stack)
    }

    /// Encode a token-embedding sequence `[L, text_dim]` into a unit-norm
    /// vector on the tape. Gradient flows to learnable rows of the input
    /// sequence only; encoder weights are tape constants.
    pub fn text_encode_on_tape(&self, tape: &mut Tape<S>, seq: NodeId) -> Result<NodeId> {
        let spec = self.spec();
        let len = tape.value(seq).rows();
        if len > spec.text_ctx {
            return Err(Error::Input(format!(
                "token sequence of length {len} exceeds text context {}",
                spec.text_ctx
            )));
        }
        if tape.value(seq).cols() != spec.text_dim {
            return Err(Error::Input(format!(
                "token embeddings have width {}, expected {}",
                tape.value(seq).cols(),
                spec.text_dim
            )));
        }
        match self {
            Backbone::Toy(t) => Ok(t.encode_text_on_tape(tape, seq)),
            Backbone::Vit(v) => Ok(v.encode_text_on_tape(tape, seq)),
        }
    }

    /// Frozen single-token embedding of a word.
    pub fn embed_word(&self, word: &str) -> Result<Tensor<S>> {
        match self {
            Backbone::Toy(t) => Ok(word_embedding(t.word_seed, word, t.spec.text_dim)),
            Backbone::Vit(v) => v.words.get(word).cloned().ok_or_else(|| {
                Error::Config(format!(
                    "weights container provides no embedding for word `{word}`"
                ))
            }),
        }
    }

    pub fn sos_embedding(&self) -> Tensor<S> {
        match self {
            Backbone::Toy(t) => t.sos.clone(),
            Backbone::Vit(v) => v.sos.clone(),
        }
    }

    pub fn eos_embedding(&self) -> Tensor<S> {
        match self {
            Backbone::Toy(t) => t.eos.clone(),
            Backbone::Vit(v) => v.eos.clone(),
        }
    }
}

/// Eager convenience wrapper over [`Backbone::text_encode_on_tape`].
pub fn encode_text<S: Scalar>(backbone: &Backbone<S>, tokens: &Tensor<S>) -> Result<Tensor<S>> {
    if !tokens.all_finite() {
        return Err(Error::Input("token embeddings contain non-finite values".into()));
    }
    let mut tape = Tape::new();
    let seq = tape.constant(tokens.clone());
    let out = backbone.text_encode_on_tape(&mut tape, seq)?;
    Ok(tape.value(out).clone())
}

impl<S: Scalar> ToyBackbone<S> {
    fn patchify(&self, image: &Image<S>) -> Tensor<S> {
        let g = self.spec.grid_side;
        let p = self.patch;
        let mut rows = Vec::with_capacity(g * g * p * p * 3);
        for gy in 0..g {
            for gx in 0..g {
                for y in 0..p {
                    for x in 0..p {
                        let px = ((gy * p + y) * image.w + gx * p + x) * 3;
                        rows.extend_from_slice(&image.data[px..px + 3]);
                    }
                }
            }
        }
        Tensor::new(rows, vec![g * g, p * p * 3])
    }

    fn encode_image(&self, image: &Image<S>) -> FeatureStack<S> {
        let mut x = self.patchify(image).matmul(&self.patch_embed);
        let ones = Tensor::new(vec![S::one(); self.spec.vision_dim], vec![self.spec.vision_dim]);
        let zeros = Tensor::zeros(&[self.spec.vision_dim]);
        let mut layers = Vec::new();
        for (idx, (w, b)) in self.vision_layers.iter().enumerate() {
            let layer = idx + 1;
            x = add_rowvec_eager(&x.matmul(w), b).map(|v| v.tanh());
            if self.spec.tap_layers.contains(&layer) {
                let tapped = if self.spec.tap_after_norm {
                    layernorm_affine(&x, &ones, &zeros)
                } else {
                    x.clone()
                };
                layers.push((layer, tapped));
            }
        }
        FeatureStack { layers }
    }

    fn encode_text_on_tape(&self, tape: &mut Tape<S>, seq: NodeId) -> NodeId {
        let mut x = seq;
        for (w, b) in &self.text_layers {
            let wc = tape.constant(w.clone());
            let bc = tape.constant(b.clone());
            let lin = tape.matmul(x, wc);
            let lin = tape.add_rowvec(lin, bc);
            x = tape.tanh(lin);
        }
        let pooled = tape.mean_axis0(x);
        let pooled = tape.reshape(pooled, &[1, self.spec.text_dim]);
        let normed = tape.row_l2_normalize(pooled, S::from_f64(1e-8));
        tape.reshape(normed, &[self.spec.text_dim])
    }
}

impl<S: Scalar> VitBackbone<S> {
    fn encode_image(&self, image: &Image<S>) -> FeatureStack<S> {
        let g = self.spec.grid_side;
        let p = self.arch.patch;
        let d = self.spec.vision_dim;
        // Stride-p patchify; for input sizes not divisible by p the trailing
        // pixels are dropped, matching conv-style floor arithmetic.
        let mut rows = Vec::with_capacity(g * g * p * p * 3);
        for gy in 0..g {
            for gx in 0..g {
                for y in 0..p {
                    for x in 0..p {
                        let px = ((gy * p + y) * image.w + gx * p + x) * 3;
                        rows.extend_from_slice(&image.data[px..px + 3]);
                    }
                }
            }
        }
        let patches = Tensor::new(rows, vec![g * g, p * p * 3]).matmul(&self.patch_embed);
        let mut data = Vec::with_capacity((g * g + 1) * d);
        data.extend_from_slice(&self.class_embed.data);
        data.extend_from_slice(&patches.data);
        let mut x = Tensor::new(data, vec![g * g + 1, d]);
        x = x.zip(&self.pos_embed, |a, b| a + b);
        x = layernorm_affine(&x, &self.ln_pre.0, &self.ln_pre.1);

        let mut layers = Vec::new();
        for (idx, block) in self.vision_blocks.iter().enumerate() {
            let layer = idx + 1;
            x = block_forward_eager(&x, block);
            if self.spec.tap_layers.contains(&layer) {
                let patch_rows = Tensor::new(x.data[d..].to_vec(), vec![g * g, d]);
                let tapped = if self.spec.tap_after_norm {
                    layernorm_affine(&patch_rows, &self.ln_post.0, &self.ln_post.1)
                } else {
                    patch_rows
                };
                layers.push((layer, tapped));
            }
        }
        FeatureStack { layers }
    }

    fn encode_text_on_tape(&self, tape: &mut Tape<S>, seq: NodeId) -> NodeId {
        let len = tape.value(seq).rows();
        let dt = self.spec.text_dim;
        let pos = Tensor::new(self.text_pos_embed.data[..len * dt].to_vec(), vec![len, dt]);
        let pos = tape.constant(pos);
        let mut x = tape.add(seq, pos);

        let mut mask_data = vec![S::zero(); len * len];
        for i in 0..len {
            for j in (i + 1)..len {
                mask_data[i * len + j] = S::from_f64(-1e9);
            }
        }
        let mask = tape.constant(Tensor::new(mask_data, vec![len, len]));
        for block in &self.text_blocks {
            x = block_forward_on_tape(tape, x, block, Some(mask));
        }
        let gf = tape.constant(self.ln_final.0.clone());
        let bf = tape.constant(self.ln_final.1.clone());
        let x = tape.layernorm_rows(x, S::from_f64(LN_EPS));
        let x = tape.mul_rowvec(x, gf);
        let x = tape.add_rowvec(x, bf);
        // Pool at the final (EOS) position, then project and normalize.
        let eot = tape.slice_rows(x, len - 1, len);
        let proj = tape.constant(self.text_proj.clone());
        let projected = tape.matmul(eot, proj);
        let normed = tape.row_l2_normalize(projected, S::from_f64(1e-8));
        tape.reshape(normed, &[dt])
    }
}

struct ChecksumBuilder {
    hasher: Sha256,
}

impl ChecksumBuilder {
    fn new() -> Self {
        ChecksumBuilder {
            hasher: Sha256::new(),
        }
    }

    fn add<S: Scalar>(&mut self, name: &str, tensor: &Tensor<S>) {
        self.hasher.update(name.as_bytes());
        let mut bytes = Vec::with_capacity(tensor.len() * S::WIDTH);
        for &v in &tensor.data {
            v.write_le(&mut bytes);
        }
        self.hasher.update(&bytes);
    }

    fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}
