//! Frozen toy dual encoders with adapter mount points.
//!
//! Both towers are pre-norm transformers. With adapters enabled, block `l`
//! computes `y = h + FFN(LN(h)) + Branch(FFN(LN(h)))` where `h` is the
//! attention residual; otherwise `y = h + FFN(LN(h))`.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::adapters::{text_adapter, video_adapter};
use crate::cmi::{CmiError, Modality};
use crate::config::{AdapterKind, ModelConfig};
use crate::layout::{model_layout, text_block, vision_block, TAU_PATH};
use crate::nn::{layer_norm, MASK_NEG};
use crate::numerics::{seeded_init, Graph, NumericsError, ParamStore, Tensor, Var};

/// Token id excluded from text attention.
pub const PAD: u16 = 0;
pub const BOS: u16 = 1;
pub const EOS: u16 = 2;
/// Number of reserved special ids at the bottom of the vocabulary.
pub const SPECIAL_TOKENS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("token id {id} out of vocabulary of size {vocab}")]
    Token { id: u16, vocab: usize },
    #[error("{frames} frames exceed the maximum of {max}")]
    TooManyFrames { frames: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Cmi(#[from] CmiError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Frozen backbone, tunable adapters and the temperature in one store.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
}

impl ModelState {
    /// Builds every tensor of the layout from `(seed, path)`; `tau` starts at
    /// `tau_init`.
    pub fn new(config: ModelConfig, seed: u64, tau_init: f64) -> Self {
        let mut params = ParamStore::new();
        for spec in model_layout(&config) {
            let t = if spec.path == TAU_PATH {
                Tensor::full(&[1], tau_init)
            } else {
                seeded_init(&spec.shape, spec.init, seed, &spec.path)
            };
            params.insert(spec.path, t, spec.group.tunable());
        }
        Self { config, seed, params }
    }

    pub fn model(&self) -> Model<'_> {
        Model {
            config: &self.config,
            params: &self.params,
            detach: None,
        }
    }

    pub fn tau(&self) -> f64 {
        self.params.get(TAU_PATH).expect("tau is always present").item()
    }

    pub fn has_adapters(&self) -> bool {
        self.config.adapter.kind != AdapterKind::None
    }
}

/// Borrowed view of a configuration and a parameter store, the input of
/// every forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Model<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a ParamStore,
    /// Treat this modality's downsample weights as constants, cutting its
    /// gradient path into shared parameters.
    pub detach: Option<Modality>,
}

impl<'a> Model<'a> {
    pub fn new(config: &'a ModelConfig, params: &'a ParamStore) -> Self {
        Self { config, params, detach: None }
    }
}

/// Paths the optimizer may update: every adapter tensor plus `tau`.
pub fn build_freeze_mask(state: &ModelState) -> BTreeSet<String> {
    state.params.tunable().clone()
}

fn shape_err(what: &'static str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> ModelError {
    ModelError::Shape {
        what,
        expected: format!("{expected:?}"),
        actual: format!("{actual:?}"),
    }
}

fn bind(m: Model<'_>, g: &mut Graph, path: &str) -> Result<Var, ModelError> {
    Ok(m.params.bind(g, path)?)
}

/// Activations of the first adapter-equipped block up to its FFN output.
///
/// Nothing before that point depends on a tunable tensor, so a caller that
/// evaluates the same batch many times under different adapter weights can
/// compute it once. Only valid for the frozen weights and inputs it was
/// built from.
#[derive(Clone, Debug)]
pub struct Stem {
    layer: usize,
    h: Tensor,
    ffn_in: Tensor,
    ffn_out: Tensor,
}

enum Flow {
    Done(Var),
    Parked { layer: usize, h: Var, ffn_in: Var, ffn_out: Var },
}

type Branch<'b> = dyn FnMut(&mut Graph, usize, Var, Var) -> Result<Var, ModelError> + 'b;

/// Runs blocks `from..layers`. With `park` set, stops at the first mounted
/// block once its FFN output exists.
#[allow(clippy::too_many_arguments)]
fn run_blocks(
    g: &mut Graph,
    m: Model<'_>,
    block: impl Fn(usize) -> crate::nn::BlockParams,
    mounted: &BTreeSet<usize>,
    mask: Option<Var>,
    mut x: Var,
    from: usize,
    park: bool,
    branch: &mut Branch<'_>,
) -> Result<Flow, ModelError> {
    for l in from..m.config.encoder.layers {
        let blk = block(l);
        if mounted.contains(&l) {
            let h = blk.attention_residual(m.params, g, x, mask)?;
            let ffn_in = blk.layer_norm2(m.params, g, h)?;
            let ffn_out = blk.mlp(m.params, g, ffn_in)?;
            if park {
                return Ok(Flow::Parked { layer: l, h, ffn_in, ffn_out });
            }
            x = finish_block(g, l, h, ffn_in, ffn_out, branch)?;
        } else {
            x = blk.forward(m.params, g, x, mask)?;
        }
    }
    Ok(Flow::Done(x))
}

fn finish_block(g: &mut Graph, l: usize, h: Var, ffn_in: Var, ffn_out: Var, branch: &mut Branch<'_>) -> Result<Var, ModelError> {
    let br = branch(g, l, ffn_in, ffn_out)?;
    let y = g.add(h, ffn_out)?;
    Ok(g.add(y, br)?)
}

/// Blocks of a tower starting either from its input or from a replayed stem.
#[allow(clippy::too_many_arguments)]
fn run_tower(
    g: &mut Graph,
    m: Model<'_>,
    block: impl Fn(usize) -> crate::nn::BlockParams,
    mounted: &BTreeSet<usize>,
    mask: Option<Var>,
    input: impl FnOnce(&mut Graph) -> Result<Var, ModelError>,
    stem: Option<&Stem>,
    branch: &mut Branch<'_>,
) -> Result<Var, ModelError> {
    let (x, from) = match stem {
        Some(st) => {
            if !mounted.contains(&st.layer) || mounted.range(..st.layer).next().is_some() {
                return Err(shape_err("stem layer", mounted.first(), st.layer));
            }
            let h = g.constant(st.h.clone());
            let ffn_in = g.constant(st.ffn_in.clone());
            let ffn_out = g.constant(st.ffn_out.clone());
            (finish_block(g, st.layer, h, ffn_in, ffn_out, branch)?, st.layer + 1)
        }
        None => (input(g)?, 0),
    };
    match run_blocks(g, m, block, mounted, mask, x, from, false, branch)? {
        Flow::Done(x) => Ok(x),
        Flow::Parked { .. } => unreachable!("parking disabled"),
    }
}

fn park(
    m: Model<'_>,
    block: impl Fn(usize) -> crate::nn::BlockParams,
    mounted: &BTreeSet<usize>,
    input: impl FnOnce(&mut Graph) -> Result<(Var, Option<Var>), ModelError>,
) -> Result<Option<Stem>, ModelError> {
    let mut g = Graph::new();
    let (x, mask) = input(&mut g)?;
    let mut never = |_: &mut Graph, _: usize, _: Var, _: Var| -> Result<Var, ModelError> { unreachable!("parked before any branch") };
    Ok(match run_blocks(&mut g, m, block, mounted, mask, x, 0, true, &mut never)? {
        Flow::Done(_) => None,
        Flow::Parked { layer, h, ffn_in, ffn_out } => Some(Stem {
            layer,
            h: g.value(h).clone(),
            ffn_in: g.value(ffn_in).clone(),
            ffn_out: g.value(ffn_out).clone(),
        }),
    })
}

fn mounted_layers(m: Model<'_>, adapters: bool, modality: bool) -> BTreeSet<usize> {
    if adapters && modality {
        m.config.adapter_layers().into_iter().collect()
    } else {
        BTreeSet::new()
    }
}

fn check_frames(m: Model<'_>, frames: &Tensor) -> Result<(usize, usize), ModelError> {
    let e = &m.config.encoder;
    let s = frames.shape();
    if s.len() != 4 || s[2] != e.patches || s[3] != e.patch_dim {
        return Err(shape_err("frame batch [B, F, patches, patch_dim]", ["B", "F", &e.patches.to_string(), &e.patch_dim.to_string()], s));
    }
    if s[1] > e.max_frames {
        return Err(ModelError::TooManyFrames { frames: s[1], max: e.max_frames });
    }
    Ok((s[0], s[1]))
}

/// Patch embedding, `[CLS]`, positions and the pre-norm: `[B·F, N_P+1, d_v]`.
fn vision_input(g: &mut Graph, m: Model<'_>, frames: &Tensor) -> Result<Var, ModelError> {
    let e = &m.config.encoder;
    let n = frames.shape()[0] * frames.shape()[1];
    let raw = g.constant(frames.reshape(&[n, e.patches, e.patch_dim])?);
    let proj = bind(m, g, "vision.patch_proj")?;
    let patches = g.matmul(raw, proj)?;
    let cls = bind(m, g, "vision.class_emb")?;
    let cls = crate::adapters::expand(g, cls, &[n, 1])?;
    let x = g.concat(&[cls, patches], 1)?;
    let pos = bind(m, g, "vision.pos_emb")?;
    let x = g.add(x, pos)?;
    Ok(layer_norm(m.params, g, "vision.ln_pre", x)?)
}

/// Final-layer `[CLS]` features after the output norm, `[B, F, d_v]`.
///
/// `frames: [B, F, N_P, patch_dim]`. All frames of the batch run through the
/// tower together as `[B·F, N_P+1, d_v]`; the video adapter regroups them
/// by clip to mix information across frames.
pub fn encode_frames(g: &mut Graph, m: Model<'_>, frames: &Tensor, adapters: bool) -> Result<Var, ModelError> {
    encode_frames_with(g, m, frames, adapters, None)
}

/// [`encode_frames`] resuming from a [`vision_stem`] of the same frames.
pub fn encode_frames_with(g: &mut Graph, m: Model<'_>, frames: &Tensor, adapters: bool, stem: Option<&Stem>) -> Result<Var, ModelError> {
    let (b, f) = check_frames(m, frames)?;
    let e = &m.config.encoder;
    let mounted = mounted_layers(m, adapters, m.config.adapter.video);
    let mut branch = |g: &mut Graph, l: usize, ffn_in: Var, ffn_out: Var| Ok(video_adapter(m, g, l, (b, f), ffn_in, ffn_out)?);
    let x = run_tower(
        g,
        m,
        |l| vision_block(l, e.vision_heads()),
        &mounted,
        None,
        |g| vision_input(g, m, frames),
        stem,
        &mut branch,
    )?;
    let cls = g.slice(x, 1, 0, 1)?;
    let cls = g.reshape(cls, &[b, f, e.d_v])?;
    Ok(layer_norm(m.params, g, "vision.ln_post", cls)?)
}

/// The frozen part of the vision tower for `frames`, or `None` when no
/// vision block carries an adapter.
pub fn vision_stem(m: Model<'_>, frames: &Tensor) -> Result<Option<Stem>, ModelError> {
    check_frames(m, frames)?;
    let e = &m.config.encoder;
    let mounted = mounted_layers(m, true, m.config.adapter.video);
    park(m, |l| vision_block(l, e.vision_heads()), &mounted, |g| Ok((vision_input(g, m, frames)?, None)))
}

/// Additive attention bias `[B, 1, T]` that hides `PAD` keys.
pub fn padding_mask(tokens: &[Vec<u16>]) -> Tensor {
    let t = tokens[0].len();
    let data = tokens
        .iter()
        .flat_map(|row| row.iter().map(|&id| if id == PAD { MASK_NEG } else { 0.0 }))
        .collect();
    Tensor::new(&[tokens.len(), 1, t], data).expect("rectangular batch")
}

fn check_tokens(m: Model<'_>, tokens: &[Vec<u16>]) -> Result<(usize, usize), ModelError> {
    let e = &m.config.encoder;
    let b = tokens.len();
    if b == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let t = tokens[0].len();
    if t == 0 || t > e.max_text_len {
        return Err(shape_err("text length", format!("1..={}", e.max_text_len), t));
    }
    if let Some(row) = tokens.iter().find(|r| r.len() != t) {
        return Err(shape_err("text length", t, row.len()));
    }
    if let Some(&id) = tokens.iter().flatten().find(|&&id| id as usize >= e.vocab_size) {
        return Err(ModelError::Token { id, vocab: e.vocab_size });
    }
    Ok((b, t))
}

fn text_input(g: &mut Graph, m: Model<'_>, tokens: &[Vec<u16>]) -> Result<Var, ModelError> {
    let e = &m.config.encoder;
    let (b, t) = (tokens.len(), tokens[0].len());
    let table = m.params.get("text.token_emb").ok_or_else(|| NumericsError::UnknownParam("text.token_emb".into()))?;
    let mut data = Vec::with_capacity(b * t * e.d_t);
    for &id in tokens.iter().flatten() {
        data.extend_from_slice(table.row(id as usize));
    }
    // the embedding table is frozen, so the lookup happens outside the graph
    let x = g.constant(Tensor::new(&[b, t, e.d_t], data)?);
    let pos = bind(m, g, "text.pos_emb")?;
    let pos = g.slice(pos, 0, 0, t)?;
    Ok(g.add(x, pos)?)
}

/// Text features read at the last sequence position after the final norm,
/// `[B, d_t]`. Sequences must share one padded length.
pub fn encode_text(g: &mut Graph, m: Model<'_>, tokens: &[Vec<u16>], adapters: bool) -> Result<Var, ModelError> {
    encode_text_with(g, m, tokens, adapters, None)
}

/// [`encode_text`] resuming from a [`text_stem`] of the same tokens.
pub fn encode_text_with(g: &mut Graph, m: Model<'_>, tokens: &[Vec<u16>], adapters: bool, stem: Option<&Stem>) -> Result<Var, ModelError> {
    let (b, t) = check_tokens(m, tokens)?;
    let e = &m.config.encoder;
    let mask = g.constant(padding_mask(tokens));
    let mounted = mounted_layers(m, adapters, m.config.adapter.text);
    let mut branch = |g: &mut Graph, l: usize, ffn_in: Var, ffn_out: Var| Ok(text_adapter(m, g, l, ffn_in, ffn_out, Some(mask))?);
    let x = run_tower(
        g,
        m,
        |l| text_block(l, e.text_heads()),
        &mounted,
        Some(mask),
        |g| text_input(g, m, tokens),
        stem,
        &mut branch,
    )?;
    let last = g.slice(x, 1, t - 1, t)?;
    let last = g.reshape(last, &[b, e.d_t])?;
    Ok(layer_norm(m.params, g, "text.ln_final", last)?)
}

/// The frozen part of the text tower for `tokens`.
pub fn text_stem(m: Model<'_>, tokens: &[Vec<u16>]) -> Result<Option<Stem>, ModelError> {
    check_tokens(m, tokens)?;
    let e = &m.config.encoder;
    let mounted = mounted_layers(m, true, m.config.adapter.text);
    park(m, |l| text_block(l, e.text_heads()), &mounted, |g| {
        let x = text_input(g, m, tokens)?;
        let mask = g.constant(padding_mask(tokens));
        Ok((x, Some(mask)))
    })
}

/// Mean-pooled clip features projected into the joint space, `[B, embed_dim]`.
pub fn video_embedding(g: &mut Graph, m: Model<'_>, frames: &Tensor, adapters: bool) -> Result<Var, ModelError> {
    video_embedding_with(g, m, frames, adapters, None)
}

pub fn video_embedding_with(g: &mut Graph, m: Model<'_>, frames: &Tensor, adapters: bool, stem: Option<&Stem>) -> Result<Var, ModelError> {
    let per_frame = encode_frames_with(g, m, frames, adapters, stem)?;
    let pooled = crate::retrieval::pool_video(g, per_frame)?;
    let proj = bind(m, g, "vision.proj")?;
    Ok(g.matmul(pooled, proj)?)
}

/// Text features projected into the joint space, `[B, embed_dim]`.
pub fn text_embedding(g: &mut Graph, m: Model<'_>, tokens: &[Vec<u16>], adapters: bool) -> Result<Var, ModelError> {
    text_embedding_with(g, m, tokens, adapters, None)
}

pub fn text_embedding_with(g: &mut Graph, m: Model<'_>, tokens: &[Vec<u16>], adapters: bool, stem: Option<&Stem>) -> Result<Var, ModelError> {
    let feats = encode_text_with(g, m, tokens, adapters, stem)?;
    let proj = bind(m, g, "text.proj")?;
    Ok(g.matmul(feats, proj)?)
}
