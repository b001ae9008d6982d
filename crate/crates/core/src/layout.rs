//! Complete parameter inventory of a model configuration.
//!
//! Initialization and parameter accounting both walk this list, so a
//! tensor can never be counted without being built (or vice versa).

use crate::adapters::{branch_prefix, trm_params};
use crate::cmi::{factor_path, shared_path, Modality};
use crate::config::{AdapterKind, ModelConfig, TemporalMode};
use crate::nn::BlockParams;
use crate::numerics::InitScheme;

/// Accounting bucket of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Backbone,
    Down,
    Trm,
    Up,
    /// `[CC]` token and frame-position embedding.
    Temporal,
    Calibration,
    /// Shared matrix and per-modality factors.
    Cmi,
    Temperature,
}

impl Group {
    pub fn tunable(self) -> bool {
        self != Group::Backbone
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Backbone => "backbone",
            Self::Down => "down",
            Self::Trm => "trm",
            Self::Up => "up",
            Self::Temporal => "temporal",
            Self::Calibration => "calibration",
            Self::Cmi => "cmi",
            Self::Temperature => "tau",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: InitScheme,
    pub group: Group,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub const TAU_PATH: &str = "tau";

struct Builder(Vec<ParamSpec>);

impl Builder {
    fn put(&mut self, path: impl Into<String>, shape: &[usize], init: InitScheme, group: Group) {
        self.0.push(ParamSpec {
            path: path.into(),
            shape: shape.to_vec(),
            init,
            group,
        });
    }

    fn block(&mut self, block: &BlockParams, d: usize, hidden: usize, group: Group) {
        for (name, shape, init) in BlockParams::specs(d, hidden) {
            self.put(format!("{}.{name}", block.prefix), &shape, init, group);
        }
    }
}

pub fn vision_block(layer: usize, heads: usize) -> BlockParams {
    BlockParams::new(format!("vision.blocks.{layer}"), heads)
}

pub fn text_block(layer: usize, heads: usize) -> BlockParams {
    BlockParams::new(format!("text.blocks.{layer}"), heads)
}

/// Every parameter tensor of `cfg`, backbone first.
pub fn model_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    use InitScheme::*;
    let e = &cfg.encoder;
    let mut b = Builder(Vec::new());

    // vision tower
    b.put("vision.patch_proj", &[e.patch_dim, e.d_v], ScaledNormal, Group::Backbone);
    b.put("vision.class_emb", &[e.d_v], ScaledNormal, Group::Backbone);
    b.put("vision.pos_emb", &[e.patches + 1, e.d_v], ScaledNormal, Group::Backbone);
    b.put("vision.ln_pre.g", &[e.d_v], Ones, Group::Backbone);
    b.put("vision.ln_pre.b", &[e.d_v], Zeros, Group::Backbone);
    for l in 0..e.layers {
        b.block(&vision_block(l, e.vision_heads()), e.d_v, e.mlp_ratio * e.d_v, Group::Backbone);
    }
    b.put("vision.ln_post.g", &[e.d_v], Ones, Group::Backbone);
    b.put("vision.ln_post.b", &[e.d_v], Zeros, Group::Backbone);
    b.put("vision.proj", &[e.d_v, e.embed_dim], ScaledNormal, Group::Backbone);

    // text tower
    b.put("text.token_emb", &[e.vocab_size, e.d_t], ScaledNormal, Group::Backbone);
    b.put("text.pos_emb", &[e.max_text_len, e.d_t], ScaledNormal, Group::Backbone);
    for l in 0..e.layers {
        b.block(&text_block(l, e.text_heads()), e.d_t, e.mlp_ratio * e.d_t, Group::Backbone);
    }
    b.put("text.ln_final.g", &[e.d_t], Ones, Group::Backbone);
    b.put("text.ln_final.b", &[e.d_t], Zeros, Group::Backbone);
    b.put("text.proj", &[e.d_t, e.embed_dim], ScaledNormal, Group::Backbone);

    // adapters
    let a = &cfg.adapter;
    let dp = a.bottleneck;
    let cmi_layers = cfg.cmi_layers();
    for layer in cfg.adapter_layers() {
        for (modality, on, d) in [(Modality::Video, a.video, e.d_v), (Modality::Text, a.text, e.d_t)] {
            if !on {
                continue;
            }
            let prefix = branch_prefix(modality, layer);
            if cmi_layers.contains(&layer) {
                b.put(
                    factor_path(layer, modality),
                    &[d / cfg.cmi.rows, dp / cfg.cmi.cols],
                    ScaledNormal,
                    Group::Cmi,
                );
            } else {
                b.put(format!("{prefix}.down"), &[d, dp], ScaledNormal, Group::Down);
            }
            b.put(format!("{prefix}.up"), &[dp, d], Zeros, Group::Up);
            if a.kind != AdapterKind::Mv {
                continue;
            }
            b.block(&trm_params(modality, layer, a.trm_heads), dp, dp * a.trm_ffn_mult, Group::Trm);
            if modality == Modality::Video && a.temporal != TemporalMode::Basic {
                b.put(format!("{prefix}.cc"), &[dp], ScaledNormal, Group::Temporal);
                if a.frame_pos {
                    b.put(format!("{prefix}.frame_pos"), &[e.max_frames, dp], ScaledNormal, Group::Temporal);
                }
                if a.temporal == TemporalMode::Full {
                    let hidden = dp / a.shrink;
                    b.put(format!("{prefix}.cal.fc1.w"), &[2 * dp, hidden], ScaledNormal, Group::Calibration);
                    b.put(format!("{prefix}.cal.fc1.b"), &[hidden], Zeros, Group::Calibration);
                    b.put(format!("{prefix}.cal.fc2.w"), &[hidden, dp], Zeros, Group::Calibration);
                    b.put(format!("{prefix}.cal.fc2.b"), &[dp], Ones, Group::Calibration);
                }
            }
        }
        if cmi_layers.contains(&layer) {
            b.put(shared_path(layer), &[cfg.cmi.rows, cfg.cmi.cols], ScaledNormal, Group::Cmi);
        }
    }
    b.put(TAU_PATH, &[1], Ones, Group::Temperature);
    b.0
}
