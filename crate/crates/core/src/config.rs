//! Model, adapter, data, and training configuration, plus the flat
//! `key = value` run-configuration file.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: invalid value `{value}` ({reason})")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration `{key}`: {reason}")]
    Invariant { key: String, reason: String },
}

impl ConfigError {
    /// The offending key, if the error is attributable to one.
    pub fn key(&self) -> Option<&str> {
        match self {
            Self::UnknownKey(k) => Some(k),
            Self::Value { key, .. } | Self::Invariant { key, .. } => Some(key),
            Self::Syntax { .. } => None,
        }
    }
}

fn invariant(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invariant {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Shapes of the frozen dual encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub layers: usize,
    pub heads: usize,
    /// Patches per frame.
    pub patches: usize,
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_frames: usize,
    /// Width of the shared joint embedding space both projections map into.
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    /// Vision heads when they differ from text heads (`None` = `heads`).
    pub text_heads: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_v: 48,
            d_t: 32,
            layers: 2,
            heads: 2,
            patches: 16,
            patch_dim: 12,
            vocab_size: 64,
            max_text_len: 8,
            max_frames: 4,
            embed_dim: 32,
            mlp_ratio: 4,
            text_heads: None,
        }
    }
}

impl EncoderConfig {
    /// CLIP ViT-B/16 shapes (12 frames, 77 text positions, 49408 tokens).
    pub fn clip_b16() -> Self {
        Self {
            d_v: 768,
            d_t: 512,
            layers: 12,
            heads: 12,
            patches: 196,
            patch_dim: 3 * 16 * 16,
            vocab_size: 49408,
            max_text_len: 77,
            max_frames: 12,
            embed_dim: 512,
            mlp_ratio: 4,
            text_heads: Some(8),
        }
    }

    pub fn vision_heads(&self) -> usize {
        self.heads
    }

    pub fn text_heads(&self) -> usize {
        self.text_heads.unwrap_or(self.heads)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("encoder.d_v", self.d_v),
            ("encoder.d_t", self.d_t),
            ("encoder.layers", self.layers),
            ("encoder.heads", self.heads),
            ("encoder.patches", self.patches),
            ("encoder.patch_dim", self.patch_dim),
            ("encoder.vocab_size", self.vocab_size),
            ("encoder.max_text_len", self.max_text_len),
            ("encoder.max_frames", self.max_frames),
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.mlp_ratio", self.mlp_ratio),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(invariant(k, "must be positive"));
            }
        }
        if !self.d_v.is_multiple_of(self.vision_heads()) {
            return Err(invariant("encoder.d_v", "must be divisible by encoder.heads"));
        }
        if !self.d_t.is_multiple_of(self.text_heads()) {
            return Err(invariant("encoder.d_t", "must be divisible by the text head count"));
        }
        Ok(())
    }
}

/// Which adapter family is mounted after each block's FFN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKind {
    None,
    /// Temporal video branch + bottleneck text branch.
    Mv,
    AdaptMlp(AdaptMlpForm),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptMlpForm {
    /// Branch reads the FFN input.
    Parallel,
    /// Branch reads the FFN output.
    Sequential,
}

impl FromStr for AdaptMlpForm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "parallel" => Ok(Self::Parallel),
            "sequential" => Ok(Self::Sequential),
            other => Err(format!("unknown AdaptMLP form `{other}`")),
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Mv => "mv",
            Self::AdaptMlp(AdaptMlpForm::Parallel) => "adaptmlp-parallel",
            Self::AdaptMlp(AdaptMlpForm::Sequential) => "adaptmlp-sequential",
        })
    }
}

impl FromStr for AdapterKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "mv" => Ok(Self::Mv),
            "adaptmlp-parallel" => Ok(Self::AdaptMlp(AdaptMlpForm::Parallel)),
            "adaptmlp-sequential" => Ok(Self::AdaptMlp(AdaptMlpForm::Sequential)),
            other => Err(format!("unknown adapter kind `{other}`")),
        }
    }
}

/// Temporal-adaptation variants of the video branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMode {
    /// Per-frame bottleneck with TRM over each frame's tokens; no cross-frame path.
    Basic,
    /// Cross-frame [CLS] adaptation with the [CC] token; uncalibrated patch path.
    Frame,
    /// Cross-frame [CLS] adaptation plus calibrated per-frame patch upsampling.
    Full,
}

impl fmt::Display for TemporalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Basic => "basic",
            Self::Frame => "frame",
            Self::Full => "full",
        })
    }
}

impl FromStr for TemporalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "basic" => Ok(Self::Basic),
            "frame" => Ok(Self::Frame),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown temporal mode `{other}`")),
        }
    }
}

/// A set of encoder block indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSet {
    All,
    /// The last `k` blocks.
    Last(usize),
    List(Vec<usize>),
}

impl LayerSet {
    pub fn resolve(&self, layers: usize) -> Vec<usize> {
        match self {
            Self::All => (0..layers).collect(),
            Self::Last(k) => (layers.saturating_sub(*k)..layers).collect(),
            Self::List(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Last(k) => write!(f, "last{k}"),
            Self::List(v) if v.is_empty() => f.write_str("none"),
            Self::List(v) => {
                let s: Vec<String> = v.iter().map(usize::to_string).collect();
                f.write_str(&s.join(","))
            }
        }
    }
}

impl FromStr for LayerSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "none" => Ok(Self::List(vec![])),
            "last" => Ok(Self::Last(1)),
            _ => {
                if let Some(k) = s.strip_prefix("last") {
                    return k.parse().map(Self::Last).map_err(|e| e.to_string());
                }
                s.split(',')
                    .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
                    .collect::<Result<Vec<_>, _>>()
                    .map(Self::List)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    /// Bottleneck width d′.
    pub bottleneck: usize,
    /// Output scalar s.
    pub scale: f64,
    /// Calibration shrinkage σ; the calibration hidden width is d′/σ.
    pub shrink: usize,
    pub trm_heads: usize,
    pub trm_ffn_mult: usize,
    pub layers: LayerSet,
    pub temporal: TemporalMode,
    /// Learned per-frame position added to the `[CLS]` sequence before the
    /// cross-frame TRM. Without it the video branch is permutation
    /// equivariant over frames and the pooled clip embedding cannot see
    /// frame order.
    pub frame_pos: bool,
    pub video: bool,
    pub text: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Mv,
            bottleneck: 8,
            scale: 0.1,
            shrink: 4,
            trm_heads: 2,
            trm_ffn_mult: 2,
            layers: LayerSet::All,
            temporal: TemporalMode::Full,
            frame_pos: true,
            video: true,
            text: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmiConfig {
    pub enabled: bool,
    pub layers: LayerSet,
    /// Shape m×n of the shared matrix.
    pub rows: usize,
    pub cols: usize,
}

impl Default for CmiConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            layers: LayerSet::Last(1),
            rows: 4,
            cols: 2,
        }
    }
}

/// Everything needed to build a model's parameter set.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub cmi: CmiConfig,
}

impl ModelConfig {
    /// CLIP ViT-B/16 backbone with the full MV-Adapter at d′=64, σ=4 and a
    /// 16×8 shared matrix on the last block.
    pub fn clip_b16() -> Self {
        Self {
            encoder: EncoderConfig::clip_b16(),
            adapter: AdapterConfig {
                bottleneck: 64,
                ..AdapterConfig::default()
            },
            cmi: CmiConfig {
                rows: 16,
                cols: 8,
                ..CmiConfig::default()
            },
        }
    }

    pub fn adapter_layers(&self) -> Vec<usize> {
        if self.adapter.kind == AdapterKind::None {
            return vec![];
        }
        self.adapter.layers.resolve(self.encoder.layers)
    }

    pub fn cmi_layers(&self) -> Vec<usize> {
        if !self.cmi.enabled || self.adapter.kind == AdapterKind::None {
            return vec![];
        }
        self.cmi.layers.resolve(self.encoder.layers)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate()?;
        let a = &self.adapter;
        let e = &self.encoder;
        if a.kind == AdapterKind::None {
            return Ok(());
        }
        if a.bottleneck == 0 {
            return Err(invariant("adapter.bottleneck", "must be positive"));
        }
        if a.bottleneck >= e.d_v || a.bottleneck >= e.d_t {
            return Err(invariant("adapter.bottleneck", "must be smaller than both encoder widths"));
        }
        if a.kind == AdapterKind::Mv {
            if a.shrink == 0 || !a.bottleneck.is_multiple_of(a.shrink) {
                return Err(invariant("adapter.shrink", "must divide adapter.bottleneck"));
            }
            if a.trm_heads == 0 || !a.bottleneck.is_multiple_of(a.trm_heads) {
                return Err(invariant("adapter.trm_heads", "must divide adapter.bottleneck"));
            }
            if a.trm_ffn_mult == 0 {
                return Err(invariant("adapter.trm_ffn_mult", "must be positive"));
            }
        }
        if !a.video && !a.text {
            return Err(invariant("adapter.video", "at least one branch must be enabled"));
        }
        let layers = self.adapter_layers();
        if let Some(&l) = layers.iter().find(|&&l| l >= e.layers) {
            return Err(invariant("adapter.layers", format!("block {l} out of range")));
        }
        let cmi = self.cmi_layers();
        if !cmi.is_empty() {
            let c = &self.cmi;
            if c.rows == 0 || c.cols == 0 {
                return Err(invariant("cmi.rows", "shared matrix must be non-empty"));
            }
            if !e.d_v.is_multiple_of(c.rows) || !e.d_t.is_multiple_of(c.rows) {
                return Err(invariant("cmi.rows", "must divide encoder.d_v and encoder.d_t"));
            }
            if !a.bottleneck.is_multiple_of(c.cols) {
                return Err(invariant("cmi.cols", "must divide adapter.bottleneck"));
            }
            if let Some(&l) = cmi.iter().find(|l| !layers.contains(l)) {
                return Err(invariant("cmi.layers", format!("block {l} carries no adapter")));
            }
        }
        Ok(())
    }
}

/// Upper-bound schedule of the temperature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CapShape {
    Constant,
    Linear,
}

impl fmt::Display for CapShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Linear => "linear",
        })
    }
}

impl FromStr for CapShape {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown cap shape `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Starting temperature. The toy backbone's initial cosines spread by
    /// about 0.06, so 12 keeps the step-0 loss near `ln(batch)`.
    pub tau_init: f64,
    pub cap_start: f64,
    pub cap_end: f64,
    pub cap_shape: CapShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            tau_init: 12.0,
            cap_start: 100.0,
            cap_end: 20.0,
            cap_shape: CapShape::Linear,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size < 2 {
            return Err(invariant("train.batch_size", "contrastive loss needs at least 2"));
        }
        if !(self.lr > 0.0) {
            return Err(invariant("train.lr", "must be positive"));
        }
        if !(self.cap_end >= 1.0 && self.cap_start >= self.cap_end) {
            return Err(invariant("tau.cap_end", "need 1 <= cap_end <= cap_start"));
        }
        if !(self.tau_init >= 1.0) {
            return Err(invariant("tau.init", "must be at least 1"));
        }
        Ok(())
    }
}

/// Parameters of the synthetic video-text generator.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub n_pairs: u32,
    pub n_train: u32,
    pub appearance_classes: u32,
    pub order_classes: u32,
    pub frames: u32,
    pub patches: u32,
    pub patch_dim: u32,
    pub text_len: u32,
    pub vocab_size: u32,
    pub seed: u32,
    pub noise_std: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n_pairs: 256,
            n_train: 192,
            appearance_classes: 4,
            order_classes: 2,
            frames: 4,
            patches: 16,
            patch_dim: 12,
            text_len: 8,
            vocab_size: 64,
            seed: 0,
            noise_std: 0.1,
        }
    }
}

/// Flat `key = value` configuration covering every section.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
            reason: "expected true or false".into(),
        }),
    }
}

impl RunConfig {
    /// Parses the `key = value` grammar on top of the defaults. Blank lines
    /// and `#` comments are ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.n_train as usize > d.n_pairs as usize {
            return Err(invariant("data.n_train", "exceeds data.n_pairs"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let e = &mut self.model.encoder;
        let a = &mut self.model.adapter;
        let c = &mut self.model.cmi;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "encoder.d_v" => e.d_v = parse(key, value)?,
            "encoder.d_t" => e.d_t = parse(key, value)?,
            "encoder.layers" => e.layers = parse(key, value)?,
            "encoder.heads" => e.heads = parse(key, value)?,
            "encoder.text_heads" => e.text_heads = Some(parse(key, value)?),
            "encoder.patches" => e.patches = parse(key, value)?,
            "encoder.patch_dim" => e.patch_dim = parse(key, value)?,
            "encoder.vocab_size" => e.vocab_size = parse(key, value)?,
            "encoder.max_text_len" => e.max_text_len = parse(key, value)?,
            "encoder.max_frames" => e.max_frames = parse(key, value)?,
            "encoder.embed_dim" => e.embed_dim = parse(key, value)?,
            "encoder.mlp_ratio" => e.mlp_ratio = parse(key, value)?,
            "adapter.kind" => a.kind = parse(key, value)?,
            "adapter.bottleneck" => a.bottleneck = parse(key, value)?,
            "adapter.scale" => a.scale = parse(key, value)?,
            "adapter.shrink" => a.shrink = parse(key, value)?,
            "adapter.trm_heads" => a.trm_heads = parse(key, value)?,
            "adapter.trm_ffn_mult" => a.trm_ffn_mult = parse(key, value)?,
            "adapter.layers" => a.layers = parse(key, value)?,
            "adapter.temporal" => a.temporal = parse(key, value)?,
            "adapter.frame_pos" => a.frame_pos = parse_bool(key, value)?,
            "adapter.video" => a.video = parse_bool(key, value)?,
            "adapter.text" => a.text = parse_bool(key, value)?,
            "cmi.enabled" => c.enabled = parse_bool(key, value)?,
            "cmi.layers" => c.layers = parse(key, value)?,
            "cmi.rows" => c.rows = parse(key, value)?,
            "cmi.cols" => c.cols = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam_eps = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "tau.init" => t.tau_init = parse(key, value)?,
            "tau.cap_start" => t.cap_start = parse(key, value)?,
            "tau.cap_end" => t.cap_end = parse(key, value)?,
            "tau.cap" => t.cap_shape = parse(key, value)?,
            "data.n_pairs" => d.n_pairs = parse(key, value)?,
            "data.n_train" => d.n_train = parse(key, value)?,
            "data.appearance_classes" => d.appearance_classes = parse(key, value)?,
            "data.order_classes" => d.order_classes = parse(key, value)?,
            "data.frames" => d.frames = parse(key, value)?,
            "data.patches" => d.patches = parse(key, value)?,
            "data.patch_dim" => d.patch_dim = parse(key, value)?,
            "data.text_len" => d.text_len = parse(key, value)?,
            "data.vocab_size" => d.vocab_size = parse(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,
            "data.noise_std" => d.noise_std = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Canonical text of the model-defining keys (encoder, adapter, cmi and
    /// the backbone seed). Two configs build the same backbone and adapter
    /// layout iff their canonical texts are equal.
    pub fn canonical_model_text(&self) -> String {
        let e = &self.model.encoder;
        let a = &self.model.adapter;
        let c = &self.model.cmi;
        let mut m = BTreeMap::new();
        m.insert("encoder.d_v", e.d_v.to_string());
        m.insert("encoder.d_t", e.d_t.to_string());
        m.insert("encoder.layers", e.layers.to_string());
        m.insert("encoder.heads", e.heads.to_string());
        if let Some(h) = e.text_heads {
            m.insert("encoder.text_heads", h.to_string());
        }
        m.insert("encoder.patches", e.patches.to_string());
        m.insert("encoder.patch_dim", e.patch_dim.to_string());
        m.insert("encoder.vocab_size", e.vocab_size.to_string());
        m.insert("encoder.max_text_len", e.max_text_len.to_string());
        m.insert("encoder.max_frames", e.max_frames.to_string());
        m.insert("encoder.embed_dim", e.embed_dim.to_string());
        m.insert("encoder.mlp_ratio", e.mlp_ratio.to_string());
        m.insert("adapter.kind", a.kind.to_string());
        m.insert("adapter.bottleneck", a.bottleneck.to_string());
        m.insert("adapter.scale", format!("{:?}", a.scale));
        m.insert("adapter.shrink", a.shrink.to_string());
        m.insert("adapter.trm_heads", a.trm_heads.to_string());
        m.insert("adapter.trm_ffn_mult", a.trm_ffn_mult.to_string());
        m.insert("adapter.layers", a.layers.to_string());
        m.insert("adapter.temporal", a.temporal.to_string());
        m.insert("adapter.frame_pos", a.frame_pos.to_string());
        m.insert("adapter.video", a.video.to_string());
        m.insert("adapter.text", a.text.to_string());
        m.insert("cmi.enabled", c.enabled.to_string());
        m.insert("cmi.layers", c.layers.to_string());
        m.insert("cmi.rows", c.rows.to_string());
        m.insert("cmi.cols", c.cols.to_string());
        m.insert("train.seed", self.train.seed.to_string());
        m.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
