//! Contrastive training of the tunable set, evaluation, parameter and
//! storage accounting, and adapter-only checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig, RunConfig, TrainConfig};
use crate::encoders::{text_embedding, text_embedding_with, text_stem, video_embedding, video_embedding_with, vision_stem, Model, ModelError, ModelState};
use crate::layout::{model_layout, Group, TAU_PATH};
use crate::numerics::{finite_diff_check, fnv1a, substream, FdReport, Gradients, Graph, NumericsError, ParamStore, Tensor, Var};
use crate::retrieval::{contrastive_loss, recall_at_k_sets, report, similarity_matrix, Direction, MetricsReport, RetrievalError, TauSchedule};
use crate::synthdata::{generate, stack_frames, stack_tokens, DataError, Dataset, VideoTextSample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },
    #[error("dataset does not fit the model: {0}")]
    DataMismatch(String),
    #[error("ratio {0} outside [0, 1]")]
    Ratio(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint truncated: expected at least {expected} bytes, found {actual}")]
    CheckpointTruncated { expected: usize, actual: usize },
    #[error("checkpoint checksum mismatch at offset {offset}")]
    CheckpointChecksum { offset: usize },
    #[error("config hash mismatch: checkpoint {stored:016x}, expected {expected:016x}")]
    ConfigHash { stored: u64, expected: u64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        Self::Model(e.into())
    }
}

/// Symmetric contrastive loss of one batch.
pub fn batch_loss(m: Model<'_>, frames: &Tensor, tokens: &[Vec<u16>], tau: Var, g: &mut Graph) -> Result<Var, TrainError> {
    let v = video_embedding(g, m, frames, true)?;
    let t = text_embedding(g, m, tokens, true)?;
    let sim = similarity_matrix(g, v, t, tau)?;
    Ok(contrastive_loss(g, sim)?)
}

/// Frozen activations of a batch, replayed by [`cached_batch_loss`].
pub struct BatchStems {
    video: Option<crate::encoders::Stem>,
    text: Option<crate::encoders::Stem>,
}

impl BatchStems {
    pub fn new(m: Model<'_>, frames: &Tensor, tokens: &[Vec<u16>]) -> Result<Self, TrainError> {
        Ok(Self {
            video: vision_stem(m, frames)?,
            text: text_stem(m, tokens)?,
        })
    }
}

/// [`batch_loss`] with the frozen prefix of both towers taken from `stems`,
/// which must come from the same backbone and batch.
pub fn cached_batch_loss(
    m: Model<'_>,
    frames: &Tensor,
    tokens: &[Vec<u16>],
    stems: &BatchStems,
    tau: Var,
    g: &mut Graph,
) -> Result<Var, TrainError> {
    let v = video_embedding_with(g, m, frames, true, stems.video.as_ref())?;
    let t = text_embedding_with(g, m, tokens, true, stems.text.as_ref())?;
    let sim = similarity_matrix(g, v, t, tau)?;
    Ok(contrastive_loss(g, sim)?)
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    t: i32,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Paths that own moment buffers.
    pub fn moment_paths(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (path, grad) in grads.iter() {
            let Some(p) = params.get_mut(path) else { continue };
            let (m, v) = self
                .moments
                .entry(path.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((x, &gr), mi), vi) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gr;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gr * gr;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *x -= cfg.lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// One optimizer step as logged: `step loss tau cap`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub tau: f64,
    pub cap: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.6} {:.6} {:.6}", self.step, self.loss, self.tau, self.cap)
    }
}

pub fn check_data_fits(cfg: &ModelConfig, samples: &[VideoTextSample]) -> Result<(), TrainError> {
    let e = &cfg.encoder;
    for (i, s) in samples.iter().enumerate() {
        let fs = s.frames.shape();
        if fs[0] > e.max_frames || fs[1] != e.patches || fs[2] != e.patch_dim {
            return Err(TrainError::DataMismatch(format!(
                "sample {i} has frames {fs:?}, model takes up to {} frames of {}x{}",
                e.max_frames, e.patches, e.patch_dim
            )));
        }
        if s.tokens.len() > e.max_text_len {
            return Err(TrainError::DataMismatch(format!(
                "sample {i} has {} tokens, model takes {}",
                s.tokens.len(),
                e.max_text_len
            )));
        }
    }
    Ok(())
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    // a trailing batch of one has no negatives and is dropped
    n / batch + usize::from(n % batch >= 2)
}

/// Cap schedule of a run. `total_steps` is the index of the last optimizer
/// step, so the logged caps run from `cap_start` at step 0 to exactly
/// `cap_end` at the final step.
pub fn schedule(cfg: &TrainConfig, n_train: usize) -> TauSchedule {
    TauSchedule {
        cap_start: cfg.cap_start,
        cap_end: cfg.cap_end,
        total_steps: (cfg.epochs * steps_per_epoch(n_train, cfg.batch_size)).saturating_sub(1),
        shape: cfg.cap_shape,
    }
}

/// Trains the tunable set of `state` on `samples`, calling `on_step` after
/// every update. Returns the full log.
pub fn train(
    state: &mut ModelState,
    samples: &[VideoTextSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>, TrainError> {
    check_data_fits(&state.config, samples)?;
    let sched = schedule(cfg, samples.len());
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(sched.total_steps + 1);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut substream(cfg.seed, &format!("epoch.{epoch}")));
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let batch: Vec<&VideoTextSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let frames = stack_frames(&batch);
            let tokens = stack_tokens(&batch);

            let cap = sched.cap(step);
            let tau = sched.effective(state.tau(), step);
            state.params.get_mut(TAU_PATH).expect("tau").data_mut()[0] = tau;

            let mut g = Graph::new();
            let tau_var = state.params.bind(&mut g, TAU_PATH)?;
            let loss = batch_loss(state.model(), &frames, &tokens, tau_var, &mut g)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::Divergence { step });
            }
            let grads = g.backward(loss)?;
            drop(g);
            adam.step(&mut state.params, &grads, cfg);
            let clamped = sched.effective(state.tau(), step);
            state.params.get_mut(TAU_PATH).expect("tau").data_mut()[0] = clamped;

            let entry = StepLog { step, loss: value, tau, cap };
            on_step(&entry);
            log.push(entry);
            step += 1;
        }
    }
    Ok(log)
}

/// L2-normalized joint-space embeddings of every clip and caption,
/// computed without gradients.
pub fn embed_all(state: &ModelState, samples: &[VideoTextSample]) -> Result<(Tensor, Tensor), TrainError> {
    const CHUNK: usize = 32;
    let frozen = state.params.detached();
    let m = Model::new(&state.config, &frozen);
    let (mut vids, mut txts) = (Vec::new(), Vec::new());
    for chunk in samples.chunks(CHUNK) {
        let batch: Vec<&VideoTextSample> = chunk.iter().collect();
        let mut g = Graph::new();
        let v = video_embedding(&mut g, m, &stack_frames(&batch), true)?;
        let v = g.l2_normalize(v)?;
        let t = text_embedding(&mut g, m, &stack_tokens(&batch), true)?;
        let t = g.l2_normalize(t)?;
        vids.extend_from_slice(g.value(v).data());
        txts.extend_from_slice(g.value(t).data());
    }
    let e = state.config.encoder.embed_dim;
    Ok((Tensor::new(&[samples.len(), e], vids)?, Tensor::new(&[samples.len(), e], txts)?))
}

fn cosine_matrix(queries: &Tensor, gallery: &Tensor) -> Result<Tensor, TrainError> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let k = g.constant(gallery.clone());
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    Ok(g.value(s).clone())
}

/// `(T2V, V2T)` recall over `samples`. Captions are shared by every clip of
/// the same label, so any clip or caption with the query's label counts as a
/// hit.
pub fn evaluate(state: &ModelState, samples: &[VideoTextSample]) -> Result<(MetricsReport, MetricsReport), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::DataMismatch("empty evaluation split".into()));
    }
    check_data_fits(&state.config, samples)?;
    let (v, t) = embed_all(state, samples)?;
    let same = |i: usize, j: usize| samples[i].label() == samples[j].label();
    let ks = [1, 5, 10];
    let t2v = recall_at_k_sets(&cosine_matrix(&t, &v)?, same, &ks)?;
    let v2t = recall_at_k_sets(&cosine_matrix(&v, &t)?, same, &ks)?;
    Ok((report(Direction::T2V, &t2v), report(Direction::V2T, &v2t)))
}

/// Parameter totals of a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    pub tunable: usize,
    pub by_group: BTreeMap<Group, usize>,
}

impl ParamReport {
    /// Tunable share of all parameters, in percent.
    pub fn ratio(&self) -> f64 {
        100.0 * self.tunable as f64 / self.total as f64
    }

    /// Lines itemizing how far the tunable share sits from `reference_pct`,
    /// per tunable group.
    pub fn gap_lines(&self, reference_pct: f64) -> Vec<String> {
        let target = reference_pct / 100.0 * self.total as f64;
        let mut out = vec![
            format!("reference {reference_pct:.2}%"),
            format!(
                "gap {:+.4} points ({:+.0} parameters)",
                self.ratio() - reference_pct,
                self.tunable as f64 - target
            ),
        ];
        for (g, n) in self.by_group.iter().filter(|(g, _)| g.tunable()) {
            out.push(format!("share {} {:.4}%", g.name(), 100.0 * *n as f64 / self.total as f64));
        }
        out
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (g, n) in &self.by_group {
            writeln!(f, "{} {n}", g.name())?;
        }
        writeln!(f, "total {}", self.total)?;
        writeln!(f, "tunable {}", self.tunable)?;
        write!(f, "ratio {:.4}%", self.ratio())
    }
}

pub fn count_params(cfg: &ModelConfig) -> ParamReport {
    let mut by_group = BTreeMap::new();
    let (mut total, mut tunable) = (0, 0);
    for spec in model_layout(cfg) {
        let n = spec.numel();
        total += n;
        if spec.group.tunable() {
            tunable += n;
        }
        *by_group.entry(spec.group).or_insert(0) += n;
    }
    ParamReport { total, tunable, by_group }
}

/// Storage of one shared backbone plus `n_tasks` adapter sets, in units of
/// one full model.
pub fn storage_units(n_tasks: usize, ratio: f64) -> Result<f64, TrainError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(TrainError::Ratio(ratio));
    }
    Ok(1.0 + n_tasks as f64 * ratio)
}

/// Storage of `n_tasks` fully fine-tuned copies.
pub fn full_finetune_units(n_tasks: usize) -> f64 {
    n_tasks as f64
}

const CKPT_MAGIC: &[u8; 4] = b"MVCK";
const CKPT_VERSION: u16 = 1;

pub fn config_hash(run: &RunConfig) -> u64 {
    fnv1a(run.canonical_model_text().as_bytes())
}

/// Checkpoint bytes: magic, version, config hash, the canonical model text
/// the backbone is regenerated from, then every tunable tensor as
/// `(path, shape, f64 payload)`, and a trailing CRC32.
pub fn checkpoint_bytes(state: &ModelState) -> Vec<u8> {
    let run = run_for(state);
    let text = run.canonical_model_text();
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&fnv1a(text.as_bytes()).to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let tunable = state.params.tunable();
    out.extend_from_slice(&(tunable.len() as u32).to_le_bytes());
    for path in tunable {
        let t = state.params.get(path).expect("tunable paths exist");
        out.extend_from_slice(&(path.len() as u16).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn run_for(state: &ModelState) -> RunConfig {
    RunConfig {
        model: state.config.clone(),
        train: TrainConfig { seed: state.seed, ..TrainConfig::default() },
        ..RunConfig::default()
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(TrainError::CheckpointTruncated {
                expected: end,
                actual: self.buf.len(),
            });
        }
        let b = &self.buf[self.pos..end];
        self.pos = end;
        Ok(b)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], TrainError> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }
}

/// Parses a checkpoint, regenerating the backbone from its embedded
/// configuration. The stored hash must match the embedded text.
pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<ModelState, TrainError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.bytes(4)? != CKPT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic at offset 0".into()));
    }
    let version = u16::from_le_bytes(c.array()?);
    if version != CKPT_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
    }
    let stored = u64::from_le_bytes(c.array()?);
    let len = u32::from_le_bytes(c.array()?) as usize;
    let text = std::str::from_utf8(c.bytes(len)?).map_err(|_| TrainError::Checkpoint("config text is not UTF-8".into()))?;
    let run = RunConfig::parse(text)?;
    let expected = config_hash(&run);
    if stored != expected {
        return Err(TrainError::ConfigHash { stored, expected });
    }
    let mut state = ModelState::new(run.model, run.train.seed, 1.0);
    let count = u32::from_le_bytes(c.array()?) as usize;
    let mut seen = 0;
    for _ in 0..count {
        let plen = u16::from_le_bytes(c.array()?) as usize;
        let path = std::str::from_utf8(c.bytes(plen)?)
            .map_err(|_| TrainError::Checkpoint("parameter path is not UTF-8".into()))?
            .to_string();
        let ndim = c.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(c.array()?) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.bytes(8 * n)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if !state.params.is_tunable(&path) {
            return Err(TrainError::Checkpoint(format!("`{path}` is not a tunable parameter of this model")));
        }
        let slot = state.params.get_mut(&path).expect("tunable paths exist");
        if slot.shape() != shape.as_slice() {
            return Err(TrainError::Checkpoint(format!("`{path}` has shape {shape:?}, model expects {:?}", slot.shape())));
        }
        *slot = Tensor::new(&shape, data)?;
        seen += 1;
    }
    if seen != state.params.tunable().len() {
        return Err(TrainError::Checkpoint(format!(
            "{seen} tensors stored, model has {} tunable",
            state.params.tunable().len()
        )));
    }
    let offset = c.pos;
    let crc = u32::from_le_bytes(c.array()?);
    if crc != crc32fast::hash(&buf[..offset]) {
        return Err(TrainError::CheckpointChecksum { offset });
    }
    if c.pos != buf.len() {
        return Err(TrainError::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<(), TrainError> {
    Ok(std::fs::write(path, checkpoint_bytes(state))?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, TrainError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

/// Size in bytes of a dump of every parameter, backbone included, in the
/// same block encoding as a checkpoint.
pub fn full_state_bytes(state: &ModelState) -> usize {
    state
        .params
        .iter()
        .map(|(p, t)| 2 + p.len() + 1 + 4 * t.ndim() + 8 * t.len())
        .sum()
}

/// Adds `N(0, std²/fan_in)` noise to every tunable tensor except `tau` so
/// that adapter paths carry signal, and sets `tau`. `fan_in` is the leading
/// axis of a matrix and 1 for vectors, so norm gains stay near one.
pub fn perturb_tunable(state: &mut ModelState, seed: u64, std: f64, tau: f64) {
    let paths: Vec<String> = state.params.tunable().iter().cloned().collect();
    for path in paths {
        let t = state.params.get_mut(&path).unwrap();
        if path == TAU_PATH {
            t.data_mut()[0] = tau;
            continue;
        }
        let fan_in = if t.ndim() >= 2 { t.shape()[0] } else { 1 };
        let scale = std / (fan_in as f64).sqrt();
        let mut rng = substream(seed, &format!("perturb.{path}"));
        for x in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x += scale * z;
        }
    }
}

/// Two clips of different labels from a small dataset generated by `run.data`.
pub fn gradcheck_batch(run: &RunConfig) -> Result<(Tensor, Vec<Vec<u16>>), TrainError> {
    let spec = &run.data;
    let small = crate::config::DataSpec {
        n_pairs: spec.appearance_classes * spec.order_classes,
        n_train: 0,
        ..spec.clone()
    };
    let ds: Dataset = generate(&small)?;
    let first = &ds.samples[0];
    let second = ds.samples.iter().find(|s| s.label() != first.label()).expect("several classes");
    check_data_fits(&run.model, &[first.clone(), second.clone()])?;
    let batch = [first, second];
    Ok((stack_frames(&batch), stack_tokens(&batch)))
}

/// Perturbation scale and temperature of [`gradcheck`].
///
/// The two toy clips embed almost in parallel, so the loss sits near ln 2
/// for a wide range of temperatures while gradients grow roughly as `tau²`.
/// A large `tau` lifts small gradients well above the rounding floor of the
/// difference quotient, which is set by the ulp of the loss.
pub const GRADCHECK_STD: f64 = 0.5;
pub const GRADCHECK_TAU: f64 = 30.0;

/// A model with perturbed adapters at the gradient-check temperature.
pub fn gradcheck_state(run: &RunConfig) -> ModelState {
    let mut state = ModelState::new(run.model.clone(), run.train.seed, run.train.tau_init);
    perturb_tunable(&mut state, run.train.seed, GRADCHECK_STD, GRADCHECK_TAU);
    state
}

/// Central-difference check of the full model on a batch of two, with
/// randomly perturbed adapter weights.
pub fn gradcheck(run: &RunConfig, eps: f64) -> Result<FdReport, TrainError> {
    let mut state = gradcheck_state(run);
    let (frames, tokens) = gradcheck_batch(run)?;
    let stems = BatchStems::new(state.model(), &frames, &tokens)?;
    let cfg = state.config.clone();
    finite_diff_check(&mut state.params, eps, |p: &ParamStore| -> Result<(Graph, Var), TrainError> {
        let mut g = Graph::new();
        let tau = p.bind(&mut g, TAU_PATH)?;
        let loss = cached_batch_loss(Model::new(&cfg, p), &frames, &tokens, &stems, tau, &mut g)?;
        Ok((g, loss))
    })
}
