//! Synthetic video-text pairs whose captions need frame order to resolve.
//!
//! Frame `k` of a clip with appearance `a` and order `o` is
//! `P_a + S(k, o) + noise`, where `S(k, forward)` ramps linearly along a
//! fixed direction and `S(k, reversed) = S(F−1−k, forward)`. The frame mean
//! of both orders is identical, so only a model that sees frame order can
//! tell them apart. Captions are `[BOS, tok_a, tok_o, PAD, ..]`.

use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::config::DataSpec;
use crate::encoders::{BOS, PAD, SPECIAL_TOKENS};
use crate::numerics::{substream, Tensor};

const MAGIC: &[u8; 4] = b"MVAD";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("bad magic {found:?} at offset 0")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {found} at offset 4")]
    Version { found: u16 },
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("checksum mismatch at offset {offset}: stored {stored:08x}, computed {computed:08x}")]
    Checksum { offset: usize, stored: u32, computed: u32 },
    #[error("{0} trailing bytes after the checksum")]
    Trailing(usize),
    #[error("invalid frame selection: {0}")]
    Frames(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoTextSample {
    /// `[F, N_P, patch_dim]`.
    pub frames: Tensor,
    pub tokens: Vec<u16>,
    pub appearance: u32,
    pub order: u32,
}

impl VideoTextSample {
    pub fn label(&self) -> (u32, u32) {
        (self.appearance, self.order)
    }
}

/// A generated dataset. The first `spec.n_train` samples form the training
/// split, the rest the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DataSpec,
    pub samples: Vec<VideoTextSample>,
}

impl Dataset {
    pub fn train(&self) -> &[VideoTextSample] {
        &self.samples[..self.spec.n_train as usize]
    }

    pub fn test(&self) -> &[VideoTextSample] {
        &self.samples[self.spec.n_train as usize..]
    }
}

pub fn validate_spec(spec: &DataSpec) -> Result<(), DataError> {
    let bad = |m: &str| Err(DataError::Spec(m.to_string()));
    let needed = spec.appearance_classes as usize + spec.order_classes as usize + SPECIAL_TOKENS;
    if (spec.vocab_size as usize) < needed {
        return Err(DataError::Spec(format!(
            "vocabulary of {} cannot hold {} class tokens plus {SPECIAL_TOKENS} special tokens",
            spec.vocab_size,
            needed - SPECIAL_TOKENS
        )));
    }
    if spec.order_classes != 2 {
        return bad("order classes must be 2 (forward and reversed)");
    }
    if spec.appearance_classes == 0 || spec.frames == 0 || spec.patches == 0 || spec.patch_dim == 0 {
        return bad("class, frame and patch counts must be positive");
    }
    if spec.text_len < 3 {
        return bad("captions need at least 3 positions");
    }
    if spec.n_train > spec.n_pairs {
        return bad("n_train exceeds n_pairs");
    }
    if spec.n_pairs < spec.appearance_classes * spec.order_classes {
        return bad("too few pairs to cover every class combination");
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return bad("noise_std must be a finite non-negative number");
    }
    Ok(())
}

fn normal_tensor(shape: &[usize], seed: u64, path: &str, std: f64) -> Tensor {
    let mut rng = substream(seed, path);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Ramp coefficient of frame `k` out of `f`, in `[-1, 1]`.
fn ramp(k: usize, f: usize) -> f64 {
    if f == 1 {
        0.0
    } else {
        2.0 * k as f64 / (f - 1) as f64 - 1.0
    }
}

pub fn generate(spec: &DataSpec) -> Result<Dataset, DataError> {
    validate_spec(spec)?;
    let seed = spec.seed as u64;
    let (f, np, pd) = (spec.frames as usize, spec.patches as usize, spec.patch_dim as usize);
    let frame_len = np * pd;
    let prototypes: Vec<Tensor> = (0..spec.appearance_classes)
        .map(|a| normal_tensor(&[np, pd], seed, &format!("prototype.{a}"), 1.0))
        .collect();
    let direction = normal_tensor(&[np, pd], seed, "signature", 1.0);

    let classes = spec.appearance_classes * spec.order_classes;
    let mut order: Vec<u32> = (0..spec.n_pairs).collect();
    order.shuffle(&mut substream(seed, "split"));

    let mut samples = Vec::with_capacity(spec.n_pairs as usize);
    for id in order {
        let label = id % classes;
        let (a, o) = (label / spec.order_classes, label % spec.order_classes);
        let noise = normal_tensor(&[f, np, pd], seed, &format!("noise.{id}"), spec.noise_std);
        let mut data = noise.into_data();
        for k in 0..f {
            let src = if o == 0 { k } else { f - 1 - k };
            let r = ramp(src, f);
            let base = &prototypes[a as usize];
            for (i, x) in data[k * frame_len..(k + 1) * frame_len].iter_mut().enumerate() {
                *x += base.data()[i] + r * direction.data()[i];
            }
        }
        let mut tokens = vec![PAD; spec.text_len as usize];
        tokens[0] = BOS;
        tokens[1] = (SPECIAL_TOKENS as u32 + a) as u16;
        tokens[2] = (SPECIAL_TOKENS as u32 + spec.appearance_classes + o) as u16;
        samples.push(VideoTextSample {
            frames: Tensor::new(&[f, np, pd], data).expect("frame buffer"),
            tokens,
            appearance: a,
            order: o,
        });
    }
    Ok(Dataset { spec: spec.clone(), samples })
}

/// `floor(k·n/m)` for `k < m`: `m` evenly spaced indices out of `n`.
pub fn uniform_indices(n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|k| k * n / m).collect()
}

fn take_frames(sample: &VideoTextSample, indices: &[usize]) -> VideoTextSample {
    let s = sample.frames.shape();
    let per = s[1] * s[2];
    let src = sample.frames.data();
    let data = indices.iter().flat_map(|&i| src[i * per..(i + 1) * per].iter().copied()).collect();
    VideoTextSample {
        frames: Tensor::new(&[indices.len(), s[1], s[2]], data).expect("frame buffer"),
        ..sample.clone()
    }
}

/// Reorders frames so output frame `k` is input frame `perm[k]`.
pub fn permute_frames(sample: &VideoTextSample, perm: &[usize]) -> Result<VideoTextSample, DataError> {
    let f = sample.frames.shape()[0];
    let mut seen = vec![false; f];
    if perm.len() != f {
        return Err(DataError::Frames(format!("permutation of length {} for {f} frames", perm.len())));
    }
    for &p in perm {
        if p >= f || std::mem::replace(&mut seen[p], true) {
            return Err(DataError::Frames(format!("{perm:?} is not a permutation of 0..{f}")));
        }
    }
    Ok(take_frames(sample, perm))
}

/// Keeps `m` uniformly spaced frames when the clip has more than `m`.
pub fn subsample_frames(sample: &VideoTextSample, m: usize) -> Result<VideoTextSample, DataError> {
    let f = sample.frames.shape()[0];
    if m == 0 {
        return Err(DataError::Frames("cannot keep zero frames".into()));
    }
    if f <= m {
        return Ok(sample.clone());
    }
    Ok(take_frames(sample, &uniform_indices(f, m)))
}

/// Stacks clip frames into `[B, F, N_P, patch_dim]`.
pub fn stack_frames(samples: &[&VideoTextSample]) -> Tensor {
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(samples[0].frames.shape());
    let data = samples.iter().flat_map(|s| s.frames.data().iter().copied()).collect();
    Tensor::new(&shape, data).expect("clips share one shape")
}

pub fn stack_tokens(samples: &[&VideoTextSample]) -> Vec<Vec<u16>> {
    samples.iter().map(|s| s.tokens.clone()).collect()
}

pub fn to_bytes(ds: &Dataset) -> Vec<u8> {
    let s = &ds.spec;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        s.n_pairs,
        s.n_train,
        s.appearance_classes,
        s.order_classes,
        s.frames,
        s.patches,
        s.patch_dim,
        s.text_len,
        s.vocab_size,
        s.seed,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.noise_std.to_le_bytes());
    for sample in &ds.samples {
        out.extend_from_slice(&sample.appearance.to_le_bytes());
        out.extend_from_slice(&sample.order.to_le_bytes());
        for x in sample.frames.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for t in &sample.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

const HEADER_LEN: usize = 4 + 2 + 10 * 4 + 8;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let b = self.buf[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        b
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Dataset, DataError> {
    if buf.len() < 6 {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            actual: buf.len(),
        });
    }
    if &buf[..4] != MAGIC {
        return Err(DataError::BadMagic { found: buf[..4].to_vec() });
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(DataError::Version { found: version });
    }
    if buf.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            actual: buf.len(),
        });
    }
    let mut r = Reader { buf, pos: 6 };
    let mut f = [0u32; 10];
    for v in &mut f {
        *v = r.u32();
    }
    let spec = DataSpec {
        n_pairs: f[0],
        n_train: f[1],
        appearance_classes: f[2],
        order_classes: f[3],
        frames: f[4],
        patches: f[5],
        patch_dim: f[6],
        text_len: f[7],
        vocab_size: f[8],
        seed: f[9],
        noise_std: r.f64(),
    };
    validate_spec(&spec)?;
    let frame_scalars = (spec.frames * spec.patches * spec.patch_dim) as usize;
    let per_sample = 8 + 8 * frame_scalars + 2 * spec.text_len as usize;
    let expected = HEADER_LEN + spec.n_pairs as usize * per_sample + 4;
    if buf.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: buf.len(),
        });
    }
    if buf.len() > expected {
        return Err(DataError::Trailing(buf.len() - expected));
    }
    let offset = expected - 4;
    let stored = u32::from_le_bytes(buf[offset..].try_into().unwrap());
    let computed = crc32fast::hash(&buf[..offset]);
    if stored != computed {
        return Err(DataError::Checksum { offset, stored, computed });
    }
    let shape = [spec.frames as usize, spec.patches as usize, spec.patch_dim as usize];
    let mut samples = Vec::with_capacity(spec.n_pairs as usize);
    for _ in 0..spec.n_pairs {
        let appearance = r.u32();
        let order = r.u32();
        let data = (0..frame_scalars).map(|_| r.f64()).collect();
        let tokens = (0..spec.text_len).map(|_| r.u16()).collect();
        samples.push(VideoTextSample {
            frames: Tensor::new(&shape, data).expect("sized above"),
            tokens,
            appearance,
            order,
        });
    }
    Ok(Dataset { spec, samples })
}

pub fn save(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    Ok(std::fs::write(path, to_bytes(ds))?)
}

pub fn load(path: &Path) -> Result<Dataset, DataError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataSpec {
        DataSpec {
            n_pairs: 16,
            n_train: 12,
            ..DataSpec::default()
        }
    }

    #[test]
    fn noiseless_reversal() {
        let ds = generate(&DataSpec { noise_std: 0.0, ..small() }).unwrap();
        let fwd = ds.samples.iter().find(|s| s.label() == (1, 0)).unwrap();
        let rev = ds.samples.iter().find(|s| s.label() == (1, 1)).unwrap();
        assert_eq!(permute_frames(fwd, &[3, 2, 1, 0]).unwrap().frames, rev.frames);
        let twins: Vec<_> = ds.samples.iter().filter(|s| s.label() == (1, 0)).collect();
        assert_eq!(twins[0].frames, twins[1].frames);
    }

    #[test]
    fn every_class_present() {
        let ds = generate(&small()).unwrap();
        for a in 0..4 {
            for o in 0..2 {
                assert!(ds.samples.iter().any(|s| s.label() == (a, o)));
            }
        }
        assert_eq!(ds.train().len(), 12);
        assert_eq!(ds.test().len(), 4);
        assert_eq!(ds.samples[0].tokens[0], BOS);
    }

    #[test]
    fn vocab_too_small() {
        let spec = DataSpec { vocab_size: 8, ..small() };
        assert!(matches!(generate(&spec), Err(DataError::Spec(_))));
    }

    #[test]
    fn round_trip_and_corruption() {
        let ds = generate(&small()).unwrap();
        let bytes = to_bytes(&ds);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back), bytes);

        let err = from_bytes(&bytes[..bytes.len() - 10]).unwrap_err();
        assert!(matches!(err, DataError::Truncated { actual, .. } if actual == bytes.len() - 10));
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 0xff;
        assert!(matches!(from_bytes(&flipped), Err(DataError::Checksum { .. })));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(from_bytes(&magic), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn frame_selection() {
        assert_eq!(uniform_indices(24, 12), (0..12).map(|k| 2 * k).collect::<Vec<_>>());
        let ds = generate(&small()).unwrap();
        let s = &ds.samples[0];
        assert_eq!(&permute_frames(s, &[0, 1, 2, 3]).unwrap(), s);
        let r = permute_frames(s, &[3, 2, 1, 0]).unwrap();
        assert_eq!(&permute_frames(&r, &[3, 2, 1, 0]).unwrap(), s);
        assert!(permute_frames(s, &[0, 0, 1, 2]).is_err());
        assert_eq!(subsample_frames(s, 2).unwrap().frames.shape(), &[2, 16, 12]);
    }
}
