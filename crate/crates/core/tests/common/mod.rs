//! Straight-line reference implementations used as test oracles.
//!
//! Everything here works on `Vec<Vec<f64>>` with explicit loops and reads
//! weights straight from a `ParamStore`. Nothing goes through the autodiff
//! graph, so agreement with the library is an independent check.
#![allow(dead_code)]

use mvadapter::config::{AdaptMlpForm, AdapterKind, ModelConfig, TemporalMode};
use mvadapter::numerics::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

const EPS: f64 = 1e-5;

pub fn mat(t: &Tensor) -> Mat {
    assert_eq!(t.ndim(), 2, "expected a matrix, got {:?}", t.shape());
    (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect()
}

pub fn param_mat(s: &ParamStore, path: &str) -> Mat {
    mat(s.get(path).unwrap_or_else(|| panic!("missing {path}")))
}

pub fn param_vec(s: &ParamStore, path: &str) -> Vec<f64> {
    s.get(path).unwrap_or_else(|| panic!("missing {path}")).data().to_vec()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|j| (0..inner).map(|p| row[p] * b[p][j]).sum()).collect()
        })
        .collect()
}

pub fn add_row(a: &Mat, bias: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(bias).map(|(x, b)| x + b).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn scale(a: &Mat, s: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x * s).collect()).collect()
}

pub fn cols(a: &Mat, from: usize, to: usize) -> Mat {
    a.iter().map(|r| r[from..to].to_vec()).collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + EPS).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) / sd * g[j] + b[j]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn linear(s: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    add_row(&mm(x, &param_mat(s, &format!("{prefix}.w"))), &param_vec(s, &format!("{prefix}.b")))
}

fn ln(s: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    layer_norm(x, &param_vec(s, &format!("{prefix}.g")), &param_vec(s, &format!("{prefix}.b")))
}

/// Multi-head self-attention of one sequence. `visible[j]` false hides key `j`
/// entirely (it is left out of the softmax).
pub fn attention(s: &ParamStore, prefix: &str, heads: usize, x: &Mat, visible: Option<&[bool]>) -> Mat {
    let d = x[0].len();
    let dh = d / heads;
    let qkv = mm(x, &param_mat(s, &format!("{prefix}.attn.qkv.w")));
    let q = add_row(&cols(&qkv, 0, d), &param_vec(s, &format!("{prefix}.attn.q.b")));
    let k = cols(&qkv, d, 2 * d);
    let v = add_row(&cols(&qkv, 2 * d, 3 * d), &param_vec(s, &format!("{prefix}.attn.v.b")));
    let n = x.len();
    let mut out = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for i in 0..n {
            let keys: Vec<usize> = (0..n).filter(|&j| visible.is_none_or(|vis| vis[j])).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| r.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for c in r.clone() {
                out[i][c] = keys.iter().zip(&p).map(|(&j, w)| w * v[j][c]).sum();
            }
        }
    }
    linear(s, &format!("{prefix}.attn.out"), &out)
}

/// Pre-norm layer split at the adapter mount: `(h, ffn_in, ffn_out)`.
pub fn block_parts(s: &ParamStore, prefix: &str, heads: usize, x: &Mat, visible: Option<&[bool]>) -> (Mat, Mat, Mat) {
    let a = attention(s, prefix, heads, &ln(s, &format!("{prefix}.ln1"), x), visible);
    let h = add(x, &a);
    let ffn_in = ln(s, &format!("{prefix}.ln2"), &h);
    let hid = linear(s, &format!("{prefix}.mlp.fc1"), &ffn_in);
    let hid: Mat = hid.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let ffn_out = linear(s, &format!("{prefix}.mlp.fc2"), &hid);
    (h, ffn_in, ffn_out)
}

pub fn block(s: &ParamStore, prefix: &str, heads: usize, x: &Mat, visible: Option<&[bool]>) -> Mat {
    let (h, _, f) = block_parts(s, prefix, heads, x, visible);
    add(&h, &f)
}

/// Kronecker product by its four-index definition.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (m, n, p, q) = (a.len(), a[0].len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n * q]; m * p];
    for i in 0..m {
        for j in 0..n {
            for k in 0..p {
                for l in 0..q {
                    out[i * p + k][j * q + l] = a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

fn tag(video: bool) -> &'static str {
    if video {
        "video"
    } else {
        "text"
    }
}

/// Downsample weight of one branch: dense, or shared ⊗ factor on CMI layers.
pub fn down_weight(s: &ParamStore, cfg: &ModelConfig, layer: usize, video: bool) -> Mat {
    if cfg.cmi_layers().contains(&layer) {
        kron(&param_mat(s, &format!("cmi.{layer}.shared")), &param_mat(s, &format!("cmi.{layer}.factor_{}", tag(video))))
    } else {
        param_mat(s, &format!("adapter.{}.{layer}.down", tag(video)))
    }
}

fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

/// Text branch over one sequence: `s · TRM(x·W_down)·W_up`, or the AdaptMLP
/// bottleneck.
pub fn text_branch(s: &ParamStore, cfg: &ModelConfig, layer: usize, ffn_in: &Mat, ffn_out: &Mat, visible: &[bool]) -> Mat {
    let a = &cfg.adapter;
    let wd = down_weight(s, cfg, layer, false);
    let wu = param_mat(s, &format!("adapter.text.{layer}.up"));
    match a.kind {
        AdapterKind::Mv => {
            let h = block(s, &format!("adapter.text.{layer}.trm"), a.trm_heads, &mm(ffn_out, &wd), Some(visible));
            scale(&mm(&h, &wu), a.scale)
        }
        AdapterKind::AdaptMlp(form) => {
            let x = if form == AdaptMlpForm::Parallel { ffn_in } else { ffn_out };
            scale(&mm(&relu(&mm(x, &wd)), &wu), a.scale)
        }
        AdapterKind::None => unreachable!(),
    }
}

/// Video branch over all frames of one clip; `ffn_out[f]` is frame `f`'s
/// `[T, d]` FFN output with `[CLS]` in row 0.
pub fn video_branch(s: &ParamStore, cfg: &ModelConfig, layer: usize, ffn_in: &[Mat], ffn_out: &[Mat]) -> Vec<Mat> {
    let a = &cfg.adapter;
    let p = format!("adapter.video.{layer}");
    let wd = down_weight(s, cfg, layer, true);
    let wu = param_mat(s, &format!("{p}.up"));
    let trm = format!("{p}.trm");
    let frames = ffn_out.len();
    if let AdapterKind::AdaptMlp(form) = a.kind {
        let x = if form == AdaptMlpForm::Parallel { ffn_in } else { ffn_out };
        return x.iter().map(|xf| scale(&mm(&relu(&mm(xf, &wd)), &wu), a.scale)).collect();
    }
    let down: Vec<Mat> = ffn_out.iter().map(|x| mm(x, &wd)).collect();
    if a.temporal == TemporalMode::Basic {
        return down.iter().map(|h| scale(&mm(&block(s, &trm, a.trm_heads, h, None), &wu), a.scale)).collect();
    }
    let mut seq: Mat = down.iter().map(|h| h[0].clone()).collect();
    if a.frame_pos {
        let fp = param_mat(s, &format!("{p}.frame_pos"));
        for (i, row) in seq.iter_mut().enumerate() {
            for (v, e) in row.iter_mut().zip(&fp[i]) {
                *v += e;
            }
        }
    }
    seq.push(param_vec(s, &format!("{p}.cc")));
    let mixed = block(s, &trm, a.trm_heads, &seq, None);
    let hat_cc = &mixed[frames];
    (0..frames)
        .map(|i| {
            let adapted = &mixed[i];
            let mut out = vec![mm(&vec![adapted.clone()], &wu)[0].clone()];
            let w_up: Mat = if a.temporal == TemporalMode::Full {
                let z: Vec<f64> = hat_cc.iter().chain(adapted).copied().collect();
                let hid = relu(&linear(s, &format!("{p}.cal.fc1"), &vec![z]));
                let alpha = &linear(s, &format!("{p}.cal.fc2"), &hid)[0];
                wu.iter().zip(alpha).map(|(row, al)| row.iter().map(|w| al * w).collect()).collect()
            } else {
                wu.clone()
            };
            out.extend(mm(&down[i][1..].to_vec(), &w_up));
            scale(&out, a.scale)
        })
        .collect()
}

/// Frame features after `ln_post`, one `[d_v]` row per frame of one clip.
/// `clip[f]` is frame `f` as `[patches, patch_dim]`.
pub fn vision_frames(s: &ParamStore, cfg: &ModelConfig, clip: &[Mat], adapters: bool) -> Mat {
    let e = &cfg.encoder;
    let proj = param_mat(s, "vision.patch_proj");
    let pos = param_mat(s, "vision.pos_emb");
    let cls = param_vec(s, "vision.class_emb");
    let mut xs: Vec<Mat> = clip
        .iter()
        .map(|patches| {
            let mut x = vec![cls.clone()];
            x.extend(mm(patches, &proj));
            ln(s, "vision.ln_pre", &add(&x, &pos))
        })
        .collect();
    let mounted = adapters && cfg.adapter.kind != AdapterKind::None && cfg.adapter.video;
    let layers = cfg.adapter_layers();
    for l in 0..e.layers {
        let prefix = format!("vision.blocks.{l}");
        let parts: Vec<_> = xs.iter().map(|x| block_parts(s, &prefix, e.vision_heads(), x, None)).collect();
        let ins: Vec<Mat> = parts.iter().map(|p| p.1.clone()).collect();
        let outs: Vec<Mat> = parts.iter().map(|p| p.2.clone()).collect();
        let branch = (mounted && layers.contains(&l)).then(|| video_branch(s, cfg, l, &ins, &outs));
        xs = parts
            .iter()
            .enumerate()
            .map(|(f, (h, _, o))| {
                let y = add(h, o);
                match &branch {
                    Some(b) => add(&y, &b[f]),
                    None => y,
                }
            })
            .collect();
    }
    let cls_rows: Mat = xs.iter().map(|x| x[0].clone()).collect();
    ln(s, "vision.ln_post", &cls_rows)
}

/// Joint-space clip embedding: mean of frame features, then the projection.
pub fn video_embedding(s: &ParamStore, cfg: &ModelConfig, clip: &[Mat], adapters: bool) -> Vec<f64> {
    let feats = vision_frames(s, cfg, clip, adapters);
    let d = feats[0].len();
    let pooled: Vec<f64> = (0..d).map(|j| feats.iter().map(|r| r[j]).sum::<f64>() / feats.len() as f64).collect();
    mm(&vec![pooled], &param_mat(s, "vision.proj")).remove(0)
}

/// Text feature after `ln_final` at the last position, before the projection.
pub fn text_feature(s: &ParamStore, cfg: &ModelConfig, tokens: &[u16], adapters: bool) -> Vec<f64> {
    let e = &cfg.encoder;
    let table = param_mat(s, "text.token_emb");
    let pos = param_mat(s, "text.pos_emb");
    let visible: Vec<bool> = tokens.iter().map(|&t| t != 0).collect();
    let mut x: Mat = tokens.iter().enumerate().map(|(i, &t)| table[t as usize].iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect();
    let mounted = adapters && cfg.adapter.kind != AdapterKind::None && cfg.adapter.text;
    let layers = cfg.adapter_layers();
    for l in 0..e.layers {
        let (h, fi, fo) = block_parts(s, &format!("text.blocks.{l}"), e.text_heads(), &x, Some(&visible));
        x = add(&h, &fo);
        if mounted && layers.contains(&l) {
            x = add(&x, &text_branch(s, cfg, l, &fi, &fo, &visible));
        }
    }
    ln(s, "text.ln_final", &vec![x.last().unwrap().clone()]).remove(0)
}

pub fn text_embedding(s: &ParamStore, cfg: &ModelConfig, tokens: &[u16], adapters: bool) -> Vec<f64> {
    mm(&vec![text_feature(s, cfg, tokens, adapters)], &param_mat(s, "text.proj")).remove(0)
}

/// Splits a `[B, F, P, D]` tensor into per-clip, per-frame matrices.
pub fn clips(frames: &Tensor) -> Vec<Vec<Mat>> {
    let s = frames.shape();
    let (b, f, p, d) = (s[0], s[1], s[2], s[3]);
    let x = frames.data();
    (0..b)
        .map(|i| {
            (0..f)
                .map(|j| (0..p).map(|k| x[((i * f + j) * p + k) * d..][..d].to_vec()).collect())
                .collect()
        })
        .collect()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Property-test settings with a fixed seed, so every run explores the same
/// cases and the suite output is reproducible.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: n,
        rng_seed: proptest::test_runner::RngSeed::Fixed(0x6d76_6164),
        failure_persistence: None,
        ..Default::default()
    }
}
