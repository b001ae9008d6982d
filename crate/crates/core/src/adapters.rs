//! Adapter branches mounted after each equipped block's FFN.
//!
//! Every branch maps its input through a bottleneck `Downsample → (TRM) →
//! Upsample` and scales the result by `s`; the caller adds the output to the
//! FFN output. The text branch is the plain bottleneck
//! `s · TRM(x·W_down)·W_up`. The video branch adds temporal adaptation:
//!
//! 1. all tokens of every frame share one `W_down`;
//! 2. the downsampled per-frame `[CLS]` tokens, plus a frame-position
//!    embedding, are followed by a learnable `[CC]` token and mixed across
//!    frames by the lightweight transformer;
//! 3. for each frame `i`, `α_cal = FC2(ReLU(FC1([ĉc, ĉls_i])))` rescales the
//!    rows of `W_up`, so patches of different frames are upsampled with
//!    different weights;
//! 4. `[CLS]` tokens are upsampled with the plain `W_up`.
//!
//! With `W_up = 0` (the initialization) every branch outputs exact zeros.
//! The calibration MLP is initialized to output all ones, so the calibrated
//! path also starts from the uncalibrated weights.

use crate::cmi::{materialize_down, materialize_down_value, CmiError, Modality};
use crate::config::{AdaptMlpForm, AdapterKind, TemporalMode};
use crate::encoders::Model;
use crate::nn::BlockParams;
use crate::numerics::{Graph, NumericsError, ParamStore, Tensor, Var};

pub fn branch_prefix(modality: Modality, layer: usize) -> String {
    format!("adapter.{}.{layer}", modality.tag())
}

pub fn trm_params(modality: Modality, layer: usize, heads: usize) -> BlockParams {
    BlockParams::new(format!("{}.trm", branch_prefix(modality, layer)), heads)
}

/// Lightweight transformer: one pre-norm self-attention + FFN layer over
/// axis -2 of `tokens`. Carries no positional information of its own.
pub fn trm_forward(
    store: &ParamStore,
    g: &mut Graph,
    trm: &BlockParams,
    tokens: Var,
    mask: Option<Var>,
) -> Result<Var, NumericsError> {
    trm.forward(store, g, tokens, mask)
}

/// `(TRM(x·W_down)·W_up)·s` over the token axis.
#[allow(clippy::too_many_arguments)]
pub fn text_branch_forward(
    store: &ParamStore,
    g: &mut Graph,
    x: Var,
    down: Var,
    up: Var,
    trm: &BlockParams,
    scale: f64,
    mask: Option<Var>,
) -> Result<Var, NumericsError> {
    let h = g.matmul(x, down)?;
    let h = trm_forward(store, g, trm, h, mask)?;
    let o = g.matmul(h, up)?;
    Ok(g.scale(o, scale))
}

/// Broadcasts a `[d]` vector to `[lead.., d]`.
pub(crate) fn expand(g: &mut Graph, v: Var, lead: &[usize]) -> Result<Var, NumericsError> {
    let d = *g.shape(v).last().unwrap();
    let mut shape = lead.to_vec();
    shape.push(d);
    let z = g.constant(Tensor::zeros(&shape));
    g.add(z, v)
}

/// Appends `[CC]` to the downsampled per-frame `[CLS]` sequence
/// `cls: [B, F, d′]`, runs the lightweight transformer across frames and
/// splits the result into the adapted `[CLS]` rows `[B, F, d′]` and the
/// global `[CC]` output `[B, 1, d′]`.
///
/// `frame_pos: [max_frames, d′]`, when present, is added to the `[CLS]`
/// rows before mixing.
pub fn temporal_cls_adapt(
    store: &ParamStore,
    g: &mut Graph,
    cls: Var,
    cc: Var,
    frame_pos: Option<Var>,
    trm: &BlockParams,
) -> Result<(Var, Var), NumericsError> {
    let shape = g.shape(cls).to_vec();
    let (b, f) = (shape[0], shape[1]);
    let mut seq = cls;
    if let Some(p) = frame_pos {
        let p = g.slice(p, 0, 0, f)?;
        seq = g.add(seq, p)?;
    }
    let cc_b = expand(g, cc, &[b, 1])?;
    let seq = g.concat(&[seq, cc_b], 1)?;
    let out = trm_forward(store, g, trm, seq, None)?;
    let adapted = g.slice(out, 1, 0, f)?;
    let hat_cc = g.slice(out, 1, f, f + 1)?;
    Ok((adapted, hat_cc))
}

/// Calibration MLP weights.
#[derive(Clone, Copy, Debug)]
pub struct Calibration {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// `FC2(ReLU(FC1(concat(ĉc, ĉls))))`, row-wise over leading axes.
pub fn calibration_weights(g: &mut Graph, hat_cc: Var, hat_cls: Var, cal: &Calibration) -> Result<Var, NumericsError> {
    let axis = g.shape(hat_cls).len() - 1;
    let alpha = g.concat(&[hat_cc, hat_cls], axis)?;
    let h = g.matmul(alpha, cal.fc1_w)?;
    let h = g.add(h, cal.fc1_b)?;
    let h = g.relu(h);
    let o = g.matmul(h, cal.fc2_w)?;
    g.add(o, cal.fc2_b)
}

/// Row-wise scaling of `W_up: [d′, d]` by `α_cal: [.., d′]`, giving
/// `[.., d′, d]` with row `r` equal to `α_cal[r] · W_up[r, :]`.
pub fn calibrate_upsample(g: &mut Graph, w_up: Var, alpha: Var) -> Result<Var, NumericsError> {
    let mut shape = g.shape(alpha).to_vec();
    shape.push(1);
    let col = g.reshape(alpha, &shape)?;
    g.mul(col, w_up)
}

/// Tensor-level [`calibrate_upsample`].
pub fn calibrate_upsample_tensor(w_up: &Tensor, alpha: &Tensor) -> Result<Tensor, NumericsError> {
    if alpha.shape().last() != w_up.shape().first() {
        return Err(NumericsError::ShapeMismatch {
            op: "calibrate_upsample",
            shapes: vec![w_up.shape().to_vec(), alpha.shape().to_vec()],
        });
    }
    let mut g = Graph::new();
    let w = g.constant(w_up.clone());
    let a = g.constant(alpha.clone());
    let out = calibrate_upsample(&mut g, w, a)?;
    Ok(g.value(out).clone())
}

/// Bound weights of one video branch.
pub struct VideoBranch {
    pub down: Var,
    pub up: Var,
    pub trm: BlockParams,
    pub cc: Option<Var>,
    pub frame_pos: Option<Var>,
    pub cal: Option<Calibration>,
}

/// Video branch over the FFN output `x: [B, F, T, d]` of all frames
/// (token 0 of each frame is `[CLS]`). Output has the same shape.
pub fn video_branch_forward(
    store: &ParamStore,
    g: &mut Graph,
    x: Var,
    p: &VideoBranch,
    scale: f64,
    mode: TemporalMode,
) -> Result<Var, NumericsError> {
    let shape = g.shape(x).to_vec();
    let (b, f, t, d) = (shape[0], shape[1], shape[2], shape[3]);
    let down = g.matmul(x, p.down)?;
    if mode == TemporalMode::Basic {
        let flat = g.reshape(down, &[b * f, t, p_width(g, p.down)])?;
        let h = trm_forward(store, g, &p.trm, flat, None)?;
        let o = g.matmul(h, p.up)?;
        let o = g.scale(o, scale);
        return g.reshape(o, &shape);
    }
    let dp = p_width(g, p.down);
    let cls = g.slice(down, 2, 0, 1)?;
    let cls = g.reshape(cls, &[b, f, dp])?;
    let cc = p.cc.expect("temporal modes carry a [CC] token");
    let (adapted, hat_cc) = temporal_cls_adapt(store, g, cls, cc, p.frame_pos, &p.trm)?;

    let cls_out = g.matmul(adapted, p.up)?;
    let cls_out = g.scale(cls_out, scale);
    let cls_out = g.reshape(cls_out, &[b, f, 1, d])?;
    if t == 1 {
        return Ok(cls_out);
    }
    let patches = g.slice(down, 2, 1, t)?;
    let patch_out = match (mode, &p.cal) {
        (TemporalMode::Full, Some(cal)) => {
            let cc_f = g.concat(&vec![hat_cc; f], 1)?;
            let alpha = calibration_weights(g, cc_f, adapted, cal)?;
            let w_cal = calibrate_upsample(g, p.up, alpha)?;
            let w_cal = g.reshape(w_cal, &[b * f, dp, d])?;
            let pf = g.reshape(patches, &[b * f, t - 1, dp])?;
            let o = g.matmul(pf, w_cal)?;
            g.reshape(o, &[b, f, t - 1, d])?
        }
        _ => g.matmul(patches, p.up)?,
    };
    let patch_out = g.scale(patch_out, scale);
    g.concat(&[cls_out, patch_out], 2)
}

fn p_width(g: &Graph, down: Var) -> usize {
    g.shape(down)[1]
}

/// AdaptMLP bottleneck: `(ReLU(x·W_down)·W_up)·s`. Frame-independent.
pub fn adaptmlp_forward(g: &mut Graph, x: Var, down: Var, up: Var, scale: f64) -> Result<Var, NumericsError> {
    let h = g.matmul(x, down)?;
    let h = g.relu(h);
    let o = g.matmul(h, up)?;
    Ok(g.scale(o, scale))
}

/// Downsample weight of one branch; a constant when `m` detaches the modality.
fn bind_down(m: Model<'_>, g: &mut Graph, layer: usize, modality: Modality) -> Result<Var, CmiError> {
    if m.detach == Some(modality) {
        let w = materialize_down_value(m.params, m.config, layer, modality)?;
        Ok(g.constant(w))
    } else {
        materialize_down(m.params, g, m.config, layer, modality)
    }
}

/// Adapter output for one block of the vision encoder.
///
/// `ffn_in`/`ffn_out` are `[B·F, T, d_v]`; the result has the same shape.
pub fn video_adapter(
    m: Model<'_>,
    g: &mut Graph,
    layer: usize,
    frames: (usize, usize),
    ffn_in: Var,
    ffn_out: Var,
) -> Result<Var, CmiError> {
    let (store, a) = (m.params, &m.config.adapter);
    let prefix = branch_prefix(Modality::Video, layer);
    let down = bind_down(m, g, layer, Modality::Video)?;
    let up = store.bind(g, &format!("{prefix}.up"))?;
    match a.kind {
        AdapterKind::Mv => {
            let shape = g.shape(ffn_out).to_vec();
            let (b, f) = frames;
            let x = g.reshape(ffn_out, &[b, f, shape[1], shape[2]])?;
            let with_temporal = a.temporal != TemporalMode::Basic;
            let bind_opt = |g: &mut Graph, name: &str, on: bool| -> Result<Option<Var>, NumericsError> {
                if on {
                    store.bind(g, &format!("{prefix}.{name}")).map(Some)
                } else {
                    Ok(None)
                }
            };
            let cc = bind_opt(g, "cc", with_temporal)?;
            let frame_pos = bind_opt(g, "frame_pos", with_temporal && a.frame_pos)?;
            let cal = if a.temporal == TemporalMode::Full {
                Some(Calibration {
                    fc1_w: store.bind(g, &format!("{prefix}.cal.fc1.w"))?,
                    fc1_b: store.bind(g, &format!("{prefix}.cal.fc1.b"))?,
                    fc2_w: store.bind(g, &format!("{prefix}.cal.fc2.w"))?,
                    fc2_b: store.bind(g, &format!("{prefix}.cal.fc2.b"))?,
                })
            } else {
                None
            };
            let branch = VideoBranch {
                down,
                up,
                trm: trm_params(Modality::Video, layer, a.trm_heads),
                cc,
                frame_pos,
                cal,
            };
            let o = video_branch_forward(store, g, x, &branch, a.scale, a.temporal)?;
            Ok(g.reshape(o, &shape)?)
        }
        AdapterKind::AdaptMlp(form) => {
            let input = match form {
                AdaptMlpForm::Parallel => ffn_in,
                AdaptMlpForm::Sequential => ffn_out,
            };
            Ok(adaptmlp_forward(g, input, down, up, a.scale)?)
        }
        AdapterKind::None => unreachable!("no adapter mounted"),
    }
}

/// Adapter output for one block of the text encoder, `[B, T, d_t]`.
pub fn text_adapter(
    m: Model<'_>,
    g: &mut Graph,
    layer: usize,
    ffn_in: Var,
    ffn_out: Var,
    mask: Option<Var>,
) -> Result<Var, CmiError> {
    let (store, a) = (m.params, &m.config.adapter);
    let prefix = branch_prefix(Modality::Text, layer);
    let down = bind_down(m, g, layer, Modality::Text)?;
    let up = store.bind(g, &format!("{prefix}.up"))?;
    match a.kind {
        AdapterKind::Mv => {
            let trm = trm_params(Modality::Text, layer, a.trm_heads);
            Ok(text_branch_forward(store, g, ffn_out, down, up, &trm, a.scale, mask)?)
        }
        AdapterKind::AdaptMlp(form) => {
            let input = match form {
                AdaptMlpForm::Parallel => ffn_in,
                AdaptMlpForm::Sequential => ffn_out,
            };
            Ok(adaptmlp_forward(g, input, down, up, a.scale)?)
        }
        AdapterKind::None => unreachable!("no adapter mounted"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_init, InitScheme};

    fn rand(shape: &[usize], path: &str) -> Tensor {
        seeded_init(shape, InitScheme::ScaledNormal, 11, path)
    }

    #[test]
    fn calibrate_upsample_example() {
        let w = Tensor::from_rows(&[vec![1., 2., 3.], vec![4., 5., 6.]]);
        let a = Tensor::new(&[2], vec![2., -1.]).unwrap();
        let out = calibrate_upsample_tensor(&w, &a).unwrap();
        assert_eq!(out.data(), &[2., 4., 6., -4., -5., -6.]);
        let ones = calibrate_upsample_tensor(&w, &Tensor::ones(&[2])).unwrap();
        assert!(ones.bitwise_eq(&w));
        let zeros = calibrate_upsample_tensor(&w, &Tensor::zeros(&[2])).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        assert!(calibrate_upsample_tensor(&w, &Tensor::ones(&[3])).is_err());
    }

    #[test]
    fn calibration_init_is_identity() {
        let mut g = Graph::new();
        let cal = Calibration {
            fc1_w: g.constant(rand(&[8, 2], "fc1")),
            fc1_b: g.constant(Tensor::zeros(&[2])),
            fc2_w: g.constant(Tensor::zeros(&[2, 4])),
            fc2_b: g.constant(Tensor::ones(&[4])),
        };
        let cc = g.constant(rand(&[3, 4], "cc"));
        let cls = g.constant(rand(&[3, 4], "cls"));
        let alpha = calibration_weights(&mut g, cc, cls, &cal).unwrap();
        assert!(g.value(alpha).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn calibration_constant_propagation() {
        let mut g = Graph::new();
        let b2 = Tensor::new(&[4], vec![0.5, -2.0, 3.0, 0.0]).unwrap();
        let cal = Calibration {
            fc1_w: g.constant(Tensor::zeros(&[8, 2])),
            fc1_b: g.constant(Tensor::new(&[2], vec![0.3, -0.7]).unwrap()),
            fc2_w: g.constant(Tensor::zeros(&[2, 4])),
            fc2_b: g.constant(b2.clone()),
        };
        let cc = g.constant(rand(&[4], "cc"));
        let cls = g.constant(rand(&[4], "cls"));
        let alpha = calibration_weights(&mut g, cc, cls, &cal).unwrap();
        assert!(g.value(alpha).bitwise_eq(&b2));
    }

    #[test]
    fn adaptmlp_zero_paths() {
        let mut g = Graph::new();
        let x = g.constant(rand(&[3, 6], "x"));
        let down = g.constant(rand(&[6, 2], "d"));
        let zero_up = g.constant(Tensor::zeros(&[2, 6]));
        let o = adaptmlp_forward(&mut g, x, down, zero_up, 0.1).unwrap();
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));
        // all-negative pre-activations
        let pos = g.constant(Tensor::ones(&[3, 6]));
        let neg_down = g.constant(Tensor::full(&[6, 2], -1.0));
        let up = g.constant(rand(&[2, 6], "u"));
        let o = adaptmlp_forward(&mut g, pos, neg_down, up, 0.1).unwrap();
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));
    }
}
