//! Cross-modal interaction: both modalities' downsample matrices on an
//! equipped block are generated as `M_C ⊗ M_D` from one shared `M_C`.

use std::fmt;

use thiserror::Error;

use crate::config::ModelConfig;
use crate::numerics::{Graph, NumericsError, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Video,
    Text,
}

impl Modality {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Video => "video",
            Self::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmiError {
    #[error("block {layer} has no {modality} factor matrix")]
    MissingFactor { layer: usize, modality: Modality },
    #[error("block {layer} has no {modality} downsample weight")]
    MissingDown { layer: usize, modality: Modality },
    #[error("{what}: {lhs} is not divisible by {rhs}")]
    Divisibility { what: &'static str, lhs: usize, rhs: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub fn shared_path(layer: usize) -> String {
    format!("cmi.{layer}.shared")
}

pub fn factor_path(layer: usize, modality: Modality) -> String {
    format!("cmi.{layer}.factor_{}", modality.tag())
}

pub fn dense_down_path(layer: usize, modality: Modality) -> String {
    format!("adapter.{}.{layer}.down", modality.tag())
}

/// Kronecker product of two matrices: block `(i, j)` of the result is
/// `a[i, j] · b`.
pub fn kron(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let out = kron_var(&mut g, av, bv)?;
    Ok(g.value(out).clone())
}

/// Differentiable Kronecker product of `[m, n]` and `[p, q]` matrices,
/// expressed as a broadcast product of `[m,1,n,1]` and `[1,p,1,q]`
/// reshaped to `[m·p, n·q]`.
pub fn kron_var(g: &mut Graph, a: Var, b: Var) -> Result<Var, NumericsError> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 {
        return Err(NumericsError::ShapeMismatch {
            op: "kron",
            shapes: vec![sa, sb],
        });
    }
    let (m, n, p, q) = (sa[0], sa[1], sb[0], sb[1]);
    let a4 = g.reshape(a, &[m, 1, n, 1])?;
    let b4 = g.reshape(b, &[1, p, 1, q])?;
    let prod = g.mul(a4, b4)?;
    g.reshape(prod, &[m * p, n * q])
}

/// Downsample weight of `modality` on `layer`: the Kronecker product of the
/// shared matrix and the modality factor on equipped blocks, the dense
/// weight otherwise.
pub fn materialize_down(
    store: &ParamStore,
    g: &mut Graph,
    cfg: &ModelConfig,
    layer: usize,
    modality: Modality,
) -> Result<Var, CmiError> {
    if cfg.cmi_layers().contains(&layer) {
        let fpath = factor_path(layer, modality);
        if !store.contains(&fpath) {
            return Err(CmiError::MissingFactor { layer, modality });
        }
        let shared = store.bind(g, &shared_path(layer))?;
        let factor = store.bind(g, &fpath)?;
        Ok(kron_var(g, shared, factor)?)
    } else {
        let path = dense_down_path(layer, modality);
        if !store.contains(&path) {
            return Err(CmiError::MissingDown { layer, modality });
        }
        Ok(store.bind(g, &path)?)
    }
}

/// Value of [`materialize_down`] without recording anything.
pub fn materialize_down_value(store: &ParamStore, cfg: &ModelConfig, layer: usize, modality: Modality) -> Result<Tensor, CmiError> {
    let mut g = Graph::new();
    let frozen = |g: &mut Graph, path: &str| -> Result<Var, CmiError> {
        let t = store.get(path).ok_or_else(|| NumericsError::UnknownParam(path.to_string()))?;
        Ok(g.constant(t.clone()))
    };
    if cfg.cmi_layers().contains(&layer) {
        let fpath = factor_path(layer, modality);
        if !store.contains(&fpath) {
            return Err(CmiError::MissingFactor { layer, modality });
        }
        let a = frozen(&mut g, &shared_path(layer))?;
        let b = frozen(&mut g, &fpath)?;
        let k = kron_var(&mut g, a, b)?;
        Ok(g.value(k).clone())
    } else {
        let path = dense_down_path(layer, modality);
        store
            .get(&path)
            .cloned()
            .ok_or(CmiError::MissingDown { layer, modality })
    }
}

/// Parameter counts of one downsample matrix, dense versus factored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CmiSavings {
    /// `d·d′`.
    pub dense: usize,
    /// `(d/m)·(d′/n)` per modality.
    pub factor_per_modality: usize,
    /// `m·n`, counted once across both modalities.
    pub shared: usize,
}

pub fn cmi_param_savings(d: usize, d_prime: usize, m: usize, n: usize) -> Result<CmiSavings, CmiError> {
    if m == 0 || !d.is_multiple_of(m) {
        return Err(CmiError::Divisibility {
            what: "feature width by shared rows",
            lhs: d,
            rhs: m,
        });
    }
    if n == 0 || !d_prime.is_multiple_of(n) {
        return Err(CmiError::Divisibility {
            what: "bottleneck width by shared columns",
            lhs: d_prime,
            rhs: n,
        });
    }
    Ok(CmiSavings {
        dense: d * d_prime,
        factor_per_modality: (d / m) * (d_prime / n),
        shared: m * n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_block_expansion() {
        let a = Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]);
        let b = Tensor::from_rows(&[vec![0., 1.]]);
        let k = kron(&a, &b).unwrap();
        assert_eq!(k.shape(), &[2, 4]);
        assert_eq!(k.data(), &[0., 1., 0., 2., 0., 3., 0., 4.]);
    }

    #[test]
    fn full_scale_shape() {
        let k = kron(&Tensor::ones(&[16, 8]), &Tensor::ones(&[48, 8])).unwrap();
        assert_eq!(k.shape(), &[768, 64]);
    }

    #[test]
    fn savings_arithmetic() {
        assert_eq!(
            cmi_param_savings(768, 64, 16, 8).unwrap(),
            CmiSavings {
                dense: 49152,
                factor_per_modality: 384,
                shared: 128
            }
        );
        assert_eq!(
            cmi_param_savings(8, 4, 2, 2).unwrap(),
            CmiSavings {
                dense: 32,
                factor_per_modality: 8,
                shared: 4
            }
        );
        let degenerate = cmi_param_savings(48, 8, 1, 1).unwrap();
        assert_eq!(degenerate.factor_per_modality, degenerate.dense);
        assert_eq!(degenerate.shared, 1);
        assert!(matches!(cmi_param_savings(48, 8, 5, 2), Err(CmiError::Divisibility { .. })));
        assert!(matches!(cmi_param_savings(48, 8, 4, 3), Err(CmiError::Divisibility { .. })));
    }

    #[test]
    fn non_matrix_rejected() {
        assert!(kron(&Tensor::ones(&[2]), &Tensor::ones(&[2, 2])).is_err());
    }
}
