use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    Zeros,
    Ones,
    /// Normal with std `1/sqrt(fan_in)`, where `fan_in` is the leading extent.
    ScaledNormal,
    /// Uniform on `±1/sqrt(fan_in)`.
    ScaledUniform,
}

impl FromStr for InitScheme {
    type Err = NumericsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zeros" => Ok(Self::Zeros),
            "ones" => Ok(Self::Ones),
            "scaled-normal" => Ok(Self::ScaledNormal),
            "scaled-uniform" => Ok(Self::ScaledUniform),
            other => Err(NumericsError::UnknownScheme(other.to_string())),
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent random stream for `path` under a global `seed`.
pub fn substream(seed: u64, path: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed) ^ fnv1a(path.as_bytes()))
}

pub fn seeded_init(shape: &[usize], scheme: InitScheme, seed: u64, path: &str) -> Tensor {
    let n: usize = shape.iter().product();
    match scheme {
        InitScheme::Zeros => Tensor::zeros(shape),
        InitScheme::Ones => Tensor::ones(shape),
        InitScheme::ScaledNormal => {
            let std = 1.0 / (shape[0] as f64).sqrt();
            let mut rng = substream(seed, path);
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            Tensor::new(shape, data).expect("shape checked by caller")
        }
        InitScheme::ScaledUniform => {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            let mut rng = substream(seed, path);
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data).expect("shape checked by caller")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_any_seed() {
        let t = seeded_init(&[2, 2], InitScheme::Zeros, 99, "w");
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn same_seed_and_path_is_bitwise_identical() {
        for scheme in [InitScheme::ScaledNormal, InitScheme::ScaledUniform] {
            let a = seeded_init(&[7, 3], scheme, 5, "enc.w");
            let b = seeded_init(&[7, 3], scheme, 5, "enc.w");
            assert!(a.bitwise_eq(&b));
            let c = seeded_init(&[7, 3], scheme, 5, "enc.v");
            assert!(!a.bitwise_eq(&c));
            let d = seeded_init(&[7, 3], scheme, 6, "enc.w");
            assert!(!a.bitwise_eq(&d));
        }
    }

    #[test]
    fn scaled_normal_std() {
        let t = seeded_init(&[1000, 1], InitScheme::ScaledNormal, 0, "p");
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let target = 1.0 / 1000f64.sqrt();
        assert!((var.sqrt() - target).abs() < 0.1 * target, "{} vs {target}", var.sqrt());
    }

    #[test]
    fn scaled_uniform_bounds() {
        let t = seeded_init(&[16, 4], InitScheme::ScaledUniform, 1, "u");
        assert!(t.data().iter().all(|v| v.abs() < 0.25));
    }

    #[test]
    fn unknown_scheme_rejected() {
        assert_eq!(
            "xavier".parse::<InitScheme>(),
            Err(NumericsError::UnknownScheme("xavier".into()))
        );
        assert_eq!("scaled-normal".parse::<InitScheme>(), Ok(InitScheme::ScaledNormal));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
