//! Gaussian dequantization of class labels and the matching round-and-clamp
//! quantization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default kernel variance: three standard deviations reach the rounding boundary.
pub const DEFAULT_SIGMA2: f64 = 1.0 / 36.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DequantSpec {
    pub n_classes: usize,
    pub sigma2: f64,
}

impl DequantSpec {
    /// `sigma2 == 0` is accepted and makes dequantization an exact copy.
    pub fn new(n_classes: usize, sigma2: f64) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 >= 0.0) {
            return Err(Error::InvalidVariance(sigma2));
        }
        if n_classes == 0 {
            return Err(Error::InvalidConfig("n_classes must be positive".into()));
        }
        Ok(DequantSpec { n_classes, sigma2 })
    }

    pub fn with_default_variance(n_classes: usize) -> Result<Self> {
        Self::new(n_classes, DEFAULT_SIGMA2)
    }

    fn check(&self, label: i64) -> Result<()> {
        if label < 0 || label as usize >= self.n_classes {
            return Err(Error::LabelOutOfRange {
                label,
                n_classes: self.n_classes,
            });
        }
        Ok(())
    }
}

/// Draws `label + N(0, sigma2)` for every label.
pub fn dequantize<T: Scalar>(labels: &[i64], spec: &DequantSpec, seed: u64) -> Result<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dequantize_with(labels, spec, &mut rng)
}

pub fn dequantize_with<T: Scalar, R: Rng + ?Sized>(
    labels: &[i64],
    spec: &DequantSpec,
    rng: &mut R,
) -> Result<Vec<T>> {
    let sd = spec.sigma2.sqrt();
    labels
        .iter()
        .map(|&label| {
            spec.check(label)?;
            if spec.sigma2 == 0.0 {
                return Ok(T::lit(label as f64));
            }
            let noise: f64 = rng.sample(StandardNormal);
            Ok(T::lit(label as f64 + sd * noise))
        })
        .collect()
}

/// Rounds half away from zero, then clamps into `0..n_classes`.
pub fn quantize_one<T: Scalar>(value: T, n_classes: usize) -> i64 {
    let top = n_classes.saturating_sub(1) as f64;
    let v = value.to_f64_lossy();
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, top) as i64
}

pub fn quantize<T: Scalar>(values: &[T], spec: &DequantSpec) -> Vec<i64> {
    values
        .iter()
        .map(|&v| quantize_one(v, spec.n_classes))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn moments_match_kernel() {
        let spec = DequantSpec::with_default_variance(3).unwrap();
        let n = 100_000;
        let out: Vec<f64> = dequantize(&vec![1; n], &spec, 7).unwrap();
        let mean = out.iter().sum::<f64>() / n as f64;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((mean - 1.0).abs() < 0.002, "mean {mean}");
        assert!((var - 1.0 / 36.0).abs() < 0.002, "var {var}");
    }

    #[test]
    fn zero_variance_copies_labels() {
        let spec = DequantSpec::new(4, 0.0).unwrap();
        let out: Vec<f64> = dequantize(&[0, 3, 2], &spec, 1).unwrap();
        assert_eq!(out, vec![0.0, 3.0, 2.0]);
    }

    #[test]
    fn tail_fraction_near_analytic() {
        // P(|N(0, 1/36)| >= 0.5) = 2 Phi(-3)
        let expected = 2.0 * crate::scalar::normal_cdf(-3.0);
        let spec = DequantSpec::with_default_variance(2).unwrap();
        let n = 100_000;
        let labels = vec![1; n];
        let out: Vec<f64> = dequantize(&labels, &spec, 11).unwrap();
        let frac = out.iter().filter(|v| (*v - 1.0).abs() >= 0.5).count() as f64 / n as f64;
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((frac - expected).abs() < 4.0 * se, "frac {frac} vs {expected}");
    }

    #[test]
    fn rejects_bad_labels_and_variance() {
        let spec = DequantSpec::with_default_variance(2).unwrap();
        assert_eq!(
            dequantize::<f64>(&[0, 2], &spec, 0).unwrap_err(),
            Error::LabelOutOfRange { label: 2, n_classes: 2 }
        );
        assert!(dequantize::<f64>(&[-1], &spec, 0).is_err());
        assert!(DequantSpec::new(2, -1.0).is_err());
        assert!(DequantSpec::new(2, f64::NAN).is_err());
    }

    #[test]
    fn quantize_boundary_cases() {
        let spec = DequantSpec::with_default_variance(3).unwrap();
        assert_eq!(quantize(&[2.4f64, -0.6, 3.7], &spec), vec![2, 0, 2]);
        assert_eq!(quantize(&[0.5f64, 1.5, -0.5, 0.4999], &spec), vec![1, 2, 0, 0]);
        assert_eq!(quantize(&[f64::INFINITY, f64::NEG_INFINITY], &spec), vec![2, 0]);
    }

    proptest! {
        #[test]
        fn quantize_output_in_range(v in -1e6f64..1e6, n in 1usize..10) {
            let q = quantize_one(v, n);
            prop_assert!(q >= 0 && (q as usize) < n);
        }

        #[test]
        fn quantize_idempotent_on_labels(label in 0i64..12, extra in 0usize..5) {
            let n = label as usize + 1 + extra;
            prop_assert_eq!(quantize_one(label as f64, n), label);
        }

        #[test]
        fn round_trip_when_noise_small(label in 0i64..5, noise in -0.4999f64..0.4999) {
            prop_assert_eq!(quantize_one(label as f64 + noise, 5), label);
        }
    }
}
