//! Unbiased stochastic rounding onto a dyadic grid.
//!
//! A value `x` with `ℓ = floor(x)` falls in a cell `[τ, τ + Δ)` where
//! `τ = ℓ + mΔ` and `Δ = 2^-b`. It is rounded up to `τ + Δ` with probability
//! `(x - τ) / Δ` and down to `τ` otherwise, so `E[q] = x` and
//! `Var[q] = (x - τ)(τ + Δ - x) ≤ Δ²/4`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

/// Largest supported bit width; `2^-bits` stays a normal `f64`.
pub const MAX_BITS: u8 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerMode {
    Stochastic,
    /// Identity map; stands in for an infinitely fine grid.
    ExactPassthrough,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerConfig {
    bits: u8,
    delta: f64,
    mode: QuantizerMode,
}

impl QuantizerConfig {
    pub fn stochastic(bits: u8) -> Result<Self> {
        if bits == 0 || bits > MAX_BITS {
            return Err(Error::InvalidArgument(format!(
                "bit width must be in 1..={MAX_BITS}, got {bits}"
            )));
        }
        Ok(QuantizerConfig {
            bits,
            delta: (-(bits as f64)).exp2(),
            mode: QuantizerMode::Stochastic,
        })
    }

    pub fn passthrough() -> Self {
        QuantizerConfig {
            bits: 0,
            delta: 0.0,
            mode: QuantizerMode::ExactPassthrough,
        }
    }

    /// `0` selects the passthrough quantizer.
    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits == 0 {
            Ok(Self::passthrough())
        } else {
            Self::stochastic(bits)
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    /// Grid resolution `Δ = 2^-bits`; zero for passthrough.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn mode(&self) -> QuantizerMode {
        self.mode
    }

    /// The two grid points bracketing `x` and the probability of the upper one.
    pub fn cell(&self, x: f64) -> Result<GridCell> {
        if !x.is_finite() {
            return Err(Error::NonFinite {
                value: x,
                context: "quantizer input".into(),
            });
        }
        if self.mode == QuantizerMode::ExactPassthrough {
            return Ok(GridCell {
                lower: x,
                upper: x,
                p_upper: 0.0,
            });
        }
        let floor = x.floor();
        let scale = (self.bits as f64).exp2();
        // both products are exact: the fraction lies in [0, 1) and scale is a power of two
        let pos = (x - floor) * scale;
        let m = pos.floor();
        let lower = floor + m * self.delta;
        Ok(GridCell {
            lower,
            upper: lower + self.delta,
            p_upper: pos - m,
        })
    }

    /// Exact variance `(x - τ)(τ + Δ - x)` of the quantized value.
    pub fn exact_variance(&self, x: f64) -> Result<f64> {
        let c = self.cell(x)?;
        Ok((x - c.lower) * (c.upper - x))
    }
}

/// Bracketing grid cell of a quantizer input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub lower: f64,
    pub upper: f64,
    pub p_upper: f64,
}

impl GridCell {
    /// `lower·P(lower) + upper·P(upper)`.
    pub fn mean(&self) -> f64 {
        self.lower * (1.0 - self.p_upper) + self.upper * self.p_upper
    }
}

/// Vector quantizer used by the simulator; one call per agent per iteration.
pub trait Quantize: Sync {
    fn quantize_into<R: Rng + ?Sized>(&self, x: &[f64], out: &mut [f64], rng: &mut R)
        -> Result<()>;

    /// Grid resolution, 0 when lossless.
    fn delta(&self) -> f64;
}

impl Quantize for QuantizerConfig {
    fn quantize_into<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        out: &mut [f64],
        rng: &mut R,
    ) -> Result<()> {
        if x.len() != out.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: out.len(),
                context: "quantizer output buffer".into(),
            });
        }
        for (o, &v) in out.iter_mut().zip(x) {
            *o = quantize_scalar(v, self, rng)?;
        }
        Ok(())
    }

    fn delta(&self) -> f64 {
        self.delta
    }
}

/// Rounds `x` to one of its two bracketing grid points. Grid points map to
/// themselves; one uniform draw is consumed per call in stochastic mode.
pub fn quantize_scalar<R: Rng + ?Sized>(x: f64, cfg: &QuantizerConfig, rng: &mut R) -> Result<f64> {
    let cell = cfg.cell(x)?;
    if cfg.mode == QuantizerMode::ExactPassthrough {
        return Ok(x);
    }
    let u: f64 = rng.random();
    Ok(if u < cell.p_upper {
        cell.upper
    } else {
        cell.lower
    })
}

/// Componentwise quantization with independent draws per coordinate.
pub fn quantize_vector<R: Rng + ?Sized>(
    x: &[f64],
    cfg: &QuantizerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    cfg.quantize_into(x, &mut out, rng)?;
    Ok(out)
}

/// Sample mean and unbiased sample variance of `trials` quantizations of `x`.
pub fn estimate_quantizer_moments(
    x: f64,
    cfg: &QuantizerConfig,
    trials: u64,
    seed: u64,
) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, Purpose::Statistics, 0);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for n in 1..=trials {
        let q = quantize_scalar(x, cfg, &mut rng)?;
        let d = q - mean;
        mean += d / n as f64;
        m2 += d * (q - mean);
    }
    let variance = if trials > 1 {
        m2 / (trials - 1) as f64
    } else {
        0.0
    };
    Ok((mean, variance))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> rng::Stream {
        rng::stream(99, Purpose::Statistics, 0)
    }

    #[test]
    fn delta_is_dyadic() {
        for b in 1..=MAX_BITS {
            let cfg = QuantizerConfig::stochastic(b).unwrap();
            assert_eq!(cfg.delta(), 1.0 / (1u64 << b) as f64);
        }
        assert!(QuantizerConfig::stochastic(0).is_err());
        assert!(QuantizerConfig::stochastic(61).is_err());
    }

    #[test]
    fn integer_is_fixed_point() {
        let mut r = rng();
        for b in [1, 3, 8] {
            let cfg = QuantizerConfig::stochastic(b).unwrap();
            for _ in 0..1000 {
                assert_eq!(quantize_scalar(2.0, &cfg, &mut r).unwrap(), 2.0);
                assert_eq!(quantize_scalar(-3.0, &cfg, &mut r).unwrap(), -3.0);
            }
        }
    }

    #[test]
    fn cell_for_positive_fraction() {
        let cfg = QuantizerConfig::stochastic(2).unwrap();
        let c = cfg.cell(0.3).unwrap();
        assert_eq!((c.lower, c.upper), (0.25, 0.5));
        assert!((c.p_upper - 0.2).abs() < 1e-15);
    }

    #[test]
    fn cell_for_negative_value() {
        let cfg = QuantizerConfig::stochastic(1).unwrap();
        let c = cfg.cell(-1.3).unwrap();
        assert_eq!((c.lower, c.upper), (-1.5, -1.0));
        assert!((c.p_upper - 0.4).abs() < 1e-15);
    }

    #[test]
    fn grid_point_takes_lower_branch() {
        let cfg = QuantizerConfig::stochastic(2).unwrap();
        let c = cfg.cell(0.75).unwrap();
        assert_eq!((c.lower, c.p_upper), (0.75, 0.0));
        let mut r = rng();
        for _ in 0..1000 {
            assert_eq!(quantize_scalar(0.75, &cfg, &mut r).unwrap(), 0.75);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let cfg = QuantizerConfig::stochastic(4).unwrap();
        let mut r = rng();
        assert!(quantize_scalar(f64::NAN, &cfg, &mut r).is_err());
        assert!(quantize_scalar(f64::INFINITY, &cfg, &mut r).is_err());
        assert!(quantize_vector(&[0.0, f64::NEG_INFINITY], &cfg, &mut r).is_err());
        assert!(quantize_scalar(f64::NAN, &QuantizerConfig::passthrough(), &mut r).is_err());
    }

    #[test]
    fn passthrough_is_identity() {
        let cfg = QuantizerConfig::passthrough();
        let mut r = rng();
        let x = [0.1234567, -0.987, 3.0];
        assert_eq!(quantize_vector(&x, &cfg, &mut r).unwrap(), x);
        assert_eq!(cfg.delta(), 0.0);
    }

    #[test]
    fn zero_and_integer_vectors_are_fixed() {
        let cfg = QuantizerConfig::stochastic(3).unwrap();
        let mut r = rng();
        assert_eq!(
            quantize_vector(&[0.0; 5], &cfg, &mut r).unwrap(),
            vec![0.0; 5]
        );
        let ints = [1.0, -2.0, 7.0, 0.0];
        assert_eq!(quantize_vector(&ints, &cfg, &mut r).unwrap(), ints);
    }

    #[test]
    fn buffer_length_checked() {
        let cfg = QuantizerConfig::stochastic(3).unwrap();
        let mut out = [0.0; 2];
        assert!(cfg.quantize_into(&[0.1; 3], &mut out, &mut rng()).is_err());
    }

    #[test]
    fn moments_of_grid_point_are_exact() {
        let cfg = QuantizerConfig::stochastic(5).unwrap();
        assert_eq!(
            estimate_quantizer_moments(2.0, &cfg, 1000, 1).unwrap(),
            (2.0, 0.0)
        );
        assert!(estimate_quantizer_moments(2.0, &cfg, 0, 1).is_err());
    }

    #[test]
    fn exact_variance_values() {
        let q1 = QuantizerConfig::stochastic(1).unwrap();
        assert_eq!(q1.exact_variance(0.25).unwrap(), 1.0 / 16.0);
        let q2 = QuantizerConfig::stochastic(2).unwrap();
        assert!((q2.exact_variance(0.3).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = QuantizerConfig::stochastic(2).unwrap();
        let mut a = rng::stream(5, Purpose::Quantization, 1);
        let mut b = rng::stream(5, Purpose::Quantization, 1);
        let xs: Vec<f64> = (0..200).map(|i| (i as f64 * 0.173).sin() * 3.0).collect();
        for &x in &xs {
            assert_eq!(
                quantize_scalar(x, &cfg, &mut a).unwrap(),
                quantize_scalar(x, &cfg, &mut b).unwrap()
            );
        }
    }
}
