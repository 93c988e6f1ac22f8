//! Holographic reduced representation primitives: binding by circular
//! convolution, the exact spectral inverse, and unbinding.
//!
//! The inverse divides by the binding vector's spectrum, so it is only
//! defined when every bin stays away from zero; [`validate_invertible`]
//! checks that precondition and [`inverse`] enforces it.

use crate::error::{HgError, Result};
use crate::numerics::fft::{circ_conv, Fft};
use crate::numerics::Scalar;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Spectral-magnitude floor below which a vector is treated as
/// non-invertible.
pub const EPSILON_INV: f64 = 1e-3;

/// A real vector used as a holographic symbol or binding key.
#[derive(Debug, Clone, PartialEq)]
pub struct HrrVector<F: Scalar> {
    values: Vec<F>,
}

impl<F: Scalar> HrrVector<F> {
    pub fn new(values: Vec<F>) -> Result<Self> {
        if values.is_empty() {
            return Err(HgError::InvalidLength(
                "hrr vector dimension must be >= 1".into(),
            ));
        }
        Ok(HrrVector { values })
    }

    /// Unit impulse: the identity element of binding.
    pub fn delta(dim: usize) -> Result<Self> {
        let mut values = vec![F::ZERO; dim];
        *values
            .first_mut()
            .ok_or_else(|| HgError::InvalidLength("hrr vector dimension must be >= 1".into()))? =
            F::ONE;
        Ok(HrrVector { values })
    }

    /// Vector with i.i.d. N(0, 1/d) components, the standard HRR draw:
    /// expected squared norm is 1 regardless of dimension.
    pub fn random<R: Rng>(dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(HgError::InvalidLength(
                "hrr vector dimension must be >= 1".into(),
            ));
        }
        let normal = Normal::new(0.0f64, (1.0 / dim as f64).sqrt())
            .expect("positive standard deviation");
        let values = (0..dim)
            .map(|_| F::from_f64(normal.sample(rng)))
            .collect();
        Ok(HrrVector { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn into_values(self) -> Vec<F> {
        self.values
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dims(self, other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(HrrVector { values })
    }
}

fn check_dims<F: Scalar>(x: &HrrVector<F>, y: &HrrVector<F>) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(HgError::Shape(format!(
            "hrr dimension mismatch: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(())
}

/// Bind two symbols: circular convolution of their values.
pub fn bind<F: Scalar>(x: &HrrVector<F>, y: &HrrVector<F>) -> Result<HrrVector<F>> {
    check_dims(x, y)?;
    let values = circ_conv(&x.values, &y.values, x.dim())?;
    Ok(HrrVector { values })
}

/// Exact binding inverse: pointwise spectral reciprocal. Fails with the
/// offending bin if any spectral magnitude drops below `EPSILON_INV`.
pub fn inverse<F: Scalar>(y: &HrrVector<F>) -> Result<HrrVector<F>> {
    let report = validate_invertible(y, EPSILON_INV)?;
    if !report.invertible {
        return Err(HgError::NearSingular {
            bin: report.min_bin,
            magnitude: report.min_magnitude,
            epsilon: EPSILON_INV,
        });
    }
    let n = y.dim();
    let plan = Fft::new(n)?;
    let spec = plan.forward_real(&y.values)?;
    let mut re = vec![F::ZERO; n];
    let mut im = vec![F::ZERO; n];
    for k in 0..n {
        // 1/(a+bi) = (a-bi)/(a^2+b^2)
        let denom = spec.re[k] * spec.re[k] + spec.im[k] * spec.im[k];
        re[k] = spec.re[k] / denom;
        im[k] = -spec.im[k] / denom;
    }
    plan.inverse(&mut re, &mut im);
    Ok(HrrVector { values: re })
}

/// Retrieve from a binding: `bind(b, inverse(y))`. Exact for a single bound
/// pair, approximate when `b` superposes several bindings.
pub fn unbind<F: Scalar>(b: &HrrVector<F>, y: &HrrVector<F>) -> Result<HrrVector<F>> {
    check_dims(b, y)?;
    bind(b, &inverse(y)?)
}

/// Outcome of the invertibility check: the smallest spectral bin and
/// whether it clears the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertibilityReport {
    pub invertible: bool,
    pub min_bin: usize,
    pub min_magnitude: f64,
    pub epsilon: f64,
}

/// True iff every spectral bin magnitude of `y` is at least `epsilon`;
/// the report carries the worst bin either way.
pub fn validate_invertible<F: Scalar>(
    y: &HrrVector<F>,
    epsilon: f64,
) -> Result<InvertibilityReport> {
    let spec = Fft::new(y.dim())?.forward_real(&y.values)?;
    let mut min_bin = 0;
    let mut min_magnitude = f64::INFINITY;
    for k in 0..y.dim() {
        let mag = spec.bin_magnitude(k);
        if mag < min_magnitude {
            min_magnitude = mag;
            min_bin = k;
        }
    }
    Ok(InvertibilityReport {
        invertible: min_magnitude >= epsilon,
        min_bin,
        min_magnitude,
        epsilon,
    })
}
