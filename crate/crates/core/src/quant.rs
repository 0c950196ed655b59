//! Per-tensor affine quantization.
//!
//! Rounding is half away from zero throughout, which is what `f64::round`
//! does.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Width added around a degenerate observed range.
pub const DEGENERATE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Signed grid centred on zero, zero-point 0.
    SymmetricWeight,
    /// Unsigned grid with a zero-point.
    AsymmetricActivation,
}

impl Scheme {
    pub fn code(self) -> u8 {
        match self {
            Scheme::SymmetricWeight => 0,
            Scheme::AsymmetricActivation => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Scheme::SymmetricWeight),
            1 => Some(Scheme::AsymmetricActivation),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
    pub scheme: Scheme,
    pub observed_min: f64,
    pub observed_max: f64,
}

/// `s = (max − min)/(2ⁿ − 1)`; activations get `z = round(−min/s)`, weights
/// use the symmetrized range `±max(|min|, |max|)` and `z = 0`.
///
/// Activation ranges are stretched to contain 0 so the zero-point lands on
/// the grid. A range that is still a single point is widened by
/// [`DEGENERATE_EPS`].
pub fn compute_qparams(min: f64, max: f64, bits: u8, scheme: Scheme) -> Result<QuantParams> {
    if !(2..=16).contains(&bits) {
        return Err(CoreError::Config(format!("bit width {bits} outside 2..=16")));
    }
    if !(min.is_finite() && max.is_finite()) || min > max {
        return Err(CoreError::Config(format!("invalid observed range [{min}, {max}]")));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let (lo, hi) = match scheme {
        Scheme::SymmetricWeight => {
            let m = min.abs().max(max.abs());
            (-m, m)
        }
        Scheme::AsymmetricActivation => (min.min(0.0), max.max(0.0)),
    };
    let (lo, hi) = if hi - lo <= 0.0 {
        (lo - DEGENERATE_EPS / 2.0, hi + DEGENERATE_EPS / 2.0)
    } else {
        (lo, hi)
    };
    let scale = (hi - lo) / levels;
    let zero_point = match scheme {
        Scheme::SymmetricWeight => 0,
        Scheme::AsymmetricActivation => ((-lo / scale).round() as i64).clamp(0, levels as i64) as i32,
    };
    Ok(QuantParams {
        scale,
        zero_point,
        bits,
        scheme,
        observed_min: min,
        observed_max: max,
    })
}

impl QuantParams {
    /// Integer bounds of the grid.
    pub fn range(&self) -> (i64, i64) {
        match self.scheme {
            Scheme::SymmetricWeight => {
                let h = 1i64 << (self.bits - 1);
                (-h, h - 1)
            }
            Scheme::AsymmetricActivation => (0, (1i64 << self.bits) - 1),
        }
    }

    pub fn quantize(&self, v: f64) -> i64 {
        let (lo, hi) = self.range();
        let q = (v / self.scale).round() as i64 + self.zero_point as i64;
        q.clamp(lo, hi)
    }

    pub fn dequantize(&self, q: i64) -> f64 {
        self.scale * (q - self.zero_point as i64) as f64
    }

    /// Real interval that maps onto the grid without clamping.
    pub fn representable(&self) -> (f64, f64) {
        let (lo, hi) = self.range();
        (self.dequantize(lo), self.dequantize(hi))
    }
}

pub fn quantize_weights(w: &[f64], qp: &QuantParams) -> Vec<i8> {
    debug_assert!(qp.bits <= 8);
    w.iter().map(|&v| qp.quantize(v) as i8).collect()
}

pub fn quantize_activation(x: &[f64], qp: &QuantParams) -> Vec<i64> {
    x.iter().map(|&v| qp.quantize(v)).collect()
}

pub fn dequantize(q: &[i64], qp: &QuantParams) -> Vec<f64> {
    q.iter().map(|&v| qp.dequantize(v)).collect()
}
