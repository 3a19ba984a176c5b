//! Scalar abstraction shared by every numeric kernel in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` for training and throughput runs,
/// `f64` for oracle and gradient verification.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag used in logs and file headers.
    const DTYPE: &'static str;

    /// Lossy conversion from an `f64` literal or oracle value.
    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `exp` for hot loops; may trade the last ulp for vectorisation.
    #[inline]
    fn fast_exp(self) -> Self {
        self.exp()
    }

    /// `ln(1 + u)` for hot loops, accurate on `0 ≤ u ≤ 1`.
    #[inline]
    fn ln_1p_unit(self) -> Self {
        self.ln_1p()
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    /// Branch-free polynomial; within 2 ulp of `f32::exp` on the normal
    /// range, clamped at the ends.
    #[inline(always)]
    fn fast_exp(self) -> Self {
        exp_f32(self)
    }

    #[inline(always)]
    fn ln_1p_unit(self) -> Self {
        // 2·atanh(u / (2 + u)), |s| ≤ 1/3
        let s = self / (2.0 + self);
        let s2 = s * s;
        2.0 * s
            * (1.0
                + s2 * (1.0 / 3.0
                    + s2 * (1.0 / 5.0
                        + s2 * (1.0 / 7.0 + s2 * (1.0 / 9.0 + s2 * (1.0 / 11.0 + s2 / 13.0))))))
    }

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding 1.5·2²³ rounds to an integer held in the low mantissa bits
    const SHIFTER: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let t = x * std::f32::consts::LOG2_E + SHIFTER;
    let k = t - SHIFTER;
    let ki = t.to_bits().wrapping_sub(SHIFTER.to_bits()) as i32;
    let r = x - k * LN2_HI - k * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    p * f32::from_bits((ki.wrapping_add(127) as u32) << 23)
}
