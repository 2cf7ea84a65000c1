//! IEEE-754 binary16 conversion straight from `f64` (no intermediate `f32`,
//! so there is exactly one rounding).
//!
//! Rounding is to nearest, ties to even. Magnitudes above 65504 (the largest
//! finite half) saturate to ±65504 and bump a process-wide counter.

use std::sync::atomic::{AtomicU64, Ordering};

pub const F16_MAX: f64 = 65504.0;

static SATURATIONS: AtomicU64 = AtomicU64::new(0);

/// Number of values clamped by [`fp16_encode`] since process start.
pub fn saturation_count() -> u64 {
    SATURATIONS.load(Ordering::Relaxed)
}

/// Converts to binary16 bits. The flag is set when the input was clamped
/// (or was NaN, which encodes as +0).
pub fn f64_to_f16_bits(x: f64) -> (u16, bool) {
    if x.is_nan() {
        return (0, true);
    }
    let sign: u16 = if x.is_sign_negative() { 0x8000 } else { 0 };
    let a = x.abs();
    if a > F16_MAX {
        return (sign | 0x7BFF, true);
    }
    if a < 2f64.powi(-14) {
        // subnormal range: multiples of 2^-24; k == 1024 rolls into the
        // smallest normal, whose bit pattern is also 0x0400
        let k = (a * 2f64.powi(24)).round_ties_even() as u16;
        return (sign | k, false);
    }
    let bits = a.to_bits();
    let exp = ((bits >> 52) & 0x7FF) as i32 - 1023 + 15;
    let frac = bits & ((1u64 << 52) - 1);
    let mut mant = (frac >> 42) as u32;
    let rem = frac & ((1u64 << 42) - 1);
    let half = 1u64 << 41;
    if rem > half || (rem == half && mant & 1 == 1) {
        mant += 1;
    }
    let mut exp = exp as u32;
    if mant == 1024 {
        mant = 0;
        exp += 1;
    }
    debug_assert!((1..=30).contains(&exp));
    (sign | ((exp as u16) << 10) | mant as u16, false)
}

pub fn f16_bits_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1F) as i32;
    let mant = (bits & 0x3FF) as f64;
    let mag = match exp {
        0 => mant * 2f64.powi(-24),
        31 => {
            if mant == 0.0 {
                f64::INFINITY
            } else {
                f64::NAN
            }
        }
        e => (1024.0 + mant) * 2f64.powi(e - 25),
    };
    sign * mag
}

pub fn is_finite_f16(bits: u16) -> bool {
    bits & 0x7C00 != 0x7C00
}

/// Little-endian binary16 bytes of `x`.
pub fn fp16_encode(x: f64) -> [u8; 2] {
    let (bits, saturated) = f64_to_f16_bits(x);
    if saturated {
        SATURATIONS.fetch_add(1, Ordering::Relaxed);
    }
    bits.to_le_bytes()
}

pub fn fp16_decode(bytes: [u8; 2]) -> f64 {
    f16_bits_to_f64(u16::from_le_bytes(bytes))
}

/// Encodes a slice to binary16 bit patterns, counting saturations.
pub fn encode_slice(values: &[f64]) -> Vec<u16> {
    let mut sat = 0;
    let out = values
        .iter()
        .map(|&x| {
            let (b, s) = f64_to_f16_bits(x);
            sat += s as u64;
            b
        })
        .collect();
    if sat > 0 {
        SATURATIONS.fetch_add(sat, Ordering::Relaxed);
    }
    out
}
