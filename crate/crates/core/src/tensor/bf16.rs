//! bfloat16 emulation on f32 storage.

/// Rounds an f32 to the nearest bfloat16 value (ties to even), returned as f32.
///
/// NaN stays NaN (quiet); values beyond the bf16 range round to infinity.
pub fn bf16_round(x: f32) -> f32 {
    f32::from_bits(u32::from(bf16_to_bits(x)) << 16)
}

/// The 16-bit bfloat16 encoding of `x` after round-to-nearest-even.
pub fn bf16_to_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return ((bits >> 16) as u16) | 0x0040;
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7fff + lsb);
    (rounded >> 16) as u16
}

pub fn bf16_from_bits(bits: u16) -> f32 {
    f32::from_bits(u32::from(bits) << 16)
}

pub fn bf16_round_slice(xs: &mut [f32]) {
    for x in xs {
        *x = bf16_round(*x);
    }
}
