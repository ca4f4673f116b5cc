//! Exact f64 accumulation.
//!
//! Global pooling must produce bit-identical results when the pooled values
//! are spatially permuted (circular shifts of a feature map permute the same
//! multiset of values). Ordinary floating-point summation is order dependent,
//! so pooled reductions go through a fixed-point superaccumulator: every f64
//! is added exactly into a wide integer, and integer addition commutes. The
//! final rounding is a pure function of the exact integer state.

/// Fixed-point accumulator covering the full f64 range.
///
/// Invariant: value = sum over l of `limbs[l] * 2^(32*l - 1074)`.
/// Each addend contributes at most three signed 32-bit chunks per limb, so
/// i64 limbs cannot overflow before `RENORM_EVERY` additions.
pub struct ExactAcc {
    limbs: [i64; LIMBS],
    pending: u32,
    nonfinite: bool,
}

const LIMBS: usize = 70;
const RENORM_EVERY: u32 = 1 << 30;
const MASK32: u64 = 0xffff_ffff;

impl Default for ExactAcc {
    fn default() -> Self {
        Self::new()
    }
}

impl ExactAcc {
    pub fn new() -> Self {
        ExactAcc { limbs: [0; LIMBS], pending: 0, nonfinite: false }
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let bits = x.to_bits();
        let exp_field = ((bits >> 52) & 0x7ff) as usize;
        if exp_field == 0x7ff {
            self.nonfinite = true;
            return;
        }
        let frac = bits & ((1u64 << 52) - 1);
        // Normals carry the implicit bit; subnormals sit at the bottom of the range.
        let (mant, pos) = if exp_field == 0 { (frac, 0) } else { (frac | (1u64 << 52), exp_field - 1) };
        if mant == 0 {
            return;
        }
        let limb = pos >> 5;
        let sh = pos & 31;
        let wide = (mant as u128) << sh; // <= 2^84
        let c0 = (wide as u64 & MASK32) as i64;
        let c1 = ((wide >> 32) as u64 & MASK32) as i64;
        let c2 = ((wide >> 64) as u64 & MASK32) as i64;
        if bits >> 63 == 0 {
            self.limbs[limb] += c0;
            self.limbs[limb + 1] += c1;
            self.limbs[limb + 2] += c2;
        } else {
            self.limbs[limb] -= c0;
            self.limbs[limb + 1] -= c1;
            self.limbs[limb + 2] -= c2;
        }
        self.pending += 1;
        if self.pending >= RENORM_EVERY {
            self.propagate();
        }
    }

    pub fn add_slice(&mut self, xs: &[f64]) {
        for &x in xs {
            self.add(x);
        }
    }

    /// Carry-propagate so every limb but the last lands in [0, 2^32).
    fn propagate(&mut self) {
        let mut carry: i64 = 0;
        for l in 0..LIMBS - 1 {
            let v = self.limbs[l] + carry;
            let low = (v as u64 & MASK32) as i64;
            carry = (v - low) >> 32;
            self.limbs[l] = low;
        }
        self.limbs[LIMBS - 1] += carry;
        self.pending = 0;
    }

    /// Round the exact value to the nearest f64 (ties to even).
    pub fn value(&mut self) -> f64 {
        if self.nonfinite {
            return f64::NAN;
        }
        self.propagate();
        // Work on magnitude: negate once if the total is negative.
        let negative = self.limbs[LIMBS - 1] < 0;
        let mut mag = self.limbs;
        if negative {
            for v in mag.iter_mut() {
                *v = -*v;
            }
            let mut carry: i64 = 0;
            for l in 0..LIMBS - 1 {
                let v = mag[l] + carry;
                let low = (v as u64 & MASK32) as i64;
                carry = (v - low) >> 32;
                mag[l] = low;
            }
            mag[LIMBS - 1] += carry;
        }
        let msl = match (0..LIMBS).rev().find(|&l| mag[l] != 0) {
            Some(l) => l,
            None => return 0.0,
        };
        debug_assert!(mag[msl] > 0 && mag[msl] < (1 << 32));
        // 128-bit window over the four most significant limbs; everything
        // below only matters through the sticky bit.
        let part = |l: isize| -> u128 {
            if l >= 0 {
                mag[l as usize] as u128
            } else {
                0
            }
        };
        let m = msl as isize;
        let a: u128 = (part(m) << 96) | (part(m - 1) << 64) | (part(m - 2) << 32) | part(m - 3);
        let sticky_lower = (0..(m - 3).max(0)).any(|l| mag[l as usize] != 0);
        // value = a * 2^k
        let k = 32 * (m - 3) as i64 - 1074;
        let total_bits = 128 - a.leading_zeros() as i64;
        let (mant, exp) = if total_bits <= 53 {
            (a as u64, k)
        } else {
            let sr = total_bits - 53;
            let kept = (a >> sr) as u64;
            let rem = a & ((1u128 << sr) - 1);
            let half = 1u128 << (sr - 1);
            let round_up = match rem.cmp(&half) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => sticky_lower || (kept & 1) == 1,
            };
            (kept + round_up as u64, k + sr)
        };
        let v = mul_pow2(mant as f64, exp);
        if negative {
            -v
        } else {
            v
        }
    }
}

/// x * 2^e without libm, exact for in-range powers.
fn mul_pow2(x: f64, e: i64) -> f64 {
    fn pow2(e: i64) -> f64 {
        debug_assert!((-1022..=1023).contains(&e));
        f64::from_bits(((e + 1023) as u64) << 52)
    }
    if x == 0.0 {
        return 0.0;
    }
    let mut v = x;
    let mut e = e;
    while e > 1023 {
        v *= pow2(1023);
        e -= 1023;
    }
    while e < -1022 {
        v *= pow2(-1022);
        e += 1022;
    }
    v * pow2(e)
}

/// Exact, permutation-invariant sum of a slice.
pub fn exact_sum(xs: &[f64]) -> f64 {
    let mut acc = ExactAcc::new();
    acc.add_slice(xs);
    acc.value()
}

/// Exact sum divided by the element count.
pub fn exact_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    exact_sum(xs) / xs.len() as f64
}
