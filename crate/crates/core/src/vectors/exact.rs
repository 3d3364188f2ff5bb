//! Order-independent floating-point summation.
//!
//! [`ExactSum`] keeps the running sum as a fixed-point integer spanning the
//! whole binary64 range (bit 0 weighs 2^-1074). Every finite input is added
//! without rounding, so the final value depends only on the multiset of
//! addends: the same sum computed on one task or split over eight tasks, in
//! any order, rounds to the same `f64`.

/// Bits carried by each limb after normalization.
const LIMB_BITS: u32 = 32;
const LIMB_MASK: i64 = (1 << LIMB_BITS) - 1;
/// Bit positions 0..=2098 plus carry headroom.
pub const LIMBS: usize = 68;
/// Adds allowed between carry normalizations (each limb grows by < 2^32 per add).
const ADDS_BEFORE_NORMALIZE: u32 = 1 << 29;

#[derive(Clone, Debug)]
pub struct ExactSum {
    limbs: [i64; LIMBS],
    pending: u32,
    non_finite: Option<f64>,
}

impl Default for ExactSum {
    fn default() -> Self {
        Self::new()
    }
}

impl ExactSum {
    pub fn new() -> Self {
        Self {
            limbs: [0; LIMBS],
            pending: 0,
            non_finite: None,
        }
    }

    pub fn add(&mut self, x: f64) {
        if !x.is_finite() {
            self.non_finite = Some(self.non_finite.unwrap_or(0.0) + x);
            return;
        }
        if x == 0.0 {
            return;
        }
        let bits = x.to_bits();
        let negative = bits >> 63 == 1;
        let biased = ((bits >> 52) & 0x7ff) as u32;
        let frac = bits & ((1u64 << 52) - 1);
        let (mantissa, pos) = if biased == 0 {
            (frac, 0u32)
        } else {
            (frac | (1u64 << 52), biased - 1)
        };
        let limb = (pos / LIMB_BITS) as usize;
        let wide = (mantissa as u128) << (pos % LIMB_BITS);
        let parts = [
            (wide & 0xffff_ffff) as i64,
            ((wide >> 32) & 0xffff_ffff) as i64,
            (wide >> 64) as i64,
        ];
        for (k, part) in parts.into_iter().enumerate() {
            if negative {
                self.limbs[limb + k] -= part;
            } else {
                self.limbs[limb + k] += part;
            }
        }
        self.pending += 1;
        if self.pending >= ADDS_BEFORE_NORMALIZE {
            self.normalize();
        }
    }

    /// Merges another accumulator without rounding.
    pub fn merge(&mut self, other: &ExactSum) {
        self.normalize();
        let mut o = other.clone();
        o.normalize();
        for (a, b) in self.limbs.iter_mut().zip(o.limbs.iter()) {
            *a += *b;
        }
        if let Some(v) = o.non_finite {
            self.non_finite = Some(self.non_finite.unwrap_or(0.0) + v);
        }
        self.normalize();
    }

    fn normalize(&mut self) {
        for i in 0..LIMBS - 1 {
            let carry = self.limbs[i] >> LIMB_BITS;
            self.limbs[i] &= LIMB_MASK;
            self.limbs[i + 1] += carry;
        }
        self.pending = 0;
    }

    /// Serializes the accumulator into `LIMBS + 2` doubles, all exactly representable.
    pub fn to_payload(&self) -> Vec<f64> {
        let mut n = self.clone();
        n.normalize();
        let mut out: Vec<f64> = n.limbs.iter().map(|&l| l as f64).collect();
        match n.non_finite {
            Some(v) => {
                out.push(1.0);
                out.push(v);
            }
            None => {
                out.push(0.0);
                out.push(0.0);
            }
        }
        out
    }

    pub fn from_payload(payload: &[f64]) -> crate::Result<Self> {
        if payload.len() != LIMBS + 2 {
            return Err(crate::Error::Format(format!(
                "exact-sum payload has {} entries, expected {}",
                payload.len(),
                LIMBS + 2
            )));
        }
        let mut limbs = [0i64; LIMBS];
        for (l, &p) in limbs.iter_mut().zip(payload) {
            *l = p as i64;
        }
        let non_finite = (payload[LIMBS] != 0.0).then_some(payload[LIMBS + 1]);
        Ok(Self {
            limbs,
            pending: 0,
            non_finite,
        })
    }

    /// The exact sum rounded to nearest, ties to even.
    pub fn value(&self) -> f64 {
        if let Some(v) = self.non_finite {
            return v;
        }
        let mut n = self.clone();
        n.normalize();
        let negative = n.limbs[LIMBS - 1] < 0;
        if negative {
            for l in n.limbs.iter_mut() {
                *l = -*l;
            }
            n.normalize();
        }
        let top = match n.limbs.iter().rposition(|&l| l != 0) {
            Some(t) => t,
            None => return 0.0,
        };
        let top_bits = 64 - (n.limbs[top] as u64).leading_zeros();
        let msb = top as u32 * LIMB_BITS + top_bits - 1;
        let magnitude = if msb < 53 {
            let mut int = 0u64;
            for i in (0..=top).rev() {
                int = (int << LIMB_BITS) | n.limbs[i] as u64;
            }
            int as f64 * f64::from_bits(1)
        } else {
            let bit = |p: u32| -> u64 {
                let l = (p / LIMB_BITS) as usize;
                ((n.limbs[l] as u64) >> (p % LIMB_BITS)) & 1
            };
            let mut mant = 0u64;
            for p in (msb - 52..=msb).rev() {
                mant = (mant << 1) | bit(p);
            }
            let round = bit(msb - 53) == 1;
            let sticky = msb >= 54 && {
                let below = msb - 54;
                let l = (below / LIMB_BITS) as usize;
                let partial = (n.limbs[l] as u64) & ((2u64 << (below % LIMB_BITS)) - 1);
                partial != 0 || n.limbs[..l].iter().any(|&x| x != 0)
            };
            let mut exp_msb = msb;
            if round && (sticky || mant & 1 == 1) {
                mant += 1;
                if mant == 1 << 53 {
                    mant >>= 1;
                    exp_msb += 1;
                }
            }
            let biased = exp_msb as i64 - 1074 + 1023;
            if biased >= 2047 {
                f64::INFINITY
            } else {
                f64::from_bits(((biased as u64) << 52) | (mant & ((1 << 52) - 1)))
            }
        };
        if negative {
            -magnitude
        } else {
            magnitude
        }
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}
