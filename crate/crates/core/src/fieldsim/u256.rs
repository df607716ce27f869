//! Unsigned 256-bit integers over four little-endian 64-bit limbs.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct U256(pub [u64; 4]);

impl U256 {
    pub const ZERO: U256 = U256([0; 4]);
    pub const ONE: U256 = U256([1, 0, 0, 0]);

    pub const fn from_u64(v: u64) -> Self {
        U256([v, 0, 0, 0])
    }

    pub const fn from_u128(v: u128) -> Self {
        U256([v as u64, (v >> 64) as u64, 0, 0])
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0; 4]
    }

    pub fn bits(&self) -> u32 {
        for i in (0..4).rev() {
            if self.0[i] != 0 {
                return 64 * i as u32 + (64 - self.0[i].leading_zeros());
            }
        }
        0
    }

    /// Returns `(self + rhs, carry)`.
    pub fn overflowing_add(&self, rhs: &U256) -> (U256, bool) {
        let mut out = [0u64; 4];
        let mut carry = 0u64;
        for i in 0..4 {
            let (s1, c1) = self.0[i].overflowing_add(rhs.0[i]);
            let (s2, c2) = s1.overflowing_add(carry);
            out[i] = s2;
            carry = (c1 as u64) + (c2 as u64);
        }
        (U256(out), carry != 0)
    }

    /// Returns `(self - rhs, borrow)`.
    pub fn overflowing_sub(&self, rhs: &U256) -> (U256, bool) {
        let mut out = [0u64; 4];
        let mut borrow = 0u64;
        for i in 0..4 {
            let (d1, b1) = self.0[i].overflowing_sub(rhs.0[i]);
            let (d2, b2) = d1.overflowing_sub(borrow);
            out[i] = d2;
            borrow = (b1 as u64) + (b2 as u64);
        }
        (U256(out), borrow != 0)
    }

    pub fn checked_add(&self, rhs: &U256) -> Option<U256> {
        match self.overflowing_add(rhs) {
            (v, false) => Some(v),
            _ => None,
        }
    }

    pub fn checked_sub(&self, rhs: &U256) -> Option<U256> {
        match self.overflowing_sub(rhs) {
            (v, false) => Some(v),
            _ => None,
        }
    }

    /// Full 512-bit product, little-endian limbs.
    pub fn widening_mul(&self, rhs: &U256) -> [u64; 8] {
        let mut out = [0u64; 8];
        for i in 0..4 {
            let mut carry = 0u128;
            for j in 0..4 {
                let t = out[i + j] as u128 + (self.0[i] as u128) * (rhs.0[j] as u128) + carry;
                out[i + j] = t as u64;
                carry = t >> 64;
            }
            out[i + 4] = carry as u64;
        }
        out
    }

    pub fn checked_mul(&self, rhs: &U256) -> Option<U256> {
        let w = self.widening_mul(rhs);
        if w[4..].iter().any(|&l| l != 0) {
            None
        } else {
            Some(U256([w[0], w[1], w[2], w[3]]))
        }
    }

    pub fn shl(&self, n: u32) -> U256 {
        assert!(n < 256);
        let (limbs, bits) = ((n / 64) as usize, n % 64);
        let mut out = [0u64; 4];
        for i in (limbs..4).rev() {
            out[i] = self.0[i - limbs] << bits;
            if bits > 0 && i > limbs {
                out[i] |= self.0[i - limbs - 1] >> (64 - bits);
            }
        }
        U256(out)
    }

    pub fn shr1(&self) -> U256 {
        let mut out = [0u64; 4];
        for i in 0..4 {
            out[i] = self.0[i] >> 1;
            if i < 3 {
                out[i] |= self.0[i + 1] << 63;
            }
        }
        U256(out)
    }

    /// Divides in place by a small divisor, returning the remainder.
    fn div_rem_small(&mut self, divisor: u64) -> u64 {
        let mut rem = 0u128;
        for i in (0..4).rev() {
            let cur = (rem << 64) | self.0[i] as u128;
            self.0[i] = (cur / divisor as u128) as u64;
            rem = cur % divisor as u128;
        }
        rem as u64
    }

    pub fn to_f64(&self) -> f64 {
        self.0
            .iter()
            .rev()
            .fold(0.0, |acc, &limb| acc * 18446744073709551616.0 + limb as f64)
    }

    /// Exact conversion of a non-negative finite `f64`, rounding half away
    /// from zero (`floor` when `round_down`). `None` if it does not fit.
    pub fn from_f64(x: f64, round_down: bool) -> Option<U256> {
        if !(x.is_finite() && x >= 0.0) {
            return None;
        }
        let v = if round_down { x.floor() } else { x.round() };
        if v == 0.0 {
            return Some(U256::ZERO);
        }
        let bits = v.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as i32 - 1075;
        let mantissa = (bits & ((1u64 << 52) - 1)) | (1u64 << 52);
        if exp <= 0 {
            // v is an integer, so the shifted-out bits are zero
            return Some(U256::from_u64(mantissa >> (-exp)));
        }
        if 53 + exp > 256 {
            return None;
        }
        Some(U256::from_u64(mantissa).shl(exp as u32))
    }
}

impl Ord for U256 {
    fn cmp(&self, other: &Self) -> Ordering {
        for i in (0..4).rev() {
            match self.0[i].cmp(&other.0[i]) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        Ordering::Equal
    }
}

impl PartialOrd for U256 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for U256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return f.write_str("0");
        }
        const CHUNK: u64 = 10_000_000_000_000_000_000; // 10^19
        let mut v = *self;
        let mut parts = Vec::new();
        while !v.is_zero() {
            parts.push(v.div_rem_small(CHUNK));
        }
        let mut s = parts.pop().unwrap().to_string();
        for p in parts.iter().rev() {
            s.push_str(&format!("{p:019}"));
        }
        f.write_str(&s)
    }
}

impl fmt::Debug for U256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "U256({self})")
    }
}

impl FromStr for U256 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::Schema(format!("not a decimal integer: {s:?}")));
        }
        let ten = U256::from_u64(10);
        let mut acc = U256::ZERO;
        for b in s.bytes() {
            acc = acc
                .checked_mul(&ten)
                .and_then(|v| v.checked_add(&U256::from_u64((b - b'0') as u64)))
                .ok_or_else(|| Error::Schema(format!("integer exceeds 256 bits: {s}")))?;
        }
        Ok(acc)
    }
}

impl Serialize for U256 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for U256 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_round_trip() {
        for s in ["0", "1", "18446744073709551616", "340282366920938463463374607431768211457"] {
            let v: U256 = s.parse().unwrap();
            assert_eq!(v.to_string(), s);
        }
        let max = U256([u64::MAX; 4]);
        assert_eq!(max.to_string().parse::<U256>().unwrap(), max);
        assert!("abc".parse::<U256>().is_err());
        assert!(format!("{max}0").parse::<U256>().is_err());
    }

    #[test]
    fn carries_and_borrows() {
        let a = U256([u64::MAX, u64::MAX, 0, 0]);
        let (s, c) = a.overflowing_add(&U256::ONE);
        assert_eq!((s, c), (U256([0, 0, 1, 0]), false));
        let (d, b) = U256::ZERO.overflowing_sub(&U256::ONE);
        assert!(b);
        assert_eq!(d, U256([u64::MAX; 4]));
    }

    #[test]
    fn shifts_and_bits() {
        assert_eq!(U256::ONE.shl(200).bits(), 201);
        assert_eq!(U256::ONE.shl(64), U256([0, 1, 0, 0]));
        assert_eq!(U256::from_u64(6).shr1(), U256::from_u64(3));
        assert_eq!(U256([0, 1, 0, 0]).shr1(), U256::from_u64(1 << 63));
    }

    #[test]
    fn exact_f64_conversion() {
        assert_eq!(U256::from_f64(2f64.powi(48), false), Some(U256::ONE.shl(48)));
        assert_eq!(U256::from_f64(2.5, false), Some(U256::from_u64(3)));
        assert_eq!(U256::from_f64(2.5, true), Some(U256::from_u64(2)));
        assert_eq!(U256::from_f64(3.0 * 2f64.powi(120), false), Some(U256::from_u64(3).shl(120)));
        assert_eq!(U256::from_f64(-1.0, false), None);
        assert_eq!(U256::from_f64(2f64.powi(300), false), None);
        assert_eq!(U256::ONE.shl(100).to_f64(), 2f64.powi(100));
    }
}
