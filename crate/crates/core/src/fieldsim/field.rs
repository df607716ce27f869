//! Arithmetic in the BN254 scalar field.
//!
//! Elements are kept in Montgomery form (`a R mod p`, `R = 2^256`); all
//! conversions at the boundary go through [`FieldElement::from_u256`] and
//! [`FieldElement::to_u256`].

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::u256::U256;

/// BN254 scalar-field modulus
/// `21888242871839275222246405745257275088548364400416034343698204186575808495617`.
pub const MODULUS: U256 = U256([
    0x43e1f593f0000001,
    0x2833e84879b97091,
    0xb85045b68181585d,
    0x30644e72e131a029,
]);

/// `R^2 mod p`.
const R2: U256 = U256([
    0x1bb8e645ae216da7,
    0x53fe3ab1e35c59e3,
    0x8c49833d53bb8085,
    0x0216d0b17f4e44a5,
]);

/// `-p^{-1} mod 2^64`.
const INV: u64 = 0xc2e1f593efffffff;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FieldElement(U256);

#[inline]
fn mac(acc: u64, a: u64, b: u64, carry: u64) -> (u64, u64) {
    let t = acc as u128 + (a as u128) * (b as u128) + carry as u128;
    (t as u64, (t >> 64) as u64)
}

#[inline]
fn reduce_once(v: U256) -> U256 {
    match v.overflowing_sub(&MODULUS) {
        (r, false) => r,
        _ => v,
    }
}

/// CIOS Montgomery product `a b R^{-1} mod p`.
fn mont_mul(a: &U256, b: &U256) -> U256 {
    let (a, b, p) = (&a.0, &b.0, &MODULUS.0);
    let mut t = [0u64; 6];
    for i in 0..4 {
        let mut c = 0;
        for j in 0..4 {
            (t[j], c) = mac(t[j], a[j], b[i], c);
        }
        let (s, c2) = t[4].overflowing_add(c);
        t[4] = s;
        t[5] = c2 as u64;

        let m = t[0].wrapping_mul(INV);
        let (_, mut c) = mac(t[0], m, p[0], 0);
        for j in 1..4 {
            (t[j - 1], c) = mac(t[j], m, p[j], c);
        }
        let (s, c2) = t[4].overflowing_add(c);
        t[3] = s;
        t[4] = t[5] + c2 as u64;
    }
    // p < 2^254 keeps the intermediate below 2p < 2^256
    debug_assert_eq!(t[4], 0);
    reduce_once(U256([t[0], t[1], t[2], t[3]]))
}

impl FieldElement {
    pub const ZERO: FieldElement = FieldElement(U256::ZERO);

    pub fn one() -> Self {
        Self::from_u256(U256::ONE)
    }

    /// Reduces any 256-bit integer into the field.
    pub fn from_u256(v: U256) -> Self {
        let mut v = v;
        while v >= MODULUS {
            v = v.overflowing_sub(&MODULUS).0;
        }
        FieldElement(mont_mul(&v, &R2))
    }

    pub fn from_u64(v: u64) -> Self {
        Self::from_u256(U256::from_u64(v))
    }

    /// Signed integers map to `p - |v|` when negative.
    pub fn from_i128(v: i128) -> Self {
        let mag = Self::from_u256(U256::from_u128(v.unsigned_abs()));
        if v < 0 {
            -mag
        } else {
            mag
        }
    }

    pub fn from_i64(v: i64) -> Self {
        Self::from_i128(v as i128)
    }

    /// Canonical representative in `[0, p)`.
    pub fn to_u256(&self) -> U256 {
        mont_mul(&self.0, &U256::ONE)
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn square(&self) -> Self {
        *self * *self
    }

    /// Interprets the residue as a signed integer in `(-(p-1)/2, (p-1)/2]`.
    /// Returns `(negative, magnitude)`.
    pub fn to_signed(&self) -> (bool, U256) {
        let v = self.to_u256();
        let half = MODULUS.shr1();
        if v <= half {
            (false, v)
        } else {
            (true, MODULUS.overflowing_sub(&v).0)
        }
    }
}

impl Add for FieldElement {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        // both < p < 2^254: no 256-bit overflow
        FieldElement(reduce_once(self.0.overflowing_add(&rhs.0).0))
    }
}

impl Sub for FieldElement {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        match self.0.overflowing_sub(&rhs.0) {
            (d, false) => FieldElement(d),
            (d, true) => FieldElement(d.overflowing_add(&MODULUS).0),
        }
    }
}

impl Neg for FieldElement {
    type Output = Self;
    fn neg(self) -> Self {
        FieldElement::ZERO - self
    }
}

impl Mul for FieldElement {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        FieldElement(mont_mul(&self.0, &rhs.0))
    }
}

impl fmt::Debug for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fp({})", self.to_u256())
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_u256())
    }
}

impl Serialize for FieldElement {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_u256().serialize(s)
    }
}

impl<'de> Deserialize<'de> for FieldElement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = U256::deserialize(d)?;
        if v >= MODULUS {
            return Err(serde::de::Error::custom("field element is not canonical"));
        }
        Ok(FieldElement::from_u256(v))
    }
}
