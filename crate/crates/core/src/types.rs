use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Sub, SubAssign};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type Height = u64;

/// Stable, human-readable participant identifier. Ordering is lexicographic
/// and defines every "deterministic participant order" in the system.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParticipantId(pub String);

impl ParticipantId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ParticipantId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelId(pub u32);

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// POGO token amount in indivisible base units (10⁻⁹ POGO).
///
/// All balances, stakes, escrows and transfers are integral so that supply
/// conservation holds exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Tokens(pub u128);

impl Tokens {
    pub const ZERO: Tokens = Tokens(0);
    pub const UNITS_PER_POGO: u128 = 1_000_000_000;

    /// Nearest base-unit amount to `pogo` whole tokens. Negative and
    /// non-finite inputs map to zero.
    pub fn from_pogo(pogo: f64) -> Self {
        if !pogo.is_finite() || pogo <= 0.0 {
            return Tokens::ZERO;
        }
        Tokens((pogo * Self::UNITS_PER_POGO as f64).round() as u128)
    }

    /// Smallest base-unit amount not below `pogo`.
    pub fn from_pogo_ceil(pogo: f64) -> Self {
        if !pogo.is_finite() || pogo <= 0.0 {
            return Tokens::ZERO;
        }
        let scaled = pogo * Self::UNITS_PER_POGO as f64;
        // Absorb representation noise such as 5.000000000000001e9.
        let rounded = scaled.round();
        if (scaled - rounded).abs() <= scaled.abs() * 1e-12 {
            Tokens(rounded as u128)
        } else {
            Tokens(scaled.ceil() as u128)
        }
    }

    pub fn as_pogo(self) -> f64 {
        self.0 as f64 / Self::UNITS_PER_POGO as f64
    }

    pub fn units(self) -> u128 {
        self.0
    }

    pub fn checked_sub(self, rhs: Tokens) -> Option<Tokens> {
        self.0.checked_sub(rhs.0).map(Tokens)
    }

    pub fn saturating_sub(self, rhs: Tokens) -> Tokens {
        Tokens(self.0.saturating_sub(rhs.0))
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl Add for Tokens {
    type Output = Tokens;
    fn add(self, rhs: Tokens) -> Tokens {
        Tokens(self.0.checked_add(rhs.0).expect("token overflow"))
    }
}

impl AddAssign for Tokens {
    fn add_assign(&mut self, rhs: Tokens) {
        *self = *self + rhs;
    }
}

impl Sub for Tokens {
    type Output = Tokens;
    fn sub(self, rhs: Tokens) -> Tokens {
        Tokens(self.0.checked_sub(rhs.0).expect("token underflow"))
    }
}

impl SubAssign for Tokens {
    fn sub_assign(&mut self, rhs: Tokens) {
        *self = *self - rhs;
    }
}

impl Sum for Tokens {
    fn sum<I: Iterator<Item = Tokens>>(iter: I) -> Tokens {
        iter.fold(Tokens::ZERO, Add::add)
    }
}

impl fmt::Display for Tokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / Self::UNITS_PER_POGO;
        let frac = self.0 % Self::UNITS_PER_POGO;
        write!(f, "{whole}.{frac:09} POGO")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FractionError {
    #[error("malformed fraction {0:?}")]
    Malformed(String),
    #[error("fraction denominator must be positive")]
    ZeroDenominator,
}

/// An exact non-negative rational `num/den`, used for every protocol ratio
/// applied to token amounts (thresholds, slash and reward shares).
///
/// Parses from `"2/3"` or from a decimal such as `0.1` (resolved to
/// millionths).
#[derive(Clone, Copy, Debug)]
pub struct Fraction {
    num: u64,
    den: u64,
}

impl Fraction {
    pub const ZERO: Fraction = Fraction { num: 0, den: 1 };
    pub const ONE: Fraction = Fraction { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self, FractionError> {
        if den == 0 {
            return Err(FractionError::ZeroDenominator);
        }
        Ok(Self { num, den })
    }

    pub fn from_decimal(v: f64) -> Result<Self, FractionError> {
        if !v.is_finite() || v < 0.0 || v > u64::MAX as f64 / 1e6 {
            return Err(FractionError::Malformed(v.to_string()));
        }
        Self::new((v * 1e6).round() as u64, 1_000_000)
    }

    pub fn num(self) -> u64 {
        self.num
    }

    pub fn den(self) -> u64 {
        self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `floor(amount × num / den)`.
    pub fn of(self, amount: Tokens) -> Tokens {
        let num = u128::from(self.num);
        let den = u128::from(self.den);
        // Split to avoid overflow for very large balances.
        let q = amount.0 / den;
        let r = amount.0 % den;
        Tokens(q * num + r * num / den)
    }

    /// `value ≥ self × total`, evaluated exactly.
    pub fn is_met_by(self, value: Tokens, total: Tokens) -> bool {
        let lhs = value.0.checked_mul(u128::from(self.den));
        let rhs = total.0.checked_mul(u128::from(self.num));
        match (lhs, rhs) {
            (Some(l), Some(r)) => l >= r,
            // Fall back to the rounded form only for astronomically large supplies.
            _ => value.0 as f64 * self.den as f64 >= total.0 as f64 * self.num as f64,
        }
    }

    pub fn is_within_unit(self) -> bool {
        self.num <= self.den
    }
}

impl PartialEq for Fraction {
    fn eq(&self, other: &Self) -> bool {
        u128::from(self.num) * u128::from(other.den) == u128::from(other.num) * u128::from(self.den)
    }
}

impl Eq for Fraction {}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = FractionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let num = n.trim().parse().map_err(|_| FractionError::Malformed(s.into()))?;
            let den = d.trim().parse().map_err(|_| FractionError::Malformed(s.into()))?;
            Fraction::new(num, den)
        } else {
            let v: f64 = s.parse().map_err(|_| FractionError::Malformed(s.into()))?;
            Fraction::from_decimal(v)
        }
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Num(v) => Fraction::from_decimal(v),
            Repr::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}
