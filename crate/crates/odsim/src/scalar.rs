//! Numeric scalar underlying all virtual-time and cost arithmetic.
//!
//! Every timestamp, latency and bandwidth-derived duration in the simulator
//! is a microsecond quantity of some scalar type `T`. The default
//! instantiation (the [`crate::Micros`] alias) is an exact rational, so
//! every duration derived from the configuration is exact and equal-time
//! comparisons need no epsilon. `f64` (and `f32`) instantiations are
//! available for quick approximate experiments and cross-checking.

use num_rational::Ratio;
use num_traits::{FromPrimitive, Num, ToPrimitive};
use std::fmt::{Debug, Display};

/// Scalar type for microsecond quantities.
///
/// Implemented for `f32`, `f64` and `Ratio<i128>`. The simulator core only
/// relies on ring arithmetic, ordering and exact conversion from integer
/// counts (bytes, work items), all of which `num-traits` provides.
pub trait TimeScalar:
    Num + FromPrimitive + ToPrimitive + PartialOrd + Copy + Debug + Display + 'static
{
    /// Exact conversion from a byte / work-item / event count.
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count not representable in scalar")
    }

    /// Parse a decimal literal (`21`, `0.5`, `-3.25`) or a rational literal
    /// (`49/10`). Returns `None` on malformed input.
    fn parse_decimal(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Some((num, den)) = s.split_once('/') {
            let n: i64 = num.trim().parse().ok()?;
            let d: i64 = den.trim().parse().ok()?;
            if d == 0 {
                return None;
            }
            return Some(Self::from_i64(n)? / Self::from_i64(d)?);
        }
        let (neg, rest) = match s.strip_prefix('-') {
            Some(r) => (true, r),
            None => (false, s),
        };
        let (int_part, frac_part) = match rest.split_once('.') {
            Some((i, f)) => (i, f),
            None => (rest, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return None;
        }
        let all_digits = |t: &str| t.chars().all(|c| c.is_ascii_digit());
        if !all_digits(int_part) || !all_digits(frac_part) || frac_part.len() > 18 {
            return None;
        }
        let ip: u64 = if int_part.is_empty() {
            0
        } else {
            int_part.parse().ok()?
        };
        let fp: u64 = if frac_part.is_empty() {
            0
        } else {
            frac_part.parse().ok()?
        };
        let scale = 10u64.checked_pow(frac_part.len() as u32)?;
        let scale_s = Self::from_u64(scale)?;
        let v = (Self::from_u64(ip)? * scale_s + Self::from_u64(fp)?) / scale_s;
        Some(if neg { Self::zero() - v } else { v })
    }

    /// Render so that [`TimeScalar::parse_decimal`] round-trips the value.
    fn to_config_str(&self) -> String;

    fn is_finite_scalar(&self) -> bool {
        true
    }

    fn to_f64_lossy(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl TimeScalar for f64 {
    fn to_config_str(&self) -> String {
        format!("{self}")
    }

    fn is_finite_scalar(&self) -> bool {
        self.is_finite()
    }
}

impl TimeScalar for f32 {
    fn to_config_str(&self) -> String {
        format!("{self}")
    }

    fn is_finite_scalar(&self) -> bool {
        self.is_finite()
    }
}

impl TimeScalar for Ratio<i128> {
    fn to_config_str(&self) -> String {
        ratio_config_str(self)
    }
}

/// Decimal rendering of a rational when its expansion terminates (denominator
/// has only factors of 2 and 5), `numer/denom` otherwise.
fn ratio_config_str(r: &Ratio<i128>) -> String {
    let mut n = *r.numer();
    let d = *r.denom();
    let mut d2 = d;
    while d2 % 2 == 0 {
        d2 /= 2;
    }
    while d2 % 5 == 0 {
        d2 /= 5;
    }
    if d2 != 1 {
        return format!("{n}/{d}");
    }
    let neg = n.is_negative();
    if neg {
        n = -n;
    }
    let int = n / d;
    let mut rem = n % d;
    let mut out = String::new();
    if neg {
        out.push('-');
    }
    out.push_str(&int.to_string());
    if rem != 0 {
        out.push('.');
        while rem != 0 {
            rem *= 10;
            out.push(char::from_digit((rem / d) as u32, 10).unwrap());
            rem %= d;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    type R = Ratio<i128>;

    #[test]
    fn parses_plain_integers_and_decimals() {
        assert_eq!(R::parse_decimal("21").unwrap(), R::from_count(21));
        assert_eq!(R::parse_decimal("0.5").unwrap(), R::new(1, 2));
        assert_eq!(R::parse_decimal("-3.25").unwrap(), R::new(-13, 4));
        assert_eq!(R::parse_decimal("49/10").unwrap(), R::new(49, 10));
        assert_eq!(f64::parse_decimal("0.5").unwrap(), 0.5);
        assert!(R::parse_decimal("abc").is_none());
        assert!(R::parse_decimal("1/0").is_none());
        assert!(R::parse_decimal("").is_none());
    }

    #[test]
    fn config_str_round_trips() {
        for s in ["21", "0.5", "10.125", "-2", "0.37", "1/3"] {
            let v = R::parse_decimal(s).unwrap();
            let back = R::parse_decimal(&v.to_config_str()).unwrap();
            assert_eq!(v, back, "round trip failed for {s}");
        }
        let v = f64::parse_decimal("0.1").unwrap();
        assert_eq!(f64::parse_decimal(&v.to_config_str()).unwrap(), v);
    }

    #[test]
    fn exact_decimal_rendering() {
        assert_eq!(R::new(1, 2).to_config_str(), "0.5");
        assert_eq!(R::new(641, 64).to_config_str(), "10.015625");
        assert_eq!(R::new(1, 3).to_config_str(), "1/3");
        assert_eq!(R::from_count(7).to_config_str(), "7");
    }
}
