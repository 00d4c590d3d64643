//! Integer amounts in atoms. One bar is 10^8 atoms.

use std::fmt;
use std::iter::Sum;
use std::str::FromStr;

use thiserror::Error;

pub const ATOMS_PER_BAR: u64 = 100_000_000;

/// A non-negative quantity of coin, counted in atoms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Amount(u64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AmountError {
    #[error("amount overflow")]
    Overflow,
    #[error("amount underflow")]
    Underflow,
    #[error("cannot parse amount {0:?}")]
    Parse(String),
}

impl Amount {
    pub const ZERO: Amount = Amount(0);

    pub const fn from_atoms(atoms: u64) -> Self {
        Amount(atoms)
    }

    /// Whole bars. Panics on overflow, which only happens for absurd literals.
    pub const fn from_bars(bars: u64) -> Self {
        match bars.checked_mul(ATOMS_PER_BAR) {
            Some(atoms) => Amount(atoms),
            None => panic!("bar amount overflows u64 atoms"),
        }
    }

    pub const fn atoms(self) -> u64 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn checked_add(self, other: Amount) -> Result<Amount, AmountError> {
        self.0
            .checked_add(other.0)
            .map(Amount)
            .ok_or(AmountError::Overflow)
    }

    pub fn checked_sub(self, other: Amount) -> Result<Amount, AmountError> {
        self.0
            .checked_sub(other.0)
            .map(Amount)
            .ok_or(AmountError::Underflow)
    }

    /// Sums an iterator, failing instead of wrapping.
    pub fn checked_sum<I: IntoIterator<Item = Amount>>(items: I) -> Result<Amount, AmountError> {
        items
            .into_iter()
            .try_fold(Amount::ZERO, Amount::checked_add)
    }

    /// Signed difference `self - other` in atoms.
    pub fn delta(self, other: Amount) -> i128 {
        self.0 as i128 - other.0 as i128
    }
}

impl Sum for Amount {
    fn sum<I: Iterator<Item = Amount>>(iter: I) -> Self {
        Amount::checked_sum(iter).expect("amount sum overflow")
    }
}

impl fmt::Display for Amount {
    /// Renders bars, dropping trailing zero decimals: `100`, `0.1`, `1.00000001`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / ATOMS_PER_BAR;
        let frac = self.0 % ATOMS_PER_BAR;
        if frac == 0 {
            return write!(f, "{whole}");
        }
        let digits = format!("{frac:08}");
        write!(f, "{whole}.{}", digits.trim_end_matches('0'))
    }
}

impl FromStr for Amount {
    type Err = AmountError;

    /// Parses bars with up to eight fractional digits, exactly.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AmountError::Parse(s.to_string());
        let (whole, frac) = match s.split_once('.') {
            Some((w, f)) => (w, f),
            None => (s, ""),
        };
        if whole.is_empty() || !whole.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        if frac.len() > 8 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        if s.contains('.') && frac.is_empty() {
            return Err(bad());
        }
        let whole: u64 = whole.parse().map_err(|_| bad())?;
        let frac_atoms: u64 = if frac.is_empty() {
            0
        } else {
            format!("{frac:0<8}").parse().map_err(|_| bad())?
        };
        whole
            .checked_mul(ATOMS_PER_BAR)
            .and_then(|a| a.checked_add(frac_atoms))
            .map(Amount)
            .ok_or(AmountError::Overflow)
    }
}

/// Renders a signed atom delta in bars, e.g. `+10`, `-1.00000001`, `0`.
pub fn format_delta(delta: i128) -> String {
    let magnitude = Amount(delta.unsigned_abs() as u64);
    match delta.signum() {
        1 => format!("+{magnitude}"),
        -1 => format!("-{magnitude}"),
        _ => "0".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_whole_and_fractional_bars() {
        assert_eq!("100".parse::<Amount>().unwrap(), Amount::from_bars(100));
        assert_eq!(
            "0.1".parse::<Amount>().unwrap(),
            Amount::from_atoms(10_000_000)
        );
        assert_eq!(
            "1.00000001".parse::<Amount>().unwrap(),
            Amount::from_atoms(100_000_001)
        );
    }

    #[test]
    fn rejects_malformed() {
        for s in ["", ".5", "1.", "1.000000001", "-1", "1e3", "abc"] {
            assert!(s.parse::<Amount>().is_err(), "{s}");
        }
    }

    #[test]
    fn display_trims_zeros() {
        assert_eq!(Amount::from_bars(50).to_string(), "50");
        assert_eq!(Amount::from_atoms(9_990_000_000).to_string(), "99.9");
        assert_eq!(Amount::from_atoms(1).to_string(), "0.00000001");
        assert_eq!(format_delta(-100_000_001), "-1.00000001");
        assert_eq!(format_delta(Amount::from_bars(10).atoms() as i128), "+10");
    }

    #[test]
    fn arithmetic_rejects_overflow() {
        let max = Amount::from_atoms(u64::MAX);
        assert_eq!(
            max.checked_add(Amount::from_atoms(1)),
            Err(AmountError::Overflow)
        );
        assert_eq!(
            Amount::ZERO.checked_sub(Amount::from_atoms(1)),
            Err(AmountError::Underflow)
        );
    }

    proptest::proptest! {
        #[test]
        fn display_parse_roundtrip(atoms in 0u64..u64::MAX / 2) {
            let a = Amount::from_atoms(atoms);
            proptest::prop_assert_eq!(a.to_string().parse::<Amount>().unwrap(), a);
        }
    }
}
