//! Subscriber identifiers and their allocation.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("IMSI must be exactly 15 decimal digits")]
    Imsi,
    #[error("ICCID must be 19 or 20 decimal digits with a valid Luhn check digit")]
    Iccid,
    #[error("MCC+MNC prefix must be 5 or 6 decimal digits")]
    Prefix,
    #[error("ICCID prefix must be 2 to 17 decimal digits starting with 89")]
    IccidPrefix,
    #[error("MSIN space under this prefix is exhausted")]
    Exhausted,
}

fn all_digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Imsi(String);

impl Imsi {
    pub fn parse(s: &str) -> Result<Self, IdError> {
        if s.len() == 15 && all_digits(s) {
            Ok(Self(s.to_owned()))
        } else {
            Err(IdError::Imsi)
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Imsi {
    type Error = IdError;
    fn try_from(s: String) -> Result<Self, IdError> {
        Self::parse(&s)
    }
}

impl From<Imsi> for String {
    fn from(v: Imsi) -> String {
        v.0
    }
}

impl fmt::Display for Imsi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Iccid(String);

impl Iccid {
    pub fn parse(s: &str) -> Result<Self, IdError> {
        if (19..=20).contains(&s.len()) && all_digits(s) && luhn_valid(s) {
            Ok(Self(s.to_owned()))
        } else {
            Err(IdError::Iccid)
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Iccid {
    type Error = IdError;
    fn try_from(s: String) -> Result<Self, IdError> {
        Self::parse(&s)
    }
}

impl From<Iccid> for String {
    fn from(v: Iccid) -> String {
        v.0
    }
}

impl fmt::Display for Iccid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Luhn check digit for a digit string (the payload, without the check digit).
pub fn luhn_check_digit(payload: &str) -> u8 {
    let sum: u32 = payload
        .bytes()
        .rev()
        .enumerate()
        .map(|(i, b)| {
            let d = (b - b'0') as u32;
            if i % 2 == 0 {
                let x = d * 2;
                if x > 9 {
                    x - 9
                } else {
                    x
                }
            } else {
                d
            }
        })
        .sum();
    ((10 - sum % 10) % 10) as u8
}

pub fn luhn_valid(digits: &str) -> bool {
    let (payload, check) = digits.split_at(digits.len() - 1);
    luhn_check_digit(payload) == check.as_bytes()[0] - b'0'
}

/// Sequential identifier allocation under a configured MCC+MNC prefix.
#[derive(Debug, Clone)]
pub struct IdAllocator {
    plmn: String,
    iccid_prefix: String,
}

impl IdAllocator {
    pub fn new(plmn: &str, iccid_prefix: &str) -> Result<Self, IdError> {
        if !(5..=6).contains(&plmn.len()) || !all_digits(plmn) {
            return Err(IdError::Prefix);
        }
        if !(2..=17).contains(&iccid_prefix.len())
            || !all_digits(iccid_prefix)
            || !iccid_prefix.starts_with("89")
        {
            return Err(IdError::IccidPrefix);
        }
        Ok(Self {
            plmn: plmn.to_owned(),
            iccid_prefix: iccid_prefix.to_owned(),
        })
    }

    pub fn plmn(&self) -> &str {
        &self.plmn
    }

    fn msin_width(&self) -> usize {
        15 - self.plmn.len()
    }

    /// MSIN of an IMSI under this prefix, if it belongs here.
    pub fn msin_of(&self, imsi: &Imsi) -> Option<u64> {
        imsi.as_str()
            .strip_prefix(self.plmn.as_str())
            .and_then(|m| m.parse().ok())
    }

    /// IMSI and ICCID for MSIN `msin`. ICCID is the prefix, the MSIN padded to
    /// 18 digits in total, and a Luhn check digit.
    pub fn identifiers(&self, msin: u64) -> Result<(Imsi, Iccid), IdError> {
        let width = self.msin_width();
        let digits = format!("{msin:0width$}");
        if digits.len() > width {
            return Err(IdError::Exhausted);
        }
        let imsi = Imsi::parse(&format!("{}{digits}", self.plmn))?;
        let serial_width = 18 - self.iccid_prefix.len();
        let serial = format!("{msin:0serial_width$}");
        if serial.len() > serial_width {
            return Err(IdError::Exhausted);
        }
        let payload = format!("{}{serial}", self.iccid_prefix);
        let iccid = Iccid::parse(&format!("{payload}{}", luhn_check_digit(&payload)))?;
        Ok((imsi, iccid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imsi_length_and_digits() {
        assert!(Imsi::parse("001010000000001").is_ok());
        assert_eq!(Imsi::parse("00101000000001"), Err(IdError::Imsi));
        assert_eq!(Imsi::parse("00101000000000a"), Err(IdError::Imsi));
    }

    #[test]
    fn luhn_known_values() {
        // Classic Luhn example: 7992739871 -> check digit 3.
        assert_eq!(luhn_check_digit("7992739871"), 3);
        assert!(luhn_valid("79927398713"));
        assert!(!luhn_valid("79927398710"));
    }

    #[test]
    fn allocation_is_format_valid() {
        let alloc = IdAllocator::new("00101", "8988211").unwrap();
        let (imsi, iccid) = alloc.identifiers(42).unwrap();
        assert_eq!(imsi.as_str(), "001010000000042");
        assert_eq!(iccid.as_str().len(), 19);
        assert!(luhn_valid(iccid.as_str()));
        assert_eq!(alloc.msin_of(&imsi), Some(42));

        let six = IdAllocator::new("310410", "89").unwrap();
        let (imsi, _) = six.identifiers(7).unwrap();
        assert_eq!(imsi.as_str(), "310410000000007");
        assert_eq!(six.identifiers(1_000_000_000), Err(IdError::Exhausted));
    }

    #[test]
    fn bad_prefixes() {
        assert_eq!(IdAllocator::new("0010", "89").unwrap_err(), IdError::Prefix);
        assert_eq!(IdAllocator::new("00101", "12").unwrap_err(), IdError::IccidPrefix);
    }
}
