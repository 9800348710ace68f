//! Exact arithmetic with byte units: `+ - * / ^`, parentheses, hex and
//! decimal literals, unit suffixes, and a trailing `in <unit>` conversion.
//!
//! ```
//! use incisor_core::analysis::calculator::evaluate;
//! let q = evaluate("(3*2^30 + 2^29) B in GiB").unwrap();
//! assert_eq!(q.to_string(), "3.5 GiB");
//! ```

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::num::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CalcError {
    #[error("parse error at offset {offset}: {message}")]
    ParseError { offset: usize, message: String },
    #[error("division by zero")]
    DivisionByZero,
}

type Result<T> = std::result::Result<T, CalcError>;

/// Largest accepted exponent magnitude, to keep exact results bounded.
pub const MAX_EXPONENT: i64 = 4096;

/// Unit name and its size in bytes.
const UNITS: &[(&str, u64, u32)] = &[
    ("B", 1, 0),
    ("KB", 10, 3),
    ("MB", 10, 6),
    ("GB", 10, 9),
    ("TB", 10, 12),
    ("KiB", 2, 10),
    ("MiB", 2, 20),
    ("GiB", 2, 30),
    ("TiB", 2, 40),
];

fn unit_size(name: &str) -> Option<(&'static str, BigRational)> {
    UNITS.iter().find(|(u, _, _)| u.eq_ignore_ascii_case(name)).map(|&(u, base, exp)| {
        let size = BigInt::from(base).pow(exp);
        (u, BigRational::from_integer(size))
    })
}

/// Exact value in the requested unit. `bytes_dim` is the power of bytes
/// (0 for a plain number, 1 for a size).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quantity {
    pub value: BigRational,
    pub unit: String,
    pub bytes_dim: i64,
}

impl Quantity {
    pub fn to_f64(&self) -> f64 {
        self.value.to_f64().unwrap_or(f64::NAN)
    }

    pub fn to_scalar<S: Scalar>(&self) -> S {
        S::from_f64(self.to_f64()).unwrap_or_else(S::nan)
    }

    pub fn is_integer(&self) -> bool {
        self.value.is_integer()
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.value.is_integer() {
            write!(f, "{}", self.value.to_integer())?;
        } else {
            write!(f, "{}", self.to_f64())?;
        }
        if !self.unit.is_empty() {
            write!(f, " {}", self.unit)?;
        }
        Ok(())
    }
}

impl Serialize for Quantity {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Quantity", 4)?;
        st.serialize_field("value", &self.to_f64())?;
        st.serialize_field("exact", &self.value.to_string())?;
        st.serialize_field("unit", &self.unit)?;
        st.serialize_field("text", &self.to_string())?;
        st.end()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(BigRational),
    Ident(String),
    Op(char),
}

fn lex(input: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = input.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |offset: usize, message: &str| CalcError::ParseError {
        offset,
        message: message.to_string(),
    };
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
            if c == '0' && matches!(bytes.get(i + 1), Some(b'x' | b'X')) {
                i += 2;
                let s = i;
                while i < bytes.len() && (bytes[i].is_ascii_hexdigit() || bytes[i] == b'_') {
                    i += 1;
                }
                let digits: String = input[s..i].chars().filter(|&c| c != '_').collect();
                let n = BigInt::parse_bytes(digits.as_bytes(), 16).ok_or_else(|| err(start, "bad hex literal"))?;
                out.push((start, Tok::Num(BigRational::from_integer(n))));
                continue;
            }
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'_') {
                i += 1;
            }
            let int_part: String = input[start..i].chars().filter(|&c| c != '_').collect();
            let mut frac = String::new();
            if i < bytes.len() && bytes[i] == b'.' {
                i += 1;
                let s = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                frac = input[s..i].to_string();
            }
            let mut exp: i64 = 0;
            if i < bytes.len() && matches!(bytes[i], b'e' | b'E') {
                let mut j = i + 1;
                let neg = matches!(bytes.get(j), Some(b'-'));
                if matches!(bytes.get(j), Some(b'-' | b'+')) {
                    j += 1;
                }
                let s = j;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                if j > s {
                    let e: i64 = input[s..j].parse().map_err(|_| err(i, "bad exponent"))?;
                    if e > MAX_EXPONENT {
                        return Err(err(i, "exponent too large"));
                    }
                    exp = if neg { -e } else { e };
                    i = j;
                }
            }
            let digits = format!("{}{}", if int_part.is_empty() { "0" } else { &int_part }, frac);
            let mantissa = BigInt::parse_bytes(digits.as_bytes(), 10).ok_or_else(|| err(start, "bad number"))?;
            let scale = exp - frac.len() as i64;
            let ten = BigRational::from_integer(BigInt::from(10));
            let value = BigRational::from_integer(mantissa) * pow(&ten, scale, start)?;
            out.push((start, Tok::Num(value)));
            continue;
        }
        if c.is_ascii_alphabetic() {
            while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                i += 1;
            }
            out.push((start, Tok::Ident(input[start..i].to_string())));
            continue;
        }
        if "+-*/^()".contains(c) {
            out.push((start, Tok::Op(c)));
            i += 1;
            continue;
        }
        return Err(err(start, &format!("unexpected character {c:?}")));
    }
    Ok(out)
}

fn pow(base: &BigRational, exp: i64, offset: usize) -> Result<BigRational> {
    if exp.abs() > MAX_EXPONENT {
        return Err(CalcError::ParseError {
            offset,
            message: format!("exponent {exp} exceeds {MAX_EXPONENT}"),
        });
    }
    if exp < 0 && base.is_zero() {
        return Err(CalcError::DivisionByZero);
    }
    Ok(num_traits::pow::Pow::pow(base, exp as i32))
}

/// Value in bytes^dim.
#[derive(Debug, Clone)]
struct Dimensioned {
    value: BigRational,
    dim: i64,
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn err(&self, message: impl Into<String>) -> CalcError {
        CalcError::ParseError {
            offset: self.offset(),
            message: message.into(),
        }
    }

    fn is_keyword(&self) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("in") || s.eq_ignore_ascii_case("to"))
    }

    fn sum(&mut self) -> Result<Dimensioned> {
        let mut acc = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek().cloned() {
            let at = self.offset();
            self.pos += 1;
            let rhs = self.term()?;
            if rhs.dim != acc.dim {
                return Err(CalcError::ParseError {
                    offset: at,
                    message: format!("cannot combine B^{} with B^{}", acc.dim, rhs.dim),
                });
            }
            acc.value = if op == '+' { acc.value + rhs.value } else { acc.value - rhs.value };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Dimensioned> {
        let mut acc = self.unary()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.unary()?;
            if op == '*' {
                acc.value *= rhs.value;
                acc.dim += rhs.dim;
            } else {
                if rhs.value.is_zero() {
                    return Err(CalcError::DivisionByZero);
                }
                acc.value /= rhs.value;
                acc.dim -= rhs.dim;
            }
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Dimensioned> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                let mut v = self.unary()?;
                v.value = -v.value;
                Ok(v)
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Dimensioned> {
        let base = self.postfix()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let at = self.offset();
            let exp = self.unary()?;
            if exp.dim != 0 || !exp.value.is_integer() {
                return Err(CalcError::ParseError {
                    offset: at,
                    message: "exponent must be a dimensionless integer".into(),
                });
            }
            let e = exp.value.to_integer().to_i64().filter(|e| e.abs() <= MAX_EXPONENT).ok_or(CalcError::ParseError {
                offset: at,
                message: format!("exponent magnitude exceeds {MAX_EXPONENT}"),
            })?;
            return Ok(Dimensioned {
                value: pow(&base.value, e, at)?,
                dim: base.dim * e,
            });
        }
        Ok(base)
    }

    fn postfix(&mut self) -> Result<Dimensioned> {
        let mut v = self.primary()?;
        if let Some(Tok::Ident(name)) = self.peek().cloned() {
            if !self.is_keyword() {
                let (_, size) = unit_size(&name).ok_or_else(|| self.err(format!("unknown unit `{name}`")))?;
                self.pos += 1;
                v.value *= size;
                v.dim += 1;
            }
        }
        Ok(v)
    }

    fn primary(&mut self) -> Result<Dimensioned> {
        match self.peek().cloned() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(Dimensioned { value: n, dim: 0 })
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let v = self.sum()?;
                match self.peek() {
                    Some(Tok::Op(')')) => {
                        self.pos += 1;
                        Ok(v)
                    }
                    _ => Err(self.err("expected `)`")),
                }
            }
            // a bare unit means one of it: "GiB in MB"
            Some(Tok::Ident(name)) if !self.is_keyword() => {
                let (_, size) = unit_size(&name).ok_or_else(|| self.err(format!("unknown unit `{name}`")))?;
                self.pos += 1;
                Ok(Dimensioned { value: size, dim: 1 })
            }
            Some(_) => Err(self.err("expected a number or `(`")),
            None => Err(self.err("unexpected end of expression")),
        }
    }
}

/// Evaluates `expression` exactly and converts to the target unit, if any.
pub fn evaluate(expression: &str) -> Result<Quantity> {
    let toks = lex(expression)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: expression.len(),
    };
    if p.peek().is_none() {
        return Err(p.err("empty expression"));
    }
    let v = p.sum()?;
    let target = if p.is_keyword() {
        p.pos += 1;
        match p.peek().cloned() {
            Some(Tok::Ident(name)) => {
                let unit = unit_size(&name).ok_or_else(|| p.err(format!("unknown unit `{name}`")))?;
                p.pos += 1;
                Some(unit)
            }
            _ => return Err(p.err("expected a unit after `in`")),
        }
    } else {
        None
    };
    if p.peek().is_some() {
        return Err(p.err("unexpected trailing input"));
    }
    match (target, v.dim) {
        (Some((unit, size)), 1) => Ok(Quantity {
            value: v.value / size,
            unit: unit.to_string(),
            bytes_dim: 1,
        }),
        (Some((unit, _)), dim) => Err(CalcError::ParseError {
            offset: expression.len(),
            message: format!("cannot convert B^{dim} to {unit}"),
        }),
        (None, 0) => Ok(Quantity {
            value: v.value,
            unit: String::new(),
            bytes_dim: 0,
        }),
        (None, 1) => Ok(Quantity {
            value: v.value,
            unit: "B".into(),
            bytes_dim: 1,
        }),
        (None, dim) => Ok(Quantity {
            value: v.value,
            unit: format!("B^{dim}"),
            bytes_dim: dim,
        }),
    }
}

/// Rounds `q` to `digits` decimal places, for display.
pub fn round_to(q: &Quantity, digits: u32) -> BigRational {
    let scale = BigRational::from_integer(BigInt::from(10).pow(digits));
    let scaled = &q.value * &scale;
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let rounded = if scaled.is_negative() { (scaled - half).ceil() } else { (scaled + half).floor() };
    rounded / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ratio(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn examples() {
        let q = evaluate("0xFBC5200 B in MiB").unwrap();
        assert_eq!(q.unit, "MiB");
        assert_eq!(q.value, ratio(264_000_000, 1 << 20));
        assert!((q.to_f64() - 251.77).abs() < 0.005);

        let q = evaluate("1 GiB in B").unwrap();
        assert_eq!(q.value, BigRational::from_integer(BigInt::from(1_073_741_824u64)));
        assert_eq!(q.to_string(), "1073741824 B");

        let q = evaluate("(3*2^30 + 2^29) B in GiB").unwrap();
        assert_eq!(q.value, ratio(7, 2));
    }

    #[test]
    fn decimal_and_binary_units() {
        assert_eq!(evaluate("1 GB in MB").unwrap().value, ratio(1000, 1));
        assert_eq!(evaluate("1 GiB in MiB").unwrap().value, ratio(1024, 1));
        assert_eq!(evaluate("1 GB in GiB").unwrap().value, ratio(1_000_000_000, 1 << 30));
        assert_eq!(evaluate("512MiB + 0.5 GiB in GiB").unwrap().value, ratio(1, 1));
        assert_eq!(evaluate("1.5e3 KB to MB").unwrap().value, ratio(3, 2));
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(evaluate("2^3^2").unwrap().value, ratio(512, 1));
        assert_eq!(evaluate("-2^2").unwrap().value, ratio(-4, 1));
        assert_eq!(evaluate("1 - 2 - 3").unwrap().value, ratio(-4, 1));
        assert_eq!(evaluate("8 / 4 / 2").unwrap().value, ratio(1, 1));
        assert_eq!(evaluate("2^-2").unwrap().value, ratio(1, 4));
        assert_eq!(evaluate("1/3 + 1/6").unwrap().value, ratio(1, 2));
    }

    #[test]
    fn errors() {
        assert_eq!(evaluate("1/0"), Err(CalcError::DivisionByZero));
        assert_eq!(evaluate("1 GiB / (2 - 2)"), Err(CalcError::DivisionByZero));
        assert_eq!(evaluate("0^-1"), Err(CalcError::DivisionByZero));
        for bad in ["", "1 +", "(1", "1 GiB + 1", "2 in MiB", "3 parsecs", "2^0.5", "2^100000", "1 $ 2", "1 2"] {
            assert!(matches!(evaluate(bad), Err(CalcError::ParseError { .. })), "{bad}");
        }
    }

    #[test]
    fn rounding_helper() {
        let q = evaluate("0xFBC5200 B in MiB").unwrap();
        assert_eq!(round_to(&q, 2), ratio(25177, 100));
    }

    #[test]
    fn scalar_conversion() {
        let q = evaluate("3 GiB / 2 in GiB").unwrap();
        assert_eq!(q.to_scalar::<f32>(), 1.5f32);
        assert_eq!(q.to_scalar::<f64>(), 1.5f64);
    }
}
