//! Exact arithmetic over rationals.
//!
//! Grammar, loosest binding first:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/' | '×' | '÷') unary)*
//! unary  := ('-' | '+') unary | power
//! power  := atom ('^' unary)?
//! atom   := number | '(' expr ')'
//! ```
//!
//! so `-2^2` is `-4` and `2^3^2` is `2^9`. Exponents must be integers.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

const MAX_EXPONENT: i64 = 4096;
const FRACTION_DIGITS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(BigRational),
    Op(char),
    Open,
    Close,
}

fn lex(input: &str) -> Result<Vec<Tok>, String> {
    let mut out = Vec::new();
    let chars: Vec<char> = input.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            '0'..='9' | '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.' || chars[i] == ',') {
                    i += 1;
                }
                let literal: String = chars[start..i].iter().filter(|&&c| c != ',').collect();
                out.push(Tok::Num(parse_decimal(&literal)?));
            }
            '+' | '-' | '*' | '/' | '^' => {
                out.push(Tok::Op(c));
                i += 1;
            }
            '×' => {
                out.push(Tok::Op('*'));
                i += 1;
            }
            '÷' => {
                out.push(Tok::Op('/'));
                i += 1;
            }
            '−' => {
                out.push(Tok::Op('-'));
                i += 1;
            }
            '(' => {
                out.push(Tok::Open);
                i += 1;
            }
            ')' => {
                out.push(Tok::Close);
                i += 1;
            }
            other => return Err(format!("unexpected character {other:?}")),
        }
    }
    Ok(out)
}

fn parse_decimal(literal: &str) -> Result<BigRational, String> {
    let bad = || format!("malformed number {literal:?}");
    let (int, frac) = match literal.split_once('.') {
        Some((i, f)) => (i, f),
        None => (literal, ""),
    };
    if (int.is_empty() && frac.is_empty()) || frac.contains('.') {
        return Err(bad());
    }
    let digits = format!("{int}{frac}");
    let numer: BigInt = digits.parse().map_err(|_| bad())?;
    let denom = num_traits::pow(BigInt::from(10), frac.len());
    Ok(BigRational::new(numer, denom))
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat_op(&mut self, ops: &[char]) -> Option<char> {
        match self.peek() {
            Some(Tok::Op(c)) if ops.contains(c) => {
                let c = *c;
                self.pos += 1;
                Some(c)
            }
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<BigRational, String> {
        let mut acc = self.term()?;
        while let Some(op) = self.eat_op(&['+', '-']) {
            let rhs = self.term()?;
            acc = if op == '+' { acc + rhs } else { acc - rhs };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<BigRational, String> {
        let mut acc = self.unary()?;
        while let Some(op) = self.eat_op(&['*', '/']) {
            let rhs = self.unary()?;
            if op == '*' {
                acc *= rhs;
            } else {
                if rhs.is_zero() {
                    return Err("division by zero".into());
                }
                acc /= rhs;
            }
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<BigRational, String> {
        match self.eat_op(&['-', '+']) {
            Some('-') => Ok(-self.unary()?),
            Some(_) => self.unary(),
            None => self.power(),
        }
    }

    fn power(&mut self) -> Result<BigRational, String> {
        let base = self.atom()?;
        if self.eat_op(&['^']).is_none() {
            return Ok(base);
        }
        let exp = self.unary()?;
        if !exp.is_integer() {
            return Err("only integer exponents are supported".into());
        }
        let e = exp
            .to_integer()
            .to_i64()
            .filter(|e| e.abs() <= MAX_EXPONENT)
            .ok_or_else(|| "exponent too large".to_string())?;
        if e < 0 && base.is_zero() {
            return Err("division by zero".into());
        }
        let magnitude = num_traits::pow(base, e.unsigned_abs() as usize);
        Ok(if e < 0 { magnitude.recip() } else { magnitude })
    }

    fn atom(&mut self) -> Result<BigRational, String> {
        match self.toks.get(self.pos).cloned() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(n)
            }
            Some(Tok::Open) => {
                self.pos += 1;
                let v = self.expr()?;
                match self.peek() {
                    Some(Tok::Close) => {
                        self.pos += 1;
                        Ok(v)
                    }
                    _ => Err("missing ')'".into()),
                }
            }
            Some(Tok::Close) => Err("unexpected ')'".into()),
            Some(Tok::Op(c)) => Err(format!("unexpected operator '{c}'")),
            None => Err("unexpected end of expression".into()),
        }
    }
}

/// Evaluates `expr` exactly.
pub fn evaluate(expr: &str) -> Result<BigRational, String> {
    let toks = lex(expr)?;
    if toks.is_empty() {
        return Err("empty expression".into());
    }
    let mut parser = Parser { toks, pos: 0 };
    let value = parser.expr()?;
    if parser.pos != parser.toks.len() {
        return Err("unexpected input after expression".into());
    }
    Ok(value)
}

/// Integers print bare; other values get up to ten fractional digits,
/// rounded half away from zero, trailing zeros removed.
pub fn render(value: &BigRational) -> String {
    if value.is_integer() {
        return value.to_integer().to_string();
    }
    let scale = num_traits::pow(BigInt::from(10), FRACTION_DIGITS);
    let scaled = (value.abs() * BigRational::from_integer(scale.clone())).round();
    let scaled = scaled.to_integer();
    let int_part = &scaled / &scale;
    let frac_part = &scaled % &scale;
    let sign = if value.is_negative() && !scaled.is_zero() {
        "-"
    } else {
        ""
    };
    let mut frac = format!("{:0>width$}", frac_part.to_string(), width = FRACTION_DIGITS);
    while frac.ends_with('0') {
        frac.pop();
    }
    if frac.is_empty() {
        format!("{sign}{int_part}")
    } else {
        format!("{sign}{int_part}.{frac}")
    }
}

/// The calculator tool: a number, or a readable error message.
pub fn calculator_eval(expr: &str) -> String {
    match evaluate(expr) {
        Ok(v) => render(&v),
        Err(e) => format!("Error: {e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(calculator_eval("2*(3+4)"), "14");
        assert_eq!(calculator_eval("-3 + 3"), "0");
        assert_eq!(calculator_eval("10/4"), "2.5");
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(calculator_eval("2+3*4"), "14");
        assert_eq!(calculator_eval("-2^2"), "-4");
        assert_eq!(calculator_eval("(-2)^2"), "4");
        assert_eq!(calculator_eval("2^3^2"), "512");
        assert_eq!(calculator_eval("2^-2"), "0.25");
        assert_eq!(calculator_eval("10 - 4 - 3"), "3");
        assert_eq!(calculator_eval("48 ÷ 2 × 3"), "72");
        assert_eq!(calculator_eval("1,200 * 0.15"), "180");
    }

    #[test]
    fn exact_rational_arithmetic() {
        assert_eq!(calculator_eval("0.1 + 0.2"), "0.3");
        assert_eq!(calculator_eval("1/3"), "0.3333333333");
        assert_eq!(calculator_eval("2/3"), "0.6666666667");
        assert_eq!(calculator_eval("-2/3"), "-0.6666666667");
        assert_eq!(calculator_eval("1/3*3"), "1");
        assert_eq!(calculator_eval("1/100000000000"), "0");
    }

    #[test]
    fn errors_are_readable() {
        assert_eq!(calculator_eval("1/0"), "Error: division by zero");
        assert_eq!(calculator_eval("0^-1"), "Error: division by zero");
        assert_eq!(calculator_eval("2^0.5"), "Error: only integer exponents are supported");
        assert_eq!(calculator_eval("(1+2"), "Error: missing ')'");
        assert_eq!(calculator_eval(""), "Error: empty expression");
        assert_eq!(calculator_eval("2 $ 3"), "Error: unexpected character '$'");
        assert_eq!(calculator_eval("1..2"), "Error: malformed number \"1..2\"");
        assert_eq!(calculator_eval("3 4"), "Error: unexpected input after expression");
    }
}
