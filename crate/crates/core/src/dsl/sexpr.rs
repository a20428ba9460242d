//! A small s-expression reader and printer.
//!
//! Atoms are either bare symbols (`Act-Inp`, `:text`, `next`) or double-quoted
//! strings with `\"` and `\\` escapes. `;` starts a comment that runs to the end
//! of the line.

use std::fmt;

use super::SpecError;

/// Line/column of a character in the source text, both 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Location {
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SExpr {
    Symbol(String),
    Str(String),
    List(Vec<SExpr>),
}

impl SExpr {
    pub fn as_symbol(&self) -> Option<&str> {
        match self {
            SExpr::Symbol(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            SExpr::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[SExpr]> {
        match self {
            SExpr::List(items) => Some(items),
            _ => None,
        }
    }

    /// Renders the expression on one line. The output reads back to an equal tree.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SExpr::Symbol(s) => f.write_str(s),
            SExpr::Str(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
            SExpr::List(items) => {
                f.write_str("(")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// An expression together with the location where it starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Located {
    pub expr: SExpr,
    pub at: Location,
    pub children: Vec<Located>,
}

struct Reader<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    column: usize,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Reader {
            chars: text.chars().peekable(),
            line: 1,
            column: 1,
        }
    }

    fn here(&self) -> Location {
        Location {
            line: self.line,
            column: self.column,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn skip_trivia(&mut self) {
        while let Some(&c) = self.chars.peek() {
            if c.is_whitespace() {
                self.bump();
            } else if c == ';' {
                while let Some(c) = self.bump() {
                    if c == '\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn read(&mut self) -> Result<Located, SpecError> {
        self.skip_trivia();
        let at = self.here();
        match self.chars.peek().copied() {
            None => Err(SpecError::Lex {
                at,
                message: "unexpected end of input".into(),
            }),
            Some('(') => {
                self.bump();
                let mut children = Vec::new();
                loop {
                    self.skip_trivia();
                    match self.chars.peek() {
                        None => {
                            return Err(SpecError::Lex {
                                at,
                                message: "unbalanced parenthesis: list is never closed".into(),
                            })
                        }
                        Some(')') => {
                            self.bump();
                            break;
                        }
                        Some(_) => children.push(self.read()?),
                    }
                }
                Ok(Located {
                    expr: SExpr::List(children.iter().map(|c| c.expr.clone()).collect()),
                    at,
                    children,
                })
            }
            Some(')') => Err(SpecError::Lex {
                at,
                message: "unbalanced parenthesis: unexpected ')'".into(),
            }),
            Some('"') => {
                self.bump();
                let mut s = String::new();
                loop {
                    match self.bump() {
                        None => {
                            return Err(SpecError::Lex {
                                at,
                                message: "unterminated string".into(),
                            })
                        }
                        Some('"') => break,
                        Some('\\') => match self.bump() {
                            Some('n') => s.push('\n'),
                            Some('t') => s.push('\t'),
                            Some(c) => s.push(c),
                            None => {
                                return Err(SpecError::Lex {
                                    at,
                                    message: "unterminated string".into(),
                                })
                            }
                        },
                        Some(c) => s.push(c),
                    }
                }
                Ok(Located {
                    expr: SExpr::Str(s),
                    at,
                    children: Vec::new(),
                })
            }
            Some(_) => {
                let mut s = String::new();
                while let Some(&c) = self.chars.peek() {
                    if c.is_whitespace() || matches!(c, '(' | ')' | '"' | ';') {
                        break;
                    }
                    s.push(c);
                    self.bump();
                }
                Ok(Located {
                    expr: SExpr::Symbol(s),
                    at,
                    children: Vec::new(),
                })
            }
        }
    }
}

/// Reads exactly one expression from `text`; trailing non-comment input is an error.
pub fn read_one(text: &str) -> Result<Located, SpecError> {
    let mut reader = Reader::new(text);
    let expr = reader.read()?;
    reader.skip_trivia();
    if reader.chars.peek().is_some() {
        return Err(SpecError::Lex {
            at: reader.here(),
            message: "unexpected input after the top-level form".into(),
        });
    }
    Ok(expr)
}

pub fn parse_sexpr(text: &str) -> Result<SExpr, SpecError> {
    read_one(text).map(|l| l.expr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reads_nested_lists_and_strings() {
        let e = parse_sexpr(r#"(Obs (:text "[Observation]") (:flags :env-input))"#).unwrap();
        assert_eq!(
            e,
            SExpr::List(vec![
                SExpr::Symbol("Obs".into()),
                SExpr::List(vec![SExpr::Symbol(":text".into()), SExpr::Str("[Observation]".into())]),
                SExpr::List(vec![SExpr::Symbol(":flags".into()), SExpr::Symbol(":env-input".into())]),
            ])
        );
    }

    #[test]
    fn strings_keep_brackets_parens_and_spaces() {
        let e = parse_sexpr(r#""( [Action Input] ) ; not a comment""#).unwrap();
        assert_eq!(e, SExpr::Str("( [Action Input] ) ; not a comment".into()));
    }

    #[test]
    fn comments_are_skipped() {
        let e = parse_sexpr("; header\n(a ; trailing\n b)\n; done\n").unwrap();
        assert_eq!(
            e,
            SExpr::List(vec![SExpr::Symbol("a".into()), SExpr::Symbol("b".into())])
        );
    }

    #[test]
    fn unbalanced_paren_reports_location() {
        let err = parse_sexpr("(define x\n  (:states ").unwrap_err();
        match err {
            SpecError::Lex { at, message } => {
                assert_eq!(at, Location { line: 2, column: 3 });
                assert!(message.contains("unbalanced"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_sexpr("(a))").unwrap_err();
        assert!(matches!(
            err,
            SpecError::Lex {
                at: Location { line: 1, column: 4 },
                ..
            }
        ));
    }

    #[test]
    fn unterminated_string_reports_start() {
        let err = parse_sexpr("(a\n \"oops)").unwrap_err();
        match err {
            SpecError::Lex { at, message } => {
                assert_eq!(at, Location { line: 2, column: 2 });
                assert_eq!(message, "unterminated string");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn arb_sexpr() -> impl Strategy<Value = SExpr> {
        let leaf = prop_oneof![
            "[A-Za-z:][A-Za-z0-9:_-]{0,8}".prop_map(SExpr::Symbol),
            "[ -~\\[\\]()\"\\\\;]{0,12}".prop_map(SExpr::Str),
        ];
        leaf.prop_recursive(4, 32, 5, |inner| {
            prop::collection::vec(inner, 0..5).prop_map(SExpr::List)
        })
    }

    proptest! {
        #[test]
        fn print_then_read_is_identity(e in arb_sexpr()) {
            let text = e.to_text();
            prop_assert_eq!(parse_sexpr(&text).unwrap(), e);
        }
    }
}
