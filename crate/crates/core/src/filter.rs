//! Row filter predicates.
//!
//! Grammar:
//!
//! ```text
//! expr    := and ( ("OR" | "||") and )*
//! and     := atom ( ("AND" | "&&") atom )*
//! atom    := "(" expr ")" | column op literal
//! op      := == | != | < | <= | > | >=
//! literal := number | 'text' | "text" | bareword
//! ```
//!
//! A comparison against a missing cell is false.

use crate::data::{Cell, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Filter {
    Compare {
        column: String,
        op: CmpOp,
        value: Literal,
    },
    And(Box<Filter>, Box<Filter>),
    Or(Box<Filter>, Box<Filter>),
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Number(f64),
    Quoted(String),
    Op(CmpOp),
    And,
    Or,
    LParen,
    RParen,
}

fn tokenize(src: &str) -> std::result::Result<Vec<Token>, String> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '&' | '|' => {
                if chars.get(i + 1) != Some(&c) {
                    return Err(format!("expected '{c}{c}' at offset {i}"));
                }
                out.push(if c == '&' { Token::And } else { Token::Or });
                i += 2;
            }
            '=' | '!' | '<' | '>' => {
                let next = chars.get(i + 1).copied();
                let (op, width) = match (c, next) {
                    ('=', Some('=')) => (CmpOp::Eq, 2),
                    ('=', _) => (CmpOp::Eq, 1),
                    ('!', Some('=')) => (CmpOp::Ne, 2),
                    ('<', Some('=')) => (CmpOp::Le, 2),
                    ('<', _) => (CmpOp::Lt, 1),
                    ('>', Some('=')) => (CmpOp::Ge, 2),
                    ('>', _) => (CmpOp::Gt, 1),
                    _ => return Err(format!("unexpected '{c}' at offset {i}")),
                };
                out.push(Token::Op(op));
                i += width;
            }
            '\'' | '"' => {
                let start = i + 1;
                let end = chars[start..]
                    .iter()
                    .position(|&x| x == c)
                    .ok_or_else(|| "unterminated string literal".to_string())?;
                out.push(Token::Quoted(chars[start..start + end].iter().collect()));
                i = start + end + 1;
            }
            _ => {
                let start = i;
                while i < chars.len()
                    && !matches!(chars[i], ' ' | '\t' | '\n' | '\r' | '(' | ')' | '=' | '!' | '<' | '>' | '&' | '|' | '\'' | '"')
                {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                let tok = match word.to_ascii_uppercase().as_str() {
                    "AND" => Token::And,
                    "OR" => Token::Or,
                    _ => match word.parse::<f64>() {
                        Ok(x) => Token::Number(x),
                        Err(_) => Token::Ident(word),
                    },
                };
                out.push(tok);
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> std::result::Result<Filter, String> {
        let mut lhs = self.conj()?;
        while self.peek() == Some(&Token::Or) {
            self.pos += 1;
            let rhs = self.conj()?;
            lhs = Filter::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn conj(&mut self) -> std::result::Result<Filter, String> {
        let mut lhs = self.atom()?;
        while self.peek() == Some(&Token::And) {
            self.pos += 1;
            let rhs = self.atom()?;
            lhs = Filter::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn atom(&mut self) -> std::result::Result<Filter, String> {
        match self.next() {
            Some(Token::LParen) => {
                let inner = self.expr()?;
                match self.next() {
                    Some(Token::RParen) => Ok(inner),
                    _ => Err("missing ')'".into()),
                }
            }
            Some(Token::Ident(column)) | Some(Token::Quoted(column)) => {
                let op = match self.next() {
                    Some(Token::Op(op)) => op,
                    other => return Err(format!("expected comparison after {column}, got {other:?}")),
                };
                let value = match self.next() {
                    Some(Token::Number(x)) => Literal::Number(x),
                    Some(Token::Quoted(s)) | Some(Token::Ident(s)) => Literal::Text(s),
                    other => return Err(format!("expected literal, got {other:?}")),
                };
                Ok(Filter::Compare { column, op, value })
            }
            other => Err(format!("expected column name or '(', got {other:?}")),
        }
    }
}

fn compare<T: PartialOrd>(a: T, op: CmpOp, b: T) -> bool {
    match op {
        CmpOp::Eq => a == b,
        CmpOp::Ne => a != b,
        CmpOp::Lt => a < b,
        CmpOp::Le => a <= b,
        CmpOp::Gt => a > b,
        CmpOp::Ge => a >= b,
    }
}

impl Filter {
    pub fn parse(src: &str) -> Result<Filter> {
        let fail = |reason: String| Error::Filter {
            expr: src.to_string(),
            reason,
        };
        let tokens = tokenize(src).map_err(fail)?;
        if tokens.is_empty() {
            return Err(fail("empty expression".into()));
        }
        let mut p = Parser { tokens, pos: 0 };
        let f = p.expr().map_err(fail)?;
        if p.pos != p.tokens.len() {
            return Err(fail(format!("trailing input at token {}", p.pos)));
        }
        Ok(f)
    }

    /// Column names referenced by the predicate.
    pub fn columns(&self) -> Vec<&str> {
        match self {
            Filter::Compare { column, .. } => vec![column.as_str()],
            Filter::And(a, b) | Filter::Or(a, b) => {
                let mut v = a.columns();
                v.extend(b.columns());
                v
            }
        }
    }

    pub fn evaluate(&self, ds: &Dataset, row: usize) -> Result<bool> {
        match self {
            Filter::And(a, b) => Ok(a.evaluate(ds, row)? && b.evaluate(ds, row)?),
            Filter::Or(a, b) => Ok(a.evaluate(ds, row)? || b.evaluate(ds, row)?),
            Filter::Compare { column, op, value } => {
                Ok(match (ds.cell(column, row)?, value) {
                    (Cell::Missing, _) => false,
                    (Cell::Number(x), Literal::Number(y)) => compare(x, *op, *y),
                    (Cell::Text(s), Literal::Text(t)) => compare(s, *op, t.as_str()),
                    (Cell::Text(s), Literal::Number(y)) => compare(s, *op, y.to_string().as_str()),
                    (Cell::Number(_), Literal::Text(t)) => {
                        return Err(Error::Filter {
                            expr: format!("{column} .. {t}"),
                            reason: format!("numeric column \"{column}\" compared to text"),
                        })
                    }
                })
            }
        }
    }
}
