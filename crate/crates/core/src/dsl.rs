//! Integer expression language for PID remappings.
//!
//! Grammar, loosest binding first (all binary operators are left-associative):
//!
//! ```text
//! expr    := or
//! or      := and ( "|" and )*
//! and     := shift ( "&" shift )*
//! shift   := add ( ("<<" | ">>") add )*
//! add     := mul ( ("+" | "-") mul )*
//! mul     := primary ( ("*" | "//" | "%") primary )*
//! primary := integer | identifier | "(" expr ")" | ("min" | "max") "(" expr "," expr ")"
//! ```
//!
//! Integers are decimal or `0x` hexadecimal. Identifiers come from a fixed
//! vocabulary (see [`Var`]). Evaluation is over `u64`; any intermediate that
//! would go negative is an error rather than wrapping.

use std::fmt;
use std::ops;

use thiserror::Error;

/// Identifiers an expression may reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    Pid,
    PidM,
    PidN,
    NumXcds,
    NumBlocks,
    NumBlocksM,
    NumBlocksN,
}

impl Var {
    pub const ALL: [Var; 7] = [
        Var::Pid,
        Var::PidM,
        Var::PidN,
        Var::NumXcds,
        Var::NumBlocks,
        Var::NumBlocksM,
        Var::NumBlocksN,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Var::Pid => "pid",
            Var::PidM => "pid_m",
            Var::PidN => "pid_n",
            Var::NumXcds => "num_xcds",
            Var::NumBlocks => "num_blocks",
            Var::NumBlocksM => "num_blocks_m",
            Var::NumBlocksN => "num_blocks_n",
        }
    }

    pub fn from_name(name: &str) -> Option<Var> {
        Var::ALL.into_iter().find(|v| v.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    FloorDiv,
    Mod,
    Shl,
    Shr,
    BitAnd,
    BitOr,
    Min,
    Max,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::FloorDiv => "//",
            BinOp::Mod => "%",
            BinOp::Shl => "<<",
            BinOp::Shr => ">>",
            BinOp::BitAnd => "&",
            BinOp::BitOr => "|",
            BinOp::Min => "min",
            BinOp::Max => "max",
        }
    }

    fn is_call(self) -> bool {
        matches!(self, BinOp::Min | BinOp::Max)
    }
}

/// A parsed remapping expression.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SwizzleExpr {
    Lit(u64),
    Var(Var),
    Binary(BinOp, Box<SwizzleExpr>, Box<SwizzleExpr>),
}

pub fn lit(value: u64) -> SwizzleExpr {
    SwizzleExpr::Lit(value)
}

pub fn var(v: Var) -> SwizzleExpr {
    SwizzleExpr::Var(v)
}

impl SwizzleExpr {
    pub fn binary(op: BinOp, lhs: SwizzleExpr, rhs: SwizzleExpr) -> Self {
        SwizzleExpr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn floor_div(self, rhs: SwizzleExpr) -> Self {
        Self::binary(BinOp::FloorDiv, self, rhs)
    }

    pub fn min(self, rhs: SwizzleExpr) -> Self {
        Self::binary(BinOp::Min, self, rhs)
    }

    pub fn max(self, rhs: SwizzleExpr) -> Self {
        Self::binary(BinOp::Max, self, rhs)
    }

    /// Every identifier the expression mentions, sorted and deduplicated.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_vars(&self, out: &mut Vec<Var>) {
        match self {
            SwizzleExpr::Lit(_) => {}
            SwizzleExpr::Var(v) => out.push(*v),
            SwizzleExpr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            SwizzleExpr::Binary(_, a, b) => 1 + a.node_count() + b.node_count(),
            _ => 1,
        }
    }
}

macro_rules! impl_op {
    ($trait:ident, $method:ident, $op:expr) => {
        impl ops::$trait for SwizzleExpr {
            type Output = SwizzleExpr;
            fn $method(self, rhs: SwizzleExpr) -> SwizzleExpr {
                SwizzleExpr::binary($op, self, rhs)
            }
        }
    };
}

impl_op!(Add, add, BinOp::Add);
impl_op!(Sub, sub, BinOp::Sub);
impl_op!(Mul, mul, BinOp::Mul);
impl_op!(Rem, rem, BinOp::Mod);
impl_op!(Shl, shl, BinOp::Shl);
impl_op!(Shr, shr, BinOp::Shr);
impl_op!(BitAnd, bitand, BinOp::BitAnd);
impl_op!(BitOr, bitor, BinOp::BitOr);

impl fmt::Display for SwizzleExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SwizzleExpr::Lit(v) => write!(f, "{v}"),
            SwizzleExpr::Var(v) => f.write_str(v.name()),
            SwizzleExpr::Binary(op, a, b) if op.is_call() => {
                write!(f, "{}({a}, {b})", op.symbol())
            }
            SwizzleExpr::Binary(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
        }
    }
}

/// Canonical text: every binary operator parenthesized, `min`/`max` in call form.
pub fn format_expr(expr: &SwizzleExpr) -> String {
    expr.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at offset {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("unknown identifier `{name}` at offset {position}")]
    UnknownIdentifier { position: usize, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Int(u64),
    Ident(String),
    Op(BinOp),
    LParen,
    RParen,
    Comma,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokenize(src: &'a str) -> Result<Vec<(usize, Token)>, ParseError> {
        let mut lx = Lexer { src, pos: 0 };
        let mut out = Vec::new();
        while let Some(tok) = lx.next_token()? {
            out.push(tok);
        }
        Ok(out)
    }

    fn syntax(&self, position: usize, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            position,
            message: message.into(),
        }
    }

    fn next_token(&mut self) -> Result<Option<(usize, Token)>, ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos >= bytes.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = bytes[start];
        let two = |b: u8| bytes.get(start + 1) == Some(&b);
        let (tok, len) = match c {
            b'+' => (Token::Op(BinOp::Add), 1),
            b'-' => (Token::Op(BinOp::Sub), 1),
            b'*' => (Token::Op(BinOp::Mul), 1),
            b'%' => (Token::Op(BinOp::Mod), 1),
            b'&' => (Token::Op(BinOp::BitAnd), 1),
            b'|' => (Token::Op(BinOp::BitOr), 1),
            b'(' => (Token::LParen, 1),
            b')' => (Token::RParen, 1),
            b',' => (Token::Comma, 1),
            b'/' if two(b'/') => (Token::Op(BinOp::FloorDiv), 2),
            b'/' => return Err(self.syntax(start, "true division `/` is not supported; use `//`")),
            b'<' if two(b'<') => (Token::Op(BinOp::Shl), 2),
            b'>' if two(b'>') => (Token::Op(BinOp::Shr), 2),
            b'0'..=b'9' => return self.number(start).map(Some),
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let end = self.src[start..]
                    .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
                    .map_or(self.src.len(), |n| start + n);
                self.pos = end;
                return Ok(Some((start, Token::Ident(self.src[start..end].to_string()))));
            }
            _ => {
                let ch = self.src[start..].chars().next().unwrap_or('?');
                return Err(self.syntax(start, format!("unexpected character `{ch}`")));
            }
        };
        self.pos += len;
        Ok(Some((start, tok)))
    }

    fn number(&mut self, start: usize) -> Result<(usize, Token), ParseError> {
        let rest = &self.src[start..];
        let (digits, radix, skip) = if rest.starts_with("0x") || rest.starts_with("0X") {
            (&rest[2..], 16, 2)
        } else {
            (rest, 10, 0)
        };
        let len = digits
            .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_'))
            .unwrap_or(digits.len());
        let text = &digits[..len];
        self.pos = start + skip + len;
        let value = u64::from_str_radix(&text.replace('_', ""), radix)
            .map_err(|e| self.syntax(start, format!("bad integer literal `{}`: {e}", &rest[..skip + len])))?;
        Ok((start, Token::Int(value)))
    }
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    idx: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.idx).map(|(_, t)| t)
    }

    fn position(&self) -> usize {
        self.tokens.get(self.idx).map_or(self.end, |(p, _)| *p)
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            position: self.position(),
            message: message.into(),
        }
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&want) {
            self.idx += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected {what}")))
        }
    }

    fn binary_level(
        &mut self,
        ops: &[BinOp],
        next: fn(&mut Parser) -> Result<SwizzleExpr, ParseError>,
    ) -> Result<SwizzleExpr, ParseError> {
        let mut lhs = next(self)?;
        while let Some(Token::Op(op)) = self.peek() {
            let op = *op;
            if !ops.contains(&op) {
                break;
            }
            self.idx += 1;
            let rhs = next(self)?;
            lhs = SwizzleExpr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn expr(&mut self) -> Result<SwizzleExpr, ParseError> {
        self.binary_level(&[BinOp::BitOr], Parser::and)
    }

    fn and(&mut self) -> Result<SwizzleExpr, ParseError> {
        self.binary_level(&[BinOp::BitAnd], Parser::shift)
    }

    fn shift(&mut self) -> Result<SwizzleExpr, ParseError> {
        self.binary_level(&[BinOp::Shl, BinOp::Shr], Parser::additive)
    }

    fn additive(&mut self) -> Result<SwizzleExpr, ParseError> {
        self.binary_level(&[BinOp::Add, BinOp::Sub], Parser::multiplicative)
    }

    fn multiplicative(&mut self) -> Result<SwizzleExpr, ParseError> {
        self.binary_level(&[BinOp::Mul, BinOp::FloorDiv, BinOp::Mod], Parser::primary)
    }

    fn primary(&mut self) -> Result<SwizzleExpr, ParseError> {
        let position = self.position();
        match self.peek().cloned() {
            Some(Token::Int(v)) => {
                self.idx += 1;
                Ok(SwizzleExpr::Lit(v))
            }
            Some(Token::LParen) => {
                self.idx += 1;
                let inner = self.expr()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Token::Ident(name)) if name == "min" || name == "max" => {
                self.idx += 1;
                let op = if name == "min" { BinOp::Min } else { BinOp::Max };
                self.expect(Token::LParen, &format!("`(` after `{name}`"))?;
                let a = self.expr()?;
                self.expect(Token::Comma, "`,`")?;
                let b = self.expr()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(SwizzleExpr::binary(op, a, b))
            }
            Some(Token::Ident(name)) => match Var::from_name(&name) {
                Some(v) => {
                    self.idx += 1;
                    Ok(SwizzleExpr::Var(v))
                }
                None => Err(ParseError::UnknownIdentifier { position, name }),
            },
            Some(_) => Err(self.err("expected an integer, identifier, `(`, `min` or `max`")),
            None => Err(self.err("unexpected end of expression")),
        }
    }
}

pub fn parse_expr(text: &str) -> Result<SwizzleExpr, ParseError> {
    let tokens = Lexer::tokenize(text)?;
    let mut p = Parser {
        tokens,
        idx: 0,
        end: text.len(),
    };
    let expr = p.expr()?;
    if p.idx != p.tokens.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(expr)
}

impl std::str::FromStr for SwizzleExpr {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_expr(s)
    }
}

/// Values bound to the vocabulary identifiers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalEnv {
    values: [Option<u64>; 7],
}

impl EvalEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, v: Var, value: u64) -> &mut Self {
        self.values[v.index()] = Some(value);
        self
    }

    pub fn with(mut self, v: Var, value: u64) -> Self {
        self.bind(v, value);
        self
    }

    pub fn get(&self, v: Var) -> Option<u64> {
        self.values[v.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("division by zero in `{0}`")]
    DivisionByZero(String),
    #[error("identifier `{}` is unbound", .0.name())]
    Unbound(Var),
    #[error("negative intermediate in `{0}`")]
    Negative(String),
    #[error("integer overflow in `{0}`")]
    Overflow(String),
}

pub fn eval_expr(expr: &SwizzleExpr, env: &EvalEnv) -> Result<u64, EvalError> {
    match expr {
        SwizzleExpr::Lit(v) => Ok(*v),
        SwizzleExpr::Var(v) => env.get(*v).ok_or(EvalError::Unbound(*v)),
        SwizzleExpr::Binary(op, a, b) => {
            let x = eval_expr(a, env)?;
            let y = eval_expr(b, env)?;
            let overflow = || EvalError::Overflow(expr.to_string());
            match op {
                BinOp::Add => x.checked_add(y).ok_or_else(overflow),
                BinOp::Sub => x.checked_sub(y).ok_or_else(|| EvalError::Negative(expr.to_string())),
                BinOp::Mul => x.checked_mul(y).ok_or_else(overflow),
                BinOp::FloorDiv | BinOp::Mod if y == 0 => Err(EvalError::DivisionByZero(expr.to_string())),
                BinOp::FloorDiv => Ok(x / y),
                BinOp::Mod => Ok(x % y),
                BinOp::Shl => {
                    if y >= 64 || (x << y) >> y != x {
                        Err(overflow())
                    } else {
                        Ok(x << y)
                    }
                }
                BinOp::Shr => Ok(if y >= 64 { 0 } else { x >> y }),
                BinOp::BitAnd => Ok(x & y),
                BinOp::BitOr => Ok(x | y),
                BinOp::Min => Ok(x.min(y)),
                BinOp::Max => Ok(x.max(y)),
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod strategies {
    use super::*;
    use proptest::prelude::*;

    pub fn arb_expr() -> impl Strategy<Value = SwizzleExpr> {
        let leaf = prop_oneof![
            (0u64..1_000_000).prop_map(SwizzleExpr::Lit),
            proptest::sample::select(Var::ALL.to_vec()).prop_map(SwizzleExpr::Var),
        ];
        leaf.prop_recursive(6, 64, 2, |inner| {
            let ops = vec![
                BinOp::Add,
                BinOp::Sub,
                BinOp::Mul,
                BinOp::FloorDiv,
                BinOp::Mod,
                BinOp::Shl,
                BinOp::Shr,
                BinOp::BitAnd,
                BinOp::BitOr,
                BinOp::Min,
                BinOp::Max,
            ];
            (proptest::sample::select(ops), inner.clone(), inner).prop_map(|(op, a, b)| SwizzleExpr::binary(op, a, b))
        })
    }
}
