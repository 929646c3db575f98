//! A small expression language for the nonlinearity `f(x, y)`, the player
//! integrands `L_k(x, y)` and spatial data fields.
//!
//! Grammar (whitespace insensitive, `-` and `−` both denote minus):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := unary ('^' integer)?
//! unary  := '-'? atom
//! atom   := number | ident | func '(' expr ')' | '(' expr ')'
//! ident  := x1 | x2 | y | yd
//! func   := sin | cos | exp | tanh
//! ```
//!
//! Note that the exponent binds to the signed unary, so `-y^2` is `(-y)^2`.
//! Exponents are non-negative integer literals, which keeps [`Expr::diff_y`]
//! closed.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    X1,
    X2,
    Y,
    Yd,
}

impl Var {
    fn name(self) -> &'static str {
        match self {
            Var::X1 => "x1",
            Var::X2 => "x2",
            Var::Y => "y",
            Var::Yd => "yd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Tanh => "tanh",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "tanh" => Func::Tanh,
            _ => return None,
        })
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Tanh => v.tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, u32),
    Call(Func, Box<Expr>),
}

/// Evaluation point: spatial coordinates, state value and target value.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Point {
    pub x: [f64; 2],
    pub y: f64,
    pub yd: f64,
}

impl Point {
    pub fn new(x: [f64; 2], y: f64, yd: f64) -> Self {
        Self { x, y, yd }
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr> {
        let tokens = tokenize(source)?;
        if tokens.is_empty() {
            return Err(Error::Syntax {
                pos: 0,
                msg: "empty expression".into(),
            });
        }
        let mut parser = Parser {
            tokens,
            pos: 0,
            end: source.chars().count(),
        };
        let e = parser.expr()?;
        match parser.peek() {
            None => Ok(e),
            Some(t) => Err(Error::Syntax {
                pos: t.pos,
                msg: format!("unexpected {}", t.kind),
            }),
        }
    }

    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn uses(&self, var: Var) -> bool {
        match self {
            Expr::Num(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.uses(var),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => a.uses(var) || b.uses(var),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    pub fn eval(&self, p: &Point) -> Result<f64> {
        let v = self.eval_raw(p)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Domain(format!("`{self}` overflowed at {p:?}")))
        }
    }

    fn eval_raw(&self, p: &Point) -> Result<f64> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Var(Var::X1) => p.x[0],
            Expr::Var(Var::X2) => p.x[1],
            Expr::Var(Var::Y) => p.y,
            Expr::Var(Var::Yd) => p.yd,
            Expr::Neg(a) => -a.eval_raw(p)?,
            Expr::Add(a, b) => a.eval_raw(p)? + b.eval_raw(p)?,
            Expr::Sub(a, b) => a.eval_raw(p)? - b.eval_raw(p)?,
            Expr::Mul(a, b) => a.eval_raw(p)? * b.eval_raw(p)?,
            Expr::Div(a, b) => {
                let d = b.eval_raw(p)?;
                if d == 0.0 {
                    return Err(Error::Domain(format!("division by zero in `{self}`")));
                }
                a.eval_raw(p)? / d
            }
            Expr::Pow(a, n) => a.eval_raw(p)?.powi(*n as i32),
            Expr::Call(f, a) => f.apply(a.eval_raw(p)?),
        })
    }

    /// Exact derivative with respect to `y`; `x1`, `x2` and `yd` are constants.
    pub fn diff_y(&self) -> Expr {
        match self {
            Expr::Num(_) => Expr::Num(0.0),
            Expr::Var(Var::Y) => Expr::Num(1.0),
            Expr::Var(_) => Expr::Num(0.0),
            Expr::Neg(a) => neg(a.diff_y()),
            Expr::Add(a, b) => add(a.diff_y(), b.diff_y()),
            Expr::Sub(a, b) => sub(a.diff_y(), b.diff_y()),
            Expr::Mul(a, b) => add(mul(a.diff_y(), (**b).clone()), mul((**a).clone(), b.diff_y())),
            Expr::Div(a, b) => {
                // (a'b - ab') / b^2
                let num = sub(mul(a.diff_y(), (**b).clone()), mul((**a).clone(), b.diff_y()));
                if num.is_zero() {
                    Expr::Num(0.0)
                } else {
                    Expr::Div(Box::new(num), Box::new(pow((**b).clone(), 2)))
                }
            }
            Expr::Pow(a, n) => match n {
                0 => Expr::Num(0.0),
                _ => mul(mul(Expr::Num(*n as f64), pow((**a).clone(), n - 1)), a.diff_y()),
            },
            Expr::Call(f, a) => {
                let inner = (**a).clone();
                let outer = match f {
                    Func::Sin => Expr::Call(Func::Cos, Box::new(inner)),
                    Func::Cos => neg(Expr::Call(Func::Sin, Box::new(inner))),
                    Func::Exp => Expr::Call(Func::Exp, Box::new(inner)),
                    // 1 - tanh^2
                    Func::Tanh => sub(Expr::Num(1.0), pow(Expr::Call(Func::Tanh, Box::new(inner)), 2)),
                };
                mul(outer, a.diff_y())
            }
        }
    }
}

// Smart constructors folding the zeros and ones that differentiation creates.

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Num(v) => Expr::Num(-v),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x + y),
        (a, b) if a.is_zero() => b,
        (a, b) if b.is_zero() => a,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x - y),
        (a, b) if b.is_zero() => a,
        (a, b) if a.is_zero() => neg(b),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Num(x), Expr::Num(y)) => Expr::Num(x * y),
        (a, _) if a.is_zero() => Expr::Num(0.0),
        (_, b) if b.is_zero() => Expr::Num(0.0),
        (Expr::Num(1.0), b) => b,
        (a, Expr::Num(1.0)) => a,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, n: u32) -> Expr {
    match (a, n) {
        (_, 0) => Expr::Num(1.0),
        (a, 1) => a,
        (Expr::Num(x), n) => Expr::Num(x.powi(n as i32)),
        (a, n) => Expr::Pow(Box::new(a), n),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => {
                write!(f, "(-{:?})", -v)
            }
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(a) => write!(f, "(-({a}))"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, n) => write!(f, "({a})^{n}"),
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Number(f64, bool),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Number(v, _) => write!(f, "number {v}"),
            TokenKind::Ident(s) => write!(f, "identifier `{s}`"),
            TokenKind::Plus => f.write_str("`+`"),
            TokenKind::Minus => f.write_str("`-`"),
            TokenKind::Star => f.write_str("`*`"),
            TokenKind::Slash => f.write_str("`/`"),
            TokenKind::Caret => f.write_str("`^`"),
            TokenKind::LParen => f.write_str("`(`"),
            TokenKind::RParen => f.write_str("`)`"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    pos: usize,
}

fn tokenize(source: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = source.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let pos = i;
        let simple = match c {
            '+' => Some(TokenKind::Plus),
            '-' | '−' => Some(TokenKind::Minus),
            '*' => Some(TokenKind::Star),
            '/' => Some(TokenKind::Slash),
            '^' => Some(TokenKind::Caret),
            '(' => Some(TokenKind::LParen),
            ')' => Some(TokenKind::RParen),
            _ => None,
        };
        if let Some(kind) = simple {
            tokens.push(Token { kind, pos });
            i += 1;
        } else if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            let mut integer = true;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                integer &= chars[i] != '.';
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    integer = false;
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v: f64 = text.parse().map_err(|_| Error::Syntax {
                pos: start,
                msg: format!("malformed number `{text}`"),
            })?;
            tokens.push(Token {
                kind: TokenKind::Number(v, integer),
                pos: start,
            });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            tokens.push(Token {
                kind: TokenKind::Ident(chars[start..i].iter().collect()),
                pos: start,
            });
        } else {
            return Err(Error::Syntax {
                pos,
                msg: format!("unexpected character `{c}`"),
            });
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    end: usize,
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

    fn eat(&mut self, kind: &TokenKind) -> bool {
        if self.peek().is_some_and(|t| &t.kind == kind) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn here(&self) -> usize {
        self.peek().map_or(self.end, |t| t.pos)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(&TokenKind::Plus) {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(&TokenKind::Minus) {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        loop {
            if self.eat(&TokenKind::Star) {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
            } else if self.eat(&TokenKind::Slash) {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn factor(&mut self) -> Result<Expr> {
        let base = self.unary()?;
        if !self.eat(&TokenKind::Caret) {
            return Ok(base);
        }
        let pos = self.here();
        match self.next() {
            Some(Token {
                kind: TokenKind::Number(v, true),
                ..
            }) if v >= 0.0 && v <= u32::MAX as f64 => Ok(Expr::Pow(Box::new(base), v as u32)),
            Some(Token {
                kind: TokenKind::Number(..) | TokenKind::Minus,
                ..
            }) => Err(Error::NonIntegerExponent { pos }),
            _ => Err(Error::NonIntegerExponent { pos }),
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat(&TokenKind::Minus) {
            Ok(Expr::Neg(Box::new(self.atom()?)))
        } else {
            self.atom()
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        let pos = self.here();
        match self.next() {
            Some(Token {
                kind: TokenKind::Number(v, _),
                ..
            }) => Ok(Expr::Num(v)),
            Some(Token {
                kind: TokenKind::LParen,
                ..
            }) => {
                let e = self.expr()?;
                self.expect_rparen()?;
                Ok(e)
            }
            Some(Token {
                kind: TokenKind::Ident(name),
                pos,
            }) => {
                if let Some(func) = Func::from_name(&name) {
                    if !self.eat(&TokenKind::LParen) {
                        return Err(Error::Syntax {
                            pos: self.here(),
                            msg: format!("expected `(` after `{name}`"),
                        });
                    }
                    let arg = self.expr()?;
                    self.expect_rparen()?;
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                let var = match name.as_str() {
                    "x1" => Var::X1,
                    "x2" => Var::X2,
                    "y" => Var::Y,
                    "yd" => Var::Yd,
                    _ => return Err(Error::UnknownIdentifier { name, pos }),
                };
                Ok(Expr::Var(var))
            }
            Some(t) => Err(Error::Syntax {
                pos: t.pos,
                msg: format!("unexpected {}", t.kind),
            }),
            None => Err(Error::Syntax {
                pos,
                msg: "unexpected end of input".into(),
            }),
        }
    }

    fn expect_rparen(&mut self) -> Result<()> {
        if self.eat(&TokenKind::RParen) {
            Ok(())
        } else {
            Err(Error::Syntax {
                pos: self.here(),
                msg: "expected `)`".into(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at_y(y: f64) -> Point {
        Point { y, ..Point::default() }
    }

    fn parse(s: &str) -> Expr {
        Expr::parse(s).unwrap()
    }

    #[test]
    fn parses_power_node() {
        assert_eq!(parse("y^3"), Expr::Pow(Box::new(Expr::Var(Var::Y)), 3));
    }

    #[test]
    fn parses_tracking_integrand() {
        let e = parse("0.5*(y - yd)^2");
        let p = Point::new([0.0; 2], 3.0, 1.0);
        assert_eq!(e.eval(&p).unwrap(), 2.0);
        assert_eq!(parse("0.5 * (y − yd)^2"), e);
    }

    #[test]
    fn rejects_unknown_identifier() {
        match Expr::parse("z + 1") {
            Err(Error::UnknownIdentifier { name, pos }) => {
                assert_eq!(name, "z");
                assert_eq!(pos, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_exponents() {
        assert!(matches!(
            Expr::parse("y^2.5"),
            Err(Error::NonIntegerExponent { pos: 2 })
        ));
        assert!(matches!(Expr::parse("y^-1"), Err(Error::NonIntegerExponent { .. })));
        assert!(matches!(Expr::parse("y^x1"), Err(Error::NonIntegerExponent { .. })));
        assert!(matches!(Expr::parse("y^1e3"), Err(Error::NonIntegerExponent { .. })));
    }

    #[test]
    fn reports_syntax_positions() {
        assert!(matches!(Expr::parse(""), Err(Error::Syntax { pos: 0, .. })));
        assert!(matches!(Expr::parse("   "), Err(Error::Syntax { .. })));
        assert!(matches!(Expr::parse("(y + 1"), Err(Error::Syntax { pos: 6, .. })));
        assert!(matches!(Expr::parse("y + * 2"), Err(Error::Syntax { pos: 4, .. })));
        assert!(matches!(Expr::parse("sin y"), Err(Error::Syntax { pos: 4, .. })));
        assert!(matches!(Expr::parse("y $ 2"), Err(Error::Syntax { pos: 2, .. })));
        assert!(matches!(Expr::parse("y y"), Err(Error::Syntax { pos: 2, .. })));
    }

    #[test]
    fn unary_minus_binds_tighter_than_power() {
        assert_eq!(parse("-y^2").eval(&at_y(3.0)).unwrap(), 9.0);
        assert_eq!(parse("0 - y^2").eval(&at_y(3.0)).unwrap(), -9.0);
        assert_eq!(parse("-100*(y)^2/2").eval(&at_y(1.0)).unwrap(), -50.0);
    }

    #[test]
    fn evaluates_basics() {
        assert_eq!(parse("y^3").eval(&at_y(2.0)).unwrap(), 8.0);
        assert_eq!(parse("sin(x1)").eval(&Point::default()).unwrap(), 0.0);
        assert_eq!(parse("2*x2 - x1").eval(&Point::new([1.0, 3.0], 0.0, 0.0)).unwrap(), 5.0);
        assert_eq!(parse("1.5e-1 + 2E1").eval(&Point::default()).unwrap(), 20.15);
    }

    #[test]
    fn evaluation_domain_errors() {
        assert!(matches!(parse("1/y").eval(&at_y(0.0)), Err(Error::Domain(_))));
        assert!(matches!(parse("exp(y)").eval(&at_y(1000.0)), Err(Error::Domain(_))));
    }

    fn pointwise_equal(a: &Expr, b: &Expr) {
        for i in 0..41 {
            let y = -2.0 + 0.1 * i as f64;
            let p = Point::new([0.3, -0.7], y, 0.25);
            let (va, vb) = (a.eval(&p).unwrap(), b.eval(&p).unwrap());
            assert!((va - vb).abs() <= 1e-12 * (1.0 + vb.abs()), "{a} vs {b} at y={y}");
        }
    }

    #[test]
    fn power_rule() {
        pointwise_equal(&parse("y^3").diff_y(), &parse("3*y^2"));
        assert_eq!(parse("y^3").diff_y().eval(&at_y(2.0)).unwrap(), 12.0);
    }

    #[test]
    fn tracking_derivative() {
        pointwise_equal(&parse("0.5*(y - yd)^2").diff_y(), &parse("(y - yd)"));
        pointwise_equal(&parse("0.5*(y - yd)^2").diff_y().diff_y(), &parse("1"));
    }

    #[test]
    fn exponential_second_derivative() {
        pointwise_equal(&parse("exp(y)").diff_y().diff_y(), &parse("exp(y)"));
    }

    #[test]
    fn constants_have_zero_derivative() {
        assert!(parse("sin(x1)*x2 + yd^2").diff_y().is_zero());
        assert!(parse("0").diff_y().is_zero());
        assert!(parse("y^0").diff_y().is_zero());
    }

    #[test]
    fn central_difference_at_two() {
        let e = parse("y^3");
        let d = e.diff_y().eval(&at_y(2.0)).unwrap();
        let eps = 1e-5;
        let fd = (e.eval(&at_y(2.0 + eps)).unwrap() - e.eval(&at_y(2.0 - eps)).unwrap()) / (2.0 * eps);
        assert!((d - fd).abs() <= 1e-6 * d.abs());
    }

    const SMOOTH: &[&str] = &[
        "y^3 + 2*y",
        "sin(x1*y) * cos(y - yd)",
        "exp(0.5*y) / (2 + y^2)",
        "tanh(y)^2 - x2*y",
        "0.5*(y - yd)^2 + 0.1*y^4",
        "-(y)^3/3 + exp(-y)",
        "(1 + y) * (2 - y) / (3 + cos(y))",
    ];

    proptest! {
        #[test]
        fn derivative_matches_central_differences(
            idx in 0..SMOOTH.len(),
            y in -2.0..2.0f64, x1 in -2.0..2.0f64, x2 in -2.0..2.0f64, yd in -2.0..2.0f64,
        ) {
            let e = parse(SMOOTH[idx]);
            let d = e.diff_y();
            let eps = 1e-5;
            let at = |y| Point::new([x1, x2], y, yd);
            let fd = (e.eval(&at(y + eps)).unwrap() - e.eval(&at(y - eps)).unwrap()) / (2.0 * eps);
            let exact = d.eval(&at(y)).unwrap();
            let scale = exact.abs().max(e.eval(&at(y)).unwrap().abs()).max(1.0);
            prop_assert!((exact - fd).abs() <= 1e-6 * scale, "{}: {} vs {}", SMOOTH[idx], exact, fd);
        }

        #[test]
        fn print_then_parse_is_pointwise_identity(
            idx in 0..SMOOTH.len(),
            y in -2.0..2.0f64, x1 in -2.0..2.0f64, x2 in -2.0..2.0f64, yd in -2.0..2.0f64,
        ) {
            let e = parse(SMOOTH[idx]);
            for expr in [e.clone(), e.diff_y(), e.diff_y().diff_y()] {
                let back = parse(&expr.to_string());
                let p = Point::new([x1, x2], y, yd);
                let (a, b) = (expr.eval(&p).unwrap(), back.eval(&p).unwrap());
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
            }
        }
    }
}
