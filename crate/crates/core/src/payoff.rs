//! Payoff expressions over a price path.
//!
//! Grammar:
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | primary
//! primary := number | var | func '(' expr (',' expr)* ')' | '(' expr ')'
//! var     := 'x' '[' index ']' '[' index ']'   (period, asset; 1-based)
//!          | 'x'                               (scalar mode only)
//! index   := integer | 't'                     ('t' only inside avg_t)
//! func    := abs | min | max | pow | avg_t
//! ```
//!
//! `avg_t(e)` averages `e` over `t = 1..N`, with `t` bound in `e`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    /// Fixed (period, asset), zero-based.
    Var(usize, usize),
    /// Period bound by the enclosing `avg_t`, zero-based asset.
    VarT(usize),
    Scalar,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Abs(Box<Node>),
    Min(Vec<Node>),
    Max(Vec<Node>),
    Pow(Box<Node>, Box<Node>),
    AvgT(Box<Node>),
}

/// A parsed payoff expression, checked against the path dimensions.
#[derive(Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
    periods: usize,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl Expr {
    /// Parses a path payoff for `periods` maturities and `assets` assets.
    pub fn parse(src: &str, periods: usize, assets: usize) -> Result<Self> {
        let root = Parser::new(src, periods, assets, false).parse_all()?;
        Ok(Self {
            source: src.to_string(),
            root,
            periods,
        })
    }

    /// Parses a one-dimensional function of the scalar variable `x`.
    pub fn parse_scalar(src: &str) -> Result<Self> {
        let root = Parser::new(src, 0, 0, true).parse_all()?;
        Ok(Self {
            source: src.to_string(),
            root,
            periods: 0,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Evaluates on a path laid out period-major: `x[t * d + i]`.
    pub fn eval(&self, path: &[f64], assets: usize) -> f64 {
        eval(&self.root, path, assets, self.periods, None, 0.0)
    }

    pub fn eval_scalar(&self, x: f64) -> f64 {
        eval(&self.root, &[], 0, 0, None, x)
    }
}

fn eval(node: &Node, x: &[f64], d: usize, n: usize, t: Option<usize>, s: f64) -> f64 {
    let ev = |e: &Node| eval(e, x, d, n, t, s);
    match node {
        Node::Num(v) => *v,
        Node::Var(p, i) => x[p * d + i],
        Node::VarT(i) => x[t.expect("avg_t binds t") * d + i],
        Node::Scalar => s,
        Node::Neg(a) => -ev(a),
        Node::Add(a, b) => ev(a) + ev(b),
        Node::Sub(a, b) => ev(a) - ev(b),
        Node::Mul(a, b) => ev(a) * ev(b),
        Node::Div(a, b) => ev(a) / ev(b),
        Node::Abs(a) => ev(a).abs(),
        Node::Min(args) => args.iter().map(ev).fold(f64::INFINITY, f64::min),
        Node::Max(args) => args.iter().map(ev).fold(f64::NEG_INFINITY, f64::max),
        Node::Pow(a, b) => ev(a).powf(ev(b)),
        Node::AvgT(a) => {
            (0..n).map(|p| eval(a, x, d, n, Some(p), s)).sum::<f64>() / n as f64
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    periods: usize,
    assets: usize,
    scalar: bool,
    in_avg: bool,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, periods: usize, assets: usize, scalar: bool) -> Self {
        Self {
            src: src.as_bytes(),
            pos: 0,
            periods,
            assets,
            scalar,
            in_avg: false,
        }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::PayoffParseError {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected '{}'", c as char))
        }
    }

    fn parse_all(mut self) -> Result<Node> {
        let node = self.expr()?;
        if self.peek().is_some() {
            return self.err("unexpected trailing input");
        }
        Ok(node)
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.primary()
    }

    fn ident(&mut self) -> &'a str {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("")
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let exp_sign = (c == b'+' || c == b'-')
                && self.pos > start
                && matches!(self.src[self.pos - 1], b'e' | b'E');
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        match text.parse::<f64>() {
            Ok(v) => Ok(Node::Num(v)),
            Err(_) => {
                self.pos = start;
                self.err(format!("invalid number '{text}'"))
            }
        }
    }

    fn primary(&mut self) -> Result<Node> {
        match self.peek() {
            None => self.err("unexpected end of input"),
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                let name = self.ident();
                if name == "x" {
                    return self.variable(start);
                }
                self.call(name, start)
            }
            Some(c) => self.err(format!("unexpected character '{}'", c as char)),
        }
    }

    fn index(&mut self, bound: usize, what: &str) -> Result<Option<usize>> {
        self.expect(b'[')?;
        self.skip_ws();
        let start = self.pos;
        let idx = if self.src.get(self.pos) == Some(&b't') {
            self.pos += 1;
            if what != "period" || !self.in_avg {
                self.pos = start;
                return self.err("index 't' is only valid as a period inside avg_t");
            }
            None
        } else {
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
            let v: usize = match text.parse() {
                Ok(v) => v,
                Err(_) => return self.err(format!("expected {what} index")),
            };
            if v == 0 || v > bound {
                self.pos = start;
                return self.err(format!("{what} index {v} out of range 1..={bound}"));
            }
            Some(v - 1)
        };
        self.expect(b']')?;
        Ok(idx)
    }

    fn variable(&mut self, start: usize) -> Result<Node> {
        if self.scalar {
            return Ok(Node::Scalar);
        }
        if self.peek() != Some(b'[') {
            self.pos = start;
            return self.err("path variables are written x[t][i]");
        }
        let period = self.index(self.periods, "period")?;
        let asset = self.index(self.assets, "asset")?.expect("asset index is numeric");
        Ok(match period {
            Some(p) => Node::Var(p, asset),
            None => Node::VarT(asset),
        })
    }

    fn args(&mut self) -> Result<Vec<Node>> {
        self.expect(b'(')?;
        let mut out = vec![self.expr()?];
        while self.peek() == Some(b',') {
            self.pos += 1;
            out.push(self.expr()?);
        }
        self.expect(b')')?;
        Ok(out)
    }

    fn call(&mut self, name: &str, start: usize) -> Result<Node> {
        let arity = |p: &Parser, args: &Vec<Node>, n: usize| -> Result<()> {
            if args.len() == n {
                Ok(())
            } else {
                Err(Error::PayoffParseError {
                    pos: p.pos,
                    msg: format!("{name} takes {n} argument(s), got {}", args.len()),
                })
            }
        };
        match name {
            "abs" => {
                let mut a = self.args()?;
                arity(self, &a, 1)?;
                Ok(Node::Abs(Box::new(a.remove(0))))
            }
            "min" => Ok(Node::Min(self.args()?)),
            "max" => Ok(Node::Max(self.args()?)),
            "pow" => {
                let mut a = self.args()?;
                arity(self, &a, 2)?;
                let e = a.remove(1);
                Ok(Node::Pow(Box::new(a.remove(0)), Box::new(e)))
            }
            "avg_t" => {
                if self.scalar {
                    self.pos = start;
                    return self.err("avg_t is not available for scalar functions");
                }
                if self.in_avg {
                    self.pos = start;
                    return self.err("avg_t cannot be nested");
                }
                self.in_avg = true;
                let a = self.args();
                self.in_avg = false;
                let mut a = a?;
                arity(self, &a, 1)?;
                Ok(Node::AvgT(Box::new(a.remove(0))))
            }
            _ => {
                self.pos = start;
                self.err(format!("unknown function '{name}'"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, n: usize, d: usize, path: &[f64]) -> f64 {
        Expr::parse(src, n, d).unwrap().eval(path, d)
    }

    #[test]
    fn examples() {
        assert_eq!(ev("x[2][1]-x[1][1]", 2, 1, &[0.0, 1.0]), 1.0);
        assert_eq!(ev("max(x[1][1],x[2][1],x[3][1])", 3, 1, &[1.0, 3.0, 2.0]), 3.0);
        assert_eq!(ev("abs(x[2][1]-x[2][2])", 2, 2, &[0.0, 0.0, 5.0, 3.0]), 2.0);
    }

    #[test]
    fn precedence_and_functions() {
        assert_eq!(ev("1 + 2 * 3 - 4 / 2", 1, 1, &[0.0]), 5.0);
        assert_eq!(ev("-(1 + 2) * -2", 1, 1, &[0.0]), 6.0);
        assert_eq!(ev("pow(x[1][1], 2) + min(3, 1.5e0)", 1, 1, &[3.0]), 10.5);
        assert_eq!(ev("max(avg_t(x[t][1]) - 1, 0)", 3, 1, &[1.0, 2.0, 6.0]), 2.0);
        assert_eq!(ev("avg_t(x[t][1] * x[t][2])", 2, 2, &[1.0, 2.0, 3.0, 4.0]), 7.0);
        assert_eq!(ev("2.5e-1 * 4", 1, 1, &[0.0]), 1.0);
    }

    #[test]
    fn scalar_mode() {
        let e = Expr::parse_scalar("abs(x) + 1").unwrap();
        assert_eq!(e.eval_scalar(-2.0), 3.0);
        assert!(Expr::parse_scalar("x[1][1]").is_err());
    }

    #[test]
    fn parse_errors() {
        for bad in [
            "x[3][1]",
            "x[0][1]",
            "x[1][2]",
            "x[t][1]",
            "avg_t(avg_t(x[t][1]))",
            "foo(1)",
            "abs(1, 2)",
            "1 +",
            "(1",
            "x",
            "1 2",
        ] {
            assert!(
                matches!(Expr::parse(bad, 2, 1), Err(Error::PayoffParseError { .. })),
                "{bad} should fail"
            );
        }
    }
}
