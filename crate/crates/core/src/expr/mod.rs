//! Arithmetic expressions over the coordinates `x1..xn`.
//!
//! Expressions define vector-field coefficients, density weights and test
//! functions in configuration files. They are immutable after construction,
//! evaluate through a compiled postfix program, and differentiate exactly.
//!
//! Grammar (highest precedence first): `^` with a constant integer exponent,
//! unary `-`, then `*` `/`, then `+` `-`. Binary operators of equal precedence
//! associate to the left. Functions: `sin cos exp log sqrt abs sign`.

mod diff;
mod eval;
mod parse;

use std::fmt;
use std::ops;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use eval::Program;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    /// Derivative of `abs`; undefined at zero.
    Sign,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Sign => "sign",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "sign" => Func::Sign,
            _ => return None,
        })
    }

    pub(crate) fn apply(self, u: f64) -> Result<f64> {
        match self {
            Func::Sin => Ok(u.sin()),
            Func::Cos => Ok(u.cos()),
            Func::Exp => Ok(u.exp()),
            Func::Log if u <= 0.0 => Err(Error::Domain(format!("log of non-positive value {u}"))),
            Func::Log => Ok(u.ln()),
            Func::Sqrt if u < 0.0 => Err(Error::Domain(format!("sqrt of negative value {u}"))),
            Func::Sqrt => Ok(u.sqrt()),
            Func::Abs => Ok(u.abs()),
            Func::Sign if u == 0.0 => Err(Error::Domain("sign (derivative of abs) at 0".into())),
            Func::Sign => Ok(u.signum()),
        }
    }
}

/// Expression tree. Variables are stored 0-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, i32),
    Call(Func, Box<Node>),
}

impl Node {
    fn max_var(&self) -> Option<usize> {
        match self {
            Node::Const(_) => None,
            Node::Var(i) => Some(*i),
            Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => a.max_var(),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                match (a.max_var(), b.max_var()) {
                    (Some(p), Some(q)) => Some(p.max(q)),
                    (p, q) => p.or(q),
                }
            }
        }
    }

    pub(crate) fn eval_tree(&self, x: &[f64]) -> Result<f64> {
        Ok(match self {
            Node::Const(c) => *c,
            Node::Var(i) => x[*i],
            Node::Neg(a) => -a.eval_tree(x)?,
            Node::Add(a, b) => a.eval_tree(x)? + b.eval_tree(x)?,
            Node::Sub(a, b) => a.eval_tree(x)? - b.eval_tree(x)?,
            Node::Mul(a, b) => a.eval_tree(x)? * b.eval_tree(x)?,
            Node::Div(a, b) => {
                let num = a.eval_tree(x)?;
                let den = b.eval_tree(x)?;
                if den == 0.0 {
                    return Err(Error::Domain("division by zero".into()));
                }
                num / den
            }
            Node::Pow(a, p) => eval::powi(a.eval_tree(x)?, *p)?,
            Node::Call(f, a) => f.apply(a.eval_tree(x)?)?,
        })
    }

    // Smart constructors with constant folding of trivial identities.

    pub(crate) fn add(a: Node, b: Node) -> Node {
        match (&a, &b) {
            (Node::Const(p), Node::Const(q)) => Node::Const(p + q),
            (Node::Const(z), _) if *z == 0.0 => b,
            (_, Node::Const(z)) if *z == 0.0 => a,
            _ => Node::Add(Box::new(a), Box::new(b)),
        }
    }

    pub(crate) fn sub(a: Node, b: Node) -> Node {
        match (&a, &b) {
            (Node::Const(p), Node::Const(q)) => Node::Const(p - q),
            (_, Node::Const(z)) if *z == 0.0 => a,
            (Node::Const(z), _) if *z == 0.0 => Node::neg(b),
            _ => Node::Sub(Box::new(a), Box::new(b)),
        }
    }

    pub(crate) fn mul(a: Node, b: Node) -> Node {
        match (&a, &b) {
            (Node::Const(p), Node::Const(q)) => Node::Const(p * q),
            (Node::Const(z), _) | (_, Node::Const(z)) if *z == 0.0 => Node::Const(0.0),
            (Node::Const(o), _) if *o == 1.0 => b,
            (_, Node::Const(o)) if *o == 1.0 => a,
            _ => Node::Mul(Box::new(a), Box::new(b)),
        }
    }

    pub(crate) fn div(a: Node, b: Node) -> Node {
        match (&a, &b) {
            (Node::Const(z), _) if *z == 0.0 => Node::Const(0.0),
            (_, Node::Const(o)) if *o == 1.0 => a,
            _ => Node::Div(Box::new(a), Box::new(b)),
        }
    }

    pub(crate) fn neg(a: Node) -> Node {
        match a {
            Node::Const(c) => Node::Const(-c),
            Node::Neg(inner) => *inner,
            other => Node::Neg(Box::new(other)),
        }
    }

    pub(crate) fn pow(a: Node, p: i32) -> Node {
        match (p, &a) {
            (0, _) => Node::Const(1.0),
            (1, _) => a,
            (_, Node::Const(c)) if p > 0 => Node::Const(c.powi(p)),
            _ => Node::Pow(Box::new(a), p),
        }
    }

    pub(crate) fn call(f: Func, a: Node) -> Node {
        Node::Call(f, Box::new(a))
    }

    fn substitute(&self, repl: &[Node]) -> Node {
        match self {
            Node::Const(c) => Node::Const(*c),
            Node::Var(i) => repl[*i].clone(),
            Node::Neg(a) => Node::neg(a.substitute(repl)),
            Node::Add(a, b) => Node::add(a.substitute(repl), b.substitute(repl)),
            Node::Sub(a, b) => Node::sub(a.substitute(repl), b.substitute(repl)),
            Node::Mul(a, b) => Node::mul(a.substitute(repl), b.substitute(repl)),
            Node::Div(a, b) => Node::div(a.substitute(repl), b.substitute(repl)),
            Node::Pow(a, p) => Node::pow(a.substitute(repl), *p),
            Node::Call(f, a) => Node::call(*f, a.substitute(repl)),
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Const(c) if *c < 0.0 => write!(f, "({c:?})"),
            Node::Const(c) => write!(f, "{c:?}"),
            Node::Var(i) => write!(f, "x{}", i + 1),
            Node::Neg(a) => write!(f, "(-{a})"),
            Node::Add(a, b) => write!(f, "({a} + {b})"),
            Node::Sub(a, b) => write!(f, "({a} - {b})"),
            Node::Mul(a, b) => write!(f, "({a} * {b})"),
            Node::Div(a, b) => write!(f, "({a} / {b})"),
            Node::Pow(a, p) if *p < 0 => write!(f, "({a}^(-{}))", -(*p as i64)),
            Node::Pow(a, p) => write!(f, "({a}^{p})"),
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// A parsed expression in `dim` variables.
#[derive(Clone)]
pub struct Expr {
    dim: usize,
    root: Arc<Node>,
    program: Arc<Program>,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({})", self.root)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)
    }
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.root == other.root
    }
}

impl Expr {
    /// Parses `text` as an expression in the variables `x1..x{dim}`.
    pub fn parse(text: &str, dim: usize) -> Result<Expr> {
        let root = parse::parse(text, dim)?;
        Ok(Expr::from_node(root, dim))
    }

    pub fn from_node(root: Node, dim: usize) -> Expr {
        if let Some(v) = root.max_var() {
            assert!(v < dim, "variable x{} outside dimension {dim}", v + 1);
        }
        let program = Program::compile(&root);
        Expr {
            dim,
            root: Arc::new(root),
            program: Arc::new(program),
        }
    }

    pub fn constant(c: f64, dim: usize) -> Expr {
        Expr::from_node(Node::Const(c), dim)
    }

    /// The coordinate function `x{axis+1}`.
    pub fn var(axis: usize, dim: usize) -> Expr {
        Expr::from_node(Node::Var(axis), dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self) -> &Node {
        &self.root
    }

    /// Returns the constant value if the expression has no variables.
    pub fn as_constant(&self) -> Option<f64> {
        match *self.root {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_constant() == Some(0.0)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: x.len(),
            });
        }
        let v = self.program.run(x, &self.root)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite)
        }
    }

    /// Exact partial derivative with respect to `x{axis+1}`.
    pub fn differentiate(&self, axis: usize) -> Result<Expr> {
        if axis >= self.dim {
            return Err(Error::VariableOutOfRange {
                index: axis + 1,
                dim: self.dim,
                offset: 0,
            });
        }
        Ok(Expr::from_node(diff::derivative(&self.root, axis), self.dim))
    }

    pub fn gradient(&self) -> Vec<Expr> {
        (0..self.dim)
            .map(|k| Expr::from_node(diff::derivative(&self.root, k), self.dim))
            .collect()
    }

    /// Replaces every variable `x_i` by `repl[i]`; the result lives in the
    /// dimension of the replacements.
    pub fn substitute(&self, repl: &[Expr]) -> Result<Expr> {
        if repl.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: repl.len(),
            });
        }
        let dim = repl.first().map(Expr::dim).unwrap_or(0);
        if repl.iter().any(|r| r.dim != dim) {
            return Err(Error::invalid("substitution expressions differ in dimension"));
        }
        let nodes: Vec<Node> = repl.iter().map(|r| (*r.root).clone()).collect();
        Ok(Expr::from_node(self.root.substitute(&nodes), dim))
    }

    pub fn scale(&self, c: f64) -> Expr {
        Expr::from_node(Node::mul(Node::Const(c), (*self.root).clone()), self.dim)
    }

    fn binary(&self, rhs: &Expr, op: fn(Node, Node) -> Node) -> Expr {
        assert_eq!(self.dim, rhs.dim, "expression dimensions differ");
        Expr::from_node(op((*self.root).clone(), (*rhs.root).clone()), self.dim)
    }
}

impl ops::Add for &Expr {
    type Output = Expr;
    fn add(self, rhs: &Expr) -> Expr {
        self.binary(rhs, Node::add)
    }
}

impl ops::Sub for &Expr {
    type Output = Expr;
    fn sub(self, rhs: &Expr) -> Expr {
        self.binary(rhs, Node::sub)
    }
}

impl ops::Mul for &Expr {
    type Output = Expr;
    fn mul(self, rhs: &Expr) -> Expr {
        self.binary(rhs, Node::mul)
    }
}

impl ops::Div for &Expr {
    type Output = Expr;
    fn div(self, rhs: &Expr) -> Expr {
        self.binary(rhs, Node::div)
    }
}

impl ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::from_node(Node::neg((*self.root).clone()), self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(text: &str, n: usize, x: &[f64]) -> Result<f64> {
        Expr::parse(text, n)?.eval(x)
    }

    #[test]
    fn evaluates_examples() {
        assert_eq!(ev("x1^2", 1, &[3.0]).unwrap(), 9.0);
        assert_eq!(ev("-x2/2", 3, &[1.0, 4.0, 0.0]).unwrap(), -2.0);
        assert_eq!(ev("sin(x1)*x3", 3, &[0.0, 7.0, 5.0]).unwrap(), 0.0);
        assert_eq!(ev("x1*x2", 2, &[2.0, 3.0]).unwrap(), 6.0);
        assert_eq!(ev("exp(0*x1)", 1, &[5.0]).unwrap(), 1.0);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(ev("1/x1", 1, &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(ev("log(x1)", 1, &[-1.0]), Err(Error::Domain(_))));
        assert!(matches!(ev("sqrt(x1)", 1, &[-1.0]), Err(Error::Domain(_))));
        assert!(matches!(ev("x1^(-1)", 1, &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(ev("exp(x1)", 1, &[1e6]), Err(Error::NonFinite)));
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("-x1^2", 1, &[3.0]).unwrap(), -9.0);
        assert_eq!(ev("2*3^2", 0, &[]).unwrap(), 18.0);
        assert_eq!(ev("8/4/2", 0, &[]).unwrap(), 1.0);
        assert_eq!(ev("1-2-3", 0, &[]).unwrap(), -4.0);
        assert_eq!(ev("2^3^2", 0, &[]).unwrap(), 64.0);
        assert_eq!(ev("2^-2", 0, &[]).unwrap(), 0.25);
        assert_eq!(ev("-2*-3", 0, &[]).unwrap(), 6.0);
        assert_eq!(ev("1 + 2 * 3 - 4 / 2", 0, &[]).unwrap(), 5.0);
    }

    #[test]
    fn derivative_examples() {
        let e = Expr::parse("x1^2", 1).unwrap();
        assert_eq!(e.differentiate(0).unwrap().eval(&[3.0]).unwrap(), 6.0);
        let e = Expr::parse("x1", 2).unwrap();
        assert!(e.differentiate(1).unwrap().is_zero());
        let e = Expr::parse("sin(x1)", 1).unwrap();
        assert_eq!(e.differentiate(0).unwrap().eval(&[0.0]).unwrap(), 1.0);
        assert!(e.differentiate(1).is_err());
    }

    #[test]
    fn abs_derivative_is_sign_with_error_at_zero() {
        let d = Expr::parse("abs(x1)", 1).unwrap().differentiate(0).unwrap();
        assert_eq!(d.eval(&[-2.0]).unwrap(), -1.0);
        assert_eq!(d.eval(&[0.5]).unwrap(), 1.0);
        assert!(matches!(d.eval(&[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn substitution_and_arithmetic() {
        let e = Expr::parse("x1*x2", 2).unwrap();
        let a = Expr::parse("x1 + 1", 1).unwrap();
        let b = Expr::parse("2*x1", 1).unwrap();
        let s = e.substitute(&[a, b]).unwrap();
        assert_eq!(s.dim(), 1);
        assert_eq!(s.eval(&[3.0]).unwrap(), 24.0);
        let x = Expr::var(0, 1);
        let y = &(&x * &x) - &Expr::constant(1.0, 1);
        assert_eq!(y.eval(&[2.0]).unwrap(), 3.0);
        assert_eq!((-&y).eval(&[2.0]).unwrap(), -3.0);
        assert_eq!(y.scale(2.0).eval(&[2.0]).unwrap(), 6.0);
    }

    #[test]
    fn display_round_trip() {
        for text in ["-x1^2 + 3*x2", "x1^(-3)", "sqrt(abs(x1)) / (1 + x2)", "-2.5e-3*exp(-x1)"] {
            let e = Expr::parse(text, 2).unwrap();
            let again = Expr::parse(&e.to_string(), 2).unwrap();
            let x = [0.7, -1.3];
            assert_eq!(e.eval(&x).unwrap(), again.eval(&x).unwrap(), "{text}");
        }
    }
}
