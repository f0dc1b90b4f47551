use super::{Func, Node};
use crate::error::{Error, Result};

const STACK: usize = 48;

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Var(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow(i32),
    Call(Func),
}

/// Postfix form of an expression tree.
#[derive(Debug, Clone)]
pub struct Program {
    ops: Vec<Op>,
    depth: usize,
}

pub(crate) fn powi(u: f64, p: i32) -> Result<f64> {
    if p < 0 && u == 0.0 {
        return Err(Error::Domain("division by zero in negative power".into()));
    }
    Ok(u.powi(p))
}

impl Program {
    pub(crate) fn compile(root: &Node) -> Program {
        let mut ops = Vec::new();
        let depth = emit(root, &mut ops);
        Program { ops, depth }
    }

    pub(crate) fn run(&self, x: &[f64], root: &Node) -> Result<f64> {
        if self.depth > STACK {
            return root.eval_tree(x);
        }
        let mut stack = [0.0f64; STACK];
        let mut sp = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(c) => {
                    stack[sp] = c;
                    sp += 1;
                }
                Op::Var(i) => {
                    stack[sp] = x[i];
                    sp += 1;
                }
                Op::Neg => stack[sp - 1] = -stack[sp - 1],
                Op::Pow(p) => stack[sp - 1] = powi(stack[sp - 1], p)?,
                Op::Call(f) => stack[sp - 1] = f.apply(stack[sp - 1])?,
                Op::Add | Op::Sub | Op::Mul | Op::Div => {
                    sp -= 1;
                    let b = stack[sp];
                    let a = stack[sp - 1];
                    stack[sp - 1] = match *op {
                        Op::Add => a + b,
                        Op::Sub => a - b,
                        Op::Mul => a * b,
                        _ => {
                            if b == 0.0 {
                                return Err(Error::Domain("division by zero".into()));
                            }
                            a / b
                        }
                    };
                }
            }
        }
        Ok(stack[0])
    }
}

/// Emits postfix ops and returns the stack depth needed.
fn emit(node: &Node, ops: &mut Vec<Op>) -> usize {
    match node {
        Node::Const(c) => {
            ops.push(Op::Const(*c));
            1
        }
        Node::Var(i) => {
            ops.push(Op::Var(*i));
            1
        }
        Node::Neg(a) => {
            let d = emit(a, ops);
            ops.push(Op::Neg);
            d
        }
        Node::Pow(a, p) => {
            let d = emit(a, ops);
            ops.push(Op::Pow(*p));
            d
        }
        Node::Call(f, a) => {
            let d = emit(a, ops);
            ops.push(Op::Call(*f));
            d
        }
        Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
            let da = emit(a, ops);
            let db = emit(b, ops);
            ops.push(match node {
                Node::Add(..) => Op::Add,
                Node::Sub(..) => Op::Sub,
                Node::Mul(..) => Op::Mul,
                _ => Op::Div,
            });
            da.max(db + 1)
        }
    }
}
