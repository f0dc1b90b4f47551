use super::{Func, Node};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    End,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn next(&mut self) -> Result<(Tok, usize)> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = bytes.get(self.pos) else {
            return Ok((Tok::End, start));
        };
        if c.is_ascii_digit() || c == b'.' {
            let mut end = self.pos;
            while end < bytes.len() && (bytes[end].is_ascii_digit() || bytes[end] == b'.') {
                end += 1;
            }
            if end < bytes.len() && (bytes[end] == b'e' || bytes[end] == b'E') {
                let mut exp_end = end + 1;
                if exp_end < bytes.len() && (bytes[exp_end] == b'+' || bytes[exp_end] == b'-') {
                    exp_end += 1;
                }
                let digits_start = exp_end;
                while exp_end < bytes.len() && bytes[exp_end].is_ascii_digit() {
                    exp_end += 1;
                }
                if exp_end > digits_start {
                    end = exp_end;
                }
            }
            let text = &self.src[start..end];
            let value: f64 = text.parse().map_err(|_| Error::Syntax {
                offset: start,
                message: format!("malformed number `{text}`"),
            })?;
            self.pos = end;
            return Ok((Tok::Num(value), start));
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let mut end = self.pos;
            while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
                end += 1;
            }
            self.pos = end;
            return Ok((Tok::Ident(self.src[start..end].to_string()), start));
        }
        self.pos += 1;
        let tok = match c {
            b'+' | b'-' | b'*' | b'/' | b'^' => Tok::Op(c as char),
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            _ => {
                // step over the full UTF-8 character for the message
                let ch = self.src[start..].chars().next().unwrap_or('?');
                return Err(Error::Syntax {
                    offset: start,
                    message: format!("unexpected character `{ch}`"),
                });
            }
        };
        Ok((tok, start))
    }
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    tok: Tok,
    at: usize,
    dim: usize,
}

pub(super) fn parse(text: &str, dim: usize) -> Result<Node> {
    if text.trim().is_empty() {
        return Err(Error::Syntax {
            offset: 0,
            message: "empty expression".into(),
        });
    }
    let mut p = Parser {
        lexer: Lexer { src: text, pos: 0 },
        tok: Tok::End,
        at: 0,
        dim,
    };
    p.advance()?;
    let node = p.expr()?;
    if p.tok != Tok::End {
        return Err(p.unexpected());
    }
    Ok(node)
}

impl Parser<'_> {
    fn advance(&mut self) -> Result<()> {
        let (tok, at) = self.lexer.next()?;
        self.tok = tok;
        self.at = at;
        Ok(())
    }

    fn unexpected(&self) -> Error {
        let message = match &self.tok {
            Tok::End => "unexpected end of input".to_string(),
            t => format!("unexpected token {t:?}"),
        };
        Error::Syntax {
            offset: self.at,
            message,
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Tok::Op(op @ ('+' | '-')) = self.tok {
            self.advance()?;
            let rhs = self.term()?;
            lhs = if op == '+' {
                Node::Add(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Tok::Op(op @ ('*' | '/')) = self.tok {
            self.advance()?;
            let rhs = self.unary()?;
            lhs = if op == '*' {
                Node::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                Node::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        match self.tok {
            Tok::Op('-') => {
                self.advance()?;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Tok::Op('+') => {
                self.advance()?;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node> {
        let mut base = self.primary()?;
        while self.tok == Tok::Op('^') {
            self.advance()?;
            let at = self.at;
            let exponent = self.exponent()?;
            let value = if exponent.max_var().is_none() { exponent.eval_tree(&[]).ok() } else { None };
            let p = match value {
                Some(v) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => v as i32,
                _ => {
                    return Err(Error::Syntax {
                        offset: at,
                        message: "exponent must be a constant integer".into(),
                    })
                }
            };
            base = Node::Pow(Box::new(base), p);
        }
        Ok(base)
    }

    fn exponent(&mut self) -> Result<Node> {
        match self.tok {
            Tok::Op('-') => {
                self.advance()?;
                Ok(Node::Neg(Box::new(self.exponent()?)))
            }
            Tok::Op('+') => {
                self.advance()?;
                self.exponent()
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Node> {
        let at = self.at;
        match self.tok.clone() {
            Tok::Num(v) => {
                self.advance()?;
                Ok(Node::Const(v))
            }
            Tok::LParen => {
                self.advance()?;
                let inner = self.expr()?;
                if self.tok != Tok::RParen {
                    return Err(self.unexpected());
                }
                self.advance()?;
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.advance()?;
                if let Some(func) = Func::from_name(&name) {
                    if self.tok != Tok::LParen {
                        return Err(Error::Syntax {
                            offset: self.at,
                            message: format!("expected `(` after `{name}`"),
                        });
                    }
                    self.advance()?;
                    let arg = self.expr()?;
                    if self.tok != Tok::RParen {
                        return Err(self.unexpected());
                    }
                    self.advance()?;
                    return Ok(Node::Call(func, Box::new(arg)));
                }
                if name == "pi" {
                    return Ok(Node::Const(std::f64::consts::PI));
                }
                if let Some(digits) = name.strip_prefix('x') {
                    if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                        let index: usize = digits.parse().unwrap_or(usize::MAX);
                        if index == 0 || index > self.dim {
                            return Err(Error::VariableOutOfRange {
                                index,
                                dim: self.dim,
                                offset: at,
                            });
                        }
                        return Ok(Node::Var(index - 1));
                    }
                }
                Err(Error::UnknownIdentifier { name, offset: at })
            }
            _ => Err(self.unexpected()),
        }
    }
}
