//! Recursive-descent parser.
//!
//! Grammar (highest precedence last):
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | ident | ident '(' expr ')' | '(' expr ')'
//! ```
//!
//! `+ - * /` are left-associative, `^` is right-associative, and unary minus
//! binds looser than `^`, so `-q1^2` means `-(q1^2)` while `2^-3` is legal.

use super::ast::{BinOp, ExprAst, Func};
use super::lexer::{Token, TokenKind};
use crate::error::{Error, Result};

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    source_len: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn next_offset(&self) -> usize {
        self.peek().map(|t| t.offset).unwrap_or(self.source_len)
    }

    fn bump(&mut self) -> Option<&'a Token> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, kind: TokenKind) -> bool {
        if self.peek().map(|t| t.kind) == Some(kind) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, kind: TokenKind, what: &str) -> Result<&'a Token> {
        match self.peek() {
            Some(t) if t.kind == kind => {
                self.pos += 1;
                Ok(t)
            }
            Some(t) => Err(Error::Parse {
                offset: t.offset,
                message: format!("expected {what}, found {:?}", t.text),
            }),
            None => Err(Error::Parse {
                offset: self.source_len,
                message: format!("expected {what}, found end of input"),
            }),
        }
    }

    fn expr(&mut self) -> Result<ExprAst> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().map(|t| t.kind) {
                Some(TokenKind::Plus) => BinOp::Add,
                Some(TokenKind::Minus) => BinOp::Sub,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = ExprAst::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<ExprAst> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().map(|t| t.kind) {
                Some(TokenKind::Star) => BinOp::Mul,
                Some(TokenKind::Slash) => BinOp::Div,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = ExprAst::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<ExprAst> {
        if self.eat(TokenKind::Minus) {
            return Ok(ExprAst::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<ExprAst> {
        let base = self.atom()?;
        if self.eat(TokenKind::Caret) {
            let exponent = self.unary()?;
            return Ok(ExprAst::Bin(
                BinOp::Pow,
                Box::new(base),
                Box::new(exponent),
            ));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<ExprAst> {
        let offset = self.next_offset();
        let Some(token) = self.bump() else {
            return Err(Error::Parse {
                offset,
                message: "expected expression, found end of input".to_string(),
            });
        };
        match token.kind {
            TokenKind::Number => {
                let value: f64 = token.text.parse().map_err(|_| Error::Parse {
                    offset: token.offset,
                    message: format!("invalid number literal {:?}", token.text),
                })?;
                Ok(ExprAst::Const(value))
            }
            TokenKind::Ident => {
                if self.eat(TokenKind::LParen) {
                    let func = Func::from_name(&token.text).ok_or_else(|| Error::Parse {
                        offset: token.offset,
                        message: format!(
                            "unknown function {:?} (available: sin, cos, exp, log, sqrt)",
                            token.text
                        ),
                    })?;
                    let arg = self.expr()?;
                    self.expect(TokenKind::RParen, "')'")?;
                    Ok(ExprAst::Call(func, Box::new(arg)))
                } else {
                    Ok(ExprAst::Var(token.text.clone()))
                }
            }
            TokenKind::LParen => {
                let inner = self.expr()?;
                self.expect(TokenKind::RParen, "')'")?;
                Ok(inner)
            }
            _ => Err(Error::Parse {
                offset: token.offset,
                message: format!("expected expression, found {:?}", token.text),
            }),
        }
    }
}

/// Parses a token stream produced by [`super::lexer::lex`].
pub fn parse(tokens: &[Token]) -> Result<ExprAst> {
    let source_len = tokens
        .last()
        .map(|t| t.offset + t.text.len())
        .unwrap_or(0);
    let mut parser = Parser {
        tokens,
        pos: 0,
        source_len,
    };
    let ast = parser.expr()?;
    if let Some(extra) = parser.peek() {
        return Err(Error::Parse {
            offset: extra.offset,
            message: format!("unexpected trailing input starting at {:?}", extra.text),
        });
    }
    Ok(ast)
}
