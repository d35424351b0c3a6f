//! Expression language for scalar fields on phase space.
//!
//! Pipeline: [`lex`] -> [`parse`] -> [`compile`], producing a
//! [`ScalarField`](crate::field::ScalarField) that evaluates values, gradients,
//! and Hessians by second-order forward-mode differentiation. Variables are
//! `t` plus `q1..qn, p1..pn` in phase space or `a1..an, b1..bn` in
//! generating-function space (for n = 1 the bare names `q, p, a, b` are
//! accepted as aliases). Available functions: `sin, cos, exp, log, sqrt`.

pub mod ast;
pub mod lexer;
pub mod parser;
pub(crate) mod tape;

pub use ast::{BinOp, ExprAst, Func};
pub use lexer::{lex, Token, TokenKind};
pub use parser::parse;

use crate::error::Result;
use crate::field::{ScalarField, VarSpace};

/// Lex + parse in one call.
pub fn parse_str(source: &str) -> Result<ExprAst> {
    parse(&lex(source)?)
}

/// Compiles an expression tree against a variable space of dimension `n`.
pub fn compile(ast: &ExprAst, n: usize, space: VarSpace) -> Result<ScalarField> {
    ScalarField::compile(ast, n, space)
}

/// Convenience: lex, parse, and compile a source string.
pub fn compile_str(source: &str, n: usize, space: VarSpace) -> Result<ScalarField> {
    let ast = parse_str(source)?;
    ScalarField::compile(&ast, n, space)
}
