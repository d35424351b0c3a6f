//! Expression syntax tree, pretty printer, and programmatic builders.
//!
//! The printer emits text that re-parses to a structurally identical tree
//! (round-trip property), provided the tree lies in the parser's image: the
//! parser never produces negative or non-finite literals (a leading `-` is
//! always a `Neg` node), so builders that want `-2 * q1` should write
//! `-(ExprAst::constant(2.0) * ExprAst::var("q1"))`.

use std::fmt;

/// Binary operators, in increasing precedence: `+ -` < `* /` < `^`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// The function catalog callable from expressions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }
}

/// Expression tree over named variables.
#[derive(Debug, Clone, PartialEq)]
pub enum ExprAst {
    Const(f64),
    Var(String),
    Neg(Box<ExprAst>),
    Call(Func, Box<ExprAst>),
    Bin(BinOp, Box<ExprAst>, Box<ExprAst>),
}

impl ExprAst {
    pub fn constant(v: f64) -> ExprAst {
        ExprAst::Const(v)
    }

    pub fn var(name: impl Into<String>) -> ExprAst {
        ExprAst::Var(name.into())
    }

    pub fn pow(self, exponent: ExprAst) -> ExprAst {
        ExprAst::Bin(BinOp::Pow, Box::new(self), Box::new(exponent))
    }

    pub fn sin(x: ExprAst) -> ExprAst {
        ExprAst::Call(Func::Sin, Box::new(x))
    }

    pub fn cos(x: ExprAst) -> ExprAst {
        ExprAst::Call(Func::Cos, Box::new(x))
    }

    pub fn exp(x: ExprAst) -> ExprAst {
        ExprAst::Call(Func::Exp, Box::new(x))
    }

    pub fn log(x: ExprAst) -> ExprAst {
        ExprAst::Call(Func::Log, Box::new(x))
    }

    pub fn sqrt(x: ExprAst) -> ExprAst {
        ExprAst::Call(Func::Sqrt, Box::new(x))
    }

    /// Grammar level of this node, used by the printer to decide parentheses.
    /// Higher binds tighter: sums 0, products 1, unary minus 2, powers 3,
    /// atoms 4.
    fn level(&self) -> u8 {
        match self {
            ExprAst::Bin(BinOp::Add | BinOp::Sub, ..) => 0,
            ExprAst::Bin(BinOp::Mul | BinOp::Div, ..) => 1,
            ExprAst::Neg(_) => 2,
            ExprAst::Bin(BinOp::Pow, ..) => 3,
            ExprAst::Const(_) | ExprAst::Var(_) | ExprAst::Call(..) => 4,
        }
    }

    fn write(&self, f: &mut fmt::Formatter<'_>, min_level: u8) -> fmt::Result {
        let level = self.level();
        let parens = level < min_level;
        if parens {
            write!(f, "(")?;
        }
        match self {
            ExprAst::Const(v) => write!(f, "{v:?}")?,
            ExprAst::Var(name) => write!(f, "{name}")?,
            ExprAst::Neg(x) => {
                write!(f, "-")?;
                x.write(f, 2)?;
            }
            ExprAst::Call(func, x) => {
                write!(f, "{}(", func.name())?;
                x.write(f, 0)?;
                write!(f, ")")?;
            }
            ExprAst::Bin(op, l, r) => {
                let (sym, left_min, right_min) = match op {
                    // Left-associative: a-b-c is (a-b)-c, so an Add/Sub right
                    // child needs parentheses to survive a round trip.
                    BinOp::Add => ("+", 0, 1),
                    BinOp::Sub => ("-", 0, 1),
                    BinOp::Mul => ("*", 1, 2),
                    BinOp::Div => ("/", 1, 2),
                    // Right-associative, base must be an atom, exponent may
                    // carry a unary minus.
                    BinOp::Pow => ("^", 4, 2),
                };
                l.write(f, left_min)?;
                write!(f, "{sym}")?;
                r.write(f, right_min)?;
            }
        }
        if parens {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for ExprAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write(f, 0)
    }
}

macro_rules! impl_bin_op {
    ($trait:ident, $method:ident, $op:expr) => {
        impl std::ops::$trait for ExprAst {
            type Output = ExprAst;
            fn $method(self, rhs: ExprAst) -> ExprAst {
                ExprAst::Bin($op, Box::new(self), Box::new(rhs))
            }
        }
    };
}

impl_bin_op!(Add, add, BinOp::Add);
impl_bin_op!(Sub, sub, BinOp::Sub);
impl_bin_op!(Mul, mul, BinOp::Mul);
impl_bin_op!(Div, div, BinOp::Div);

impl std::ops::Neg for ExprAst {
    type Output = ExprAst;
    fn neg(self) -> ExprAst {
        ExprAst::Neg(Box::new(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_str;

    #[test]
    fn test_printer_parenthesizes_for_structure() {
        let cases = [
            "q1+p1*q1",
            "(q1+p1)*q1",
            "q1-(p1-q1)",
            "-q1^2",
            "(-q1)^2",
            "q1^p1^q1",
            "(q1^p1)^q1",
            "2.0*sin(q1)/cos(p1)",
            "q1*-p1",
        ];
        for src in cases {
            let ast = parse_str(src).unwrap();
            let printed = ast.to_string();
            let reparsed = parse_str(&printed).unwrap();
            assert_eq!(ast, reparsed, "round trip failed for {src} -> {printed}");
        }
    }

    #[test]
    fn test_builder_ops_display() {
        let e = (ExprAst::var("q1") + ExprAst::var("p1")) * ExprAst::constant(0.5);
        assert_eq!(e.to_string(), "(q1+p1)*0.5");
    }
}
