//! Compiled form of an expression: a post-order stack program evaluated with
//! second-order forward-mode duals.
//!
//! A dual slot holds a value, a gradient of length `m` (the variable count,
//! time included), and a full `m x m` Hessian, flattened as
//! `[v, g_0..g_{m-1}, h_00..h_{m-1,m-1}]`. The same program runs at three
//! truncation orders selected by a const generic, so value-only and
//! gradient-only evaluations skip the Hessian arithmetic entirely. Evaluation
//! works in caller-provided scratch and never allocates; this matters because
//! the integrator evaluates Hamiltonians a few times per step and the larger
//! Monte-Carlo runs take on the order of 1e9 steps.
//!
//! Division compiles to `Recip` + `Mul` and a variable exponent compiles to
//! `exp(e*log(base))`, so every instruction needs only in-place update rules.
//! Hessian updates run before gradient updates, and gradient updates before
//! the value, so each rule may read the not-yet-overwritten lower-order parts.

use super::ast::{BinOp, ExprAst, Func};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Instr {
    Const(f64),
    Var(u16),
    Add,
    Sub,
    Mul,
    Neg,
    Recip,
    PowI(i32),
    PowC(f64),
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
}

/// A compiled expression over `m` variables.
#[derive(Debug, Clone)]
pub(crate) struct Tape {
    pub instrs: Vec<Instr>,
    pub m: usize,
    pub max_stack: usize,
    /// Total polynomial degree when the expression is a polynomial in its
    /// variables, `None` otherwise. Degree <= 2 means the Hessian is constant
    /// and the gradient affine, which callers exploit via a cached quadratic
    /// form.
    pub degree: Option<u32>,
    /// Which variables the expression actually reads.
    pub used_vars: Vec<bool>,
}

pub(crate) const fn stride(order: usize, m: usize) -> usize {
    match order {
        0 => 1,
        1 => 1 + m,
        _ => 1 + m + m * m,
    }
}

impl Tape {
    pub fn scratch_len(&self, order: usize) -> usize {
        self.max_stack * stride(order, self.m)
    }
}

/// Replaces variable-free subtrees by literals. Subtrees whose constant
/// evaluation fails (domain error, non-finite result) are left intact so the
/// error surfaces at evaluation time with the normal diagnostics.
pub(crate) fn fold_constants(ast: &ExprAst) -> ExprAst {
    fn value_of(ast: &ExprAst) -> Option<f64> {
        match ast {
            ExprAst::Const(v) => Some(*v),
            _ => None,
        }
    }
    match ast {
        ExprAst::Const(_) | ExprAst::Var(_) => ast.clone(),
        ExprAst::Neg(x) => {
            let x = fold_constants(x);
            match value_of(&x) {
                Some(v) => ExprAst::Const(-v),
                None => ExprAst::Neg(Box::new(x)),
            }
        }
        ExprAst::Call(func, x) => {
            let x = fold_constants(x);
            if let Some(v) = value_of(&x) {
                let r = match func {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Log => v.ln(),
                    Func::Sqrt => v.sqrt(),
                };
                if r.is_finite() {
                    return ExprAst::Const(r);
                }
            }
            ExprAst::Call(*func, Box::new(x))
        }
        ExprAst::Bin(op, l, r) => {
            let l = fold_constants(l);
            let r = fold_constants(r);
            if let (Some(a), Some(b)) = (value_of(&l), value_of(&r)) {
                let v = match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => a.powf(b),
                };
                if v.is_finite() {
                    return ExprAst::Const(v);
                }
            }
            ExprAst::Bin(*op, Box::new(l), Box::new(r))
        }
    }
}

fn combine_deg(stack: &mut Vec<Option<u32>>, f: impl FnOnce(Option<u32>, Option<u32>) -> Option<u32>) {
    let b = stack.pop().expect("degree stack underflow");
    let a = stack.pop().expect("degree stack underflow");
    stack.push(f(a, b));
}

/// Compiles a constant-folded AST into a tape. `resolve` maps a variable name
/// to its index in the flat variable vector.
pub(crate) fn build_tape(
    ast: &ExprAst,
    m: usize,
    resolve: &dyn Fn(&str) -> Result<u16>,
) -> Result<Tape> {
    struct Builder<'a> {
        instrs: Vec<Instr>,
        depth: usize,
        max_depth: usize,
        deg: Vec<Option<u32>>,
        used: Vec<bool>,
        resolve: &'a dyn Fn(&str) -> Result<u16>,
    }

    impl Builder<'_> {
        fn push(&mut self, instr: Instr) {
            // Track the stack excursion: pushes grow it, binary ops shrink it.
            match instr {
                Instr::Const(_) | Instr::Var(_) => {
                    self.depth += 1;
                    self.max_depth = self.max_depth.max(self.depth);
                }
                Instr::Add | Instr::Sub | Instr::Mul => self.depth -= 1,
                _ => {}
            }
            self.instrs.push(instr);
        }

        fn emit(&mut self, ast: &ExprAst) -> Result<()> {
            match ast {
                ExprAst::Const(v) => {
                    self.push(Instr::Const(*v));
                    self.deg.push(Some(0));
                }
                ExprAst::Var(name) => {
                    let idx = (self.resolve)(name)?;
                    self.used[idx as usize] = true;
                    self.push(Instr::Var(idx));
                    self.deg.push(Some(1));
                }
                ExprAst::Neg(x) => {
                    self.emit(x)?;
                    self.push(Instr::Neg);
                }
                ExprAst::Call(func, x) => {
                    self.emit(x)?;
                    self.push(match func {
                        Func::Sin => Instr::Sin,
                        Func::Cos => Instr::Cos,
                        Func::Exp => Instr::Exp,
                        Func::Log => Instr::Ln,
                        Func::Sqrt => Instr::Sqrt,
                    });
                    let d = self.deg.pop().unwrap();
                    self.deg
                        .push(if d == Some(0) { Some(0) } else { None });
                }
                ExprAst::Bin(BinOp::Add, l, r) => {
                    self.emit(l)?;
                    self.emit(r)?;
                    self.push(Instr::Add);
                    combine_deg(&mut self.deg, |a, b| Some(a?.max(b?)));
                }
                ExprAst::Bin(BinOp::Sub, l, r) => {
                    self.emit(l)?;
                    self.emit(r)?;
                    self.push(Instr::Sub);
                    combine_deg(&mut self.deg, |a, b| Some(a?.max(b?)));
                }
                ExprAst::Bin(BinOp::Mul, l, r) => {
                    self.emit(l)?;
                    self.emit(r)?;
                    self.push(Instr::Mul);
                    combine_deg(&mut self.deg, |a, b| Some(a?.saturating_add(b?)));
                }
                ExprAst::Bin(BinOp::Div, l, r) => {
                    self.emit(l)?;
                    self.emit(r)?;
                    self.push(Instr::Recip);
                    let d = self.deg.pop().unwrap();
                    self.deg
                        .push(if d == Some(0) { Some(0) } else { None });
                    self.push(Instr::Mul);
                    combine_deg(&mut self.deg, |a, b| Some(a?.saturating_add(b?)));
                }
                ExprAst::Bin(BinOp::Pow, base, exponent) => {
                    // Constant exponents get dedicated instructions; these are
                    // the only way to apply an integer power to a negative
                    // base, and they keep polynomials recognizable.
                    if let ExprAst::Const(e) = exponent.as_ref() {
                        let e = *e;
                        self.emit(base)?;
                        let d = self.deg.pop().unwrap();
                        if e.fract() == 0.0 && e.abs() <= 512.0 {
                            let k = e as i32;
                            self.push(Instr::PowI(k));
                            self.deg.push(match (d, k) {
                                (Some(0), _) => Some(0),
                                (Some(d), k) if k >= 0 => Some(d.saturating_mul(k as u32)),
                                _ => None,
                            });
                        } else {
                            self.push(Instr::PowC(e));
                            self.deg
                                .push(if d == Some(0) { Some(0) } else { None });
                        }
                    } else {
                        // base^e = exp(e * log(base)); requires base > 0.
                        self.emit(base)?;
                        self.push(Instr::Ln);
                        let d = self.deg.pop().unwrap();
                        self.deg
                            .push(if d == Some(0) { Some(0) } else { None });
                        self.emit(exponent)?;
                        self.push(Instr::Mul);
                        combine_deg(&mut self.deg, |a, b| Some(a?.saturating_add(b?)));
                        self.push(Instr::Exp);
                        let d = self.deg.pop().unwrap();
                        self.deg
                            .push(if d == Some(0) { Some(0) } else { None });
                    }
                }
            }
            Ok(())
        }
    }

    let mut builder = Builder {
        instrs: Vec::new(),
        depth: 0,
        max_depth: 0,
        deg: Vec::new(),
        used: vec![false; m],
        resolve,
    };
    builder.emit(ast)?;
    debug_assert_eq!(builder.depth, 1);
    let degree = builder.deg.pop().unwrap();
    Ok(Tape {
        instrs: builder.instrs,
        m,
        max_stack: builder.max_depth,
        degree,
        used_vars: builder.used,
    })
}

#[inline]
fn unary_chain<const ORDER: usize>(slot: &mut [f64], m: usize, f: f64, fp: f64, fpp: f64) {
    if ORDER == 2 {
        let (vg, h) = slot.split_at_mut(1 + m);
        let g = &vg[1..];
        for i in 0..m {
            let gi = g[i];
            for j in 0..m {
                h[i * m + j] = fp * h[i * m + j] + fpp * gi * g[j];
            }
        }
    }
    if ORDER >= 1 {
        for gi in &mut slot[1..1 + m] {
            *gi *= fp;
        }
    }
    slot[0] = f;
}

/// Evaluates `tape` at `vars` (length `m`). `out` receives the leading
/// components of the result slot: `[v]`, `[v, g]`, or `[v, g, h]` depending on
/// `ORDER`. `stack` must hold at least `tape.scratch_len(ORDER)` elements.
pub(crate) fn eval<const ORDER: usize>(
    tape: &Tape,
    vars: &[f64],
    stack: &mut [f64],
    out: &mut [f64],
) -> Result<()> {
    let m = tape.m;
    let s = stride(ORDER, m);
    debug_assert_eq!(vars.len(), m);
    debug_assert!(stack.len() >= tape.max_stack * s);
    debug_assert_eq!(out.len(), s);
    let mut sp = 0usize;

    macro_rules! top {
        () => {
            &mut stack[(sp - 1) * s..sp * s]
        };
    }

    for instr in &tape.instrs {
        match *instr {
            Instr::Const(c) => {
                let slot = &mut stack[sp * s..(sp + 1) * s];
                slot.fill(0.0);
                slot[0] = c;
                sp += 1;
            }
            Instr::Var(i) => {
                let slot = &mut stack[sp * s..(sp + 1) * s];
                slot.fill(0.0);
                slot[0] = vars[i as usize];
                if ORDER >= 1 {
                    slot[1 + i as usize] = 1.0;
                }
                sp += 1;
            }
            Instr::Add => {
                let (lo, hi) = stack.split_at_mut((sp - 1) * s);
                let a = &mut lo[(sp - 2) * s..];
                for k in 0..s {
                    a[k] += hi[k];
                }
                sp -= 1;
            }
            Instr::Sub => {
                let (lo, hi) = stack.split_at_mut((sp - 1) * s);
                let a = &mut lo[(sp - 2) * s..];
                for k in 0..s {
                    a[k] -= hi[k];
                }
                sp -= 1;
            }
            Instr::Mul => {
                let (lo, hi) = stack.split_at_mut((sp - 1) * s);
                let a = &mut lo[(sp - 2) * s..(sp - 1) * s];
                let b = &hi[..s];
                let av = a[0];
                let bv = b[0];
                if ORDER == 2 {
                    let (a_vg, a_h) = a.split_at_mut(1 + m);
                    let a_g = &a_vg[1..];
                    let b_g = &b[1..1 + m];
                    let b_h = &b[1 + m..];
                    for i in 0..m {
                        let agi = a_g[i];
                        let bgi = b_g[i];
                        for j in 0..m {
                            a_h[i * m + j] = bv * a_h[i * m + j]
                                + av * b_h[i * m + j]
                                + agi * b_g[j]
                                + bgi * a_g[j];
                        }
                    }
                }
                if ORDER >= 1 {
                    for i in 0..m {
                        a[1 + i] = bv * a[1 + i] + av * b[1 + i];
                    }
                }
                a[0] = av * bv;
                sp -= 1;
            }
            Instr::Neg => {
                for x in top!().iter_mut() {
                    *x = -*x;
                }
            }
            Instr::Recip => {
                let slot = top!();
                let a = slot[0];
                if a == 0.0 {
                    return Err(Error::eval("division by zero"));
                }
                let f = 1.0 / a;
                unary_chain::<ORDER>(slot, m, f, -f * f, 2.0 * f * f * f);
            }
            Instr::PowI(k) => {
                let slot = top!();
                let a = slot[0];
                if a == 0.0 && k < 0 {
                    return Err(Error::eval("zero raised to a negative power"));
                }
                let f = a.powi(k);
                let kf = k as f64;
                let fp = kf * a.powi(k - 1);
                let fpp = kf * (kf - 1.0) * a.powi(k - 2);
                unary_chain::<ORDER>(slot, m, f, fp, fpp);
            }
            Instr::PowC(c) => {
                let slot = top!();
                let a = slot[0];
                if a < 0.0 && c.fract() != 0.0 {
                    return Err(Error::eval(format!(
                        "non-integer power {c} of negative base {a}"
                    )));
                }
                if a == 0.0 && c <= 0.0 {
                    return Err(Error::eval("zero raised to a non-positive power"));
                }
                let f = a.powf(c);
                let fp = c * a.powf(c - 1.0);
                let fpp = c * (c - 1.0) * a.powf(c - 2.0);
                unary_chain::<ORDER>(slot, m, f, fp, fpp);
            }
            Instr::Sin => {
                let slot = top!();
                let (sin, cos) = slot[0].sin_cos();
                unary_chain::<ORDER>(slot, m, sin, cos, -sin);
            }
            Instr::Cos => {
                let slot = top!();
                let (sin, cos) = slot[0].sin_cos();
                unary_chain::<ORDER>(slot, m, cos, -sin, -cos);
            }
            Instr::Exp => {
                let slot = top!();
                let e = slot[0].exp();
                unary_chain::<ORDER>(slot, m, e, e, e);
            }
            Instr::Ln => {
                let slot = top!();
                let a = slot[0];
                if a <= 0.0 {
                    return Err(Error::eval(format!("log of non-positive value {a}")));
                }
                let inv = 1.0 / a;
                unary_chain::<ORDER>(slot, m, a.ln(), inv, -inv * inv);
            }
            Instr::Sqrt => {
                let slot = top!();
                let a = slot[0];
                let bad = if ORDER == 0 { a < 0.0 } else { a <= 0.0 };
                if bad {
                    return Err(Error::eval(format!(
                        "sqrt domain error at {a} (derivatives need a > 0)"
                    )));
                }
                let r = a.sqrt();
                let fp = 0.5 / r;
                unary_chain::<ORDER>(slot, m, r, fp, -0.5 * fp / a);
            }
        }
    }
    debug_assert_eq!(sp, 1);
    let result = &stack[..s];
    for &x in result {
        if !x.is_finite() {
            return Err(Error::eval("non-finite value in evaluation result"));
        }
    }
    out.copy_from_slice(result);
    Ok(())
}
