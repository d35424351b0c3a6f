//! Compiled scalar fields with value / gradient / Hessian evaluation.
//!
//! A [`ScalarField`] is a twice-differentiable function of `(t, z)` where `z`
//! collects the `2n` space coordinates: `(q, p)` in phase space or the two
//! position groups `(a, b)` of a generating function. Fields come from the
//! expression DSL (or the builders in [`crate::catalog`]); evaluation runs a
//! compiled tape with forward-mode duals over the `m = 2n + 1` variables
//! `(t, z)`, so one pass yields the time partial alongside the space
//! derivatives.
//!
//! Polynomials of total degree <= 2 are special-cased: their Hessian is
//! constant and their gradient affine, so compilation caches the quadratic
//! form once and the per-point cost drops by roughly an order of magnitude.
//! This is what keeps quadratic Hamiltonians cheap inside the innermost
//! integration loops.

use crate::dsl::ast::ExprAst;
use crate::dsl::tape::{self, Tape};
use crate::error::{Error, Result};
use crate::geometry::PhaseState;

/// Which variable names a field binds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarSpace {
    /// Variables `t, q1..qn, p1..pn`.
    Phase,
    /// Variables `t, a1..an, b1..bn` (generating-function coordinates).
    Generating,
}

impl VarSpace {
    fn label(self) -> &'static str {
        match self {
            VarSpace::Phase => "phase",
            VarSpace::Generating => "generating",
        }
    }

    fn group_names(self) -> (char, char) {
        match self {
            VarSpace::Phase => ('q', 'p'),
            VarSpace::Generating => ('a', 'b'),
        }
    }
}

/// Second-order expansion of a field at one point, expressed over the `2n`
/// space coordinates; the time partial rides along separately.
#[derive(Debug, Clone)]
pub struct FieldJet {
    pub value: f64,
    /// Partial derivative in `t`.
    pub dt: f64,
    /// Gradient over `z = (q, p)`, length `2n`.
    pub grad: Vec<f64>,
    /// Hessian over `z`, row-major `2n x 2n`.
    pub hess: Vec<f64>,
}

/// Cached representation of a degree <= 2 polynomial:
/// `f(x) = c0 + g0.x + x^T h x / 2` with `x = (t, z)`.
#[derive(Debug, Clone)]
struct QuadForm {
    c0: f64,
    g0: Vec<f64>,
    h: Vec<f64>,
}

impl QuadForm {
    #[inline]
    fn value(&self, x: &[f64]) -> f64 {
        let m = x.len();
        let mut acc = self.c0;
        for i in 0..m {
            let xi = x[i];
            if xi != 0.0 {
                let mut row = 0.0;
                for j in 0..m {
                    row += self.h[i * m + j] * x[j];
                }
                acc += xi * (self.g0[i] + 0.5 * row);
            }
        }
        acc
    }

    #[inline]
    fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        let m = x.len();
        for i in 0..m {
            let mut acc = self.g0[i];
            for j in 0..m {
                acc += self.h[i * m + j] * x[j];
            }
            out[i] = acc;
        }
    }
}

/// Reusable evaluation scratch. Growing is amortized; the hot paths hold one
/// of these per worker and never allocate after warm-up.
#[derive(Debug, Default)]
pub(crate) struct FieldWorkspace {
    vars: Vec<f64>,
    stack: Vec<f64>,
    jet: Vec<f64>,
}

impl FieldWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure(&mut self, vars: usize, stack: usize, jet: usize) {
        if self.vars.len() < vars {
            self.vars.resize(vars, 0.0);
        }
        if self.stack.len() < stack {
            self.stack.resize(stack, 0.0);
        }
        if self.jet.len() < jet {
            self.jet.resize(jet, 0.0);
        }
    }
}

/// A compiled, twice-differentiable scalar field of `(t, z)`.
#[derive(Debug, Clone)]
pub struct ScalarField {
    n: usize,
    space: VarSpace,
    source: String,
    tape: Tape,
    quad: Option<QuadForm>,
}

impl ScalarField {
    /// Compiles an expression tree. Fails with [`Error::Bind`] when the tree
    /// references a variable outside the space, e.g. `q3` with `n = 2`.
    pub fn compile(ast: &ExprAst, n: usize, space: VarSpace) -> Result<ScalarField> {
        if n == 0 {
            return Err(Error::dim("variable space needs n >= 1"));
        }
        let folded = tape::fold_constants(ast);
        let m = 2 * n + 1;
        let bind_err = |name: &str| Error::Bind {
            name: name.to_string(),
            space: space.label(),
            n,
        };
        let (base, fiber) = space.group_names();
        let resolver = move |name: &str| -> Result<u16> {
            if name == "t" {
                return Ok(0);
            }
            let mut chars = name.chars();
            let head = chars.next().ok_or_else(|| bind_err(name))?;
            let rest = chars.as_str();
            let group = if head == base {
                0
            } else if head == fiber {
                1
            } else {
                return Err(bind_err(name));
            };
            let index = if rest.is_empty() {
                if n == 1 {
                    1
                } else {
                    return Err(bind_err(name));
                }
            } else {
                rest.parse::<usize>().map_err(|_| bind_err(name))?
            };
            if index < 1 || index > n {
                return Err(bind_err(name));
            }
            Ok((group * n + index) as u16)
        };
        let tape = tape::build_tape(&folded, m, &resolver)?;
        let quad = if tape.degree.is_some_and(|d| d <= 2) {
            // Degree <= 2: the full jet at the origin determines the field.
            let zeros = vec![0.0; m];
            let mut stack = vec![0.0; tape.scratch_len(2)];
            let mut out = vec![0.0; tape::stride(2, m)];
            tape::eval::<2>(&tape, &zeros, &mut stack, &mut out)?;
            Some(QuadForm {
                c0: out[0],
                g0: out[1..1 + m].to_vec(),
                h: out[1 + m..].to_vec(),
            })
        } else {
            None
        };
        Ok(ScalarField {
            n,
            space,
            source: folded.to_string(),
            tape,
            quad,
        })
    }

    /// Configuration dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Variable space the field was compiled against.
    pub fn space(&self) -> VarSpace {
        self.space
    }

    /// Printable (constant-folded) form of the expression.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// Whether the expression reads `t`.
    pub fn uses_t(&self) -> bool {
        self.tape.used_vars[0]
    }

    /// Whether the expression reads any base coordinate (`q` resp. `a`).
    pub fn uses_q(&self) -> bool {
        self.tape.used_vars[1..1 + self.n].iter().any(|&u| u)
    }

    /// Whether the expression reads any fiber coordinate (`p` resp. `b`).
    pub fn uses_p(&self) -> bool {
        self.tape.used_vars[1 + self.n..].iter().any(|&u| u)
    }

    pub(crate) fn m(&self) -> usize {
        2 * self.n + 1
    }

    /// Total polynomial degree when the field is polynomial.
    pub fn polynomial_degree(&self) -> Option<u32> {
        self.tape.degree
    }

    fn check_state(&self, state: &PhaseState) -> Result<()> {
        if state.n() != self.n {
            return Err(Error::dim(format!(
                "field over n = {} evaluated at state with n = {}",
                self.n,
                state.n()
            )));
        }
        Ok(())
    }

    /// Value at `(t, state)`. For generating-space fields the state's `q`
    /// slot carries the first position group and `p` the second.
    pub fn value(&self, t: f64, state: &PhaseState) -> Result<f64> {
        self.check_state(state)?;
        let mut ws = FieldWorkspace::new();
        let flat = state.flat();
        self.eval_value(t, &flat, &mut ws)
    }

    /// Full second-order jet at `(t, state)`.
    pub fn jet(&self, t: f64, state: &PhaseState) -> Result<FieldJet> {
        self.check_state(state)?;
        let mut ws = FieldWorkspace::new();
        let flat = state.flat();
        let m = self.m();
        let d = 2 * self.n;
        let mut g = vec![0.0; m];
        let mut h = vec![0.0; m * m];
        let value = self.eval_hess(t, &flat, &mut ws, &mut g, &mut h)?;
        let mut hess = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                hess[i * d + j] = h[(i + 1) * m + (j + 1)];
            }
        }
        Ok(FieldJet {
            value,
            dt: g[0],
            grad: g[1..].to_vec(),
            hess,
        })
    }

    #[inline]
    fn load_vars(&self, t: f64, z: &[f64], ws: &mut FieldWorkspace) {
        let m = self.m();
        debug_assert_eq!(z.len(), m - 1);
        ws.ensure(m, self.tape.scratch_len(2), tape::stride(2, m));
        ws.vars[0] = t;
        ws.vars[1..m].copy_from_slice(z);
    }

    /// Value only; `z` is the flat `2n`-vector of space coordinates.
    pub(crate) fn eval_value(&self, t: f64, z: &[f64], ws: &mut FieldWorkspace) -> Result<f64> {
        self.load_vars(t, z, ws);
        let m = self.m();
        if let Some(q) = &self.quad {
            return Ok(q.value(&ws.vars[..m]));
        }
        tape::eval::<0>(&self.tape, &ws.vars[..m], &mut ws.stack, &mut ws.jet[..1])?;
        Ok(ws.jet[0])
    }

    /// Value and gradient over the full variable vector; `out_g` has length
    /// `m = 2n + 1` with the `t` partial in slot 0.
    pub(crate) fn eval_grad(
        &self,
        t: f64,
        z: &[f64],
        ws: &mut FieldWorkspace,
        out_g: &mut [f64],
    ) -> Result<f64> {
        self.load_vars(t, z, ws);
        let m = self.m();
        debug_assert_eq!(out_g.len(), m);
        if let Some(q) = &self.quad {
            q.grad_into(&ws.vars[..m], out_g);
            return Ok(q.value(&ws.vars[..m]));
        }
        let s = tape::stride(1, m);
        tape::eval::<1>(&self.tape, &ws.vars[..m], &mut ws.stack, &mut ws.jet[..s])?;
        out_g.copy_from_slice(&ws.jet[1..s]);
        Ok(ws.jet[0])
    }

    /// Value, gradient, and Hessian over the full variable vector; `out_h` is
    /// row-major `m x m`.
    pub(crate) fn eval_hess(
        &self,
        t: f64,
        z: &[f64],
        ws: &mut FieldWorkspace,
        out_g: &mut [f64],
        out_h: &mut [f64],
    ) -> Result<f64> {
        self.load_vars(t, z, ws);
        let m = self.m();
        debug_assert_eq!(out_g.len(), m);
        debug_assert_eq!(out_h.len(), m * m);
        if let Some(q) = &self.quad {
            q.grad_into(&ws.vars[..m], out_g);
            out_h.copy_from_slice(&q.h);
            return Ok(q.value(&ws.vars[..m]));
        }
        let s = tape::stride(2, m);
        tape::eval::<2>(&self.tape, &ws.vars[..m], &mut ws.stack, &mut ws.jet[..s])?;
        out_g.copy_from_slice(&ws.jet[1..1 + m]);
        out_h.copy_from_slice(&ws.jet[1 + m..s]);
        Ok(ws.jet[0])
    }

    /// True when the Hessian is constant (cached); such fields skip per-step
    /// curvature evaluations in the integrator.
    pub(crate) fn has_constant_hessian(&self) -> bool {
        self.quad.is_some()
    }

    /// The constant full-variable Hessian for degree <= 2 fields.
    pub(crate) fn constant_hessian(&self) -> Option<&[f64]> {
        self.quad.as_ref().map(|q| q.h.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::compile_str;

    #[test]
    fn test_phase_binding_and_arity_flags() {
        let f = compile_str("p1^2/2 + cos(q1)", 1, VarSpace::Phase).unwrap();
        assert!(!f.uses_t());
        assert!(f.uses_q());
        assert!(f.uses_p());
        let g = compile_str("t*p2", 2, VarSpace::Phase).unwrap();
        assert!(g.uses_t());
        assert!(!g.uses_q());
        assert!(g.uses_p());
    }

    #[test]
    fn test_bind_rejects_out_of_range_and_wrong_space() {
        assert!(matches!(
            compile_str("q3", 2, VarSpace::Phase).unwrap_err(),
            Error::Bind { .. }
        ));
        assert!(matches!(
            compile_str("a1", 1, VarSpace::Phase).unwrap_err(),
            Error::Bind { .. }
        ));
        assert!(matches!(
            compile_str("q1", 1, VarSpace::Generating).unwrap_err(),
            Error::Bind { .. }
        ));
        assert!(matches!(
            compile_str("q0", 1, VarSpace::Phase).unwrap_err(),
            Error::Bind { .. }
        ));
    }

    #[test]
    fn test_bare_aliases_for_n1() {
        let f = compile_str("p^2/2 + q", 1, VarSpace::Phase).unwrap();
        let z = PhaseState::new(vec![3.0], vec![2.0]).unwrap();
        assert!((f.value(0.0, &z).unwrap() - 5.0).abs() < 1e-12);
        assert!(compile_str("q", 2, VarSpace::Phase).is_err());
    }

    #[test]
    fn test_jet_layout_over_phase_coordinates() {
        // f = q1*p1 + t*q1: grad_z = (p1 + t, q1), hess_zz = [[0,1],[1,0]], dt = q1
        let f = compile_str("q1*p1 + t*q1", 1, VarSpace::Phase).unwrap();
        let z = PhaseState::new(vec![2.0], vec![5.0]).unwrap();
        let jet = f.jet(0.5, &z).unwrap();
        assert!((jet.value - 11.0).abs() < 1e-12);
        assert!((jet.dt - 2.0).abs() < 1e-12);
        assert!((jet.grad[0] - 5.5).abs() < 1e-12);
        assert!((jet.grad[1] - 2.0).abs() < 1e-12);
        assert_eq!(jet.hess.len(), 4);
        assert!((jet.hess[1] - 1.0).abs() < 1e-12);
        assert!((jet.hess[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn test_quadratic_cache_agrees_with_tape() {
        let src = "0.5*p1^2 + 0.25*q1^2 + q1*p1 + 3*q1 - 1 + t*p1";
        let cached = compile_str(src, 1, VarSpace::Phase).unwrap();
        assert!(cached.has_constant_hessian());
        // Same expression with a curvature-free transcendental bolt-on that
        // evaluates to zero everywhere would disable the cache; instead
        // compare against finite differences of the cached value itself and
        // against the tape path by rebuilding with an extra cubic term of
        // zero coefficient (degree 3 disables the cache).
        let uncached = compile_str(&format!("{src} + 0*q1^3"), 1, VarSpace::Phase).unwrap();
        assert!(!uncached.has_constant_hessian());
        let z = PhaseState::new(vec![1.3], vec![-0.7]).unwrap();
        let a = cached.jet(0.4, &z).unwrap();
        let b = uncached.jet(0.4, &z).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        for k in 0..2 {
            assert!((a.grad[k] - b.grad[k]).abs() < 1e-12);
        }
        for k in 0..4 {
            assert!((a.hess[k] - b.hess[k]).abs() < 1e-12);
        }
        assert!((a.dt - b.dt).abs() < 1e-12);
    }

    #[test]
    fn test_dimension_mismatch_rejected() {
        let f = compile_str("q1", 1, VarSpace::Phase).unwrap();
        let z = PhaseState::new(vec![1.0, 2.0], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            f.value(0.0, &z).unwrap_err(),
            Error::Dimension { .. }
        ));
    }
}
