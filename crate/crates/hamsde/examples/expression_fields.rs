//! Tours the expression DSL that defines Hamiltonians, sections, and
//! generating functions: compilation, evaluation, and the forward-mode
//! derivatives every solver in the crate consumes.
//!
//!     cargo run --example expression_fields

use hamsde::{compile_str, poisson_bracket, PhaseState, Result, VarSpace};

fn main() -> Result<()> {
    // Phase-space fields see t, q1..qn, p1..pn.
    let h = compile_str("p1^2/2 + cos(q1)", 1, VarSpace::Phase)?;
    let z = PhaseState::new(vec![0.4], vec![0.9])?;
    let jet = h.jet(0.0, &z)?;
    println!("h = p1^2/2 + cos(q1) at (q, p) = (0.4, 0.9)");
    println!("  value    = {:.10}", jet.value);
    println!(
        "  gradient = [dt: {:.6}, dq: {:.6}, dp: {:.6}]",
        jet.dt, jet.grad[0], jet.grad[1]
    );
    let exact = [-0.4f64.sin(), 0.9];
    let err = jet
        .grad
        .iter()
        .zip(&exact)
        .map(|(g, e)| (g - e).abs())
        .fold(jet.dt.abs(), f64::max);
    println!("  max gradient error vs closed form = {err:.3e}");
    println!(
        "  Hessian diag = [{:.6}, {:.6}] (expect -cos 0.4, 1)",
        jet.hess[0], jet.hess[3]
    );

    // Generating-function fields see t, a1..an, b1..bn instead.
    let s = compile_str("a1*b1 + t*b1^2/2", 1, VarSpace::Generating)?;
    let ab = PhaseState::new(vec![1.0], vec![2.0])?;
    let sj = s.jet(0.5, &ab)?;
    println!("\nS = a1*b1 + t*b1^2/2 at t = 0.5, (a, b) = (1, 2)");
    println!(
        "  S = {:.6}, dS/dt = {:.6}, dS/da = {:.6}, dS/db = {:.6}",
        sj.value, sj.dt, sj.grad[0], sj.grad[1]
    );

    // Brackets come straight from the same jets.
    let f = compile_str("q1*p1", 1, VarSpace::Phase)?;
    let g = compile_str("q1^2", 1, VarSpace::Phase)?;
    let z = PhaseState::new(vec![0.7], vec![-0.3])?;
    println!(
        "\n{{q p, q^2}} at (0.7, -0.3) = {:.10} (closed form -2 q^2 = {:.10})",
        poisson_bracket(&f, &g, 0.0, &z)?,
        -2.0 * 0.7f64 * 0.7
    );

    // Errors carry positions: an unknown name reports where it was bound.
    let bad = compile_str("p1 + nope", 1, VarSpace::Phase);
    println!("\ncompiling \"p1 + nope\" fails with: {}", bad.unwrap_err());
    Ok(())
}
