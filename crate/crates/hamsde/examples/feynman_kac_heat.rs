//! Builds a positive solution of the heat equation with potential,
//! `dPhi/dt = (1/2) Phi'' - V Phi`, from Monte-Carlo averages of the
//! projected action, and cross-checks it against a Crank-Nicolson
//! finite-difference reference.
//!
//!     cargo run --example feynman_kac_heat

use hamsde::{
    compile_str, fk_compare, fk_estimate, pde_reference, FkConfig, Result, TimeGrid, VarSpace,
};

fn main() -> Result<()> {
    let v = compile_str("0.5*q1^2", 1, VarSpace::Phase)?;
    let f = compile_str("q1", 1, VarSpace::Phase)?;
    let grid = TimeGrid::new(0.25, 64)?;
    let xs: Vec<Vec<f64>> = [-0.5, -0.25, 0.0, 0.25, 0.5]
        .iter()
        .map(|&x| vec![x])
        .collect();
    let cfg = FkConfig::new(v.clone(), f.clone(), grid, 2000, 42, xs)?;

    println!("V = q^2/2, f = q, t = {}, M = {} paths", grid.t_end(), cfg.m_paths());
    let mut report = fk_estimate(&cfg)?;
    let pde = pde_reference(&v, &f, (-0.5, 0.5), 0.005, &grid)?;
    let failures = fk_compare(&mut report, |x, t| pde.value(x[0], t), 0.03)?;

    println!("x       Phi_hat     Phi_ref     |err|      3*sigma band");
    for row in report.rows() {
        println!(
            "{:>5.2}  {:>9.6}  {:>9.6}  {:>9.3e}  {:>9.3e}",
            row.x[0],
            row.phi_hat,
            row.phi_ref.unwrap(),
            row.abs_err.unwrap(),
            3.0 * row.phi_hat * row.stderr
        );
    }
    for w in report.warnings() {
        println!("warning: {w}");
    }
    println!(
        "{failures} of {} points fell outside 3 sigma + 3% budget",
        report.rows().len()
    );
    std::fs::write("feynman_kac_field.csv", report.to_csv_string())?;
    println!("wrote feynman_kac_field.csv");
    Ok(())
}
