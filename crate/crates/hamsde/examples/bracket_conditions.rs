//! Reduction to equilibrium requires the driving Hamiltonians to satisfy
//! commutation conditions: every noise-noise Poisson bracket must vanish,
//! and each drift bracket must cancel the time derivative of the
//! transformed Hamiltonian. This example measures both on a family that
//! satisfies them and on one that cannot.
//!
//!     cargo run --example bracket_conditions

use hamsde::{
    bracket_conditions, catalog, probe_states, transform_hamiltonians, Result, TransformConfig,
};

fn check(label: &str, sources: &[&str]) -> Result<()> {
    let s = catalog::build_generating("exchange")?;
    let system = catalog::system_from_sources(1, sources)?;
    let cfg = TransformConfig::default();
    let trans = transform_hamiltonians(&s, &system, &cfg.probes)?;
    let probes = probe_states(50, 1, 17, (0.2, 1.2), (-1.0, 1.0));
    let report = bracket_conditions(&system, &trans, &probes, &cfg)?;
    let verdict = if report.max_defect() <= 1e-6 { "PASS" } else { "FAIL" };
    println!("{label}: h = ({})", sources.join(", "));
    println!("  q1-independence defect    = {:.3e}", trans.max_defect());
    println!("  noise-noise brackets      = {:.3e}", report.noise_noise);
    println!("  drift brackets + dK/dt    = {:.3e}", report.drift_noise);
    println!("  verdict: {verdict}\n");
    Ok(())
}

fn main() -> Result<()> {
    check("commuting family", &["p1^2/2", "p1"])?;
    check("pure translation", &["0", "p1"])?;
    // {q, p} = 1 everywhere, so no transform can reduce this family.
    check("non-commuting control", &["0", "q1", "p1"])?;
    Ok(())
}
