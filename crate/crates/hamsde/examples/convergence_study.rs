//! Measures how the discrete Hamilton-Jacobi residual of a nonlinear
//! system decays when the same Brownian path is refined in place, which
//! is the pathwise notion of convergence order.
//!
//!     cargo run --example convergence_study

use hamsde::{
    catalog, compile_str, hj_residual, LagrangianSection, NoisePath, Result, ShootingConfig,
    TimeGrid, VarSpace,
};

fn main() -> Result<()> {
    let system = catalog::build_system("pendulum")?;
    let section = LagrangianSection::new(compile_str("0.1*q1^2", 1, VarSpace::Phase)?)?;
    let cfg = ShootingConfig::default();
    let x = [0.3];
    let draws = 4u64;
    let levels = 3usize;
    let base = TimeGrid::new(1.0, 64)?;

    let mut means = vec![0.0f64; levels + 1];
    for seed in 0..draws {
        let mut path = NoisePath::sample(base, system.r(), seed, 0);
        for mean in means.iter_mut() {
            let res = hj_residual(&system, &section, &x, &path, &cfg)?;
            *mean += res.iter().fold(0.0f64, |a, r| a.max(r.abs())) / draws as f64;
            path = path.refine();
        }
    }

    println!("pendulum, f = 0.1 q^2, x = {}, {draws} draws", x[0]);
    println!("steps   mean max residual   observed order");
    for (level, mean) in means.iter().enumerate() {
        let steps = base.steps() << level;
        if level == 0 {
            println!("{steps:>5}   {mean:>17.3e}   -");
        } else {
            let order = (means[level - 1] / mean).log2();
            println!("{steps:>5}   {mean:>17.3e}   {order:>14.2}");
        }
    }
    println!("\nan order near one half or better certifies pathwise convergence");
    Ok(())
}
