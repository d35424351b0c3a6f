//! Tours the driving-noise layer: counter-based sampling (any path is
//! reproducible from (seed, index) alone), Brownian-bridge refinement
//! (halving the step while keeping every coarse node), and the refined
//! increments' consistency.
//!
//!     cargo run --example noise_and_refinement

use hamsde::{NoisePath, Result, TimeGrid};

fn main() -> Result<()> {
    let grid = TimeGrid::new(1.0, 8)?;
    let path = NoisePath::sample(grid, 1, 99, 4);
    let again = NoisePath::sample(grid, 1, 99, 4);
    assert_eq!(path.to_csv_string(), again.to_csv_string());
    println!("path (seed 99, index 4) resampled bit-identically");

    let b = path.node_values(1);
    println!("\ncoarse nodes ({} steps):", grid.steps());
    for (k, v) in b.iter().enumerate() {
        println!("  B({:.3}) = {v:>12.8}", grid.node(k));
    }

    let fine = path.refine();
    let bf = fine.node_values(1);
    let worst = (0..=grid.steps())
        .map(|k| (b[k] - bf[2 * k]).abs())
        .fold(0.0f64, f64::max)
        .max((fine.grid().dt() - 0.5 * grid.dt()).abs());
    println!(
        "\nrefined to {} steps; coarse nodes preserved to {worst:.3e}",
        fine.grid().steps()
    );
    let mid = fine.node_values(1)[1];
    println!(
        "bridge midpoint B({:.3}) = {mid:>12.8} interpolates B(0) and B({:.3})",
        fine.grid().node(1),
        grid.node(1)
    );

    // Increment rows carry (dt, dB) per step; channel 0 is time itself.
    let dx = path.step_increments(3);
    println!("\nstep 3 increments: dt = {:.4}, dB = {:>12.8}", dx[0], dx[1]);
    Ok(())
}
