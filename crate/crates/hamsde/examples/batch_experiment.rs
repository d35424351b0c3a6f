//! Drives the batch experiment runner from code: parse a JSON config,
//! execute it, and inspect the artifact set. The `hamsde` binary wraps
//! exactly this path behind subcommands.
//!
//!     cargo run --example batch_experiment

use hamsde::{run, Result, RunConfig};

fn main() -> Result<()> {
    let out = std::env::temp_dir().join("hamsde_batch_experiment");
    let json = format!(
        r#"{{
        "kind": "simulate",
        "system": "pendulum",
        "z0": [0.4, 0.0],
        "t_end": 1.0,
        "steps": 256,
        "paths": 4,
        "seed": 13,
        "tolerances": {{ "defect": 1e-9 }},
        "out_dir": "{}"
    }}"#,
        out.display()
    );
    let cfg = RunConfig::from_json(&json)?;
    let outcome = run(&cfg)?;

    print!("{}", outcome.report);
    println!("finished in {} ms; artifacts:", outcome.wall_ms);
    let mut names: Vec<_> = std::fs::read_dir(&outcome.out_dir)?
        .map(|e| e.expect("listable").file_name().into_string().expect("utf-8"))
        .collect();
    names.sort();
    for name in names {
        println!("  {}", outcome.out_dir.join(name).display());
    }
    assert!(outcome.all_pass());
    Ok(())
}
