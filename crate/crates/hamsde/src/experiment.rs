//! Experiment orchestration: resolves the objects a [`RunConfig`] names,
//! runs the requested check family, and writes the artifact set.
//!
//! Every run produces, in the configured output directory:
//!
//! - `results.csv`: the per-item measurement table (columns per kind,
//!   documented in the repository README);
//! - `report.txt`: one PASS/FAIL line per check with measured values;
//! - `meta.json`: config echo, seed, crate version, wall time;
//! - `plot.gp`: a gnuplot script over the emitted CSVs;
//! - kind-specific extras (trajectories, shooting profiles, ...).
//!
//! All path-parallel work is collected by index and reduced sequentially,
//! so `results.csv` is byte-identical across thread counts.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;

use crate::action::{action_gradient, fd_action_gradient};
use crate::catalog;
use crate::config::{ExperimentKind, RunConfig, SystemSpec};
use crate::dsl::compile_str;
use crate::error::{Error, Result};
use crate::feynman_kac::{fk_compare, fk_estimate, pde_reference, FkConfig};
use crate::field::{ScalarField, VarSpace};
use crate::geometry::{symplectic_defect, HamiltonianSystem, PhaseState};
use crate::hamilton_jacobi::{
    d_s_tilde, hj_residual, shoot, DsMode, LagrangianSection, ShootingConfig,
};
use crate::integrator::{integrate_flow, FlowEngine, SchemeConfig};
use crate::linalg::mat_mul;
use crate::noise::{NoisePath, TimeGrid};
use crate::transform::{
    bracket_conditions, equilibrium_check, probe_states, transform_hamiltonians, GeneratingFunction,
    TransformConfig,
};

/// One PASS/FAIL line of a run.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    /// Measured value versus threshold, human readable.
    pub detail: String,
}

impl Verdict {
    fn new(name: &str, pass: bool, detail: String) -> Verdict {
        Verdict {
            name: name.to_string(),
            pass,
            detail,
        }
    }

    /// `measured <= bound` check with a uniform detail string.
    fn at_most(name: &str, measured: f64, bound: f64) -> Verdict {
        Verdict::new(
            name,
            measured <= bound,
            format!("measured {measured:.3e} vs bound {bound:.3e}"),
        )
    }

    /// `measured >= bound` check with a uniform detail string.
    fn at_least(name: &str, measured: f64, bound: f64) -> Verdict {
        Verdict::new(
            name,
            measured >= bound,
            format!("measured {measured:.3} vs required {bound:.3}"),
        )
    }
}

/// Everything a finished run reports back to the caller.
#[derive(Debug)]
pub struct RunOutcome {
    pub verdicts: Vec<Verdict>,
    pub notes: Vec<String>,
    pub out_dir: PathBuf,
    pub wall_ms: u64,
    /// The text written to `report.txt`.
    pub report: String,
}

impl RunOutcome {
    pub fn all_pass(&self) -> bool {
        !self.verdicts.is_empty() && self.verdicts.iter().all(|v| v.pass)
    }
}

/// Output of one kind-specific runner before artifacts are written.
struct KindOutput {
    results: String,
    extra: Vec<(&'static str, String)>,
    verdicts: Vec<Verdict>,
    notes: Vec<String>,
    plot: String,
}

/// Executes a validated config end to end and writes its artifacts.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let output = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::State {
                message: format!("cannot build a {t}-thread pool: {e}"),
            })?
            .install(|| run_kind(cfg)),
        None => run_kind(cfg),
    }?;
    let wall_ms = started.elapsed().as_millis() as u64;

    let mut report = format!("experiment: {}\n", cfg.kind.name());
    for v in &output.verdicts {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(report, "{tag}: {} ({})", v.name, v.detail);
    }
    for note in &output.notes {
        let _ = writeln!(report, "WARN: {note}");
    }
    let all = !output.verdicts.is_empty() && output.verdicts.iter().all(|v| v.pass);
    let _ = writeln!(report, "RESULT: {}", if all { "PASS" } else { "FAIL" });

    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("results.csv"), &output.results)?;
    for (name, content) in &output.extra {
        std::fs::write(cfg.out_dir.join(name), content)?;
    }
    std::fs::write(cfg.out_dir.join("report.txt"), &report)?;
    let meta = serde_json::json!({
        "config": cfg,
        "seed": cfg.seed,
        "version": env!("CARGO_PKG_VERSION"),
        "wall_ms": wall_ms,
    });
    std::fs::write(
        cfg.out_dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).expect("config serializes") + "\n",
    )?;
    std::fs::write(cfg.out_dir.join("plot.gp"), &output.plot)?;

    Ok(RunOutcome {
        verdicts: output.verdicts,
        notes: output.notes,
        out_dir: cfg.out_dir.clone(),
        wall_ms,
        report,
    })
}

fn run_kind(cfg: &RunConfig) -> Result<KindOutput> {
    match cfg.kind {
        ExperimentKind::Simulate => run_simulate(cfg),
        ExperimentKind::ActionCheck => run_action_check(cfg),
        ExperimentKind::Hj => run_hj(cfg),
        ExperimentKind::FeynmanKac => run_feynman_kac(cfg),
        ExperimentKind::Transform => run_transform(cfg),
        ExperimentKind::Convergence => run_convergence(cfg),
    }
}

// ---------------------------------------------------------------- resolvers

fn config_err(message: String) -> Error {
    Error::Config { message }
}

fn resolve_system(cfg: &RunConfig, spec: &SystemSpec) -> Result<HamiltonianSystem> {
    match spec {
        SystemSpec::Name(name) => catalog::build_system(name),
        SystemSpec::Sources(sources) => catalog::system_from_sources(cfg.dim, sources),
    }
}

fn required_system(cfg: &RunConfig) -> Result<HamiltonianSystem> {
    resolve_system(cfg, cfg.system.as_ref().expect("validated"))
}

fn resolve_section_field(dim: usize, text: &str) -> Result<ScalarField> {
    if let Some(entry) = catalog::SECTIONS.iter().find(|e| e.name == text) {
        compile_str(entry.source, entry.n, VarSpace::Phase)
    } else {
        compile_str(text, dim, VarSpace::Phase)
    }
}

fn required_section(cfg: &RunConfig, n: usize) -> Result<LagrangianSection> {
    let field = resolve_section_field(n, cfg.section.as_ref().expect("validated"))?;
    if field.n() != n {
        return Err(config_err(format!(
            "section is {}-dimensional but the system base is {n}-dimensional",
            field.n()
        )));
    }
    LagrangianSection::new(field)
}

fn required_generating(cfg: &RunConfig, n: usize) -> Result<GeneratingFunction> {
    let text = cfg.generating.as_ref().expect("validated");
    let field = if let Some(entry) = catalog::GENERATING.iter().find(|e| e.name == text.as_str()) {
        compile_str(entry.source, entry.n, VarSpace::Generating)?
    } else {
        compile_str(text, cfg.dim, VarSpace::Generating)?
    };
    if field.n() != n {
        return Err(config_err(format!(
            "generating function is {}-dimensional but the system base is {n}-dimensional",
            field.n()
        )));
    }
    GeneratingFunction::new(field)
}

fn required_z0(cfg: &RunConfig, n: usize) -> Result<PhaseState> {
    let z0 = cfg.z0.as_ref().expect("validated");
    if z0.len() != 2 * n {
        return Err(config_err(format!(
            "z0 has {} coordinates but the system needs {}",
            z0.len(),
            2 * n
        )));
    }
    PhaseState::from_flat(z0)
}

/// Base points from the flat `x_points` list, `n` coordinates at a time.
fn base_points(cfg: &RunConfig, n: usize) -> Result<Vec<Vec<f64>>> {
    let xs = cfg.x_points.as_ref().expect("validated");
    if xs.is_empty() || !xs.len().is_multiple_of(n) {
        return Err(config_err(format!(
            "x_points holds {} numbers, not a multiple of the base dimension {n}",
            xs.len()
        )));
    }
    Ok(xs.chunks(n).map(|c| c.to_vec()).collect())
}

fn grid_of(cfg: &RunConfig) -> Result<TimeGrid> {
    TimeGrid::new(cfg.t_end, cfg.steps)
}

fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0f64, f64::max)
}

/// Max-norm disagreement relative to `1 + max|a|`, so vanishing reference
/// values degrade to an absolute comparison instead of dividing by noise.
fn rel_disagreement(a: &[f64], b: &[f64]) -> f64 {
    let diff = max_of(a.iter().zip(b).map(|(x, y)| (x - y).abs()));
    diff / (1.0 + max_of(a.iter().map(|v| v.abs())))
}

// ---------------------------------------------------------------- simulate

/// Integrates one path and measures symplectic defects of every per-step
/// tangent map and of the accumulated one.
fn path_defect_stats(
    system: &HamiltonianSystem,
    z0: &PhaseState,
    path: &NoisePath,
    scfg: &SchemeConfig,
) -> Result<(f64, f64)> {
    let n = system.n();
    let d = 2 * n;
    let mut engine = FlowEngine::new(system, *scfg)?;
    let mut z = z0.flat();
    let mut z_next = vec![0.0; d];
    let mut mid = vec![0.0; d];
    let mut cay = vec![0.0; d * d];
    let mut jac = vec![0.0; d * d];
    let mut tmp = vec![0.0; d * d];
    for i in 0..d {
        jac[i * d + i] = 1.0;
    }
    let mut max_step = 0.0f64;
    for k in 0..path.grid().steps() {
        let t_k = path.grid().node(k);
        let dx = path.step_increments(k);
        engine.step_into(k, t_k, dx, &z, &mut z_next)?;
        for c in 0..d {
            mid[c] = 0.5 * (z[c] + z_next[c]);
        }
        engine.cayley_into(t_k + 0.5 * dx[0], &mid, dx, &mut cay)?;
        max_step = max_step.max(symplectic_defect(&cay, n)?);
        mat_mul(&mut tmp, &cay, &jac, d, d, d);
        jac.copy_from_slice(&tmp);
        z.copy_from_slice(&z_next);
    }
    Ok((max_step, symplectic_defect(&jac, n)?))
}

fn run_simulate(cfg: &RunConfig) -> Result<KindOutput> {
    let system = required_system(cfg)?;
    let z0 = required_z0(cfg, system.n())?;
    let grid = grid_of(cfg)?;
    let scfg = SchemeConfig::default();
    let rows: Vec<(f64, f64)> = (0..cfg.paths)
        .into_par_iter()
        .map(|pi| {
            let path = NoisePath::sample(grid, system.r(), cfg.seed, pi as u64);
            path_defect_stats(&system, &z0, &path, &scfg)
        })
        .collect::<Result<_>>()?;

    let mut results = String::from("path,max_step_defect,accumulated_defect\n");
    for (pi, (step, acc)) in rows.iter().enumerate() {
        let _ = writeln!(results, "{pi},{step},{acc}");
    }
    let worst_step = max_of(rows.iter().map(|r| r.0));
    let worst_acc = max_of(rows.iter().map(|r| r.1));
    let tol = cfg.tolerances.defect.unwrap_or(1e-9);
    let verdicts = vec![
        Verdict::at_most("per-step symplectic defect", worst_step, tol),
        Verdict::at_most(
            "accumulated symplectic defect",
            worst_acc,
            cfg.steps as f64 * tol,
        ),
    ];

    let path0 = NoisePath::sample(grid, system.r(), cfg.seed, 0);
    let traj = integrate_flow(&system, &z0, &path0, &scfg, true)?;
    let extra = vec![("trajectory.csv", traj.to_csv_string())];
    let plot = "\
# Phase-space trace of the first sampled path.
set datafile separator ','
set key autotitle columnhead
set xlabel 't'
plot 'trajectory.csv' using 2:3 with lines, '' using 2:4 with lines
"
    .to_string();
    Ok(KindOutput {
        results,
        extra,
        verdicts,
        notes: Vec::new(),
        plot,
    })
}

// ------------------------------------------------------------ action-check

fn run_action_check(cfg: &RunConfig) -> Result<KindOutput> {
    let specs: Vec<SystemSpec> = match (&cfg.systems, &cfg.system) {
        (Some(list), _) => list.clone(),
        (None, Some(one)) => vec![one.clone()],
        (None, None) => unreachable!("validated"),
    };
    let grid = grid_of(cfg)?;
    let scfg = SchemeConfig::default();
    let h_fd = 1e-4;

    let mut results = String::from("system,path,rel_err\n");
    let mut worst = 0.0f64;
    for (si, spec) in specs.iter().enumerate() {
        let system = resolve_system(cfg, spec)?;
        let z0 = required_z0(cfg, system.n())?;
        let label = match spec {
            SystemSpec::Name(name) => name.clone(),
            SystemSpec::Sources(_) => format!("inline{si}"),
        };
        let rels: Vec<f64> = (0..cfg.paths)
            .into_par_iter()
            .map(|pi| {
                let path = NoisePath::sample(grid, system.r(), cfg.seed, pi as u64);
                let traj = integrate_flow(&system, &z0, &path, &scfg, true)?;
                let formula = action_gradient(&traj, cfg.steps)?.flat();
                let fd = fd_action_gradient(&system, &z0, &path, cfg.steps, h_fd, &scfg)?.flat();
                Ok(rel_disagreement(&formula, &fd))
            })
            .collect::<Result<_>>()?;
        for (pi, rel) in rels.iter().enumerate() {
            let _ = writeln!(results, "{label},{pi},{rel}");
            worst = worst.max(*rel);
        }
    }
    let tol = cfg.tolerances.rel.unwrap_or(1e-4);
    let verdicts = vec![Verdict::at_most(
        "action differential vs finite differences",
        worst,
        tol,
    )];
    let plot = "\
# Relative disagreement per draw.
set datafile separator ','
set key autotitle columnhead
set logscale y
plot 'results.csv' using 2:3 with points
"
    .to_string();
    Ok(KindOutput {
        results,
        extra: Vec::new(),
        verdicts,
        notes: Vec::new(),
        plot,
    })
}

// ------------------------------------------------------------------- hj

fn run_hj(cfg: &RunConfig) -> Result<KindOutput> {
    let system = required_system(cfg)?;
    let n = system.n();
    let section = required_section(cfg, n)?;
    let points = base_points(cfg, n)?;
    let grid = grid_of(cfg)?;
    let shooting = ShootingConfig::default();

    struct HjRow {
        path: usize,
        x: Vec<f64>,
        nodes: usize,
        max_residual: f64,
        ds_rel: f64,
    }
    let jobs: Vec<(usize, Vec<f64>)> = (0..cfg.paths)
        .flat_map(|pi| points.iter().map(move |x| (pi, x.clone())))
        .collect();
    let rows: Vec<HjRow> = jobs
        .into_par_iter()
        .map(|(pi, x)| {
            let path = NoisePath::sample(grid, system.r(), cfg.seed, pi as u64);
            let residuals = hj_residual(&system, &section, &x, &path, &shooting)?;
            let nodes = residuals.len();
            let last = nodes - 1;
            let formula = d_s_tilde(&system, &section, &x, &path, last, DsMode::Formula, &shooting)?;
            let fd = d_s_tilde(&system, &section, &x, &path, last, DsMode::Fd, &shooting)?;
            Ok(HjRow {
                path: pi,
                x,
                nodes,
                max_residual: max_of(residuals.iter().map(|r| r.abs())),
                ds_rel: rel_disagreement(&formula, &fd),
            })
        })
        .collect::<Result<_>>()?;

    let mut results = String::from("path,x,nodes,max_residual,ds_rel\n");
    for row in &rows {
        let x = row
            .x
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            results,
            "{},{x},{},{},{}",
            row.path, row.nodes, row.max_residual, row.ds_rel
        );
    }
    let worst_res = max_of(rows.iter().map(|r| r.max_residual));
    let worst_rel = max_of(rows.iter().map(|r| r.ds_rel));
    let mut notes = Vec::new();
    if rows.iter().any(|r| r.nodes != cfg.steps + 1) {
        notes.push("some shooting problems truncated before the final time".to_string());
    }
    let verdicts = vec![
        Verdict::at_most(
            "discrete Hamilton-Jacobi residual",
            worst_res,
            cfg.tolerances.residual.unwrap_or(1e-6),
        ),
        Verdict::at_most(
            "spatial derivative formula vs finite differences",
            worst_rel,
            cfg.tolerances.rel.unwrap_or(1e-3),
        ),
    ];

    let path0 = NoisePath::sample(grid, system.r(), cfg.seed, 0);
    let profile = shoot(&system, &section, &points[0], &path0, &shooting)?;
    let extra = vec![("profile.csv", profile.to_csv_string())];
    let plot = "\
# Projected action along the first shooting profile.
set datafile separator ','
set key autotitle columnhead
set xlabel 't'
plot 'profile.csv' using 2:6 with lines
"
    .to_string();
    Ok(KindOutput {
        results,
        extra,
        verdicts,
        notes,
        plot,
    })
}

// ------------------------------------------------------------ feynman-kac

fn run_feynman_kac(cfg: &RunConfig) -> Result<KindOutput> {
    if cfg.dim != 1 {
        return Err(config_err(
            "the PDE cross-check of feynman-kac runs needs dim = 1".into(),
        ));
    }
    let v = compile_str(cfg.potential.as_ref().expect("validated"), 1, VarSpace::Phase)?;
    let f = resolve_section_field(1, cfg.section.as_ref().expect("validated"))?;
    let grid = grid_of(cfg)?;
    let points = base_points(cfg, 1)?;
    let fk = FkConfig::new(v.clone(), f.clone(), grid, cfg.paths, cfg.seed, points.clone())?;

    let mut report = fk_estimate(&fk)?;
    let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pde = pde_reference(&v, &f, (lo, hi), cfg.pde_dx, &grid)?;
    let budget = cfg.tolerances.budget.unwrap_or(0.02);
    let failures = fk_compare(&mut report, |x, t| pde.value(x[0], t), budget)?;

    let worst = max_of(report.rows().iter().filter_map(|r| r.abs_err));
    let verdicts = vec![Verdict::new(
        "heat-equation agreement",
        failures == 0,
        format!(
            "{failures} of {} points outside 3 sigma + {:.1}% budget (worst abs err {worst:.3e})",
            report.rows().len(),
            100.0 * budget,
        ),
    )];
    let notes = report.warnings().to_vec();
    let plot = "\
# Monte-Carlo field vs the Crank-Nicolson reference.
set datafile separator ','
set key autotitle columnhead
set xlabel 'x'
plot 'results.csv' using 1:5 with linespoints, '' using 1:6 with lines
"
    .to_string();
    Ok(KindOutput {
        results: report.to_csv_string(),
        extra: Vec::new(),
        verdicts,
        notes,
        plot,
    })
}

// -------------------------------------------------------------- transform

fn run_transform(cfg: &RunConfig) -> Result<KindOutput> {
    let system = required_system(cfg)?;
    let n = system.n();
    let s = required_generating(cfg, n)?;
    let tcfg = TransformConfig {
        indep_tol: cfg.tolerances.defect.unwrap_or(1e-8),
        ..TransformConfig::default()
    };
    let trans = transform_hamiltonians(&s, &system, &tcfg.probes)?;
    let probes = probe_states(50, n, cfg.seed, (0.2, 1.2), (-1.0, 1.0));
    let brackets = bracket_conditions(&system, &trans, &probes, &tcfg)?;
    let bracket_tol = cfg.tolerances.bracket.unwrap_or(1e-6);

    let mut verdicts = vec![
        Verdict::at_most(
            "q1-independence of transformed Hamiltonians",
            trans.max_defect(),
            tcfg.indep_tol,
        ),
        Verdict::at_most("noise-noise brackets", brackets.noise_noise, bracket_tol),
        Verdict::at_most(
            "drift brackets plus dK/dt compensation",
            brackets.drift_noise,
            bracket_tol,
        ),
    ];

    let mut extra = Vec::new();
    let results;
    if cfg.z0.is_some() {
        let z0 = required_z0(cfg, n)?;
        let grid = grid_of(cfg)?;
        let reports: Vec<(f64, f64)> = (0..cfg.paths)
            .into_par_iter()
            .map(|pi| {
                let path = NoisePath::sample(grid, system.r(), cfg.seed, pi as u64);
                let report = equilibrium_check(&s, &system, &z0, &path, &tcfg)?;
                Ok((report.max_q_drift(), report.max_discrepancy()))
            })
            .collect::<Result<_>>()?;
        let mut table = String::from("path,q_drift,discrepancy\n");
        for (pi, (drift, disc)) in reports.iter().enumerate() {
            let _ = writeln!(table, "{pi},{drift},{disc}");
        }
        results = table;
        let tol = cfg.tolerances.discrepancy.unwrap_or(1e-8);
        verdicts.push(Verdict::at_most(
            "new base coordinate invariance",
            max_of(reports.iter().map(|r| r.0)),
            tol,
        ));
        verdicts.push(Verdict::at_most(
            "mapped vs reduced trajectory discrepancy",
            max_of(reports.iter().map(|r| r.1)),
            tol,
        ));
        let path0 = NoisePath::sample(grid_of(cfg)?, system.r(), cfg.seed, 0);
        let eq0 = equilibrium_check(&s, &system, &z0, &path0, &tcfg)?;
        extra.push(("equilibrium.csv", eq0.to_csv_string()));
    } else {
        let mut table = String::from("check,value\n");
        let _ = writeln!(table, "q1_independence,{}", trans.max_defect());
        let _ = writeln!(table, "noise_noise,{}", brackets.noise_noise);
        let _ = writeln!(table, "drift_noise,{}", brackets.drift_noise);
        results = table;
    }
    let plot = "\
# Mapped vs reduced momentum along the first path (equilibrium runs).
set datafile separator ','
set key autotitle columnhead
set xlabel 't'
plot 'equilibrium.csv' using 2:4 with lines, '' using 2:6 with lines
"
    .to_string();
    Ok(KindOutput {
        results,
        extra,
        verdicts,
        notes: Vec::new(),
        plot,
    })
}

// ------------------------------------------------------------ convergence

fn run_convergence(cfg: &RunConfig) -> Result<KindOutput> {
    let system = required_system(cfg)?;
    let n = system.n();
    let section = required_section(cfg, n)?;
    let x = base_points(cfg, n)?.swap_remove(0);
    let grid = grid_of(cfg)?;
    let shooting = ShootingConfig::default();
    let levels = cfg.levels;

    // residuals[draw][level]
    let residuals: Vec<Vec<f64>> = (0..cfg.paths)
        .into_par_iter()
        .map(|pi| {
            let mut path = NoisePath::sample(grid, system.r(), cfg.seed, pi as u64);
            let mut per_level = Vec::with_capacity(levels + 1);
            for _ in 0..=levels {
                let profile = hj_residual(&system, &section, &x, &path, &shooting)?;
                per_level.push(max_of(profile.iter().map(|r| r.abs())));
                path = path.refine();
            }
            Ok(per_level)
        })
        .collect::<Result<_>>()?;

    let mut results = String::from("level,steps,mean_max_residual\n");
    let mut ks = Vec::with_capacity(levels + 1);
    let mut means = Vec::with_capacity(levels + 1);
    for level in 0..=levels {
        let mean = residuals.iter().map(|r| r[level]).sum::<f64>() / cfg.paths as f64;
        let steps = cfg.steps << level;
        let _ = writeln!(results, "{level},{steps},{mean}");
        ks.push(steps as f64);
        means.push(mean);
    }
    let decay = -slope_of_log2(&ks, &means);
    let verdicts = vec![Verdict::at_least(
        "residual decay order under bridge refinement",
        decay,
        cfg.tolerances.slope.unwrap_or(0.5),
    )];
    let plot = "\
# Residual decay under Brownian-bridge refinement.
set datafile separator ','
set key autotitle columnhead
set logscale xy
set xlabel 'steps'
plot 'results.csv' using 2:3 with linespoints
"
    .to_string();
    Ok(KindOutput {
        results,
        extra: Vec::new(),
        verdicts,
        notes: Vec::new(),
        plot,
    })
}

fn slope_of_log2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.log2()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.log2()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use tempfile::tempdir;

    fn run_json(json: &str) -> Result<RunOutcome> {
        run(&RunConfig::from_json(json)?)
    }

    fn with_out(dir: &std::path::Path, body: &str) -> String {
        format!(
            r#"{{"out_dir": "{}", {body}}}"#,
            dir.display().to_string().replace('\\', "/")
        )
    }

    #[test]
    fn test_simulate_writes_artifacts_and_passes() {
        let dir = tempdir().unwrap();
        let outcome = run_json(&with_out(
            dir.path(),
            r#""kind": "simulate", "system": "pendulum", "z0": [0.4, 0.0],
               "t_end": 1.0, "steps": 64, "paths": 2, "seed": 11,
               "tolerances": {"defect": 1e-9}"#,
        ))
        .unwrap();
        assert!(outcome.all_pass(), "{}", outcome.report);
        for name in ["results.csv", "report.txt", "meta.json", "plot.gp", "trajectory.csv"] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(report.contains("PASS: per-step symplectic defect"), "{report}");
        assert!(report.trim_end().ends_with("RESULT: PASS"), "{report}");
        let results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(results.lines().count(), 3, "{results}");
    }

    #[test]
    fn test_action_check_passes_on_catalog_systems() {
        let dir = tempdir().unwrap();
        let outcome = run_json(&with_out(
            dir.path(),
            r#""kind": "action-check", "systems": ["translation", "free_noisy"],
               "z0": [0.4, 0.7], "t_end": 1.0, "steps": 64, "paths": 3,
               "seed": 2, "tolerances": {"rel": 1e-4}"#,
        ))
        .unwrap();
        assert!(outcome.all_pass(), "{}", outcome.report);
    }

    #[test]
    fn test_hj_kind_checks_residual_and_derivative() {
        let dir = tempdir().unwrap();
        let outcome = run_json(&with_out(
            dir.path(),
            r#""kind": "hj", "system": "free_noisy", "section": "linear",
               "x_points": [0.0, 0.4], "t_end": 0.5, "steps": 64, "paths": 2,
               "seed": 3, "tolerances": {"residual": 1e-6, "rel": 1e-3}"#,
        ))
        .unwrap();
        assert!(outcome.all_pass(), "{}", outcome.report);
        assert!(dir.path().join("profile.csv").exists());
    }

    #[test]
    fn test_feynman_kac_kind_smoke() {
        let dir = tempdir().unwrap();
        let outcome = run_json(&with_out(
            dir.path(),
            r#""kind": "feynman-kac", "potential": "0", "section": "q1",
               "x_points": [0.0], "t_end": 0.5, "steps": 32, "paths": 150,
               "seed": 7, "pde_dx": 0.02, "tolerances": {"budget": 0.05}"#,
        ))
        .unwrap();
        assert!(outcome.all_pass(), "{}", outcome.report);
        let results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(results.contains("PASS"), "{results}");
    }

    #[test]
    fn test_transform_kind_equilibrium_and_brackets() {
        let dir = tempdir().unwrap();
        let outcome = run_json(&with_out(
            dir.path(),
            r#""kind": "transform", "generating": "exchange", "system": "free_noisy",
               "z0": [1.0, 5.0], "t_end": 1.0, "steps": 64, "paths": 2, "seed": 4,
               "tolerances": {"discrepancy": 1e-8}"#,
        ))
        .unwrap();
        assert!(outcome.all_pass(), "{}", outcome.report);
        assert!(dir.path().join("equilibrium.csv").exists());
    }

    #[test]
    fn test_transform_negative_control_reports_fail() {
        let dir = tempdir().unwrap();
        let outcome = run_json(&with_out(
            dir.path(),
            r#""kind": "transform", "generating": "exchange",
               "system": ["0", "q1", "p1"], "t_end": 1.0, "steps": 16, "seed": 4"#,
        ))
        .unwrap();
        assert!(!outcome.all_pass());
        assert!(outcome.report.contains("FAIL: noise-noise brackets"), "{}", outcome.report);
        assert!(
            outcome.report.contains("FAIL: q1-independence"),
            "{}",
            outcome.report
        );
    }

    #[test]
    fn test_convergence_kind_measures_decay() {
        let dir = tempdir().unwrap();
        let outcome = run_json(&with_out(
            dir.path(),
            r#""kind": "convergence", "system": "pendulum", "section": "mild_quadratic",
               "x_points": [0.3], "t_end": 1.0, "steps": 32, "levels": 2,
               "paths": 2, "seed": 5, "tolerances": {"slope": 0.3}"#,
        ))
        .unwrap();
        assert!(outcome.all_pass(), "{}", outcome.report);
        let results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert_eq!(results.lines().count(), 4, "{results}");
    }

    #[test]
    fn test_results_identical_across_thread_counts() {
        let mut csvs = Vec::new();
        for threads in [1usize, 2] {
            let dir = tempdir().unwrap();
            let outcome = run_json(&with_out(
                dir.path(),
                &format!(
                    r#""kind": "hj", "system": "free_noisy", "section": "linear",
                       "x_points": [0.0, 0.4], "t_end": 0.5, "steps": 32, "paths": 4,
                       "seed": 3, "threads": {threads}"#
                ),
            ))
            .unwrap();
            assert!(outcome.all_pass());
            csvs.push(std::fs::read(dir.path().join("results.csv")).unwrap());
        }
        assert_eq!(csvs[0], csvs[1], "results.csv must not depend on threads");
    }

    #[test]
    fn test_unknown_catalog_name_is_config_error() {
        let dir = tempdir().unwrap();
        let err = run_json(&with_out(
            dir.path(),
            r#""kind": "simulate", "system": "nonesuch", "z0": [0.0, 0.0],
               "t_end": 1.0, "steps": 8"#,
        ))
        .unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }
}
