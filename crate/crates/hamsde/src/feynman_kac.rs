//! Monte-Carlo construction of heat-equation solutions from the projected
//! action, cross-checked against a finite-difference reference.
//!
//! For the separable system `h_0 = 1/2 sum p_i^2 + V(q)`, `h_i = p_i`
//! driven by `(t, B^1..B^n)`, the field `Phi_t(x) = exp(-E[S~_t(x)])`
//! solves `dPhi/dt = V Phi + 1/2 Laplacian Phi` with `Phi_0 = exp(-f)`,
//! where `S~` is the projected action shot from the section `df`.
//! [`fk_estimate`] averages `S~` over sampled paths (mean first, exp
//! second), [`pde_reference`] solves the same PDE by Crank-Nicolson on a
//! padded interval, and [`fk_compare`] renders per-point verdicts with a
//! statistical band plus a declared discretization budget.

use std::io::Write;

use rayon::prelude::*;

use crate::dsl::compile_str;
use crate::error::{Error, Result};
use crate::field::{FieldWorkspace, ScalarField, VarSpace};
use crate::geometry::HamiltonianSystem;
use crate::hamilton_jacobi::{shoot, LagrangianSection, ShootingConfig};
use crate::integrator::SolverStats;
use crate::noise::{NoisePath, TimeGrid};

/// Estimator setup: potential, initial section, path budget, and where to
/// evaluate. The Hamiltonians are assembled internally from `V`.
#[derive(Debug, Clone)]
pub struct FkConfig {
    v: ScalarField,
    section: LagrangianSection,
    system: HamiltonianSystem,
    grid: TimeGrid,
    m_paths: usize,
    seed: u64,
    x_points: Vec<Vec<f64>>,
    eval_nodes: Vec<usize>,
    shooting: ShootingConfig,
}

impl FkConfig {
    /// `v` and `f` are scalar fields on the base (no `p`, no `t`); the
    /// system becomes `h_0 = 1/2 sum p_i^2 + v`, `h_i = p_i`. Evaluation
    /// defaults to the final grid time at each of `x_points`.
    pub fn new(
        v: ScalarField,
        f: ScalarField,
        grid: TimeGrid,
        m_paths: usize,
        seed: u64,
        x_points: Vec<Vec<f64>>,
    ) -> Result<FkConfig> {
        let section = LagrangianSection::new(f)?;
        let n = section.n();
        if v.n() != n || v.space() != VarSpace::Phase {
            return Err(Error::dim(
                "potential must be compiled on the same phase space as the section",
            ));
        }
        if v.uses_p() || v.uses_t() {
            return Err(Error::dim("potential must depend on q only"));
        }
        if m_paths < 100 {
            return Err(Error::dim(format!(
                "path count {m_paths} too small for meaningful statistics (need >= 100)"
            )));
        }
        if x_points.is_empty() {
            return Err(Error::dim("need at least one evaluation point"));
        }
        for x in &x_points {
            if x.len() != n {
                return Err(Error::dim(format!(
                    "evaluation point has {} coordinates, expected {n}",
                    x.len()
                )));
            }
        }
        let kinetic = (1..=n)
            .map(|i| format!("p{i}^2"))
            .collect::<Vec<_>>()
            .join(" + ");
        let h0 = format!("({kinetic})/2 + ({})", v.source());
        let mut fields = vec![compile_str(&h0, n, VarSpace::Phase)?];
        for i in 1..=n {
            fields.push(compile_str(&format!("p{i}"), n, VarSpace::Phase)?);
        }
        let system = HamiltonianSystem::new(fields)?;
        Ok(FkConfig {
            v,
            section,
            system,
            grid,
            m_paths,
            seed,
            x_points,
            eval_nodes: vec![grid.steps()],
            shooting: ShootingConfig::default(),
        })
    }

    /// Replaces the evaluation times; each must sit on a grid node.
    pub fn with_eval_times(mut self, times: &[f64]) -> Result<FkConfig> {
        if times.is_empty() {
            return Err(Error::dim("need at least one evaluation time"));
        }
        let dt = self.grid.dt();
        let mut nodes = Vec::with_capacity(times.len());
        for &t in times {
            let k = (t / dt).round();
            if k < 0.0 || k > self.grid.steps() as f64 || (t - k * dt).abs() > 1e-9 * dt.max(t) {
                return Err(Error::dim(format!(
                    "evaluation time {t} does not sit on a node of the {}-step grid",
                    self.grid.steps()
                )));
            }
            nodes.push(k as usize);
        }
        self.eval_nodes = nodes;
        Ok(self)
    }

    pub fn with_shooting(mut self, shooting: ShootingConfig) -> FkConfig {
        self.shooting = shooting;
        self
    }

    pub fn n(&self) -> usize {
        self.section.n()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn m_paths(&self) -> usize {
        self.m_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn x_points(&self) -> &[Vec<f64>] {
        &self.x_points
    }

    pub fn eval_nodes(&self) -> &[usize] {
        &self.eval_nodes
    }

    pub fn potential(&self) -> &ScalarField {
        &self.v
    }

    /// The assembled `h_0 = 1/2 sum p_i^2 + V`, `h_i = p_i` system.
    pub fn system(&self) -> &HamiltonianSystem {
        &self.system
    }
}

/// One `(x, t)` evaluation of the estimator.
#[derive(Debug, Clone)]
pub struct FkRow {
    pub x: Vec<f64>,
    pub t: f64,
    /// Mean projected action over the surviving paths.
    pub mean_s: f64,
    /// Sample standard error of that mean.
    pub stderr: f64,
    /// `exp(-mean_s)`; always positive.
    pub phi_hat: f64,
    /// Reference value filled in by [`fk_compare`].
    pub phi_ref: Option<f64>,
    pub abs_err: Option<f64>,
    /// `Some(true)` = PASS, `Some(false)` = FAIL, `None` = not compared.
    pub pass: Option<bool>,
    /// Paths whose shooting truncated before `t` (excluded from the mean).
    pub truncated: usize,
    /// Paths that contributed to the mean.
    pub used: usize,
}

/// Estimator output: one row per `(x, t)` in declaration order (`x` outer,
/// `t` inner), reliability warnings, and aggregated solver statistics.
#[derive(Debug, Clone)]
pub struct FkReport {
    rows: Vec<FkRow>,
    m_paths: usize,
    warnings: Vec<String>,
    stats: SolverStats,
}

impl FkReport {
    pub fn rows(&self) -> &[FkRow] {
        &self.rows
    }

    pub fn m_paths(&self) -> usize {
        self.m_paths
    }

    /// Reliability warnings (rows that lost more than 10% of their paths).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn stats(&self) -> &SolverStats {
        &self.stats
    }

    /// True when every row was compared and passed.
    pub fn all_pass(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.pass == Some(true))
    }

    /// Writes `x, t, mean_s, stderr, phi_hat, phi_ref, abs_err, verdict,
    /// truncated, used` rows; vector `x` components are space-separated
    /// inside the cell.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "x,t,mean_s,stderr,phi_hat,phi_ref,abs_err,verdict,truncated,used"
        )?;
        for row in &self.rows {
            let x = row
                .x
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            write!(w, "{x},{},{},{},{}", row.t, row.mean_s, row.stderr, row.phi_hat)?;
            match (row.phi_ref, row.abs_err) {
                (Some(pr), Some(ae)) => write!(w, ",{pr},{ae}")?,
                _ => write!(w, ",,")?,
            }
            let verdict = match row.pass {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "",
            };
            writeln!(w, ",{verdict},{},{}", row.truncated, row.used)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

/// Sums with a fixed pairwise split so the result does not depend on how
/// the values were produced across threads.
fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Runs the Monte-Carlo estimator: shoots the section over `m_paths`
/// sampled paths, averages the projected action per `(x, t)` (excluding
/// and counting truncated paths), and exponentiates the mean.
pub fn fk_estimate(cfg: &FkConfig) -> Result<FkReport> {
    let n = cfg.n();
    let slots = cfg.x_points.len() * cfg.eval_nodes.len();
    let per_path: Vec<Result<(Vec<Option<f64>>, SolverStats)>> = (0..cfg.m_paths)
        .into_par_iter()
        .map(|pi| {
            let path = NoisePath::sample(cfg.grid, n, cfg.seed, pi as u64);
            let mut values = Vec::with_capacity(slots);
            let mut stats = SolverStats::default();
            for x in &cfg.x_points {
                let sp = shoot(&cfg.system, &cfg.section, x, &path, &cfg.shooting)?;
                stats.absorb(sp.stats());
                for &node in &cfg.eval_nodes {
                    values.push((node < sp.nodes()).then(|| sp.s_tilde(node)));
                }
            }
            Ok((values, stats))
        })
        .collect();

    // Order-insensitive reduction: per-path results are indexed by path,
    // so the statistics below never depend on thread scheduling.
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.m_paths); slots];
    let mut truncated = vec![0usize; slots];
    let mut stats = SolverStats::default();
    for item in per_path {
        let (values, st) = item?;
        stats.absorb(&st);
        for (slot, value) in values.iter().enumerate() {
            match value {
                Some(v) => samples[slot].push(*v),
                None => truncated[slot] += 1,
            }
        }
    }

    let mut rows = Vec::with_capacity(slots);
    let mut warnings = Vec::new();
    for (xi, x) in cfg.x_points.iter().enumerate() {
        for (ti, &node) in cfg.eval_nodes.iter().enumerate() {
            let slot = xi * cfg.eval_nodes.len() + ti;
            let t = cfg.grid.node(node);
            let values = &samples[slot];
            let used = values.len();
            if used == 0 {
                return Err(Error::State {
                    message: format!(
                        "every path truncated before t = {t} at x = {x:?}; no estimate possible"
                    ),
                });
            }
            let mean = pairwise_sum(values) / used as f64;
            let variance = if used > 1 {
                let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
                pairwise_sum(&sq) / (used - 1) as f64
            } else {
                0.0
            };
            let stderr = (variance / used as f64).sqrt();
            if truncated[slot] * 10 > cfg.m_paths {
                warnings.push(format!(
                    "reliability: {} of {} paths truncated before t = {t} at x = {x:?}",
                    truncated[slot], cfg.m_paths
                ));
            }
            rows.push(FkRow {
                x: x.clone(),
                t,
                mean_s: mean,
                stderr,
                phi_hat: (-mean).exp(),
                phi_ref: None,
                abs_err: None,
                pass: None,
                truncated: truncated[slot],
                used,
            });
        }
    }
    Ok(FkReport {
        rows,
        m_paths: cfg.m_paths,
        warnings,
        stats,
    })
}

/// Fills per-row reference values and verdicts: PASS when
/// `|phi_hat - phi_ref| <= 3 * phi_hat * stderr + budget_rel * |phi_ref|`
/// (the standard error of the mean pushed through the exponential, plus a
/// declared discretization budget). Returns the number of failing rows.
pub fn fk_compare<F>(report: &mut FkReport, reference: F, budget_rel: f64) -> Result<usize>
where
    F: Fn(&[f64], f64) -> Result<f64>,
{
    if !(budget_rel >= 0.0) {
        return Err(Error::dim("comparison budget must be non-negative"));
    }
    let mut failures = 0;
    for row in &mut report.rows {
        let phi_ref = reference(&row.x, row.t)?;
        let abs_err = (row.phi_hat - phi_ref).abs();
        let tolerance = 3.0 * row.phi_hat * row.stderr + budget_rel * phi_ref.abs();
        let pass = abs_err <= tolerance;
        row.phi_ref = Some(phi_ref);
        row.abs_err = Some(abs_err);
        row.pass = Some(pass);
        if !pass {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Crank-Nicolson solution of `dPhi/dt = V Phi + 1/2 d2Phi/dx2` on a mesh.
#[derive(Debug, Clone)]
pub struct PdeField {
    xs: Vec<f64>,
    times: Vec<f64>,
    /// Row-major `times.len() x xs.len()`.
    values: Vec<f64>,
}

impl PdeField {
    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Mesh value at time node `k`, mesh point `i`.
    pub fn node_value(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.xs.len() + i]
    }

    /// Value at `(x, t)`: `t` must sit on a time node; `x` is linearly
    /// interpolated inside the mesh.
    pub fn value(&self, x: f64, t: f64) -> Result<f64> {
        let dt = if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            1.0
        };
        let k = ((t - self.times[0]) / dt).round();
        let idx = k as usize;
        if k < 0.0 || idx >= self.times.len() || (t - self.times[idx.min(self.times.len() - 1)]).abs() > 1e-9 * dt.max(1.0)
        {
            return Err(Error::Pde {
                message: format!("time {t} is not a node of the reference mesh"),
            });
        }
        let (lo, hi) = (self.xs[0], *self.xs.last().unwrap());
        if x < lo || x > hi {
            return Err(Error::Pde {
                message: format!("x = {x} outside the reference domain [{lo}, {hi}]"),
            });
        }
        let h = (hi - lo) / (self.xs.len() - 1) as f64;
        let cell = (((x - lo) / h).floor() as usize).min(self.xs.len() - 2);
        let w = (x - self.xs[cell]) / h;
        Ok((1.0 - w) * self.node_value(idx, cell) + w * self.node_value(idx, cell + 1))
    }
}

/// Solves `dPhi/dt = V Phi + 1/2 d2Phi/dx2`, `Phi_0 = exp(-f)`, by
/// Crank-Nicolson over the time grid, on `x_interval` padded by
/// `4 sqrt(t_end)` so the held Dirichlet boundary values influence the
/// interval of interest below the estimator tolerances.
pub fn pde_reference(
    v: &ScalarField,
    f: &ScalarField,
    x_interval: (f64, f64),
    dx: f64,
    grid: &TimeGrid,
) -> Result<PdeField> {
    for field in [v, f] {
        if field.n() != 1 || field.space() != VarSpace::Phase {
            return Err(Error::Pde {
                message: "reference solver handles 1D potentials and sections only".into(),
            });
        }
        if field.uses_p() || field.uses_t() {
            return Err(Error::Pde {
                message: "potential and section must depend on q only".into(),
            });
        }
    }
    if !(dx > 0.0) || !x_interval.0.is_finite() || !x_interval.1.is_finite()
        || x_interval.0 > x_interval.1
    {
        return Err(Error::Pde {
            message: "need a finite ordered x-interval and a positive dx".into(),
        });
    }
    let buffer = 4.0 * grid.t_end().sqrt();
    let lo = x_interval.0 - buffer;
    let hi = x_interval.1 + buffer;
    let nx = (((hi - lo) / dx).ceil() as usize).max(2) + 1;
    let h = (hi - lo) / (nx - 1) as f64;
    let xs: Vec<f64> = (0..nx).map(|i| lo + i as f64 * h).collect();

    let mut ws = FieldWorkspace::new();
    let mut z = [0.0f64, 0.0];
    let mut pot = vec![0.0; nx];
    let mut phi = vec![0.0; nx];
    for i in 0..nx {
        z[0] = xs[i];
        pot[i] = v.eval_value(0.0, &z, &mut ws)?;
        phi[i] = (-f.eval_value(0.0, &z, &mut ws)?).exp();
    }

    // A = V + 1/2 D2; both Crank-Nicolson operators I -+ dt/2 A are
    // tridiagonal with time-independent coefficients, so the forward
    // elimination of the Thomas solve is factored once.
    let dt = grid.dt();
    let c = 0.5 * dt;
    let lam = c / (2.0 * h * h);
    let mut diag = vec![0.0; nx];
    let mut sub = vec![0.0; nx];
    let mut sup = vec![0.0; nx];
    for i in 0..nx {
        diag[i] = 1.0 - c * pot[i] + 2.0 * lam;
        sub[i] = -lam;
        sup[i] = -lam;
    }
    // Dirichlet rows: identity, held at the initial values.
    diag[0] = 1.0;
    sup[0] = 0.0;
    diag[nx - 1] = 1.0;
    sub[nx - 1] = 0.0;

    let mut cp = vec![0.0; nx];
    let mut beta = vec![0.0; nx];
    beta[0] = diag[0];
    cp[0] = sup[0] / beta[0];
    for i in 1..nx {
        beta[i] = diag[i] - sub[i] * cp[i - 1];
        if beta[i] == 0.0 || !beta[i].is_finite() {
            return Err(Error::Pde {
                message: format!("singular tridiagonal factorization at row {i}"),
            });
        }
        cp[i] = sup[i] / beta[i];
    }

    let steps = grid.steps();
    let mut values = Vec::with_capacity((steps + 1) * nx);
    values.extend_from_slice(&phi);
    let mut rhs = vec![0.0; nx];
    let (left, right) = (phi[0], phi[nx - 1]);
    for _ in 0..steps {
        rhs[0] = left;
        rhs[nx - 1] = right;
        for i in 1..nx - 1 {
            rhs[i] = phi[i]
                + c * pot[i] * phi[i]
                + lam * (phi[i - 1] - 2.0 * phi[i] + phi[i + 1]);
        }
        rhs[0] /= beta[0];
        for i in 1..nx {
            rhs[i] = (rhs[i] - sub[i] * rhs[i - 1]) / beta[i];
        }
        for i in (0..nx - 1).rev() {
            rhs[i] -= cp[i] * rhs[i + 1];
        }
        phi.copy_from_slice(&rhs);
        values.extend_from_slice(&phi);
    }
    let times = (0..=steps).map(|k| grid.node(k)).collect();
    Ok(PdeField { xs, times, values })
}
