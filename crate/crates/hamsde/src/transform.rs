//! Canonical transforms from generating functions `S(t, a, b)`.
//!
//! `S` mixes old base coordinates `a = q1` with new base coordinates
//! `b = q2`. Its differential defines two maps:
//!
//! - `j_inverse(t, q1, q2) = (q1, dS/da)`, the old phase point written in
//!   mixed coordinates;
//! - `psi_t(q, p) = (b, -dS/db)` where `b` solves `dS/da(t, q, b) = p`,
//!   the time-dependent symplectomorphism the generating function induces
//!   (solved by Newton on the twist block `d2S/da db`).
//!
//! Pushing a Hamiltonian system through `psi_t` replaces each `h_j` by
//! `K_j = h_j o j_inverse` (plus `dS/dt` for the drift). When every `K_j`
//! is independent of `q1` the transformed equations collapse to
//! `dQ = 0, dP = -dK/dQ dX`: motion is reduced to equilibrium in the new
//! chart. [`transform_hamiltonians`] measures that independence on a probe
//! grid, [`equilibrium_check`] verifies the reduction pathwise against the
//! mapped flow, and [`bracket_conditions`] checks the commutation relations
//! (`{h_i, h_j} = 0`, `{h_0, h_i} + dK_i/dt = 0`) that such an `S` forces
//! on the Hamiltonians.

use std::io::Write;

use crate::error::{Error, Result};
use crate::field::{FieldWorkspace, ScalarField, VarSpace};
use crate::geometry::{poisson_bracket, HamiltonianSystem, PhaseState};
use crate::integrator::{integrate_flow, SchemeConfig};
use crate::linalg::{lu_factor, lu_solve_rows};
use crate::noise::NoisePath;

/// A generating function `S(t, a, b)` of old and new base coordinates,
/// compiled over the `a1..an, b1..bn` variable set.
#[derive(Debug, Clone)]
pub struct GeneratingFunction {
    field: ScalarField,
}

impl GeneratingFunction {
    pub fn new(field: ScalarField) -> Result<GeneratingFunction> {
        if field.space() != VarSpace::Generating {
            return Err(Error::dim(
                "generating function must use the a1..an, b1..bn variable set",
            ));
        }
        Ok(GeneratingFunction { field })
    }

    pub fn n(&self) -> usize {
        self.field.n()
    }

    pub fn source(&self) -> &str {
        self.field.source()
    }

    /// `S(t, q1, q2)`.
    pub fn value(&self, t: f64, q1: &[f64], q2: &[f64]) -> Result<f64> {
        let mut w = TWork::new(self.check_dims(q1, q2)?);
        pack(&mut w.zs, q1, q2);
        self.field.eval_value(t, &w.zs, &mut w.ws)
    }

    /// The old phase point in mixed coordinates: `(q1, dS/da(t, q1, q2))`.
    pub fn j_inverse(&self, t: f64, q1: &[f64], q2: &[f64]) -> Result<PhaseState> {
        let n = self.check_dims(q1, q2)?;
        let mut w = TWork::new(n);
        pack(&mut w.zs, q1, q2);
        self.field.eval_grad(t, &w.zs, &mut w.ws, &mut w.gs)?;
        PhaseState::new(q1.to_vec(), w.gs[1..=n].to_vec())
    }

    /// Determinant of the twist block `d2S/da db(t, q1, q2)`; the implicit
    /// solves in [`apply_psi`] need it nonzero.
    pub fn twist_determinant(&self, t: f64, q1: &[f64], q2: &[f64]) -> Result<f64> {
        let n = self.check_dims(q1, q2)?;
        let mut w = TWork::new(n);
        pack(&mut w.zs, q1, q2);
        self.field
            .eval_hess(t, &w.zs, &mut w.ws, &mut w.gs, &mut w.hs)?;
        let m = 2 * n + 1;
        for i in 0..n {
            for j in 0..n {
                w.twist[i * n + j] = w.hs[(1 + i) * m + (1 + n + j)];
            }
        }
        Ok(lu_factor(&mut w.twist, n, &mut w.piv))
    }

    fn check_dims(&self, q1: &[f64], q2: &[f64]) -> Result<usize> {
        let n = self.n();
        if q1.len() != n || q2.len() != n {
            return Err(Error::dim(format!(
                "expected {n}-dimensional base points, got {} and {}",
                q1.len(),
                q2.len()
            )));
        }
        Ok(n)
    }
}

fn pack(zs: &mut [f64], q1: &[f64], q2: &[f64]) {
    let n = q1.len();
    zs[..n].copy_from_slice(q1);
    zs[n..].copy_from_slice(q2);
}

/// Probe layout for the `q1`-independence and twist checks: a box in `t`,
/// `q1` and `q2`, sampled on axis-uniform grids (full Cartesian product
/// over coordinates).
#[derive(Debug, Clone, Copy)]
pub struct ProbeGrid {
    pub t_range: (f64, f64),
    pub t_samples: usize,
    /// Range applied to every coordinate of both `q1` and `q2`.
    pub q_range: (f64, f64),
    /// Points per `q1` axis; the spread of `K_j` over these measures the
    /// independence defect.
    pub q1_points: usize,
    /// Sample points per `q2` axis at which the spread is taken.
    pub q2_samples: usize,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        ProbeGrid {
            t_range: (0.25, 1.0),
            t_samples: 5,
            q_range: (-1.0, 1.0),
            q1_points: 11,
            q2_samples: 5,
        }
    }
}

impl ProbeGrid {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok_range(self.t_range) || !ok_range(self.q_range) {
            return Err(Error::dim("probe ranges must be finite and ordered"));
        }
        if self.t_samples == 0 || self.q1_points < 2 || self.q2_samples == 0 {
            return Err(Error::dim(
                "probe grid needs t/q2 samples and at least two q1 points",
            ));
        }
        Ok(())
    }

    fn axis(range: (f64, f64), count: usize) -> Vec<f64> {
        if count == 1 {
            return vec![0.5 * (range.0 + range.1)];
        }
        (0..count)
            .map(|i| range.0 + (range.1 - range.0) * i as f64 / (count - 1) as f64)
            .collect()
    }

    fn t_values(&self) -> Vec<f64> {
        Self::axis(self.t_range, self.t_samples)
    }

    /// Cartesian product of the per-axis values over `n` coordinates.
    fn product(values: &[f64], n: usize) -> Vec<Vec<f64>> {
        let total = values.len().pow(n as u32);
        let mut out = Vec::with_capacity(total);
        for mut idx in 0..total {
            let mut point = vec![0.0; n];
            for slot in point.iter_mut() {
                *slot = values[idx % values.len()];
                idx /= values.len();
            }
            out.push(point);
        }
        out
    }

    fn q1_grid(&self, n: usize) -> Vec<Vec<f64>> {
        Self::product(&Self::axis(self.q_range, self.q1_points), n)
    }

    fn q2_grid(&self, n: usize) -> Vec<Vec<f64>> {
        Self::product(&Self::axis(self.q_range, self.q2_samples), n)
    }
}

/// Knobs for the implicit `psi` solves and the independence requirement.
#[derive(Debug, Clone, Copy)]
pub struct TransformConfig {
    /// Max-norm tolerance of the implicit-relation residual.
    pub newton_tol: f64,
    /// Newton budget per solve.
    pub max_newton: usize,
    /// Largest acceptable `q1`-independence defect for reduction runs.
    pub indep_tol: f64,
    pub probes: ProbeGrid,
    /// Integrator settings for the flow leg of [`equilibrium_check`].
    pub solver: SchemeConfig,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            newton_tol: 1e-12,
            max_newton: 32,
            indep_tol: 1e-8,
            probes: ProbeGrid::default(),
            solver: SchemeConfig::default(),
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.newton_tol > 0.0) || !(self.indep_tol > 0.0) {
            return Err(Error::dim("transform tolerances must be positive"));
        }
        if self.max_newton == 0 {
            return Err(Error::dim("Newton budget must be at least 1"));
        }
        self.probes.validate()?;
        self.solver.validate()
    }
}

/// Scratch shared by the implicit solves and composed evaluations.
struct TWork {
    ws: FieldWorkspace,
    wh: FieldWorkspace,
    zs: Vec<f64>,
    gs: Vec<f64>,
    hs: Vec<f64>,
    zj: Vec<f64>,
    gh: Vec<f64>,
    twist: Vec<f64>,
    piv: Vec<usize>,
    rhs: Vec<f64>,
}

impl TWork {
    fn new(n: usize) -> TWork {
        let m = 2 * n + 1;
        TWork {
            ws: FieldWorkspace::new(),
            wh: FieldWorkspace::new(),
            zs: vec![0.0; 2 * n],
            gs: vec![0.0; m],
            hs: vec![0.0; m * m],
            zj: vec![0.0; 2 * n],
            gh: vec![0.0; m],
            twist: vec![0.0; n * n],
            piv: vec![0; n],
            rhs: vec![0.0; n],
        }
    }
}

/// Newton-solves `dS/da(t, q, b) = p` for `b`, leaving the gradient of `S`
/// at the solution in `w.gs`. `seed` initializes `b`.
fn solve_new_base(
    s: &GeneratingFunction,
    t: f64,
    q: &[f64],
    p: &[f64],
    seed: &[f64],
    cfg: &TransformConfig,
    w: &mut TWork,
) -> Result<Vec<f64>> {
    let n = s.n();
    let m = 2 * n + 1;
    let mut b = seed.to_vec();
    for _ in 0..cfg.max_newton {
        pack(&mut w.zs, q, &b);
        s.field.eval_hess(t, &w.zs, &mut w.ws, &mut w.gs, &mut w.hs)?;
        let mut worst = 0.0f64;
        for i in 0..n {
            w.rhs[i] = w.gs[1 + i] - p[i];
            worst = worst.max(w.rhs[i].abs());
        }
        if !worst.is_finite() {
            return Err(Error::Transform {
                message: "implicit relation produced a non-finite residual".into(),
            });
        }
        if worst <= cfg.newton_tol {
            return Ok(b);
        }
        for i in 0..n {
            for j in 0..n {
                w.twist[i * n + j] = w.hs[(1 + i) * m + (1 + n + j)];
            }
        }
        let det = lu_factor(&mut w.twist, n, &mut w.piv);
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Transform {
                message: "twist block d2S/da db is singular at the iterate".into(),
            });
        }
        lu_solve_rows(&w.twist, n, &w.piv, &mut w.rhs, 1)?;
        for i in 0..n {
            b[i] -= w.rhs[i];
        }
    }
    Err(Error::Transform {
        message: format!(
            "implicit solve for the new base point did not reach {} in {} iterations",
            cfg.newton_tol, cfg.max_newton
        ),
    })
}

fn psi_into(
    s: &GeneratingFunction,
    t: f64,
    q: &[f64],
    p: &[f64],
    cfg: &TransformConfig,
    w: &mut TWork,
) -> Result<PhaseState> {
    let n = s.n();
    let b = solve_new_base(s, t, q, p, q, cfg, w)?;
    let new_p = (0..n).map(|i| -w.gs[1 + n + i]).collect();
    PhaseState::new(b, new_p)
}

/// The symplectomorphism of `S` at time `t`: solves the implicit relation
/// `p = dS/da(t, q, b)` for the new base point `b` and returns
/// `(b, -dS/db)`.
pub fn apply_psi(
    s: &GeneratingFunction,
    t: f64,
    z: &PhaseState,
    cfg: &TransformConfig,
) -> Result<PhaseState> {
    if z.n() != s.n() {
        return Err(Error::dim("state dimension does not match S"));
    }
    cfg.validate()?;
    let mut w = TWork::new(s.n());
    psi_into(s, t, &z.q, &z.p, cfg, &mut w)
}

/// Inverse of [`apply_psi`]: given `(Q, P)`, solves `-dS/db(t, a, Q) = P`
/// for the old base point `a` and returns `(a, dS/da(t, a, Q))`.
pub fn apply_psi_inverse(
    s: &GeneratingFunction,
    t: f64,
    z: &PhaseState,
    cfg: &TransformConfig,
) -> Result<PhaseState> {
    if z.n() != s.n() {
        return Err(Error::dim("state dimension does not match S"));
    }
    cfg.validate()?;
    let n = s.n();
    let m = 2 * n + 1;
    let mut w = TWork::new(n);
    let mut a = z.q.clone();
    for _ in 0..cfg.max_newton {
        pack(&mut w.zs, &a, &z.q);
        s.field.eval_hess(t, &w.zs, &mut w.ws, &mut w.gs, &mut w.hs)?;
        let mut worst = 0.0f64;
        for i in 0..n {
            w.rhs[i] = w.gs[1 + n + i] + z.p[i];
            worst = worst.max(w.rhs[i].abs());
        }
        if !worst.is_finite() {
            return Err(Error::Transform {
                message: "inverse relation produced a non-finite residual".into(),
            });
        }
        if worst <= cfg.newton_tol {
            let p = (0..n).map(|i| w.gs[1 + i]).collect();
            return PhaseState::new(a, p);
        }
        for i in 0..n {
            for j in 0..n {
                w.twist[i * n + j] = w.hs[(1 + n + i) * m + (1 + j)];
            }
        }
        let det = lu_factor(&mut w.twist, n, &mut w.piv);
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Transform {
                message: "twist block d2S/db da is singular at the iterate".into(),
            });
        }
        lu_solve_rows(&w.twist, n, &w.piv, &mut w.rhs, 1)?;
        for i in 0..n {
            a[i] -= w.rhs[i];
        }
    }
    Err(Error::Transform {
        message: format!(
            "inverse implicit solve did not reach {} in {} iterations",
            cfg.newton_tol, cfg.max_newton
        ),
    })
}

/// Central-difference Jacobian of `psi_t` over the phase point, row-major
/// `2n x 2n`; its symplectic defect measures how canonically the implicit
/// solve behaves.
pub fn psi_jacobian_fd(
    s: &GeneratingFunction,
    t: f64,
    z: &PhaseState,
    h: f64,
    cfg: &TransformConfig,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::dim("finite-difference step must be positive"));
    }
    let n = s.n();
    let d = 2 * n;
    let mut w = TWork::new(n);
    let mut flat = z.flat();
    let mut jac = vec![0.0; d * d];
    for c in 0..d {
        let base = flat[c];
        flat[c] = base + h;
        let plus = psi_into(s, t, &flat[..n], &flat[n..], cfg, &mut w)?.flat();
        flat[c] = base - h;
        let minus = psi_into(s, t, &flat[..n], &flat[n..], cfg, &mut w)?.flat();
        flat[c] = base;
        for row in 0..d {
            jac[row * d + c] = (plus[row] - minus[row]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// The Hamiltonians pushed through the transform, with measured
/// `q1`-independence defects.
#[derive(Debug)]
pub struct TransformedSystem<'a> {
    s: &'a GeneratingFunction,
    system: &'a HamiltonianSystem,
    defects: Vec<f64>,
    min_twist: f64,
}

impl<'a> TransformedSystem<'a> {
    pub fn generating(&self) -> &GeneratingFunction {
        self.s
    }

    pub fn base(&self) -> &HamiltonianSystem {
        self.system
    }

    /// Per-channel spread of `K_j` over the `q1` probe grid (zero when the
    /// transformed Hamiltonian depends on `(t, q2)` only).
    pub fn defects(&self) -> &[f64] {
        &self.defects
    }

    pub fn max_defect(&self) -> f64 {
        self.defects.iter().fold(0.0f64, |a, v| a.max(*v))
    }

    /// Smallest `|det d2S/da db|` seen on the probe grid.
    pub fn min_twist(&self) -> f64 {
        self.min_twist
    }

    /// `K_j(t, q1, q2) = h_j(t, j_inverse) (+ dS/dt for j = 0)`.
    pub fn k_value(&self, j: usize, t: f64, q1: &[f64], q2: &[f64]) -> Result<f64> {
        if j > self.system.r() {
            return Err(Error::dim(format!(
                "channel {j} out of range for r = {}",
                self.system.r()
            )));
        }
        let mut w = TWork::new(self.s.check_dims(q1, q2)?);
        k_eval(self.s, self.system, j, t, q1, q2, &mut w)
    }
}

fn k_eval(
    s: &GeneratingFunction,
    system: &HamiltonianSystem,
    j: usize,
    t: f64,
    q1: &[f64],
    q2: &[f64],
    w: &mut TWork,
) -> Result<f64> {
    let n = s.n();
    pack(&mut w.zs, q1, q2);
    s.field.eval_grad(t, &w.zs, &mut w.ws, &mut w.gs)?;
    w.zj[..n].copy_from_slice(q1);
    for i in 0..n {
        w.zj[n + i] = w.gs[1 + i];
    }
    let mut value = system.fields()[j].eval_value(t, &w.zj, &mut w.wh)?;
    if j == 0 {
        value += w.gs[0];
    }
    Ok(value)
}

/// Gradient of `K_j` with respect to `q2` (chain rule through the mixed
/// second partials of `S`), written into `out`.
#[allow(clippy::too_many_arguments)]
fn k_grad_q2(
    s: &GeneratingFunction,
    system: &HamiltonianSystem,
    j: usize,
    t: f64,
    q1: &[f64],
    q2: &[f64],
    w: &mut TWork,
    out: &mut [f64],
) -> Result<()> {
    let n = s.n();
    let m = 2 * n + 1;
    pack(&mut w.zs, q1, q2);
    s.field
        .eval_hess(t, &w.zs, &mut w.ws, &mut w.gs, &mut w.hs)?;
    w.zj[..n].copy_from_slice(q1);
    for i in 0..n {
        w.zj[n + i] = w.gs[1 + i];
    }
    system.fields()[j].eval_grad(t, &w.zj, &mut w.wh, &mut w.gh)?;
    for mm in 0..n {
        let mut acc = 0.0;
        for l in 0..n {
            acc += w.gh[1 + n + l] * w.hs[(1 + l) * m + (1 + n + mm)];
        }
        if j == 0 {
            acc += w.hs[1 + n + mm];
        }
        out[mm] = acc;
    }
    Ok(())
}

/// Time partial of `K_j` at fixed `(q1, q2)`:
/// `dh_j/dt + sum_l dh_j/dp_l d2S/dt da_l`.
fn k_time_partial(
    s: &GeneratingFunction,
    system: &HamiltonianSystem,
    j: usize,
    t: f64,
    q1: &[f64],
    q2: &[f64],
    w: &mut TWork,
) -> Result<f64> {
    let n = s.n();
    pack(&mut w.zs, q1, q2);
    s.field
        .eval_hess(t, &w.zs, &mut w.ws, &mut w.gs, &mut w.hs)?;
    w.zj[..n].copy_from_slice(q1);
    for i in 0..n {
        w.zj[n + i] = w.gs[1 + i];
    }
    system.fields()[j].eval_grad(t, &w.zj, &mut w.wh, &mut w.gh)?;
    // d2S/dt da_l sits in row 0 of the Hessian, at flat index 1 + l.
    let mut acc = w.gh[0];
    for l in 0..n {
        acc += w.gh[1 + n + l] * w.hs[1 + l];
    }
    Ok(acc)
}

/// Composes every `h_j` with the transform and measures how far each `K_j`
/// is from depending on `(t, q2)` alone, over the probe grid.
pub fn transform_hamiltonians<'a>(
    s: &'a GeneratingFunction,
    system: &'a HamiltonianSystem,
    probes: &ProbeGrid,
) -> Result<TransformedSystem<'a>> {
    if s.n() != system.n() {
        return Err(Error::dim(format!(
            "S has n = {}, system has n = {}",
            s.n(),
            system.n()
        )));
    }
    probes.validate()?;
    let n = s.n();
    let m = 2 * n + 1;
    let t_vals = probes.t_values();
    let q1_pts = probes.q1_grid(n);
    let q2_pts = probes.q2_grid(n);
    let mut w = TWork::new(n);
    let mut defects = vec![0.0f64; system.r() + 1];
    let mut min_twist = f64::INFINITY;
    for t in &t_vals {
        for q2 in &q2_pts {
            for (j, defect) in defects.iter_mut().enumerate() {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for q1 in &q1_pts {
                    let v = k_eval(s, system, j, *t, q1, q2, &mut w)?;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                *defect = defect.max(hi - lo);
            }
            for q1 in &q1_pts {
                pack(&mut w.zs, q1, q2);
                s.field
                    .eval_hess(*t, &w.zs, &mut w.ws, &mut w.gs, &mut w.hs)?;
                for i in 0..n {
                    for jj in 0..n {
                        w.twist[i * n + jj] = w.hs[(1 + i) * m + (1 + n + jj)];
                    }
                }
                let det = lu_factor(&mut w.twist, n, &mut w.piv);
                min_twist = min_twist.min(det.abs());
            }
        }
    }
    Ok(TransformedSystem {
        s,
        system,
        defects,
        min_twist,
    })
}

/// Side-by-side comparison of the mapped flow `psi_t(Gamma_k)` against the
/// reduced integration `dQ = 0, dP = -dK/dQ dX` from the same start.
#[derive(Debug, Clone)]
pub struct EquilibriumReport {
    n: usize,
    times: Vec<f64>,
    mapped: Vec<f64>,
    reduced: Vec<f64>,
    max_discrepancy: f64,
    max_q_drift: f64,
}

impl EquilibriumReport {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nodes(&self) -> usize {
        self.times.len()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    /// `psi_{t_k}(Gamma_k)`, flat `(Q, P)`.
    pub fn mapped_state(&self, k: usize) -> &[f64] {
        let d = 2 * self.n;
        &self.mapped[k * d..(k + 1) * d]
    }

    /// The directly integrated equilibrium-form state, flat `(Q, P)`.
    pub fn reduced_state(&self, k: usize) -> &[f64] {
        let d = 2 * self.n;
        &self.reduced[k * d..(k + 1) * d]
    }

    /// Worst component gap between the mapped and reduced paths.
    pub fn max_discrepancy(&self) -> f64 {
        self.max_discrepancy
    }

    /// Worst drift of the mapped `Q` from its initial value; zero means the
    /// new base coordinate is an exact invariant along the flow.
    pub fn max_q_drift(&self) -> f64 {
        self.max_q_drift
    }

    /// Writes `k, t_k, Qm*, Pm*, Qr*, Pr*, gap` rows (mapped then reduced).
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "k,t_k")?;
        for tag in ["Qm", "Pm", "Qr", "Pr"] {
            for i in 1..=self.n {
                write!(w, ",{tag}{i}")?;
            }
        }
        writeln!(w, ",gap")?;
        for k in 0..self.nodes() {
            write!(w, "{k},{}", self.times[k])?;
            for v in self.mapped_state(k) {
                write!(w, ",{v}")?;
            }
            for v in self.reduced_state(k) {
                write!(w, ",{v}")?;
            }
            let gap = self
                .mapped_state(k)
                .iter()
                .zip(self.reduced_state(k))
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            writeln!(w, ",{gap}")?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

/// Integrates the base system, maps every node through `psi_t`, and
/// re-integrates the transformed equilibrium-form equations from the mapped
/// start on the same noise; reports the worst gap and the drift of `Q`.
/// Requires the `q1`-independence defects to pass `cfg.indep_tol`.
pub fn equilibrium_check(
    s: &GeneratingFunction,
    system: &HamiltonianSystem,
    z0: &PhaseState,
    path: &NoisePath,
    cfg: &TransformConfig,
) -> Result<EquilibriumReport> {
    cfg.validate()?;
    let trans = transform_hamiltonians(s, system, &cfg.probes)?;
    if trans.max_defect() > cfg.indep_tol {
        return Err(Error::Transform {
            message: format!(
                "transformed Hamiltonians still depend on q1 (defect {:.3e} > {:.3e})",
                trans.max_defect(),
                cfg.indep_tol
            ),
        });
    }
    let n = system.n();
    let d = 2 * n;
    let traj = integrate_flow(system, z0, path, &cfg.solver, false)?;
    let steps = traj.steps();
    let mut w = TWork::new(n);

    let mut times = Vec::with_capacity(steps + 1);
    let mut mapped = Vec::with_capacity((steps + 1) * d);
    for k in 0..=steps {
        let zk = traj.state_flat(k);
        let image = psi_into(s, traj.time(k), &zk[..n], &zk[n..], cfg, &mut w)?;
        times.push(traj.time(k));
        mapped.extend_from_slice(&image.flat());
    }

    // Reduced integration: Q frozen, P driven by the q2-gradients of K_j
    // evaluated at the (immaterial, by independence) anchor q1 = q(z0).
    let q1_anchor = z0.q.clone();
    let mut reduced = Vec::with_capacity((steps + 1) * d);
    let mut state = mapped[..d].to_vec();
    reduced.extend_from_slice(&state);
    let mut grad = vec![0.0; n];
    for k in 0..steps {
        let dx = path.step_increments(k);
        let t_mid = traj.time(k) + 0.5 * dx[0];
        for (j, _) in system.fields().iter().enumerate() {
            if dx[j] != 0.0 {
                k_grad_q2(s, system, j, t_mid, &q1_anchor, &state[..n], &mut w, &mut grad)?;
                for i in 0..n {
                    state[n + i] -= dx[j] * grad[i];
                }
            }
        }
        reduced.extend_from_slice(&state);
    }

    let mut max_discrepancy = 0.0f64;
    let mut max_q_drift = 0.0f64;
    for k in 0..=steps {
        for c in 0..d {
            max_discrepancy = max_discrepancy.max((mapped[k * d + c] - reduced[k * d + c]).abs());
        }
        for i in 0..n {
            max_q_drift = max_q_drift.max((mapped[k * d + i] - mapped[i]).abs());
        }
    }
    Ok(EquilibriumReport {
        n,
        times,
        mapped,
        reduced,
        max_discrepancy,
        max_q_drift,
    })
}

/// Deterministic pseudo-random `(t, z)` probes for bracket checks:
/// `count` samples with `t` in `t_range` and every phase coordinate in
/// `q_range`, reproducible from `seed`.
pub fn probe_states(
    count: usize,
    n: usize,
    seed: u64,
    t_range: (f64, f64),
    q_range: (f64, f64),
) -> Vec<(f64, PhaseState)> {
    let mut x = seed ^ 0x2545f4914f6cdd1d;
    if x == 0 {
        x = 0x9e3779b97f4a7c15;
    }
    let mut next = || {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        (x >> 11) as f64 / (1u64 << 53) as f64
    };
    let span_t = t_range.1 - t_range.0;
    let span_q = q_range.1 - q_range.0;
    (0..count)
        .map(|_| {
            let t = t_range.0 + span_t * next();
            let q: Vec<f64> = (0..n).map(|_| q_range.0 + span_q * next()).collect();
            let p: Vec<f64> = (0..n).map(|_| q_range.0 + span_q * next()).collect();
            (t, PhaseState::new(q, p).expect("matching q/p lengths"))
        })
        .collect()
}

/// Worst-case commutation defects over a probe set.
#[derive(Debug, Clone, Copy)]
pub struct BracketReport {
    /// `max |{h_i, h_j}|` over noise channel pairs and probes.
    pub noise_noise: f64,
    /// `max |{h_0, h_i} + dK_i/dt|` over noise channels and probes.
    pub drift_noise: f64,
}

impl BracketReport {
    pub fn max_defect(&self) -> f64 {
        self.noise_noise.max(self.drift_noise)
    }
}

/// Evaluates the necessary commutation relations for a reducing transform:
/// pairwise noise brackets `{h_i, h_j}` and the compensated drift brackets
/// `{h_0, h_i} + dK_i/dt` at each `(t, z)` probe, where the time partial is
/// taken at `(q1, q2) = (q(z), Q(psi_t(z)))`.
pub fn bracket_conditions(
    system: &HamiltonianSystem,
    trans: &TransformedSystem,
    probes: &[(f64, PhaseState)],
    cfg: &TransformConfig,
) -> Result<BracketReport> {
    cfg.validate()?;
    let r = system.r();
    let mut w = TWork::new(system.n());
    let mut noise_noise = 0.0f64;
    let mut drift_noise = 0.0f64;
    for (t, z) in probes {
        for i in 1..=r {
            for j in (i + 1)..=r {
                let pb = poisson_bracket(&system.fields()[i], &system.fields()[j], *t, z)?;
                noise_noise = noise_noise.max(pb.abs());
            }
        }
        for i in 1..=r {
            let pb = poisson_bracket(&system.fields()[0], &system.fields()[i], *t, z)?;
            let image = psi_into(trans.s, *t, &z.q, &z.p, cfg, &mut w)?;
            let kt = k_time_partial(trans.s, system, i, *t, &z.q, &image.q, &mut w)?;
            drift_noise = drift_noise.max((pb + kt).abs());
        }
    }
    Ok(BracketReport {
        noise_noise,
        drift_noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::compile_str;
    use crate::noise::TimeGrid;

    fn gen(n: usize, source: &str) -> GeneratingFunction {
        GeneratingFunction::new(compile_str(source, n, VarSpace::Generating).unwrap()).unwrap()
    }

    fn system(n: usize, sources: &[&str]) -> HamiltonianSystem {
        let fields = sources
            .iter()
            .map(|s| compile_str(s, n, VarSpace::Phase).unwrap())
            .collect();
        HamiltonianSystem::new(fields).unwrap()
    }

    fn state(q: &[f64], p: &[f64]) -> PhaseState {
        PhaseState::new(q.to_vec(), p.to_vec()).unwrap()
    }

    fn probe_points(count: usize, n: usize) -> Vec<(f64, PhaseState)> {
        probe_states(count, n, 0, (0.2, 1.2), (-1.0, 1.0))
    }

    #[test]
    fn test_generating_function_space_check() {
        let phase = compile_str("q1*p1", 1, VarSpace::Phase).unwrap();
        assert!(GeneratingFunction::new(phase).is_err());
        let ok = gen(1, "a1*b1");
        assert_eq!(ok.n(), 1);
        assert_eq!(ok.value(0.0, &[2.0], &[3.0]).unwrap(), 6.0);
    }

    #[test]
    fn test_j_inverse_closed_forms() {
        let exchange = gen(1, "a1*b1");
        let z = exchange.j_inverse(0.3, &[1.5], &[-0.8]).unwrap();
        assert_eq!(z.q, vec![1.5]);
        assert_eq!(z.p, vec![-0.8]);

        let free = gen(1, "(a1 - b1)^2 / (2*t)");
        let z = free.j_inverse(1.0, &[0.9], &[0.2]).unwrap();
        assert!((z.p[0] - 0.7).abs() < 1e-15);

        let constant = gen(1, "b1^2/2");
        let z = constant.j_inverse(0.4, &[2.0], &[0.6]).unwrap();
        assert_eq!(z.p, vec![0.0], "S independent of a gives p = 0");
    }

    #[test]
    fn test_apply_psi_exchange_swaps_legs() {
        let s = gen(1, "a1*b1");
        let cfg = TransformConfig::default();
        for t in [0.0, 0.4, 1.3] {
            let image = apply_psi(&s, t, &state(&[0.7], &[-1.1]), &cfg).unwrap();
            assert_eq!(image.q, vec![-1.1]);
            assert_eq!(image.p, vec![-0.7]);
        }
        assert_eq!(s.twist_determinant(0.0, &[0.7], &[-1.1]).unwrap(), 1.0);
    }

    #[test]
    fn test_apply_psi_free_flow_and_round_trip() {
        let s = gen(1, "(a1 - b1)^2 / (2*t)");
        let cfg = TransformConfig::default();
        let t = 0.7;
        let z = state(&[0.5], &[1.2]);
        let image = apply_psi(&s, t, &z, &cfg).unwrap();
        assert!((image.q[0] - (0.5 - 0.7 * 1.2)).abs() < 1e-12);
        assert!((image.p[0] - 1.2).abs() < 1e-12);
        let back = apply_psi_inverse(&s, t, &image, &cfg).unwrap();
        assert!((back.q[0] - z.q[0]).abs() < 1e-9);
        assert!((back.p[0] - z.p[0]).abs() < 1e-9);
    }

    #[test]
    fn test_psi_jacobians_are_symplectic() {
        use crate::geometry::symplectic_defect;
        let cfg = TransformConfig::default();
        let candidates = [
            gen(1, "a1*b1"),
            gen(1, "(a1 - b1)^2 / (2*t)"),
            gen(1, "a1*b1 + 0.1*a1^2*b1"),
        ];
        for s in &candidates {
            for (t, z) in probe_points(50, 1) {
                let jac = psi_jacobian_fd(s, t, &z, 1e-5, &cfg).unwrap();
                let defect = symplectic_defect(&jac, 1).unwrap();
                assert!(
                    defect <= 1e-6,
                    "S = {}: defect {defect} at t = {t}, z = {z:?}",
                    s.source()
                );
            }
        }
        // Round trips hold for the nonlinear candidate as well.
        let s = &candidates[2];
        for (t, z) in probe_points(20, 1) {
            let there = apply_psi(s, t, &z, &cfg).unwrap();
            let back = apply_psi_inverse(s, t, &there, &cfg).unwrap();
            assert!((back.q[0] - z.q[0]).abs() < 1e-9);
            assert!((back.p[0] - z.p[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn test_transform_exchange_kills_q1_for_p_only_systems() {
        let s = gen(1, "a1*b1");
        let probes = ProbeGrid::default();

        let translation = system(1, &["0", "p1"]);
        let trans = transform_hamiltonians(&s, &translation, &probes).unwrap();
        assert_eq!(trans.defects(), &[0.0, 0.0]);
        assert_eq!(trans.min_twist(), 1.0);
        assert_eq!(trans.k_value(0, 0.5, &[0.3], &[0.8]).unwrap(), 0.0);
        assert_eq!(trans.k_value(1, 0.5, &[0.3], &[0.8]).unwrap(), 0.8);

        let free = system(1, &["p1^2/2", "p1"]);
        let trans = transform_hamiltonians(&s, &free, &probes).unwrap();
        assert_eq!(trans.max_defect(), 0.0);
        let k0 = trans.k_value(0, 0.2, &[0.3], &[0.8]).unwrap();
        assert!((k0 - 0.32).abs() < 1e-15, "K0 = q2^2/2, got {k0}");
    }

    #[test]
    fn test_free_flow_transform_solves_classical_hj() {
        // K0 = h0(j_inverse) + dS/dt = ((q1-q2)/t)^2/2 - (q1-q2)^2/(2 t^2)
        // vanishes identically: the drift is absorbed.
        let s = gen(1, "(a1 - b1)^2 / (2*t)");
        let free = system(1, &["p1^2/2"]);
        let probes = ProbeGrid {
            t_range: (0.5, 1.5),
            ..ProbeGrid::default()
        };
        let trans = transform_hamiltonians(&s, &free, &probes).unwrap();
        assert!(trans.max_defect() < 1e-12, "defect {}", trans.max_defect());
        let k0 = trans.k_value(0, 0.8, &[0.9], &[-0.4]).unwrap();
        assert!(k0.abs() < 1e-12, "K0 should vanish, got {k0}");
    }

    #[test]
    fn test_equilibrium_translation_under_exchange() {
        let s = gen(1, "a1*b1");
        let sys = system(1, &["0", "p1"]);
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let path = NoisePath::sample(grid, 1, 21, 0);
        let cfg = TransformConfig::default();
        let report = equilibrium_check(&s, &sys, &state(&[1.0], &[5.0]), &path, &cfg).unwrap();
        // Q = p is conserved by the flow; the implicit solve recovers it to
        // within its Newton tolerance (an ulp or two in practice).
        assert!(report.max_q_drift() <= cfg.newton_tol, "{}", report.max_q_drift());
        assert!(report.max_discrepancy() <= 1e-9, "{}", report.max_discrepancy());
        let b = path.node_values(1);
        for k in 0..report.nodes() {
            let m = report.mapped_state(k);
            assert!((m[0] - 5.0).abs() <= cfg.newton_tol);
            assert!((m[1] - (-1.0 - b[k])).abs() < 1e-12, "P at {k}");
        }
    }

    #[test]
    fn test_equilibrium_free_flow_under_exchange() {
        let s = gen(1, "a1*b1");
        let sys = system(1, &["p1^2/2", "p1"]);
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let path = NoisePath::sample(grid, 1, 8, 2);
        let cfg = TransformConfig::default();
        let (q0, p0) = (0.4, 1.2);
        let report = equilibrium_check(&s, &sys, &state(&[q0], &[p0]), &path, &cfg).unwrap();
        assert!(report.max_q_drift() <= cfg.newton_tol, "{}", report.max_q_drift());
        assert!(report.max_discrepancy() <= 1e-9, "{}", report.max_discrepancy());
        let b = path.node_values(1);
        for k in 0..report.nodes() {
            let m = report.mapped_state(k);
            let p_exact = -q0 - p0 * report.time(k) - b[k];
            assert!((m[0] - p0).abs() <= cfg.newton_tol);
            assert!((m[1] - p_exact).abs() < 1e-10, "P at {k}: {} vs {p_exact}", m[1]);
        }
    }

    #[test]
    fn test_equilibrium_zero_noise_oscillator_form() {
        // Deterministic free particle under the exchange map: Q = p stays
        // put and dP/dt = -dK0/dQ = -Q.
        let s = gen(1, "a1*b1");
        let sys = system(1, &["p1^2/2"]);
        let grid = TimeGrid::new(2.0, 256).unwrap();
        let path = NoisePath::sample(grid, 0, 0, 0);
        let cfg = TransformConfig::default();
        let (q0, p0) = (-0.3, 0.9);
        let report = equilibrium_check(&s, &sys, &state(&[q0], &[p0]), &path, &cfg).unwrap();
        assert!(report.max_q_drift() <= cfg.newton_tol, "{}", report.max_q_drift());
        assert!(report.max_discrepancy() <= 1e-9);
        let last = report.reduced_state(report.nodes() - 1);
        assert!((last[1] - (-q0 - p0 * 2.0)).abs() < 1e-10);
    }

    #[test]
    fn test_equilibrium_rejects_unreduced_system() {
        let s = gen(1, "a1*b1");
        let sys = system(1, &["q1^2/2"]);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let path = NoisePath::sample(grid, 0, 0, 0);
        let err =
            equilibrium_check(&s, &sys, &state(&[0.1], &[0.2]), &path, &TransformConfig::default())
                .unwrap_err();
        assert!(matches!(err, Error::Transform { .. }), "{err}");
    }

    #[test]
    fn test_bracket_conditions_pass_and_negative_control() {
        let cfg = TransformConfig::default();
        let s = gen(1, "a1*b1");
        let probes = probe_points(20, 1);

        let free = system(1, &["p1^2/2", "p1"]);
        let trans = transform_hamiltonians(&s, &free, &cfg.probes).unwrap();
        let report = bracket_conditions(&free, &trans, &probes, &cfg).unwrap();
        assert!(report.max_defect() <= 1e-12, "{report:?}");

        let two = system(1, &["0", "p1", "p1"]);
        let trans = transform_hamiltonians(&s, &two, &cfg.probes).unwrap();
        let report = bracket_conditions(&two, &trans, &probes, &cfg).unwrap();
        assert_eq!(report.noise_noise, 0.0);

        // h = (0, q, p) cannot be reduced: {q, p} = 1 and K for the q
        // channel keeps its q1 dependence.
        let bad = system(1, &["0", "q1", "p1"]);
        let trans = transform_hamiltonians(&s, &bad, &cfg.probes).unwrap();
        assert!(trans.defects()[1] > 0.5, "{:?}", trans.defects());
        let report = bracket_conditions(&bad, &trans, &probes, &cfg).unwrap();
        assert!((report.noise_noise - 1.0).abs() < 1e-12, "{report:?}");
    }

    #[test]
    fn test_equilibrium_csv_layout() {
        let s = gen(1, "a1*b1");
        let sys = system(1, &["0", "p1"]);
        let grid = TimeGrid::new(0.5, 4).unwrap();
        let path = NoisePath::sample(grid, 1, 2, 0);
        let report =
            equilibrium_check(&s, &sys, &state(&[0.2], &[0.8]), &path, &TransformConfig::default())
                .unwrap();
        let csv = report.to_csv_string();
        assert_eq!(csv.lines().next().unwrap(), "k,t_k,Qm1,Pm1,Qr1,Pr1,gap");
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn test_transform_input_validation() {
        let s = gen(2, "a1*b1 + a2*b2");
        let sys = system(1, &["0", "p1"]);
        assert!(transform_hamiltonians(&s, &sys, &ProbeGrid::default()).is_err());
        let s1 = gen(1, "a1*b1");
        assert!(apply_psi(&s1, 0.0, &state(&[0.1, 0.2], &[0.0, 0.0]), &TransformConfig::default())
            .is_err());
        let bad_grid = ProbeGrid {
            q1_points: 1,
            ..ProbeGrid::default()
        };
        assert!(transform_hamiltonians(&s1, &sys, &bad_grid).is_err());
    }
}
