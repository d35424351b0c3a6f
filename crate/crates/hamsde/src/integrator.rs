//! Symplectic integration of Stratonovich Hamiltonian systems
//! `dZ = sum_j X_{h_j}(Z) dX^j` driven by a [`NoisePath`].
//!
//! The production scheme is the implicit Stratonovich midpoint rule: each
//! step solves `z' = z + sum_j X_{h_j}(t_mid, (z + z')/2) dX^j_k`, which is
//! the exact midpoint map of the Hamiltonian `sum_j dX^j h_j` and therefore
//! symplectic to solver tolerance. Tangent maps are propagated alongside the
//! states: the per-step Jacobian is the Cayley transform
//! `(I - M/2)^(-1) (I + M/2)` with `M = sum_j dX^j * Omega * Hess h_j`
//! evaluated at the converged midpoint, exactly symplectic for any symmetric
//! Hessian.
//!
//! When every Hamiltonian has degree <= 2 and the noisy channels are linear
//! in phase space, the implicit equation is affine and each step reduces to
//! one pre-factored linear solve with a cached Cayley matrix; the integrator
//! detects this automatically. An explicit Euler-Heun scheme is available
//! behind a flag for comparison runs only (it is not symplectic and carries
//! no tangent map).

use std::io::Write;

use crate::error::{Error, Result};
use crate::field::{FieldWorkspace, ScalarField};
use crate::geometry::{accumulate_vector_field, symplectic_defect, HamiltonianSystem, PhaseState};
use crate::linalg::{lu_factor, lu_solve_rows, mat_mul};
use crate::noise::NoisePath;

/// Time-stepping scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Implicit Stratonovich midpoint: symplectic, supports tangent maps.
    StratonovichMidpoint,
    /// Explicit predictor-corrector, for comparison runs only.
    EulerHeun,
}

/// Solver knobs for the implicit midpoint iteration.
#[derive(Debug, Clone, Copy)]
pub struct SchemeConfig {
    /// Convergence tolerance for the midpoint fixed-point iteration.
    pub fixed_point_tol: f64,
    /// Iteration budget per step (shared by the Newton fallback).
    pub max_iterations: usize,
    /// Largest acceptable symplectic defect of a propagated Jacobian.
    pub defect_tol: f64,
    pub scheme: Scheme,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            fixed_point_tol: 1e-13,
            max_iterations: 64,
            defect_tol: 1e-9,
            scheme: Scheme::StratonovichMidpoint,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fixed_point_tol > 0.0) || !(self.defect_tol > 0.0) {
            return Err(Error::dim("solver tolerances must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::dim("iteration budget must be at least 1"));
        }
        Ok(())
    }
}

/// Counters describing how hard the implicit solver worked.
#[derive(Debug, Clone, Copy, Default)]
pub struct SolverStats {
    /// Fixed-point sweeps summed over all steps.
    pub total_fixed_point_iterations: u64,
    /// Steps that needed the Newton fallback after a fixed-point stall.
    pub newton_fallback_steps: u64,
    /// Worst per-step iteration count.
    pub max_step_iterations: usize,
    /// Steps solved directly through the cached affine factorization.
    pub direct_linear_steps: u64,
}

impl SolverStats {
    pub(crate) fn absorb(&mut self, other: &SolverStats) {
        self.total_fixed_point_iterations += other.total_fixed_point_iterations;
        self.newton_fallback_steps += other.newton_fallback_steps;
        self.max_step_iterations = self.max_step_iterations.max(other.max_step_iterations);
        self.direct_linear_steps += other.direct_linear_steps;
    }
}

/// Discrete flow: states at every grid node, with optional tangent maps.
#[derive(Debug, Clone)]
pub struct Trajectory {
    n: usize,
    times: Vec<f64>,
    /// Node-major flat states: `states[k * 2n ..][..2n]` = `[q.., p..]`.
    states: Vec<f64>,
    /// Node-major flat Jacobians (2n x 2n row-major), `J_0 = I`.
    jacobians: Option<Vec<f64>>,
    stats: SolverStats,
}

impl Trajectory {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of steps `K`; the trajectory has `K + 1` nodes.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn state_flat(&self, k: usize) -> &[f64] {
        let d = 2 * self.n;
        &self.states[k * d..(k + 1) * d]
    }

    pub fn state(&self, k: usize) -> PhaseState {
        PhaseState::from_flat(self.state_flat(k)).expect("stored states are valid")
    }

    pub fn final_state(&self) -> PhaseState {
        self.state(self.steps())
    }

    pub fn has_jacobians(&self) -> bool {
        self.jacobians.is_some()
    }

    /// Accumulated tangent map `J_k` as a row-major `2n x 2n` slice.
    pub fn jacobian(&self, k: usize) -> Option<&[f64]> {
        let d = 2 * self.n;
        self.jacobians
            .as_ref()
            .map(|j| &j[k * d * d..(k + 1) * d * d])
    }

    /// Symplectic defect of `J_k`, when tangent maps were propagated.
    pub fn symplectic_defect_at(&self, k: usize) -> Option<f64> {
        self.jacobian(k)
            .map(|j| symplectic_defect(j, self.n).expect("stored Jacobians are square"))
    }

    pub fn max_symplectic_defect(&self) -> Option<f64> {
        if !self.has_jacobians() {
            return None;
        }
        let mut worst: f64 = 0.0;
        for k in 0..=self.steps() {
            worst = worst.max(self.symplectic_defect_at(k).unwrap());
        }
        Some(worst)
    }

    pub fn stats(&self) -> &SolverStats {
        &self.stats
    }

    /// Writes `k, t_k, q1..qn, p1..pn, defect` rows (defect blank without
    /// tangent maps).
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "k,t_k")?;
        for i in 1..=self.n {
            write!(w, ",q{i}")?;
        }
        for i in 1..=self.n {
            write!(w, ",p{i}")?;
        }
        writeln!(w, ",defect")?;
        for k in 0..=self.steps() {
            write!(w, "{k},{}", self.times[k])?;
            for v in self.state_flat(k) {
                write!(w, ",{v}")?;
            }
            match self.symplectic_defect_at(k) {
                Some(d) => writeln!(w, ",{d}")?,
                None => writeln!(w, ",")?,
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

/// Cached affine step machinery for systems with constant Hessians.
struct LinearFast {
    /// `dt` (the channel-0 increment) this factorization was built for.
    dt: f64,
    /// `M = dt * Omega * Hess h_0`.
    mmat: Vec<f64>,
    /// LU factors of `I - M/2` plus pivots.
    lu: Vec<f64>,
    piv: Vec<usize>,
    /// Cached Cayley step Jacobian `(I - M/2)^(-1) (I + M/2)`.
    jstep: Vec<f64>,
}

/// Reusable stepping engine; all buffers are allocated once.
pub(crate) struct FlowEngine<'a> {
    system: &'a HamiltonianSystem,
    cfg: SchemeConfig,
    d: usize,
    ws: FieldWorkspace,
    grad: Vec<f64>,
    hess: Vec<f64>,
    f_buf: Vec<f64>,
    f_tmp: Vec<f64>,
    m_cur: Vec<f64>,
    m_next: Vec<f64>,
    mmat: Vec<f64>,
    amat: Vec<f64>,
    bmat: Vec<f64>,
    piv: Vec<usize>,
    /// Per-channel affine base data `[Omega grad at origin | Omega H t-col]`,
    /// populated when the system qualifies for the direct linear step.
    affine_base: Vec<f64>,
    linear_capable: bool,
    linear: Option<LinearFast>,
    stats: SolverStats,
}

impl<'a> FlowEngine<'a> {
    pub(crate) fn new(system: &'a HamiltonianSystem, cfg: SchemeConfig) -> Result<FlowEngine<'a>> {
        cfg.validate()?;
        let n = system.n();
        let d = 2 * n;
        let m = d + 1;
        let mut engine = FlowEngine {
            system,
            cfg,
            d,
            ws: FieldWorkspace::new(),
            grad: vec![0.0; m],
            hess: vec![0.0; m * m],
            f_buf: vec![0.0; d],
            f_tmp: vec![0.0; d],
            m_cur: vec![0.0; d],
            m_next: vec![0.0; d],
            mmat: vec![0.0; d * d],
            amat: vec![0.0; d * d],
            bmat: vec![0.0; d * d],
            piv: vec![0; d],
            affine_base: Vec::new(),
            linear_capable: false,
            linear: None,
            stats: SolverStats::default(),
        };
        engine.detect_linear()?;
        Ok(engine)
    }

    pub(crate) fn stats(&self) -> &SolverStats {
        &self.stats
    }

    /// The direct affine step applies when every Hamiltonian has a constant
    /// Hessian and the noisy channels are linear in phase space (so `M`
    /// depends only on `dt`, which is fixed along a uniform grid).
    fn detect_linear(&mut self) -> Result<()> {
        if self.cfg.scheme != Scheme::StratonovichMidpoint {
            return Ok(());
        }
        let d = self.d;
        let m = d + 1;
        if !self.system.fields().iter().all(ScalarField::has_constant_hessian) {
            return Ok(());
        }
        for field in &self.system.fields()[1..] {
            let h = field.constant_hessian().expect("checked above");
            let spatial_nonzero = (0..d).any(|a| (0..d).any(|b| h[(1 + a) * m + (1 + b)] != 0.0));
            if spatial_nonzero {
                return Ok(());
            }
        }
        // Record Omega * grad h_j(0, 0) and Omega * (t column of Hess h_j)
        // for every channel; the step right-hand side is affine in them.
        let nchan = self.system.fields().len();
        let mut base = vec![0.0; nchan * 2 * d];
        let zero_state = vec![0.0; d];
        for (j, field) in self.system.fields().iter().enumerate() {
            field.eval_grad(0.0, &zero_state, &mut self.ws, &mut self.grad)?;
            let h = field.constant_hessian().expect("checked above");
            let n = d / 2;
            let row = &mut base[j * 2 * d..(j + 1) * 2 * d];
            for i in 0..n {
                row[i] = self.grad[1 + n + i];
                row[n + i] = -self.grad[1 + i];
                row[d + i] = h[(1 + n + i) * m];
                row[d + n + i] = -h[(1 + i) * m];
            }
        }
        self.affine_base = base;
        self.linear_capable = true;
        Ok(())
    }

    /// (Re)builds the factored affine step for time increment `dt`.
    fn build_linear(&mut self, dt: f64) -> Result<()> {
        let d = self.d;
        let m = d + 1;
        let n = d / 2;
        let h0 = self.system.drift().constant_hessian().expect("linear capable");
        let mut mmat = vec![0.0; d * d];
        for i in 0..n {
            for c in 0..d {
                mmat[i * d + c] = dt * h0[(1 + n + i) * m + (1 + c)];
                mmat[(n + i) * d + c] = -dt * h0[(1 + i) * m + (1 + c)];
            }
        }
        let mut lu = vec![0.0; d * d];
        let mut bmat = vec![0.0; d * d];
        for i in 0..d {
            for c in 0..d {
                let half = 0.5 * mmat[i * d + c];
                lu[i * d + c] = if i == c { 1.0 - half } else { -half };
                bmat[i * d + c] = if i == c { 1.0 + half } else { half };
            }
        }
        let mut piv = vec![0usize; d];
        let det = lu_factor(&mut lu, d, &mut piv);
        if det == 0.0 {
            return Err(Error::State {
                message: format!("midpoint step matrix singular at dt = {dt}"),
            });
        }
        lu_solve_rows(&lu, d, &piv, &mut bmat, d)?;
        self.linear = Some(LinearFast {
            dt,
            mmat,
            lu,
            piv,
            jstep: bmat,
        });
        Ok(())
    }

    fn linear_ready(&mut self, dt: f64) -> Result<bool> {
        if !self.linear_capable {
            return Ok(false);
        }
        match &self.linear {
            Some(lin) if lin.dt == dt => Ok(true),
            _ => {
                self.build_linear(dt)?;
                Ok(true)
            }
        }
    }

    /// Sum of the Hamiltonian vector fields weighted by the increments,
    /// written into `out`.
    fn vector_field(&mut self, t: f64, z: &[f64], dx: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        for (j, field) in self.system.fields().iter().enumerate() {
            if dx[j] != 0.0 {
                accumulate_vector_field(field, t, z, dx[j], &mut self.ws, &mut self.grad, out)?;
            }
        }
        Ok(())
    }

    /// `M = sum_j dX^j * Omega * Hess h_j` at `(t, z)`, into `self.mmat`.
    fn build_m_matrix(&mut self, t: f64, z: &[f64], dx: &[f64]) -> Result<()> {
        let d = self.d;
        let n = d / 2;
        let m = d + 1;
        self.mmat.fill(0.0);
        for (j, field) in self.system.fields().iter().enumerate() {
            if dx[j] == 0.0 {
                continue;
            }
            field.eval_hess(t, z, &mut self.ws, &mut self.grad, &mut self.hess)?;
            for i in 0..n {
                for c in 0..d {
                    self.mmat[i * d + c] += dx[j] * self.hess[(1 + n + i) * m + (1 + c)];
                    self.mmat[(n + i) * d + c] -= dx[j] * self.hess[(1 + i) * m + (1 + c)];
                }
            }
        }
        Ok(())
    }

    /// Solves the implicit midpoint equation, leaving the midpoint in
    /// `self.m_cur` and the step vector `F(m) dX` in `self.f_buf` (so the
    /// caller can form `z' = z + F(m) dX` without re-rounding through the
    /// midpoint). `step` only labels errors.
    fn solve_midpoint(&mut self, step: usize, t_mid: f64, z: &[f64], dx: &[f64]) -> Result<()> {
        let d = self.d;
        let scale = 1.0 + z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let tol = self.cfg.fixed_point_tol * scale;

        if self.linear_ready(dx[0])? {
            // Direct solve: (I - M/2) m = z + u/2 with
            // u = sum_j dx_j (Omega grad h_j(0) + t_mid Omega H_j t-col).
            let nchan = self.system.fields().len();
            for c in 0..d {
                let mut u = 0.0;
                for j in 0..nchan {
                    if dx[j] != 0.0 {
                        let row = &self.affine_base[j * 2 * d..(j + 1) * 2 * d];
                        u += dx[j] * (row[c] + t_mid * row[d + c]);
                    }
                }
                self.f_tmp[c] = u;
                self.m_cur[c] = z[c] + 0.5 * u;
            }
            let lin = self.linear.as_ref().expect("built by linear_ready");
            lu_solve_rows(&lin.lu, d, &lin.piv, &mut self.m_cur, 1)?;
            // Step vector F(m) dX = u + M m.
            for i in 0..d {
                let mut acc = self.f_tmp[i];
                for c in 0..d {
                    acc += lin.mmat[i * d + c] * self.m_cur[c];
                }
                self.f_buf[i] = acc;
            }
            self.stats.direct_linear_steps += 1;
            return Ok(());
        }

        self.m_cur.copy_from_slice(z);
        let mut prev_res = f64::INFINITY;
        let mut stalls = 0usize;
        let mut iterations = 0usize;
        let budget = self.cfg.max_iterations;
        while iterations < budget {
            let mut f = std::mem::take(&mut self.f_buf);
            let m_now = std::mem::take(&mut self.m_cur);
            let evaluated = self.vector_field(t_mid, &m_now, dx, &mut f);
            self.m_cur = m_now;
            self.f_buf = f;
            evaluated?;
            iterations += 1;
            self.stats.total_fixed_point_iterations += 1;
            let mut res = 0.0f64;
            for c in 0..d {
                let next = z[c] + 0.5 * self.f_buf[c];
                res = res.max((next - self.m_cur[c]).abs());
                self.m_next[c] = next;
            }
            std::mem::swap(&mut self.m_cur, &mut self.m_next);
            if res <= tol {
                self.stats.max_step_iterations = self.stats.max_step_iterations.max(iterations);
                return Ok(());
            }
            if res > 0.9 * prev_res {
                stalls += 1;
                if stalls >= 2 {
                    break; // contraction too slow; hand over to Newton
                }
            } else {
                stalls = 0;
            }
            prev_res = res;
        }

        // Newton on G(m) = m - z - F(m)/2 with Jacobian I - M(m)/2.
        self.stats.newton_fallback_steps += 1;
        let mut last_res = f64::INFINITY;
        while iterations < budget + 16 {
            let mut f = std::mem::take(&mut self.f_buf);
            let m_now = std::mem::take(&mut self.m_cur);
            let evaluated = self
                .vector_field(t_mid, &m_now, dx, &mut f)
                .and_then(|()| self.build_m_matrix(t_mid, &m_now, dx));
            self.m_cur = m_now;
            self.f_buf = f;
            evaluated?;
            iterations += 1;
            self.stats.total_fixed_point_iterations += 1;
            for i in 0..d {
                for c in 0..d {
                    let half = 0.5 * self.mmat[i * d + c];
                    self.amat[i * d + c] = if i == c { 1.0 - half } else { -half };
                }
                self.f_tmp[i] = -(self.m_cur[i] - z[i] - 0.5 * self.f_buf[i]);
            }
            let det = lu_factor(&mut self.amat, d, &mut self.piv);
            if det == 0.0 {
                break;
            }
            lu_solve_rows(&self.amat, d, &self.piv, &mut self.f_tmp, 1)?;
            let mut res = 0.0f64;
            for c in 0..d {
                self.m_cur[c] += self.f_tmp[c];
                res = res.max(self.f_tmp[c].abs());
            }
            if res <= tol {
                self.stats.max_step_iterations = self.stats.max_step_iterations.max(iterations);
                // Refresh the step vector at the converged midpoint.
                let mut f = std::mem::take(&mut self.f_buf);
                let m_now = std::mem::take(&mut self.m_cur);
                let evaluated = self.vector_field(t_mid, &m_now, dx, &mut f);
                self.m_cur = m_now;
                self.f_buf = f;
                return evaluated;
            }
            last_res = res;
        }
        Err(Error::StepDivergence {
            step,
            residual: last_res,
            iterations,
        })
    }

    /// Advances one step: reads `z`, writes the successor state into `out`.
    /// `t_k` is the node time; the midpoint uses `t_k + dx[0]/2`.
    pub(crate) fn step_into(
        &mut self,
        step: usize,
        t_k: f64,
        dx: &[f64],
        z: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let d = self.d;
        debug_assert_eq!(z.len(), d);
        debug_assert_eq!(dx.len(), self.system.r() + 1);
        match self.cfg.scheme {
            Scheme::StratonovichMidpoint => {
                let t_mid = t_k + 0.5 * dx[0];
                self.solve_midpoint(step, t_mid, z, dx)?;
                // Increment form: adding the step vector keeps the low bits
                // of a small increment that 2m - z would shear away.
                for c in 0..d {
                    out[c] = z[c] + self.f_buf[c];
                }
            }
            Scheme::EulerHeun => {
                let mut f1 = std::mem::take(&mut self.f_buf);
                self.vector_field(t_k, z, dx, &mut f1)?;
                for c in 0..d {
                    self.m_cur[c] = z[c] + f1[c];
                }
                let mut f2 = std::mem::take(&mut self.f_tmp);
                let mut m_pred = std::mem::take(&mut self.m_next);
                m_pred.copy_from_slice(&self.m_cur);
                self.vector_field(t_k + dx[0], &m_pred, dx, &mut f2)?;
                self.m_next = m_pred;
                for c in 0..d {
                    out[c] = z[c] + 0.5 * (f1[c] + f2[c]);
                }
                self.f_buf = f1;
                self.f_tmp = f2;
            }
        }
        Ok(())
    }

    /// Writes the per-step Cayley Jacobian factor at the recomputed midpoint
    /// into `out` (row-major `2n x 2n`).
    pub(crate) fn cayley_into(
        &mut self,
        t_mid: f64,
        mid: &[f64],
        dx: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let d = self.d;
        if self.linear_ready(dx[0])? {
            out.copy_from_slice(&self.linear.as_ref().expect("built").jstep);
            return Ok(());
        }
        self.build_m_matrix(t_mid, mid, dx)?;
        for i in 0..d {
            for c in 0..d {
                let half = 0.5 * self.mmat[i * d + c];
                self.amat[i * d + c] = if i == c { 1.0 - half } else { -half };
                self.bmat[i * d + c] = if i == c { 1.0 + half } else { half };
            }
        }
        let det = lu_factor(&mut self.amat, d, &mut self.piv);
        if det == 0.0 {
            return Err(Error::State {
                message: "Cayley factor singular; decrease the step size".into(),
            });
        }
        lu_solve_rows(&self.amat, d, &self.piv, &mut self.bmat, d)?;
        out.copy_from_slice(&self.bmat);
        Ok(())
    }
}

fn check_compatible(system: &HamiltonianSystem, z: &PhaseState, path: &NoisePath) -> Result<()> {
    if z.n() != system.n() {
        return Err(Error::dim(format!(
            "state has n = {}, system has n = {}",
            z.n(),
            system.n()
        )));
    }
    if path.channels() != system.r() {
        return Err(Error::dim(format!(
            "path has r = {}, system has r = {}",
            path.channels(),
            system.r()
        )));
    }
    Ok(())
}

/// One implicit midpoint step from `z` at node time `t_k` with the given
/// channel increments `[dt, dB^1, ..]`.
pub fn step_midpoint(
    system: &HamiltonianSystem,
    z: &PhaseState,
    t_k: f64,
    increments: &[f64],
    cfg: &SchemeConfig,
) -> Result<PhaseState> {
    if z.n() != system.n() {
        return Err(Error::dim("state dimension does not match the system"));
    }
    if increments.len() != system.r() + 1 {
        return Err(Error::dim(format!(
            "expected {} increments, got {}",
            system.r() + 1,
            increments.len()
        )));
    }
    let mut engine = FlowEngine::new(system, *cfg)?;
    let zin = z.flat();
    let mut zout = vec![0.0; zin.len()];
    engine.step_into(0, t_k, increments, &zin, &mut zout)?;
    PhaseState::from_flat(&zout)
}

/// Integrates the flow along a full path; optionally propagates tangent maps.
pub fn integrate_flow(
    system: &HamiltonianSystem,
    z0: &PhaseState,
    path: &NoisePath,
    cfg: &SchemeConfig,
    with_jacobian: bool,
) -> Result<Trajectory> {
    check_compatible(system, z0, path)?;
    if with_jacobian && cfg.scheme != Scheme::StratonovichMidpoint {
        return Err(Error::State {
            message: "tangent maps require the midpoint scheme".into(),
        });
    }
    let steps = path.grid().steps();
    let d = 2 * system.n();
    let mut engine = FlowEngine::new(system, *cfg)?;

    let mut states = vec![0.0; (steps + 1) * d];
    states[..d].copy_from_slice(&z0.flat());
    let mut times = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        times.push(path.grid().node(k));
    }

    let mut jacobians = if with_jacobian {
        let mut j = vec![0.0; (steps + 1) * d * d];
        for i in 0..d {
            j[i * d + i] = 1.0;
        }
        Some(j)
    } else {
        None
    };
    let mut jstep = vec![0.0; d * d];
    let mut mid = vec![0.0; d];

    for k in 0..steps {
        let dx = path.step_increments(k);
        let (done, rest) = states.split_at_mut((k + 1) * d);
        let z = &done[k * d..];
        engine.step_into(k, times[k], dx, z, &mut rest[..d])?;
        if let Some(jacs) = jacobians.as_mut() {
            for c in 0..d {
                mid[c] = 0.5 * (z[c] + rest[c]);
            }
            let t_mid = times[k] + 0.5 * dx[0];
            engine.cayley_into(t_mid, &mid, dx, &mut jstep)?;
            let dd = d * d;
            let (jdone, jrest) = jacs.split_at_mut((k + 1) * dd);
            mat_mul(&mut jrest[..dd], &jstep, &jdone[k * dd..], d, d, d);
        }
    }

    Ok(Trajectory {
        n: system.n(),
        times,
        states,
        jacobians,
        stats: *engine.stats(),
    })
}

/// Runs the first `up_to_k` steps of the flow backwards from `z_t`: the
/// midpoint map is exactly invertible, so this recovers the initial
/// condition of a forward integration to solver tolerance.
pub fn inverse_flow_point(
    system: &HamiltonianSystem,
    z_t: &PhaseState,
    path: &NoisePath,
    up_to_k: usize,
    cfg: &SchemeConfig,
) -> Result<PhaseState> {
    check_compatible(system, z_t, path)?;
    if up_to_k > path.grid().steps() {
        return Err(Error::dim(format!(
            "cannot invert {} steps of a {}-step path",
            up_to_k,
            path.grid().steps()
        )));
    }
    let d = 2 * system.n();
    let mut engine = FlowEngine::new(system, *cfg)?;
    let mut z = z_t.flat();
    let mut zout = vec![0.0; d];
    let mut neg = vec![0.0; system.r() + 1];
    for k in (0..up_to_k).rev() {
        for (o, v) in neg.iter_mut().zip(path.step_increments(k)) {
            *o = -v;
        }
        let t_next = path.grid().node(k + 1);
        engine.step_into(k, t_next, &neg, &z, &mut zout)?;
        z.copy_from_slice(&zout);
    }
    PhaseState::from_flat(&z)
}
