//! Newton shooting of Lagrangian sections through the stochastic flow.
//!
//! A section is the graph `L_f = {(a, grad f(a))}` of a potential `f(q)`.
//! For a query point `x`, [`shoot`] finds per node `k` the base point `a_k`
//! whose lift flows to a state over `x`:
//!
//! `q(phi_{t_k}(a_k, grad f(a_k))) = x`
//!
//! solved by Newton iteration with warm starts, re-integrating the flow from
//! zero for every residual evaluation (cost `O(K^2)` per query, by design:
//! shooting is self-correcting where integrating a transported-section SDE
//! would accumulate drift). The projected action `S_k = R_k + f(a_k)` then
//! satisfies a discrete Hamilton-Jacobi relation whose defect
//! [`hj_residual`] measures, and its spatial differential is the fiber
//! momentum `p(u_k)`, checked against finite differences by [`d_s_tilde`].
//!
//! Shooting stops at the first node where the shooting Jacobian loses
//! invertibility (`|d_k| <= det_eps`, a sign change of `d_k`, or Newton
//! failure); the truncation index plays the role of the caustic time after
//! which no single-valued solution exists.

use std::io::Write;

use crate::error::{Error, Result};
use crate::field::{FieldWorkspace, ScalarField, VarSpace};
use crate::geometry::{HamiltonianSystem, PhaseState};
use crate::integrator::{FlowEngine, Scheme, SchemeConfig, SolverStats};
use crate::linalg::{lu_factor, lu_solve_rows, mat_mul};
use crate::noise::NoisePath;

/// The graph of `grad f` over configuration space, for a potential `f`
/// depending on `q` only.
#[derive(Debug, Clone)]
pub struct LagrangianSection {
    field: ScalarField,
}

impl LagrangianSection {
    /// Wraps a compiled `q`-only expression. Fields that mention `p` or `t`
    /// are rejected: the section must be a fixed submanifold of phase space.
    pub fn new(field: ScalarField) -> Result<LagrangianSection> {
        if field.space() != VarSpace::Phase {
            return Err(Error::dim(
                "section potential must use phase-space variables (q1..qn)",
            ));
        }
        if field.uses_p() {
            return Err(Error::dim(
                "section potential must not depend on momenta",
            ));
        }
        if field.uses_t() {
            return Err(Error::dim("section potential must not depend on time"));
        }
        Ok(LagrangianSection { field })
    }

    pub fn n(&self) -> usize {
        self.field.n()
    }

    pub fn source(&self) -> &str {
        self.field.source()
    }

    /// `f(a)`.
    pub fn value(&self, a: &[f64]) -> Result<f64> {
        let mut ws = FieldWorkspace::new();
        let z = self.padded(a)?;
        self.field.eval_value(0.0, &z, &mut ws)
    }

    /// `(a, grad f(a))`, the point of the section over `a`.
    pub fn lift(&self, a: &[f64]) -> Result<PhaseState> {
        let n = self.n();
        let mut ws = FieldWorkspace::new();
        let z = self.padded(a)?;
        let mut g = vec![0.0; 2 * n + 1];
        self.field.eval_grad(0.0, &z, &mut ws, &mut g)?;
        PhaseState::new(a.to_vec(), g[1..=n].to_vec())
    }

    fn padded(&self, a: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        if a.len() != n {
            return Err(Error::dim(format!(
                "base point has {} coordinates, section has n = {n}",
                a.len()
            )));
        }
        let mut z = vec![0.0; 2 * n];
        z[..n].copy_from_slice(a);
        Ok(z)
    }
}

/// Knobs for the per-node Newton solve and its truncation rule.
#[derive(Debug, Clone, Copy)]
pub struct ShootingConfig {
    /// Max-norm residual below which `q(u_k) = x` counts as solved.
    pub newton_tol: f64,
    /// Newton iteration budget per node.
    pub max_newton: usize,
    /// Truncate when the shooting Jacobian determinant falls to this size.
    pub det_eps: f64,
    /// Step for the finite-difference mode of [`d_s_tilde`].
    pub fd_step: f64,
    /// Inner integrator settings; must use the midpoint scheme.
    pub solver: SchemeConfig,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        ShootingConfig {
            newton_tol: 1e-10,
            max_newton: 25,
            det_eps: 1e-8,
            fd_step: 1e-4,
            solver: SchemeConfig::default(),
        }
    }
}

impl ShootingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.newton_tol > 0.0) || !(self.det_eps > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::dim("shooting tolerances must be positive"));
        }
        if self.max_newton == 0 {
            return Err(Error::dim("Newton budget must be at least 1"));
        }
        if self.solver.scheme != Scheme::StratonovichMidpoint {
            return Err(Error::dim(
                "shooting needs the midpoint scheme for tangent maps",
            ));
        }
        self.solver.validate()
    }
}

/// Per-node output of [`shoot`]: base points `a_k`, flowed states
/// `u_k = phi_{t_k}(a_k, grad f(a_k))`, shooting-Jacobian determinants
/// `d_k`, and projected actions `S_k = R_k + f(a_k)`. Nodes stop at the
/// truncation index when the solve loses invertibility.
#[derive(Debug, Clone)]
pub struct ShootingPath {
    n: usize,
    x: Vec<f64>,
    times: Vec<f64>,
    base_points: Vec<f64>,
    fiber_points: Vec<f64>,
    determinants: Vec<f64>,
    actions: Vec<f64>,
    truncation: Option<usize>,
    stats: SolverStats,
}

impl ShootingPath {
    pub fn n(&self) -> usize {
        self.n
    }

    /// The query point the shoot was solved at.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Number of solved nodes; node indices run `0..nodes()`.
    pub fn nodes(&self) -> usize {
        self.times.len()
    }

    /// First node index the solve could not reach, if any.
    pub fn truncation(&self) -> Option<usize> {
        self.truncation
    }

    pub fn is_truncated(&self) -> bool {
        self.truncation.is_some()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    /// `a_k`, the section base point shot onto `x` at node `k`.
    pub fn base_point(&self, k: usize) -> &[f64] {
        &self.base_points[k * self.n..(k + 1) * self.n]
    }

    /// `u_k`, the flowed phase point over `x`.
    pub fn fiber_point(&self, k: usize) -> &[f64] {
        let d = 2 * self.n;
        &self.fiber_points[k * d..(k + 1) * d]
    }

    /// The momentum leg of `u_k`; equals the spatial differential of the
    /// projected action at `x`.
    pub fn fiber_momentum(&self, k: usize) -> &[f64] {
        &self.fiber_point(k)[self.n..]
    }

    pub fn determinant(&self, k: usize) -> f64 {
        self.determinants[k]
    }

    /// The projected action `S_k` at node `k`.
    pub fn s_tilde(&self, k: usize) -> f64 {
        self.actions[k]
    }

    pub fn s_tilde_values(&self) -> &[f64] {
        &self.actions
    }

    /// Work counters of the inner integrator summed over every Newton
    /// re-integration.
    pub fn stats(&self) -> &SolverStats {
        &self.stats
    }

    /// Writes `k, t_k, a*, pu*, d_k, S_tilde_k` rows for the solved nodes.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "k,t_k")?;
        for i in 1..=self.n {
            write!(w, ",a{i}")?;
        }
        for i in 1..=self.n {
            write!(w, ",pu{i}")?;
        }
        writeln!(w, ",d_k,S_tilde_k")?;
        for k in 0..self.nodes() {
            write!(w, "{k},{}", self.times[k])?;
            for v in self.base_point(k) {
                write!(w, ",{v}")?;
            }
            for v in self.fiber_momentum(k) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{},{}", self.determinants[k], self.actions[k])?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

/// Which evaluation mode [`d_s_tilde`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsMode {
    /// The fiber momentum `p(u_k)` from a single shoot.
    Formula,
    /// Central differences of `S_k` over re-shoots at `x +- fd_step e_i`.
    Fd,
}

struct ShootScratch<'a> {
    engine: FlowEngine<'a>,
    system: &'a HamiltonianSystem,
    section: &'a LagrangianSection,
    path: &'a NoisePath,
    ws: FieldWorkspace,
    z: Vec<f64>,
    z_next: Vec<f64>,
    mid: Vec<f64>,
    cay: Vec<f64>,
    jac: Vec<f64>,
    jtmp: Vec<f64>,
    zsec: Vec<f64>,
    gsec: Vec<f64>,
    hsec: Vec<f64>,
    dg: Vec<f64>,
    lu: Vec<f64>,
    piv: Vec<usize>,
    rhs: Vec<f64>,
}

impl<'a> ShootScratch<'a> {
    fn new(
        system: &'a HamiltonianSystem,
        section: &'a LagrangianSection,
        path: &'a NoisePath,
        cfg: &ShootingConfig,
    ) -> Result<ShootScratch<'a>> {
        let n = system.n();
        let d = 2 * n;
        let m = d + 1;
        Ok(ShootScratch {
            engine: FlowEngine::new(system, cfg.solver)?,
            system,
            section,
            path,
            ws: FieldWorkspace::new(),
            z: vec![0.0; d],
            z_next: vec![0.0; d],
            mid: vec![0.0; d],
            cay: vec![0.0; d * d],
            jac: vec![0.0; d * d],
            jtmp: vec![0.0; d * d],
            zsec: vec![0.0; d],
            gsec: vec![0.0; m],
            hsec: vec![0.0; m * m],
            dg: vec![0.0; n * n],
            lu: vec![0.0; n * n],
            piv: vec![0; n],
            rhs: vec![0.0; n],
        })
    }

    /// Evaluates `f(a)`, `grad f(a)` into `gsec`, `Hess f(a)` into `hsec`.
    fn section_jet(&mut self, a: &[f64]) -> Result<f64> {
        let n = self.system.n();
        self.zsec[..n].copy_from_slice(a);
        self.zsec[n..].fill(0.0);
        self.section
            .field
            .eval_hess(0.0, &self.zsec, &mut self.ws, &mut self.gsec, &mut self.hsec)
    }

    /// Integrates `lift(a)` through the first `k` steps of the path.
    /// Leaves the final state in `z`, the tangent map in `jac`, and returns
    /// the accumulated action `R_k` along that trajectory.
    fn flow_to_node(&mut self, a: &[f64], k: usize) -> Result<f64> {
        let system = self.system;
        let path = self.path;
        let n = system.n();
        let d = 2 * n;
        self.section_jet(a)?;
        self.z[..n].copy_from_slice(a);
        for i in 0..n {
            self.z[n + i] = self.gsec[1 + i];
        }
        self.jac.fill(0.0);
        for i in 0..d {
            self.jac[i * d + i] = 1.0;
        }
        let mut action = 0.0;
        for l in 0..k {
            let t_l = path.grid().node(l);
            let dx = path.step_increments(l);
            self.engine.step_into(l, t_l, dx, &self.z, &mut self.z_next)?;
            for c in 0..d {
                self.mid[c] = 0.5 * (self.z[c] + self.z_next[c]);
            }
            let t_mid = t_l + 0.5 * dx[0];
            self.engine.cayley_into(t_mid, &self.mid, dx, &mut self.cay)?;
            mat_mul(&mut self.jtmp, &self.cay, &self.jac, d, d, d);
            self.jac.copy_from_slice(&self.jtmp);
            let mut delta = 0.0;
            for i in 0..n {
                delta += self.mid[n + i] * (self.z_next[i] - self.z[i]);
            }
            for (j, field) in system.fields().iter().enumerate() {
                if dx[j] != 0.0 {
                    delta -= field.eval_value(t_mid, &self.mid, &mut self.ws)? * dx[j];
                }
            }
            action += delta;
            self.z.copy_from_slice(&self.z_next);
        }
        Ok(action)
    }

    /// Builds the shooting Jacobian `Dg = J_qq + J_qp Hess f(a)` from the
    /// current `jac` and `hsec`; returns its determinant and leaves the LU
    /// factorization in `lu`/`piv`.
    fn factor_shooting_jacobian(&mut self) -> f64 {
        let n = self.system.n();
        let d = 2 * n;
        let m = d + 1;
        for i in 0..n {
            for j in 0..n {
                let mut acc = self.jac[i * d + j];
                for l in 0..n {
                    acc += self.jac[i * d + n + l] * self.hsec[(1 + l) * m + (1 + j)];
                }
                self.dg[i * n + j] = acc;
            }
        }
        self.lu.copy_from_slice(&self.dg);
        lu_factor(&mut self.lu, n, &mut self.piv)
    }
}

fn validate_shoot_inputs(
    system: &HamiltonianSystem,
    section: &LagrangianSection,
    x: &[f64],
    path: &NoisePath,
    cfg: &ShootingConfig,
) -> Result<()> {
    cfg.validate()?;
    if section.n() != system.n() {
        return Err(Error::dim(format!(
            "section has n = {}, system has n = {}",
            section.n(),
            system.n()
        )));
    }
    if x.len() != system.n() {
        return Err(Error::dim(format!(
            "query point has {} coordinates, system has n = {}",
            x.len(),
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

fn shoot_upto(
    system: &HamiltonianSystem,
    section: &LagrangianSection,
    x: &[f64],
    path: &NoisePath,
    upto: usize,
    cfg: &ShootingConfig,
) -> Result<ShootingPath> {
    validate_shoot_inputs(system, section, x, path, cfg)?;
    let n = system.n();
    let d = 2 * n;
    let last = upto.min(path.grid().steps());
    let mut sc = ShootScratch::new(system, section, path, cfg)?;
    let mut out = ShootingPath {
        n,
        x: x.to_vec(),
        times: Vec::with_capacity(last + 1),
        base_points: Vec::with_capacity((last + 1) * n),
        fiber_points: Vec::with_capacity((last + 1) * d),
        determinants: Vec::with_capacity(last + 1),
        actions: Vec::with_capacity(last + 1),
        truncation: None,
        stats: SolverStats::default(),
    };
    let mut a = x.to_vec();
    let mut prev_det = 1.0;
    'nodes: for k in 0..=last {
        let mut solved = false;
        let mut action = 0.0;
        for _ in 0..cfg.max_newton {
            action = match sc.flow_to_node(&a, k) {
                Ok(r) => r,
                Err(_) => {
                    // Integration failure at a probe point is a loss of the
                    // solve, not a fatal error: truncate here.
                    out.truncation = Some(k);
                    break 'nodes;
                }
            };
            let mut res_norm = 0.0f64;
            for i in 0..n {
                sc.rhs[i] = sc.z[i] - x[i];
                res_norm = res_norm.max(sc.rhs[i].abs());
            }
            if !res_norm.is_finite() {
                out.truncation = Some(k);
                break 'nodes;
            }
            if res_norm <= cfg.newton_tol {
                solved = true;
                break;
            }
            let det = sc.factor_shooting_jacobian();
            if det == 0.0 || !det.is_finite() {
                out.truncation = Some(k);
                break 'nodes;
            }
            if lu_solve_rows(&sc.lu, n, &sc.piv, &mut sc.rhs, 1).is_err() {
                out.truncation = Some(k);
                break 'nodes;
            }
            for i in 0..n {
                a[i] -= sc.rhs[i];
            }
        }
        if !solved {
            out.truncation = Some(k);
            break;
        }
        // Invertibility monitoring at the converged point: stop on a small
        // determinant or a sign change (the caustic sits between nodes).
        let det = sc.factor_shooting_jacobian();
        if det.abs() <= cfg.det_eps || !det.is_finite() || det * prev_det < 0.0 {
            out.truncation = Some(k);
            break;
        }
        prev_det = det;
        let f_a = sc.section_jet(&a)?;
        out.times.push(path.grid().node(k));
        out.base_points.extend_from_slice(&a);
        out.fiber_points.extend_from_slice(&sc.z);
        out.determinants.push(det);
        out.actions.push(action + f_a);
    }
    out.stats = *sc.engine.stats();
    Ok(out)
}

/// Solves the shooting problem at every node of the path: finds `a_k` with
/// `q(phi_{t_k}(lift(a_k))) = x`, recording the flowed state, the shooting
/// Jacobian determinant, and the projected action, until truncation.
pub fn shoot(
    system: &HamiltonianSystem,
    section: &LagrangianSection,
    x: &[f64],
    path: &NoisePath,
    cfg: &ShootingConfig,
) -> Result<ShootingPath> {
    shoot_upto(system, section, x, path, usize::MAX, cfg)
}

/// [`shoot`] under the name of its main output: the projected action
/// `S_k = R_k + f(a_k)` filled at every solved node.
pub fn projected_action(
    system: &HamiltonianSystem,
    section: &LagrangianSection,
    x: &[f64],
    path: &NoisePath,
    cfg: &ShootingConfig,
) -> Result<ShootingPath> {
    shoot(system, section, x, path, cfg)
}

fn require_node(sp: &ShootingPath, k: usize, what: &str) -> Result<()> {
    if k < sp.nodes() {
        return Ok(());
    }
    let node = sp.truncation().unwrap_or(sp.nodes());
    Err(Error::TruncationMismatch {
        node,
        message: format!("{what} truncated before requested node {k}"),
    })
}

/// Spatial differential of the projected action at node `k`, either read
/// off the fiber momentum (`Formula`) or re-shot with central differences
/// over the query point (`Fd`).
pub fn d_s_tilde(
    system: &HamiltonianSystem,
    section: &LagrangianSection,
    x: &[f64],
    path: &NoisePath,
    k: usize,
    mode: DsMode,
    cfg: &ShootingConfig,
) -> Result<Vec<f64>> {
    match mode {
        DsMode::Formula => {
            let sp = shoot_upto(system, section, x, path, k, cfg)?;
            require_node(&sp, k, "shoot")?;
            Ok(sp.fiber_momentum(k).to_vec())
        }
        DsMode::Fd => {
            let n = system.n();
            let h = cfg.fd_step;
            let mut probe = x.to_vec();
            let mut out = vec![0.0; n];
            for i in 0..n {
                probe[i] = x[i] + h;
                let plus = shoot_upto(system, section, &probe, path, k, cfg)?;
                require_node(&plus, k, "forward probe")?;
                probe[i] = x[i] - h;
                let minus = shoot_upto(system, section, &probe, path, k, cfg)?;
                require_node(&minus, k, "backward probe")?;
                probe[i] = x[i];
                out[i] = (plus.s_tilde(k) - minus.s_tilde(k)) / (2.0 * h);
            }
            Ok(out)
        }
    }
}

/// The differential of the projected action at every solved node, one
/// covector per node. The `Fd` mode shoots the `2n` probes once and reads
/// all nodes from them.
pub fn d_s_tilde_profile(
    system: &HamiltonianSystem,
    section: &LagrangianSection,
    x: &[f64],
    path: &NoisePath,
    mode: DsMode,
    cfg: &ShootingConfig,
) -> Result<Vec<Vec<f64>>> {
    let sp = shoot(system, section, x, path, cfg)?;
    match mode {
        DsMode::Formula => Ok((0..sp.nodes())
            .map(|k| sp.fiber_momentum(k).to_vec())
            .collect()),
        DsMode::Fd => {
            let n = system.n();
            let h = cfg.fd_step;
            let mut probe = x.to_vec();
            let mut probes = Vec::with_capacity(2 * n);
            let mut nodes = sp.nodes();
            for i in 0..n {
                for sign in [1.0, -1.0] {
                    probe[i] = x[i] + sign * h;
                    let shot = shoot(system, section, &probe, path, cfg)?;
                    nodes = nodes.min(shot.nodes());
                    probes.push(shot);
                    probe[i] = x[i];
                }
            }
            if nodes < sp.nodes() {
                return Err(Error::TruncationMismatch {
                    node: nodes,
                    message: "a finite-difference probe truncated earlier than the base shoot"
                        .into(),
                });
            }
            let mut out = Vec::with_capacity(nodes);
            for k in 0..nodes {
                let mut g = vec![0.0; n];
                for i in 0..n {
                    let plus = &probes[2 * i];
                    let minus = &probes[2 * i + 1];
                    g[i] = (plus.s_tilde(k) - minus.s_tilde(k)) / (2.0 * h);
                }
                out.push(g);
            }
            Ok(out)
        }
    }
}

/// Discrete Hamilton-Jacobi defect per node:
/// `S_k - f(x) + sum_{j, l<k} h_j(x, (p(u_l) + p(u_{l+1}))/2) dX^j_l`.
/// Zero exactly when the projected action solves the discrete equation.
pub fn hj_residual(
    system: &HamiltonianSystem,
    section: &LagrangianSection,
    x: &[f64],
    path: &NoisePath,
    cfg: &ShootingConfig,
) -> Result<Vec<f64>> {
    let sp = shoot(system, section, x, path, cfg)?;
    let n = system.n();
    let f_x = section.value(x)?;
    let mut ws = FieldWorkspace::new();
    let mut zq = vec![0.0; 2 * n];
    zq[..n].copy_from_slice(x);
    let mut out = Vec::with_capacity(sp.nodes());
    let mut sum = 0.0;
    for k in 0..sp.nodes() {
        if k > 0 {
            let l = k - 1;
            let p_lo = sp.fiber_momentum(l);
            let p_hi = sp.fiber_momentum(k);
            for i in 0..n {
                zq[n + i] = 0.5 * (p_lo[i] + p_hi[i]);
            }
            let dx = path.step_increments(l);
            let t_mid = path.grid().node(l) + 0.5 * dx[0];
            for (j, field) in system.fields().iter().enumerate() {
                if dx[j] != 0.0 {
                    sum += field.eval_value(t_mid, &zq, &mut ws)? * dx[j];
                }
            }
        }
        out.push(sp.s_tilde(k) - f_x + sum);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::compile_str;
    use crate::noise::TimeGrid;

    fn system(n: usize, sources: &[&str]) -> HamiltonianSystem {
        let fields = sources
            .iter()
            .map(|s| compile_str(s, n, VarSpace::Phase).unwrap())
            .collect();
        HamiltonianSystem::new(fields).unwrap()
    }

    fn section(n: usize, source: &str) -> LagrangianSection {
        LagrangianSection::new(compile_str(source, n, VarSpace::Phase).unwrap()).unwrap()
    }

    fn slope_of_log2(levels: &[f64]) -> f64 {
        let m = levels.len() as f64;
        let mean_x = (levels.len() - 1) as f64 / 2.0;
        let mean_y = levels.iter().map(|v| v.log2()).sum::<f64>() / m;
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, v) in levels.iter().enumerate() {
            let dx = i as f64 - mean_x;
            num += dx * (v.log2() - mean_y);
            den += dx * dx;
        }
        num / den
    }

    #[test]
    fn test_lift_closed_forms() {
        let zero = section(1, "0");
        let z = zero.lift(&[0.7]).unwrap();
        assert_eq!(z.q, vec![0.7]);
        assert_eq!(z.p, vec![0.0]);

        let linear = section(1, "0.4*q1");
        let z = linear.lift(&[-1.2]).unwrap();
        assert_eq!(z.p, vec![0.4]);

        let quad = section(1, "q1^2/2");
        let z = quad.lift(&[0.9]).unwrap();
        assert!((z.p[0] - 0.9).abs() < 1e-15);

        let mixed = section(2, "q1*q2");
        let z = mixed.lift(&[0.5, -0.25]).unwrap();
        assert_eq!(z.p, vec![-0.25, 0.5]);
        assert_eq!(mixed.value(&[0.5, -0.25]).unwrap(), -0.125);
    }

    #[test]
    fn test_section_rejects_momentum_and_time() {
        let p_dep = compile_str("q1 + p1", 1, VarSpace::Phase).unwrap();
        assert!(LagrangianSection::new(p_dep).is_err());
        let t_dep = compile_str("t*q1", 1, VarSpace::Phase).unwrap();
        assert!(LagrangianSection::new(t_dep).is_err());
        let wrong_space = compile_str("a1*b1", 1, VarSpace::Generating).unwrap();
        assert!(LagrangianSection::new(wrong_space).is_err());
    }

    #[test]
    fn test_translation_zero_section_closed_form() {
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let path = NoisePath::sample(grid, 1, 17, 0);
        let sys = system(1, &["0", "p1"]);
        let sec = section(1, "0");
        let x = [0.8];
        let cfg = ShootingConfig::default();
        let sp = shoot(&sys, &sec, &x, &path, &cfg).unwrap();
        assert!(!sp.is_truncated());
        assert_eq!(sp.nodes(), 129);
        let b = path.node_values(1);
        for k in 0..sp.nodes() {
            assert!(
                (sp.base_point(k)[0] - (x[0] - b[k])).abs() < 1e-12,
                "node {k}"
            );
            assert!((sp.fiber_point(k)[0] - x[0]).abs() <= cfg.newton_tol);
            assert_eq!(sp.fiber_momentum(k)[0], 0.0, "zero section keeps p = 0");
            assert_eq!(sp.determinant(k), 1.0);
            assert_eq!(sp.s_tilde(k), 0.0);
        }
        let res = hj_residual(&sys, &sec, &x, &path, &cfg).unwrap();
        assert!(res.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn test_translation_linear_section_closed_form() {
        let grid = TimeGrid::new(1.0, 512).unwrap();
        let path = NoisePath::sample(grid, 1, 4, 1);
        let sys = system(1, &["0", "p1"]);
        let sec = section(1, "0.7*q1");
        let x = [0.3];
        let cfg = ShootingConfig::default();
        let sp = projected_action(&sys, &sec, &x, &path, &cfg).unwrap();
        assert_eq!(sp.s_tilde(0), 0.7 * x[0], "S_0 = f(x)");
        let b = path.node_values(1);
        for k in 0..sp.nodes() {
            assert!((sp.base_point(k)[0] - (x[0] - b[k])).abs() < 1e-12);
            assert!(
                (sp.s_tilde(k) - 0.7 * (x[0] - b[k])).abs() < 1e-12,
                "node {k}: {} vs {}",
                sp.s_tilde(k),
                0.7 * (x[0] - b[k])
            );
        }
        let g = d_s_tilde(&sys, &sec, &x, &path, 512, DsMode::Formula, &cfg).unwrap();
        assert_eq!(g, vec![0.7], "momentum is transported unchanged");
        let g_fd = d_s_tilde(&sys, &sec, &x, &path, 512, DsMode::Fd, &cfg).unwrap();
        assert!((g_fd[0] - 0.7).abs() < 1e-8, "{g_fd:?}");
        let res = hj_residual(&sys, &sec, &x, &path, &cfg).unwrap();
        let worst = res.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst < 1e-8, "max residual {worst}");
    }

    #[test]
    fn test_drift_linear_section_closed_form() {
        let grid = TimeGrid::new(1.0, 512).unwrap();
        let path = NoisePath::sample(grid, 1, 12, 3);
        let sys = system(1, &["p1^2/2", "p1"]);
        let c = 0.4;
        let sec = section(1, "0.4*q1");
        let x = [0.9];
        let cfg = ShootingConfig::default();
        let sp = shoot(&sys, &sec, &x, &path, &cfg).unwrap();
        assert!(!sp.is_truncated());
        let b = path.node_values(1);
        for k in 0..sp.nodes() {
            let t = sp.time(k);
            let a_exact = x[0] - c * t - b[k];
            assert!(
                (sp.base_point(k)[0] - a_exact).abs() < 1e-10,
                "node {k}: {} vs {a_exact}",
                sp.base_point(k)[0]
            );
            let s_exact = c * x[0] - c * c * t / 2.0 - c * b[k];
            assert!(
                (sp.s_tilde(k) - s_exact).abs() < 1e-9,
                "node {k}: {} vs {s_exact}",
                sp.s_tilde(k)
            );
        }
        let g = d_s_tilde(&sys, &sec, &x, &path, 512, DsMode::Formula, &cfg).unwrap();
        assert!((g[0] - c).abs() < 1e-12);
        let g_fd = d_s_tilde(&sys, &sec, &x, &path, 512, DsMode::Fd, &cfg).unwrap();
        assert!((g_fd[0] - c).abs() < 1e-8);
        let res = hj_residual(&sys, &sec, &x, &path, &cfg).unwrap();
        let worst = res.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst < 1e-6, "max residual {worst}");
    }

    #[test]
    fn test_free_particle_quadratic_section_determinant_growth() {
        // f = q^2/2 lifts to p = q; the flow spreads as q_t = a (1 + t), so
        // a_k = x / (1 + t_k), d_k = 1 + t_k, S_k = x^2 / (2 (1 + t_k)).
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let path = NoisePath::sample(grid, 0, 0, 0);
        let sys = system(1, &["p1^2/2"]);
        let sec = section(1, "q1^2/2");
        let x = [1.4];
        let cfg = ShootingConfig::default();
        let sp = shoot(&sys, &sec, &x, &path, &cfg).unwrap();
        assert!(!sp.is_truncated());
        assert_eq!(sp.determinant(0), 1.0);
        for k in 0..sp.nodes() {
            let t = sp.time(k);
            assert!((sp.base_point(k)[0] - x[0] / (1.0 + t)).abs() < 1e-10, "a at {k}");
            assert!((sp.determinant(k) - (1.0 + t)).abs() < 1e-10, "d at {k}");
            let s_exact = x[0] * x[0] / (2.0 * (1.0 + t));
            assert!((sp.s_tilde(k) - s_exact).abs() < 1e-10, "S at {k}");
        }
    }

    #[test]
    fn test_caustic_truncates_the_shoot() {
        // f = -q^2/2 focuses the free flow: q_t = a (1 - t) collapses at
        // t = 1, which is node 64 of this grid.
        let grid = TimeGrid::new(1.5, 96).unwrap();
        let path = NoisePath::sample(grid, 0, 0, 0);
        let sys = system(1, &["p1^2/2"]);
        let sec = section(1, "0 - q1^2/2");
        let x = [0.5];
        let cfg = ShootingConfig::default();
        let sp = shoot(&sys, &sec, &x, &path, &cfg).unwrap();
        assert_eq!(sp.truncation(), Some(64));
        assert_eq!(sp.nodes(), 64);
        for k in 0..sp.nodes() {
            let t = sp.time(k);
            assert!((sp.determinant(k) - (1.0 - t)).abs() < 1e-10);
        }
        // Residuals and profiles stop at the same place.
        let res = hj_residual(&sys, &sec, &x, &path, &cfg).unwrap();
        assert_eq!(res.len(), 64);
        // Requests beyond the truncation surface as mismatches.
        let err = d_s_tilde(&sys, &sec, &x, &path, 80, DsMode::Formula, &cfg).unwrap_err();
        assert!(matches!(err, Error::TruncationMismatch { node: 64, .. }), "{err}");
        let err = d_s_tilde(&sys, &sec, &x, &path, 80, DsMode::Fd, &cfg).unwrap_err();
        assert!(matches!(err, Error::TruncationMismatch { .. }), "{err}");
    }

    #[test]
    fn test_d_s_tilde_modes_agree_on_noisy_pendulum() {
        let sys = system(1, &["p1^2/2 + cos(q1)", "p1"]);
        let sec = section(1, "0.1*q1^2");
        let cfg = ShootingConfig::default();
        for seed in [1u64, 2] {
            let grid = TimeGrid::new(1.0, 64).unwrap();
            let path = NoisePath::sample(grid, 1, seed, 0);
            let x = [0.4];
            let formula = d_s_tilde_profile(&sys, &sec, &x, &path, DsMode::Formula, &cfg).unwrap();
            let fd = d_s_tilde_profile(&sys, &sec, &x, &path, DsMode::Fd, &cfg).unwrap();
            assert_eq!(formula.len(), 65);
            for (k, (f, g)) in formula.iter().zip(&fd).enumerate() {
                let scale = 1.0f64.max(f[0].abs());
                assert!(
                    (f[0] - g[0]).abs() / scale < 1e-3,
                    "seed {seed} node {k}: {} vs {}",
                    f[0],
                    g[0]
                );
            }
        }
    }

    #[test]
    fn test_classical_hj_residual_converges_quadratically() {
        // Zero noise, h0 = p^2/2, f = q^2/2: S(t, x) = x^2 / (2 (1 + t))
        // solves the classical equation, so the residual is pure midpoint
        // quadrature error, order 2 in dt.
        let sys = system(1, &["p1^2/2"]);
        let sec = section(1, "q1^2/2");
        let cfg = ShootingConfig::default();
        let x = [1.1];
        let mut worst = Vec::new();
        for steps in [32usize, 64, 128] {
            let grid = TimeGrid::new(1.0, steps).unwrap();
            let path = NoisePath::sample(grid, 0, 0, 0);
            let res = hj_residual(&sys, &sec, &x, &path, &cfg).unwrap();
            worst.push(res.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        }
        let slope = -slope_of_log2(&worst);
        assert!(slope >= 1.0, "order {slope}, residuals {worst:?}");
    }

    #[test]
    fn test_noisy_pendulum_residual_shrinks_under_refinement() {
        let sys = system(1, &["p1^2/2 + cos(q1)", "p1"]);
        let sec = section(1, "0.1*q1^2");
        let cfg = ShootingConfig::default();
        let x = [0.4];
        let mut path = NoisePath::sample(TimeGrid::new(1.0, 64).unwrap(), 1, 3, 0);
        let mut worst = Vec::new();
        for _ in 0..3 {
            let res = hj_residual(&sys, &sec, &x, &path, &cfg).unwrap();
            assert_eq!(res.len(), path.grid().steps() + 1, "no truncation expected");
            worst.push(res.iter().fold(0.0f64, |a, v| a.max(v.abs())));
            path = path.refine();
        }
        let slope = -slope_of_log2(&worst);
        assert!(slope >= 0.5, "order {slope}, residuals {worst:?}");
    }

    #[test]
    fn test_shooting_csv_layout() {
        let grid = TimeGrid::new(0.5, 4).unwrap();
        let path = NoisePath::sample(grid, 1, 5, 0);
        let sys = system(1, &["0", "p1"]);
        let sec = section(1, "0");
        let sp = shoot(&sys, &sec, &[0.2], &path, &ShootingConfig::default()).unwrap();
        let csv = sp.to_csv_string();
        assert_eq!(csv.lines().next().unwrap(), "k,t_k,a1,pu1,d_k,S_tilde_k");
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn test_shoot_input_validation() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let path = NoisePath::sample(grid, 1, 1, 0);
        let sys = system(1, &["0", "p1"]);
        let sec = section(1, "0");
        let cfg = ShootingConfig::default();
        assert!(shoot(&sys, &sec, &[0.1, 0.2], &path, &cfg).is_err());
        let sec2 = section(2, "q1 + q2");
        assert!(shoot(&sys, &sec2, &[0.1], &path, &cfg).is_err());
        let wide = NoisePath::sample(TimeGrid::new(1.0, 8).unwrap(), 2, 1, 0);
        assert!(shoot(&sys, &sec, &[0.1], &wide, &cfg).is_err());
        let mut bad = cfg;
        bad.solver.scheme = Scheme::EulerHeun;
        assert!(shoot(&sys, &sec, &[0.1], &path, &bad).is_err());
    }
}
