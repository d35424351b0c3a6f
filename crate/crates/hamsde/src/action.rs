//! Pathwise action along a discrete flow and its differential.
//!
//! For a trajectory of `dZ = sum_j X_{h_j}(Z) dX^j` the action accumulates
//! `dR_k = p_mid . dq_k - sum_j h_j(t_mid, mid) dX^j_k` with
//! `mid = (Z_k + Z_{k+1}) / 2`, i.e. the discrete Stratonovich integral
//! `int <theta, dZ> - int <h, dX>` in the same midpoint convention the
//! integrator uses. With that convention the differential of `R_k` as a
//! function of the initial condition satisfies the discrete identity
//!
//! `dR_k = J_k^T theta(Z_k) - theta(z0)`
//!
//! exactly (up to solver tolerance), where `J_k` is the propagated tangent
//! map and `theta(z) = (p, 0)` the canonical one-form in `(dq, dp)`
//! components. [`action_gradient`] evaluates that formula;
//! [`fd_action_gradient`] checks it against common-path central differences;
//! [`hat_r_gradient_check`] does the analogous consistency check for the
//! action viewed from the endpoint through the inverse flow.

use std::io::Write;

use crate::error::{Error, Result};
use crate::field::FieldWorkspace;
use crate::geometry::{canonical_one_form_flat, CotangentVector, HamiltonianSystem, PhaseState};
use crate::integrator::{integrate_flow, FlowEngine, SchemeConfig, Trajectory};
use crate::linalg::mat_mul;
use crate::noise::NoisePath;

/// Running action values along one trajectory.
#[derive(Debug, Clone)]
pub struct ActionPath {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl ActionPath {
    /// Number of steps `K`; values exist at `K + 1` nodes with `R_0 = 0`.
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn final_value(&self) -> f64 {
        *self.values.last().expect("at least one node")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Writes `k, t_k, R_k` rows.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "k,t_k,R_k")?;
        for k in 0..self.values.len() {
            writeln!(w, "{k},{},{}", self.times[k], self.values[k])?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

/// Accumulates the pathwise action along an existing trajectory, using the
/// same midpoint states as the integrator steps.
pub fn accumulate_action(
    traj: &Trajectory,
    path: &NoisePath,
    system: &HamiltonianSystem,
) -> Result<ActionPath> {
    if traj.steps() != path.grid().steps() {
        return Err(Error::dim(format!(
            "trajectory has {} steps, path has {}",
            traj.steps(),
            path.grid().steps()
        )));
    }
    if traj.n() != system.n() {
        return Err(Error::dim("trajectory and system dimensions differ"));
    }
    if path.channels() != system.r() {
        return Err(Error::dim("path and system channel counts differ"));
    }
    let n = system.n();
    let d = 2 * n;
    let mut ws = FieldWorkspace::new();
    let mut mid = vec![0.0; d];
    let mut times = Vec::with_capacity(traj.steps() + 1);
    let mut values = Vec::with_capacity(traj.steps() + 1);
    times.push(traj.time(0));
    values.push(0.0);
    let mut running = 0.0;
    for k in 0..traj.steps() {
        let z0 = traj.state_flat(k);
        let z1 = traj.state_flat(k + 1);
        for c in 0..d {
            mid[c] = 0.5 * (z0[c] + z1[c]);
        }
        let dx = path.step_increments(k);
        let t_mid = traj.time(k) + 0.5 * dx[0];
        let mut delta = 0.0;
        for i in 0..n {
            delta += mid[n + i] * (z1[i] - z0[i]);
        }
        for (j, field) in system.fields().iter().enumerate() {
            if dx[j] != 0.0 {
                delta -= field.eval_value(t_mid, &mid, &mut ws)? * dx[j];
            }
        }
        running += delta;
        times.push(traj.time(k + 1));
        values.push(running);
    }
    Ok(ActionPath { times, values })
}

/// The exact differential of `R_k` with respect to the initial condition:
/// `J_k^T theta(Z_k) - theta(Z_0)`, assembled from the propagated tangent
/// map.
pub fn action_gradient(traj: &Trajectory, k: usize) -> Result<CotangentVector> {
    let n = traj.n();
    let d = 2 * n;
    let jac = traj.jacobian(k).ok_or_else(|| Error::State {
        message: "action gradient needs a trajectory with tangent maps".into(),
    })?;
    let zk = traj.state_flat(k);
    let z0 = traj.state_flat(0);
    // w = J_k^T theta(Z_k); theta has only dq components, equal to p(Z_k).
    let mut w = vec![0.0; d];
    for c in 0..d {
        let mut acc = 0.0;
        for i in 0..n {
            acc += jac[i * d + c] * zk[n + i];
        }
        w[c] = acc;
    }
    for i in 0..n {
        w[i] -= z0[n + i];
    }
    Ok(CotangentVector {
        dq: w[..n].to_vec(),
        dp: w[n..].to_vec(),
    })
}

/// Central-difference gradient of `R_k` over the initial condition, with
/// two-level Richardson extrapolation, re-integrating on the same path.
pub fn fd_action_gradient(
    system: &HamiltonianSystem,
    z0: &PhaseState,
    path: &NoisePath,
    k: usize,
    h_fd: f64,
    cfg: &SchemeConfig,
) -> Result<CotangentVector> {
    if !(h_fd > 0.0) {
        return Err(Error::dim("finite-difference step must be positive"));
    }
    if k > path.grid().steps() {
        return Err(Error::dim(format!(
            "node {} beyond the {}-step path",
            k,
            path.grid().steps()
        )));
    }
    let n = system.n();
    let d = 2 * n;
    let base = z0.flat();
    let action_at = |z: &[f64]| -> Result<f64> {
        let state = PhaseState::from_flat(z)?;
        let traj = integrate_flow(system, &state, path, cfg, false)?;
        Ok(accumulate_action(&traj, path, system)?.value(k))
    };
    let mut out = vec![0.0; d];
    let mut probe = base.clone();
    for c in 0..d {
        let mut slopes = [0.0; 2];
        for (level, slope) in slopes.iter_mut().enumerate() {
            let h = h_fd / (1 << level) as f64;
            probe[c] = base[c] + h;
            let plus = action_at(&probe)?;
            probe[c] = base[c] - h;
            let minus = action_at(&probe)?;
            probe[c] = base[c];
            *slope = (plus - minus) / (2.0 * h);
        }
        out[c] = (4.0 * slopes[1] - slopes[0]) / 3.0;
    }
    Ok(CotangentVector {
        dq: out[..n].to_vec(),
        dp: out[n..].to_vec(),
    })
}

/// Consistency defect for the endpoint-based action differential.
///
/// Starting from `z_t`, the first `k` steps are run backwards to recover
/// `z_0` while accumulating the inverse tangent map `J_rev = D(phi^-1)`.
/// The differential of the endpoint action is then assembled two ways:
/// pulling the initial-condition differential back through the inverse flow
/// (`J_rev^T (J_fwd^T theta(z_t') - theta(z_0))`), and directly as
/// `theta(z_t) - J_rev^T theta(z_0)`. Returns the max-norm difference.
pub fn hat_r_gradient_check(
    system: &HamiltonianSystem,
    z_t: &PhaseState,
    path: &NoisePath,
    k: usize,
    cfg: &SchemeConfig,
) -> Result<f64> {
    if z_t.n() != system.n() {
        return Err(Error::dim("state dimension does not match the system"));
    }
    if path.channels() != system.r() {
        return Err(Error::dim("path and system channel counts differ"));
    }
    if k > path.grid().steps() {
        return Err(Error::dim(format!(
            "node {} beyond the {}-step path",
            k,
            path.grid().steps()
        )));
    }
    let n = system.n();
    let d = 2 * n;
    let mut engine = FlowEngine::new(system, *cfg)?;
    let mut identity = vec![0.0; d * d];
    for i in 0..d {
        identity[i * d + i] = 1.0;
    }

    // Backward pass: recover z0 and accumulate J_rev = D(phi^-1)(z_t).
    let mut z = z_t.flat();
    let mut z_next = vec![0.0; d];
    let mut mid = vec![0.0; d];
    let mut cay = vec![0.0; d * d];
    let mut j_rev = identity.clone();
    let mut j_tmp = vec![0.0; d * d];
    let mut neg = vec![0.0; system.r() + 1];
    for step in (0..k).rev() {
        for (o, v) in neg.iter_mut().zip(path.step_increments(step)) {
            *o = -v;
        }
        let t_hi = path.grid().node(step + 1);
        engine.step_into(step, t_hi, &neg, &z, &mut z_next)?;
        for c in 0..d {
            mid[c] = 0.5 * (z[c] + z_next[c]);
        }
        engine.cayley_into(t_hi + 0.5 * neg[0], &mid, &neg, &mut cay)?;
        mat_mul(&mut j_tmp, &cay, &j_rev, d, d, d);
        j_rev.copy_from_slice(&j_tmp);
        z.copy_from_slice(&z_next);
    }
    let z0 = z.clone();

    // Forward pass from z0: accumulate J_fwd and land back near z_t.
    let mut j_fwd = identity;
    for step in 0..k {
        let dx = path.step_increments(step);
        let t_lo = path.grid().node(step);
        engine.step_into(step, t_lo, dx, &z, &mut z_next)?;
        for c in 0..d {
            mid[c] = 0.5 * (z[c] + z_next[c]);
        }
        engine.cayley_into(t_lo + 0.5 * dx[0], &mid, dx, &mut cay)?;
        mat_mul(&mut j_tmp, &cay, &j_fwd, d, d, d);
        j_fwd.copy_from_slice(&j_tmp);
        z.copy_from_slice(&z_next);
    }
    let z_t_rebuilt = z;

    let transpose_apply = |m: &[f64], v: &[f64], out: &mut [f64]| {
        for c in 0..d {
            let mut acc = 0.0;
            for i in 0..d {
                acc += m[i * d + c] * v[i];
            }
            out[c] = acc;
        }
    };

    let mut th_end = vec![0.0; d];
    let mut th_start = vec![0.0; d];
    canonical_one_form_flat(&z_t_rebuilt, &mut th_end);
    canonical_one_form_flat(&z0, &mut th_start);

    // Route A: pull dR (at z0) back through the inverse flow.
    let mut d_r = vec![0.0; d];
    transpose_apply(&j_fwd, &th_end, &mut d_r);
    for c in 0..d {
        d_r[c] -= th_start[c];
    }
    let mut route_a = vec![0.0; d];
    transpose_apply(&j_rev, &d_r, &mut route_a);

    // Route B: theta(z_t) - J_rev^T theta(z0).
    let mut th_at_zt = vec![0.0; d];
    canonical_one_form_flat(&z_t.flat(), &mut th_at_zt);
    let mut pulled = vec![0.0; d];
    transpose_apply(&j_rev, &th_start, &mut pulled);

    let mut defect = 0.0f64;
    for c in 0..d {
        defect = defect.max((route_a[c] - (th_at_zt[c] - pulled[c])).abs());
    }
    Ok(defect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::compile_str;
    use crate::field::VarSpace;
    use crate::noise::TimeGrid;

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

    #[test]
    fn test_action_vanishes_on_zero_momentum_translation() {
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let path = NoisePath::sample(grid, 1, 7, 0);
        let sys = system(1, &["0", "p1"]);
        let z0 = state(&[0.4], &[0.0]);
        let traj = integrate_flow(&sys, &z0, &path, &SchemeConfig::default(), false).unwrap();
        let action = accumulate_action(&traj, &path, &sys).unwrap();
        for k in 0..=128 {
            assert_eq!(action.value(k), 0.0, "node {k}");
        }
    }

    #[test]
    fn test_action_translation_terms_cancel_at_any_momentum() {
        // p_mid dq ~ c dB cancels h_1 dB = c dB; the only residue is the
        // lattice roundoff of q + dB, about an ulp of q per step.
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let path = NoisePath::sample(grid, 1, 11, 2);
        let sys = system(1, &["0", "p1"]);
        let z0 = state(&[-0.2], &[1.7]);
        let traj = integrate_flow(&sys, &z0, &path, &SchemeConfig::default(), false).unwrap();
        let action = accumulate_action(&traj, &path, &sys).unwrap();
        assert!(
            action.final_value().abs() < 1e-14,
            "{}",
            action.final_value()
        );
    }

    #[test]
    fn test_action_free_particle_closed_form() {
        let grid = TimeGrid::new(2.0, 256).unwrap();
        let path = NoisePath::sample(grid, 0, 0, 0);
        let sys = system(1, &["p1^2/2"]);
        let p0 = 1.3;
        let z0 = state(&[0.5], &[p0]);
        let traj = integrate_flow(&sys, &z0, &path, &SchemeConfig::default(), false).unwrap();
        let action = accumulate_action(&traj, &path, &sys).unwrap();
        for k in 0..=256 {
            let expected = 0.5 * p0 * p0 * action.time(k);
            assert!(
                (action.value(k) - expected).abs() < 1e-12,
                "node {k}: {} vs {expected}",
                action.value(k)
            );
        }
    }

    #[test]
    fn test_action_is_additive_over_restart() {
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let path = NoisePath::sample(grid, 1, 23, 5);
        let sys = system(1, &["p1^2/2 + cos(q1)", "p1"]);
        let z0 = state(&[0.3], &[1.1]);
        let cfg = SchemeConfig::default();
        let traj = integrate_flow(&sys, &z0, &path, &cfg, false).unwrap();
        let action = accumulate_action(&traj, &path, &sys).unwrap();

        let m = 100;
        // Suffix path over the remaining steps (time-homogeneous system, so
        // relabelled node times do not change the dynamics).
        let tail_steps = 256 - m;
        let tail_grid = TimeGrid::new(tail_steps as f64 * grid.dt(), tail_steps).unwrap();
        let mut tail_inc = Vec::with_capacity(tail_steps * 2);
        for k in m..256 {
            tail_inc.extend_from_slice(path.step_increments(k));
        }
        let tail_path = NoisePath::from_increments(tail_grid, 1, tail_inc).unwrap();
        let restart = traj.state(m);
        let tail_traj = integrate_flow(&sys, &restart, &tail_path, &cfg, false).unwrap();
        let tail_action = accumulate_action(&tail_traj, &tail_path, &sys).unwrap();

        let total = action.value(m) + tail_action.final_value();
        assert!(
            (action.final_value() - total).abs() < 1e-12,
            "{} vs {}",
            action.final_value(),
            total
        );
    }

    #[test]
    fn test_oscillator_loop_reproduces_symplectic_area() {
        // Integrate one full oscillator period, then accumulate int p dq
        // (zero Hamiltonian) along the closed loop: the enclosed area is pi
        // for the unit circle.
        let steps = 8192;
        let grid = TimeGrid::new(2.0 * std::f64::consts::PI, steps).unwrap();
        let path = NoisePath::sample(grid, 0, 0, 0);
        let osc = system(1, &["(q1^2 + p1^2)/2"]);
        let zero_h = system(1, &["0"]);
        let z0 = state(&[1.0], &[0.0]);
        let traj = integrate_flow(&osc, &z0, &path, &SchemeConfig::default(), false).unwrap();
        let area = accumulate_action(&traj, &path, &zero_h).unwrap();
        assert!(
            (area.final_value() - std::f64::consts::PI).abs() < 1e-6,
            "loop integral {} vs pi",
            area.final_value()
        );
    }

    #[test]
    fn test_action_gradient_closed_forms() {
        // k = 0: zero covector.
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let path = NoisePath::sample(grid, 1, 3, 1);
        let sys = system(1, &["0", "p1"]);
        let z0 = state(&[0.4], &[0.9]);
        let traj = integrate_flow(&sys, &z0, &path, &SchemeConfig::default(), true).unwrap();
        let g0 = action_gradient(&traj, 0).unwrap();
        assert_eq!(g0.flat(), vec![0.0, 0.0]);
        // Translation: J = I and p is preserved, so the gradient vanishes.
        let g = action_gradient(&traj, 64).unwrap();
        for v in g.flat() {
            assert!(v.abs() < 1e-13, "{g:?}");
        }

        // Deterministic free particle: dR = (0, p0 t).
        let dpath = NoisePath::sample(TimeGrid::new(1.5, 128).unwrap(), 0, 0, 0);
        let free = system(1, &["p1^2/2"]);
        let zf = state(&[0.2], &[0.7]);
        let tf = integrate_flow(&free, &zf, &dpath, &SchemeConfig::default(), true).unwrap();
        let gf = action_gradient(&tf, 128).unwrap();
        assert!(gf.dq[0].abs() < 1e-12, "{gf:?}");
        assert!((gf.dp[0] - 0.7 * 1.5).abs() < 1e-12, "{gf:?}");
    }

    #[test]
    fn test_fd_gradient_matches_formula_on_nonlinear_system() {
        let sys = system(1, &["p1^2/2 + cos(q1)", "p1"]);
        let cfg = SchemeConfig::default();
        for (seed, q0, p0) in [(1u64, 0.3, 1.1), (2, -0.6, 0.4), (3, 1.2, -0.8)] {
            let grid = TimeGrid::new(1.0, 256).unwrap();
            let path = NoisePath::sample(grid, 1, seed, 0);
            let z0 = state(&[q0], &[p0]);
            let traj = integrate_flow(&sys, &z0, &path, &cfg, true).unwrap();
            let exact = action_gradient(&traj, 256).unwrap().flat();
            let fd = fd_action_gradient(&sys, &z0, &path, 256, 1e-4, &cfg)
                .unwrap()
                .flat();
            let norm = 1.0 + exact.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (e, f) in exact.iter().zip(&fd) {
                assert!(
                    (e - f).abs() / norm < 1e-5,
                    "seed {seed}: {exact:?} vs {fd:?}"
                );
            }
        }
    }

    #[test]
    fn test_fd_gradient_matches_oscillator_classical_action() {
        // Deterministic oscillator: dR has the closed form
        // dq: -q0 sc - p0 s^2, dp: p0 sc - q0 s^2 (s = sin t, c = cos t).
        let t_end: f64 = 1.0;
        let grid = TimeGrid::new(t_end, 4096).unwrap();
        let path = NoisePath::sample(grid, 0, 0, 0);
        let sys = system(1, &["(q1^2 + p1^2)/2"]);
        let (q0, p0) = (0.8, -0.5);
        let z0 = state(&[q0], &[p0]);
        let (s, c) = t_end.sin_cos();
        let expected = [-p0 * s * s - q0 * s * c, p0 * s * c - q0 * s * s];
        let fd = fd_action_gradient(&sys, &z0, &path, 4096, 1e-4, &SchemeConfig::default())
            .unwrap()
            .flat();
        for (f, e) in fd.iter().zip(expected) {
            assert!((f - e).abs() < 1e-8, "{fd:?} vs {expected:?}");
        }
    }

    #[test]
    fn test_hat_r_defect_small_on_translation_and_nonlinear() {
        let cfg = SchemeConfig::default();
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let path = NoisePath::sample(grid, 1, 9, 4);
        let sys = system(1, &["0", "p1"]);
        let z0 = state(&[0.1], &[0.6]);
        let traj = integrate_flow(&sys, &z0, &path, &cfg, false).unwrap();
        let z_t = traj.final_state();
        assert_eq!(
            hat_r_gradient_check(&sys, &z_t, &path, 0, &cfg).unwrap(),
            0.0
        );
        let defect = hat_r_gradient_check(&sys, &z_t, &path, 64, &cfg).unwrap();
        assert!(defect < 1e-10, "translation defect {defect}");

        let pend = system(1, &["p1^2/2 + cos(q1)", "p1"]);
        for seed in [1u64, 2, 3] {
            let path = NoisePath::sample(grid, 1, seed, 7);
            let z0 = state(&[0.25], &[0.9]);
            let traj = integrate_flow(&pend, &z0, &path, &cfg, false).unwrap();
            let defect =
                hat_r_gradient_check(&pend, &traj.final_state(), &path, 64, &cfg).unwrap();
            assert!(defect < 1e-6, "seed {seed}: defect {defect}");
        }
    }

    #[test]
    fn test_action_csv_layout() {
        let grid = TimeGrid::new(0.5, 4).unwrap();
        let path = NoisePath::sample(grid, 0, 0, 0);
        let sys = system(1, &["p1^2/2"]);
        let z0 = state(&[0.0], &[1.0]);
        let traj = integrate_flow(&sys, &z0, &path, &SchemeConfig::default(), false).unwrap();
        let action = accumulate_action(&traj, &path, &sys).unwrap();
        let csv = action.to_csv_string();
        assert_eq!(csv.lines().next().unwrap(), "k,t_k,R_k");
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0,0"));
    }

    #[test]
    fn test_action_dimension_checks() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let path = NoisePath::sample(grid, 1, 1, 0);
        let sys = system(1, &["0", "p1"]);
        let z0 = state(&[0.0], &[0.0]);
        let traj = integrate_flow(&sys, &z0, &path, &SchemeConfig::default(), false).unwrap();
        let short = NoisePath::sample(TimeGrid::new(1.0, 4).unwrap(), 1, 1, 0);
        assert!(accumulate_action(&traj, &short, &sys).is_err());
        assert!(action_gradient(&traj, 8).is_err(), "no tangent maps stored");
    }
}
