//! Phase-space primitives in Darboux coordinates.
//!
//! The phase space is `R^{2n}` with coordinates `z = (q, p)` and symplectic
//! matrix `Omega = [[0, I], [-I, 0]]` in `(q, p)` block order. A Hamiltonian
//! `h` generates the vector field `X_h = Omega * grad(h)`, i.e.
//! `dq/dt = dh/dp` and `dp/dt = -dh/dq`, and two fields pair through the
//! Poisson bracket `{f, g} = sum_i (df/dq_i dg/dp_i - df/dp_i dg/dq_i)`.
//! A driven system carries `r + 1` Hamiltonians: channel 0 couples to
//! deterministic time and channels `1..=r` to the noise components.

use crate::error::{Error, Result};
use crate::field::{FieldWorkspace, ScalarField, VarSpace};

/// A point `(q, p)` of phase space. Both legs have length `n >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhaseState {
    /// Validates lengths and finiteness.
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Result<PhaseState> {
        if q.is_empty() || q.len() != p.len() {
            return Err(Error::dim(format!(
                "phase state needs equal, nonempty legs (got {} and {})",
                q.len(),
                p.len()
            )));
        }
        if q.iter().chain(p.iter()).any(|x| !x.is_finite()) {
            return Err(Error::eval("non-finite entry in phase state"));
        }
        Ok(PhaseState { q, p })
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    /// Flattens to `[q..., p...]`.
    pub fn flat(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(2 * self.n());
        z.extend_from_slice(&self.q);
        z.extend_from_slice(&self.p);
        z
    }

    /// Rebuilds from a flat `[q..., p...]` slice.
    pub fn from_flat(z: &[f64]) -> Result<PhaseState> {
        if z.is_empty() || !z.len().is_multiple_of(2) {
            return Err(Error::dim(format!(
                "flat state must have even positive length, got {}",
                z.len()
            )));
        }
        let n = z.len() / 2;
        PhaseState::new(z[..n].to_vec(), z[n..].to_vec())
    }
}

/// A tangent vector `(dq, dp)` at a phase-space point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub dq: Vec<f64>,
    pub dp: Vec<f64>,
}

/// A covector with components against the coordinate differentials
/// `(dq, dp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CotangentVector {
    pub dq: Vec<f64>,
    pub dp: Vec<f64>,
}

impl CotangentVector {
    pub fn zeros(n: usize) -> CotangentVector {
        CotangentVector {
            dq: vec![0.0; n],
            dp: vec![0.0; n],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.dq.clone();
        v.extend_from_slice(&self.dp);
        v
    }
}

/// A stochastic Hamiltonian system: `r + 1` scalar fields on one phase space.
/// Field 0 is the drift Hamiltonian (coupled to time); fields `1..=r` couple
/// to the noise channels.
#[derive(Debug, Clone)]
pub struct HamiltonianSystem {
    n: usize,
    fields: Vec<ScalarField>,
}

impl HamiltonianSystem {
    pub fn new(fields: Vec<ScalarField>) -> Result<HamiltonianSystem> {
        let Some(first) = fields.first() else {
            return Err(Error::dim("a system needs at least the drift Hamiltonian"));
        };
        let n = first.n();
        for (j, f) in fields.iter().enumerate() {
            if f.space() != VarSpace::Phase {
                return Err(Error::dim(format!(
                    "system Hamiltonian {j} must live in phase space"
                )));
            }
            if f.n() != n {
                return Err(Error::dim(format!(
                    "system Hamiltonian {j} has n = {}, expected {n}",
                    f.n()
                )));
            }
        }
        Ok(HamiltonianSystem { n, fields })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of noise channels.
    pub fn r(&self) -> usize {
        self.fields.len() - 1
    }

    /// All Hamiltonians, drift first.
    pub fn fields(&self) -> &[ScalarField] {
        &self.fields
    }

    pub fn drift(&self) -> &ScalarField {
        &self.fields[0]
    }

    /// Hamiltonian for channel `j` (0 = drift).
    pub fn channel(&self, j: usize) -> &ScalarField {
        &self.fields[j]
    }
}

/// Evaluates `X_h` at `(t, z)`: `dq = dh/dp`, `dp = -dh/dq`.
pub fn hamiltonian_vector_field(
    h: &ScalarField,
    t: f64,
    z: &PhaseState,
) -> Result<TangentVector> {
    let n = z.n();
    if h.n() != n {
        return Err(Error::dim(format!(
            "field over n = {} applied to state with n = {n}",
            h.n()
        )));
    }
    let jet = h.jet(t, z)?;
    let dq = jet.grad[n..].to_vec();
    let dp = jet.grad[..n].iter().map(|g| -g).collect();
    Ok(TangentVector { dq, dp })
}

/// Poisson bracket `{f, g}` at `(t, z)`.
pub fn poisson_bracket(f: &ScalarField, g: &ScalarField, t: f64, z: &PhaseState) -> Result<f64> {
    let n = z.n();
    if f.n() != n || g.n() != n {
        return Err(Error::dim("bracket operands must share the state dimension"));
    }
    let jf = f.jet(t, z)?;
    let jg = g.jet(t, z)?;
    let mut acc = 0.0;
    for i in 0..n {
        acc += jf.grad[i] * jg.grad[n + i] - jf.grad[n + i] * jg.grad[i];
    }
    Ok(acc)
}

/// Pairs the canonical one-form `sum_i p_i dq_i` at `z` with a tangent
/// vector: returns `p(z) . dq`.
pub fn liouville_pairing(z: &PhaseState, v: &TangentVector) -> Result<f64> {
    if v.dq.len() != z.n() {
        return Err(Error::dim("tangent vector dimension mismatch"));
    }
    Ok(z.p.iter().zip(&v.dq).map(|(p, dq)| p * dq).sum())
}

/// The canonical one-form at `z` as a covector: `(p, 0)`.
pub(crate) fn canonical_one_form_flat(z: &[f64], out: &mut [f64]) {
    let n = z.len() / 2;
    out[..n].copy_from_slice(&z[n..]);
    out[n..].fill(0.0);
}

/// Max-norm of `J^T Omega J - Omega` for a row-major `2n x 2n` matrix `J`;
/// zero exactly when `J` is symplectic.
pub fn symplectic_defect(j: &[f64], n: usize) -> Result<f64> {
    let d = 2 * n;
    if j.len() != d * d {
        return Err(Error::dim(format!(
            "expected {d}x{d} Jacobian, got {} entries",
            j.len()
        )));
    }
    let mut scratch = vec![0.0; d * d];
    Ok(symplectic_defect_scratch(j, n, &mut scratch))
}

/// Allocation-free core of [`symplectic_defect`]; `scratch` holds `4n^2`.
pub(crate) fn symplectic_defect_scratch(j: &[f64], n: usize, scratch: &mut [f64]) -> f64 {
    let d = 2 * n;
    // scratch = Omega * J: top rows are the p-rows of J, bottom rows are the
    // negated q-rows.
    for i in 0..n {
        for c in 0..d {
            scratch[i * d + c] = j[(n + i) * d + c];
            scratch[(n + i) * d + c] = -j[i * d + c];
        }
    }
    // defect = max |(J^T * scratch - Omega)_{ab}|
    let mut defect = 0.0f64;
    for a in 0..d {
        for b in 0..d {
            let mut acc = 0.0;
            for c in 0..d {
                acc += j[c * d + a] * scratch[c * d + b];
            }
            let omega_ab = if b == a + n {
                1.0
            } else if a == b + n {
                -1.0
            } else {
                0.0
            };
            defect = defect.max((acc - omega_ab).abs());
        }
    }
    defect
}

/// Evaluates `X_h` into a flat output buffer, scaled and accumulated:
/// `out += scale * X_h(t, z)`. Returns the field value (used by action
/// accumulation). Internal hot-path variant of [`hamiltonian_vector_field`].
pub(crate) fn accumulate_vector_field(
    h: &ScalarField,
    t: f64,
    z: &[f64],
    scale: f64,
    ws: &mut FieldWorkspace,
    grad_buf: &mut [f64],
    out: &mut [f64],
) -> Result<f64> {
    let n = h.n();
    let value = h.eval_grad(t, z, ws, grad_buf)?;
    // grad_buf layout: [dt, dq..., dp...]
    for i in 0..n {
        out[i] += scale * grad_buf[1 + n + i];
        out[n + i] -= scale * grad_buf[1 + i];
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::compile_str;

    fn field(src: &str, n: usize) -> ScalarField {
        compile_str(src, n, VarSpace::Phase).unwrap()
    }

    #[test]
    fn test_vector_field_signs_on_oscillator() {
        let h = field("(q1^2+p1^2)/2", 1);
        let z = PhaseState::new(vec![2.0], vec![3.0]).unwrap();
        let v = hamiltonian_vector_field(&h, 0.0, &z).unwrap();
        assert!((v.dq[0] - 3.0).abs() < 1e-14);
        assert!((v.dp[0] + 2.0).abs() < 1e-14);
    }

    #[test]
    fn test_bracket_of_coordinates_is_canonical() {
        // {q1, p1} = 1, {q1, q1} = 0, and for n = 2 the cross brackets vanish.
        let q1 = field("q1", 2);
        let p1 = field("p1", 2);
        let p2 = field("p2", 2);
        let z = PhaseState::new(vec![0.3, -0.4], vec![1.1, 0.2]).unwrap();
        assert!((poisson_bracket(&q1, &p1, 0.0, &z).unwrap() - 1.0).abs() < 1e-14);
        assert!(poisson_bracket(&q1, &q1, 0.0, &z).unwrap().abs() < 1e-14);
        assert!(poisson_bracket(&q1, &p2, 0.0, &z).unwrap().abs() < 1e-14);
    }

    #[test]
    fn test_bracket_antisymmetry_at_probe_points() {
        let f = field("sin(q1)*p1^2", 1);
        let g = field("exp(p1)+q1^3", 1);
        for k in 0..20 {
            let x = -1.0 + 0.1 * k as f64;
            let z = PhaseState::new(vec![x], vec![0.5 - 0.05 * k as f64]).unwrap();
            let fg = poisson_bracket(&f, &g, 0.0, &z).unwrap();
            let gf = poisson_bracket(&g, &f, 0.0, &z).unwrap();
            assert!((fg + gf).abs() < 1e-12, "antisymmetry violated: {fg} {gf}");
        }
    }

    #[test]
    fn test_omega_gradient_relation() {
        // Omega^T X_h = grad h over (q, p).
        let h = field("q1*p1^2 + cos(q1)", 1);
        let z = PhaseState::new(vec![0.7], vec![-1.3]).unwrap();
        let v = hamiltonian_vector_field(&h, 0.0, &z).unwrap();
        let jet = h.jet(0.0, &z).unwrap();
        // Omega^T (dq, dp) = (-dp, dq)
        assert!((-v.dp[0] - jet.grad[0]).abs() < 1e-12);
        assert!((v.dq[0] - jet.grad[1]).abs() < 1e-12);
    }

    #[test]
    fn test_liouville_pairing_reads_momentum_against_dq() {
        let z = PhaseState::new(vec![9.0, 9.0], vec![2.0, -1.0]).unwrap();
        let v = TangentVector {
            dq: vec![0.5, 1.0],
            dp: vec![77.0, 77.0],
        };
        assert!((liouville_pairing(&z, &v).unwrap() - 0.0).abs() < 1e-14);
    }

    #[test]
    fn test_symplectic_defect_detects_non_symplectic() {
        // Identity is symplectic; a shear in (q,p) with determinant 1 need not be.
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert!(symplectic_defect(&eye, 1).unwrap() < 1e-15);
        let rot = {
            let (s, c) = (0.3f64.sin(), 0.3f64.cos());
            [c, s, -s, c]
        };
        assert!(symplectic_defect(&rot, 1).unwrap() < 1e-15);
        let scale = [2.0, 0.0, 0.0, 1.0];
        let d = symplectic_defect(&scale, 1).unwrap();
        assert!((d - 1.0).abs() < 1e-12, "defect = {d}");
    }

    #[test]
    fn test_state_validation() {
        assert!(PhaseState::new(vec![], vec![]).is_err());
        assert!(PhaseState::new(vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(PhaseState::new(vec![f64::NAN], vec![0.0]).is_err());
        let z = PhaseState::new(vec![1.0], vec![2.0]).unwrap();
        assert_eq!(PhaseState::from_flat(&z.flat()).unwrap(), z);
    }

    #[test]
    fn test_system_checks_spaces_and_dims() {
        let h0 = field("p1^2/2", 1);
        let h1 = field("p1", 1);
        let sys = HamiltonianSystem::new(vec![h0, h1]).unwrap();
        assert_eq!(sys.r(), 1);
        assert_eq!(sys.n(), 1);

        let bad = vec![field("p1", 1), field("p2", 2)];
        assert!(HamiltonianSystem::new(bad).is_err());
        let gen = compile_str("a1*b1", 1, VarSpace::Generating).unwrap();
        assert!(HamiltonianSystem::new(vec![gen]).is_err());
    }
}
