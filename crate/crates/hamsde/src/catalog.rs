//! Built-in example systems, sections, and generating functions.
//!
//! Every entry carries its defining expression sources plus a one-line
//! oracle annotation describing the closed form (or benchmark role) it is
//! tested against elsewhere in the crate. The catalog gives configs and
//! examples stable names instead of repeated DSL strings.

use crate::dsl::compile_str;
use crate::error::{Error, Result};
use crate::field::VarSpace;
use crate::geometry::HamiltonianSystem;
use crate::hamilton_jacobi::LagrangianSection;
use crate::transform::GeneratingFunction;

/// A named Hamiltonian family `h_0, h_1, .., h_r` on an `n`-dimensional base.
#[derive(Debug, Clone, Copy)]
pub struct SystemEntry {
    pub name: &'static str,
    pub n: usize,
    /// Sources for `h_0..h_r` in channel order.
    pub hamiltonians: &'static [&'static str],
    /// Closed-form behavior this entry is checked against.
    pub oracle: &'static str,
}

/// A named initial section `f(q)` for shooting problems.
#[derive(Debug, Clone, Copy)]
pub struct SectionEntry {
    pub name: &'static str,
    pub n: usize,
    pub source: &'static str,
    pub oracle: &'static str,
}

/// A named generating function `S(t, a, b)`.
#[derive(Debug, Clone, Copy)]
pub struct GeneratingEntry {
    pub name: &'static str,
    pub n: usize,
    pub source: &'static str,
    pub oracle: &'static str,
}

/// Declaration order is the documented listing order.
pub const SYSTEMS: &[SystemEntry] = &[
    SystemEntry {
        name: "translation",
        n: 1,
        hamiltonians: &["0", "p1"],
        oracle: "flow: q+B, p const",
    },
    SystemEntry {
        name: "free_particle",
        n: 1,
        hamiltonians: &["p1^2/2"],
        oracle: "flow: q+pt, p const",
    },
    SystemEntry {
        name: "free_noisy",
        n: 1,
        hamiltonians: &["p1^2/2", "p1"],
        oracle: "flow: q+pt+B, p const",
    },
    SystemEntry {
        name: "harmonic_oscillator",
        n: 1,
        hamiltonians: &["(p1^2 + q1^2)/2"],
        oracle: "flow: rotation by t in (q, p)",
    },
    SystemEntry {
        name: "pendulum",
        n: 1,
        hamiltonians: &["p1^2/2 + cos(q1)", "p1"],
        oracle: "no closed form; symplecticity and refinement benchmark",
    },
];

pub const SECTIONS: &[SectionEntry] = &[
    SectionEntry {
        name: "zero",
        n: 1,
        source: "0",
        oracle: "S~ = 0 on translation",
    },
    SectionEntry {
        name: "linear",
        n: 1,
        source: "q1",
        oracle: "S~ = x - t/2 - B on free_noisy",
    },
    SectionEntry {
        name: "quadratic",
        n: 1,
        source: "q1^2/2",
        oracle: "S~ = x^2/(2(1+t)) on free_particle",
    },
    SectionEntry {
        name: "mild_quadratic",
        n: 1,
        source: "0.1*q1^2",
        oracle: "refinement-study section for pendulum",
    },
];

pub const GENERATING: &[GeneratingEntry] = &[
    GeneratingEntry {
        name: "exchange",
        n: 1,
        source: "a1*b1",
        oracle: "psi: (q, p) -> (p, -q); reduces p-only systems",
    },
    GeneratingEntry {
        name: "free_flow",
        n: 1,
        source: "(a1 - b1)^2/(2*t)",
        oracle: "psi_t: (q, p) -> (q - t p, p); absorbs h0 = p1^2/2",
    },
];

/// Builds the named system, or compiles `sources` directly when no catalog
/// name matches and the caller passed expression strings instead.
pub fn build_system(name: &str) -> Result<HamiltonianSystem> {
    let entry = SYSTEMS
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| unknown("system", name, SYSTEMS.iter().map(|e| e.name)))?;
    system_from_sources(entry.n, entry.hamiltonians)
}

/// Compiles `h_0..h_r` sources into a system.
pub fn system_from_sources<S: AsRef<str>>(n: usize, sources: &[S]) -> Result<HamiltonianSystem> {
    let fields = sources
        .iter()
        .map(|s| compile_str(s.as_ref(), n, VarSpace::Phase))
        .collect::<Result<Vec<_>>>()?;
    HamiltonianSystem::new(fields)
}

pub fn build_section(name: &str) -> Result<LagrangianSection> {
    let entry = SECTIONS
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| unknown("section", name, SECTIONS.iter().map(|e| e.name)))?;
    LagrangianSection::new(compile_str(entry.source, entry.n, VarSpace::Phase)?)
}

pub fn build_generating(name: &str) -> Result<GeneratingFunction> {
    let entry = GENERATING
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| unknown("generating function", name, GENERATING.iter().map(|e| e.name)))?;
    GeneratingFunction::new(compile_str(entry.source, entry.n, VarSpace::Generating)?)
}

fn unknown<'a>(what: &str, name: &str, known: impl Iterator<Item = &'a str>) -> Error {
    Error::Config {
        message: format!(
            "unknown {what} {name:?}; catalog has: {}",
            known.collect::<Vec<_>>().join(", ")
        ),
    }
}

/// Human-readable catalog listing in declaration order.
pub fn list_catalog() -> String {
    let mut out = String::new();
    out.push_str("systems:\n");
    for e in SYSTEMS {
        let mut hs = Vec::new();
        for (j, h) in e.hamiltonians.iter().enumerate() {
            hs.push(format!("h{j} = {h}"));
        }
        out.push_str(&format!("  {}: {}  [{}]\n", e.name, hs.join(", "), e.oracle));
    }
    out.push_str("sections:\n");
    for e in SECTIONS {
        out.push_str(&format!("  {}: f = {}  [{}]\n", e.name, e.source, e.oracle));
    }
    out.push_str("generating functions:\n");
    for e in GENERATING {
        out.push_str(&format!("  {}: S = {}  [{}]\n", e.name, e.source, e.oracle));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PhaseState;
    use crate::integrator::{integrate_flow, SchemeConfig};
    use crate::noise::{NoisePath, TimeGrid};
    use crate::transform::{apply_psi, TransformConfig};

    #[test]
    fn test_every_entry_compiles() {
        for e in SYSTEMS {
            let sys = build_system(e.name).unwrap();
            assert_eq!(sys.n(), e.n);
            assert_eq!(sys.r() + 1, e.hamiltonians.len());
        }
        for e in SECTIONS {
            assert_eq!(build_section(e.name).unwrap().n(), e.n);
        }
        for e in GENERATING {
            assert_eq!(build_generating(e.name).unwrap().n(), e.n);
        }
    }

    #[test]
    fn test_unknown_names_are_rejected_with_listing() {
        let err = build_system("nonesuch").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("free_particle"), "{text}");
        assert!(build_section("nonesuch").is_err());
        assert!(build_generating("nonesuch").is_err());
    }

    #[test]
    fn test_listing_contains_documented_lines() {
        let listing = list_catalog();
        assert!(listing.contains("free_particle: h0 = p1^2/2"), "{listing}");
        assert!(listing.contains("exchange: S = a1*b1"), "{listing}");
        assert!(listing.contains("flow: q+pt+B, p const"), "{listing}");
        // Declaration order is stable.
        let sys_pos = listing.find("systems:").unwrap();
        let sec_pos = listing.find("sections:").unwrap();
        let gen_pos = listing.find("generating functions:").unwrap();
        assert!(sys_pos < sec_pos && sec_pos < gen_pos);
    }

    #[test]
    fn test_free_noisy_annotation_matches_the_flow() {
        let sys = build_system("free_noisy").unwrap();
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let path = NoisePath::sample(grid, 1, 99, 0);
        let z0 = PhaseState::new(vec![0.3], vec![-0.6]).unwrap();
        let traj = integrate_flow(&sys, &z0, &path, &SchemeConfig::default(), false).unwrap();
        let b = path.node_values(1);
        for k in 0..=grid.steps() {
            let z = traj.state_flat(k);
            let q_exact = 0.3 - 0.6 * grid.node(k) + b[k];
            assert!((z[0] - q_exact).abs() < 1e-12, "node {k}");
            assert_eq!(z[1], -0.6, "p const, node {k}");
        }
    }

    #[test]
    fn test_exchange_annotation_matches_psi() {
        let s = build_generating("exchange").unwrap();
        let z = PhaseState::new(vec![0.4], vec![1.1]).unwrap();
        let image = apply_psi(&s, 0.7, &z, &TransformConfig::default()).unwrap();
        assert_eq!(image.q, vec![1.1]);
        assert_eq!(image.p, vec![-0.4]);
    }
}
