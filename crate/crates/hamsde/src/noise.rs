//! Driving paths: deterministic time plus Brownian channels.
//!
//! A [`NoisePath`] stores per-step increments of the driver
//! `X = (t, B^1, .., B^r)`: channel 0 always carries `dt` and channels
//! `1..=r` carry Brownian increments. Sampling is counter-based: every
//! increment is a pure function of `(seed, path_index, channel, level, step)`
//! through a splitmix64-style keyed hash and an inverse normal CDF, so a path
//! is bitwise reproducible from its key regardless of thread count or
//! sampling order, and distinct paths never share state.
//!
//! [`NoisePath::refine`] performs Brownian-bridge midpoint insertion: each
//! step splits into two half-steps whose increments sum back to the parent
//! increment bitwise whenever a representable pair exists (the typical case;
//! otherwise to within two ulps), with the midpoint offset drawn at the
//! child's refinement level (so refining twice keeps drawing fresh,
//! reproducible randomness). This gives nested ladders of paths for
//! strong-convergence studies.

use std::io::Write;

use crate::error::{Error, Result};

/// Uniform partition of `[0, t_end]` into `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<TimeGrid> {
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(Error::dim(format!("t_end must be positive, got {t_end}")));
        }
        if steps == 0 {
            return Err(Error::dim("grid needs at least one step"));
        }
        Ok(TimeGrid { t_end, steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    /// Node time `t_k = k * dt` for `k` in `0..=steps`.
    pub fn node(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    /// Index of the grid node closest to `t`.
    pub fn nearest_node(&self, t: f64) -> usize {
        let k = (t / self.dt()).round();
        (k.max(0.0) as usize).min(self.steps)
    }

    /// Doubles the step count over the same horizon.
    pub fn refined(&self) -> TimeGrid {
        TimeGrid {
            t_end: self.t_end,
            steps: self.steps * 2,
        }
    }
}

// splitmix64 finalizer: full-avalanche mixing of one word.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Keyed counter hash: one 64-bit word per (seed, path, channel, level, step).
#[inline]
fn keyed_u64(seed: u64, path: u64, channel: u64, level: u64, step: u64) -> u64 {
    let mut s = mix64(seed ^ 0x6a09_e667_f3bc_c909);
    s = mix64(s ^ path.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x3c6e_f372_fe94_f82b));
    s = mix64(
        s ^ channel
            .wrapping_mul(0xbb67_ae85_84ca_a73b)
            .wrapping_add(level.wrapping_mul(0xa54f_f53a_5f1d_36f1)),
    );
    s = mix64(s ^ step.wrapping_mul(0x510e_527f_ade6_82d1));
    mix64(s)
}

/// Maps a word to the open unit interval, centered in each dyadic bin.
#[inline]
fn to_uniform(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0) // 2^-53
}

/// Inverse standard normal CDF (Wichura's AS241, double precision).
/// Rational approximations on three regions; accurate to ~1e-15 relative.
// The published coefficients carry more digits than f64 resolves; keep
// them verbatim so the transcription can be checked against the source.
#[allow(clippy::excessive_precision)]
pub(crate) fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_812_8e4) * r
            + 6.726_577_092_700_87e4)
            * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946_1e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((5.226_495_278_852_545_5e3 * r + 2.872_908_573_572_194_3e4) * r
            + 3.930_789_580_009_271e4)
            * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let r = (-tail.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r
            + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
            + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_758_8)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_9e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_8e-15 * r + 1.421_511_758_316_446e-7) * r
            + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

/// Standard normal draw for a counter tuple.
#[inline]
fn normal_draw(seed: u64, path: u64, channel: u64, level: u64, step: u64) -> f64 {
    inverse_normal_cdf(to_uniform(keyed_u64(seed, path, channel, level, step)))
}

/// Splits `parent` into two halves `parent/2 + xi` and `parent/2 - xi`.
///
/// Both halves are snapped to the parent's floating-point lattice (integer
/// multiples of `ulp(parent)`), which perturbs each half by at most half an
/// ulp of the parent but makes the floating-point sum of the pair reproduce
/// `parent` bitwise. When a half exceeds the lattice range (the offset `xi`
/// is much larger than `parent` itself, so no representable pair can sum to
/// `parent` exactly), the split falls back to ordinary rounding and the pair
/// sum is correct to within two ulps instead. Either way the conditional
/// bridge law is preserved to machine precision.
fn split_increment(parent: f64, xi: f64) -> (f64, f64) {
    if parent == 0.0 {
        return (xi, -xi);
    }
    let exponent = ((parent.to_bits() >> 52) & 0x7ff) as i32;
    let d1 = 0.5 * parent + xi;
    if exponent == 0 || exponent == 0x7ff {
        // Subnormal or non-finite parent: no lattice to snap to.
        return (d1, parent - d1);
    }
    let q = 2f64.powi(exponent - 1023 - 52); // ulp quantum of parent's binade
    let p_ticks = parent / q; // exact: parent is a multiple of q
    let a_ticks = (d1 / q).round();
    let b_ticks = p_ticks - a_ticks;
    let max_ticks = 9007199254740990.0; // 2^53 - 2: both halves stay exact
    if a_ticks.abs() > max_ticks || b_ticks.abs() > max_ticks {
        return (d1, parent - d1);
    }
    (a_ticks * q, b_ticks * q)
}

/// Per-step increments of the driving process `X = (t, B^1..B^r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    grid: TimeGrid,
    channels: usize,
    seed: u64,
    path_index: u64,
    level: u32,
    /// Step-major layout: `increments[k * (r + 1) + j]` is `dX^j` over step k.
    increments: Vec<f64>,
}

impl NoisePath {
    /// Samples the path determined by `(seed, path_index)` on `grid` with `r`
    /// Brownian channels (`r` may be 0 for deterministic dynamics).
    pub fn sample(grid: TimeGrid, r: usize, seed: u64, path_index: u64) -> NoisePath {
        let k_steps = grid.steps();
        let dt = grid.dt();
        let sqrt_dt = dt.sqrt();
        let width = r + 1;
        let mut increments = vec![0.0; k_steps * width];
        for k in 0..k_steps {
            increments[k * width] = dt;
            for j in 1..=r {
                increments[k * width + j] =
                    sqrt_dt * normal_draw(seed, path_index, j as u64, 0, k as u64);
            }
        }
        NoisePath {
            grid,
            channels: r,
            seed,
            path_index,
            level: 0,
            increments,
        }
    }

    /// Builds a path from explicit increments (step-major, `steps * (r + 1)`
    /// entries, channel 0 carrying the time increments). Intended for tests
    /// and oracle computations that need prescribed drivers.
    pub fn from_increments(
        grid: TimeGrid,
        r: usize,
        increments: Vec<f64>,
    ) -> Result<NoisePath> {
        if increments.len() != grid.steps() * (r + 1) {
            return Err(Error::dim(format!(
                "expected {} increments, got {}",
                grid.steps() * (r + 1),
                increments.len()
            )));
        }
        Ok(NoisePath {
            grid,
            channels: r,
            seed: 0,
            path_index: 0,
            level: 0,
            increments,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Number of Brownian channels `r`.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    /// Refinement depth (0 for a freshly sampled path).
    pub fn level(&self) -> u32 {
        self.level
    }

    /// Increment `dX^j` over step `k`.
    pub fn increment(&self, k: usize, j: usize) -> f64 {
        self.increments[k * (self.channels + 1) + j]
    }

    /// All channel increments over step `k` as a slice `[dt, dB^1, ..]`.
    pub fn step_increments(&self, k: usize) -> &[f64] {
        let w = self.channels + 1;
        &self.increments[k * w..(k + 1) * w]
    }

    /// Cumulative channel values at the nodes: `X^j(t_0..t_K)`, starting at 0.
    pub fn node_values(&self, j: usize) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.grid.steps() + 1);
        out.push(0.0);
        for k in 0..self.grid.steps() {
            acc += self.increment(k, j);
            out.push(acc);
        }
        out
    }

    /// Brownian-bridge refinement: doubles the step count. Each parent
    /// increment is conserved across its two children, bitwise whenever the
    /// halves are representable on the parent's floating-point lattice and
    /// to within two ulps otherwise (see [`split_increment`] internals).
    pub fn refine(&self) -> NoisePath {
        let parent_steps = self.grid.steps();
        let child_grid = self.grid.refined();
        let child_dt = child_grid.dt();
        let half_sigma = 0.5 * self.grid.dt().sqrt();
        let w = self.channels + 1;
        let child_level = self.level + 1;
        let mut increments = vec![0.0; 2 * parent_steps * w];
        for k in 0..parent_steps {
            increments[(2 * k) * w] = child_dt;
            increments[(2 * k + 1) * w] = child_dt;
            for j in 1..=self.channels {
                let parent = self.increment(k, j);
                let xi = half_sigma
                    * normal_draw(
                        self.seed,
                        self.path_index,
                        j as u64,
                        child_level as u64,
                        k as u64,
                    );
                let (d1, d2) = split_increment(parent, xi);
                increments[(2 * k) * w + j] = d1;
                increments[(2 * k + 1) * w + j] = d2;
            }
        }
        NoisePath {
            grid: child_grid,
            channels: self.channels,
            seed: self.seed,
            path_index: self.path_index,
            level: child_level,
            increments,
        }
    }

    /// Midpoint-quadrature pairing: `sum_{j,k} values[k][j] * dX^j_k` where
    /// `values` uses the same step-major `(r + 1)`-wide layout as the path.
    pub fn stratonovich_sum(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.increments.len() {
            return Err(Error::dim(format!(
                "expected {} integrand values, got {}",
                self.increments.len(),
                values.len()
            )));
        }
        Ok(values
            .iter()
            .zip(&self.increments)
            .map(|(v, dx)| v * dx)
            .sum())
    }

    /// Writes `k, t_k, dX^0.., dX^r` rows.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "k,t_k")?;
        for j in 0..=self.channels {
            write!(w, ",dX{j}")?;
        }
        writeln!(w)?;
        for k in 0..self.grid.steps() {
            write!(w, "{k},{}", self.grid.node(k))?;
            for j in 0..=self.channels {
                write!(w, ",{}", self.increment(k, j))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_inverse_normal_cdf_known_quantiles() {
        let cases = [
            (0.5, 0.0),
            (0.975, 1.959963984540054),
            (0.995, 2.5758293035489004),
            (0.999, 3.090232306167813),
            (0.8413447460685429, 1.0),
        ];
        for (p, x) in cases {
            let got = inverse_normal_cdf(p);
            assert!(
                (got - x).abs() < 1e-9,
                "quantile({p}) = {got}, expected {x}"
            );
            let neg = inverse_normal_cdf(1.0 - p);
            assert!((neg + x).abs() < 1e-9, "symmetry at {p}");
        }
        // Far tail stays finite, monotone, and symmetric.
        let deep = inverse_normal_cdf(1e-12);
        assert!(deep < -6.9 && deep > -7.1, "tail quantile {deep}");
        assert!(inverse_normal_cdf(1e-300).is_finite());
    }

    #[test]
    fn test_determinism_and_distinct_paths() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let a = NoisePath::sample(grid, 2, 42, 7);
        let b = NoisePath::sample(grid, 2, 42, 7);
        assert_eq!(a, b, "same key must give bitwise identical paths");
        let c = NoisePath::sample(grid, 2, 42, 8);
        assert_ne!(a, c);
        let d = NoisePath::sample(grid, 43, 7, 7);
        assert_ne!(a.increments, d.increments);
    }

    #[test]
    fn test_sampling_order_independent_under_rayon() {
        use rayon::prelude::*;
        let grid = TimeGrid::new(0.5, 32).unwrap();
        let sequential: Vec<NoisePath> =
            (0..16).map(|i| NoisePath::sample(grid, 1, 9, i)).collect();
        let parallel: Vec<NoisePath> = (0..16u64)
            .into_par_iter()
            .map(|i| NoisePath::sample(grid, 1, 9, i))
            .collect();
        assert_eq!(sequential, parallel);
    }

    #[test]
    fn test_endpoint_variance_matches_t_end() {
        let t_end = 0.8;
        let grid = TimeGrid::new(t_end, 16).unwrap();
        let m = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..m {
            let path = NoisePath::sample(grid, 1, 2024, i);
            let b_end: f64 = (0..16).map(|k| path.increment(k, 1)).sum();
            sum += b_end;
            sumsq += b_end * b_end;
        }
        let mean = sum / m as f64;
        let var = sumsq / m as f64 - mean * mean;
        // Var of the sample variance of N(0, t) over m draws is 2 t^2 / m.
        let sigma = (2.0 / m as f64).sqrt() * t_end;
        assert!(
            (var - t_end).abs() < 4.0 * sigma,
            "endpoint variance {var} vs {t_end} (4 sigma = {})",
            4.0 * sigma
        );
        assert!(mean.abs() < 4.0 * (t_end / m as f64).sqrt());
    }

    #[test]
    fn test_refine_telescopes_to_coarse_increments() {
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let coarse = NoisePath::sample(grid, 2, 5, 3);
        let fine = coarse.refine();
        let finer = fine.refine(); // two levels: 4 children per coarse step
        assert_eq!(finer.grid().steps(), 128);
        let mut exact_pairs = 0usize;
        let mut total_pairs = 0usize;
        for j in 0..=2 {
            for k in 0..32 {
                let d1 = fine.increment(2 * k, j);
                let d2 = fine.increment(2 * k + 1, j);
                let s = d1 + d2;
                let parent = coarse.increment(k, j);
                // Error scale is set by the children, which can exceed a
                // small parent when the bridge offset dominates.
                let scale = d1.abs().max(d2.abs()).max(parent.abs()).max(1e-300);
                assert!(
                    (s - parent).abs() <= 4.0 * f64::EPSILON * scale,
                    "channel {j} pair {k}: {s} vs {parent}"
                );
                total_pairs += 1;
                if s == parent {
                    exact_pairs += 1;
                }
            }
            for k in 0..32 {
                // Pairwise summation over two levels stays at machine precision.
                let c: Vec<f64> = (0..4).map(|i| finer.increment(4 * k + i, j)).collect();
                let total = (c[0] + c[1]) + (c[2] + c[3]);
                let parent = coarse.increment(k, j);
                let scale = c
                    .iter()
                    .fold(parent.abs(), |a, x| a.max(x.abs()))
                    .max(1e-300);
                assert!(
                    (total - parent).abs() <= 8.0 * f64::EPSILON * scale,
                    "channel {j} step {k}: {total} vs {parent}"
                );
            }
        }
        // The lattice-snapped split makes most pair sums bitwise exact; only
        // offsets far outside the parent's binade fall back to rounding.
        assert!(
            exact_pairs * 10 >= total_pairs * 7,
            "only {exact_pairs}/{total_pairs} pairs reproduced their parent bitwise"
        );
    }

    #[test]
    fn test_refined_midpoints_distribution() {
        // Conditioned on the parent increment, the first child is
        // N(parent/2, dt/4). Standardize and check mean/variance over many
        // parent steps and paths.
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let dt = grid.dt();
        let mut zs = Vec::new();
        for i in 0..1250 {
            let parent = NoisePath::sample(grid, 1, 77, i);
            let child = parent.refine();
            for k in 0..8 {
                let d1 = child.increment(2 * k, 1);
                let centered = d1 - 0.5 * parent.increment(k, 1);
                zs.push(centered / (0.5 * dt.sqrt()));
            }
        }
        let m = zs.len() as f64;
        let mean: f64 = zs.iter().sum::<f64>() / m;
        let var: f64 = zs.iter().map(|z| z * z).sum::<f64>() / m - mean * mean;
        assert!(mean.abs() < 4.0 / m.sqrt(), "standardized mean {mean}");
        assert!(
            (var - 1.0).abs() < 4.0 * (2.0 / m).sqrt(),
            "standardized variance {var}"
        );
    }

    #[test]
    fn test_stratonovich_midpoint_quadrature_of_b_db() {
        // sum (B_k + B_{k+1})/2 * dB_k telescopes to B_end^2 / 2 exactly.
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let path = NoisePath::sample(grid, 1, 11, 0);
        let b = path.node_values(1);
        let mut values = vec![0.0; 256 * 2];
        for k in 0..256 {
            values[k * 2 + 1] = 0.5 * (b[k] + b[k + 1]);
        }
        let integral = path.stratonovich_sum(&values).unwrap();
        let expected = 0.5 * b[256] * b[256];
        assert!(
            (integral - expected).abs() < 1e-12,
            "{integral} vs {expected}"
        );
    }

    #[test]
    fn test_time_channel_is_dt_and_csv_layout() {
        let grid = TimeGrid::new(0.5, 4).unwrap();
        let path = NoisePath::sample(grid, 1, 1, 0);
        for k in 0..4 {
            assert_eq!(path.increment(k, 0), grid.dt());
        }
        let csv = path.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "k,t_k,dX0,dX1");
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,0,"), "{first}");
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn test_nearest_node_snapping() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        assert_eq!(grid.nearest_node(0.0), 0);
        assert_eq!(grid.nearest_node(0.305), 3);
        assert_eq!(grid.nearest_node(1.0), 10);
        assert_eq!(grid.nearest_node(2.0), 10);
    }

    #[test]
    fn test_from_increments_validates_length() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        assert!(NoisePath::from_increments(grid, 1, vec![0.0; 8]).is_ok());
        assert!(NoisePath::from_increments(grid, 1, vec![0.0; 7]).is_err());
    }
}
