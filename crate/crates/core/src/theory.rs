//! Division-count bounds, their brute-force oracle, Monte Carlo checks of the
//! closed-set error bound, and the Jensen–Shannon divergence between count
//! histograms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdcError};
use crate::grid::CountGrid;

/// Tolerance on `Σ parts = total` and on histogram normalisation.
pub const SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivisionBounds {
    pub n_min: usize,
    pub n_max: usize,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(SdcError::InvalidValue(format!("{name} must be positive and finite, got {v}")))
    }
}

/// Smallest `N ≥ 0` with `c_max · 4^N ≥ c_star`, i.e. `max(0, ⌈log₄(c_star / c_max)⌉)`.
pub fn min_divisions(c_star: f64, c_max: f64) -> Result<usize> {
    check_positive("c_star", c_star)?;
    check_positive("c_max", c_max)?;
    // multiplying by 4 is exact, so the loop has no rounding at the boundary
    let mut n = 0;
    let mut reach = c_max;
    while reach < c_star {
        reach *= 4.0;
        n += 1;
    }
    Ok(n)
}

/// `⌊max(log₂(h/r), log₂(w/r))⌋ + 1`, clamped at 0: the smallest `N` that
/// brings both sides of a sub-region strictly below `r`.
pub fn max_divisions(h: f64, w: f64, r: f64) -> Result<usize> {
    check_positive("h", h)?;
    check_positive("w", w)?;
    check_positive("r", r)?;
    let side = h.max(w);
    let mut n = 0;
    let mut scaled = r;
    while side >= scaled {
        scaled *= 2.0;
        n += 1;
    }
    Ok(n)
}

/// Side of the smallest square window (any position, in cells) whose count
/// reaches `c_max`; `None` when even the whole grid stays below it.
pub fn min_region_side(fine: &CountGrid, c_max: f64) -> Option<usize> {
    let (h, w) = fine.dims();
    // summed-area table with a zero border
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        for c in 0..w {
            sat[(r + 1) * (w + 1) + c + 1] =
                fine.get(r, c) + sat[r * (w + 1) + c + 1] + sat[(r + 1) * (w + 1) + c] - sat[r * (w + 1) + c];
        }
    }
    let window = |r: usize, c: usize, s: usize| {
        sat[(r + s) * (w + 1) + c + s] - sat[r * (w + 1) + c + s] - sat[(r + s) * (w + 1) + c] + sat[r * (w + 1) + c]
    };
    (1..=h.min(w)).find(|&s| {
        (0..=h - s).any(|r| (0..=w - s).any(|c| window(r, c, s) >= c_max))
    })
}

/// Smallest `N` such that every block of the `2^N × 2^N` partition of `fine`
/// holds at most `c_max`, found by aggregating at every level.
pub fn brute_force_min_divisions(fine: &CountGrid, c_max: f64) -> Result<usize> {
    check_positive("c_max", c_max)?;
    let (h, w) = fine.dims();
    if h != w || !h.is_power_of_two() {
        return Err(SdcError::Precondition(format!(
            "fine grid must be square with a power-of-two side, got {h}x{w}"
        )));
    }
    let depth = h.trailing_zeros() as usize;
    for n in 0..=depth {
        let blocks = fine.block_sum_pow2(depth - n)?;
        if blocks.values().iter().all(|&v| v <= c_max) {
            return Ok(n);
        }
    }
    Err(SdcError::Precondition(format!(
        "a single finest cell exceeds c_max = {c_max}; no division depth suffices"
    )))
}

/// One row of the division-bound sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub id: usize,
    pub total: f64,
    pub c_max: f64,
    pub r: usize,
    pub n_min: usize,
    pub oracle: usize,
    pub n_max: usize,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.n_min <= self.oracle && self.oracle <= self.n_max
    }
}

/// Checks `min_divisions ≤ oracle ≤ max_divisions` on one fine grid whose
/// total exceeds `c_max` and whose cells each stay within it.
pub fn check_bounds(id: usize, fine: &CountGrid, c_max: f64) -> Result<BoundCheck> {
    let total = fine.sum();
    let r = min_region_side(fine, c_max)
        .ok_or_else(|| SdcError::Precondition(format!("total {total} never reaches c_max {c_max}")))?;
    let (h, w) = fine.dims();
    Ok(BoundCheck {
        id,
        total,
        c_max,
        r,
        n_min: min_divisions(total, c_max)?,
        oracle: brute_force_min_divisions(fine, c_max)?,
        n_max: max_divisions(h as f64, w as f64, r as f64)?,
    })
}

/// Random square fine grid with every cell in `[0, c_max]` and a total
/// above `c_max`. About a third of the cells are empty.
pub fn random_fine_grid(rng: &mut impl Rng, side: usize, c_max: f64) -> CountGrid {
    loop {
        let data: Vec<f64> = (0..side * side)
            .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..=c_max) })
            .collect();
        let grid = CountGrid::new(side, side, data).expect("finite nonnegative cells");
        if grid.sum() > c_max {
            return grid;
        }
    }
}

/// Bound checks over `count` random `side × side` grids, each drawn from its
/// own sub-stream of `seed` with `c_max` uniform over the integers 2..=22.
pub fn bound_sweep(count: usize, side: usize, seed: u64) -> Result<Vec<BoundCheck>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let c_max = rng.random_range(2..=22) as f64;
            let fine = random_fine_grid(&mut rng, side, c_max);
            check_bounds(i, &fine, c_max)
        })
        .collect()
}

/// A spatial division of a count `total` into parts that each lie in the
/// closed set `[0, c_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInstance {
    total: f64,
    parts: Vec<f64>,
    c_max: f64,
}

impl SplitInstance {
    pub fn new(total: f64, parts: Vec<f64>, c_max: f64) -> Result<Self> {
        check_positive("c_max", c_max)?;
        if parts.is_empty() {
            return Err(SdcError::InvalidValue("a split needs at least one part".into()));
        }
        if let Some(p) = parts.iter().find(|p| !(p.is_finite() && **p >= 0.0 && **p <= c_max)) {
            return Err(SdcError::InvalidValue(format!("part {p} outside the closed set [0, {c_max}]")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - total).abs() > SUM_TOL {
            return Err(SdcError::InvalidValue(format!("parts sum to {sum}, expected {total}")));
        }
        Ok(Self { total, parts, c_max })
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn parts(&self) -> &[f64] {
        &self.parts
    }

    pub fn c_max(&self) -> f64 {
        self.c_max
    }
}

/// Non-decreasing, piecewise-linear map from a count to the expected
/// absolute relative error of a counter at that count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorProfile {
    knots: Vec<(f64, f64)>,
}

impl ErrorProfile {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(SdcError::InvalidValue("error profile needs at least one knot".into()));
        }
        if knots.iter().any(|&(x, f)| !x.is_finite() || !f.is_finite() || f < 0.0) {
            return Err(SdcError::InvalidValue("error profile knots must be finite with f >= 0".into()));
        }
        if knots.windows(2).any(|p| p[1].0 <= p[0].0 || p[1].1 < p[0].1) {
            return Err(SdcError::InvalidValue(
                "error profile must have increasing x and non-decreasing f".into(),
            ));
        }
        Ok(Self { knots })
    }

    /// `f(x) = slope · x` on `[0, x_max]`.
    pub fn linear(slope: f64, x_max: f64) -> Result<Self> {
        check_positive("x_max", x_max)?;
        Self::new(vec![(0.0, 0.0), (x_max, slope * x_max)])
    }

    pub fn constant(value: f64, x_max: f64) -> Result<Self> {
        check_positive("x_max", x_max)?;
        Self::new(vec![(0.0, value), (x_max, value)])
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        let (lo, hi) = (self.knots[0].0, self.knots[self.knots.len() - 1].0);
        if !(lo..=hi).contains(&x) {
            return Err(SdcError::InvalidValue(format!("{x} outside profile domain [{lo}, {hi}]")));
        }
        let i = self.knots.partition_point(|k| k.0 < x);
        if i == 0 {
            return Ok(self.knots[0].1);
        }
        let ((x0, f0), (x1, f1)) = (self.knots[i - 1], self.knots[i]);
        Ok(f0 + (f1 - f0) * (x - x0) / (x1 - x0))
    }

    /// `max f(x)` over `x ≤ c` within the domain.
    pub fn max_up_to(&self, c: f64) -> Result<f64> {
        let at_c = self.eval(c)?;
        Ok(self.knots.iter().filter(|k| k.0 <= c).map(|k| k.1).fold(at_c, f64::max))
    }
}

/// Settings for the error-bound simulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub trials: usize,
    pub seed: u64,
    /// Multiplier on every closed-set noise scale. 1.0 is the faithful
    /// simulation; larger values produce a deliberately broken counter for
    /// exercising the violation path.
    pub closed_noise_scale: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            trials: 100_000,
            seed: 0,
            closed_noise_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub trials: usize,
    /// Mean of `c_star · |e|`.
    pub emp_open: f64,
    /// Mean of `|Σ c_i · e_i|`.
    pub emp_closed: f64,
    /// `c_star · max_{x ≤ c_max} f(x)`.
    pub bound: f64,
    /// Standard errors of the two empirical means.
    pub se_open: f64,
    pub se_closed: f64,
}

impl McReport {
    /// Larger of the two relative standard errors.
    pub fn rel_sigma(&self) -> f64 {
        (self.se_open / self.emp_open).max(self.se_closed / self.emp_closed)
    }

    /// `emp_closed ≤ bound·(1+3σ) < emp_open·(1+3σ)` together with
    /// `emp_closed < emp_open`.
    pub fn holds(&self) -> bool {
        let slack = 1.0 + 3.0 * self.rel_sigma();
        self.emp_closed <= self.bound * slack
            && self.bound * slack < self.emp_open * slack
            && self.emp_closed < self.emp_open
    }
}

/// Zero-mean normal whose absolute value has mean `mean_abs`.
fn sign_symmetric(mean_abs: f64) -> Normal<f64> {
    let sd = mean_abs * (std::f64::consts::PI / 2.0).sqrt();
    Normal::new(0.0, sd).expect("finite nonnegative scale")
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Simulates the open-set error `c_star·|e|` with `E|e| = f(c_star)` against
/// the closed-set error `|Σ c_i e_i|` with independent `E|e_i| = f(c_i)`.
pub fn mc_verify_prop2(profile: &ErrorProfile, split: &SplitInstance, config: &McConfig) -> Result<McReport> {
    let (c_star, c_max) = (split.total(), split.c_max());
    if c_star <= c_max {
        return Err(SdcError::Precondition(format!("c_star {c_star} must exceed c_max {c_max}")));
    }
    if config.trials < 2 {
        return Err(SdcError::InvalidValue("need at least two trials".into()));
    }
    let f_open = profile.eval(c_star)?;
    let f_closed_max = profile.max_up_to(c_max)?;
    if f_open <= f_closed_max {
        return Err(SdcError::Precondition(format!(
            "profile must satisfy f(c_star) = {f_open} > max f on the closed set = {f_closed_max}"
        )));
    }
    let open = sign_symmetric(f_open);
    let closed: Vec<(f64, Normal<f64>)> = split
        .parts()
        .iter()
        .map(|&c| Ok((c, sign_symmetric(profile.eval(c)? * config.closed_noise_scale))))
        .collect::<Result<_>>()?;

    let samples: Vec<(f64, f64)> = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(t as u64);
            let e_open = c_star * open.sample(&mut rng).abs();
            let e_closed = closed.iter().map(|(c, d)| c * d.sample(&mut rng)).sum::<f64>().abs();
            (e_open, e_closed)
        })
        .collect();
    let (opens, closeds): (Vec<f64>, Vec<f64>) = samples.into_iter().unzip();
    let (emp_open, se_open) = mean_and_se(&opens);
    let (emp_closed, se_closed) = mean_and_se(&closeds);
    Ok(McReport {
        trials: config.trials,
        emp_open,
        emp_closed,
        bound: f_closed_max * c_star,
        se_open,
        se_closed,
    })
}

/// Normalised histogram over fixed bin edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    edges: Vec<f64>,
    mass: Vec<f64>,
}

impl Histogram {
    pub fn new(edges: Vec<f64>, mass: Vec<f64>) -> Result<Self> {
        if edges.len() != mass.len() + 1 || mass.is_empty() {
            return Err(SdcError::InvalidValue(format!(
                "{} edges cannot bound {} bins",
                edges.len(),
                mass.len()
            )));
        }
        if edges.windows(2).any(|e| !(e[1] > e[0])) {
            return Err(SdcError::InvalidValue("bin edges must be strictly increasing".into()));
        }
        if mass.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(SdcError::InvalidValue("histogram mass must be finite and >= 0".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(SdcError::InvalidValue(format!("histogram sums to {total}, expected 1")));
        }
        Ok(Self { edges, mass })
    }

    /// Bins samples into `[e_k, e_{k+1})`, the last bin closed on the right;
    /// samples outside the edges are dropped.
    pub fn from_samples(samples: &[f64], edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(SdcError::InvalidValue("need at least two bin edges".into()));
        }
        let bins = edges.len() - 1;
        let mut counts = vec![0usize; bins];
        for &s in samples {
            let last = edges[bins];
            if s < edges[0] || s > last || s.is_nan() {
                continue;
            }
            let k = if s == last { bins - 1 } else { edges.partition_point(|&e| e <= s) - 1 };
            counts[k] += 1;
        }
        let kept: usize = counts.iter().sum();
        if kept == 0 {
            return Err(SdcError::InvalidValue("no samples fall inside the bin edges".into()));
        }
        let mass = counts.iter().map(|&c| c as f64 / kept as f64).collect();
        Self::new(edges, mass)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }
}

fn kl_term(p: f64, m: f64) -> f64 {
    if p == 0.0 { 0.0 } else { p * (p / m).ln() }
}

/// `½KL(p‖m) + ½KL(q‖m)` with `m = (p+q)/2`, natural log.
pub fn js_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.edges != q.edges {
        return Err(SdcError::InvalidValue("histograms use different bin edges".into()));
    }
    let js = p
        .mass
        .iter()
        .zip(&q.mass)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * kl_term(a, m) + 0.5 * kl_term(b, m)
        })
        .sum::<f64>();
    // rounding can leave a hair outside [0, ln 2]
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn min_divisions_examples() {
        assert_eq!(min_divisions(136.5, 22.0).unwrap(), 2);
        assert_eq!(min_divisions(10.0, 20.0).unwrap(), 0);
        assert_eq!(min_divisions(65.0, 1.0).unwrap(), 4);
        assert_eq!(min_divisions(64.0, 1.0).unwrap(), 3);
        assert!(min_divisions(0.0, 1.0).is_err());
        assert!(min_divisions(5.0, -1.0).is_err());
    }

    #[test]
    fn max_divisions_examples() {
        assert_eq!(max_divisions(256.0, 256.0, 64.0).unwrap(), 3);
        assert_eq!(max_divisions(64.0, 64.0, 64.0).unwrap(), 1);
        assert_eq!(max_divisions(1920.0, 1080.0, 64.0).unwrap(), 5);
        assert_eq!(max_divisions(32.0, 16.0, 64.0).unwrap(), 0);
        assert!(max_divisions(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn brute_force_examples() {
        let calm = CountGrid::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(brute_force_min_divisions(&calm, 22.0).unwrap(), 0);
        let split = CountGrid::from_rows(&[[12.0, 12.0], [3.0, 3.0]]).unwrap();
        assert_eq!(brute_force_min_divisions(&split, 22.0).unwrap(), 1);
        let hopeless = CountGrid::from_rows(&[[30.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(brute_force_min_divisions(&hopeless, 22.0), Err(SdcError::Precondition(_))));
        let wide = CountGrid::zeros(2, 4);
        assert!(brute_force_min_divisions(&wide, 1.0).is_err());
    }

    #[test]
    fn region_side_uses_sliding_windows() {
        // the 2x2 window straddling the aligned blocks is the first to reach 4
        let g = CountGrid::from_rows(&[
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 1.0, 0.0],
            [0.0, 1.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(min_region_side(&g, 4.0), Some(2));
        assert_eq!(min_region_side(&g, 1.0), Some(1));
        assert_eq!(min_region_side(&g, 4.5), None);
    }

    #[test]
    fn sweep_bounds_hold() {
        for row in bound_sweep(200, 8, 11).unwrap() {
            assert!(row.holds(), "{row:?}");
        }
    }

    #[test]
    fn split_instance_invariants() {
        assert!(SplitInstance::new(20.0, vec![10.0, 10.0], 10.0).is_ok());
        assert!(SplitInstance::new(20.0, vec![20.0], 10.0).is_err());
        assert!(SplitInstance::new(20.0, vec![10.0, 9.0], 10.0).is_err());
        assert!(SplitInstance::new(1.0, vec![-1.0, 2.0], 10.0).is_err());
    }

    #[test]
    fn profile_evaluation() {
        let f = ErrorProfile::linear(0.01, 100.0).unwrap();
        assert_abs_diff_eq!(f.eval(20.0).unwrap(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(f.max_up_to(10.0).unwrap(), 0.1, epsilon = 1e-15);
        assert!(f.eval(101.0).is_err());
        assert!(ErrorProfile::new(vec![(0.0, 1.0), (1.0, 0.5)]).is_err());
        let steps = ErrorProfile::new(vec![(0.0, 0.0), (5.0, 0.2), (10.0, 0.2), (30.0, 0.6)]).unwrap();
        assert_abs_diff_eq!(steps.eval(7.5).unwrap(), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(steps.eval(20.0).unwrap(), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn prop2_linear_profile() {
        let f = ErrorProfile::linear(0.01, 100.0).unwrap();
        let split = SplitInstance::new(20.0, vec![10.0, 10.0], 10.0).unwrap();
        let cfg = McConfig { trials: 20_000, seed: 3, ..McConfig::default() };
        let r = mc_verify_prop2(&f, &split, &cfg).unwrap();
        assert_abs_diff_eq!(r.bound, 2.0, epsilon = 1e-12);
        // E|N(0, 2·(10·0.1·√(π/2))²)| = √2
        assert!((r.emp_closed - 2f64.sqrt()).abs() < 4.0 * r.se_closed, "{r:?}");
        assert!((r.emp_open - 4.0).abs() < 4.0 * r.se_open, "{r:?}");
        assert!(r.holds());
    }

    #[test]
    fn prop2_rejects_flat_profile() {
        let f = ErrorProfile::constant(0.1, 100.0).unwrap();
        let split = SplitInstance::new(20.0, vec![10.0, 10.0], 10.0).unwrap();
        let err = mc_verify_prop2(&f, &split, &McConfig::default()).unwrap_err();
        assert!(matches!(err, SdcError::Precondition(_)));
    }

    #[test]
    fn prop2_inflated_closed_noise_violates() {
        let f = ErrorProfile::linear(0.01, 100.0).unwrap();
        let split = SplitInstance::new(20.0, vec![10.0, 10.0], 10.0).unwrap();
        let cfg = McConfig { trials: 5_000, seed: 1, closed_noise_scale: 3.0 };
        assert!(!mc_verify_prop2(&f, &split, &cfg).unwrap().holds());
    }

    #[test]
    fn prop2_is_deterministic() {
        let f = ErrorProfile::linear(0.02, 50.0).unwrap();
        let split = SplitInstance::new(15.0, vec![5.0, 5.0, 5.0], 6.0).unwrap();
        let cfg = McConfig { trials: 3_000, seed: 9, ..McConfig::default() };
        let a = mc_verify_prop2(&f, &split, &cfg).unwrap();
        let b = mc_verify_prop2(&f, &split, &cfg).unwrap();
        assert_eq!(a.emp_closed.to_bits(), b.emp_closed.to_bits());
        assert_eq!(a.emp_open.to_bits(), b.emp_open.to_bits());
    }

    fn hist(mass: &[f64]) -> Histogram {
        Histogram::new((0..=mass.len()).map(|i| i as f64).collect(), mass.to_vec()).unwrap()
    }

    #[test]
    fn js_examples() {
        let p = hist(&[0.2, 0.3, 0.5]);
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let a = hist(&[0.5, 0.5, 0.0, 0.0]);
        let b = hist(&[0.0, 0.0, 0.25, 0.75]);
        assert_abs_diff_eq!(js_divergence(&a, &b).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        let shifted = Histogram::new(vec![0.0, 2.0, 3.0, 4.0], vec![0.2, 0.3, 0.5]).unwrap();
        assert!(js_divergence(&p, &shifted).is_err());
        assert!(Histogram::new(vec![0.0, 1.0, 2.0], vec![0.6, 0.6]).is_err());
        assert!(Histogram::new(vec![0.0, 1.0, 2.0], vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn js_matches_hand_computation() {
        // p = (1, 0), q = (½, ½): m = (¾, ¼)
        let p = hist(&[1.0, 0.0]);
        let q = hist(&[0.5, 0.5]);
        let want = 0.5 * (1.0f64 / 0.75).ln() + 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln());
        assert_abs_diff_eq!(js_divergence(&p, &q).unwrap(), want, epsilon = 1e-15);
    }

    #[test]
    fn histogram_from_samples() {
        let h = Histogram::from_samples(&[0.0, 0.5, 1.0, 2.0, 9.0], vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(h.mass(), &[0.5, 0.5]);
    }

    fn masses(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0..1.0f64, n).prop_filter_map("positive total", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn js_is_bounded_and_symmetric(p in masses(6), q in masses(6)) {
            let (hp, hq) = (hist(&p), hist(&q));
            let a = js_divergence(&hp, &hq).unwrap();
            let b = js_divergence(&hq, &hp).unwrap();
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
            prop_assert!((a - b).abs() < 1e-15);
        }

        #[test]
        fn min_divisions_matches_logarithm(c_star in 0.01..1e6f64, c_max in 0.5..50.0f64) {
            let n = min_divisions(c_star, c_max).unwrap();
            prop_assert!(c_max * 4f64.powi(n as i32) >= c_star);
            if n > 0 {
                prop_assert!(c_max * 4f64.powi(n as i32 - 1) < c_star);
            }
        }

        #[test]
        fn bounds_sandwich_the_oracle(seed in any::<u64>(), c_max in 1u32..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fine = random_fine_grid(&mut rng, 8, c_max as f64);
            let row = check_bounds(0, &fine, c_max as f64).unwrap();
            prop_assert!(row.holds(), "{:?}", row);
        }
    }
}
