//! Tail analysis of the fixed point: index estimators on upper order
//! statistics, the smoothed survival transform and its one-step defect,
//! the tilted shift operator whose potential series rebuilds the
//! transform, the two routes to the tail constant, and the moment
//! inequalities that control the defect.
//!
//! Everything here is a pure function over immutable sample arrays; the
//! only fresh randomness is the (A, B) draws of the defect-expectation
//! quadrature, which the caller seeds explicitly.

use rand::Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cone;
use crate::model::{Scenario, VectorLaw};
use crate::rng::domain;
use crate::spectral::{SpectralError, SpectralSolution};
use crate::stats::{self, mean_ci, pairwise_sum, MeanCi, Z95, Z99};

#[derive(Debug, Error)]
pub enum TailError {
    #[error("need at least {needed} samples for this window, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("quantile window [{lower}, {upper}] is not 0 < lower < upper < 1/2")]
    BadWindow { lower: f64, upper: f64 },
    #[error("tail window has no spread in the order statistics")]
    DegenerateTail,
    #[error("alpha(chi) = {alpha} is not positive; the tail limit does not apply")]
    NonpositiveAlpha { alpha: f64 },
    #[error("delta = {delta} outside the admissible interval (0, {hi})")]
    DeltaOutOfRange { delta: f64, hi: f64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Upper-tail estimators refuse to run below this population size.
pub const MIN_TAIL_SAMPLES: usize = 10_000;

/// Window statistics replicate over this many strided sub-populations.
/// Order statistics within one population are so strongly correlated
/// that any within-sample error bar lies; independent splits, each with
/// its own matched quantile window, give standard errors that mean what
/// they say.
const SPLITS: usize = 8;

// Student t critical values at SPLITS - 1 = 7 df: two-sided 95% and 99%.
const T975_DF7: f64 = 2.364624252;
const T995_DF7: f64 = 3.499483297;

/// Projections <r, u> of a vector population onto one direction.
pub fn project(samples: &[Vec<f64>], u: &[f64]) -> Vec<f64> {
    samples.iter().map(|r| cone::dot(r, u)).collect()
}

/// Uniform t grid with `count` nodes from lo to hi inclusive.
pub fn uniform_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2 && hi > lo);
    let dt = (hi - lo) / (count - 1) as f64;
    (0..count).map(|j| lo + j as f64 * dt).collect()
}

// ---------------------------------------------------------------------------
// quantile window and survival curves

/// Upper-quantile window: ranks k (1-based from the top) with
/// lower*n <= k <= upper*n count as "in the tail". The default top
/// 1% through 0.01% keeps pre-asymptotic mass out without starving the
/// window.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct QuantileWindow {
    pub upper: f64,
    pub lower: f64,
}

impl Default for QuantileWindow {
    fn default() -> Self {
        QuantileWindow {
            upper: 0.01,
            lower: 0.0001,
        }
    }
}

impl QuantileWindow {
    pub fn new(upper: f64, lower: f64) -> Result<Self, TailError> {
        if !(lower > 0.0 && lower < upper && upper < 0.5) {
            return Err(TailError::BadWindow { lower, upper });
        }
        Ok(QuantileWindow { upper, lower })
    }

    /// Rank range (k_lo, k_hi) of the window in a population of size n.
    /// k_lo never drops below 2, so the strict survival level (k-1)/n
    /// stays positive.
    pub fn rank_range(&self, n: usize) -> Result<(usize, usize), TailError> {
        self.ranks(n, 8, n)
    }

    fn ranks(&self, n: usize, min_points: usize, reported: usize) -> Result<(usize, usize), TailError> {
        let k_hi = ((n as f64) * self.upper).floor() as usize;
        let k_lo = (((n as f64) * self.lower).ceil() as usize).max(2);
        if k_hi < k_lo || k_hi - k_lo + 1 < min_points {
            return Err(TailError::TooFewSamples {
                needed: (((k_lo + min_points) as f64) / self.upper).ceil() as usize,
                got: reported,
            });
        }
        Ok((k_lo, k_hi))
    }
}

/// Strided split into SPLITS sub-populations, each sorted descending.
/// Samples are exchangeable, so a fixed stride partition preserves the
/// law while making the splits independent of one another.
fn split_descending(proj: &[f64]) -> Vec<Vec<f64>> {
    let mut splits: Vec<Vec<f64>> = (0..SPLITS)
        .map(|_| Vec::with_capacity(proj.len() / SPLITS + 1))
        .collect();
    for (i, &x) in proj.iter().enumerate() {
        splits[i % SPLITS].push(x);
    }
    for s in splits.iter_mut() {
        stats::sort_descending(s);
    }
    splits
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SurvivalPoint {
    pub t: f64,
    pub survival: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Empirical strict survival P(X > t) at the window's order statistics,
/// t ascending. The level of the k-th largest of n is (k-1)/n, which
/// makes the Pareto tail product exactly unbiased; the CI is the
/// binomial normal approximation clamped to [0, 1].
pub fn tail_curve(proj: &[f64], window: QuantileWindow) -> Result<Vec<SurvivalPoint>, TailError> {
    let n = proj.len();
    if n < MIN_TAIL_SAMPLES {
        return Err(TailError::TooFewSamples {
            needed: MIN_TAIL_SAMPLES,
            got: n,
        });
    }
    let (k_lo, k_hi) = window.rank_range(n)?;
    let mut desc = proj.to_vec();
    stats::sort_descending(&mut desc);
    let nf = n as f64;
    let mut out = Vec::with_capacity(k_hi - k_lo + 1);
    for k in (k_lo..=k_hi).rev() {
        let p = (k - 1) as f64 / nf;
        let se = (p * (1.0 - p) / nf).sqrt();
        out.push(SurvivalPoint {
            t: desc[k - 1],
            survival: p,
            ci_lo: (p - Z95 * se).max(0.0),
            ci_hi: (p + Z95 * se).min(1.0),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// tail index estimators

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HillEstimate {
    pub chi_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub k: usize,
}

/// Hill estimator on the top k order statistics: reciprocal mean of the
/// log-ratios against the (k+1)-th. Ratios rather than log differences,
/// so a power-of-two rescaling of the data cancels exactly. The CI is
/// the asymptotic chi_hat (1 +- z/sqrt(k)).
pub fn hill_estimate(proj: &[f64], k: usize) -> Result<HillEstimate, TailError> {
    let n = proj.len();
    if k < 30 || 10 * k > n {
        return Err(TailError::TooFewSamples {
            needed: 10 * k.max(30),
            got: n,
        });
    }
    let mut desc = proj.to_vec();
    stats::sort_descending(&mut desc);
    let threshold = desc[k];
    assert!(threshold > 0.0, "hill needs positive samples");
    let logs: Vec<f64> = desc[..k].iter().map(|&x| (x / threshold).ln()).collect();
    let mean_log = pairwise_sum(&logs) / k as f64;
    if mean_log <= 0.0 {
        return Err(TailError::DegenerateTail);
    }
    let chi_hat = 1.0 / mean_log;
    let rel = Z95 / (k as f64).sqrt();
    Ok(HillEstimate {
        chi_hat,
        ci_lo: chi_hat * (1.0 - rel),
        ci_hi: chi_hat * (1.0 + rel),
        k,
    })
}

/// Hill along a ladder of k values; entries failing the estimator's
/// gates are skipped.
pub fn hill_sensitivity(proj: &[f64], ks: &[usize]) -> Vec<HillEstimate> {
    ks.iter()
        .filter_map(|&k| hill_estimate(proj, k).ok())
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RankSlope {
    pub chi_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub slope_se: f64,
}

fn spread(vals: &[f64]) -> f64 {
    let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
    let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
    hi - lo
}

/// Log survival regressed on log threshold over the window; -slope
/// estimates the tail index. One fit per independent split, then the
/// t-based CI across the split replicates.
pub fn rank_slope(proj: &[f64], window: QuantileWindow) -> Result<RankSlope, TailError> {
    let n = proj.len();
    if n < MIN_TAIL_SAMPLES {
        return Err(TailError::TooFewSamples {
            needed: MIN_TAIL_SAMPLES,
            got: n,
        });
    }
    let splits = split_descending(proj);
    let mut chis = Vec::with_capacity(SPLITS);
    for desc in &splits {
        let (k_lo, k_hi) = window.ranks(desc.len(), 4, n)?;
        let nf = desc.len() as f64;
        let mut log_t = Vec::with_capacity(k_hi - k_lo + 1);
        let mut log_s = Vec::with_capacity(k_hi - k_lo + 1);
        for k in k_lo..=k_hi {
            log_t.push(desc[k - 1].ln());
            log_s.push((((k - 1) as f64) / nf).ln());
        }
        if spread(&log_t) <= 1e-12 {
            return Err(TailError::DegenerateTail);
        }
        chis.push(-stats::fit_line(&log_t, &log_s).slope);
    }
    let ci = mean_ci(&chis, T975_DF7);
    Ok(RankSlope {
        chi_hat: ci.mean,
        ci_lo: ci.lo,
        ci_hi: ci.hi,
        slope_se: ci.half_width() / T975_DF7,
    })
}

// ---------------------------------------------------------------------------
// smoothed transform and defect

/// Sorted projection table with prefix power sums: the capped moment
/// E min(X, cap)^e is O(log n) per cap once the powers are prefixed.
struct TailTransform {
    xs: Vec<f64>,
    prefix: Vec<f64>,
    prefix_sq: Vec<f64>,
    exponent: f64,
}

impl TailTransform {
    fn new(proj: &[f64], exponent: f64) -> Self {
        let mut xs = proj.to_vec();
        xs.sort_by(|a, b| a.partial_cmp(b).expect("NaN in sample"));
        let mut prefix = Vec::with_capacity(xs.len() + 1);
        let mut prefix_sq = Vec::with_capacity(xs.len() + 1);
        let (mut acc, mut acc_sq) = (0.0, 0.0);
        prefix.push(0.0);
        prefix_sq.push(0.0);
        for &x in &xs {
            let v = x.powf(exponent);
            acc += v;
            acc_sq += v * v;
            prefix.push(acc);
            prefix_sq.push(acc_sq);
        }
        TailTransform {
            xs,
            prefix,
            prefix_sq,
            exponent,
        }
    }

    /// Mean and standard error of min(X, cap)^exponent.
    fn capped_moment(&self, cap: f64) -> (f64, f64) {
        let n = self.xs.len();
        let idx = self.xs.partition_point(|&x| x < cap);
        let cv = cap.powf(self.exponent);
        let tail = (n - idx) as f64;
        let sum = self.prefix[idx] + tail * cv;
        let sum_sq = self.prefix_sq[idx] + tail * cv * cv;
        let nf = n as f64;
        let mean = sum / nf;
        let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
        (mean, (var / nf).sqrt())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurvePoint {
    pub t: f64,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Smoothed survival transform of <R, u> on a t grid:
/// E min(<R,u>, e^t)^(chi+1) / ((chi+1) e^t e_chi_at_u), the per-sample
/// closed form of the exponentially weighted running integral of the
/// survival function. Beyond the largest sample every minimum saturates
/// and the curve decays exactly like a constant times e^(-t).
pub fn smooth_g_curve(
    samples: &[Vec<f64>],
    u: &[f64],
    t_grid: &[f64],
    chi: f64,
    e_chi_at_u: f64,
) -> Vec<CurvePoint> {
    assert!(chi > 0.0 && e_chi_at_u > 0.0);
    let table = TailTransform::new(&project(samples, u), chi + 1.0);
    t_grid
        .iter()
        .map(|&t| {
            let cap = t.exp();
            let (m, se) = table.capped_moment(cap);
            let denom = (chi + 1.0) * cap * e_chi_at_u;
            CurvePoint {
                t,
                value: m / denom,
                ci_lo: (m - Z95 * se) / denom,
                ci_hi: (m + Z95 * se) / denom,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SideFit {
    /// Fitted decay rate of log|g| against |t|; positive means decay.
    pub beta: f64,
    pub c_beta: f64,
    pub points_used: usize,
    pub decays: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DefectReport {
    pub points: Vec<CurvePoint>,
    pub pos: SideFit,
    pub neg: SideFit,
}

fn decay_fit(points: &[(f64, f64, f64)]) -> SideFit {
    // Only points whose defect clears twice its own noise enter the
    // fit; the log of a noise-dominated value carries no decay signal.
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(t, g, se) in points {
        if g != 0.0 && g.abs() > 2.0 * se {
            xs.push(t.abs());
            ys.push(g.abs().ln());
        }
    }
    if xs.len() < 3 || spread(&xs) <= 1e-12 {
        return SideFit {
            beta: 0.0,
            c_beta: 0.0,
            points_used: xs.len(),
            decays: false,
        };
    }
    let fit = stats::fit_line(&xs, &ys);
    SideFit {
        beta: -fit.slope,
        c_beta: fit.intercept.exp(),
        points_used: xs.len(),
        decays: -fit.slope > 0.0,
    }
}

/// One-step defect of the smoothed transform on a t grid, with
/// exponential decay fits on both sides of t = 0. `ar_samples` must be
/// draws of a single letter A applied to an independent copy of R; the
/// defect subtracts N times their capped moment from the full one.
pub fn defect_g_curve(
    r_samples: &[Vec<f64>],
    ar_samples: &[Vec<f64>],
    n_branch: usize,
    u: &[f64],
    t_grid: &[f64],
    chi: f64,
    e_chi_at_u: f64,
) -> DefectReport {
    assert!(chi > 0.0 && e_chi_at_u > 0.0);
    let table_r = TailTransform::new(&project(r_samples, u), chi + 1.0);
    let table_a = TailTransform::new(&project(ar_samples, u), chi + 1.0);
    let nb = n_branch as f64;
    let mut points = Vec::with_capacity(t_grid.len());
    let mut raw = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let cap = t.exp();
        let (m_r, se_r) = table_r.capped_moment(cap);
        let (m_a, se_a) = table_a.capped_moment(cap);
        let denom = (chi + 1.0) * cap * e_chi_at_u;
        let g = (m_r - nb * m_a) / denom;
        let se = (se_r * se_r + nb * nb * se_a * se_a).sqrt() / denom;
        points.push(CurvePoint {
            t,
            value: g,
            ci_lo: g - Z95 * se,
            ci_hi: g + Z95 * se,
        });
        raw.push((t, g, se));
    }
    let pos: Vec<_> = raw.iter().copied().filter(|p| p.0 > 0.0).collect();
    let neg: Vec<_> = raw.iter().copied().filter(|p| p.0 < 0.0).collect();
    DefectReport {
        points,
        pos: decay_fit(&pos),
        neg: decay_fit(&neg),
    }
}

/// Pair each population sample with a fresh matrix draw: one sample of
/// the single-letter product A R with A independent of R.
pub fn ar_products(
    scenario: &Scenario,
    r_samples: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    r_samples
        .iter()
        .map(|r| scenario.mu.sample(scenario.dim, rng).matvec(r))
        .collect()
}

// ---------------------------------------------------------------------------
// grid functions and the tilted shift operator

/// Function on sphere nodes x a uniform t grid, row-major by node.
#[derive(Debug, Clone)]
pub struct GridFun {
    pub nodes: usize,
    pub nt: usize,
    values: Vec<f64>,
}

impl GridFun {
    pub fn zeros(nodes: usize, nt: usize) -> Self {
        GridFun {
            nodes,
            nt,
            values: vec![0.0; nodes * nt],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let nodes = rows.len();
        let nt = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(nodes * nt);
        for row in rows {
            assert_eq!(row.len(), nt, "ragged grid function");
            values.extend_from_slice(&row);
        }
        GridFun { nodes, nt, values }
    }

    pub fn at(&self, node: usize, ti: usize) -> f64 {
        self.values[node * self.nt + ti]
    }

    pub fn set(&mut self, node: usize, ti: usize, value: f64) {
        self.values[node * self.nt + ti] = value;
    }

    pub fn add(&mut self, other: &GridFun) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn sub(&mut self, other: &GridFun) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a -= b;
        }
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
    }

    /// Sup |self - other| over all nodes, restricted to t indices in
    /// [j_lo, j_hi].
    pub fn sup_diff_window(&self, other: &GridFun, j_lo: usize, j_hi: usize) -> f64 {
        assert_eq!(self.nt, other.nt);
        assert_eq!(self.nodes, other.nodes);
        assert!(j_lo <= j_hi && j_hi < self.nt);
        let mut worst = 0.0_f64;
        for i in 0..self.nodes {
            for j in j_lo..=j_hi {
                worst = worst.max((self.at(i, j) - other.at(i, j)).abs());
            }
        }
        worst
    }
}

struct ThetaEntry {
    node: u32,
    weight: f64,
    log_r: f64,
}

/// One step of the tilted shift: for a function f on directions x
/// levels,
///
///   (Theta f)(u_i, t) = sum over atoms a and mesh targets j of
///     p |a* u_i|^s w_j e_j / (kappa e_i) * f(u_j, t - log|a* u_i|).
///
/// The direction part is the same tilted kernel the chi-shifted chain
/// walks, kept here with raw (unnormalized) weights so that row-mass
/// defects show up in the output instead of being hidden. Functions are
/// linearly interpolated in t and extended by zero outside the grid,
/// which is harmless exactly when f decays at both ends.
pub struct ThetaOperator {
    rows: Vec<Vec<ThetaEntry>>,
    t0: f64,
    dt: f64,
    nt: usize,
    /// Worst |row mass - 1|: the mesh's stochasticity defect.
    pub max_row_defect: f64,
    /// Largest |log r| over entries: how far one application reads
    /// beyond the t grid.
    pub max_shift: f64,
}

impl ThetaOperator {
    pub fn new(
        scenario: &Scenario,
        sol: &SpectralSolution,
        t_grid: &[f64],
    ) -> Result<Self, TailError> {
        assert!(t_grid.len() >= 2, "the shift operator needs two t nodes");
        let t0 = t_grid[0];
        let dt = t_grid[1] - t_grid[0];
        assert!(dt > 0.0);
        for w in t_grid.windows(2) {
            assert!(
                ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.max(1.0),
                "the shift operator needs a uniform t grid"
            );
        }
        let (atoms, probs) = scenario.mu.atoms().ok_or_else(|| {
            SpectralError::UnsupportedLaw("the shift operator needs a finite-support matrix law".into())
        })?;
        let grid = &sol.grid;
        let mut rows = Vec::with_capacity(grid.len());
        let mut max_row_defect = 0.0_f64;
        let mut max_shift = 0.0_f64;
        for (i, x) in grid.nodes().iter().enumerate() {
            let mut row = Vec::new();
            let mut mass = 0.0;
            for (a, &p) in atoms.iter().zip(probs) {
                let y = a.matvec_t(x);
                let r = cone::norm(&y);
                assert!(r > 0.0, "an allowable atom cannot kill a cone point");
                let dir: Vec<f64> = y.iter().map(|v| v / r).collect();
                let coeff = p * r.powf(sol.s) / (sol.kappa * sol.e_fun[i]);
                for (j, w) in grid.interpolate(&dir).iter() {
                    if w == 0.0 {
                        continue;
                    }
                    let weight = coeff * w * sol.e_fun[j];
                    mass += weight;
                    max_shift = max_shift.max(r.ln().abs());
                    row.push(ThetaEntry {
                        node: j as u32,
                        weight,
                        log_r: r.ln(),
                    });
                }
            }
            max_row_defect = max_row_defect.max((mass - 1.0).abs());
            rows.push(row);
        }
        Ok(ThetaOperator {
            rows,
            t0,
            dt,
            nt: t_grid.len(),
            max_row_defect,
            max_shift,
        })
    }

    /// Mass of row i; 1 up to the mesh defect when kappa is exact.
    pub fn row_mass(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|e| e.weight).sum()
    }

    fn sample(&self, f: &GridFun, node: usize, t: f64) -> f64 {
        let pos = (t - self.t0) / self.dt;
        if pos < 0.0 || pos > (self.nt - 1) as f64 {
            return 0.0;
        }
        let j0 = pos.floor() as usize;
        if j0 + 1 >= self.nt {
            return f.at(node, self.nt - 1);
        }
        let frac = pos - j0 as f64;
        (1.0 - frac) * f.at(node, j0) + frac * f.at(node, j0 + 1)
    }

    pub fn apply(&self, f: &GridFun) -> GridFun {
        assert_eq!(f.nt, self.nt, "grid function lives on a different t grid");
        assert_eq!(f.nodes, self.rows.len(), "grid function lives on a different mesh");
        let mut out = GridFun::zeros(f.nodes, f.nt);
        for (i, row) in self.rows.iter().enumerate() {
            for j in 0..self.nt {
                let t = self.t0 + j as f64 * self.dt;
                let mut acc = 0.0;
                for e in row {
                    acc += e.weight * self.sample(f, e.node as usize, t - e.log_r);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

/// One application of the tilted shift operator.
pub fn theta_apply(
    f: &GridFun,
    scenario: &Scenario,
    sol: &SpectralSolution,
    t_grid: &[f64],
) -> Result<GridFun, TailError> {
    Ok(ThetaOperator::new(scenario, sol, t_grid)?.apply(f))
}

/// Partial potential sum_{n=0..m} Theta^n g.
pub fn theta_potential_sum(op: &ThetaOperator, g: &GridFun, m: usize) -> GridFun {
    let mut acc = g.clone();
    let mut term = g.clone();
    for _ in 0..m {
        term = op.apply(&term);
        acc.add(&term);
    }
    acc
}

/// Smoothed transform estimated on every mesh node x t grid.
pub fn smoothed_grid(samples: &[Vec<f64>], sol: &SpectralSolution, t_grid: &[f64]) -> GridFun {
    let chi = sol.s;
    let rows: Vec<Vec<f64>> = (0..sol.grid.len())
        .into_par_iter()
        .map(|i| {
            let table = TailTransform::new(&project(samples, sol.grid.node(i)), chi + 1.0);
            t_grid
                .iter()
                .map(|&t| {
                    let cap = t.exp();
                    table.capped_moment(cap).0 / ((chi + 1.0) * cap * sol.e_fun[i])
                })
                .collect()
        })
        .collect();
    GridFun::from_rows(rows)
}

/// One-step defect estimated on every mesh node x t grid.
pub fn defect_grid(
    r_samples: &[Vec<f64>],
    ar_samples: &[Vec<f64>],
    n_branch: usize,
    sol: &SpectralSolution,
    t_grid: &[f64],
) -> GridFun {
    let chi = sol.s;
    let nb = n_branch as f64;
    let rows: Vec<Vec<f64>> = (0..sol.grid.len())
        .into_par_iter()
        .map(|i| {
            let u = sol.grid.node(i);
            let table_r = TailTransform::new(&project(r_samples, u), chi + 1.0);
            let table_a = TailTransform::new(&project(ar_samples, u), chi + 1.0);
            t_grid
                .iter()
                .map(|&t| {
                    let cap = t.exp();
                    (table_r.capped_moment(cap).0 - nb * table_a.capped_moment(cap).0)
                        / ((chi + 1.0) * cap * sol.e_fun[i])
                })
                .collect()
        })
        .collect();
    GridFun::from_rows(rows)
}

// ---------------------------------------------------------------------------
// the tail constant, two routes

#[derive(Debug, Clone, Serialize)]
pub struct DirectionTail {
    pub u: Vec<f64>,
    /// Window-averaged tail product t^chi P(<R,u> > t): the direction
    /// profile entry.
    pub raw: MeanCi,
    /// raw / e^chi(u); flat across directions when the profile follows
    /// the eigenfunction.
    pub normalized: MeanCi,
    /// Blocked-regression z statistic of the tail product against
    /// log t; near zero when the product is flat across the window.
    pub slope_z: f64,
    /// |slope_z| below the two-sided 1% point: no detectable trend.
    pub stable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CChiDirect {
    pub per_direction: Vec<DirectionTail>,
    pub pooled: MeanCi,
    /// Window rank range within one split (splits hold n / 8 samples).
    pub k_lo: usize,
    pub k_hi: usize,
}

fn scale_ci(ci: MeanCi, factor: f64) -> MeanCi {
    assert!(factor > 0.0);
    MeanCi {
        mean: ci.mean * factor,
        lo: ci.lo * factor,
        hi: ci.hi * factor,
        n: ci.n,
    }
}

/// Window-averaged tail product t^chi P(X > t) replicated over the
/// splits: the estimate and CI come from the independent replicates,
/// and the flatness z statistic is the t ratio of the per-split
/// product-versus-log-t slopes against zero.
fn window_tail_product(
    splits: &[Vec<f64>],
    chi: f64,
    window: QuantileWindow,
    total_n: usize,
) -> Result<(MeanCi, f64), TailError> {
    let mut vals = Vec::with_capacity(SPLITS);
    let mut slopes = Vec::with_capacity(SPLITS);
    for desc in splits {
        let (k_lo, k_hi) = window.ranks(desc.len(), 4, total_n)?;
        let nf = desc.len() as f64;
        let prod: Vec<f64> = (k_lo..=k_hi)
            .map(|k| desc[k - 1].powf(chi) * ((k - 1) as f64 / nf))
            .collect();
        let log_t: Vec<f64> = (k_lo..=k_hi).map(|k| desc[k - 1].ln()).collect();
        vals.push(pairwise_sum(&prod) / prod.len() as f64);
        if spread(&log_t) > 1e-12 {
            slopes.push(stats::fit_line(&log_t, &prod).slope);
        }
    }
    let est = mean_ci(&vals, T975_DF7);
    let z = if slopes.len() == SPLITS {
        let s = mean_ci(&slopes, 1.0);
        let se = s.half_width();
        if se > 0.0 {
            s.mean / se
        } else if s.mean == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        0.0
    };
    Ok((est, z))
}

/// Inverse-variance pool of (value, se) readings that share their
/// underlying samples: the pooled standard error is the weighted
/// average of the inputs, not the usual root of the summed precisions,
/// because fully shared samples never average their errors out.
fn pool_correlated(values: &[(f64, f64)], crit: f64) -> MeanCi {
    assert!(!values.is_empty());
    let mut wsum = 0.0;
    let mut est = 0.0;
    let mut se_sum = 0.0;
    for &(v, se) in values {
        let se = se.max(1e-300);
        let w = 1.0 / (se * se);
        wsum += w;
        est += w * v;
        se_sum += w * se;
    }
    let est = est / wsum;
    let se = se_sum / wsum;
    MeanCi {
        mean: est,
        lo: est - crit * se,
        hi: est + crit * se,
        n: values.len(),
    }
}

/// Direct tail-constant route: the window-averaged tail product per
/// direction, normalized by the eigenfunction, pooled by inverse
/// variance across directions. All directions read the same samples at
/// matched quantile ranks.
pub fn c_chi_direct(
    samples: &[Vec<f64>],
    u_list: &[Vec<f64>],
    chi: f64,
    e_vals: &[f64],
    window: QuantileWindow,
) -> Result<CChiDirect, TailError> {
    assert_eq!(u_list.len(), e_vals.len());
    assert!(!u_list.is_empty());
    let n = samples.len();
    if n < MIN_TAIL_SAMPLES {
        return Err(TailError::TooFewSamples {
            needed: MIN_TAIL_SAMPLES,
            got: n,
        });
    }
    let (k_lo, k_hi) = window.ranks(n / SPLITS, 4, n)?;
    let mut per_direction = Vec::with_capacity(u_list.len());
    for (u, &e) in u_list.iter().zip(e_vals) {
        assert!(e > 0.0, "eigenfunction must be positive");
        let splits = split_descending(&project(samples, u));
        let (raw, z) = window_tail_product(&splits, chi, window, n)?;
        per_direction.push(DirectionTail {
            u: u.clone(),
            normalized: scale_ci(raw, 1.0 / e),
            raw,
            slope_z: z,
            stable: z.abs() <= T995_DF7,
        });
    }
    let readings: Vec<(f64, f64)> = per_direction
        .iter()
        .map(|d| (d.normalized.mean, d.normalized.half_width() / T975_DF7))
        .collect();
    let pooled = pool_correlated(&readings, T975_DF7);
    Ok(CChiDirect {
        per_direction,
        pooled,
        k_lo,
        k_hi,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CChiFormula {
    pub c_chi: MeanCi,
    /// Lower bound (c_min / sup e) E|B|^chi / (alpha chi), with c_min
    /// the worst over mesh nodes x of sum_j <x, u_j>^chi pi*_j.
    pub positivity_floor: MeanCi,
    pub c_min: f64,
    pub sup_e: f64,
    pub trials: usize,
    /// Strict positivity of the constant is guaranteed only from
    /// chi >= 1; below that the estimate is reported without the claim.
    pub positivity_applicable: bool,
}

/// Defect-expectation route to the tail constant:
///
///   (1/(alpha chi)) sum_j pi*_j e_j^{-1}
///     E( <sum_i A_i R_i + B, u_j>^chi - sum_i <A_i R_i, u_j>^chi ).
///
/// Fresh A and B per trial; R is drawn without replacement from
/// `r_pool`, N per trial. The quadrature over mesh nodes is folded
/// inside the per-trial statistic so the CI sees the true joint
/// fluctuation.
pub fn c_chi_formula(
    scenario: &Scenario,
    sol: &SpectralSolution,
    alpha: f64,
    b_law: &VectorLaw,
    r_pool: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<CChiFormula, TailError> {
    if !(alpha > 0.0) {
        return Err(TailError::NonpositiveAlpha { alpha });
    }
    let chi = sol.s;
    let nb = scenario.n_branch;
    let trials = r_pool.len() / nb;
    if trials < 30 {
        return Err(TailError::TooFewSamples {
            needed: 30 * nb,
            got: r_pool.len(),
        });
    }
    let nodes = sol.grid.nodes();
    // pi*_j / e_j: quadrature weights of the outer mixed measure
    let weights: Vec<f64> = (0..nodes.len())
        .map(|j| sol.pi_star[j] / sol.e_fun[j])
        .collect();
    let dim = scenario.dim;
    let mut trial_stats = Vec::with_capacity(trials);
    let mut b_norms = Vec::with_capacity(trials);
    let mut parts: Vec<Vec<f64>> = vec![vec![0.0; dim]; nb];
    for t in 0..trials {
        let mut total = b_law.sample(dim, rng);
        b_norms.push(cone::norm(&total).powf(chi));
        for (i, part) in parts.iter_mut().enumerate() {
            let a = scenario.mu.sample(dim, rng);
            *part = a.matvec(&r_pool[t * nb + i]);
            for (acc, v) in total.iter_mut().zip(part.iter()) {
                *acc += v;
            }
        }
        let mut stat = 0.0;
        for (u, &w) in nodes.iter().zip(&weights) {
            let mut defect = cone::dot(&total, u).powf(chi);
            for part in &parts {
                defect -= cone::dot(part, u).powf(chi);
            }
            stat += w * defect;
        }
        trial_stats.push(stat);
    }
    let scale = 1.0 / (alpha * chi);
    let c_chi = scale_ci(mean_ci(&trial_stats, Z95), scale);
    let sup_e = sol.e_fun.iter().cloned().fold(f64::MIN, f64::max);
    let c_min = nodes
        .iter()
        .map(|x| {
            nodes
                .iter()
                .zip(&sol.pi_star)
                .map(|(u, &w)| w * cone::dot(x, u).powf(chi))
                .sum::<f64>()
        })
        .fold(f64::MAX, f64::min);
    let positivity_floor = scale_ci(mean_ci(&b_norms, Z95), scale * c_min / sup_e);
    Ok(CChiFormula {
        c_chi,
        positivity_floor,
        c_min,
        sup_e,
        trials,
        positivity_applicable: chi >= 1.0,
    })
}

// ---------------------------------------------------------------------------
// exchange identities and domination

#[derive(Debug, Clone, Copy, Serialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// |lhs - rhs| / max(1, |lhs|, |rhs|).
    pub gap: f64,
}

fn identity_gap(lhs: f64, rhs: f64) -> IdentityCheck {
    let gap = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
    IdentityCheck { lhs, rhs, gap }
}

/// Sum-versus-max exchange identity on one shared sample set. The left
/// route integrates r^(e-1) against the survival difference between
/// the sum of indicators and the max indicator, each trial's integral
/// taken in closed form with the cancellation inside the trial; the
/// right route aggregates the power sums and the max powers over the
/// whole population first and subtracts once. The two routes differ
/// only in summation arrangement, so the gap is pure rounding.
pub fn fung1a_check(parts: &[f64], n_branch: usize, exponent: f64) -> IdentityCheck {
    assert!(n_branch >= 1 && !parts.is_empty() && parts.len() % n_branch == 0);
    assert!(exponent > 0.0);
    let trials = parts.len() / n_branch;
    let mut per_trial = Vec::with_capacity(trials);
    let mut all_pows = Vec::with_capacity(parts.len());
    let mut max_pows = Vec::with_capacity(trials);
    for group in parts.chunks_exact(n_branch) {
        let mut integral = 0.0;
        let mut top = f64::MIN;
        for &p in group {
            let v = p.powf(exponent);
            integral += v / exponent;
            all_pows.push(v);
            top = top.max(p);
        }
        integral -= top.powf(exponent) / exponent;
        max_pows.push(top.powf(exponent));
        per_trial.push(integral);
    }
    let lhs = pairwise_sum(&per_trial) / trials as f64;
    let rhs =
        (pairwise_sum(&all_pows) - pairwise_sum(&max_pows)) / (trials as f64 * exponent);
    identity_gap(lhs, rhs)
}

/// Fixed-point-versus-max exchange identity: same two routes, with the
/// full projection replacing the sum of parts on the left of the
/// difference. `r_proj[t]` must be the projection of the trial-t fixed
/// point assembled from `parts[t*N..(t+1)*N]`.
pub fn fung2a_check(
    r_proj: &[f64],
    parts: &[f64],
    n_branch: usize,
    exponent: f64,
) -> IdentityCheck {
    assert!(n_branch >= 1 && r_proj.len() * n_branch == parts.len());
    assert!(!r_proj.is_empty() && exponent > 0.0);
    let trials = r_proj.len();
    let mut per_trial = Vec::with_capacity(trials);
    let mut r_pows = Vec::with_capacity(trials);
    let mut max_pows = Vec::with_capacity(trials);
    for (t, group) in parts.chunks_exact(n_branch).enumerate() {
        let top = group.iter().cloned().fold(f64::MIN, f64::max);
        let rv = r_proj[t].powf(exponent);
        let tv = top.powf(exponent);
        per_trial.push((rv - tv) / exponent);
        r_pows.push(rv);
        max_pows.push(tv);
    }
    let lhs = pairwise_sum(&per_trial) / trials as f64;
    let rhs =
        (pairwise_sum(&r_pows) - pairwise_sum(&max_pows)) / (trials as f64 * exponent);
    identity_gap(lhs, rhs)
}

/// Worst signed excess of the empirical max curve over the capped sum
/// curve: P(max_i <A_i R_i, u> > r) minus min(1, N P(<A R, u> > r)),
/// both read from the same trials. Nonpositive everywhere by counting:
/// a trial whose max clears r has at least one part clearing r.
pub fn max_sum_domination_gap(parts: &[f64], n_branch: usize, thresholds: &[f64]) -> f64 {
    assert!(n_branch >= 1 && !parts.is_empty() && parts.len() % n_branch == 0);
    let trials = (parts.len() / n_branch) as f64;
    let mut worst = f64::MIN;
    for &r in thresholds {
        let mut max_count = 0usize;
        let mut part_count = 0usize;
        for group in parts.chunks_exact(n_branch) {
            let mut any = false;
            for &p in group {
                if p > r {
                    part_count += 1;
                    any = true;
                }
            }
            if any {
                max_count += 1;
            }
        }
        let lhs = max_count as f64 / trials;
        let rhs = (part_count as f64 / trials).min(1.0);
        worst = worst.max(lhs - rhs);
    }
    worst
}

// ---------------------------------------------------------------------------
// moment inequality harness

/// Scalar test laws for the inequality harnesses, with closed-form
/// fractional moments.
#[derive(Debug, Clone, Copy, Serialize)]
pub enum ScalarLaw {
    PointMass(f64),
    Uniform(f64, f64),
    /// Density rate * exp(-rate * y) on y > 0.
    Exponential(f64),
    /// P(Y > y) = (scale / y)^index for y >= scale.
    Pareto { index: f64, scale: f64 },
}

impl ScalarLaw {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            ScalarLaw::PointMass(c) => c,
            ScalarLaw::Uniform(a, b) => rng.gen_range(a..b),
            ScalarLaw::Exponential(rate) => {
                rand_distr::Exp::new(rate).expect("positive rate").sample(rng)
            }
            ScalarLaw::Pareto { index, scale } => rand_distr::Pareto::new(scale, index)
                .expect("positive index and scale")
                .sample(rng),
        }
    }

    /// E Y^q for q >= 0; None when the moment diverges.
    pub fn moment(&self, q: f64) -> Option<f64> {
        assert!(q >= 0.0);
        match *self {
            ScalarLaw::PointMass(c) => Some(c.powf(q)),
            ScalarLaw::Uniform(a, b) => {
                Some((b.powf(q + 1.0) - a.powf(q + 1.0)) / ((q + 1.0) * (b - a)))
            }
            ScalarLaw::Exponential(rate) => Some(libm::tgamma(q + 1.0) / rate.powf(q)),
            ScalarLaw::Pareto { index, scale } => {
                (q < index).then(|| index * scale.powf(q) / (index - q))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InequalityReport {
    /// 99% CI of the Monte Carlo left side.
    pub lhs: MeanCi,
    pub rhs: f64,
    pub pass: bool,
    pub trials: usize,
}

fn sum_power_defect(
    exponent: f64,
    k: usize,
    law: &ScalarLaw,
    trials: usize,
    rng: &mut impl Rng,
) -> MeanCi {
    assert!(trials >= 2);
    let mut vals = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut sum = 0.0;
        let mut pows = 0.0;
        for _ in 0..k {
            let y = law.sample(rng);
            sum += y;
            pows += y.powf(exponent);
        }
        vals.push(sum.powf(exponent) - pows);
    }
    mean_ci(&vals, Z99)
}

/// Superadditivity defect bound, integer-bracketed exponent:
/// E (sum_{i<=k} Y_i)^a - sum_i E Y_i^a <= k^a (E Y^(p-1))^(a/(p-1))
/// with p the ceiling of a, for i.i.d. nonnegative Y.
pub fn inequality_harness_nier1(
    alpha: f64,
    k: usize,
    law: &ScalarLaw,
    trials: usize,
    rng: &mut impl Rng,
) -> InequalityReport {
    assert!(alpha > 1.0, "the defect bound starts above exponent 1");
    assert!(k >= 1);
    let p = alpha.ceil();
    let q = p - 1.0;
    let m = law.moment(q).expect("law must have a finite p-1 moment");
    let rhs = (k as f64).powf(alpha) * m.powf(alpha / q);
    let lhs = sum_power_defect(alpha, k, law, trials, rng);
    InequalityReport {
        pass: lhs.hi <= rhs,
        lhs,
        rhs,
        trials,
    }
}

/// Fractional variant: exponent p + beta with integer p and
/// beta in (0, 1); the bound is k^(p+1) (E Y^(p-delta))^((p+beta)/(p-delta))
/// for any delta in (0, p(1-beta)/(p+1)).
pub fn inequality_harness_nier2(
    p: u32,
    beta: f64,
    delta: f64,
    k: usize,
    law: &ScalarLaw,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<InequalityReport, TailError> {
    assert!(p >= 1);
    assert!(beta > 0.0 && beta < 1.0);
    assert!(k >= 1);
    let pf = p as f64;
    let hi = pf * (1.0 - beta) / (pf + 1.0);
    if !(delta > 0.0 && delta < hi) {
        return Err(TailError::DeltaOutOfRange { delta, hi });
    }
    let q = pf - delta;
    let m = law.moment(q).expect("law must have a finite p-delta moment");
    let rhs = (k as f64).powf(pf + 1.0) * m.powf((pf + beta) / q);
    let lhs = sum_power_defect(pf + beta, k, law, trials, rng);
    Ok(InequalityReport {
        pass: lhs.hi <= rhs,
        lhs,
        rhs,
        trials,
    })
}

// ---------------------------------------------------------------------------
// assembled report

#[derive(Debug, Clone, Serialize)]
pub struct DirectionCurve {
    pub u: Vec<f64>,
    pub points: Vec<SurvivalPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GDecay {
    pub u: Vec<f64>,
    pub pos: SideFit,
    pub neg: SideFit,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub survival: Vec<DirectionCurve>,
    pub hill_chi: MeanCi,
    pub hill_k: usize,
    pub rank_slope_chi: MeanCi,
    pub chi_spectral: f64,
    pub direction_profile: Vec<DirectionTail>,
    pub c_chi_formula: CChiFormula,
    pub c_chi_direct: MeanCi,
    pub g_decay: GDecay,
    pub alpha_chi: f64,
}

#[derive(Debug, Clone)]
pub struct TailOptions {
    pub window: QuantileWindow,
    /// 0 picks 4 sqrt(n), clamped into the estimator's gates.
    pub hill_k: usize,
    pub t_grid: Vec<f64>,
    /// Stream index of the fresh (A, B) draws of the formula route.
    pub formula_stream: u64,
}

impl Default for TailOptions {
    fn default() -> Self {
        TailOptions {
            window: QuantileWindow::default(),
            hill_k: 0,
            t_grid: uniform_grid(-4.0, 8.0, 49),
            formula_stream: 1,
        }
    }
}

fn auto_hill_k(n: usize) -> usize {
    let k = (4.0 * (n as f64).sqrt()).round() as usize;
    k.clamp(30, (n / 10).max(30))
}

/// Full tail study of one scenario: survival curves, two tail-index
/// estimators pooled across directions, the direction profile, both
/// routes to the tail constant, and the defect decay along the first
/// direction. `ar_samples` as in [`defect_g_curve`]; `alpha` from the
/// spectral layer.
pub fn tail_report(
    scenario: &Scenario,
    sol: &SpectralSolution,
    alpha: f64,
    r_samples: &[Vec<f64>],
    ar_samples: &[Vec<f64>],
    u_list: &[Vec<f64>],
    opts: &TailOptions,
) -> Result<TailReport, TailError> {
    assert!(!u_list.is_empty());
    let chi = sol.s;
    let n = r_samples.len();
    let hill_k = if opts.hill_k == 0 {
        auto_hill_k(n)
    } else {
        opts.hill_k
    };
    let mut survival = Vec::with_capacity(u_list.len());
    let mut hill_readings = Vec::with_capacity(u_list.len());
    let mut slope_readings = Vec::with_capacity(u_list.len());
    for u in u_list {
        let proj = project(r_samples, u);
        survival.push(DirectionCurve {
            u: u.clone(),
            points: tail_curve(&proj, opts.window)?,
        });
        let h = hill_estimate(&proj, hill_k)?;
        hill_readings.push((h.chi_hat, h.chi_hat / (hill_k as f64).sqrt()));
        let rs = rank_slope(&proj, opts.window)?;
        slope_readings.push((rs.chi_hat, rs.slope_se));
    }
    let e_vals: Vec<f64> = u_list.iter().map(|u| sol.eval_e_formula(u)).collect();
    let direct = c_chi_direct(r_samples, u_list, chi, &e_vals, opts.window)?;
    let mut rng = scenario.rng(domain::TAIL, &[opts.formula_stream]);
    let formula = c_chi_formula(scenario, sol, alpha, &scenario.eta, r_samples, &mut rng)?;
    let defect = defect_g_curve(
        r_samples,
        ar_samples,
        scenario.n_branch,
        &u_list[0],
        &opts.t_grid,
        chi,
        e_vals[0],
    );
    Ok(TailReport {
        survival,
        hill_chi: pool_correlated(&hill_readings, Z95),
        hill_k,
        rank_slope_chi: pool_correlated(&slope_readings, T975_DF7),
        chi_spectral: chi,
        direction_profile: direct.per_direction.clone(),
        c_chi_formula: formula,
        c_chi_direct: direct.pooled,
        g_decay: GDecay {
            u: u_list[0].clone(),
            pos: defect.pos,
            neg: defect.neg,
        },
        alpha_chi: alpha,
    })
}
