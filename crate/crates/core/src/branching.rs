//! Monte Carlo construction of the fixed point on the weighted branching
//! tree: level sums W_n, partial sums R^(n), depth planning from the
//! geometric moment bound, and the distributional fixed-point and
//! uniqueness tests.
//!
//! All randomness is addressed: every tree node owns a stream derived
//! from its root hash and address, so a sample is a pure function of
//! (scenario seed, stream tag, sample index) no matter how work is
//! scheduled. One tree carries every level at once (the W_n share
//! ancestors), which also makes per-level differences exact per draw.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::cone;
use crate::grid::SphereGrid;
use crate::model::{Scenario, VectorLaw};
use crate::rng::{self, domain, NodeRng};
use crate::spectral::{self, SpectralError, SpectralSolution};
use crate::stats::{self, ks_statistic, mean_ci};

#[derive(Debug, Error)]
pub enum BranchingError {
    #[error("tree of {needed} nodes per sample exceeds the node budget {budget}")]
    BudgetExceeded { needed: u128, budget: u64 },
    #[error("no moment contraction at s = {s}: N kappa(s) = {n_kappa} >= 1")]
    NoContraction { s: f64, n_kappa: f64 },
    #[error("pilot decay fit too noisy: rate upper confidence {eta_hi} reaches 1")]
    PilotTooNoisy { eta_hi: f64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Work cap per sample; tree node counts are checked against it before
/// any sampling starts.
pub const DEFAULT_NODE_BUDGET: u64 = 1 << 27;

/// Relative slack used when comparing fitted geometric rates to the
/// spectral prediction N kappa(s).
pub const RATE_TOLERANCE: f64 = 0.15;

/// Salt separating a leaf-value stream from the node's A/B stream, so
/// attaching an initial condition never disturbs the tree draws.
const LEAF_SALT: u64 = 0x5EAF_5EED_0DD5_EA1F;

// Stream families inside the TREE domain. Roots are derived as
// (seed, TREE, [tag, family, sample index, ...]).
const FAM_R: u64 = 1;
const FAM_PILOT: u64 = 2;
const FAM_LEVELS: u64 = 3;
const FAM_FP2: u64 = 4;
const FAM_UNIQ: u64 = 5;
const FAM_UNIQ_IND: u64 = 6;
const FAM_CONV: u64 = 7;

/// Sum of N^j for j = 0..=depth, saturating instead of overflowing.
pub fn nodes_for_depth(n_branch: usize, depth: usize) -> u128 {
    let n = n_branch as u128;
    let mut total: u128 = 0;
    let mut pow: u128 = 1;
    for _ in 0..=depth {
        total = total.saturating_add(pow);
        pow = pow.saturating_mul(n);
    }
    total
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchingConfig {
    /// Truncation depth n_max of the partial sum R^(depth).
    pub depth: usize,
    pub samples: usize,
    /// Moment order used for truncation control and decay fits.
    pub s_for_bound: f64,
    pub target_truncation_error: f64,
    pub node_budget: u64,
}

impl BranchingConfig {
    pub fn new(depth: usize, samples: usize) -> Self {
        BranchingConfig {
            depth,
            samples,
            s_for_bound: 1.0,
            target_truncation_error: 1e-3,
            node_budget: DEFAULT_NODE_BUDGET,
        }
    }

    pub fn validate(&self, n_branch: usize) -> Result<(), BranchingError> {
        let needed = nodes_for_depth(n_branch, self.depth);
        if needed > self.node_budget as u128 {
            return Err(BranchingError::BudgetExceeded {
                needed,
                budget: self.node_budget,
            });
        }
        Ok(())
    }
}

/// One draw of R^(depth) with its per-level norms |W_0|, ..., |W_depth|.
#[derive(Debug, Clone, Serialize)]
pub struct FixedPointSample {
    pub r: Vec<f64>,
    pub per_level_norms: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WSample {
    pub w: Vec<f64>,
    pub node_count: u64,
}

struct Frame {
    hash: u64,
    level: u32,
    next_child: u32,
}

/// Depth-first sampler over the N-ary tree with flat arenas: a rolling
/// prefix product P_nu per level, level accumulators for the W_n, and
/// (optionally) accumulators for the starred terms W_n(R0*) built from a
/// salted per-leaf stream. No allocation happens per node.
pub struct TreeEngine<'a> {
    scenario: &'a Scenario,
    initial: Option<&'a VectorLaw>,
    depth: usize,
    dim: usize,
    dd: usize,
    prefix: Vec<f64>,
    levels: Vec<f64>,
    leafterms: Vec<f64>,
    mat_scratch: Vec<f64>,
    vec_scratch: Vec<f64>,
    stack: Vec<Frame>,
    node_count: u64,
    // hot-path caches: point-mass laws cost no draws at all
    b_const: Option<Vec<f64>>,
    init_const: Option<Vec<f64>>,
    atom_scalars: Option<Vec<f64>>,
}

impl<'a> TreeEngine<'a> {
    pub fn new(scenario: &'a Scenario, depth: usize, initial: Option<&'a VectorLaw>) -> Self {
        let dim = scenario.dim;
        if let Some(v) = initial.and_then(|law| law.is_point_mass()) {
            assert_eq!(v.len(), dim, "initial condition dimension mismatch");
        }
        let atom_scalars = if dim == 1 {
            scenario
                .mu
                .atoms()
                .map(|(atoms, _)| atoms.iter().map(|a| a.entries()[0]).collect())
        } else {
            None
        };
        TreeEngine {
            scenario,
            initial,
            depth,
            dim,
            dd: dim * dim,
            prefix: vec![0.0; (depth + 1) * dim * dim],
            levels: vec![0.0; (depth + 1) * dim],
            leafterms: vec![0.0; if initial.is_some() { (depth + 1) * dim } else { 0 }],
            mat_scratch: vec![0.0; dim * dim],
            vec_scratch: vec![0.0; dim],
            stack: Vec::with_capacity(depth + 1),
            node_count: 0,
            b_const: scenario.eta.is_point_mass().map(<[f64]>::to_vec),
            init_const: initial
                .and_then(|law| law.is_point_mass())
                .map(<[f64]>::to_vec),
            atom_scalars,
        }
    }

    /// Walk the whole tree below `root_hash`, refilling the accumulators.
    pub fn run(&mut self, root_hash: u64) {
        for v in self.levels.iter_mut() {
            *v = 0.0;
        }
        for v in self.leafterms.iter_mut() {
            *v = 0.0;
        }
        self.node_count = 0;
        let (d, dd) = (self.dim, self.dd);
        self.prefix[..dd].fill(0.0);
        for i in 0..d {
            self.prefix[i * d + i] = 1.0;
        }
        self.process_node(root_hash, 0);
        self.stack.clear();
        self.stack.push(Frame {
            hash: root_hash,
            level: 0,
            next_child: 0,
        });
        let n_branch = self.scenario.n_branch as u32;
        while let Some(top) = self.stack.last_mut() {
            if top.level as usize == self.depth || top.next_child == n_branch {
                self.stack.pop();
                continue;
            }
            let branch = top.next_child as usize;
            let level = top.level as usize + 1;
            let child = NodeRng::child_hash(top.hash, branch);
            top.next_child += 1;
            self.process_node(child, level);
            if level < self.depth {
                self.stack.push(Frame {
                    hash: child,
                    level: level as u32,
                    next_child: 0,
                });
            }
        }
    }

    // Per-node draws, in fixed order: the edge matrix A (levels > 0),
    // then B; an attached initial condition reads a salted side stream.
    // The streams are per-node, so skipping a point-mass draw here never
    // shifts what any other route reads from the same node.
    #[inline]
    fn process_node(&mut self, hash: u64, level: usize) {
        self.node_count += 1;
        if self.dim == 1 {
            return self.process_node_scalar(hash, level);
        }
        let scenario = self.scenario;
        let (d, dd) = (self.dim, self.dd);
        let mut nrng = NodeRng::from_hash(hash);
        if level > 0 {
            let (done, rest) = self.prefix.split_at_mut(level * dd);
            let parent = &done[(level - 1) * dd..];
            let out = &mut rest[..dd];
            if let Some((atoms, _)) = scenario.mu.atoms() {
                let u: f64 = nrng.gen();
                let a = atoms[scenario.mu.atom_index(u)].entries();
                mat_mul(d, parent, a, out);
            } else {
                scenario
                    .mu
                    .sample_entries_into(d, &mut self.mat_scratch, &mut nrng);
                mat_mul(d, parent, &self.mat_scratch, out);
            }
        }
        let b: &[f64] = match &self.b_const {
            Some(bc) => bc,
            None => {
                scenario.eta.sample_into(&mut self.vec_scratch, &mut nrng);
                &self.vec_scratch
            }
        };
        let p = &self.prefix[level * dd..level * dd + dd];
        mat_vec_acc(d, p, b, &mut self.levels[level * d..level * d + d]);
        if self.initial.is_some() {
            self.accumulate_leafterm(hash, level);
        }
    }

    fn accumulate_leafterm(&mut self, hash: u64, level: usize) {
        let (d, dd) = (self.dim, self.dd);
        let p = &self.prefix[level * dd..level * dd + dd];
        let v: &[f64] = match &self.init_const {
            Some(vc) => vc,
            None => {
                let mut lrng = NodeRng::from_hash(rng::mix(hash ^ LEAF_SALT));
                self.initial
                    .expect("caller checked")
                    .sample_into(&mut self.vec_scratch, &mut lrng);
                &self.vec_scratch
            }
        };
        mat_vec_acc(d, p, v, &mut self.leafterms[level * d..level * d + d]);
    }

    // d = 1 without the matrix scaffolding; the scalar heavy-tail runs
    // walk enough nodes that slice bookkeeping shows up in profiles.
    #[inline]
    fn process_node_scalar(&mut self, hash: u64, level: usize) {
        let scenario = self.scenario;
        let mut nrng = NodeRng::from_hash(hash);
        if level > 0 {
            let a = match &self.atom_scalars {
                Some(vals) => {
                    let u: f64 = nrng.gen();
                    vals[scenario.mu.atom_index(u)]
                }
                None => {
                    scenario
                        .mu
                        .sample_entries_into(1, &mut self.mat_scratch, &mut nrng);
                    self.mat_scratch[0]
                }
            };
            self.prefix[level] = self.prefix[level - 1] * a;
        }
        let b = match &self.b_const {
            Some(bc) => bc[0],
            None => {
                scenario.eta.sample_into(&mut self.vec_scratch, &mut nrng);
                self.vec_scratch[0]
            }
        };
        let p = self.prefix[level];
        self.levels[level] += p * b;
        if let Some(init) = self.initial {
            let v = match &self.init_const {
                Some(vc) => vc[0],
                None => {
                    let mut lrng = NodeRng::from_hash(rng::mix(hash ^ LEAF_SALT));
                    init.sample_into(&mut self.vec_scratch, &mut lrng);
                    self.vec_scratch[0]
                }
            };
            self.leafterms[level] += p * v;
        }
    }

    pub fn node_count(&self) -> u64 {
        self.node_count
    }

    /// Level sum W_k of the last run.
    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k * self.dim..(k + 1) * self.dim]
    }

    /// Starred term W_k(R0*) of the last run; only with an initial law.
    pub fn leafterm(&self, k: usize) -> &[f64] {
        assert!(self.initial.is_some(), "no initial condition attached");
        &self.leafterms[k * self.dim..(k + 1) * self.dim]
    }

    /// R^(n) = W_0 + ... + W_n, accumulated in level order.
    pub fn partial_sum(&self, n: usize) -> Vec<f64> {
        let d = self.dim;
        let mut r = vec![0.0; d];
        for k in 0..=n {
            let lvl = self.level(k);
            for i in 0..d {
                r[i] += lvl[i];
            }
        }
        r
    }

    /// Starred iterate R*_n = W_0 + ... + W_{n-1} + W_n(R0*): the level
    /// route of the decomposition identity.
    pub fn starred_value(&self, n: usize) -> Vec<f64> {
        let d = self.dim;
        let mut r = vec![0.0; d];
        for k in 0..n {
            let lvl = self.level(k);
            for i in 0..d {
                r[i] += lvl[i];
            }
        }
        let leaf = self.leafterm(n);
        for i in 0..d {
            r[i] += leaf[i];
        }
        r
    }

    pub fn fixed_point_sample(&self) -> FixedPointSample {
        let d = self.dim;
        let mut r = vec![0.0; d];
        let mut norms = Vec::with_capacity(self.depth + 1);
        for k in 0..=self.depth {
            let lvl = self.level(k);
            for i in 0..d {
                r[i] += lvl[i];
            }
            norms.push(cone::norm(lvl));
        }
        FixedPointSample {
            r,
            per_level_norms: norms,
        }
    }
}

#[inline]
fn mat_mul(d: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = acc;
        }
    }
}

#[inline]
fn mat_vec_acc(d: usize, m: &[f64], x: &[f64], acc: &mut [f64]) {
    for i in 0..d {
        let mut t = 0.0;
        for j in 0..d {
            t += m[i * d + j] * x[j];
        }
        acc[i] += t;
    }
}

/// Parallel map over one-tree samples with per-sample derived roots.
/// Collection preserves index order, so downstream pairwise sums see a
/// fixed operand order no matter the worker count.
fn tree_population<T, F, R>(
    scenario: &Scenario,
    depth: usize,
    initial: Option<&VectorLaw>,
    samples: usize,
    root_of: R,
    extract: F,
) -> Vec<T>
where
    T: Send,
    F: Fn(&TreeEngine) -> T + Sync,
    R: Fn(u64) -> u64 + Sync,
{
    (0..samples as u64)
        .into_par_iter()
        .map_init(
            || TreeEngine::new(scenario, depth, initial),
            |eng, i| {
                eng.run(root_of(i));
                extract(eng)
            },
        )
        .collect()
}

/// One exact draw of the level sum W_n.
pub fn sample_w(
    scenario: &Scenario,
    n: usize,
    node_budget: u64,
    rng: &mut impl Rng,
) -> Result<WSample, BranchingError> {
    let needed = nodes_for_depth(scenario.n_branch, n);
    if needed > node_budget as u128 {
        return Err(BranchingError::BudgetExceeded {
            needed,
            budget: node_budget,
        });
    }
    let mut eng = TreeEngine::new(scenario, n, None);
    eng.run(rng.next_u64());
    Ok(WSample {
        w: eng.level(n).to_vec(),
        node_count: eng.node_count(),
    })
}

/// One draw of R^(depth) with per-level diagnostics, all levels from a
/// single shared tree.
pub fn sample_r(
    scenario: &Scenario,
    config: &BranchingConfig,
    rng: &mut impl Rng,
) -> Result<FixedPointSample, BranchingError> {
    config.validate(scenario.n_branch)?;
    let mut eng = TreeEngine::new(scenario, config.depth, None);
    eng.run(rng.next_u64());
    Ok(eng.fixed_point_sample())
}

/// Population of R^(depth) draws; sample i is a pure function of
/// (scenario seed, stream, i).
pub fn sample_r_population(
    scenario: &Scenario,
    config: &BranchingConfig,
    stream: u64,
) -> Result<Vec<FixedPointSample>, BranchingError> {
    config.validate(scenario.n_branch)?;
    let seed = scenario.seed;
    Ok(tree_population(
        scenario,
        config.depth,
        None,
        config.samples,
        |i| rng::derive_seed(seed, domain::TREE, &[stream, FAM_R, i]),
        |eng| eng.fixed_point_sample(),
    ))
}

/// Population mapped through `f` at the sample site, for large runs
/// where storing every FixedPointSample would be wasteful.
pub fn sample_r_map<T, F>(
    scenario: &Scenario,
    config: &BranchingConfig,
    stream: u64,
    f: F,
) -> Result<Vec<T>, BranchingError>
where
    T: Send,
    F: Fn(FixedPointSample) -> T + Sync,
{
    config.validate(scenario.n_branch)?;
    let seed = scenario.seed;
    Ok(tree_population(
        scenario,
        config.depth,
        None,
        config.samples,
        |i| rng::derive_seed(seed, domain::TREE, &[stream, FAM_R, i]),
        |eng| f(eng.fixed_point_sample()),
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelMoment {
    pub n: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

// Per-level estimates of E|W_n|^s (or of the starred terms when an
// initial law is attached) from `samples` shared trees of depth n_max.
fn level_moment_rows(
    scenario: &Scenario,
    s: f64,
    n_max: usize,
    samples: usize,
    initial: Option<&VectorLaw>,
    tag: u64,
    family: u64,
) -> Vec<LevelMoment> {
    let seed = scenario.seed;
    let starred = initial.is_some();
    let per_sample: Vec<Vec<f64>> = tree_population(
        scenario,
        n_max,
        initial,
        samples,
        |i| rng::derive_seed(seed, domain::TREE, &[tag, family, i]),
        |eng| {
            (0..=n_max)
                .map(|k| {
                    let v = if starred { eng.leafterm(k) } else { eng.level(k) };
                    cone::norm(v).powf(s)
                })
                .collect()
        },
    );
    let mut scratch = vec![0.0; samples];
    (0..=n_max)
        .map(|k| {
            for (dst, row) in scratch.iter_mut().zip(&per_sample) {
                *dst = row[k];
            }
            let ci = mean_ci(&scratch, stats::Z95);
            LevelMoment {
                n: k,
                mean: ci.mean,
                ci_lo: ci.lo,
                ci_hi: ci.hi,
            }
        })
        .collect()
}

// Geometric rate exp(slope) of ln(mean) against n over n = 1..=n_max,
// weighted by the inverse variance of ln(mean): deep levels of
// heavy-tailed laws carry hardly any signal, and an unweighted fit
// would hand them the slope (and its rare-path downward bias).
fn fit_rate(rows: &[LevelMoment]) -> stats::LineFit {
    let xs: Vec<f64> = rows.iter().skip(1).map(|r| r.n as f64).collect();
    let ys: Vec<f64> = rows.iter().skip(1).map(|r| r.mean.ln()).collect();
    let ws: Vec<f64> = rows
        .iter()
        .skip(1)
        .map(|r| {
            // delta method: se(ln mean) = se(mean) / mean
            let rel_se = (r.ci_hi - r.ci_lo) / (2.0 * stats::Z95 * r.mean);
            1.0 / rel_se.max(1e-9).powi(2)
        })
        .collect();
    stats::fit_line_weighted(&xs, &ys, &ws)
}

pub const PILOT_DEPTH: usize = 6;
pub const PILOT_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, Serialize)]
pub struct PlanReport {
    pub s: f64,
    pub n_kappa: f64,
    /// Fitted geometric rate of E|W_n|^s from the pilot.
    pub eta_hat: f64,
    /// Two-standard-error upper confidence for eta_hat.
    pub eta_hi: f64,
    pub k_hat: f64,
    pub depth: usize,
    pub nodes_per_sample: u64,
    pub pilot: Vec<LevelMoment>,
}

/// Least depth whose truncation tail bound drops below eps in the
/// s-metric: pilot-fit K_s and eta, then walk the bound
/// K eta^{n+1}/(1-eta) <= eps^s (for s <= 1; the s > 1 form replaces the
/// denominator by (1 - eta^(1/s))^s following the triangle inequality in
/// the contraction argument).
pub fn plan_depth(
    scenario: &Scenario,
    solution: &SpectralSolution,
    s: f64,
    eps: f64,
    node_budget: u64,
) -> Result<PlanReport, BranchingError> {
    let kappa = if (solution.s - s).abs() <= 1e-12 {
        solution.kappa
    } else {
        spectral::kappa_grid(scenario, &solution.grid, s)?
    };
    let n_kappa = scenario.n_branch as f64 * kappa;
    if !(n_kappa < 1.0) {
        return Err(BranchingError::NoContraction { s, n_kappa });
    }
    let pilot = level_moment_rows(scenario, s, PILOT_DEPTH, PILOT_SAMPLES, None, 0, FAM_PILOT);
    let fit = fit_rate(&pilot);
    let eta_hat = fit.slope.exp();
    let eta_hi = (fit.slope + 2.0 * fit.slope_se).exp();
    if eta_hi >= 1.0 {
        return Err(BranchingError::PilotTooNoisy { eta_hi });
    }
    let k_hat = fit.intercept.exp();
    let target = eps.powf(s);
    let denom = if s <= 1.0 {
        1.0 - eta_hat
    } else {
        (1.0 - eta_hat.powf(1.0 / s)).powf(s)
    };
    let mut depth = 0usize;
    while k_hat * eta_hat.powi(depth as i32 + 1) / denom > target {
        depth += 1;
        // eta_hat < 1 makes the bound vanish; the cap is pure paranoia
        assert!(depth <= 100_000, "tail bound failed to shrink");
    }
    let needed = nodes_for_depth(scenario.n_branch, depth);
    if needed > node_budget as u128 {
        return Err(BranchingError::BudgetExceeded {
            needed,
            budget: node_budget,
        });
    }
    Ok(PlanReport {
        s,
        n_kappa,
        eta_hat,
        eta_hi,
        k_hat,
        depth,
        nodes_per_sample: needed as u64,
        pilot,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentDecayReport {
    pub s: f64,
    pub rows: Vec<LevelMoment>,
    pub fitted_rate: f64,
    pub rate_se: f64,
    /// Spectral prediction N kappa(s); None when the law admits no
    /// grid transfer operator.
    pub n_kappa: Option<f64>,
    /// Fitted rate above N kappa(s) (1 + RATE_TOLERANCE).
    pub exceeds_bound: bool,
}

/// Per-level moment decay study with the spectral comparison attached.
pub fn moment_decay_study(
    scenario: &Scenario,
    s: f64,
    n_max: usize,
    samples: usize,
    node_budget: u64,
    rng: &mut impl Rng,
) -> Result<MomentDecayReport, BranchingError> {
    let needed = nodes_for_depth(scenario.n_branch, n_max);
    if needed > node_budget as u128 {
        return Err(BranchingError::BudgetExceeded {
            needed,
            budget: node_budget,
        });
    }
    let tag = rng.next_u64();
    let rows = level_moment_rows(scenario, s, n_max, samples, None, tag, FAM_LEVELS);
    let fit = fit_rate(&rows);
    let (fitted_rate, rate_se) = (fit.slope.exp(), fit.slope_se);
    let n_kappa = match spectral::kappa_grid(scenario, &default_grid(scenario.dim), s) {
        Ok(k) => Some(scenario.n_branch as f64 * k),
        Err(SpectralError::UnsupportedLaw(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let exceeds_bound = match n_kappa {
        Some(nk) => fitted_rate > nk * (1.0 + RATE_TOLERANCE),
        None => false,
    };
    Ok(MomentDecayReport {
        s,
        rows,
        fitted_rate,
        rate_se,
        n_kappa,
        exceeds_bound,
    })
}

fn default_grid(dim: usize) -> Arc<SphereGrid> {
    let k = match dim {
        1 => 1,
        2 => 192,
        3 => 24,
        _ => 256,
    };
    Arc::new(SphereGrid::new(dim, k))
}

/// Directions for projection tests: the canonical axes plus the
/// normalized diagonal.
pub fn default_directions(dim: usize) -> Vec<Vec<f64>> {
    if dim == 1 {
        return vec![vec![1.0]];
    }
    let mut dirs = Vec::with_capacity(dim + 1);
    for i in 0..dim {
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        dirs.push(e);
    }
    dirs.push(vec![1.0 / (dim as f64).sqrt(); dim]);
    dirs
}

fn project(pop: &[Vec<f64>], u: &[f64]) -> Vec<f64> {
    pop.iter().map(|r| cone::dot(r, u)).collect()
}

/// 99% two-sample KS null quantile for equal sample sizes.
pub fn ks_null_quantile_99(samples: usize) -> f64 {
    // c(alpha) = sqrt(-ln(alpha/2)/2) with alpha = 0.01
    1.627_624_301_4 * (2.0 / samples as f64).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedPointReport {
    pub depth: usize,
    pub samples: usize,
    pub directions: Vec<Vec<f64>>,
    /// Two-sample KS distance per direction between R^(depth) draws and
    /// one recursion step applied to fresh R^(depth-1) draws.
    pub ks: Vec<f64>,
    pub ks_null_99: f64,
}

/// Distributional fixed-point check: population P1 of R^(depth) against
/// population P2 of sum_k A_k R^(depth-1)_k + B with fresh independent
/// draws; the depths match so both sides truncate at the same level.
pub fn fixed_point_test(
    scenario: &Scenario,
    config: &BranchingConfig,
    samples: usize,
    u_list: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<FixedPointReport, BranchingError> {
    config.validate(scenario.n_branch)?;
    let depth = config.depth;
    let tag = rng.next_u64();
    let seed = scenario.seed;
    let d = scenario.dim;
    let p1: Vec<Vec<f64>> = tree_population(
        scenario,
        depth,
        None,
        samples,
        |i| rng::derive_seed(seed, domain::TREE, &[tag, FAM_R, i]),
        |eng| eng.partial_sum(depth),
    );
    let child_depth = depth.saturating_sub(1);
    let p2: Vec<Vec<f64>> = (0..samples as u64)
        .into_par_iter()
        .map_init(
            || TreeEngine::new(scenario, child_depth, None),
            |eng, i| {
                let mut wrapper = NodeRng::from_hash(rng::derive_seed(
                    seed,
                    domain::TREE,
                    &[tag, FAM_FP2, i, 0],
                ));
                let mut acc = vec![0.0; d];
                for k in 1..=scenario.n_branch as u64 {
                    let a = scenario.mu.sample(d, &mut wrapper);
                    if depth >= 1 {
                        eng.run(rng::derive_seed(seed, domain::TREE, &[tag, FAM_FP2, i, k]));
                        let rk = eng.partial_sum(child_depth);
                        let ark = a.matvec(&rk);
                        for (ai, vi) in acc.iter_mut().zip(&ark) {
                            *ai += vi;
                        }
                    }
                }
                let b = scenario.eta.sample(d, &mut wrapper);
                for (ai, bi) in acc.iter_mut().zip(&b) {
                    *ai += bi;
                }
                acc
            },
        )
        .collect();
    let ks = u_list
        .iter()
        .map(|u| ks_statistic(&project(&p1, u), &project(&p2, u)))
        .collect();
    Ok(FixedPointReport {
        depth,
        samples,
        directions: u_list.to_vec(),
        ks,
        ks_null_99: ks_null_quantile_99(samples),
    })
}

// Recursive fold of the iterated affine maps: the value of R*_depth
// computed bottom-up from the same per-node streams the engine reads.
// Allocates per node, so it serves as the slow dual route in tests.
fn fold_node(
    scenario: &Scenario,
    initial: &VectorLaw,
    hash: u64,
    level: usize,
    depth: usize,
) -> Vec<f64> {
    let d = scenario.dim;
    let mut nrng = NodeRng::from_hash(hash);
    let a = if level > 0 {
        Some(scenario.mu.sample(d, &mut nrng))
    } else {
        None
    };
    let val = if level == depth {
        let mut lrng = NodeRng::from_hash(rng::mix(hash ^ LEAF_SALT));
        initial.sample(d, &mut lrng)
    } else {
        let mut v = scenario.eta.sample(d, &mut nrng);
        for k in 0..scenario.n_branch {
            let child = fold_node(
                scenario,
                initial,
                NodeRng::child_hash(hash, k),
                level + 1,
                depth,
            );
            for (vi, ci) in v.iter_mut().zip(&child) {
                *vi += ci;
            }
        }
        v
    };
    match a {
        Some(a) => a.matvec(&val),
        None => val,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UniquenessReport {
    pub depth: usize,
    pub samples: usize,
    /// Worst relative gap between the folded iterate R*_n and its level
    /// decomposition R^(n-1) + W_n(R0*) on coupled draws.
    pub max_decomposition_gap: f64,
    /// KS between the two routes on coupled draws (float noise only).
    pub ks_coupled: f64,
    /// KS between the routes on independent draws: the distributional
    /// identity proper.
    pub ks_independent: f64,
    pub ks_null_99: f64,
    /// E|W_n(R0*)|^s per level.
    pub leaf_moments: Vec<LevelMoment>,
    pub leaf_rate: f64,
    pub n_kappa: Option<f64>,
    pub rate_within_tolerance: bool,
}

/// Uniqueness diagnostics: iterate the recursion from an arbitrary
/// initial condition and check the decomposition identity two ways
/// (coupled, where it holds per sample up to float rearrangement, and
/// on independent populations via KS), plus the geometric decay of the
/// starred terms.
pub fn uniqueness_coupling_test(
    scenario: &Scenario,
    config: &BranchingConfig,
    initial_law: &VectorLaw,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<UniquenessReport, BranchingError> {
    config.validate(scenario.n_branch)?;
    let n = config.depth;
    let s = config.s_for_bound;
    let seed = scenario.seed;
    let tag = rng.next_u64();
    let dirs = default_directions(scenario.dim);

    struct CoupledDraw {
        starred: Vec<f64>,
        folded: Vec<f64>,
        leaf_pows: Vec<f64>,
    }
    let coupled: Vec<CoupledDraw> = (0..samples as u64)
        .into_par_iter()
        .map_init(
            || TreeEngine::new(scenario, n, Some(initial_law)),
            |eng, i| {
                let root = rng::derive_seed(seed, domain::TREE, &[tag, FAM_UNIQ, i]);
                eng.run(root);
                CoupledDraw {
                    starred: eng.starred_value(n),
                    folded: fold_node(scenario, initial_law, root, 0, n),
                    leaf_pows: (0..=n).map(|k| cone::norm(eng.leafterm(k)).powf(s)).collect(),
                }
            },
        )
        .collect();
    let mut max_gap = 0.0f64;
    for cd in &coupled {
        let diff: Vec<f64> = cd
            .starred
            .iter()
            .zip(&cd.folded)
            .map(|(a, b)| a - b)
            .collect();
        let gap = cone::norm(&diff) / (1.0 + cone::norm(&cd.starred));
        max_gap = max_gap.max(gap);
    }
    let starred_pop: Vec<Vec<f64>> = coupled.iter().map(|c| c.starred.clone()).collect();
    let folded_pop: Vec<Vec<f64>> = coupled.iter().map(|c| c.folded.clone()).collect();
    let ks_coupled = dirs
        .iter()
        .map(|u| ks_statistic(&project(&starred_pop, u), &project(&folded_pop, u)))
        .fold(0.0f64, f64::max);

    let lhs: Vec<Vec<f64>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let root = rng::derive_seed(seed, domain::TREE, &[tag, FAM_UNIQ_IND, i, 0]);
            fold_node(scenario, initial_law, root, 0, n)
        })
        .collect();
    let rhs: Vec<Vec<f64>> = tree_population(
        scenario,
        n,
        Some(initial_law),
        samples,
        |i| rng::derive_seed(seed, domain::TREE, &[tag, FAM_UNIQ_IND, i, 1]),
        |eng| eng.starred_value(n),
    );
    let ks_independent = dirs
        .iter()
        .map(|u| ks_statistic(&project(&lhs, u), &project(&rhs, u)))
        .fold(0.0f64, f64::max);

    let mut scratch = vec![0.0; samples];
    let leaf_moments: Vec<LevelMoment> = (0..=n)
        .map(|k| {
            for (dst, cd) in scratch.iter_mut().zip(&coupled) {
                *dst = cd.leaf_pows[k];
            }
            let ci = mean_ci(&scratch, stats::Z95);
            LevelMoment {
                n: k,
                mean: ci.mean,
                ci_lo: ci.lo,
                ci_hi: ci.hi,
            }
        })
        .collect();
    let leaf_rate = if leaf_moments.iter().skip(1).all(|r| r.mean > 0.0) {
        fit_rate(&leaf_moments).slope.exp()
    } else {
        // an exactly-zero initial condition leaves nothing to fit
        0.0
    };
    let n_kappa = match spectral::kappa_grid(scenario, &default_grid(scenario.dim), s) {
        Ok(k) => Some(scenario.n_branch as f64 * k),
        Err(SpectralError::UnsupportedLaw(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let rate_within_tolerance = match n_kappa {
        Some(nk) => (leaf_rate - nk).abs() <= RATE_TOLERANCE * nk,
        None => true,
    };
    Ok(UniquenessReport {
        depth: n,
        samples,
        max_decomposition_gap: max_gap,
        ks_coupled,
        ks_independent,
        ks_null_99: ks_null_quantile_99(samples),
        leaf_moments,
        leaf_rate,
        n_kappa,
        rate_within_tolerance,
    })
}

/// KS distance between the iterates R*_n started from two different
/// initial laws, on coupled trees (only the leaf draws differ), for each
/// requested depth. Forgetting the initial condition shows up as a
/// decreasing trend.
pub fn initial_law_convergence(
    scenario: &Scenario,
    depths: &[usize],
    law_a: &VectorLaw,
    law_b: &VectorLaw,
    samples: usize,
    node_budget: u64,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, f64)>, BranchingError> {
    let tag = rng.next_u64();
    let seed = scenario.seed;
    let diag = vec![1.0 / (scenario.dim as f64).sqrt(); scenario.dim];
    let mut out = Vec::with_capacity(depths.len());
    for &n in depths {
        let needed = nodes_for_depth(scenario.n_branch, n);
        if needed > node_budget as u128 {
            return Err(BranchingError::BudgetExceeded {
                needed,
                budget: node_budget,
            });
        }
        let root_of =
            |i: u64| rng::derive_seed(seed, domain::TREE, &[tag, FAM_CONV, n as u64, i]);
        let pop_a: Vec<f64> = tree_population(scenario, n, Some(law_a), samples, root_of, |eng| {
            cone::dot(&eng.starred_value(n), &diag)
        });
        let pop_b: Vec<f64> = tree_population(scenario, n, Some(law_b), samples, root_of, |eng| {
            cone::dot(&eng.starred_value(n), &diag)
        });
        out.push((n, ks_statistic(&pop_a, &pop_b)));
    }
    Ok(out)
}
