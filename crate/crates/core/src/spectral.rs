//! Discretized transfer operators on the positive sphere.
//!
//! For a finitely supported matrix law the operator
//! P^s f(x) = E |A x|^s f(A·x) restricts to grid functions once the image
//! point A·x is rewritten as a convex combination of nodes. Power iteration
//! on the resulting nonnegative matrix yields kappa(s) together with the
//! eigenfunction e^s (right) and eigenmeasure nu^s (left); the starred
//! operator uses the transposed atoms. Everything downstream (tail index
//! chi, Lyapunov exponent alpha, tilted chain) is built from these tables.
//!
//! The discretization keeps a single e^s table for both the plain and the
//! starred kernels. e^s is an exact eigenfunction of P^s only, so starred
//! kernel rows are renormalized where a probability kernel is required and
//! the renormalization defect is reported as `stochasticity_residual`. For
//! laws with symmetric atoms the two operators coincide and the defect is
//! at the level of the eigen residual.

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::cone::{self, ConeError, PositiveMatrix};
use crate::grid::SphereGrid;
use crate::model::{ModelError, Scenario};
use crate::rng::domain;
use crate::stats::{self, MeanCi};

type Matrix = PositiveMatrix<f64>;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("law not supported by the discretized operator: {0}")]
    UnsupportedLaw(String),
    #[error("eigen iteration failed to converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error(
        "leading eigenvalue pair degenerate on the mesh (contraction ratio {ratio:.6})"
    )]
    DegenerateLeadingPair { ratio: f64 },
    #[error("N*kappa(s) never crosses 1 on [{lo}, {hi}] ({evaluated} points)")]
    NoBracket {
        lo: f64,
        hi: f64,
        evaluated: usize,
        curve: Vec<(f64, f64)>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cone computation failed: {0}")]
    Cone(ConeError),
}

impl From<ConeError> for SpectralError {
    fn from(e: ConeError) -> Self {
        match e {
            ConeError::NotProximal { ratio, .. } => {
                SpectralError::DegenerateLeadingPair { ratio }
            }
            ConeError::NonConvergence(iterations) => {
                SpectralError::NonConvergence { iterations }
            }
            other => SpectralError::Cone(other),
        }
    }
}

/// Default relative tolerance for eigen iterations.
pub const EIGEN_TOL: f64 = 1e-13;

/// Two independently started power iterations must land on the same
/// direction; a larger split marks a non-unique leading eigenvector.
const RESTART_SPLIT_TOL: f64 = 1e-6;

/// Dense grid restriction of P^s (or P^s_* when `starred`).
#[derive(Debug, Clone)]
pub struct TransferOperator {
    s: f64,
    starred: bool,
    size: usize,
    m: Vec<f64>,
    grid: Arc<SphereGrid>,
}

impl TransferOperator {
    /// M[i][j] = sum over atoms of p |a x_i|^s w_ij(a), with w the
    /// interpolation weights of the image direction a·x_i.
    pub fn build(
        scenario: &Scenario,
        grid: &Arc<SphereGrid>,
        s: f64,
        starred: bool,
    ) -> Result<Self, SpectralError> {
        let (atoms, probs) = scenario.mu.atoms().ok_or_else(|| {
            SpectralError::UnsupportedLaw(
                "transfer operator needs a finitely supported matrix law".into(),
            )
        })?;
        let k = grid.len();
        let mut m = vec![0.0; k * k];
        let mut owned: Vec<Matrix>;
        let atoms: &[Matrix] = if starred {
            owned = Vec::with_capacity(atoms.len());
            for a in atoms {
                owned.push(a.transpose());
            }
            &owned
        } else {
            atoms
        };
        for i in 0..k {
            let x = grid.node(i);
            for (a, &p) in atoms.iter().zip(probs) {
                let y = a.matvec(x);
                let r = cone::norm(&y);
                if r <= 0.0 {
                    return Err(SpectralError::Cone(ConeError::ZeroImage));
                }
                let dir: Vec<f64> = y.iter().map(|v| v / r).collect();
                let coeff = p * r.powf(s);
                for (j, w) in grid.interpolate(&dir).iter() {
                    m[i * k + j] += coeff * w;
                }
            }
        }
        Ok(TransferOperator {
            s,
            starred,
            size: k,
            m,
            grid: Arc::clone(grid),
        })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn starred(&self) -> bool {
        self.starred
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn grid(&self) -> &Arc<SphereGrid> {
        &self.grid
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.size + j]
    }

    /// (M f)(x_i), the grid restriction of P^s f.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let k = self.size;
        (0..k)
            .map(|i| {
                let row = &self.m[i * k..(i + 1) * k];
                row.iter().zip(f).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// Adjoint action on weights: (w M)_j.
    pub fn apply_transpose(&self, w: &[f64]) -> Vec<f64> {
        let k = self.size;
        let mut out = vec![0.0; k];
        for i in 0..k {
            let row = &self.m[i * k..(i + 1) * k];
            let wi = w[i];
            if wi != 0.0 {
                for j in 0..k {
                    out[j] += wi * row[j];
                }
            }
        }
        out
    }
}

/// Leading eigendata of one transfer operator.
#[derive(Debug, Clone, Serialize)]
pub struct EigenPair {
    pub kappa: f64,
    /// Right eigenvector, max-normalized to 1.
    pub e_fun: Vec<f64>,
    /// Left eigenweights, normalized to sum 1.
    pub nu: Vec<f64>,
    /// max(‖Me − κe‖∞, ‖Mᵀν − κν‖∞) / κ
    pub eigen_residual: f64,
    /// Power-iteration contraction ratio, a |λ₂|/λ₁ estimate.
    pub gap_ratio: f64,
    pub iterations: usize,
    /// Leading eigenvector not unique on the mesh; the flat canonical
    /// representative (e ≡ 1, ν uniform) is reported instead.
    pub degenerate: bool,
}

/// Power iteration (right) plus adjoint iteration (left). A second,
/// independently started right iteration detects non-simple leading
/// eigenspaces: scaled-identity-like operators converge instantly from any
/// start, so agreement of two starts is the actual uniqueness test.
pub fn solve_eigen(op: &TransferOperator, tol: f64) -> Result<EigenPair, SpectralError> {
    let k = op.size();
    let first = cone::dominant_pair(|v: &[f64]| op.apply(v), k, tol, 0)?;
    let second = cone::dominant_pair(|v: &[f64]| op.apply(v), k, tol, 1)?;
    let split = first
        .vector
        .iter()
        .zip(&second.vector)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    let degenerate = split > RESTART_SPLIT_TOL;
    let kappa = first.lambda;
    let (e_fun, nu, iterations) = if degenerate {
        (vec![1.0; k], vec![1.0 / k as f64; k], first.iterations)
    } else {
        let left = cone::dominant_pair(|v: &[f64]| op.apply_transpose(v), k, tol, 0)?;
        let e_max = first.vector.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = first.vector.iter().map(|v| v / e_max).collect();
        let w_sum: f64 = left.vector.iter().sum();
        let nu: Vec<f64> = left.vector.iter().map(|v| v / w_sum).collect();
        (e, nu, first.iterations + left.iterations)
    };
    let res_right = residual_inf(op, &e_fun, kappa, false);
    let res_left = residual_inf(op, &nu, kappa, true);
    Ok(EigenPair {
        kappa,
        e_fun,
        nu,
        eigen_residual: res_right.max(res_left) / kappa,
        gap_ratio: first.ratio,
        iterations,
        degenerate,
    })
}

fn residual_inf(op: &TransferOperator, v: &[f64], kappa: f64, transpose: bool) -> f64 {
    let image = if transpose {
        op.apply_transpose(v)
    } else {
        op.apply(v)
    };
    image
        .iter()
        .zip(v)
        .map(|(y, x)| (y - kappa * x).abs())
        .fold(0.0_f64, f64::max)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpectralResiduals {
    /// Relative sup-norm eigen residual, worst of the four iterations.
    pub eigen_residual: f64,
    /// Worst row-sum defect of the normalized kernels Q^s and Q^s_*.
    pub stochasticity_residual: f64,
    /// |κ_* − κ| / κ; the two operators share their leading eigenvalue.
    pub kappa_star_gap: f64,
    /// Set by curve-level checks (solve_chi); None for single-s solves.
    pub logconvexity_flag: Option<bool>,
}

/// Eigendata of P^s and P^s_* at one s, with the derived stationary laws.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralSolution {
    pub s: f64,
    pub kappa: f64,
    /// e^s on nodes, max = 1; shared between plain and starred kernels.
    pub e_fun: Vec<f64>,
    pub nu: Vec<f64>,
    pub pi: Vec<f64>,
    pub nu_star: Vec<f64>,
    pub pi_star: Vec<f64>,
    /// min e^s / max e^s
    pub r_s: f64,
    pub residuals: SpectralResiduals,
    pub degenerate: bool,
    #[serde(skip)]
    pub grid: Arc<SphereGrid>,
}

impl SpectralSolution {
    /// Interpolated e^s at an arbitrary unit point.
    pub fn eval_e(&self, p: &[f64]) -> f64 {
        self.grid.eval(&self.e_fun, p)
    }

    /// e^s(u) through the integral formula sum_j nu*_j <u, y_j>^s.
    pub fn eval_e_formula(&self, u: &[f64]) -> f64 {
        self.grid
            .nodes()
            .iter()
            .zip(&self.nu_star)
            .map(|(y, w)| w * cone::dot(u, y).max(0.0).powf(self.s))
            .sum()
    }
}

/// Full spectral solve at one s: both operators, shared eigenfunction,
/// stationary measures pi = e·nu / nu(e) on both sides.
pub fn solve_spectral(
    scenario: &Scenario,
    grid: &Arc<SphereGrid>,
    s: f64,
    tol: f64,
) -> Result<SpectralSolution, SpectralError> {
    let op = TransferOperator::build(scenario, grid, s, false)?;
    let op_star = TransferOperator::build(scenario, grid, s, true)?;
    let eig = solve_eigen(&op, tol)?;
    let eig_star = solve_eigen(&op_star, tol)?;
    let kappa = eig.kappa;
    let e_fun = eig.e_fun;
    let nu = eig.nu;
    let nu_star = eig_star.nu;
    let pi = weight_by(&e_fun, &nu);
    let pi_star = weight_by(&e_fun, &nu_star);
    let r_s = e_fun.iter().cloned().fold(f64::MAX, f64::min)
        / e_fun.iter().cloned().fold(f64::MIN, f64::max);
    let sto = row_defect(&op, kappa, &e_fun).max(row_defect(&op_star, kappa, &e_fun));
    let residuals = SpectralResiduals {
        eigen_residual: eig.eigen_residual.max(eig_star.eigen_residual),
        stochasticity_residual: sto,
        kappa_star_gap: (eig_star.kappa - kappa).abs() / kappa,
        logconvexity_flag: None,
    };
    Ok(SpectralSolution {
        s,
        kappa,
        e_fun,
        nu,
        pi,
        nu_star,
        pi_star,
        r_s,
        residuals,
        degenerate: eig.degenerate || eig_star.degenerate,
        grid: Arc::clone(grid),
    })
}

fn weight_by(e: &[f64], nu: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = e.iter().zip(nu).map(|(a, b)| a * b).collect();
    let total: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= total;
    }
    out
}

/// Worst |sum_j M_ij e_j / (κ e_i) − 1| over rows: how far the normalized
/// kernel is from a probability kernel.
fn row_defect(op: &TransferOperator, kappa: f64, e: &[f64]) -> f64 {
    let k = op.size();
    let image = op.apply(e);
    (0..k)
        .map(|i| (image[i] / (kappa * e[i]) - 1.0).abs())
        .fold(0.0_f64, f64::max)
}

/// Max relative deviation between the iterated eigenfunction and the
/// integral formula ẽ(x) = Σ_j ν*_j ⟨x, y_j⟩^s, after the best scalar
/// rescaling. None when the leading pair is degenerate: the formula needs
/// a unique ν*, which those laws do not have.
pub fn eigenfunction_formula_check(sol: &SpectralSolution) -> Option<f64> {
    if sol.degenerate {
        return None;
    }
    let tilde: Vec<f64> = sol
        .grid
        .nodes()
        .iter()
        .map(|x| sol.eval_e_formula(x))
        .collect();
    // L2-optimal scale
    let num: f64 = tilde.iter().zip(&sol.e_fun).map(|(t, e)| t * e).sum();
    let den: f64 = tilde.iter().map(|t| t * t).sum();
    let c = num / den;
    Some(
        tilde
            .iter()
            .zip(&sol.e_fun)
            .map(|(t, e)| (c * t - e).abs() / e)
            .fold(0.0_f64, f64::max),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StationaryMode {
    Direct,
    Iterate,
}

/// π^s as e·ν normalized (direct) or as the stationary row vector of the
/// normalized kernel Q^s (iterate). With exact eigendata the two coincide;
/// the gap between them is a discretization self-check. Degenerate laws
/// have no unique stationary law, so iterate mode falls back to direct.
pub fn stationary_measure(
    sol: &SpectralSolution,
    op: &TransferOperator,
    mode: StationaryMode,
) -> Result<Vec<f64>, SpectralError> {
    let nu = if op.starred() { &sol.nu_star } else { &sol.nu };
    match mode {
        StationaryMode::Direct => Ok(weight_by(&sol.e_fun, nu)),
        StationaryMode::Iterate => {
            if sol.degenerate {
                return Ok(weight_by(&sol.e_fun, nu));
            }
            let k = op.size();
            let q = build_q(op, sol.kappa, &sol.e_fun);
            let apply_t = |w: &[f64]| -> Vec<f64> {
                let mut out = vec![0.0; k];
                for i in 0..k {
                    let wi = w[i];
                    if wi != 0.0 {
                        let row = &q[i * k..(i + 1) * k];
                        for j in 0..k {
                            out[j] += wi * row[j];
                        }
                    }
                }
                out
            };
            let left = cone::dominant_pair(apply_t, k, EIGEN_TOL, 0)?;
            let total: f64 = left.vector.iter().sum();
            Ok(left.vector.iter().map(|v| v / total).collect())
        }
    }
}

/// Q[i][j] = M[i][j] e_j / (κ e_i); rows sum to 1 up to the eigen residual
/// (plus the shared-eigenfunction defect for starred operators).
pub fn build_q(op: &TransferOperator, kappa: f64, e: &[f64]) -> Vec<f64> {
    let k = op.size();
    let mut q = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            q[i * k + j] = op.entry(i, j) * e[j] / (kappa * e[i]);
        }
    }
    q
}

/// Total variation distance between two weight vectors.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

/// log q^s_n(x, word) for the kernel q^s_n = |S_n x|^s e^s(S_n·x) /
/// (κ^n e^s(x)), evaluated with the solution's e-table at exact image
/// points. Returns the log-kernel value and the final projective point.
pub fn log_q_word(
    sol: &SpectralSolution,
    x: &[f64],
    word: &[Matrix],
) -> Result<(f64, Vec<f64>), SpectralError> {
    let nx = cone::norm(x);
    if nx <= 0.0 {
        return Err(SpectralError::Cone(ConeError::ZeroImage));
    }
    let mut y: Vec<f64> = x.iter().map(|v| v / nx).collect();
    let e_start = sol.eval_e(&y);
    let mut log_norm = 0.0;
    for a in word {
        let z = a.matvec(&y);
        let r = cone::norm(&z);
        if r <= 0.0 {
            return Err(SpectralError::Cone(ConeError::ZeroImage));
        }
        log_norm += r.ln();
        y = z.iter().map(|v| v / r).collect();
    }
    let value = sol.s * log_norm + sol.eval_e(&y).ln()
        - e_start.ln()
        - word.len() as f64 * sol.kappa.ln();
    Ok((value, y))
}

/// |log q_{m+n}(x, word) − log q_n(x, head) − log q_m(S_n·x, tail)|.
/// The identity is exact algebra for any e-evaluator applied at exact
/// image points, so this measures only floating-point noise.
pub fn cocycle_residual(
    sol: &SpectralSolution,
    x: &[f64],
    word: &[Matrix],
    split: usize,
) -> Result<f64, SpectralError> {
    assert!(split <= word.len());
    let (full, _) = log_q_word(sol, x, word)?;
    let (head, mid) = log_q_word(sol, x, &word[..split])?;
    let (tail, _) = log_q_word(sol, &mid, &word[split..])?;
    Ok((full - (head + tail)).abs())
}

/// kappa(s) on the mesh without eigenvector post-processing: single-start
/// right power iteration. The eigenvalue is correct even for degenerate
/// laws (any start is then an eigenvector).
pub fn kappa_grid(
    scenario: &Scenario,
    grid: &Arc<SphereGrid>,
    s: f64,
) -> Result<f64, SpectralError> {
    let op = TransferOperator::build(scenario, grid, s, false)?;
    let out = cone::dominant_pair(|v: &[f64]| op.apply(v), op.size(), EIGEN_TOL, 0)?;
    Ok(out.lambda)
}

/// kappa(s) over a list of s values.
pub fn kappa_curve(
    scenario: &Scenario,
    grid: &Arc<SphereGrid>,
    s_values: &[f64],
) -> Result<Vec<(f64, f64)>, SpectralError> {
    s_values
        .iter()
        .map(|&s| kappa_grid(scenario, grid, s).map(|k| (s, k)))
        .collect()
}

/// Midpoint log-convexity on uniformly spaced curve points:
/// log κ(mid) ≤ (log κ(left) + log κ(right)) / 2 up to 1e−8 slack.
/// Non-uniform triples are skipped.
pub fn logconvexity_ok(curve: &[(f64, f64)]) -> bool {
    for w in curve.windows(3) {
        let (s0, k0) = w[0];
        let (s1, k1) = w[1];
        let (s2, k2) = w[2];
        let h1 = s1 - s0;
        let h2 = s2 - s1;
        if (h1 - h2).abs() > 1e-9 * h1.abs().max(h2.abs()) {
            continue;
        }
        if k1.ln() > 0.5 * (k0.ln() + k2.ln()) + 1e-8 {
            return false;
        }
    }
    true
}

pub const CHI_SCAN_STEP: f64 = 0.1;
pub const CHI_DEFAULT_CAP: f64 = 8.0;

#[derive(Debug, Clone, Serialize)]
pub struct ChiReport {
    pub chi: f64,
    pub kappa_at_chi: f64,
    /// Uniform scan points (s, kappa) gathered while bracketing.
    pub curve: Vec<(f64, f64)>,
    pub convexity_ok: bool,
    pub evaluations: usize,
}

/// Root of N·kappa(s) = 1. Scans from the low edge of `window` in steps of
/// 0.1 until the sign of N·kappa − 1 changes, then bisects to
/// |N·kappa(chi) − 1| ≤ tol. Defaults: window = (s1, min(s_inf, 8)).
pub fn solve_chi(
    scenario: &Scenario,
    grid: &Arc<SphereGrid>,
    window: Option<(f64, f64)>,
    tol: f64,
) -> Result<ChiReport, SpectralError> {
    let n = scenario.n_branch as f64;
    let (lo, cap) = window.unwrap_or((
        scenario.s1,
        scenario.s_inf().min(CHI_DEFAULT_CAP),
    ));
    let mut evaluations = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::new();
    let mut eval = |s: f64, curve: &mut Vec<(f64, f64)>| -> Result<f64, SpectralError> {
        let kappa = kappa_grid(scenario, grid, s)?;
        evaluations += 1;
        curve.push((s, kappa));
        Ok(n * kappa - 1.0)
    };
    let mut a = lo;
    let mut fa = eval(a, &mut curve)?;
    let mut bracket = None;
    let mut step_idx = 1usize;
    while bracket.is_none() {
        let b = lo + step_idx as f64 * CHI_SCAN_STEP;
        if b > cap + 1e-12 {
            return Err(SpectralError::NoBracket {
                lo,
                hi: cap,
                evaluated: evaluations,
                curve,
            });
        }
        let fb = eval(b, &mut curve)?;
        if fa == 0.0 {
            bracket = Some((a, fa, a, fa));
        } else if fa.signum() != fb.signum() || fb == 0.0 {
            bracket = Some((a, fa, b, fb));
        } else {
            a = b;
            fa = fb;
            step_idx += 1;
        }
    }
    let (mut a, fa, mut b, _) = bracket.unwrap();
    let scan_curve = curve.clone();
    let mut chi = 0.5 * (a + b);
    let mut kappa_at_chi;
    if fa == 0.0 {
        chi = a;
        kappa_at_chi = 1.0 / n;
    } else {
        let mut fa = fa;
        kappa_at_chi = f64::NAN;
        for _ in 0..200 {
            chi = 0.5 * (a + b);
            let kappa = kappa_grid(scenario, grid, chi)?;
            evaluations += 1;
            kappa_at_chi = kappa;
            let fm = n * kappa - 1.0;
            if fm.abs() <= tol || (b - a) <= f64::EPSILON * chi.abs() {
                break;
            }
            if fm.signum() == fa.signum() {
                a = chi;
                fa = fm;
            } else {
                b = chi;
            }
        }
    }
    Ok(ChiReport {
        chi,
        kappa_at_chi,
        convexity_ok: logconvexity_ok(&scan_curve),
        curve: scan_curve,
        evaluations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Quadrature,
    Ergodic,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlphaReport {
    pub alpha: f64,
    pub mode: AlphaMode,
    /// Present for the ergodic mode: 95% CI across independent chains.
    pub ci: Option<MeanCi>,
    /// For quadrature, the worst per-node kernel mass defect of the raw
    /// q₁ weights; for ergodic, the tilted kernel's row defect.
    pub kernel_defect: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AlphaOpts {
    pub chains: usize,
    pub steps: usize,
}

impl Default for AlphaOpts {
    fn default() -> Self {
        AlphaOpts {
            chains: 16,
            steps: 4000,
        }
    }
}

/// alpha(s) = ∫∫ log|ax| q₁^s(x,a) μ_*(da) π^s_*(dx).
///
/// Quadrature sums the raw kernel weights against the node masses of π_*;
/// ergodic runs the tilted chain and averages the increments. Agreement of
/// the two routes is a pipeline self-check, not a single computation.
pub fn lyapunov_alpha(
    scenario: &Scenario,
    sol: &SpectralSolution,
    mode: AlphaMode,
    opts: AlphaOpts,
) -> Result<AlphaReport, SpectralError> {
    match mode {
        AlphaMode::Quadrature => alpha_quadrature(scenario, sol),
        AlphaMode::Ergodic => alpha_ergodic(scenario, sol, opts),
    }
}

fn alpha_quadrature(
    scenario: &Scenario,
    sol: &SpectralSolution,
) -> Result<AlphaReport, SpectralError> {
    let (atoms, probs) = require_atoms(scenario)?;
    let mut alpha = 0.0;
    let mut worst_defect = 0.0_f64;
    for (i, x) in sol.grid.nodes().iter().enumerate() {
        let mut inner = 0.0;
        let mut mass = 0.0;
        for (a, &p) in atoms.iter().zip(probs) {
            let a_star = a.transpose();
            let y = a_star.matvec(x);
            let r = cone::norm(&y);
            let dir: Vec<f64> = y.iter().map(|v| v / r).collect();
            let q1 = r.powf(sol.s) * sol.eval_e(&dir) / (sol.kappa * sol.e_fun[i]);
            inner += p * q1 * r.ln();
            mass += p * q1;
        }
        worst_defect = worst_defect.max((mass - 1.0).abs());
        alpha += sol.pi_star[i] * inner;
    }
    Ok(AlphaReport {
        alpha,
        mode: AlphaMode::Quadrature,
        ci: None,
        kernel_defect: worst_defect,
        steps: 0,
    })
}

fn alpha_ergodic(
    scenario: &Scenario,
    sol: &SpectralSolution,
    opts: AlphaOpts,
) -> Result<AlphaReport, SpectralError> {
    let kernel = TiltedKernel::new(scenario, sol)?;
    let burn = opts.steps / 5;
    let mut per_chain = Vec::with_capacity(opts.chains);
    for chain in 0..opts.chains {
        let mut rng = scenario.rng(domain::SPECTRAL, &[7, chain as u64]);
        let mut state = TiltedChainState::start(sample_weights(&sol.pi_star, &mut rng));
        for _ in 0..burn {
            state = kernel.step(state, &mut rng);
        }
        let v0 = state.v;
        let n0 = state.n;
        for _ in burn..opts.steps {
            state = kernel.step(state, &mut rng);
        }
        per_chain.push((state.v - v0) / (state.n - n0) as f64);
    }
    let ci = stats::mean_ci(&per_chain, stats::Z95);
    Ok(AlphaReport {
        alpha: ci.mean,
        mode: AlphaMode::Ergodic,
        ci: Some(ci),
        kernel_defect: kernel.max_defect,
        steps: opts.steps,
    })
}

/// Centered finite difference of log kappa at s, an informational
/// cross-check for alpha(s); the identity alpha = (log kappa)' is not part
/// of the verified surface, so callers report the gap without asserting.
pub fn alpha_fd_diagnostic(
    scenario: &Scenario,
    grid: &Arc<SphereGrid>,
    s: f64,
    h: f64,
) -> Result<f64, SpectralError> {
    assert!(s > h && h > 0.0);
    let up = kappa_grid(scenario, grid, s + h)?;
    let down = kappa_grid(scenario, grid, s - h)?;
    Ok((up.ln() - down.ln()) / (2.0 * h))
}

fn require_atoms(
    scenario: &Scenario,
) -> Result<(&[Matrix], &[f64]), SpectralError> {
    scenario.mu.atoms().ok_or_else(|| {
        SpectralError::UnsupportedLaw(
            "tilted kernel needs a finitely supported matrix law".into(),
        )
    })
}

fn sample_weights(weights: &[f64], rng: &mut impl rand::Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// State of the tilted chain: current node, accumulated log|S_n x|, steps.
#[derive(Debug, Clone, Copy)]
pub struct TiltedChainState {
    pub x: usize,
    pub v: f64,
    pub n: u64,
}

impl TiltedChainState {
    pub fn start(node: usize) -> Self {
        TiltedChainState { x: node, v: 0.0, n: 0 }
    }
}

struct TiltedEntry {
    cum: f64,
    log_r: f64,
    next: u32,
    atom: u32,
}

/// Sampler for the tilted transition kernel: from node i, pick the pair
/// (atom a*, target node j) with probability ∝ p |a* x_i|^s w_ij e_j /
/// (κ e_i), i.e. the Q^s_* matrix split by atom. Rows are renormalized on
/// the mesh; the worst raw-mass defect is recorded.
pub struct TiltedKernel {
    rows: Vec<Vec<TiltedEntry>>,
    pub max_defect: f64,
}

impl TiltedKernel {
    pub fn new(scenario: &Scenario, sol: &SpectralSolution) -> Result<Self, SpectralError> {
        let (atoms, probs) = require_atoms(scenario)?;
        let grid = &sol.grid;
        let mut rows = Vec::with_capacity(grid.len());
        let mut max_defect = 0.0_f64;
        for (i, x) in grid.nodes().iter().enumerate() {
            let mut entries: Vec<TiltedEntry> = Vec::new();
            let mut acc = 0.0;
            for (k, (a, &p)) in atoms.iter().zip(probs).enumerate() {
                let a_star = a.transpose();
                let y = a_star.matvec(x);
                let r = cone::norm(&y);
                if r <= 0.0 {
                    return Err(SpectralError::Cone(ConeError::ZeroImage));
                }
                let dir: Vec<f64> = y.iter().map(|v| v / r).collect();
                let coeff = p * r.powf(sol.s) / (sol.kappa * sol.e_fun[i]);
                for (j, w) in grid.interpolate(&dir).iter() {
                    if w == 0.0 {
                        continue;
                    }
                    acc += coeff * w * sol.e_fun[j];
                    entries.push(TiltedEntry {
                        cum: acc,
                        log_r: r.ln(),
                        next: j as u32,
                        atom: k as u32,
                    });
                }
            }
            max_defect = max_defect.max((acc - 1.0).abs());
            for e in entries.iter_mut() {
                e.cum /= acc;
            }
            rows.push(entries);
        }
        Ok(TiltedKernel { rows, max_defect })
    }

    pub fn step(&self, state: TiltedChainState, rng: &mut impl rand::Rng) -> TiltedChainState {
        let u: f64 = rng.gen();
        let row = &self.rows[state.x];
        let mut pick = row.len() - 1;
        for (idx, e) in row.iter().enumerate() {
            if u < e.cum {
                pick = idx;
                break;
            }
        }
        let e = &row[pick];
        TiltedChainState {
            x: e.next as usize,
            v: state.v + e.log_r,
            n: state.n + 1,
        }
    }

    /// Index of the atom the sampler would pick at `u` from node `x`;
    /// exposed for tests of the selection probabilities.
    pub fn pick_atom(&self, x: usize, u: f64) -> usize {
        let row = &self.rows[x];
        for e in row.iter() {
            if u < e.cum {
                return e.atom as usize;
            }
        }
        row.last().map(|e| e.atom as usize).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KappaMcRow {
    pub n: usize,
    /// MC estimate of u_n(s) = E ‖S_n‖^s.
    pub u_n: f64,
    /// u_n^{1/n}, an upper bound on kappa(s) in expectation.
    pub root: f64,
    pub root_ci_lo: f64,
    pub root_ci_hi: f64,
}

/// MC estimates of u_n(s)^{1/n} for n = 1..n_max: a curve of upper bounds
/// converging to kappa(s). Heavy s inflates the variance of ‖S_n‖^s; the
/// CIs carry that honestly.
pub fn kappa_mc(
    scenario: &Scenario,
    s: f64,
    n_max: usize,
    trials: usize,
    stream: u64,
) -> Result<Vec<KappaMcRow>, SpectralError> {
    assert!(n_max >= 1 && trials >= 2);
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(trials); n_max];
    for t in 0..trials {
        let mut rng = scenario.rng(domain::SPECTRAL, &[9, stream, t as u64]);
        let mut shrunk: Option<Matrix> = None;
        let mut log_scale = 0.0;
        for n in 1..=n_max {
            let a = scenario.mu.sample(scenario.dim, &mut rng);
            let prod = match &shrunk {
                None => a,
                Some(m) => a.mul(m),
            };
            let norm = cone::operator_norm(&prod);
            log_scale += norm.ln();
            samples[n - 1].push((s * log_scale).exp());
            shrunk = Some(prod.scale(1.0 / norm));
        }
    }
    Ok(samples
        .iter()
        .enumerate()
        .map(|(idx, xs)| {
            let n = idx + 1;
            let ci = stats::mean_ci(xs, stats::Z95);
            let inv = 1.0 / n as f64;
            KappaMcRow {
                n,
                u_n: ci.mean,
                root: ci.mean.powf(inv),
                root_ci_lo: ci.lo.max(0.0).powf(inv),
                root_ci_hi: ci.hi.powf(inv),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub min_ratio: f64,
    /// Counts of ratio values in 20 uniform buckets over [0, 1].
    pub histogram: Vec<u64>,
    pub paths: usize,
    pub steps: usize,
}

/// Empirical floor of |S_n x| / ‖S_n‖ over simulated untilted products:
/// a positive floor on the sampled horizon backs the norm-comparability
/// bound the tail analysis relies on.
pub fn norm_comparability_probe(
    scenario: &Scenario,
    x: &[f64],
    paths: usize,
    steps: usize,
) -> Result<ProbeReport, SpectralError> {
    let nx = cone::norm(x);
    assert!(nx > 0.0);
    let x: Vec<f64> = x.iter().map(|v| v / nx).collect();
    let mut histogram = vec![0u64; 20];
    let mut min_ratio = f64::MAX;
    for path in 0..paths {
        let mut rng = scenario.rng(domain::SPECTRAL, &[8, path as u64]);
        let mut shrunk: Option<Matrix> = None;
        for _ in 0..steps {
            let a = scenario.mu.sample(scenario.dim, &mut rng);
            let prod = match &shrunk {
                None => a,
                Some(m) => a.mul(m),
            };
            let norm = cone::operator_norm(&prod);
            let scaled = prod.scale(1.0 / norm);
            let ratio = cone::norm(&scaled.matvec(&x)).min(1.0);
            min_ratio = min_ratio.min(ratio);
            let bucket = ((ratio * 20.0) as usize).min(19);
            histogram[bucket] += 1;
            shrunk = Some(scaled);
        }
    }
    Ok(ProbeReport {
        min_ratio,
        histogram,
        paths,
        steps,
    })
}
