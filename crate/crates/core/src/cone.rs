//! Nonnegative matrices acting on the positive cone.
//!
//! The semigroup under study consists of allowable matrices: entrywise
//! nonnegative square matrices in which every row and every column carries
//! a strictly positive entry. An allowable matrix maps the closed positive
//! cone minus the origin into itself, so it acts on the positive part of
//! the unit sphere by the projective action a . x = ax / |ax|.
//!
//! Strictly positive matrices form the interior subsemigroup; products
//! that land there are proximal, carry simple dominant eigenvalues, and
//! contract the projective action toward the dominant direction. The
//! routines here compute exactly that eigendata and nothing more; all
//! randomness lives in higher layers.

use crate::scalar::Real;
use thiserror::Error;

/// Errors from cone-level linear algebra.
#[derive(Debug, Error, PartialEq)]
pub enum ConeError {
    #[error("matrix entry ({row},{col}) is negative")]
    NegativeEntry { row: usize, col: usize },
    #[error("rows do not form a square matrix")]
    NonSquare,
    #[error("image ax vanishes; projective action undefined")]
    ZeroImage,
    #[error("no spectral gap detected after {iterations} iterations (contraction ratio {ratio})")]
    NotProximal { iterations: usize, ratio: f64 },
    #[error("power iteration failed to converge within {0} iterations")]
    NonConvergence(usize),
}

/// Dense square matrix with nonnegative entries, row major.
///
/// Construction rejects negative entries and ragged rows. Allowability is
/// a query, not a construction invariant, so that degenerate inputs can be
/// classified by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveMatrix<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> PositiveMatrix<T> {
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, ConeError> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(ConeError::NonSquare);
            }
            for (j, &e) in row.iter().enumerate() {
                if e < T::zero() || e.is_nan() {
                    return Err(ConeError::NegativeEntry { row: i, col: j });
                }
                data.push(e);
            }
        }
        Ok(Self { dim, data })
    }

    /// Row-major construction; length must be a perfect square matching `dim`.
    pub fn from_row_major(dim: usize, data: Vec<T>) -> Result<Self, ConeError> {
        if data.len() != dim * dim {
            return Err(ConeError::NonSquare);
        }
        for (k, &e) in data.iter().enumerate() {
            if e < T::zero() || e.is_nan() {
                return Err(ConeError::NegativeEntry {
                    row: k / dim,
                    col: k % dim,
                });
            }
        }
        Ok(Self { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![T::zero(); dim * dim];
        for i in 0..dim {
            data[i * dim + i] = T::one();
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.dim + j]
    }

    pub fn entries(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn transpose(&self) -> Self {
        let d = self.dim;
        let mut data = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                data[j * d + i] = self.data[i * d + j];
            }
        }
        Self { dim: d, data }
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|&e| e * c).collect(),
        }
    }

    /// Matrix product self * other.
    pub fn mul(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim, "dimension mismatch");
        let d = self.dim;
        let mut data = vec![T::zero(); d * d];
        for i in 0..d {
            for k in 0..d {
                let aik = self.data[i * d + k];
                if aik == T::zero() {
                    continue;
                }
                for j in 0..d {
                    data[i * d + j] = data[i * d + j] + aik * other.data[k * d + j];
                }
            }
        }
        Self { dim: d, data }
    }

    /// Matrix-vector product a x.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.dim, "dimension mismatch");
        let d = self.dim;
        let mut y = vec![T::zero(); d];
        for i in 0..d {
            let mut acc = T::zero();
            for j in 0..d {
                acc = acc + self.data[i * d + j] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// Transposed product a^T x without materializing the transpose.
    pub fn matvec_t(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.dim, "dimension mismatch");
        let d = self.dim;
        let mut y = vec![T::zero(); d];
        for i in 0..d {
            let xi = x[i];
            if xi == T::zero() {
                continue;
            }
            for j in 0..d {
                y[j] = y[j] + self.data[i * d + j] * xi;
            }
        }
        y
    }

    /// Every row and every column has a strictly positive entry.
    pub fn is_allowable(&self) -> bool {
        let d = self.dim;
        for i in 0..d {
            if !self.row(i).iter().any(|&e| e > T::zero()) {
                return false;
            }
        }
        for j in 0..d {
            if !(0..d).any(|i| self.get(i, j) > T::zero()) {
                return false;
            }
        }
        true
    }

    /// All entries strictly positive (interior semigroup membership).
    pub fn is_strictly_positive(&self) -> bool {
        self.data.iter().all(|&e| e > T::zero())
    }

    pub fn min_entry(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::infinity(), |m, e| if e < m { e } else { m })
    }

    pub fn max_entry(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |m, e| if e > m { e } else { m })
    }
}

/// Euclidean norm.
pub fn norm<T: Real>(x: &[T]) -> T {
    x.iter().map(|&e| e * e).sum::<T>().sqrt()
}

pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).map(|(&a, &b)| a * b).sum()
}

fn normalize_in_place<T: Real>(x: &mut [T]) -> T {
    let n = norm(x);
    if n > T::zero() {
        for e in x.iter_mut() {
            *e = *e / n;
        }
    }
    n
}

/// Projective action a . x = ax / |ax| on the positive part of the sphere.
///
/// `x` may be any nonzero nonnegative vector; the result is unit. For an
/// allowable matrix the image of a nonzero nonnegative vector never
/// vanishes, so `ZeroImage` signals a non-allowable input.
pub fn projective_action<T: Real>(a: &PositiveMatrix<T>, x: &[T]) -> Result<Vec<T>, ConeError> {
    let mut y = a.matvec(x);
    if normalize_in_place(&mut y) == T::zero() {
        return Err(ConeError::ZeroImage);
    }
    Ok(y)
}

/// Stopping tolerance for Rayleigh-quotient power iteration, adapted to the
/// scalar width so the f32 instantiation terminates.
fn rayleigh_tol<T: Real>() -> T {
    let machine = T::epsilon() * T::c(4.0);
    let target = T::c(1e-13);
    if machine > target {
        machine
    } else {
        target
    }
}

const NORM_ITER_CAP: usize = 10_000;

/// Operator norm induced by the Euclidean norm: the square root of the
/// dominant eigenvalue of a^T a, by power iteration with Rayleigh-quotient
/// stopping (relative change at most 1e-13, capped at 10^4 iterations).
///
/// a^T a is nonnegative, so its dominant eigenvector can be reached from a
/// strictly positive start; ties among singular values are harmless because
/// the Rayleigh quotient is then exact on the reachable span.
pub fn operator_norm<T: Real>(a: &PositiveMatrix<T>) -> T {
    let d = a.dim();
    if a.data.iter().all(|&e| e == T::zero()) {
        return T::zero();
    }
    // b = a^T a applied as x -> a^T (a x), avoiding the explicit product.
    let apply = |x: &[T]| -> Vec<T> { a.matvec_t(&a.matvec(x)) };
    let mut x: Vec<T> = (0..d)
        .map(|i| T::one() + T::c(i as f64) / T::c(10.0 * d as f64))
        .collect();
    normalize_in_place(&mut x);
    let tol = rayleigh_tol::<T>();
    let mut rho_prev = T::zero();
    for _ in 0..NORM_ITER_CAP {
        let y = apply(&x);
        let rho = dot(&x, &y);
        if rho == T::zero() {
            return T::zero();
        }
        let rel = ((rho - rho_prev) / rho).abs();
        x = y;
        normalize_in_place(&mut x);
        if rel <= tol {
            return rho.sqrt();
        }
        rho_prev = rho;
    }
    rho_prev.sqrt()
}

/// Perron eigendata of a proximal nonnegative matrix.
///
/// Normalization: |w| = 1 and <v, w> = 1, so v w^T is the spectral
/// projection onto the dominant direction. `spectral_gap` is one minus the
/// observed residual contraction ratio, an estimate of 1 - |Lambda_2| / Lambda_1.
#[derive(Debug, Clone, PartialEq)]
pub struct PerronData<T> {
    pub lambda: T,
    pub v: Vec<T>,
    pub w: Vec<T>,
    pub spectral_gap: T,
    pub iterations: usize,
}

const PERRON_ITER_CAP: usize = 50_000;
const PROXIMALITY_RATIO: f64 = 1.0 - 1e-6;

pub(crate) struct PowerOutcome<T> {
    pub(crate) lambda: T,
    pub(crate) vector: Vec<T>,
    pub(crate) ratio: f64,
    #[allow(dead_code)]
    pub(crate) iterations: usize,
}

/// Power iteration for the dominant eigenpair of a nonnegative matrix,
/// started strictly positive. Returns the residual contraction ratio used
/// for the proximality test and the gap estimate. `start_variant` selects
/// among linearly independent positive starts, so a rerun can expose tied
/// dominant eigenvalues that a single run cannot see (the identity matrix
/// fixes every start).
pub(crate) fn dominant_pair<T: Real>(
    apply: impl Fn(&[T]) -> Vec<T>,
    dim: usize,
    tol: T,
    start_variant: usize,
) -> Result<PowerOutcome<T>, ConeError> {
    let mut x: Vec<T> = (0..dim)
        .map(|i| {
            let ramp = if start_variant == 0 {
                i as f64
            } else {
                (dim - 1 - i) as f64 + 0.37 * ((i % 2) as f64)
            };
            T::one() + T::c(ramp) / T::c(3.0 * dim as f64)
        })
        .collect();
    normalize_in_place(&mut x);
    let mut ratio_window: Vec<f64> = Vec::new();
    let mut res_prev: Option<T> = None;
    for it in 1..=PERRON_ITER_CAP {
        let y = apply(&x);
        let lambda = norm(&y);
        if lambda == T::zero() {
            return Err(ConeError::ZeroImage);
        }
        // residual |ax - lambda x| with x unit
        let mut res = T::zero();
        for i in 0..dim {
            let r = y[i] - lambda * x[i];
            res = res + r * r;
        }
        let res = res.sqrt();
        if let Some(p) = res_prev {
            if p > T::zero() {
                ratio_window.push((res / p).to_f64().unwrap_or(1.0).min(4.0));
                if ratio_window.len() > 8 {
                    ratio_window.remove(0);
                }
            }
        }
        res_prev = Some(res);
        x = y;
        normalize_in_place(&mut x);
        if res <= tol * lambda {
            let ratio = mean_or(&ratio_window, 0.0);
            return Ok(PowerOutcome {
                lambda,
                vector: x,
                ratio,
                iterations: it,
            });
        }
    }
    let ratio = mean_or(&ratio_window, 1.0);
    if ratio >= PROXIMALITY_RATIO {
        Err(ConeError::NotProximal {
            iterations: PERRON_ITER_CAP,
            ratio,
        })
    } else {
        Err(ConeError::NonConvergence(PERRON_ITER_CAP))
    }
}

fn mean_or(xs: &[f64], default: f64) -> f64 {
    if xs.is_empty() {
        default
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Dominant eigendata (lambda, v, w) of a proximal matrix by forward and
/// adjoint power iteration.
///
/// Strict positivity guarantees proximality; merely allowable inputs are
/// accepted and fail with `NotProximal` when no gap is detected, as for a
/// permutation matrix whose eigenvalue moduli tie.
pub fn perron<T: Real>(a: &PositiveMatrix<T>, tol: T) -> Result<PerronData<T>, ConeError> {
    let d = a.dim();
    if d == 1 {
        let lambda = a.get(0, 0);
        if lambda <= T::zero() {
            return Err(ConeError::ZeroImage);
        }
        return Ok(PerronData {
            lambda,
            v: vec![T::one()],
            w: vec![T::one()],
            spectral_gap: T::one(),
            iterations: 0,
        });
    }
    let right = dominant_pair(|x| a.matvec(x), d, tol, 0)?;
    // rerun from an independent start: a genuinely simple dominant pair
    // reproduces the same direction, a tied spectrum does not
    let verify = dominant_pair(|x| a.matvec(x), d, tol, 1)?;
    let drift = norm(
        &right
            .vector
            .iter()
            .zip(&verify.vector)
            .map(|(&p, &q)| p - q)
            .collect::<Vec<T>>(),
    );
    if drift > T::c(1e-6) {
        return Err(ConeError::NotProximal {
            iterations: right.iterations + verify.iterations,
            ratio: 1.0,
        });
    }
    let left = dominant_pair(|x| a.matvec_t(x), d, tol, 0)?;
    let w = left.vector;
    let overlap = dot(&right.vector, &w);
    if overlap <= T::zero() {
        // simple dominant eigenvalue forces a positive overlap; zero means
        // the iterations landed on inconsistent eigenspaces
        return Err(ConeError::NotProximal {
            iterations: right.iterations + left.iterations,
            ratio: 1.0,
        });
    }
    let v = right.vector.iter().map(|&e| e / overlap).collect();
    let ratio = right.ratio.max(left.ratio).min(1.0);
    Ok(PerronData {
        lambda: right.lambda,
        v,
        w,
        spectral_gap: T::one() - T::c(ratio),
        iterations: right.iterations + left.iterations,
    })
}

/// Trajectory of the projective iteration a^n . x against the dominant
/// direction of a.
#[derive(Debug, Clone)]
pub struct ProximalLimit<T> {
    /// Euclidean distances |a^n . x - v_bar| for n = 1..=n_max (may stop
    /// early once the floating-point floor is reached).
    pub distances: Vec<T>,
    /// Geometric rate fitted to the decaying segment, when one exists.
    pub rate: Option<T>,
    pub converged: bool,
    /// Start vector lay in an invariant boundary face, so the iteration
    /// stalled away from the dominant direction. Flagged, not an error.
    pub boundary_stall: bool,
}

/// Iterate the projective action and report convergence toward the
/// normalized dominant eigenvector of `a`.
pub fn proximal_limit_check<T: Real>(
    a: &PositiveMatrix<T>,
    x0: &[T],
    n_max: usize,
) -> Result<ProximalLimit<T>, ConeError> {
    let eigen = perron(a, T::c(1e-14))?;
    let mut vbar = eigen.v.clone();
    normalize_in_place(&mut vbar);
    let floor = T::c(1e-14);
    let mut x = x0.to_vec();
    if normalize_in_place(&mut x) == T::zero() {
        return Err(ConeError::ZeroImage);
    }
    let mut distances = Vec::with_capacity(n_max);
    for _ in 0..n_max {
        x = projective_action(a, &x)?;
        let d: T = norm(
            &x.iter()
                .zip(&vbar)
                .map(|(&p, &q)| p - q)
                .collect::<Vec<T>>(),
        );
        distances.push(d);
        if d <= floor {
            break;
        }
    }
    let first = distances[0];
    let last = *distances.last().unwrap();
    let converged = last <= T::c(1e-10);
    let boundary_stall = !converged && last >= first * T::c(0.5);
    // least-squares slope of log d_n over the positive prefix
    let logs: Vec<f64> = distances
        .iter()
        .take_while(|&&d| d > floor)
        .map(|&d| d.to_f64().unwrap().ln())
        .collect();
    let rate = if logs.len() >= 3 {
        let n = logs.len() as f64;
        let sx = (0..logs.len()).map(|i| i as f64).sum::<f64>();
        let sy: f64 = logs.iter().sum();
        let sxx = (0..logs.len()).map(|i| (i * i) as f64).sum::<f64>();
        let sxy = logs
            .iter()
            .enumerate()
            .map(|(i, &y)| i as f64 * y)
            .sum::<f64>();
        let denom = n * sxx - sx * sx;
        if denom > 0.0 {
            Some(T::c(((n * sxy - sx * sy) / denom).exp()))
        } else {
            None
        }
    } else {
        None
    };
    Ok(ProximalLimit {
        distances,
        rate,
        converged,
        boundary_stall,
    })
}
