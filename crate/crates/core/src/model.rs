//! Scenario description and hypothesis audits.
//!
//! A scenario fixes the recursion R =d sum_{i=1..N} A_i R_i + B: the
//! dimension, the branching number N, the matrix law mu of A, the input
//! law eta of B, and the moment exponents s1, s2 under which existence of
//! the fixed point is guaranteed (E||A||^{s1} <= 1/N with s1 <= 1/2,
//! E||A||^{s2} <= 1/N with s2 > s1, and E|B|^{s2} finite).
//!
//! Scenarios are stored as strict JSON: unknown fields are rejected so a
//! typo cannot silently weaken a declared hypothesis.

use crate::cone::{operator_norm, perron, ConeError, PositiveMatrix};
use crate::rng::{self, derive_rng};
use crate::stats::{mean_ci, MeanCi, Z95};
use crate::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Cone(#[from] ConeError),
    #[error("only {found} proximal products found, need at least {needed} to assess spanning")]
    InsufficientProximalSamples { found: usize, needed: usize },
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::Invalid(msg.into())
}

// ---------------------------------------------------------------------------
// matrix law

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtomSpec {
    matrix: Vec<Vec<f64>>,
    p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
enum MatrixGeneratorSpec {
    /// Entrywise i.i.d. scale * exp(mu + sigma Z).
    #[serde(rename = "lognormal_entries")]
    LogNormalEntries { mu: f64, sigma: f64, scale: f64 },
    /// Entrywise i.i.d. Pareto(index) * scale with unit minimum.
    #[serde(rename = "pareto_entries")]
    ParetoEntries { index: f64, scale: f64 },
}

/// The law mu of the random matrix A, as written in a scenario file.
/// Exactly one of `atoms` (finite support) or `generator` must be present.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixLawSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    atoms: Option<Vec<AtomSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<MatrixGeneratorSpec>,
    /// Declared supremum of { s : E||A||^s finite }; omitted means infinite
    /// (always true for finite support).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s_inf: Option<f64>,
}

/// Validated matrix law ready for sampling.
#[derive(Debug, Clone)]
pub enum MatrixLaw {
    Atoms {
        atoms: Vec<Matrix>,
        probs: Vec<f64>,
        /// cumulative probabilities, last entry exactly 1
        cum: Vec<f64>,
    },
    LogNormalEntries {
        mu: f64,
        sigma: f64,
        scale: f64,
    },
    ParetoEntries {
        index: f64,
        scale: f64,
    },
}

impl MatrixLaw {
    fn compile(spec: &MatrixLawSpec, dim: usize) -> Result<Self, ModelError> {
        match (&spec.atoms, &spec.generator) {
            (Some(atoms), None) => {
                if atoms.is_empty() {
                    return Err(invalid("mu.atoms must be nonempty"));
                }
                let mut mats = Vec::with_capacity(atoms.len());
                let mut probs = Vec::with_capacity(atoms.len());
                for (k, a) in atoms.iter().enumerate() {
                    if a.matrix.len() != dim {
                        return Err(invalid(format!(
                            "mu.atoms[{k}].matrix has {} rows, scenario dim is {dim}",
                            a.matrix.len()
                        )));
                    }
                    let m = PositiveMatrix::from_rows(&a.matrix)?;
                    if !m.is_allowable() {
                        return Err(invalid(format!(
                            "mu.atoms[{k}].matrix is not allowable (a zero row or column)"
                        )));
                    }
                    if !(a.p > 0.0) {
                        return Err(invalid(format!("mu.atoms[{k}].p must be positive")));
                    }
                    mats.push(m);
                    probs.push(a.p);
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(invalid(format!(
                        "mu atom probabilities sum to {total}, expected 1"
                    )));
                }
                let mut cum = Vec::with_capacity(probs.len());
                let mut acc = 0.0;
                for &p in &probs {
                    acc += p;
                    cum.push(acc);
                }
                *cum.last_mut().unwrap() = 1.0;
                Ok(MatrixLaw::Atoms {
                    atoms: mats,
                    probs,
                    cum,
                })
            }
            (None, Some(generator)) => match *generator {
                MatrixGeneratorSpec::LogNormalEntries { mu, sigma, scale } => {
                    if sigma < 0.0 || scale <= 0.0 {
                        return Err(invalid("lognormal_entries needs sigma >= 0, scale > 0"));
                    }
                    Ok(MatrixLaw::LogNormalEntries { mu, sigma, scale })
                }
                MatrixGeneratorSpec::ParetoEntries { index, scale } => {
                    if index <= 0.0 || scale <= 0.0 {
                        return Err(invalid("pareto_entries needs index > 0, scale > 0"));
                    }
                    Ok(MatrixLaw::ParetoEntries { index, scale })
                }
            },
            _ => Err(invalid("mu must declare exactly one of atoms or generator")),
        }
    }

    pub fn is_finite_support(&self) -> bool {
        matches!(self, MatrixLaw::Atoms { .. })
    }

    pub fn atoms(&self) -> Option<(&[Matrix], &[f64])> {
        match self {
            MatrixLaw::Atoms { atoms, probs, .. } => Some((atoms, probs)),
            _ => None,
        }
    }

    /// Index of the atom selected by a uniform draw in [0, 1).
    #[inline]
    pub fn atom_index(&self, u: f64) -> usize {
        match self {
            MatrixLaw::Atoms { cum, .. } => {
                let mut k = 0;
                while k + 1 < cum.len() && u >= cum[k] {
                    k += 1;
                }
                k
            }
            _ => panic!("atom_index on a continuous matrix law"),
        }
    }

    pub fn sample(&self, dim: usize, rng: &mut impl Rng) -> Matrix {
        match self {
            MatrixLaw::Atoms { atoms, .. } => {
                let u: f64 = rng.gen();
                atoms[self.atom_index(u)].clone()
            }
            MatrixLaw::LogNormalEntries { mu, sigma, scale } => {
                let normal = rand_distr::Normal::new(*mu, *sigma).expect("validated");
                let data = (0..dim * dim)
                    .map(|_| scale * rng.sample(normal).exp())
                    .collect();
                PositiveMatrix::from_row_major(dim, data).expect("positive entries")
            }
            MatrixLaw::ParetoEntries { index, scale } => {
                let data = (0..dim * dim)
                    .map(|_| {
                        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        scale * u.powf(-1.0 / index)
                    })
                    .collect();
                PositiveMatrix::from_row_major(dim, data).expect("positive entries")
            }
        }
    }

    /// Sample entries into a d*d row-major buffer without allocating;
    /// the tree sampler's hot path for continuous laws. Finite-support
    /// laws are better served by `atom_index` plus a borrow of the atom.
    pub fn sample_entries_into(&self, dim: usize, out: &mut [f64], rng: &mut impl Rng) {
        debug_assert_eq!(out.len(), dim * dim);
        match self {
            MatrixLaw::Atoms { atoms, .. } => {
                let u: f64 = rng.gen();
                out.copy_from_slice(atoms[self.atom_index(u)].entries());
            }
            MatrixLaw::LogNormalEntries { mu, sigma, scale } => {
                let normal = rand_distr::Normal::new(*mu, *sigma).expect("validated");
                for v in out.iter_mut() {
                    *v = scale * rng.sample(normal).exp();
                }
            }
            MatrixLaw::ParetoEntries { index, scale } => {
                for v in out.iter_mut() {
                    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    *v = scale * u.powf(-1.0 / index);
                }
            }
        }
    }

    /// E||A||^s for finite support, exactly.
    pub fn exact_norm_moment(&self, s: f64) -> Option<f64> {
        self.atoms().map(|(atoms, probs)| {
            atoms
                .iter()
                .zip(probs)
                .map(|(a, &p)| p * operator_norm(a).powf(s))
                .sum()
        })
    }
}

// ---------------------------------------------------------------------------
// vector law

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "dist", deny_unknown_fields)]
pub enum ComponentDist {
    #[serde(rename = "uniform")]
    Uniform { lo: f64, hi: f64 },
    #[serde(rename = "exponential")]
    Exponential {
        rate: f64,
        #[serde(default)]
        shift: f64,
    },
    #[serde(rename = "pareto")]
    Pareto { index: f64, scale: f64 },
}

impl ComponentDist {
    fn validate(&self) -> Result<(), ModelError> {
        match *self {
            ComponentDist::Uniform { lo, hi } => {
                if lo < 0.0 || hi <= lo {
                    return Err(invalid("uniform component needs 0 <= lo < hi"));
                }
                if hi <= 0.0 {
                    return Err(invalid("uniform component has no positive support"));
                }
            }
            ComponentDist::Exponential { rate, shift } => {
                if rate <= 0.0 || shift < 0.0 {
                    return Err(invalid("exponential component needs rate > 0, shift >= 0"));
                }
            }
            ComponentDist::Pareto { index, scale } => {
                if index <= 0.0 || scale <= 0.0 {
                    return Err(invalid("pareto component needs index > 0, scale > 0"));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            ComponentDist::Uniform { lo, hi } => rng.gen_range(lo..hi),
            ComponentDist::Exponential { rate, shift } => {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                shift - u.ln() / rate
            }
            ComponentDist::Pareto { index, scale } => {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                scale * u.powf(-1.0 / index)
            }
        }
    }

    /// Whether the s-th moment is finite, decided analytically.
    fn moment_finite(&self, s: f64) -> bool {
        match *self {
            ComponentDist::Pareto { index, .. } => s < index,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorGeneratorKind {
    PointMass,
    Product,
    ArcUniform,
    Mixture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointMassParams {
    value: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProductParams {
    components: Vec<ComponentDist>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureComponentSpec {
    weight: f64,
    law: VectorLawSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureParams {
    components: Vec<MixtureComponentSpec>,
}

/// The law eta of the input vector B, as written in a scenario file.
///
/// `singular` declares whether eta is singular with respect to Lebesgue
/// measure; `epsilon` declares a margin such that E|B|^(chi+epsilon) is
/// finite. Both are metadata consumed by reports, not enforced.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorLawSpec {
    generator: VectorGeneratorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<serde_json::Value>,
    #[serde(default)]
    pub singular: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1.0
}

/// Validated vector law ready for sampling.
#[derive(Debug, Clone)]
pub enum VectorLaw {
    PointMass(Vec<f64>),
    Product(Vec<ComponentDist>),
    /// Uniform angle on the positive quarter circle, d = 2 only.
    ArcUniform,
    Mixture {
        laws: Vec<VectorLaw>,
        cum: Vec<f64>,
    },
}

impl VectorLaw {
    fn compile(spec: &VectorLawSpec, dim: usize) -> Result<Self, ModelError> {
        if !(spec.epsilon > 0.0) {
            return Err(invalid("eta.epsilon must be positive"));
        }
        let params = spec.params.clone().unwrap_or(serde_json::Value::Null);
        let law = match spec.generator {
            VectorGeneratorKind::PointMass => {
                let p: PointMassParams = from_params(params, "point_mass")?;
                if p.value.len() != dim {
                    return Err(invalid(format!(
                        "eta point mass has {} entries, scenario dim is {dim}",
                        p.value.len()
                    )));
                }
                if !p.value.iter().all(|&v| v > 0.0) {
                    return Err(invalid(
                        "eta point mass must be strictly positive so that P(B > 0) > 0",
                    ));
                }
                VectorLaw::PointMass(p.value)
            }
            VectorGeneratorKind::Product => {
                let p: ProductParams = from_params(params, "product")?;
                if p.components.len() != dim {
                    return Err(invalid(format!(
                        "eta product law has {} components, scenario dim is {dim}",
                        p.components.len()
                    )));
                }
                for c in &p.components {
                    c.validate()?;
                }
                VectorLaw::Product(p.components)
            }
            VectorGeneratorKind::ArcUniform => {
                if dim != 2 {
                    return Err(invalid("arc_uniform input law requires dim = 2"));
                }
                if !params.is_null()
                    && params != serde_json::Value::Object(serde_json::Map::new())
                {
                    return Err(invalid("arc_uniform takes no params"));
                }
                VectorLaw::ArcUniform
            }
            VectorGeneratorKind::Mixture => {
                let p: MixtureParams = from_params(params, "mixture")?;
                if p.components.is_empty() {
                    return Err(invalid("eta mixture must be nonempty"));
                }
                let mut laws = Vec::with_capacity(p.components.len());
                let mut cum = Vec::with_capacity(p.components.len());
                let mut acc = 0.0;
                for c in &p.components {
                    if !(c.weight > 0.0) {
                        return Err(invalid("mixture weights must be positive"));
                    }
                    laws.push(VectorLaw::compile(&c.law, dim)?);
                    acc += c.weight;
                    cum.push(acc);
                }
                if (acc - 1.0).abs() > 1e-12 {
                    return Err(invalid(format!(
                        "eta mixture weights sum to {acc}, expected 1"
                    )));
                }
                *cum.last_mut().unwrap() = 1.0;
                VectorLaw::Mixture { laws, cum }
            }
        };
        Ok(law)
    }

    pub fn sample(&self, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        self.sample_into(&mut out, rng);
        out
    }

    /// Sample into a d-buffer without allocating.
    pub fn sample_into(&self, out: &mut [f64], rng: &mut impl Rng) {
        match self {
            VectorLaw::PointMass(v) => out.copy_from_slice(v),
            VectorLaw::Product(components) => {
                for (o, c) in out.iter_mut().zip(components) {
                    *o = c.sample(rng);
                }
            }
            VectorLaw::ArcUniform => {
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
                out[0] = theta.cos();
                out[1] = theta.sin();
            }
            VectorLaw::Mixture { laws, cum } => {
                let u: f64 = rng.gen();
                let mut k = 0;
                while k + 1 < cum.len() && u >= cum[k] {
                    k += 1;
                }
                laws[k].sample_into(out, rng);
            }
        }
    }

    /// Point mass without the positivity rule of scenario input laws;
    /// initial conditions of the uniqueness iteration may be zero.
    pub fn point_mass_unchecked(value: Vec<f64>) -> VectorLaw {
        VectorLaw::PointMass(value)
    }

    pub fn is_point_mass(&self) -> Option<&[f64]> {
        match self {
            VectorLaw::PointMass(v) => Some(v),
            _ => None,
        }
    }

    /// Whether E|B|^s is finite, decided analytically.
    pub fn moment_finite(&self, s: f64) -> bool {
        match self {
            VectorLaw::PointMass(_) | VectorLaw::ArcUniform => true,
            VectorLaw::Product(components) => components.iter().all(|c| c.moment_finite(s)),
            VectorLaw::Mixture { laws, .. } => laws.iter().all(|l| l.moment_finite(s)),
        }
    }
}

fn from_params<T: serde::de::DeserializeOwned>(
    params: serde_json::Value,
    kind: &str,
) -> Result<T, ModelError> {
    serde_json::from_value(params)
        .map_err(|e| invalid(format!("eta params for {kind}: {e}")))
}

// ---------------------------------------------------------------------------
// scenario

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSpec {
    dim: usize,
    #[serde(rename = "N")]
    n_branch: usize,
    mu: MatrixLawSpec,
    eta: VectorLawSpec,
    s1: f64,
    s2: f64,
    seed: u64,
    #[serde(default)]
    labels: Vec<String>,
}

/// A validated scenario: the full description of one recursion instance.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub dim: usize,
    pub n_branch: usize,
    pub mu: MatrixLaw,
    pub eta: VectorLaw,
    pub eta_spec: VectorLawSpec,
    pub s1: f64,
    pub s2: f64,
    pub seed: u64,
    pub labels: Vec<String>,
    pub declared_s_inf: Option<f64>,
    spec: ScenarioSpec,
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let spec: ScenarioSpec = serde_json::from_str(text)?;
        Self::from_spec(spec)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("scenario serializes")
    }

    fn from_spec(spec: ScenarioSpec) -> Result<Self, ModelError> {
        if spec.dim == 0 {
            return Err(invalid("dim must be at least 1"));
        }
        if spec.n_branch < 2 {
            return Err(invalid("N must be at least 2 (branching recursion)"));
        }
        if !(spec.s1 > 0.0 && spec.s1 <= 0.5) {
            return Err(invalid(format!(
                "s1 = {} violates the schema bound s1 in (0, 1/2]",
                spec.s1
            )));
        }
        if !(spec.s2 > spec.s1) {
            return Err(invalid(format!(
                "s2 = {} must exceed s1 = {}",
                spec.s2, spec.s1
            )));
        }
        if let Some(s_inf) = spec.mu.s_inf {
            if !(s_inf > spec.s2) {
                return Err(invalid("declared s_inf must exceed s2"));
            }
        }
        let mu = MatrixLaw::compile(&spec.mu, spec.dim)?;
        let eta = VectorLaw::compile(&spec.eta, spec.dim)?;
        Ok(Scenario {
            dim: spec.dim,
            n_branch: spec.n_branch,
            mu,
            eta,
            eta_spec: spec.eta.clone(),
            s1: spec.s1,
            s2: spec.s2,
            seed: spec.seed,
            labels: spec.labels.clone(),
            declared_s_inf: spec.mu.s_inf,
            spec,
        })
    }

    /// Declared supremum of finite norm moments: infinite for finite
    /// support unless narrowed in the file.
    pub fn s_inf(&self) -> f64 {
        match self.declared_s_inf {
            Some(s) => s,
            None => f64::INFINITY,
        }
    }

    pub fn rng(&self, domain_tag: u64, indices: &[u64]) -> ChaCha8Rng {
        derive_rng(self.seed, domain_tag, indices)
    }

    /// Random product S_n = a_n ... a_1 of i.i.d. draws from mu.
    pub fn sample_product(&self, n: usize, rng: &mut impl Rng) -> Matrix {
        let mut s = PositiveMatrix::identity(self.dim);
        for _ in 0..n {
            s = self.mu.sample(self.dim, rng).mul(&s);
        }
        s
    }
}

// ---------------------------------------------------------------------------
// audits

/// Outcome of the interior-hitting probe: how quickly random products
/// S_n = a_n ... a_1 reach the strictly positive semigroup.
#[derive(Debug, Clone, Serialize)]
pub struct ContractivityReport {
    pub trials: usize,
    pub n_max: usize,
    /// Fraction of trials whose product entered the interior by n_max.
    pub hit_probability: f64,
    /// hitting_counts[n - 1] = number of trials first strictly positive at n.
    pub hitting_counts: Vec<usize>,
    pub censored: usize,
    /// Most frequent hitting time, when any trial hit.
    pub modal_n: Option<usize>,
    /// Largest tau with all entries of S_{n0} > tau across trials hitting at
    /// the modal time n0 (the witness of a positive interior-hitting event).
    pub tau_estimate: Option<f64>,
}

pub fn check_contractivity(
    scenario: &Scenario,
    trials: usize,
    n_max: usize,
) -> ContractivityReport {
    let mut hitting_counts = vec![0usize; n_max];
    let mut per_trial: Vec<Option<(usize, f64)>> = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = scenario.rng(rng::domain::MODEL, &[1, t as u64]);
        let mut s = PositiveMatrix::identity(scenario.dim);
        let mut hit = None;
        for n in 1..=n_max {
            s = scenario.mu.sample(scenario.dim, &mut rng).mul(&s);
            if s.is_strictly_positive() {
                hit = Some((n, s.min_entry()));
                break;
            }
        }
        if let Some((n, _)) = hit {
            hitting_counts[n - 1] += 1;
        }
        per_trial.push(hit);
    }
    let hits = trials - per_trial.iter().filter(|h| h.is_none()).count();
    let modal_n = hitting_counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .max_by_key(|(_, &c)| c)
        .map(|(i, _)| i + 1);
    let tau_estimate = modal_n.map(|n0| {
        per_trial
            .iter()
            .flatten()
            .filter(|(n, _)| *n == n0)
            .map(|&(_, min_entry)| min_entry)
            .fold(f64::INFINITY, f64::min)
    });
    ContractivityReport {
        trials,
        n_max,
        hit_probability: hits as f64 / trials as f64,
        hitting_counts,
        censored: trials - hits,
        modal_n,
        tau_estimate,
    }
}

/// Outcome of the strong-irreducibility probe: dominant directions of
/// proximal random products and whether they span the whole space.
#[derive(Debug, Clone, Serialize)]
pub struct SpanningReport {
    pub trials: usize,
    pub proximal_count: usize,
    pub rank: usize,
    pub spanning: bool,
    /// An orthonormal basis extracted from the dominant directions found.
    pub basis: Vec<Vec<f64>>,
}

/// Sample random products of random length up to `max_len`, Perron-solve
/// the proximal ones, and measure the linear span of their dominant
/// directions. Spanning (rank = dim) certifies that the support of the
/// stationary family is not confined to a proper subspace.
pub fn check_spanning(
    scenario: &Scenario,
    trials: usize,
    max_len: usize,
) -> Result<SpanningReport, ModelError> {
    let d = scenario.dim;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut proximal_count = 0usize;
    for t in 0..trials {
        let mut rng = scenario.rng(rng::domain::MODEL, &[2, t as u64]);
        let len = rng.gen_range(1..=max_len.max(1));
        let product = scenario.sample_product(len, &mut rng);
        let eigen = match perron(&product, 1e-12) {
            Ok(e) => e,
            Err(ConeError::NotProximal { .. }) | Err(ConeError::NonConvergence(_)) => continue,
            Err(e) => return Err(e.into()),
        };
        proximal_count += 1;
        let mut dir = eigen.v;
        let norm: f64 = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in dir.iter_mut() {
            *x /= norm;
        }
        // Gram-Schmidt against the collected basis
        for b in &basis {
            let proj: f64 = dir.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in dir.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let residual: f64 = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if residual > 1e-8 {
            for x in dir.iter_mut() {
                *x /= residual;
            }
            basis.push(dir);
            if basis.len() == d {
                break;
            }
        }
    }
    if proximal_count < d {
        return Err(ModelError::InsufficientProximalSamples {
            found: proximal_count,
            needed: d,
        });
    }
    Ok(SpanningReport {
        trials,
        proximal_count,
        rank: basis.len(),
        spanning: basis.len() == d,
        basis,
    })
}

/// One audited moment: exact when the law has finite support, otherwise a
/// Monte Carlo estimate with a 95% interval.
#[derive(Debug, Clone, Serialize)]
pub struct AuditedMoment {
    pub value: f64,
    pub exact: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_hi: Option<f64>,
}

impl AuditedMoment {
    fn exact(value: f64) -> Self {
        AuditedMoment {
            value,
            exact: true,
            ci_lo: None,
            ci_hi: None,
        }
    }

    fn from_ci(ci: MeanCi) -> Self {
        AuditedMoment {
            value: ci.mean,
            exact: false,
            ci_lo: Some(ci.lo),
            ci_hi: Some(ci.hi),
        }
    }
}

/// Result of checking the declared existence hypotheses on a scenario.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisAudit {
    pub s1: f64,
    pub s2: f64,
    pub threshold: f64,
    pub e_norm_s1: AuditedMoment,
    pub e_norm_s2: AuditedMoment,
    pub e_b_s2: AuditedMoment,
    pub b_moment_finite: bool,
    pub pass_norm_s1: bool,
    pub pass_norm_s2: bool,
    pub pass_b_s2: bool,
    pub pass: bool,
}

/// Audit E||A||^{s1} <= 1/N, E||A||^{s2} <= 1/N and finiteness of
/// E|B|^{s2}. Finite-support moments are evaluated exactly; generator laws
/// fall back to Monte Carlo with `trials` draws.
pub fn hypothesis_audit(scenario: &Scenario, trials: usize) -> HypothesisAudit {
    let threshold = 1.0 / scenario.n_branch as f64;
    let norm_moment = |s: f64, stream: u64| -> AuditedMoment {
        match scenario.mu.exact_norm_moment(s) {
            Some(v) => AuditedMoment::exact(v),
            None => {
                let mut rng = scenario.rng(rng::domain::MODEL, &[3, stream]);
                let draws: Vec<f64> = (0..trials)
                    .map(|_| operator_norm(&scenario.mu.sample(scenario.dim, &mut rng)).powf(s))
                    .collect();
                AuditedMoment::from_ci(mean_ci(&draws, Z95))
            }
        }
    };
    let e_norm_s1 = norm_moment(scenario.s1, 0);
    let e_norm_s2 = norm_moment(scenario.s2, 1);
    let e_b_s2 = match scenario.eta.is_point_mass() {
        Some(v) => {
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            AuditedMoment::exact(norm.powf(scenario.s2))
        }
        None => {
            let mut rng = scenario.rng(rng::domain::MODEL, &[3, 2]);
            let draws: Vec<f64> = (0..trials)
                .map(|_| {
                    let b = scenario.eta.sample(scenario.dim, &mut rng);
                    b.iter().map(|x| x * x).sum::<f64>().sqrt().powf(scenario.s2)
                })
                .collect();
            AuditedMoment::from_ci(mean_ci(&draws, Z95))
        }
    };
    let b_moment_finite = scenario.eta.moment_finite(scenario.s2);
    let pass_norm_s1 = e_norm_s1.value <= threshold;
    let pass_norm_s2 = e_norm_s2.value <= threshold;
    let pass_b_s2 = b_moment_finite && e_b_s2.value.is_finite();
    HypothesisAudit {
        s1: scenario.s1,
        s2: scenario.s2,
        threshold,
        e_norm_s1,
        e_norm_s2,
        e_b_s2,
        b_moment_finite,
        pass_norm_s1,
        pass_norm_s2,
        pass_b_s2,
        pass: pass_norm_s1 && pass_norm_s2 && pass_b_s2,
    }
}
