//! The five subcommands. Each artifact-producing run ends with a
//! manifest recording resolved parameters, artifact digests, wall time
//! and node accounting.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use taillab::branching::{
    moment_decay_study, nodes_for_depth, plan_depth, sample_r_population, BranchingConfig,
    BranchingError, PlanReport, PILOT_DEPTH, PILOT_SAMPLES,
};
use taillab::grid::SphereGrid;
use taillab::model::{
    check_contractivity, check_spanning, hypothesis_audit, ModelError, Scenario,
};
use taillab::rng::domain;
use taillab::spectral::{
    alpha_fd_diagnostic, kappa_curve, kappa_mc, logconvexity_ok, lyapunov_alpha, solve_chi,
    solve_spectral, AlphaMode, AlphaOpts, AlphaReport, ChiReport, SpectralError,
    SpectralSolution,
};
use taillab::tailkit::{ar_products, tail_report, TailError, TailOptions, TailReport};

use crate::emit::{csv_bytes, fmt_f64, sha256_hex, to_json, write_manifest, Artifacts, RunManifest};

// ---------------------------------------------------------------------------
// errors and exit codes

/// Failure classes with stable exit codes: 1 hypothesis-audit failure,
/// 2 spectral or analysis failure, 3 missing or invalid input, 4 budget
/// exceeded. Code 0 is success.
#[derive(Debug)]
pub enum CliError {
    Audit(String),
    Spectral(String),
    Input(String),
    Budget(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Audit(_) => 1,
            CliError::Spectral(_) => 2,
            CliError::Input(_) => 3,
            CliError::Budget(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Audit(m)
            | CliError::Spectral(m)
            | CliError::Input(m)
            | CliError::Budget(m) => m,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::Model(m) => CliError::Input(m.to_string()),
            other => CliError::Spectral(other.to_string()),
        }
    }
}

impl From<BranchingError> for CliError {
    fn from(e: BranchingError) -> Self {
        match e {
            BranchingError::BudgetExceeded { .. } => CliError::Budget(e.to_string()),
            BranchingError::Spectral(s) => s.into(),
            other => CliError::Spectral(other.to_string()),
        }
    }
}

impl From<TailError> for CliError {
    fn from(e: TailError) -> Self {
        match e {
            TailError::TooFewSamples { .. }
            | TailError::BadWindow { .. }
            | TailError::DeltaOutOfRange { .. } => CliError::Input(e.to_string()),
            TailError::Spectral(s) => s.into(),
            other => CliError::Spectral(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// shared plumbing

struct LoadedScenario {
    scenario: Scenario,
    path: String,
    sha256: String,
}

fn load_scenario(path: &Path, seed_override: Option<u64>) -> Result<LoadedScenario, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| CliError::Input(format!("{} is not valid UTF-8", path.display())))?;
    let mut scenario = Scenario::from_json_str(&text)?;
    if let Some(seed) = seed_override {
        scenario.seed = seed;
    }
    Ok(LoadedScenario {
        scenario,
        path: path.to_string_lossy().into_owned(),
        sha256: sha256_hex(&bytes),
    })
}

pub fn parse_s_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = text.split(':').map(str::trim).collect();
    let bad = || CliError::Input(format!("--s-grid wants \"a:b:step\", got {text:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].parse().map_err(|_| bad())?;
    let b: f64 = parts[1].parse().map_err(|_| bad())?;
    let step: f64 = parts[2].parse().map_err(|_| bad())?;
    if !(step > 0.0) || b < a || a < 0.0 {
        return Err(bad());
    }
    let count = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|i| a + i as f64 * step).collect())
}

pub fn parse_window(text: &str) -> Result<taillab::tailkit::QuantileWindow, CliError> {
    let parts: Vec<&str> = text.split(':').map(str::trim).collect();
    let bad =
        || CliError::Input(format!("--quantile-window wants \"upper:lower\", got {text:?}"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let upper: f64 = parts[0].parse().map_err(|_| bad())?;
    let lower: f64 = parts[1].parse().map_err(|_| bad())?;
    taillab::tailkit::QuantileWindow::new(upper, lower).map_err(|e| CliError::Input(e.to_string()))
}

pub fn parse_t_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = text.split(':').map(str::trim).collect();
    let bad = || CliError::Input(format!("--t-grid wants \"lo:hi:count\", got {text:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let count: usize = parts[2].parse().map_err(|_| bad())?;
    if !(hi > lo) || count < 2 {
        return Err(bad());
    }
    Ok(taillab::tailkit::uniform_grid(lo, hi, count))
}

/// "auto" or an explicit depth.
pub fn parse_depth(text: &str) -> Result<Option<usize>, CliError> {
    let text = text.trim();
    if text == "auto" {
        return Ok(None);
    }
    text.parse::<usize>().map(Some).map_err(|_| {
        CliError::Input(format!("--depth wants a nonnegative integer or \"auto\", got {text:?}"))
    })
}

fn join_csv(fields: &[String]) -> String {
    fields.join(",")
}

// ---------------------------------------------------------------------------
// check

#[derive(Serialize)]
struct AuditDoc {
    hypotheses: taillab::model::HypothesisAudit,
    contractivity: taillab::model::ContractivityReport,
    spanning: Option<taillab::model::SpanningReport>,
    spanning_note: Option<String>,
    pass: bool,
}

fn audit_scenario(scenario: &Scenario, trials: usize) -> AuditDoc {
    let hypotheses = hypothesis_audit(scenario, trials);
    let contractivity = check_contractivity(scenario, 2_000, 64);
    let (spanning, spanning_note, spanning_ok) =
        match check_spanning(scenario, 400, 12) {
            Ok(rep) => {
                let ok = rep.spanning;
                (Some(rep), None, ok)
            }
            Err(e) => (None, Some(e.to_string()), false),
        };
    let pass = hypotheses.pass && contractivity.hit_probability > 0.0 && spanning_ok;
    AuditDoc {
        hypotheses,
        contractivity,
        spanning,
        spanning_note,
        pass,
    }
}

pub fn cmd_check(
    scenario_path: &Path,
    seed: Option<u64>,
    trials: usize,
) -> Result<i32, CliError> {
    let loaded = load_scenario(scenario_path, seed)?;
    let doc = audit_scenario(&loaded.scenario, trials);
    let json = to_json(&doc);
    std::io::Write::write_all(&mut std::io::stdout().lock(), &json)?;
    Ok(if doc.pass { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// spectral

#[derive(Serialize)]
struct FdDiagnostic {
    /// Centered finite difference of log kappa at chi (informational;
    /// the identity with alpha is not part of the asserted surface).
    value: f64,
    gap_vs_quadrature: f64,
}

#[derive(Serialize)]
struct SpectralDoc<'a> {
    dim: usize,
    grid_k: usize,
    curve: &'a [(f64, f64)],
    logconvexity_ok: bool,
    chi: Option<&'a ChiReport>,
    solution: Option<&'a SpectralSolution>,
    alpha_quadrature: Option<&'a AlphaReport>,
    alpha_ergodic: Option<&'a AlphaReport>,
    alpha_fd: Option<FdDiagnostic>,
}

pub struct SpectralStage {
    pub solution: SpectralSolution,
    pub alpha: f64,
    pub chi: f64,
}

pub struct SpectralParams<'a> {
    pub grid_k: usize,
    pub s_grid: &'a str,
    pub chi: bool,
    pub mc_n: usize,
    pub mc_trials: usize,
}

fn spectral_stage(
    scenario: &Scenario,
    p: &SpectralParams,
    arts: &mut Artifacts,
    params: &mut Map<String, Value>,
) -> Result<Option<SpectralStage>, CliError> {
    let grid = Arc::new(SphereGrid::new(scenario.dim, p.grid_k));
    let s_values = parse_s_grid(p.s_grid)?;
    params.insert("grid_k".into(), json!(p.grid_k));
    params.insert("s_grid".into(), json!(p.s_grid));
    params.insert("mc_n".into(), json!(p.mc_n));
    params.insert("mc_trials".into(), json!(p.mc_trials));
    params.insert("chi".into(), json!(p.chi));

    let curve = kappa_curve(scenario, &grid, &s_values)?;
    let mut rows = Vec::with_capacity(curve.len());
    for (i, &(s, kappa)) in curve.iter().enumerate() {
        let mc = kappa_mc(scenario, s, p.mc_n, p.mc_trials, i as u64)?;
        let last = mc.last().expect("mc_n >= 1");
        rows.push(join_csv(&[
            fmt_f64(s),
            fmt_f64(kappa),
            fmt_f64(last.root),
            fmt_f64(last.root_ci_lo),
            fmt_f64(last.root_ci_hi),
            last.n.to_string(),
        ]));
    }
    arts.put(
        "kappa_curve.csv",
        &csv_bytes(Some("s,kappa_grid,u_n_mc,ci_lo,ci_hi,n"), rows),
    )?;
    let convex = logconvexity_ok(&curve);

    if !p.chi {
        let doc = SpectralDoc {
            dim: scenario.dim,
            grid_k: p.grid_k,
            curve: &curve,
            logconvexity_ok: convex,
            chi: None,
            solution: None,
            alpha_quadrature: None,
            alpha_ergodic: None,
            alpha_fd: None,
        };
        arts.put("spectral.json", &to_json(&doc))?;
        return Ok(None);
    }

    let chi_report = match solve_chi(scenario, &grid, None, 1e-10) {
        Ok(r) => r,
        Err(e @ SpectralError::NoBracket { .. }) => {
            // contract: the curve artifacts still land, then exit 2
            let doc = SpectralDoc {
                dim: scenario.dim,
                grid_k: p.grid_k,
                curve: &curve,
                logconvexity_ok: convex,
                chi: None,
                solution: None,
                alpha_quadrature: None,
                alpha_ergodic: None,
                alpha_fd: None,
            };
            arts.put("spectral.json", &to_json(&doc))?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let solution = solve_spectral(scenario, &grid, chi_report.chi, 1e-12)?;
    let alpha_q = lyapunov_alpha(scenario, &solution, AlphaMode::Quadrature, AlphaOpts::default())?;
    let alpha_e = lyapunov_alpha(scenario, &solution, AlphaMode::Ergodic, AlphaOpts::default())?;
    let h = (1e-3_f64).min(chi_report.chi / 2.0);
    let fd = alpha_fd_diagnostic(scenario, &grid, chi_report.chi, h)?;
    let doc = SpectralDoc {
        dim: scenario.dim,
        grid_k: p.grid_k,
        curve: &curve,
        logconvexity_ok: convex,
        chi: Some(&chi_report),
        solution: Some(&solution),
        alpha_quadrature: Some(&alpha_q),
        alpha_ergodic: Some(&alpha_e),
        alpha_fd: Some(FdDiagnostic {
            value: fd,
            gap_vs_quadrature: fd - alpha_q.alpha,
        }),
    };
    arts.put("spectral.json", &to_json(&doc))?;
    Ok(Some(SpectralStage {
        solution,
        alpha: alpha_q.alpha,
        chi: chi_report.chi,
    }))
}

pub fn cmd_spectral(
    scenario_path: &Path,
    seed: Option<u64>,
    out: &Path,
    p: &SpectralParams,
) -> Result<i32, CliError> {
    let t0 = Instant::now();
    let loaded = load_scenario(scenario_path, seed)?;
    let mut arts = Artifacts::new(out)?;
    let mut params = Map::new();
    params.insert("seed".into(), json!(loaded.scenario.seed));
    let outcome = spectral_stage(&loaded.scenario, p, &mut arts, &mut params);
    finish_manifest(&loaded, "spectral", params, &mut arts, t0, 0)?;
    outcome.map(|_| 0)
}

// ---------------------------------------------------------------------------
// simulate

pub struct SimulateParams<'a> {
    pub depth: &'a str,
    pub eps: f64,
    pub samples: usize,
    pub grid_k: usize,
    pub level_n: usize,
    pub level_s: Option<f64>,
    pub level_samples: usize,
    pub node_budget: u64,
}

pub struct SimulateStage {
    pub population: Vec<Vec<f64>>,
    pub nodes: u64,
}

/// Depth planning for `--depth auto`: scan N kappa(s) on a coarse exponent
/// grid (plus the declared s1, s2) and plan at the argmin. Picking the
/// strongest contraction matters: planning at a weakly contractive s can
/// inflate the depth past any feasible node budget even when a nearby
/// exponent contracts an order of magnitude faster.
fn auto_depth(
    scenario: &Scenario,
    grid_k: usize,
    eps: f64,
    node_budget: u64,
) -> Result<PlanReport, CliError> {
    let grid = Arc::new(SphereGrid::new(scenario.dim, grid_k));
    let mut candidates: Vec<f64> = (1..=40).map(|i| i as f64 * 0.05).collect();
    candidates.push(scenario.s1);
    candidates.push(scenario.s2);
    candidates.sort_by(|a, b| a.total_cmp(b));
    candidates.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut best: Option<(f64, f64)> = None;
    for &s in &candidates {
        let kappa = taillab::spectral::kappa_grid(scenario, &grid, s)?;
        let nk = scenario.n_branch as f64 * kappa;
        if nk < 1.0 && best.map_or(true, |(b, _)| nk < b) {
            best = Some((nk, s));
        }
    }
    let (_, s_star) = best.ok_or_else(|| {
        CliError::Spectral(
            "no moment contraction on the sampled exponent grid; cannot plan a depth".into(),
        )
    })?;
    let solution = solve_spectral(scenario, &grid, s_star, 1e-12)?;
    Ok(plan_depth(scenario, &solution, s_star, eps, node_budget)?)
}

fn simulate_stage(
    scenario: &Scenario,
    p: &SimulateParams,
    arts: &mut Artifacts,
    params: &mut Map<String, Value>,
) -> Result<SimulateStage, CliError> {
    if p.level_n < 2 {
        return Err(CliError::Input(format!(
            "--level-n must be at least 2 to fit a decay rate, got {}",
            p.level_n
        )));
    }
    let mut nodes = 0u64;
    let depth = match parse_depth(p.depth)? {
        Some(d) => {
            params.insert("depth".into(), json!(d));
            d
        }
        None => {
            let plan = auto_depth(scenario, p.grid_k, p.eps, p.node_budget)?;
            nodes += PILOT_SAMPLES as u64 * nodes_for_depth(scenario.n_branch, PILOT_DEPTH) as u64;
            params.insert("depth".into(), json!(plan.depth));
            params.insert("depth_plan".into(), serde_json::to_value(&plan).unwrap());
            plan.depth
        }
    };
    params.insert("eps".into(), json!(p.eps));
    params.insert("samples".into(), json!(p.samples));
    params.insert("node_budget".into(), json!(p.node_budget));

    let mut config = BranchingConfig::new(depth, p.samples);
    config.node_budget = p.node_budget;
    let population: Vec<Vec<f64>> = sample_r_population(scenario, &config, 0)?
        .into_iter()
        .map(|s| s.r)
        .collect();
    nodes += p.samples as u64 * nodes_for_depth(scenario.n_branch, depth) as u64;
    let rows = population
        .iter()
        .map(|r| join_csv(&r.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>()));
    arts.put("samples.csv", &csv_bytes(None, rows))?;

    let level_s = p.level_s.unwrap_or(scenario.s2);
    params.insert("level_s".into(), json!(level_s));
    params.insert("level_n".into(), json!(p.level_n));
    params.insert("level_samples".into(), json!(p.level_samples));
    let mut rng = scenario.rng(domain::TREE, &[71]);
    let study = moment_decay_study(
        scenario,
        level_s,
        p.level_n,
        p.level_samples,
        p.node_budget,
        &mut rng,
    )?;
    nodes += p.level_samples as u64 * nodes_for_depth(scenario.n_branch, p.level_n) as u64;
    let level_rows = study.rows.iter().map(|row| {
        join_csv(&[
            row.n.to_string(),
            fmt_f64(row.mean),
            fmt_f64(row.ci_lo),
            fmt_f64(row.ci_hi),
        ])
    });
    arts.put("levels.csv", &csv_bytes(Some("n,mean,ci_lo,ci_hi"), level_rows))?;
    params.insert(
        "level_fit".into(),
        json!({
            "s": study.s,
            "fitted_rate": study.fitted_rate,
            "rate_se": study.rate_se,
            "n_kappa": study.n_kappa,
            "exceeds_bound": study.exceeds_bound,
        }),
    );

    Ok(SimulateStage { population, nodes })
}

pub fn cmd_simulate(
    scenario_path: &Path,
    seed: Option<u64>,
    out: &Path,
    p: &SimulateParams,
) -> Result<i32, CliError> {
    let t0 = Instant::now();
    let loaded = load_scenario(scenario_path, seed)?;
    let mut arts = Artifacts::new(out)?;
    let mut params = Map::new();
    params.insert("seed".into(), json!(loaded.scenario.seed));
    let outcome = simulate_stage(&loaded.scenario, p, &mut arts, &mut params);
    let nodes = outcome.as_ref().map(|s| s.nodes).unwrap_or(0);
    finish_manifest(&loaded, "simulate", params, &mut arts, t0, nodes)?;
    outcome.map(|_| 0)
}

// ---------------------------------------------------------------------------
// tail

pub struct TailParams<'a> {
    pub grid_k: usize,
    pub use_spectral: bool,
    pub quantile_window: &'a str,
    pub hill_k: usize,
    pub t_grid: &'a str,
    pub formula_stream: u64,
}

#[derive(Deserialize)]
struct SpectralPeek {
    grid_k: usize,
    chi: Option<ChiPeek>,
    alpha_quadrature: Option<AlphaPeek>,
}

#[derive(Deserialize)]
struct ChiPeek {
    chi: f64,
}

#[derive(Deserialize)]
struct AlphaPeek {
    alpha: f64,
}

/// chi, alpha and the spectral solution for the tail stage: either
/// resolved in-process, or pinned by a previous `spectral --chi` run.
fn tail_spectral(
    scenario: &Scenario,
    p: &TailParams,
    out_dir: &Path,
) -> Result<SpectralStage, CliError> {
    if p.use_spectral {
        let path = out_dir.join("spectral.json");
        let text = std::fs::read_to_string(&path).map_err(|_| {
            CliError::Input(format!(
                "{} not found; run `taillab spectral --chi` into this output directory first",
                path.display()
            ))
        })?;
        let peek: SpectralPeek = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("{} unreadable: {e}", path.display())))?;
        let chi = peek
            .chi
            .ok_or_else(|| {
                CliError::Input(format!(
                    "{} holds no chi solve; rerun `taillab spectral` with --chi",
                    path.display()
                ))
            })?
            .chi;
        let alpha = peek
            .alpha_quadrature
            .ok_or_else(|| {
                CliError::Input(format!("{} holds no alpha report", path.display()))
            })?
            .alpha;
        let grid = Arc::new(SphereGrid::new(scenario.dim, peek.grid_k));
        let solution = solve_spectral(scenario, &grid, chi, 1e-12)?;
        return Ok(SpectralStage {
            solution,
            alpha,
            chi,
        });
    }
    let grid = Arc::new(SphereGrid::new(scenario.dim, p.grid_k));
    let chi = solve_chi(scenario, &grid, None, 1e-10)?.chi;
    let solution = solve_spectral(scenario, &grid, chi, 1e-12)?;
    let alpha =
        lyapunov_alpha(scenario, &solution, AlphaMode::Quadrature, AlphaOpts::default())?.alpha;
    Ok(SpectralStage {
        solution,
        alpha,
        chi,
    })
}

fn read_samples_csv(path: &Path, dim: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(dim);
        for field in line.split(',') {
            let x: f64 = field.trim().parse().map_err(|_| {
                CliError::Input(format!(
                    "{} line {}: not a number: {field:?}",
                    path.display(),
                    i + 1
                ))
            })?;
            row.push(x);
        }
        if row.len() != dim {
            return Err(CliError::Input(format!(
                "{} line {}: {} columns, scenario dim is {}",
                path.display(),
                i + 1,
                row.len(),
                dim
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn tail_stage(
    scenario: &Scenario,
    stage: &SpectralStage,
    r_samples: &[Vec<f64>],
    p: &TailParams,
    arts: &mut Artifacts,
    params: &mut Map<String, Value>,
) -> Result<TailReport, CliError> {
    params.insert("quantile_window".into(), json!(p.quantile_window));
    params.insert("hill_k".into(), json!(p.hill_k));
    params.insert("t_grid".into(), json!(p.t_grid));
    params.insert("chi".into(), json!(stage.chi));
    params.insert("alpha".into(), json!(stage.alpha));

    let mut rng = scenario.rng(domain::TAIL, &[7]);
    let ar_samples = ar_products(scenario, r_samples, &mut rng);
    let opts = TailOptions {
        window: parse_window(p.quantile_window)?,
        hill_k: p.hill_k,
        t_grid: parse_t_grid(p.t_grid)?,
        formula_stream: p.formula_stream,
    };
    let directions = taillab::branching::default_directions(scenario.dim);
    let report = tail_report(
        scenario,
        &stage.solution,
        stage.alpha,
        r_samples,
        &ar_samples,
        &directions,
        &opts,
    )?;

    let mut rows = Vec::new();
    for (di, curve) in report.survival.iter().enumerate() {
        for pt in &curve.points {
            rows.push(join_csv(&[
                di.to_string(),
                fmt_f64(pt.t),
                fmt_f64(pt.survival),
                fmt_f64(pt.ci_lo),
                fmt_f64(pt.ci_hi),
            ]));
        }
    }
    arts.put(
        "tail.csv",
        &csv_bytes(Some("direction_index,t,survival,ci_lo,ci_hi"), rows),
    )?;
    arts.put("report.json", &to_json(&report))?;
    Ok(report)
}

pub fn cmd_tail(
    scenario_path: &Path,
    samples_path: &Path,
    seed: Option<u64>,
    out: &Path,
    p: &TailParams,
) -> Result<i32, CliError> {
    let t0 = Instant::now();
    let loaded = load_scenario(scenario_path, seed)?;
    let mut arts = Artifacts::new(out)?;
    let mut params = Map::new();
    params.insert("seed".into(), json!(loaded.scenario.seed));
    params.insert(
        "samples_path".into(),
        json!(samples_path.to_string_lossy()),
    );
    params.insert("use_spectral".into(), json!(p.use_spectral));
    let outcome = (|| {
        let stage = tail_spectral(&loaded.scenario, p, out)?;
        let r_samples = read_samples_csv(samples_path, loaded.scenario.dim)?;
        tail_stage(&loaded.scenario, &stage, &r_samples, p, &mut arts, &mut params)
    })();
    // the tail stage draws single letters, not trees: no node accounting
    finish_manifest(&loaded, "tail", params, &mut arts, t0, 0)?;
    outcome.map(|_| 0)
}

// ---------------------------------------------------------------------------
// full

pub struct FullParams<'a> {
    pub spectral: SpectralParams<'a>,
    pub simulate: SimulateParams<'a>,
    pub tail: TailParams<'a>,
    pub audit_trials: usize,
}

pub fn cmd_full(
    scenario_path: &Path,
    seed: Option<u64>,
    out: &Path,
    p: &FullParams,
) -> Result<i32, CliError> {
    let t0 = Instant::now();
    let loaded = load_scenario(scenario_path, seed)?;
    let scenario = &loaded.scenario;
    let mut arts = Artifacts::new(out)?;
    let mut params = Map::new();
    params.insert("seed".into(), json!(scenario.seed));
    params.insert("audit_trials".into(), json!(p.audit_trials));
    let mut nodes = 0u64;

    let outcome = (|| -> Result<(), CliError> {
        let audit = audit_scenario(scenario, p.audit_trials);
        arts.put("audit.json", &to_json(&audit))?;
        if !audit.pass {
            return Err(CliError::Audit(
                "hypothesis audit failed; see audit.json".into(),
            ));
        }

        let spectral_params = SpectralParams {
            grid_k: p.spectral.grid_k,
            s_grid: p.spectral.s_grid,
            chi: true,
            mc_n: p.spectral.mc_n,
            mc_trials: p.spectral.mc_trials,
        };
        let stage = spectral_stage(scenario, &spectral_params, &mut arts, &mut params)?
            .expect("chi solve requested");

        let sim = simulate_stage(scenario, &p.simulate, &mut arts, &mut params)?;
        nodes += sim.nodes;

        tail_stage(
            scenario,
            &stage,
            &sim.population,
            &p.tail,
            &mut arts,
            &mut params,
        )?;
        Ok(())
    })();

    finish_manifest(&loaded, "full", params, &mut arts, t0, nodes)?;
    outcome.map(|_| 0)
}

// ---------------------------------------------------------------------------

fn finish_manifest(
    loaded: &LoadedScenario,
    subcommand: &str,
    params: Map<String, Value>,
    arts: &mut Artifacts,
    t0: Instant,
    nodes: u64,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        subcommand: subcommand.to_string(),
        scenario_path: loaded.path.clone(),
        scenario_sha256: loaded.sha256.clone(),
        params: Value::Object(params),
        artifacts: arts.records.clone(),
        wall_ms: t0.elapsed().as_millis() as u64,
        nodes_simulated: nodes,
    };
    write_manifest(arts, &manifest)?;
    Ok(())
}
