//! Statistical oracles for the tree sampler at realistic scales:
//! closed-form first moments, coupled resimulation across depths, the
//! plan/decay rates against the spectral prediction, and KS calibration
//! of the distributional tests.

use std::sync::Arc;

use taillab::branching::{
    self, fixed_point_test, initial_law_convergence, moment_decay_study, plan_depth, sample_r_population,
    sample_w, uniqueness_coupling_test, BranchingConfig, BranchingError, DEFAULT_NODE_BUDGET,
};
use taillab::cone;
use taillab::grid::SphereGrid;
use taillab::model::{Scenario, VectorLaw};
use taillab::rng::domain;
use taillab::spectral::{self, EIGEN_TOL};
use taillab::stats::{self, kolmogorov_cdf, ks_statistic, mean_ci};

fn scenario(text: &str) -> Scenario {
    Scenario::from_json_str(text).expect("test scenario parses")
}

fn reference2d() -> Scenario {
    scenario(
        r#"{
        "dim": 2, "N": 2,
        "mu": {"atoms": [
            {"matrix": [[0.0078125, 0.00390625], [0.00390625, 0.00390625]], "p": 0.9},
            {"matrix": [[2.0, 2.0], [2.0, 4.0]], "p": 0.1}
        ]},
        "eta": {"generator": "product", "params": {"components": [
            {"dist": "uniform", "lo": 0.5, "hi": 1.5},
            {"dist": "uniform", "lo": 0.5, "hi": 1.5}
        ]}},
        "s1": 0.5, "s2": 0.9, "seed": 20260101
    }"#,
    )
}

// Equal operator norms on both atoms: level norms concentrate, so mean
// comparisons come with tight intervals.
fn mild2d() -> Scenario {
    scenario(
        r#"{
        "dim": 2, "N": 2,
        "mu": {"atoms": [
            {"matrix": [[0.3, 0.15], [0.15, 0.3]], "p": 0.5},
            {"matrix": [[0.15, 0.3], [0.3, 0.15]], "p": 0.5}
        ]},
        "eta": {"generator": "product", "params": {"components": [
            {"dist": "uniform", "lo": 0.5, "hi": 1.5},
            {"dist": "uniform", "lo": 0.5, "hi": 1.5}
        ]}},
        "s1": 0.5, "s2": 0.9, "seed": 777
    }"#,
    )
}

#[test]
fn w1_mean_matches_matrix_closed_form() {
    // E W_1 = N E[A] E[B] componentwise; E[A] and E[B] by hand
    let sc = reference2d();
    let ea = [
        [0.9 * 0.0078125 + 0.1 * 2.0, 0.9 * 0.00390625 + 0.1 * 2.0],
        [0.9 * 0.00390625 + 0.1 * 2.0, 0.9 * 0.00390625 + 0.1 * 4.0],
    ];
    let expect = [
        2.0 * (ea[0][0] + ea[0][1]),
        2.0 * (ea[1][0] + ea[1][1]),
    ];
    // one-level trees, read off the W_1 vector per component
    let mut eng = taillab::branching::TreeEngine::new(&sc, 1, None);
    let mut c0 = Vec::with_capacity(20_000);
    let mut c1 = Vec::with_capacity(20_000);
    for i in 0..20_000u64 {
        eng.run(taillab::rng::derive_seed(sc.seed, domain::TREE, &[41, 0, i]));
        let w1 = eng.level(1);
        c0.push(w1[0]);
        c1.push(w1[1]);
    }
    let ci0 = mean_ci(&c0, stats::Z99);
    let ci1 = mean_ci(&c1, stats::Z99);
    assert!(
        ci0.lo <= expect[0] && expect[0] <= ci0.hi,
        "component 0: E W_1 = {} outside [{}, {}]",
        expect[0],
        ci0.lo,
        ci0.hi
    );
    assert!(
        ci1.lo <= expect[1] && expect[1] <= ci1.hi,
        "component 1: E W_1 = {} outside [{}, {}]",
        expect[1],
        ci1.lo,
        ci1.hi
    );
}

#[test]
fn resimulation_of_deeper_population_adds_one_level() {
    // same stream at depths 6 and 7: the per-sample difference is the
    // level-7 draw of the shared tree, and its mean must agree with an
    // independently sampled E|W_7|
    let sc = mild2d();
    let samples = 4000;
    let mut c6 = BranchingConfig::new(6, samples);
    let mut c7 = BranchingConfig::new(7, samples);
    c6.s_for_bound = 1.0;
    c7.s_for_bound = 1.0;
    let pop6 = sample_r_population(&sc, &c6, 55).unwrap();
    let pop7 = sample_r_population(&sc, &c7, 55).unwrap();
    let diffs: Vec<f64> = pop6
        .iter()
        .zip(&pop7)
        .map(|(a, b)| {
            let d: Vec<f64> = b.r.iter().zip(&a.r).map(|(x, y)| x - y).collect();
            cone::norm(&d)
        })
        .collect();
    let ci_diff = mean_ci(&diffs, stats::Z95);

    let mut rng = sc.rng(domain::TREE, &[56]);
    let w7: Vec<f64> = (0..samples)
        .map(|_| cone::norm(&sample_w(&sc, 7, DEFAULT_NODE_BUDGET, &mut rng).unwrap().w))
        .collect();
    let ci_w = mean_ci(&w7, stats::Z95);
    assert!(
        ci_diff.overlaps(&ci_w),
        "diff CI [{}, {}] vs W_7 CI [{}, {}]",
        ci_diff.lo,
        ci_diff.hi,
        ci_w.lo,
        ci_w.hi
    );
    assert!((ci_diff.mean - ci_w.mean).abs() <= 0.05 * ci_w.mean);
}

#[test]
fn reference_pilot_rate_tracks_spectral_kappa() {
    let sc = reference2d();
    let grid = Arc::new(SphereGrid::new(2, 256));
    let chi = spectral::solve_chi(&sc, &grid, None, 1e-10).unwrap().chi;
    let s = 0.9 * chi.min(1.0);
    let sol = spectral::solve_spectral(&sc, &grid, s, EIGEN_TOL).unwrap();
    let n_kappa = 2.0 * sol.kappa;
    assert!(n_kappa < 1.0, "contraction window missed: {n_kappa}");

    // near chi the contraction is so slow that an eps = 1e-3 truncation
    // needs a tree beyond any budget; the plan must say so
    assert!(matches!(
        plan_depth(&sc, &sol, s, 1e-3, DEFAULT_NODE_BUDGET),
        Err(BranchingError::BudgetExceeded { .. })
    ));

    // with the gate lifted, the fitted decay rate is the spectral one
    let plan = plan_depth(&sc, &sol, s, 1e-3, u64::MAX).unwrap();
    assert!(
        (plan.eta_hat - n_kappa).abs() <= 0.15 * n_kappa,
        "eta_hat {} vs N kappa {}",
        plan.eta_hat,
        n_kappa
    );
    assert!(plan.eta_hi < 1.0);

    // away from chi the same scenario plans a modest feasible depth
    let sol_mid = spectral::solve_spectral(&sc, &grid, 0.5, EIGEN_TOL).unwrap();
    let plan_mid = plan_depth(&sc, &sol_mid, 0.5, 1e-3, DEFAULT_NODE_BUDGET).unwrap();
    assert!(
        (5..=20).contains(&plan_mid.depth),
        "depth {} out of the expected band",
        plan_mid.depth
    );
    // halving eps deepens by about s log 2 / log(1/eta) in the s-metric
    let plan_half = plan_depth(&sc, &sol_mid, 0.5, 5e-4, DEFAULT_NODE_BUDGET).unwrap();
    let predicted = 0.5 * std::f64::consts::LN_2 / (1.0 / plan_mid.eta_hat).ln();
    let shift = (plan_half.depth - plan_mid.depth) as f64;
    assert!(
        (shift - predicted).abs() <= 1.0,
        "shift {shift} vs predicted {predicted}"
    );
}

#[test]
fn reference_moment_rate_within_tolerance() {
    let sc = reference2d();
    let grid = Arc::new(SphereGrid::new(2, 256));
    let chi = spectral::solve_chi(&sc, &grid, None, 1e-10).unwrap().chi;
    let s = 0.9 * chi.min(1.0);
    let mut rng = sc.rng(domain::TREE, &[57]);
    let rep = moment_decay_study(&sc, s, 8, 20_000, DEFAULT_NODE_BUDGET, &mut rng).unwrap();
    let nk = rep.n_kappa.expect("atom law");
    assert!(
        (rep.fitted_rate - nk).abs() <= 0.15 * nk,
        "rate {} vs N kappa {}",
        rep.fitted_rate,
        nk
    );
    assert!(!rep.exceeds_bound);
    // the level-0 row is E|B|^s, a plain law moment
    let mut brng = sc.rng(domain::MODEL, &[58]);
    let b_moms: Vec<f64> = (0..20_000)
        .map(|_| cone::norm(&sc.eta.sample(2, &mut brng)).powf(s))
        .collect();
    let ci = mean_ci(&b_moms, stats::Z99);
    assert!(ci.lo <= rep.rows[0].mean && rep.rows[0].mean <= ci.hi);
}

#[test]
fn fixed_point_populations_match_at_null_level() {
    let sc = reference2d();
    let config = BranchingConfig::new(10, 0);
    let dirs = branching::default_directions(2);
    let mut rng = sc.rng(domain::TREE, &[59]);
    let samples = 4000;
    let rep = fixed_point_test(&sc, &config, samples, &dirs, &mut rng).unwrap();
    // matched truncation depths make the two populations equal in law,
    // so every direction sits at pure KS null noise (99.9% quantile)
    let bound = 1.949 * (2.0 / samples as f64).sqrt();
    for (u, d) in rep.directions.iter().zip(&rep.ks) {
        assert!(*d < bound, "direction {u:?}: KS {d} above null bound {bound}");
    }
}

#[test]
fn uniqueness_report_closes_the_loop() {
    let sc = reference2d();
    let mut config = BranchingConfig::new(8, 0);
    config.s_for_bound = 0.5;
    let ones = VectorLaw::point_mass_unchecked(vec![1.0, 1.0]);
    let mut rng = sc.rng(domain::TREE, &[60]);
    let samples = 3000;
    let rep = uniqueness_coupling_test(&sc, &config, &ones, samples, &mut rng).unwrap();
    assert!(
        rep.max_decomposition_gap <= 1e-10,
        "coupled routes disagree: {}",
        rep.max_decomposition_gap
    );
    assert!(rep.ks_coupled <= 2.0 / samples as f64 + 1e-12);
    let bound = 1.949 * (2.0 / samples as f64).sqrt();
    assert!(
        rep.ks_independent < bound,
        "independent-route KS {} above null bound {bound}",
        rep.ks_independent
    );
    let nk = rep.n_kappa.expect("atom law");
    assert!(
        (rep.leaf_rate - nk).abs() <= 0.15 * nk,
        "leaf rate {} vs N kappa {}",
        rep.leaf_rate,
        nk
    );
    assert!(rep.rate_within_tolerance);
}

#[test]
fn initial_laws_wash_out_monotonically() {
    // the reference law contracts fast along typical paths, so the
    // initial condition is forgotten within a few levels
    let sc = reference2d();
    let zero = VectorLaw::point_mass_unchecked(vec![0.0, 0.0]);
    let big = VectorLaw::point_mass_unchecked(vec![3.0, 3.0]);
    let mut rng = sc.rng(domain::TREE, &[61]);
    let curve = initial_law_convergence(
        &sc,
        &[1, 2, 4, 6, 8],
        &zero,
        &big,
        3000,
        DEFAULT_NODE_BUDGET,
        &mut rng,
    )
    .unwrap();
    for w in curve.windows(2) {
        assert!(w[1].1 <= w[0].1 + 0.01, "KS rose: {:?} -> {:?}", w[0], w[1]);
    }
    assert!(curve.last().unwrap().1 < 0.05 * curve.first().unwrap().1);
}

#[test]
fn ks_null_statistic_is_calibrated() {
    // the scaled two-sample KS statistic follows the Kolmogorov law
    // under the null; check the cdf values it produces look uniform
    let sc = mild2d();
    let samples = 1500usize;
    let mut low = 0;
    let mut high = 0;
    for pair in 0..10u64 {
        let mut ca = BranchingConfig::new(5, samples);
        let mut cb = BranchingConfig::new(5, samples);
        ca.s_for_bound = 1.0;
        cb.s_for_bound = 1.0;
        let a = sample_r_population(&sc, &ca, 100 + 2 * pair).unwrap();
        let b = sample_r_population(&sc, &cb, 101 + 2 * pair).unwrap();
        let diag = vec![std::f64::consts::FRAC_1_SQRT_2; 2];
        let pa: Vec<f64> = a.iter().map(|f| cone::dot(&f.r, &diag)).collect();
        let pb: Vec<f64> = b.iter().map(|f| cone::dot(&f.r, &diag)).collect();
        let d = ks_statistic(&pa, &pb);
        let scaled = d * ((samples * samples) as f64 / (2 * samples) as f64).sqrt();
        let p = kolmogorov_cdf(scaled);
        assert!(p < 0.9995, "null KS too extreme: cdf {p}");
        if p < 0.5 {
            low += 1;
        } else {
            high += 1;
        }
    }
    // a wildly lopsided split would mean mis-scaling
    assert!(low >= 2 && high >= 2, "low {low}, high {high}");
}
