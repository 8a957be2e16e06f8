//! Oracle checks for the transfer-operator engine at production grid
//! sizes: closed forms, Perron eigendata, refinement studies, and MC
//! cross-checks, each computed by an independent route before being
//! compared with the solver output.

use std::sync::Arc;

use taillab::cone;
use taillab::grid::SphereGrid;
use taillab::model::Scenario;
use taillab::spectral::{
    self, AlphaMode, AlphaOpts, StationaryMode, TransferOperator, EIGEN_TOL,
};
use taillab::Matrix;

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

fn scalar_heavy() -> Scenario {
    scenario(
        r#"{
        "dim": 1, "N": 2,
        "mu": {"atoms": [
            {"matrix": [[0.00390625]], "p": 0.9},
            {"matrix": [[16.0]], "p": 0.1}
        ]},
        "eta": {"generator": "point_mass", "params": {"value": [1.0]}},
        "s1": 0.5, "s2": 0.52, "seed": 5
    }"#,
    )
}

fn scaled_identity() -> Scenario {
    scenario(
        r#"{
        "dim": 2, "N": 2,
        "mu": {"atoms": [{"matrix": [[0.25, 0.0], [0.0, 0.25]], "p": 1.0}]},
        "eta": {"generator": "point_mass", "params": {"value": [1.0, 1.0]}},
        "s1": 0.25, "s2": 0.6, "seed": 11
    }"#,
    )
}

fn singleton_sym() -> Scenario {
    scenario(
        r#"{
        "dim": 2, "N": 2,
        "mu": {"atoms": [{"matrix": [[2.0, 1.0], [1.0, 2.0]], "p": 1.0}]},
        "eta": {"generator": "point_mass", "params": {"value": [1.0, 1.0]}},
        "s1": 0.25, "s2": 0.6, "seed": 7
    }"#,
    )
}

fn grid(dim: usize, k: usize) -> Arc<SphereGrid> {
    Arc::new(SphereGrid::new(dim, k))
}

/// kappa(s) for a point mass at a is r(a)^s; the Perron eigenvalue of
/// [[2,1],[1,2]] is 3 exactly, so the grid value has a closed-form oracle.
#[test]
fn singleton_kappa_matches_perron_power_at_k512() {
    let sc = singleton_sym();
    let g = grid(2, 512);
    let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
    let lambda = cone::perron(&a, 1e-13).unwrap().lambda;
    assert!((lambda - 3.0).abs() < 1e-10);
    for s in [0.5, 1.0, 2.0] {
        let kappa = spectral::kappa_grid(&sc, &g, s).unwrap();
        let oracle = lambda.powf(s);
        let rel = (kappa - oracle).abs() / oracle;
        assert!(rel <= 1e-3, "s = {s}: kappa = {kappa}, oracle = {oracle}, rel = {rel}");
    }
}

/// chi for the scalar two-atom law solves 0.9*2^{-8s} + 0.1*2^{4s} = 1/2.
/// The oracle is an independent bisection on the closed-form moment.
#[test]
fn scalar_chi_agrees_with_independent_bisection() {
    let f = |s: f64| 0.9 * (-8.0 * s).exp2() + 0.1 * (4.0 * s).exp2() - 0.5;
    let (mut a, mut b) = (0.3, 0.8);
    assert!(f(a) < 0.0 && f(b) > 0.0);
    for _ in 0..100 {
        let m = 0.5 * (a + b);
        if f(m) < 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    let oracle = 0.5 * (a + b);
    assert!((oracle - 0.5479577387196524).abs() < 1e-12, "oracle moved: {oracle}");

    let sc = scalar_heavy();
    let g = grid(1, 1);
    let report = spectral::solve_chi(&sc, &g, None, 1e-12).unwrap();
    assert!(
        (report.chi - oracle).abs() <= 1e-6,
        "chi = {}, oracle = {oracle}",
        report.chi
    );
}

/// Scaled identity: every spectral object has a closed form, and the
/// solver must flag the law as degenerate rather than erroring out.
#[test]
fn scaled_identity_closed_forms() {
    let sc = scaled_identity();
    let g = grid(2, 64);
    let report = spectral::solve_chi(&sc, &g, None, 1e-12).unwrap();
    assert!((report.chi - 0.5).abs() < 1e-9);
    let sol = spectral::solve_spectral(&sc, &g, report.chi, EIGEN_TOL).unwrap();
    assert!(sol.degenerate);
    assert!((sol.kappa - 0.5).abs() < 1e-12);
    let alpha = spectral::lyapunov_alpha(&sc, &sol, AlphaMode::Quadrature, AlphaOpts::default())
        .unwrap();
    assert!((alpha.alpha - 0.25_f64.ln()).abs() < 1e-12);
}

/// chi of the reference law is stable under grid refinement and sits in
/// the window pinned by hand: 2 kappa(0.9) < 1 (since E||A||^0.9 < 0.5)
/// and 2 kappa(1) = 2 r(E[A]) ~ 1.0625 > 1.
#[test]
fn reference_chi_stable_under_refinement() {
    let sc = reference2d();
    let coarse = spectral::solve_chi(&sc, &grid(2, 256), None, 1e-10).unwrap();
    let fine = spectral::solve_chi(&sc, &grid(2, 512), None, 1e-10).unwrap();
    assert!(coarse.convexity_ok && fine.convexity_ok);
    assert!(fine.chi > 0.90 && fine.chi < 1.00, "chi = {}", fine.chi);
    assert!(
        (coarse.chi - fine.chi).abs() <= 1e-3,
        "chi(256) = {}, chi(512) = {}",
        coarse.chi,
        fine.chi
    );
}

/// The eigenfunction from power iteration must match the integral formula
/// e(x) = sum_j nu*_j <x,y_j>^s, and the deviation must shrink when the
/// mesh is refined.
#[test]
fn eigenfunction_formula_deviation_shrinks_with_refinement() {
    let sc = reference2d();
    let dev = |k: usize| {
        let sol = spectral::solve_spectral(&sc, &grid(2, k), 1.0, EIGEN_TOL).unwrap();
        spectral::eigenfunction_formula_check(&sol).expect("non-degenerate")
    };
    let coarse = dev(256);
    let fine = dev(512);
    assert!(fine <= 0.02, "deviation at K=512: {fine}");
    assert!(fine < coarse, "no refinement gain: {coarse} -> {fine}");
}

/// Richardson extrapolation of the MC upper bounds u_n^{1/n} (which
/// behave like kappa + c/n) must land on the grid kappa. Run at small s
/// where the rare heavy path carries negligible moment mass, so the MC
/// mean is trustworthy.
#[test]
fn kappa_mc_extrapolation_matches_grid_kappa() {
    let sc = reference2d();
    let g = grid(2, 256);
    let s = 0.3;
    let kappa = spectral::kappa_grid(&sc, &g, s).unwrap();
    let rows = spectral::kappa_mc(&sc, s, 8, 20_000, 0).unwrap();
    let r4 = &rows[3];
    let r8 = &rows[7];
    let extrapolated = 2.0 * r8.root - r4.root;
    let width = 2.0 * (r8.root_ci_hi - r8.root_ci_lo) + (r4.root_ci_hi - r4.root_ci_lo);
    assert!(
        (extrapolated - kappa).abs() <= width + 0.02 * kappa,
        "extrapolated = {extrapolated}, kappa = {kappa}, width = {width}"
    );
    // every computed root is an upper bound up to CI slack
    for row in &rows {
        assert!(row.root_ci_hi >= kappa * (1.0 - 1e-3), "n = {}", row.n);
    }
}

#[test]
fn kappa_at_zero_is_one_for_every_fixture() {
    for (sc, dim, k) in [
        (reference2d(), 2, 256),
        (scalar_heavy(), 1, 1),
        (scaled_identity(), 2, 64),
        (singleton_sym(), 2, 64),
    ] {
        let kappa = spectral::kappa_grid(&sc, &grid(dim, k), 0.0).unwrap();
        assert!((kappa - 1.0).abs() <= 1e-10, "kappa(0) = {kappa}");
    }
}

#[test]
fn kappa_curve_is_log_convex_on_uniform_grid() {
    let sc = reference2d();
    let g = grid(2, 256);
    let s_values: Vec<f64> = (1..=10).map(|i| 0.2 * i as f64).collect();
    let curve = spectral::kappa_curve(&sc, &g, &s_values).unwrap();
    assert!(spectral::logconvexity_ok(&curve));
    for w in curve.windows(3) {
        let mid = w[1].1;
        let gm = (w[0].1 * w[2].1).sqrt();
        assert!(mid <= gm * (1.0 + 1e-8), "bump at s = {}", w[1].0);
    }
}

/// Cocycle identity in log space: exact rearrangement, so the residual is
/// pure floating-point noise regardless of mesh resolution.
#[test]
fn cocycle_residual_below_1e12_on_coarse_and_fine_grids() {
    let sc = reference2d();
    let (atoms, _) = sc.mu.atoms().unwrap();
    for k in [64, 512] {
        let sol = spectral::solve_spectral(&sc, &grid(2, k), 0.95, EIGEN_TOL).unwrap();
        let mut pick = 987654321u64;
        for trial in 0..200 {
            // cheap deterministic index stream; the word content is
            // irrelevant as long as it varies
            pick = pick.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let len = 2 + (pick >> 33) as usize % 11;
            let word: Vec<Matrix> = (0..len)
                .map(|j| atoms[((pick >> (j % 48)) & 1) as usize].clone())
                .collect();
            let theta = 0.03 + 1.5 * ((pick >> 11) as f64 / (1u64 << 53) as f64);
            let x = vec![theta.cos().abs(), theta.sin().abs()];
            let split = (pick % (len as u64 + 1)) as usize;
            let res = spectral::cocycle_residual(&sol, &x, &word, split).unwrap();
            assert!(res <= 1e-12, "K = {k}, trial {trial}: residual {res}");
        }
    }
}

/// Direct and iterated stationary measures at production resolution.
#[test]
fn stationary_modes_agree_at_k512() {
    let sc = reference2d();
    let g = grid(2, 512);
    let s = 0.95;
    let sol = spectral::solve_spectral(&sc, &g, s, EIGEN_TOL).unwrap();
    for starred in [false, true] {
        let op = TransferOperator::build(&sc, &g, s, starred).unwrap();
        let direct = spectral::stationary_measure(&sol, &op, StationaryMode::Direct).unwrap();
        let iterate = spectral::stationary_measure(&sol, &op, StationaryMode::Iterate).unwrap();
        let tv = spectral::total_variation(&direct, &iterate);
        assert!(tv <= 1e-8, "starred = {starred}: tv = {tv}");
        let q = spectral::build_q(&op, sol.kappa, &sol.e_fun);
        let k = op.size();
        for i in 0..k {
            let row_sum: f64 = q[i * k..(i + 1) * k].iter().sum();
            assert!(
                (row_sum - 1.0).abs() <= 1e-10,
                "starred = {starred}, row {i}: {row_sum}"
            );
        }
    }
}

/// alpha(chi) > 0 for the reference law (the tail theorem needs it), and
/// the quadrature and ergodic routes agree within the chain CI.
#[test]
fn reference_alpha_positive_and_modes_agree() {
    let sc = reference2d();
    let g = grid(2, 256);
    let chi = spectral::solve_chi(&sc, &g, None, 1e-10).unwrap().chi;
    let sol = spectral::solve_spectral(&sc, &g, chi, EIGEN_TOL).unwrap();
    let quad = spectral::lyapunov_alpha(&sc, &sol, AlphaMode::Quadrature, AlphaOpts::default())
        .unwrap();
    let erg = spectral::lyapunov_alpha(
        &sc,
        &sol,
        AlphaMode::Ergodic,
        AlphaOpts {
            chains: 24,
            steps: 6000,
        },
    )
    .unwrap();
    assert!(quad.alpha > 0.0, "alpha = {}", quad.alpha);
    assert!(erg.alpha > 0.0);
    let ci = erg.ci.unwrap();
    let slack = ci.half_width();
    assert!(
        quad.alpha >= ci.lo - slack && quad.alpha <= ci.hi + slack,
        "quadrature {} vs ergodic [{}, {}]",
        quad.alpha,
        ci.lo,
        ci.hi
    );
    // informational finite-difference cross-check must at least carry the
    // same sign on this law
    let fd = spectral::alpha_fd_diagnostic(&sc, &g, chi, 1e-3).unwrap();
    assert!(fd > 0.0, "fd diagnostic = {fd}");
}
