//! Shared estimators: confidence intervals, deterministic summation,
//! order statistics, least squares, and the two-sample KS machinery.

/// Fixed-order pairwise summation. Deterministic for a given slice order,
/// which keeps parallel merges bitwise reproducible, and more accurate than
/// a left fold.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean with a central-limit confidence interval at +-z standard
/// errors.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MeanCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl MeanCi {
    pub fn half_width(&self) -> f64 {
        (self.hi - self.lo) / 2.0
    }

    pub fn overlaps(&self, other: &MeanCi) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

pub fn mean_ci(xs: &[f64], z: f64) -> MeanCi {
    let n = xs.len();
    assert!(n > 0, "mean of empty sample");
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return MeanCi {
            mean,
            lo: mean,
            hi: mean,
            n,
        };
    }
    let devs: Vec<f64> = xs.iter().map(|&x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&devs) / (n as f64 - 1.0);
    let se = (var / n as f64).sqrt();
    MeanCi {
        mean,
        lo: mean - z * se,
        hi: mean + z * se,
        n,
    }
}

/// z quantiles used throughout; 95% and 99% two-sided.
pub const Z95: f64 = 1.959963984540054;
pub const Z99: f64 = 2.5758293035489004;

/// Ordinary least squares of y on x.
#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_se: f64,
    pub residual_rms: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> LineFit {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    assert!(xs.len() >= 2, "line fit needs two points");
    let mx = pairwise_sum(xs) / n;
    let my = pairwise_sum(ys) / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    assert!(sxx > 0.0, "degenerate abscissae");
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss_res = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let r = y - intercept - slope * x;
        ss_res += r * r;
    }
    let dof = (xs.len() as f64 - 2.0).max(1.0);
    let slope_se = (ss_res / dof / sxx).sqrt();
    LineFit {
        intercept,
        slope,
        slope_se,
        residual_rms: (ss_res / n).sqrt(),
    }
}

/// Weighted least squares with inverse-variance style weights. The
/// slope error is scaled by the weighted residual chi-square, so only
/// relative weights matter.
pub fn fit_line_weighted(xs: &[f64], ys: &[f64], ws: &[f64]) -> LineFit {
    assert_eq!(xs.len(), ys.len());
    assert_eq!(xs.len(), ws.len());
    assert!(xs.len() >= 2, "line fit needs two points");
    assert!(ws.iter().all(|&w| w > 0.0), "weights must be positive");
    let wsum = pairwise_sum(ws);
    let mx = xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / wsum;
    let my = ys.iter().zip(ws).map(|(y, w)| y * w).sum::<f64>() / wsum;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((&x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        sxx += w * (x - mx) * (x - mx);
        sxy += w * (x - mx) * (y - my);
    }
    assert!(sxx > 0.0, "degenerate abscissae");
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut chi2 = 0.0;
    let mut ss_res = 0.0;
    for ((&x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        let r = y - intercept - slope * x;
        chi2 += w * r * r;
        ss_res += r * r;
    }
    let dof = (xs.len() as f64 - 2.0).max(1.0);
    LineFit {
        intercept,
        slope,
        slope_se: (chi2 / dof / sxx).sqrt(),
        residual_rms: (ss_res / xs.len() as f64).sqrt(),
    }
}

/// Order statistic at upper-tail probability q: the ceil(q n)-th largest
/// value. `sorted_desc` must be sorted descending.
pub fn upper_quantile(sorted_desc: &[f64], q: f64) -> f64 {
    assert!(!sorted_desc.is_empty());
    assert!((0.0..=1.0).contains(&q));
    let k = ((q * sorted_desc.len() as f64).ceil() as usize).clamp(1, sorted_desc.len());
    sorted_desc[k - 1]
}

pub fn sort_descending(xs: &mut [f64]) {
    xs.sort_by(|a, b| b.partial_cmp(a).expect("NaN in sample"));
}

/// Two-sample Kolmogorov-Smirnov statistic, tie-aware.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).expect("NaN in sample"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("NaN in sample"));
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Kolmogorov limit distribution K(x) = P(sup |B(t)| <= x), via the
/// alternating series; governs sqrt(n m / (n + m)) * D under the null.
pub fn kolmogorov_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (1.0 - 2.0 * sum).clamp(0.0, 1.0)
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 polynomial for erf
/// (absolute error below 1.5e-7, adequate for diagnostics).
pub fn normal_cdf(x: f64) -> f64 {
    let t = x / std::f64::consts::SQRT_2;
    0.5 * (1.0 + erf(t))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|k| k as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }

    #[test]
    fn mean_ci_covers_known_mean() {
        let xs: Vec<f64> = (0..100).map(|k| (k % 5) as f64).collect();
        let ci = mean_ci(&xs, Z95);
        assert!((ci.mean - 2.0).abs() < 1e-12);
        assert!(ci.lo < 2.0 && 2.0 < ci.hi);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let xs: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 0.5 * x).collect();
        let fit = fit_line(&xs, &ys);
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.intercept - 3.0).abs() < 1e-12);
        assert!(fit.slope_se < 1e-12);
    }

    #[test]
    fn ks_statistic_on_disjoint_and_identical_samples() {
        let a = [1.0, 2.0, 3.0];
        let b = [10.0, 11.0, 12.0];
        assert_eq!(ks_statistic(&a, &b), 1.0);
        assert_eq!(ks_statistic(&a, &a), 0.0);
    }

    #[test]
    fn ks_statistic_handles_ties_across_samples() {
        let a = [1.0, 2.0, 2.0, 3.0];
        let b = [2.0, 2.0, 4.0];
        // after value 2: F_a = 3/4, F_b = 2/3; after 3: 1 vs 2/3
        let d = ks_statistic(&a, &b);
        assert!((d - (1.0 - 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn kolmogorov_cdf_classical_quantiles() {
        // classical two-sided critical values
        assert!((kolmogorov_cdf(1.358) - 0.95).abs() < 2e-3);
        assert!((kolmogorov_cdf(1.628) - 0.99).abs() < 2e-3);
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-9);
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        assert!((normal_cdf(-1.959964) - 0.025).abs() < 1e-6);
    }

    #[test]
    fn upper_quantile_picks_order_statistics() {
        let xs = [9.0, 7.0, 5.0, 3.0, 1.0];
        assert_eq!(upper_quantile(&xs, 0.2), 9.0);
        assert_eq!(upper_quantile(&xs, 0.4), 7.0);
        assert_eq!(upper_quantile(&xs, 1.0), 1.0);
    }
}
