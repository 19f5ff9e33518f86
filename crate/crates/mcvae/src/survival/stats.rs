//! Rank-based tests for comparing configurations across folds: Friedman
//! omnibus test, Nemenyi post-hoc pairwise comparisons, one-sided Wilcoxon
//! signed-rank, and Holm step-down p-value adjustment.

use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_ur;

use crate::error::{McvaeError, Result};

/// Standard normal CDF.
fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// Chi-squared survival function via the regularized upper incomplete gamma.
fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(df / 2.0, x / 2.0)
}

/// Ranks with ties sharing the average of their positions (rank 1 = smallest).
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0; // mean of positions i+1 ..= j
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Mean rank per treatment (rank 1 = smallest value).
    pub mean_ranks: Vec<f64>,
    pub n_blocks: usize,
    pub n_treatments: usize,
}

/// Friedman test on a blocks-by-treatments table, with the tie-corrected
/// chi-squared statistic on `k - 1` degrees of freedom.
///
/// A table whose blocks are all completely tied carries no rank
/// information; it yields statistic 0 and p-value 1.
pub fn friedman(data: &[Vec<f64>]) -> Result<FriedmanResult> {
    let n = data.len();
    if n < 2 {
        return Err(McvaeError::InvalidArgument(format!(
            "friedman needs at least 2 blocks, got {n}"
        )));
    }
    let k = data[0].len();
    if k < 2 {
        return Err(McvaeError::InvalidArgument(format!(
            "friedman needs at least 2 treatments, got {k}"
        )));
    }
    for (i, row) in data.iter().enumerate() {
        if row.len() != k {
            return Err(McvaeError::DimensionMismatch {
                what: format!("friedman block {i}"),
                expected: k,
                got: row.len(),
            });
        }
    }

    let mut rank_sums = vec![0.0; k];
    let mut tie_term = 0.0;
    for row in data {
        let ranks = average_ranks(row);
        for (s, r) in rank_sums.iter_mut().zip(&ranks) {
            *s += r;
        }
        // tie groups within this block
        let mut sorted = row.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < k {
            let mut j = i;
            while j < k && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
    }

    let nf = n as f64;
    let kf = k as f64;
    let uncorrected =
        12.0 / (nf * kf * (kf + 1.0)) * rank_sums.iter().map(|r| r * r).sum::<f64>()
            - 3.0 * nf * (kf + 1.0);
    let correction = 1.0 - tie_term / (nf * kf * (kf * kf - 1.0));
    let mean_ranks: Vec<f64> = rank_sums.iter().map(|r| r / nf).collect();
    if correction <= 0.0 {
        return Ok(FriedmanResult {
            statistic: 0.0,
            p_value: 1.0,
            mean_ranks,
            n_blocks: n,
            n_treatments: k,
        });
    }
    let statistic = uncorrected / correction;
    Ok(FriedmanResult {
        statistic,
        p_value: chi2_sf(statistic, kf - 1.0),
        mean_ranks,
        n_blocks: n,
        n_treatments: k,
    })
}

/// Survival function of the range of `k` iid standard normals (the
/// studentized range with infinite degrees of freedom), by Simpson
/// integration of `k * phi(z) * (Phi(z) - Phi(z - q))^(k-1)`.
pub fn studentized_range_sf(q: f64, k: usize) -> f64 {
    if q <= 0.0 {
        return 1.0;
    }
    let kf = k as f64;
    let lo = -8.5;
    let hi = 8.5;
    let steps = 2400usize; // even
    let h = (hi - lo) / steps as f64;
    let integrand = |z: f64| {
        let phi = (-0.5 * z * z).exp() * 0.398_942_280_401_432_7;
        let window = norm_cdf(z) - norm_cdf(z - q);
        kf * phi * window.powi(k as i32 - 1)
    };
    let mut acc = integrand(lo) + integrand(hi);
    for s in 1..steps {
        let w = if s % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * integrand(lo + s as f64 * h);
    }
    let cdf = acc * h / 3.0;
    (1.0 - cdf).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct NemenyiResult {
    /// Symmetric matrix of pairwise p-values, diagonal 1.
    pub p_values: Vec<Vec<f64>>,
}

/// Nemenyi post-hoc comparisons from Friedman mean ranks: rank differences
/// scaled by `sqrt(k(k+1)/(12n))` against the studentized range.
pub fn nemenyi(mean_ranks: &[f64], n_blocks: usize) -> Result<NemenyiResult> {
    let k = mean_ranks.len();
    if k < 2 || n_blocks == 0 {
        return Err(McvaeError::InvalidArgument(
            "nemenyi needs >= 2 treatments and >= 1 block".into(),
        ));
    }
    let se = (k as f64 * (k as f64 + 1.0) / (12.0 * n_blocks as f64)).sqrt();
    let mut p = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let q = (mean_ranks[i] - mean_ranks[j]).abs() / se;
            let pv = studentized_range_sf(q, k);
            p[i][j] = pv;
            p[j][i] = pv;
        }
    }
    Ok(NemenyiResult { p_values: p })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences (half-integer under ties).
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_effective: usize,
    /// Whether the exact permutation distribution was used.
    pub exact: bool,
}

/// Exact permutation tail beyond `n = 25` is replaced by the normal
/// approximation with continuity and tie corrections.
const EXACT_LIMIT: usize = 25;

/// One-sided Wilcoxon signed-rank test of `x > y` on paired samples.
///
/// Zero differences are dropped; if every pair is tied the test is
/// undefined and an error is returned. For `n <= 25` the p-value comes
/// from the exact permutation distribution (ties handled by enumerating
/// doubled average ranks); beyond that the normal approximation applies
/// a 0.5 continuity correction and the tie-adjusted variance.
pub fn wilcoxon_signed_rank_greater(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(McvaeError::DimensionMismatch {
            what: "wilcoxon pairs".into(),
            expected: x.len(),
            got: y.len(),
        });
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(McvaeError::AllZeroDifferences);
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    if n <= EXACT_LIMIT {
        // doubled ranks are integers even with average-rank ties
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut count = vec![0.0f64; total + 1];
        count[0] = 1.0;
        for &r in &doubled {
            for s in (r..=total).rev() {
                count[s] += count[s - r];
            }
        }
        let threshold = (2.0 * w_plus).round() as usize;
        let tail: f64 = count[threshold..].iter().sum();
        let p = tail / 2f64.powi(n as i32);
        Ok(WilcoxonResult {
            statistic: w_plus,
            p_value: p,
            n_effective: n,
            exact: true,
        })
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // tie groups over |d|
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j < n && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            tie_term += t * t * t - t;
            i = j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean - 0.5) / var.sqrt();
        Ok(WilcoxonResult {
            statistic: w_plus,
            p_value: 1.0 - norm_cdf(z),
            n_effective: n,
            exact: false,
        })
    }
}

/// Holm step-down adjustment; returns adjusted p-values in input order.
pub fn holm_adjust(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut running_max = 0.0f64;
    for (pos, &idx) in order.iter().enumerate() {
        let scaled = ((m - pos) as f64 * p_values[idx]).min(1.0);
        running_max = running_max.max(scaled);
        adjusted[idx] = running_max;
    }
    adjusted
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[0.62, 0.65, 0.71, 0.65]), vec![1.0, 2.5, 4.0, 2.5]);
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), vec![3.0, 1.0, 2.0]);
    }

    #[test]
    fn friedman_no_ties_analytic() {
        // identical rankings in 4 blocks of 3 -> statistic 8, p = exp(-4)
        let data = vec![vec![1.0, 2.0, 3.0]; 4];
        let r = friedman(&data).unwrap();
        assert!((r.statistic - 8.0).abs() < 1e-12);
        assert!((r.p_value - (-4.0f64).exp()).abs() < 1e-12);
        assert_eq!(r.mean_ranks, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn friedman_with_ties_matches_reference() {
        // frozen from an independent implementation of the tie-corrected test
        let data = vec![
            vec![0.62, 0.65, 0.71, 0.65],
            vec![0.58, 0.60, 0.66, 0.61],
            vec![0.70, 0.70, 0.74, 0.72],
            vec![0.55, 0.59, 0.63, 0.60],
            vec![0.64, 0.66, 0.68, 0.66],
            vec![0.61, 0.63, 0.69, 0.64],
        ];
        let r = friedman(&data).unwrap();
        assert!((r.statistic - 17.210526315789483).abs() < 1e-9, "{}", r.statistic);
        assert!((r.p_value - 0.0006396617833184742).abs() < 1e-12, "{}", r.p_value);
        let expect = [1.0833333333333333, 2.0833333333333335, 4.0, 2.8333333333333335];
        for (a, b) in r.mean_ranks.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn friedman_fully_tied_is_uninformative() {
        let data = vec![vec![1.0, 1.0, 1.0]; 3];
        let r = friedman(&data).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn studentized_range_matches_k2_analytic() {
        // range of two normals: P(R > q) = 2 * (1 - Phi(q / sqrt(2)))
        for q in [0.5, 1.0, 2.0, 2.772, 4.0] {
            let analytic = 2.0 * (1.0 - norm_cdf(q / std::f64::consts::SQRT_2));
            let integ = studentized_range_sf(q, 2);
            assert!((integ - analytic).abs() < 1e-7, "q={q}: {integ} vs {analytic}");
        }
    }

    #[test]
    fn studentized_range_matches_reference_quantiles() {
        // frozen reference survival-function values (infinite df)
        let cases = [
            (2usize, 2.772, 0.04998410355105598),
            (3, 3.314, 0.05004414040611005),
            (4, 3.633, 0.0500149789953781),
            (5, 3.858, 0.04996655955217577),
            (4, 1.0, 0.8943255121281808),
            (3, 0.5, 0.933421945135287),
        ];
        for (k, q, expect) in cases {
            let got = studentized_range_sf(q, k);
            assert!((got - expect).abs() < 1e-7, "k={k} q={q}: {got} vs {expect}");
        }
    }

    #[test]
    fn nemenyi_matches_reference() {
        let mean_ranks = [1.0833333333333333, 2.0833333333333335, 4.0, 2.8333333333333335];
        let r = nemenyi(&mean_ranks, 6).unwrap();
        let expect = [
            (0, 1, 0.5362869683523482),
            (0, 2, 0.0005280998670234016),
            (0, 3, 0.08746638606559032),
            (1, 2, 0.04967616603103042),
            (1, 3, 0.7457723543693917),
            (2, 3, 0.3986313633174331),
        ];
        for (i, j, p) in expect {
            assert!((r.p_values[i][j] - p).abs() < 1e-6, "({i},{j}): {}", r.p_values[i][j]);
            assert_eq!(r.p_values[i][j], r.p_values[j][i]);
        }
        for i in 0..4 {
            assert_eq!(r.p_values[i][i], 1.0);
        }
    }

    #[test]
    fn wilcoxon_exact_small_cases() {
        // d = [1, -2, 3]: W+ = 4, P(W >= 4) = 3/8
        let r = wilcoxon_signed_rank_greater(&[1.0, -2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!(r.exact);
        assert_eq!(r.statistic, 4.0);
        assert!((r.p_value - 0.375).abs() < 1e-15);

        // five positive distinct differences: p = 1 / 2^5
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = wilcoxon_signed_rank_greater(&x, &[0.0; 5]).unwrap();
        assert_eq!(r.statistic, 15.0);
        assert!((r.p_value - 0.03125).abs() < 1e-15);

        // mixed signs, frozen from an independent exact implementation
        let d8 = [2.0, -1.0, 4.0, 3.0, -0.5, 5.0, 1.5, -2.5];
        let r = wilcoxon_signed_rank_greater(&d8, &[0.0; 8]).unwrap();
        assert_eq!(r.statistic, 28.0);
        assert!((r.p_value - 0.09765625).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_exact_handles_ties() {
        // d = [1, 1, 2]: doubled ranks {3, 3, 6}; only the all-positive
        // assignment reaches W+ = 6 -> p = 1/8
        let r = wilcoxon_signed_rank_greater(&[1.0, 1.0, 2.0], &[0.0; 3]).unwrap();
        assert!(r.exact);
        assert!((r.p_value - 0.125).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_ten_straight_wins() {
        let x: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let r = wilcoxon_signed_rank_greater(&x, &[0.0; 10]).unwrap();
        assert!((r.p_value - 1.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_normal_approximation_matches_reference() {
        let x: Vec<f64> = (1..=26).map(|v| v as f64).collect();
        let r = wilcoxon_signed_rank_greater(&x, &[0.0; 26]).unwrap();
        assert!(!r.exact);
        assert_eq!(r.statistic, 351.0);
        assert!((r.p_value - 4.401834884453978e-06).abs() < 1e-12, "{}", r.p_value);

        let d26 = [
            3., 1., -2., 4., 4., -1., 5., 2., 2., 6., -3., 7., 1., 8., 5., -4., 9., 3., 10., 2.,
            -5., 11., 6., 4., 12., 1.,
        ];
        let r = wilcoxon_signed_rank_greater(&d26, &[0.0; 26]).unwrap();
        assert_eq!(r.statistic, 301.5);
        assert!((r.p_value - 0.000705308705755799).abs() < 1e-12, "{}", r.p_value);
    }

    #[test]
    fn wilcoxon_zero_differences() {
        // zeros dropped before ranking
        let r = wilcoxon_signed_rank_greater(&[1.0, 0.0, 2.0], &[0.0; 3]).unwrap();
        assert_eq!(r.n_effective, 2);
        // all zero -> undefined
        assert!(matches!(
            wilcoxon_signed_rank_greater(&[1.0, 2.0], &[1.0, 2.0]),
            Err(McvaeError::AllZeroDifferences)
        ));
    }

    #[test]
    fn holm_adjustment_reference_cases() {
        let adj = holm_adjust(&[0.01, 0.04, 0.03]);
        let expect = [0.03, 0.06, 0.06];
        for (a, b) in adj.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let adj = holm_adjust(&[0.2, 0.01, 0.03, 0.005]);
        let expect = [0.2, 0.03, 0.06, 0.02];
        for (a, b) in adj.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn holm_never_decreases_and_caps_at_one() {
        let adj = holm_adjust(&[0.9, 0.8, 0.7]);
        assert!(adj.iter().all(|p| *p <= 1.0));
        let adj = holm_adjust(&[0.5]);
        assert_eq!(adj, vec![0.5]);
    }
}
