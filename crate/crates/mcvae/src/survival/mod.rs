//! Survival-analysis metrics: concordance index and the Breslow baseline
//! hazard estimator. Rank-based hypothesis tests live in [`stats`].

pub mod stats;

use crate::error::{McvaeError, Result};

/// Harrell's concordance index over right-censored data.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcordanceIndex {
    pub value: f64,
    pub comparable_pairs: usize,
    pub concordant_pairs: usize,
    pub tied_risk_pairs: usize,
}

impl ConcordanceIndex {
    /// True when every comparable pair had identical predicted risk, so the
    /// 0.5 score carries no ranking information.
    pub fn all_tied(&self) -> bool {
        self.tied_risk_pairs == self.comparable_pairs
    }
}

/// Pairwise concordance between predicted risks and observed outcomes.
///
/// A pair is comparable when the patient with the shorter time had an event,
/// or when times are equal and exactly one patient had an event (the
/// censored one is known to have outlived the other). Equal observed times
/// with two events are not comparable. Concordant means the shorter-lived
/// (or event, on equal times) patient received strictly higher risk; tied
/// risks count one half.
pub fn c_index(risk: &[f64], time: &[f64], event: &[bool]) -> Result<ConcordanceIndex> {
    if risk.len() != time.len() || risk.len() != event.len() {
        return Err(McvaeError::DimensionMismatch {
            what: "concordance inputs".into(),
            expected: risk.len(),
            got: time.len().min(event.len()),
        });
    }
    for (i, r) in risk.iter().enumerate() {
        if !r.is_finite() {
            return Err(McvaeError::NonFinite {
                what: "risk score".into(),
                context: format!("index {i}"),
            });
        }
    }
    let n = risk.len();
    let mut comparable = 0usize;
    let mut concordant = 0usize;
    let mut tied = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            // `hi` should carry the higher predicted risk in a concordant pair
            let (hi, lo) = if time[i] < time[j] {
                if !event[i] {
                    continue;
                }
                (i, j)
            } else if time[j] < time[i] {
                if !event[j] {
                    continue;
                }
                (j, i)
            } else {
                match (event[i], event[j]) {
                    (true, false) => (i, j),
                    (false, true) => (j, i),
                    _ => continue,
                }
            };
            comparable += 1;
            if risk[hi] > risk[lo] {
                concordant += 1;
            } else if risk[hi] == risk[lo] {
                tied += 1;
            }
        }
    }
    if comparable == 0 {
        return Err(McvaeError::NoComparablePairs);
    }
    Ok(ConcordanceIndex {
        value: (concordant as f64 + 0.5 * tied as f64) / comparable as f64,
        comparable_pairs: comparable,
        concordant_pairs: concordant,
        tied_risk_pairs: tied,
    })
}

/// Breslow estimate of the cumulative baseline hazard: a right-continuous
/// step function increasing at each distinct event time.
#[derive(Debug, Clone)]
pub struct BaselineHazard {
    /// Distinct event times, ascending.
    pub times: Vec<f64>,
    /// Cumulative baseline hazard just after the matching event time.
    pub cum_hazard: Vec<f64>,
}

impl BaselineHazard {
    /// H0(t): cumulative hazard at time `t`.
    pub fn cumulative_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&u| u <= t) {
            0 => 0.0,
            k => self.cum_hazard[k - 1],
        }
    }

    /// Survival probability S(t | score) = exp(-H0(t) * exp(score)).
    pub fn survival(&self, t: f64, score: f64) -> f64 {
        (-self.cumulative_at(t) * score.exp()).exp()
    }
}

/// Breslow baseline from linear predictor scores and outcomes: at each
/// distinct event time the hazard increments by (events at that time) /
/// (sum of exp(score) over everyone still at risk).
pub fn breslow_baseline(score: &[f64], time: &[f64], event: &[bool]) -> Result<BaselineHazard> {
    if score.len() != time.len() || score.len() != event.len() {
        return Err(McvaeError::DimensionMismatch {
            what: "baseline hazard inputs".into(),
            expected: score.len(),
            got: time.len().min(event.len()),
        });
    }
    let n = score.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]).then(a.cmp(&b)));

    // exp(score) summed over the suffix of the sorted order = risk set
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix[k] = suffix[k + 1] + score[order[k]].exp();
    }

    let mut times = Vec::new();
    let mut cum = Vec::new();
    let mut h = 0.0;
    let mut k = 0;
    while k < n {
        let t = time[order[k]];
        let mut end = k;
        let mut deaths = 0usize;
        while end < n && time[order[end]] == t {
            if event[order[end]] {
                deaths += 1;
            }
            end += 1;
        }
        if deaths > 0 {
            h += deaths as f64 / suffix[k];
            times.push(t);
            cum.push(h);
        }
        k = end;
    }
    Ok(BaselineHazard { times, cum_hazard: cum })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking_scores_one() {
        let c = c_index(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert_eq!(c.value, 1.0);
        assert_eq!(c.comparable_pairs, 3);
    }

    #[test]
    fn inverted_ranking_scores_zero() {
        let c = c_index(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn constant_predictor_scores_half() {
        let c = c_index(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0], &[true; 4]).unwrap();
        assert_eq!(c.value, 0.5);
        assert!(c.all_tied());
    }

    #[test]
    fn censored_short_times_not_comparable() {
        // only the (2,3) pair is usable: patient at t=1 is censored
        let c = c_index(
            &[5.0, 4.0, 3.0],
            &[1.0, 2.0, 3.0],
            &[false, true, true],
        )
        .unwrap();
        assert_eq!(c.comparable_pairs, 1);
        assert_eq!(c.value, 1.0);
    }

    #[test]
    fn equal_time_two_events_skipped() {
        assert!(matches!(
            c_index(&[1.0, 2.0], &[2.0, 2.0], &[true, true]),
            Err(McvaeError::NoComparablePairs)
        ));
    }

    #[test]
    fn equal_time_event_vs_censored_comparable() {
        // the event patient should carry the higher risk
        let c = c_index(&[1.0, 0.0], &[2.0, 2.0], &[true, false]).unwrap();
        assert_eq!(c.comparable_pairs, 1);
        assert_eq!(c.value, 1.0);
        let c = c_index(&[0.0, 1.0], &[2.0, 2.0], &[true, false]).unwrap();
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn all_censored_is_an_error() {
        assert!(matches!(
            c_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]),
            Err(McvaeError::NoComparablePairs)
        ));
    }

    #[test]
    fn breslow_two_events_zero_scores() {
        // H0(1) = 1/2, H0(2) = 1/2 + 1 = 3/2
        let h = breslow_baseline(&[0.0, 0.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert_eq!(h.times, vec![1.0, 2.0]);
        assert!((h.cum_hazard[0] - 0.5).abs() < 1e-12);
        assert!((h.cum_hazard[1] - 1.5).abs() < 1e-12);
        assert_eq!(h.cumulative_at(0.5), 0.0);
        assert!((h.cumulative_at(1.5) - 0.5).abs() < 1e-12);
        assert!((h.survival(1.5, 0.0) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn breslow_tied_event_times_share_risk_set() {
        // deaths d=2 at t=1 with risk set of 3 -> increment 2/3
        let h = breslow_baseline(&[0.0, 0.0, 0.0], &[1.0, 1.0, 2.0], &[true, true, false]).unwrap();
        assert_eq!(h.times, vec![1.0]);
        assert!((h.cum_hazard[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn breslow_censoring_removes_from_later_risk_sets() {
        // t=[1(c), 2(e)]: at t=2 risk set only patient 2 -> H0(2)=1
        let h = breslow_baseline(&[0.0, 0.0], &[1.0, 2.0], &[false, true]).unwrap();
        assert_eq!(h.times, vec![2.0]);
        assert!((h.cum_hazard[0] - 1.0).abs() < 1e-12);
    }
}
