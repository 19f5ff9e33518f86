//! Stratified cross-validation planning.
//!
//! Strata cross "death within the median observed time" with the event
//! indicator, giving three realizable groups: early events, late events,
//! and censored patients. Each fold takes a balanced slice of every stratum
//! as its test set; the remainder splits 80/20 into train/validation, so
//! the overall proportions are 64/16/20 within one patient.

use log::warn;
use rand::seq::SliceRandom;

use crate::error::{McvaeError, Result};
use crate::nn::{stream_rng, Stream};

use super::PatientRecord;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<FoldSplit>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn stratified_folds(records: &[PatientRecord], k: usize, seed: u64) -> Result<FoldPlan> {
    let n = records.len();
    if k < 2 {
        return Err(McvaeError::InvalidArgument(format!(
            "fold count must be at least 2, got {k}"
        )));
    }
    if n < 2 * k {
        return Err(McvaeError::InvalidArgument(format!(
            "need at least {} patients for {k} folds, got {n}",
            2 * k
        )));
    }

    let med = median(records.iter().map(|r| r.time).collect());
    // 0: event within median, 1: event after median, 2: censored
    let label = |r: &PatientRecord| -> usize {
        match (r.event && r.time <= med, r.event) {
            (true, _) => 0,
            (false, true) => 1,
            (false, false) => 2,
        }
    };
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for (i, r) in records.iter().enumerate() {
        strata[label(r)].push(i);
    }

    // merge undersized strata into the nearest populated neighbour
    let neighbour_order: [&[usize]; 3] = [&[1, 2], &[0, 2], &[1, 0]];
    loop {
        let Some(small) = (0..3).find(|&s| !strata[s].is_empty() && strata[s].len() < k) else {
            break;
        };
        let Some(&target) = neighbour_order[small]
            .iter()
            .find(|&&t| !strata[t].is_empty())
        else {
            break; // single populated stratum left
        };
        warn!(
            "stratum {small} has {} patients (< {k}); merging into stratum {target}",
            strata[small].len()
        );
        let moved = std::mem::take(&mut strata[small]);
        strata[target].extend(moved);
    }

    let mut rng = stream_rng(seed, Stream::Folds);
    for s in strata.iter_mut() {
        s.shuffle(&mut rng);
    }

    // Deal each stratum into k test buckets. A single cursor distributes the
    // leftover members across strata, keeping both total fold sizes and
    // per-outcome counts within one patient of each other.
    let mut buckets: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); 3]; k];
    let mut cursor = 0usize;
    for (s, members) in strata.iter().enumerate() {
        let q = members.len() / k;
        let extras = members.len() % k;
        for (f, bucket_rows) in buckets.iter_mut().enumerate() {
            bucket_rows[s].extend_from_slice(&members[f * q..(f + 1) * q]);
        }
        for j in 0..extras {
            let f = (cursor + j) % k;
            buckets[f][s].push(members[q * k + j]);
        }
        cursor = (cursor + extras) % k;
    }

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let mut test = Vec::new();
        for s in 0..3 {
            test.extend_from_slice(&buckets[f][s]);
        }

        // per-stratum leftover, in shuffled order
        let remaining: Vec<Vec<usize>> = (0..3)
            .map(|s| {
                let in_test: std::collections::HashSet<usize> =
                    buckets[f][s].iter().copied().collect();
                strata[s]
                    .iter()
                    .copied()
                    .filter(|i| !in_test.contains(i))
                    .collect()
            })
            .collect();
        let remaining_total: usize = remaining.iter().map(Vec::len).sum();
        let val_total = (0.2 * remaining_total as f64).round() as usize;

        // largest-remainder allocation of the validation quota across strata
        let quotas: Vec<f64> = remaining.iter().map(|r| 0.2 * r.len() as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut leftover = val_total.saturating_sub(counts.iter().sum::<usize>());
        let mut by_frac: Vec<usize> = (0..3).collect();
        by_frac.sort_by(|&a, &b| {
            (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor()))
        });
        for &s in &by_frac {
            if leftover == 0 {
                break;
            }
            if counts[s] < remaining[s].len() {
                counts[s] += 1;
                leftover -= 1;
            }
        }

        let mut val = Vec::new();
        let mut train = Vec::new();
        for s in 0..3 {
            val.extend_from_slice(&remaining[s][..counts[s]]);
            train.extend_from_slice(&remaining[s][counts[s]..]);
        }
        folds.push(FoldSplit { train, val, test });
    }

    Ok(FoldPlan { seed, folds })
}
