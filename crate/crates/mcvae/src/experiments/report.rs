//! Aggregates recorded runs into the final comparison: per-configuration
//! means, rank tests across configurations, and paired tests against the
//! first configuration in table order. Emits human-readable text plus
//! machine-readable JSON and CSV.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{McvaeError, Result};
use crate::survival::stats::{
    friedman, holm_adjust, nemenyi, wilcoxon_signed_rank_greater, FriedmanResult, NemenyiResult,
};

use super::{aggregate, read_records_lenient, FoldResults, RunRecord, RESULTS_FILE};

/// Paired one-sided test of one configuration improving on the baseline.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineComparison {
    pub config_id: String,
    pub baseline: String,
    /// (fold, seed) pairs present in both configurations.
    pub n_pairs: usize,
    /// Signed-rank statistic W+ (sum of ranks of positive differences).
    pub statistic: f64,
    pub p_value: f64,
    /// Holm step-down adjustment over the whole comparison family.
    pub p_holm: f64,
}

/// Everything the report knows about one experiment directory.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub results: Vec<FoldResults>,
    /// Rank test across all configurations on complete blocks; absent
    /// when there is nothing to compare.
    pub friedman: Option<FriedmanResult>,
    pub nemenyi: Option<NemenyiResult>,
    pub comparisons: Vec<BaselineComparison>,
    /// Anything that limited the analysis: gaps, skipped tests.
    pub notes: Vec<String>,
}

/// Build the statistical comparison for one experiment's records.
///
/// Blocks are (fold, seed) pairs. The rank tests use only blocks present
/// in every configuration; incomplete blocks are reported as gaps and
/// excluded. A single configuration yields means only, with an explicit
/// "nothing to compare" note. Paired baseline tests compare each
/// configuration against the first in table order, one-sided in the
/// improvement direction, Holm-adjusted as a family.
pub fn build_report(experiment: &str, records: &[RunRecord]) -> Result<ExperimentReport> {
    if records.is_empty() {
        return Err(McvaeError::InvalidArgument(format!(
            "{experiment}: no recorded runs to report on"
        )));
    }
    let results = aggregate(records);
    let mut notes = Vec::new();
    let mut friedman_out = None;
    let mut nemenyi_out = None;
    let mut comparisons = Vec::new();

    if results.len() < 2 {
        notes.push("single configuration: nothing to compare".into());
        return Ok(ExperimentReport {
            experiment: experiment.into(),
            results,
            friedman: None,
            nemenyi: None,
            comparisons,
            notes,
        });
    }

    // blocks shared by every configuration
    let all_keys: BTreeSet<(usize, u64)> = records.iter().map(|r| (r.fold, r.seed)).collect();
    let keys_of = |r: &FoldResults| -> BTreeSet<(usize, u64)> {
        r.records.iter().map(|rec| (rec.fold, rec.seed)).collect()
    };
    let mut common = all_keys.clone();
    for r in &results {
        let keys = keys_of(r);
        let missing: Vec<&(usize, u64)> = all_keys.difference(&keys).collect();
        if !missing.is_empty() {
            notes.push(format!(
                "INCOMPLETE: {} is missing {} of {} runs ({}); those blocks are excluded from the rank tests",
                r.config_id,
                missing.len(),
                all_keys.len(),
                missing
                    .iter()
                    .map(|(f, s)| format!("fold {f}/seed {s}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
        }
        common = common.intersection(&keys).cloned().collect();
    }

    if common.len() < 2 {
        notes.push(format!(
            "only {} complete blocks; rank tests need at least 2 and were skipped",
            common.len()
        ));
    } else {
        let value_of = |r: &FoldResults, key: (usize, u64)| -> f64 {
            r.records
                .iter()
                .find(|rec| (rec.fold, rec.seed) == key)
                .expect("complete block missing from its own configuration")
                .test_cindex
        };
        let table: Vec<Vec<f64>> = common
            .iter()
            .map(|&key| results.iter().map(|r| value_of(r, key)).collect())
            .collect();
        match friedman(&table) {
            Ok(f) => {
                match nemenyi(&f.mean_ranks, f.n_blocks) {
                    Ok(n) => nemenyi_out = Some(n),
                    Err(e) => notes.push(format!("post-hoc test skipped: {e}")),
                }
                friedman_out = Some(f);
            }
            Err(e) => notes.push(format!("rank test skipped: {e}")),
        }
    }

    // paired improvement tests against the leading configuration
    let baseline = &results[0];
    let baseline_keys = keys_of(baseline);
    let mut raw_p = Vec::new();
    for r in &results[1..] {
        let shared: Vec<(usize, u64)> = keys_of(r).intersection(&baseline_keys).cloned().collect();
        if shared.is_empty() {
            notes.push(format!(
                "no paired runs between {} and {}; baseline test skipped",
                r.config_id, baseline.config_id
            ));
            continue;
        }
        let pick = |fr: &FoldResults, key: (usize, u64)| {
            fr.records
                .iter()
                .find(|rec| (rec.fold, rec.seed) == key)
                .map(|rec| rec.test_cindex)
                .expect("shared block missing")
        };
        let xs: Vec<f64> = shared.iter().map(|&k| pick(r, k)).collect();
        let ys: Vec<f64> = shared.iter().map(|&k| pick(baseline, k)).collect();
        let (statistic, p_value) = match wilcoxon_signed_rank_greater(&xs, &ys) {
            Ok(w) => (w.statistic, w.p_value),
            Err(McvaeError::AllZeroDifferences) => {
                notes.push(format!(
                    "{} and {} are identical on every paired run; no evidence of improvement",
                    r.config_id, baseline.config_id
                ));
                (0.0, 1.0)
            }
            Err(e) => return Err(e),
        };
        raw_p.push(p_value);
        comparisons.push(BaselineComparison {
            config_id: r.config_id.clone(),
            baseline: baseline.config_id.clone(),
            n_pairs: shared.len(),
            statistic,
            p_value,
            p_holm: p_value, // replaced below once the family is complete
        });
    }
    for (c, p) in comparisons.iter_mut().zip(holm_adjust(&raw_p)) {
        c.p_holm = p;
    }

    Ok(ExperimentReport {
        experiment: experiment.into(),
        results,
        friedman: friedman_out,
        nemenyi: nemenyi_out,
        comparisons,
        notes,
    })
}

fn render_text(reports: &[ExperimentReport]) -> String {
    let mut out = String::new();
    for rep in reports {
        out.push_str(&format!("== {} ==\n", rep.experiment));
        out.push_str(&format!(
            "  {:<10} {:>4} {:>8} {:>8}\n",
            "config", "n", "mean", "std"
        ));
        for r in &rep.results {
            out.push_str(&format!(
                "  {:<10} {:>4} {:>8.3} {:>8.3}\n",
                r.config_id, r.n, r.mean, r.std
            ));
        }
        if let Some(f) = &rep.friedman {
            out.push_str(&format!(
                "  Friedman: chi2 = {:.4}, p = {:.4} ({} configurations, {} blocks)\n",
                f.statistic, f.p_value, f.n_treatments, f.n_blocks
            ));
        }
        if let Some(n) = &rep.nemenyi {
            out.push_str("  Nemenyi pairwise p-values (rows/columns in table order):\n");
            for row in &n.p_values {
                out.push_str("   ");
                for p in row {
                    out.push_str(&format!(" {p:>6.3}"));
                }
                out.push('\n');
            }
        }
        if !rep.comparisons.is_empty() {
            out.push_str(&format!(
                "  one-sided signed-rank test: configuration > {} (Holm-adjusted)\n",
                rep.comparisons[0].baseline
            ));
            for c in &rep.comparisons {
                out.push_str(&format!(
                    "    {:<10} W+ = {:>6.1}  p = {:.5}  p_holm = {:.5}  ({} pairs)\n",
                    c.config_id, c.statistic, c.p_value, c.p_holm, c.n_pairs
                ));
            }
        }
        for note in &rep.notes {
            out.push_str(&format!("  note: {note}\n"));
        }
        out.push('\n');
    }
    out
}

fn render_csv(reports: &[ExperimentReport]) -> String {
    let mut out =
        String::from("experiment,config_id,n_runs,mean_cindex,std_cindex,wilcoxon_p,holm_p\n");
    for rep in reports {
        for r in &rep.results {
            let (p, ph) = rep
                .comparisons
                .iter()
                .find(|c| c.config_id == r.config_id)
                .map(|c| (format!("{:.6}", c.p_value), format!("{:.6}", c.p_holm)))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{p},{ph}\n",
                rep.experiment, r.config_id, r.n, r.mean, r.std
            ));
        }
    }
    out
}

/// Experiment directories in presentation order.
const KNOWN_EXPERIMENTS: [&str; 4] = [
    "survival",
    "combinations",
    "dropout_sweep",
    "missingness_sweep",
];

/// Scan `out_dir` for recorded experiments, build their reports, and
/// write `report.txt`, `report.json`, and `report.csv` alongside them.
/// The text report also goes to standard output.
pub fn write_report(out_dir: &Path) -> Result<Vec<ExperimentReport>> {
    let mut dirs: Vec<String> = Vec::new();
    for name in KNOWN_EXPERIMENTS {
        if out_dir.join(name).join(RESULTS_FILE).exists() {
            dirs.push(name.to_string());
        }
    }
    // pick up anything else that carries a results table
    if let Ok(read) = fs::read_dir(out_dir) {
        let mut extra: Vec<String> = read
            .flatten()
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().into_owned();
                (!dirs.contains(&name) && e.path().join(RESULTS_FILE).exists()).then_some(name)
            })
            .collect();
        extra.sort();
        dirs.extend(extra);
    }
    if dirs.is_empty() {
        return Err(McvaeError::InvalidArgument(format!(
            "no recorded runs under {}",
            out_dir.display()
        )));
    }

    let mut reports = Vec::new();
    for name in &dirs {
        let records = read_records_lenient(&out_dir.join(name).join(RESULTS_FILE))?;
        if records.is_empty() {
            log::warn!("{name}: results table is empty; skipping");
            continue;
        }
        reports.push(build_report(name, &records)?);
    }
    if reports.is_empty() {
        return Err(McvaeError::InvalidArgument(
            "every results table was empty; nothing to report".into(),
        ));
    }

    let text = render_text(&reports);
    fs::write(out_dir.join("report.txt"), &text)?;
    fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&reports)?,
    )?;
    fs::write(out_dir.join("report.csv"), render_csv(&reports))?;
    print!("{text}");
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(config: &str, fold: usize, seed: u64, c: f64) -> RunRecord {
        RunRecord {
            experiment: "combinations".into(),
            config_id: config.into(),
            fold,
            seed,
            test_cindex: c,
            epochs_trained: 3,
            wall_seconds: 0.5,
        }
    }

    /// Ten complete blocks over two configurations with a fixed offset.
    fn paired_records(offset: f64) -> Vec<RunRecord> {
        let mut out = Vec::new();
        for fold in 0..5 {
            for seed in 0..2u64 {
                let base = 0.60 + 0.01 * (fold as f64) + 0.002 * (seed as f64);
                out.push(rec("C", fold, seed, base));
                out.push(rec("C+T", fold, seed, base + offset));
            }
        }
        out
    }

    #[test]
    fn single_configuration_reports_nothing_to_compare() {
        let records = vec![rec("mcvae", 0, 0, 0.7), rec("mcvae", 1, 0, 0.72)];
        let rep = build_report("survival", &records).unwrap();
        assert!(rep.friedman.is_none());
        assert!(rep.comparisons.is_empty());
        assert!(rep.notes.iter().any(|n| n.contains("nothing to compare")));
        assert_eq!(rep.results.len(), 1);
        assert!((rep.results[0].mean - 0.71).abs() < 1e-12);
    }

    #[test]
    fn identical_configurations_yield_p_one_everywhere() {
        let records = paired_records(0.0);
        let rep = build_report("combinations", &records).unwrap();
        let f = rep.friedman.expect("rank test should run");
        assert_eq!(f.p_value, 1.0);
        assert_eq!(f.statistic, 0.0);
        // all paired differences are zero: no evidence, noted explicitly
        assert_eq!(rep.comparisons.len(), 1);
        assert_eq!(rep.comparisons[0].p_value, 1.0);
        assert!(rep.notes.iter().any(|n| n.contains("identical")));
    }

    #[test]
    fn all_positive_differences_hit_the_exact_tail() {
        let records = paired_records(0.03);
        let rep = build_report("combinations", &records).unwrap();
        assert_eq!(rep.comparisons.len(), 1);
        let c = &rep.comparisons[0];
        assert_eq!(c.n_pairs, 10);
        // ten strictly positive differences: one-sided exact p = 2^-10
        assert!((c.p_value - 1.0 / 1024.0).abs() < 1e-12);
        assert_eq!(c.p_holm, c.p_value); // family of one
        let f = rep.friedman.unwrap();
        assert!(f.p_value < 0.01);
    }

    #[test]
    fn holm_adjustment_is_monotone_over_the_family() {
        let mut records = paired_records(0.03);
        // a third configuration, strictly worse than baseline
        for fold in 0..5 {
            for seed in 0..2u64 {
                let base = 0.60 + 0.01 * (fold as f64) + 0.002 * (seed as f64);
                records.push(rec("C+W", fold, seed, base - 0.02));
            }
        }
        let rep = build_report("combinations", &records).unwrap();
        assert_eq!(rep.comparisons.len(), 2);
        for c in &rep.comparisons {
            assert!(c.p_holm >= c.p_value - 1e-15);
            assert!(c.p_holm <= 1.0);
        }
        let by_id = |id: &str| {
            rep.comparisons
                .iter()
                .find(|c| c.config_id == id)
                .unwrap()
                .clone()
        };
        // better raw p stays no worse after adjustment
        assert!(by_id("C+T").p_value < by_id("C+W").p_value);
        assert!(by_id("C+T").p_holm <= by_id("C+W").p_holm);
    }

    #[test]
    fn missing_runs_are_flagged_and_excluded_from_rank_tests() {
        let mut records = paired_records(0.03);
        // drop one C+T run: fold 4, seed 1
        records.retain(|r| !(r.config_id == "C+T" && r.fold == 4 && r.seed == 1));
        let rep = build_report("combinations", &records).unwrap();
        assert!(rep.notes.iter().any(|n| n.contains("INCOMPLETE")));
        let f = rep.friedman.expect("rank test still runs on 9 blocks");
        assert_eq!(f.n_blocks, 9);
        // the paired test uses the 9 shared blocks
        assert_eq!(rep.comparisons[0].n_pairs, 9);
    }

    #[test]
    fn report_files_are_written_and_readable() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("combinations");
        std::fs::create_dir_all(&sub).unwrap();
        let mut writer = csv::Writer::from_path(sub.join(RESULTS_FILE)).unwrap();
        for r in paired_records(0.03) {
            writer.serialize(&r).unwrap();
        }
        writer.flush().unwrap();
        drop(writer);

        let reports = write_report(dir.path()).unwrap();
        assert_eq!(reports.len(), 1);
        let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(text.contains("== combinations =="));
        assert!(text.contains("Friedman"));
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed[0]["experiment"], "combinations");
        let csv_text = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert!(csv_text.lines().count() >= 3);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_report(dir.path()).is_err());
    }
}
