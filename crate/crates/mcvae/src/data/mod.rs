//! Cohort data handling: synthetic generation with a known risk oracle,
//! delimited-file persistence, stratified cross-validation folds, modality
//! masking transforms, and robust feature scaling.

mod folds;
mod io;
mod masks;
mod scaling;
mod synthetic;

pub use folds::{stratified_folds, FoldPlan, FoldSplit};
pub use io::{load_cohort, write_cohort, CohortSchema};
pub use masks::{apply_missingness, modality_dropout_mask, restrict_to_combination};
pub use scaling::RobustScaler;
pub use synthetic::{generate_cohort, SyntheticSpec};

use crate::error::{McvaeError, Result};

pub const NUM_MODALITIES: usize = 4;
pub const MODALITY_NAMES: [&str; NUM_MODALITIES] =
    ["clinical", "transcriptomics", "wsi", "methylation"];
/// Clinical is modality 0: always available, never reconstructed.
pub const CLINICAL: usize = 0;

/// One patient: per-modality feature vectors, availability, and outcome.
/// Unavailable modalities hold a zero placeholder of the right dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub time: f64,
    pub event: bool,
    pub available: [bool; NUM_MODALITIES],
    pub features: [Vec<f64>; NUM_MODALITIES],
    /// True log-hazard for synthetic cohorts; absent for external data.
    pub oracle_log_hazard: Option<f64>,
}

impl PatientRecord {
    pub fn dims(&self) -> [usize; NUM_MODALITIES] {
        [
            self.features[0].len(),
            self.features[1].len(),
            self.features[2].len(),
            self.features[3].len(),
        ]
    }

    /// Number of available modalities (always >= 1: clinical).
    pub fn available_count(&self) -> usize {
        self.available.iter().filter(|a| **a).count()
    }
}

/// A homogeneous set of patient records with shared feature dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub dims: [usize; NUM_MODALITIES],
}

impl Cohort {
    /// Validate structural invariants: clinical anchored, consistent
    /// dimensions, zero placeholders on masked modalities, positive times.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if !r.available[CLINICAL] {
                return Err(McvaeError::MalformedRow {
                    row: i,
                    detail: "clinical modality must always be available".into(),
                });
            }
            if r.dims() != self.dims {
                return Err(McvaeError::MalformedRow {
                    row: i,
                    detail: format!(
                        "feature dimensions {:?} differ from cohort dimensions {:?}",
                        r.dims(),
                        self.dims
                    ),
                });
            }
            if !(r.time > 0.0) || !r.time.is_finite() {
                return Err(McvaeError::MalformedRow {
                    row: i,
                    detail: format!("time must be positive and finite, got {}", r.time),
                });
            }
            for k in 0..NUM_MODALITIES {
                if !r.available[k] && r.features[k].iter().any(|v| *v != 0.0) {
                    return Err(McvaeError::MalformedRow {
                        row: i,
                        detail: format!(
                            "unavailable modality {} must hold a zero placeholder",
                            MODALITY_NAMES[k]
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Subset by indices (cloned records, original order of `idx`).
    pub fn subset(&self, idx: &[usize]) -> Cohort {
        Cohort {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            dims: self.dims,
        }
    }
}
