//! Availability-mask transforms: training-time modality dropout, sweep-time
//! missingness injection, and fixed modality combinations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{McvaeError, Result};

use super::{PatientRecord, CLINICAL, NUM_MODALITIES};

/// Training-time modality dropout: clinical is always kept; every other
/// available modality survives with probability `1 - p_drop`, drawn
/// independently per patient, per modality, per call.
pub fn modality_dropout_mask(
    available: [bool; NUM_MODALITIES],
    p_drop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<[bool; NUM_MODALITIES]> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(McvaeError::InvalidArgument(format!(
            "modality dropout probability must be in [0, 1], got {p_drop}"
        )));
    }
    let mut out = available;
    out[CLINICAL] = true;
    for slot in out.iter_mut().skip(1) {
        if *slot {
            let keep = rng.gen::<f64>() >= p_drop;
            *slot = keep;
        }
    }
    Ok(out)
}

/// Mask a fraction `m` of available non-clinical modalities, returning new
/// records with dropped features zeroed; the input is untouched. Used by
/// the missingness sweep on both train and test copies.
pub fn apply_missingness(
    records: &[PatientRecord],
    m: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatientRecord>> {
    if !(0.0..1.0).contains(&m) {
        return Err(McvaeError::InvalidArgument(format!(
            "missingness level must be in [0, 1), got {m}"
        )));
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let mut masked = r.clone();
        for k in 1..NUM_MODALITIES {
            if masked.available[k] && rng.gen::<f64>() < m {
                masked.available[k] = false;
                masked.features[k] = vec![0.0; masked.features[k].len()];
            }
        }
        out.push(masked);
    }
    Ok(out)
}

/// Restrict records to a fixed modality combination: anything outside
/// `keep` becomes unavailable with zeroed features. Clinical cannot be
/// excluded.
pub fn restrict_to_combination(
    records: &[PatientRecord],
    keep: [bool; NUM_MODALITIES],
) -> Result<Vec<PatientRecord>> {
    if !keep[CLINICAL] {
        return Err(McvaeError::InvalidArgument(
            "modality combinations must include clinical".into(),
        ));
    }
    Ok(records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            for k in 1..NUM_MODALITIES {
                if !keep[k] && out.available[k] {
                    out.available[k] = false;
                    out.features[k] = vec![0.0; out.features[k].len()];
                }
            }
            out
        })
        .collect())
}
