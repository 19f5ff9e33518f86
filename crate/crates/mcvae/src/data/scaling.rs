//! Robust feature scaling: center by the median, scale by the
//! interquartile range, fit on training patients only so no statistics
//! leak from validation or test folds. Masked modalities keep their zero
//! placeholders untouched.

use crate::error::{McvaeError, Result};

use super::{PatientRecord, NUM_MODALITIES};

#[derive(Debug, Clone)]
pub struct RobustScaler {
    center: [Vec<f64>; NUM_MODALITIES],
    scale: [Vec<f64>; NUM_MODALITIES],
}

/// Linear-interpolation quantile of already-sorted values.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl RobustScaler {
    /// Fit per-feature median and IQR on the given records. Only patients
    /// with the modality available contribute to its statistics.
    pub fn fit(records: &[PatientRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(McvaeError::InvalidArgument(
                "cannot fit a scaler on an empty set".into(),
            ));
        }
        let dims = records[0].dims();
        let mut center: [Vec<f64>; NUM_MODALITIES] = Default::default();
        let mut scale: [Vec<f64>; NUM_MODALITIES] = Default::default();
        for k in 0..NUM_MODALITIES {
            let mut c = Vec::with_capacity(dims[k]);
            let mut s = Vec::with_capacity(dims[k]);
            for j in 0..dims[k] {
                let mut col: Vec<f64> = records
                    .iter()
                    .filter(|r| r.available[k])
                    .map(|r| r.features[k][j])
                    .collect();
                if col.is_empty() {
                    // modality absent from the whole training set
                    c.push(0.0);
                    s.push(1.0);
                    continue;
                }
                col.sort_by(f64::total_cmp);
                let median = quantile_sorted(&col, 0.5);
                let iqr = quantile_sorted(&col, 0.75) - quantile_sorted(&col, 0.25);
                c.push(median);
                s.push(if iqr > 1e-12 { iqr } else { 1.0 });
            }
            center[k] = c;
            scale[k] = s;
        }
        Ok(RobustScaler { center, scale })
    }

    /// Scale available features in place; unavailable modalities keep zeros.
    pub fn transform(&self, records: &mut [PatientRecord]) {
        for r in records {
            for k in 0..NUM_MODALITIES {
                if !r.available[k] {
                    continue;
                }
                for (j, v) in r.features[k].iter_mut().enumerate() {
                    *v = (*v - self.center[k][j]) / self.scale[k][j];
                }
            }
        }
    }
}
