//! Training objectives: Cox partial likelihood for the survival task,
//! masked reconstruction, weighted and annealed KL regularization,
//! cross-modal InfoNCE alignment, and the uncertainty-weighted total that
//! balances the four terms through learnable log-variances.

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{PatientRecord, NUM_MODALITIES};
use crate::error::{McvaeError, Result};
use crate::model::{ForwardPass, McvaeModel, ModalityPass};
use crate::nn::{Binding, ParamId, Params};

/// Default InfoNCE temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Default KL warmup length in epochs.
pub const DEFAULT_WARMUP_EPOCHS: usize = 30;

/// Scalar summary of one batch objective evaluation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    /// Cox negative log partial likelihood; 0 when the batch had no event.
    pub task: f64,
    pub recon: f64,
    /// KL component with the annealing factor already applied.
    pub kl: f64,
    pub contrastive: f64,
    pub total: f64,
    /// Annealing factor used for the KL component this epoch.
    pub beta: f64,
    /// Per-term combination weights 1/(2 sigma_i^2) = exp(-s_i)/2, in
    /// task/recon/KL/contrastive order.
    pub uncertainty_weights: [f64; 4],
    /// False when a no-event batch dropped the survival term entirely.
    pub task_included: bool,
}

/// Negative log partial likelihood of the Cox model over one batch, with
/// tied event times sharing a risk set. `log_hazard` is a 1-D `[n]` node.
///
/// Returns the "no-event batch" error when no patient has an event; the
/// caller drops the survival term for that batch.
pub fn cox_loss(g: &mut Graph, log_hazard: Var, times: &[f64], events: &[bool]) -> Result<Var> {
    let n = times.len();
    if g.shape(log_hazard) != [n] || events.len() != n {
        return Err(McvaeError::DimensionMismatch {
            what: "survival outcomes".into(),
            expected: g.value(log_hazard).len(),
            got: n.min(events.len()),
        });
    }
    if times.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(McvaeError::InvalidArgument(
            "event/censoring times must be positive and finite".into(),
        ));
    }
    if !events.iter().any(|e| *e) {
        return Err(McvaeError::NoEventBatch);
    }

    // ascending by (time, index); ties broken by index for determinism
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap().then(a.cmp(&b)));

    let slices: Vec<Var> = order
        .iter()
        .map(|&i| g.slice_cols(log_hazard, i, i + 1))
        .collect::<Result<_>>()?;
    let sorted = g.concat(&slices, 0)?;

    // walk tie groups; each group's events share the risk set = suffix
    // starting at the group
    let mut loss: Option<Var> = None;
    let mut p = 0;
    while p < n {
        let t = times[order[p]];
        let mut q = p;
        while q < n && times[order[q]] == t {
            q += 1;
        }
        let event_positions: Vec<usize> = (p..q).filter(|&s| events[order[s]]).collect();
        if !event_positions.is_empty() {
            let suffix = g.slice_cols(sorted, p, n)?;
            let lse = g.logsumexp(suffix);
            let weighted = g.mul_scalar(lse, event_positions.len() as f64);
            let mut term = weighted;
            for s in event_positions {
                let h = g.slice_cols(sorted, s, s + 1)?;
                term = g.sub(term, h)?;
            }
            loss = Some(match loss {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        p = q;
    }
    Ok(loss.expect("at least one event was checked above"))
}

/// Summed masked squared reconstruction error divided by batch size.
/// Rows whose modality is naturally unavailable contribute exactly zero
/// and pass no gradient to the decoder.
pub fn reconstruction_loss(
    g: &mut Graph,
    recons: &[Option<Var>; NUM_MODALITIES],
    batch: &[&PatientRecord],
) -> Result<Var> {
    let n = batch.len();
    let mut acc: Option<Var> = None;
    for (k, rec) in recons.iter().enumerate() {
        let Some(rec) = rec else { continue };
        let d_k = g.shape(*rec)[1];
        let mut data = Vec::with_capacity(n * d_k);
        for r in batch {
            data.extend_from_slice(&r.features[k]);
        }
        let x = g.input(Tensor::matrix(n, d_k, data)?);
        let diff = g.sub(x, *rec)?;
        let sq = g.square(diff);
        let per_row = g.sum(sq, Some(1))?;
        let mask: Vec<f64> = batch
            .iter()
            .map(|r| if r.available[k] { 1.0 } else { 0.0 })
            .collect();
        let mask_node = g.input(Tensor::vector(mask));
        let masked = g.mul(per_row, mask_node)?;
        let total_k = g.sum(masked, None)?;
        acc = Some(match acc {
            None => total_k,
            Some(a) => g.add(a, total_k)?,
        });
    }
    Ok(match acc {
        None => g.constant_scalar(0.0),
        Some(a) => g.mul_scalar(a, 1.0 / n as f64),
    })
}

/// Batch-averaged Gaussian KL against the standard normal prior, weighted
/// per modality by a softmax over the learnable logits. Modalities absent
/// from the batch contribute zero.
pub fn kl_loss(
    g: &mut Graph,
    binding: &mut Binding,
    store: &Params,
    kl_logits: ParamId,
    modalities: &[Option<ModalityPass>; NUM_MODALITIES],
    n: usize,
) -> Result<Var> {
    let logits = binding.bind(g, store, kl_logits);
    let weights = g.softmax_rows(logits);
    let mut acc: Option<Var> = None;
    for (k, mp) in modalities.iter().enumerate() {
        let Some(mp) = mp else { continue };
        // 1/2 sum(exp(lv) + mu^2 - 1 - lv) over the sub-batch
        let var = g.exp(mp.log_var);
        let mu_sq = g.square(mp.mu);
        let s1 = g.add(var, mu_sq)?;
        let s2 = g.add_scalar(s1, -1.0);
        let s3 = g.sub(s2, mp.log_var)?;
        let summed = g.sum(s3, None)?;
        let half = g.mul_scalar(summed, 0.5);
        let w_k = g.slice_cols(weights, k, k + 1)?;
        let weighted = g.scale_by(half, w_k)?;
        acc = Some(match acc {
            None => weighted,
            Some(a) => g.add(a, weighted)?,
        });
    }
    Ok(match acc {
        None => g.constant_scalar(0.0),
        Some(a) => g.mul_scalar(a, 1.0 / n as f64),
    })
}

/// InfoNCE alignment over every encoded patient-modality view. Positives
/// are same-patient cross-modality pairs; each anchor's denominator ranges
/// over all other views in the batch. Normalized by the number of positive
/// pairs; zero when no patient carries two modalities.
pub fn contrastive_loss(
    g: &mut Graph,
    modalities: &[Option<ModalityPass>; NUM_MODALITIES],
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(McvaeError::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    // anchor list in concat order: modality-major, then sub-batch order
    let mut anchor_patient: Vec<usize> = Vec::new();
    let mut views: Vec<Var> = Vec::new();
    for mp in modalities.iter().flatten() {
        anchor_patient.extend_from_slice(&mp.rows);
        views.push(mp.z);
    }
    let m = anchor_patient.len();
    let mut positives: Vec<(usize, usize)> = Vec::new();
    for a in 0..m {
        for b in 0..m {
            if a != b && anchor_patient[a] == anchor_patient[b] {
                positives.push((a, b));
            }
        }
    }
    if positives.is_empty() {
        return Ok(g.constant_scalar(0.0));
    }

    let stacked = g.concat(&views, 0)?;
    let unit = g.row_normalize(stacked);
    let unit_t = g.transpose(unit)?;
    let sims = g.matmul(unit, unit_t)?;
    let scaled = g.mul_scalar(sims, 1.0 / temperature);

    // self-similarity must not enter any denominator
    let mut diag = vec![0.0; m * m];
    for i in 0..m {
        diag[i * m + i] = -1e30;
    }
    let diag_node = g.input(Tensor::matrix(m, m, diag)?);
    let masked = g.add(scaled, diag_node)?;
    let denoms = g.logsumexp_rows(masked)?;

    // each anchor's denominator counts once per positive it anchors
    let mut pos_counts = vec![0.0; m];
    let mut pos_indicator = vec![0.0; m * m];
    for &(a, b) in &positives {
        pos_counts[a] += 1.0;
        pos_indicator[a * m + b] = 1.0;
    }
    let counts_node = g.input(Tensor::vector(pos_counts));
    let weighted_denoms = g.mul(denoms, counts_node)?;
    let denom_sum = g.sum(weighted_denoms, None)?;

    let indicator = g.input(Tensor::matrix(m, m, pos_indicator)?);
    let pos_sims = g.mul(scaled, indicator)?;
    let pos_sum = g.sum(pos_sims, None)?;

    let diff = g.sub(denom_sum, pos_sum)?;
    Ok(g.mul_scalar(diff, 1.0 / positives.len() as f64))
}

/// Linear KL annealing ramp: 0 at epoch 0, `beta_max` from `warmup` on.
pub fn beta_schedule(epoch: usize, warmup: usize, beta_max: f64) -> f64 {
    assert!(warmup >= 1, "warmup must be at least one epoch");
    beta_max * (epoch as f64 / warmup as f64).min(1.0)
}

/// Uncertainty-weighted combination sum_i [exp(-s_i)/2 * L_i + s_i/2] over
/// the present components, with trainable log-variances s. Components are
/// ordered task/recon/KL/contrastive; an absent component (no-event batch)
/// contributes neither its loss nor its regularizer.
pub fn total_loss(
    g: &mut Graph,
    binding: &mut Binding,
    store: &Params,
    uncertainty: ParamId,
    components: [Option<Var>; 4],
) -> Result<Var> {
    let s = binding.bind(g, store, uncertainty);
    let mut acc: Option<Var> = None;
    for (i, comp) in components.into_iter().enumerate() {
        let Some(loss_i) = comp else { continue };
        let s_i = g.slice_cols(s, i, i + 1)?;
        let neg = g.negate(s_i);
        let inv_var = g.exp(neg);
        let weighted = g.scale_by(loss_i, inv_var)?;
        let half_weighted = g.mul_scalar(weighted, 0.5);
        let reg = g.mul_scalar(s_i, 0.5);
        let term = g.add(half_weighted, reg)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    acc.ok_or_else(|| McvaeError::InvalidArgument("no loss components present".into()))
}

/// Assemble all four objectives on a forward pass and combine them.
/// Returns the total-loss node (for backward) and the scalar breakdown.
pub fn compute_losses(
    model: &McvaeModel,
    fp: &mut ForwardPass,
    batch: &[&PatientRecord],
    beta: f64,
    temperature: f64,
) -> Result<(Var, LossBreakdown)> {
    let g = &mut fp.g;
    let binding = &mut fp.binding;
    let times: Vec<f64> = batch.iter().map(|r| r.time).collect();
    let events: Vec<bool> = batch.iter().map(|r| r.event).collect();

    let task = match cox_loss(g, fp.log_hazard, &times, &events) {
        Ok(v) => Some(v),
        Err(McvaeError::NoEventBatch) => None,
        Err(e) => return Err(e),
    };
    let recon = reconstruction_loss(g, &fp.recons, batch)?;
    let kl_raw = kl_loss(g, binding, &model.params, model.kl_logits, &fp.modalities, fp.n)?;
    let kl = g.mul_scalar(kl_raw, beta);
    let contrastive = contrastive_loss(g, &fp.modalities, temperature)?;

    let component_values = [
        task.map(|v| g.scalar_value(v)).unwrap_or(0.0),
        g.scalar_value(recon),
        g.scalar_value(kl),
        g.scalar_value(contrastive),
    ];
    for (name, v) in ["task", "recon", "kl", "contrastive"]
        .iter()
        .zip(component_values)
    {
        if !v.is_finite() {
            return Err(McvaeError::NonFinite {
                what: format!("{name} loss"),
                context: format!("value {v}"),
            });
        }
    }

    let total = total_loss(
        g,
        binding,
        &model.params,
        model.uncertainty,
        [task, Some(recon), Some(kl), Some(contrastive)],
    )?;
    let total_value = g.scalar_value(total);
    if !total_value.is_finite() {
        return Err(McvaeError::NonFinite {
            what: "total loss".into(),
            context: format!("value {total_value}"),
        });
    }

    let s_values = model.params.get(model.uncertainty).data().to_vec();
    let uncertainty_weights = std::array::from_fn(|i| (-s_values[i]).exp() / 2.0);
    let breakdown = LossBreakdown {
        task: component_values[0],
        recon: component_values[1],
        kl: component_values[2],
        contrastive: component_values[3],
        total: total_value,
        beta,
        uncertainty_weights,
        task_included: task.is_some(),
    };
    Ok((total, breakdown))
}
