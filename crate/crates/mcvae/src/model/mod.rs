//! The multimodal contrastive VAE: per-modality variational encoders,
//! availability-aware gated fusion with a residual feed-forward transform,
//! reconstruction decoders for the non-clinical modalities, and a linear
//! survival head producing per-patient log-hazards.
//!
//! Unavailable modalities never enter a computation: each encoder runs on
//! the sub-batch of rows that actually carry the modality, and the results
//! are scattered back into full-batch tensors with exact zeros elsewhere,
//! so perturbing a masked modality's features cannot change any output bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{PatientRecord, CLINICAL, MODALITY_NAMES, NUM_MODALITIES};
use crate::error::{McvaeError, Result};
use crate::nn::{
    feature_dropout, standard_normal_input, stream_rng, BatchNorm, BatchStats, Binding, Dense,
    ParamId, Params, Stream,
};

/// Clamp band for log-variance head outputs, keeping sigma within e^-5..e^5.
pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ModalitySpec {
    pub name: &'static str,
    pub input_dim: usize,
    /// Encoder depth L: number of layers counting the head layer.
    pub depth: usize,
    pub reconstructable: bool,
}

/// Standard four-modality layout: clinical and WSI use two-layer encoders,
/// transcriptomics and methylation three-layer; clinical is never decoded.
pub fn default_modality_specs(dims: [usize; NUM_MODALITIES]) -> [ModalitySpec; NUM_MODALITIES] {
    let depths = [2, 3, 2, 3];
    std::array::from_fn(|k| ModalitySpec {
        name: MODALITY_NAMES[k],
        input_dim: dims[k],
        depth: depths[k],
        reconstructable: k != CLINICAL,
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct McvaeConfig {
    pub modality_dims: [usize; NUM_MODALITIES],
    /// Shared latent dimension for every modality embedding.
    pub d_out: usize,
    pub hidden: usize,
    /// Feature dropout rate used throughout encoder/decoder/fusion stacks.
    pub dropout: f64,
}

impl McvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_out == 0 || self.hidden == 0 {
            return Err(McvaeError::Config(
                "latent and hidden dimensions must be positive".into(),
            ));
        }
        if self.modality_dims.iter().any(|d| *d == 0) {
            return Err(McvaeError::Config("modality dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(McvaeError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Per-patient latent summary for one modality.
#[derive(Debug, Clone)]
pub struct ModalityLatent {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
    pub available: bool,
}

/// The zero embedding standing in for an unavailable modality.
pub fn missing_latent(d_out: usize) -> ModalityLatent {
    ModalityLatent {
        mu: vec![0.0; d_out],
        log_var: vec![0.0; d_out],
        z: vec![0.0; d_out],
        available: false,
    }
}

struct EncoderStack {
    blocks: Vec<(Dense, BatchNorm)>,
    mu_head: Dense,
    log_var_head: Dense,
}

struct DecoderStack {
    block: (Dense, BatchNorm),
    out: Dense,
}

/// Forward/backward context: per-call randomness sources for training, or
/// deterministic evaluation with z = mu and batch-norm running statistics.
pub enum Mode<'r> {
    Train {
        feature_rng: &'r mut ChaCha8Rng,
        noise_rng: &'r mut ChaCha8Rng,
    },
    Eval,
}

impl Mode<'_> {
    fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Encoded state of one modality over a batch.
pub struct ModalityPass {
    /// Batch row indices that carry the modality (post-dropout).
    pub rows: Vec<usize>,
    /// `[m, d_out]` posterior means on the sub-batch.
    pub mu: Var,
    /// `[m, d_out]` clamped log-variances.
    pub log_var: Var,
    /// `[m, d_out]` latents: sampled in train mode, mu in eval mode.
    pub z: Var,
}

/// One forward evaluation of the full model on a batch.
pub struct ForwardPass {
    pub g: Graph,
    pub binding: Binding,
    pub n: usize,
    pub modalities: [Option<ModalityPass>; NUM_MODALITIES],
    /// Effective encoding masks after train-mode viability pruning.
    pub enc_masks: Vec<[bool; NUM_MODALITIES]>,
    /// Pre-transform fusion aggregate `[n, d_out]`.
    pub aggregate: Var,
    /// Fused representation after the residual feed-forward `[n, d_out]`.
    pub z_fused: Var,
    /// Per-patient log-hazard `[n]`.
    pub log_hazard: Var,
    /// Reconstructions `[n, d_k]` for decoded modalities.
    pub recons: [Option<Var>; NUM_MODALITIES],
    /// Batch-norm statistics to fold into running estimates after the step.
    pub bn_pending: Vec<(BatchNorm, BatchStats)>,
}

impl ForwardPass {
    /// Per-patient latents for one modality, zeros where it was masked.
    pub fn patient_latents(&self, k: usize) -> Vec<ModalityLatent> {
        let d = match &self.modalities[k] {
            Some(mp) => self.g.shape(mp.mu)[1],
            None => return (0..self.n).map(|_| missing_latent(0)).collect(),
        };
        let mp = self.modalities[k].as_ref().unwrap();
        let mut out: Vec<ModalityLatent> = (0..self.n).map(|_| missing_latent(d)).collect();
        let mu = self.g.value(mp.mu);
        let lv = self.g.value(mp.log_var);
        let z = self.g.value(mp.z);
        for (sub, &row) in mp.rows.iter().enumerate() {
            out[row] = ModalityLatent {
                mu: mu[sub * d..(sub + 1) * d].to_vec(),
                log_var: lv[sub * d..(sub + 1) * d].to_vec(),
                z: z[sub * d..(sub + 1) * d].to_vec(),
                available: true,
            };
        }
        out
    }
}

pub struct McvaeModel {
    pub config: McvaeConfig,
    pub specs: [ModalitySpec; NUM_MODALITIES],
    pub params: Params,
    encoders: Vec<EncoderStack>,
    decoders: Vec<Option<DecoderStack>>,
    /// Gate parameters, one scalar per modality (sigmoid-squashed in use).
    pub gates: ParamId,
    /// Logits behind the softmax KL weights, one per modality.
    pub kl_logits: ParamId,
    /// Uncertainty log-variances s_i for task/recon/KL/contrastive.
    pub uncertainty: ParamId,
    fusion_ln_gamma: ParamId,
    fusion_ln_beta: ParamId,
    /// Survival head weights `[d_out, 1]`, no bias.
    pub survival_w: ParamId,
}

impl McvaeModel {
    pub fn new(config: McvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = default_modality_specs(config.modality_dims);
        let mut params = Params::new();
        let mut rng = stream_rng(seed, Stream::ParamInit);

        let mut encoders = Vec::with_capacity(NUM_MODALITIES);
        for spec in &specs {
            let mut blocks = Vec::new();
            let mut in_dim = spec.input_dim;
            for l in 0..spec.depth - 1 {
                let prefix = format!("enc.{}.block{l}", spec.name);
                let dense =
                    Dense::new(&mut params, &format!("{prefix}.dense"), in_dim, config.hidden, &mut rng)?;
                let bn = BatchNorm::new(&mut params, &format!("{prefix}.bn"), config.hidden)?;
                blocks.push((dense, bn));
                in_dim = config.hidden;
            }
            let mu_head =
                Dense::new(&mut params, &format!("enc.{}.mu", spec.name), in_dim, config.d_out, &mut rng)?;
            let log_var_head = Dense::new(
                &mut params,
                &format!("enc.{}.log_var", spec.name),
                in_dim,
                config.d_out,
                &mut rng,
            )?;
            encoders.push(EncoderStack {
                blocks,
                mu_head,
                log_var_head,
            });
        }

        let mut decoders = Vec::with_capacity(NUM_MODALITIES);
        for spec in &specs {
            if !spec.reconstructable {
                decoders.push(None);
                continue;
            }
            let prefix = format!("dec.{}", spec.name);
            let dense = Dense::new(
                &mut params,
                &format!("{prefix}.block.dense"),
                config.d_out,
                config.hidden,
                &mut rng,
            )?;
            let bn = BatchNorm::new(&mut params, &format!("{prefix}.block.bn"), config.hidden)?;
            let out = Dense::new(
                &mut params,
                &format!("{prefix}.out"),
                config.hidden,
                spec.input_dim,
                &mut rng,
            )?;
            decoders.push(Some(DecoderStack {
                block: (dense, bn),
                out,
            }));
        }

        let gates = params.insert("fusion.gates", Tensor::zeros(&[NUM_MODALITIES]), true)?;
        let kl_logits = params.insert("kl.logits", Tensor::zeros(&[NUM_MODALITIES]), true)?;
        let uncertainty = params.insert("uncertainty.s", Tensor::zeros(&[4]), true)?;
        let fusion_ln_gamma =
            params.insert("fusion.ln.gamma", Tensor::full(&[config.d_out], 1.0), true)?;
        let fusion_ln_beta = params.insert("fusion.ln.beta", Tensor::zeros(&[config.d_out]), true)?;
        // the Cox objective is shift-invariant, so the head carries no bias
        let bound = 1.0 / (config.d_out as f64).sqrt();
        let head: Vec<f64> = (0..config.d_out).map(|_| rng.gen_range(-bound..bound)).collect();
        let survival_w =
            params.insert("survival.w", Tensor::matrix(config.d_out, 1, head)?, true)?;

        Ok(McvaeModel {
            config,
            specs,
            params,
            encoders,
            decoders,
            gates,
            kl_logits,
            uncertainty,
            fusion_ln_gamma,
            fusion_ln_beta,
            survival_w,
        })
    }

    /// Encode one modality's sub-batch through its stack.
    fn encode_sub(
        &self,
        g: &mut Graph,
        binding: &mut Binding,
        k: usize,
        x: Var,
        mode: &mut Mode,
        bn_pending: &mut Vec<(BatchNorm, BatchStats)>,
    ) -> Result<(Var, Var)> {
        let p = self.config.dropout;
        let mut h = match mode {
            Mode::Train { feature_rng, .. } => feature_dropout(g, x, p, true, feature_rng)?,
            Mode::Eval => x,
        };
        for (dense, bn) in &self.encoders[k].blocks {
            h = dense.forward(g, binding, &self.params, h)?;
            h = match mode {
                Mode::Train { .. } => {
                    let (y, stats) = bn.forward_train(g, binding, &self.params, h)?;
                    bn_pending.push((bn.clone(), stats));
                    y
                }
                Mode::Eval => bn.forward_eval(g, binding, &self.params, h)?,
            };
            h = g.relu(h);
            h = match mode {
                Mode::Train { feature_rng, .. } => feature_dropout(g, h, p, true, feature_rng)?,
                Mode::Eval => h,
            };
        }
        let mu = self.encoders[k].mu_head.forward(g, binding, &self.params, h)?;
        let lv_raw = self.encoders[k]
            .log_var_head
            .forward(g, binding, &self.params, h)?;
        let log_var = g.clamp(lv_raw, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1);
        Ok((mu, log_var))
    }

    /// Gated, availability-normalized fusion over scattered latents, then
    /// the residual feed-forward transform. `z_scattered[k]` is `[n, d_out]`
    /// with zeros on rows lacking modality `k`; `counts[i]` is the number of
    /// modalities fused for patient `i` (>= 1).
    pub fn fuse_latents(
        &self,
        g: &mut Graph,
        binding: &mut Binding,
        z_scattered: &[Option<Var>; NUM_MODALITIES],
        counts: &[f64],
        mode: &mut Mode,
    ) -> Result<(Var, Var)> {
        let n = counts.len();
        if counts.iter().any(|c| *c < 1.0) {
            return Err(McvaeError::InvalidArgument(
                "fusion requires at least one available modality per patient".into(),
            ));
        }
        let gates = binding.bind(g, &self.params, self.gates);
        let mut acc: Option<Var> = None;
        for (k, z) in z_scattered.iter().enumerate() {
            let Some(z) = z else { continue };
            let gate_logit = g.slice_cols(gates, k, k + 1)?;
            let gate = g.sigmoid(gate_logit);
            let gated = g.scale_by(*z, gate)?;
            acc = Some(match acc {
                None => gated,
                Some(a) => g.add(a, gated)?,
            });
        }
        let acc = acc.ok_or_else(|| {
            McvaeError::InvalidArgument("fusion requires at least one modality".into())
        })?;
        let counts_node = g.input(Tensor::vector(counts.to_vec()));
        let counts_mat = g.broadcast_col(counts_node, self.config.d_out)?;
        let aggregate = g.div(acc, counts_mat)?;

        // h(v) = v + Dropout(GELU(LN(v)))
        let mean = g.mean(aggregate, Some(1))?;
        let mean_b = g.broadcast_col(mean, self.config.d_out)?;
        let centered = g.sub(aggregate, mean_b)?;
        let sq = g.square(centered);
        let var = g.mean(sq, Some(1))?;
        let var_eps = g.add_scalar(var, LN_EPS);
        let std = g.sqrt(var_eps);
        let std_b = g.broadcast_col(std, self.config.d_out)?;
        let normed = g.div(centered, std_b)?;
        let gamma = binding.bind(g, &self.params, self.fusion_ln_gamma);
        let beta = binding.bind(g, &self.params, self.fusion_ln_beta);
        let gamma_b = g.broadcast_row(gamma, n)?;
        let beta_b = g.broadcast_row(beta, n)?;
        let scaled = g.mul(normed, gamma_b)?;
        let ln = g.add(scaled, beta_b)?;
        let act = g.gelu(ln);
        let ffn = match mode {
            Mode::Train { feature_rng, .. } => {
                feature_dropout(g, act, self.config.dropout, true, feature_rng)?
            }
            Mode::Eval => act,
        };
        let z_fused = g.add(aggregate, ffn)?;
        Ok((aggregate, z_fused))
    }

    fn decode(
        &self,
        g: &mut Graph,
        binding: &mut Binding,
        k: usize,
        z_fused: Var,
        mode: &mut Mode,
        bn_pending: &mut Vec<(BatchNorm, BatchStats)>,
    ) -> Result<Var> {
        let Some(dec) = &self.decoders[k] else {
            return Err(McvaeError::InvalidArgument(format!(
                "modality {} is not reconstructable",
                self.specs[k].name
            )));
        };
        let (dense, bn) = &dec.block;
        let mut h = dense.forward(g, binding, &self.params, z_fused)?;
        h = match mode {
            Mode::Train { .. } => {
                let (y, stats) = bn.forward_train(g, binding, &self.params, h)?;
                bn_pending.push((bn.clone(), stats));
                y
            }
            Mode::Eval => bn.forward_eval(g, binding, &self.params, h)?,
        };
        h = g.relu(h);
        h = match mode {
            Mode::Train { feature_rng, .. } => {
                feature_dropout(g, h, self.config.dropout, true, feature_rng)?
            }
            Mode::Eval => h,
        };
        dec.out.forward(g, binding, &self.params, h)
    }

    /// Run the model on a batch. `enc_masks[i]` is the post-dropout
    /// availability used for encoding and fusion; it may not exceed the
    /// record's natural availability. Decoders run (train mode only) for
    /// every reconstructable modality some batch member naturally carries.
    pub fn forward(
        &self,
        batch: &[&PatientRecord],
        enc_masks: &[[bool; NUM_MODALITIES]],
        mut mode: Mode,
    ) -> Result<ForwardPass> {
        let n = batch.len();
        if n == 0 {
            return Err(McvaeError::InvalidArgument("empty batch".into()));
        }
        if enc_masks.len() != n {
            return Err(McvaeError::DimensionMismatch {
                what: "encoding masks".into(),
                expected: n,
                got: enc_masks.len(),
            });
        }
        if mode.is_train() && n < 2 {
            return Err(McvaeError::InvalidArgument(
                "training batches need at least 2 patients".into(),
            ));
        }
        for (i, r) in batch.iter().enumerate() {
            if r.dims() != self.config.modality_dims {
                return Err(McvaeError::DimensionMismatch {
                    what: format!("features of record {i}"),
                    expected: self.config.modality_dims.iter().sum(),
                    got: r.dims().iter().sum(),
                });
            }
            for k in 0..NUM_MODALITIES {
                if enc_masks[i][k] && !r.available[k] {
                    return Err(McvaeError::InvalidArgument(format!(
                        "encoding mask requests unavailable modality {} for record {i}",
                        self.specs[k].name
                    )));
                }
            }
        }

        // effective masks: in train mode a modality carried by fewer than 2
        // patients cannot pass batch norm and is skipped for this batch
        let mut masks: Vec<[bool; NUM_MODALITIES]> = enc_masks.to_vec();
        for m in masks.iter_mut() {
            m[CLINICAL] = true;
        }
        for k in 0..NUM_MODALITIES {
            let count = masks.iter().filter(|m| m[k]).count();
            if mode.is_train() && count == 1 {
                for m in masks.iter_mut() {
                    m[k] = false;
                }
            }
        }

        let mut g = Graph::new();
        let mut binding = Binding::new();
        let mut bn_pending = Vec::new();
        let mut modalities: [Option<ModalityPass>; NUM_MODALITIES] = Default::default();
        let mut z_scattered: [Option<Var>; NUM_MODALITIES] = Default::default();

        for k in 0..NUM_MODALITIES {
            let rows: Vec<usize> = (0..n).filter(|&i| masks[i][k]).collect();
            if rows.is_empty() {
                continue;
            }
            let m = rows.len();
            let d_k = self.config.modality_dims[k];
            let mut data = Vec::with_capacity(m * d_k);
            for &i in &rows {
                data.extend_from_slice(&batch[i].features[k]);
            }
            let x = g.input(Tensor::matrix(m, d_k, data)?);
            let (mu, log_var) = self.encode_sub(&mut g, &mut binding, k, x, &mut mode, &mut bn_pending)?;
            let z = match &mut mode {
                Mode::Train { noise_rng, .. } => {
                    let half = g.mul_scalar(log_var, 0.5);
                    let sigma = g.exp(half);
                    let eps = standard_normal_input(&mut g, m, self.config.d_out, noise_rng)?;
                    let noise = g.mul(sigma, eps)?;
                    g.add(mu, noise)?
                }
                Mode::Eval => mu,
            };
            let scattered = g.scatter_rows(z, &rows, n)?;
            z_scattered[k] = Some(scattered);
            modalities[k] = Some(ModalityPass {
                rows,
                mu,
                log_var,
                z,
            });
        }

        let counts: Vec<f64> = masks
            .iter()
            .map(|m| m.iter().filter(|a| **a).count() as f64)
            .collect();
        let (aggregate, z_fused) =
            self.fuse_latents(&mut g, &mut binding, &z_scattered, &counts, &mut mode)?;

        let w = binding.bind(&mut g, &self.params, self.survival_w);
        let hazard_col = g.matmul(z_fused, w)?;
        let log_hazard = g.sum(hazard_col, Some(1))?;

        let mut recons: [Option<Var>; NUM_MODALITIES] = Default::default();
        if mode.is_train() {
            for k in 0..NUM_MODALITIES {
                if self.specs[k].reconstructable && batch.iter().any(|r| r.available[k]) {
                    recons[k] =
                        Some(self.decode(&mut g, &mut binding, k, z_fused, &mut mode, &mut bn_pending)?);
                }
            }
        }

        Ok(ForwardPass {
            g,
            binding,
            n,
            modalities,
            enc_masks: masks,
            aggregate,
            z_fused,
            log_hazard,
            recons,
            bn_pending,
        })
    }

    /// Fold pending batch-norm statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, pending: &[(BatchNorm, BatchStats)]) {
        for (bn, stats) in pending {
            bn.update_running(&mut self.params, stats);
        }
    }

    /// Deterministic per-patient log-hazards under natural availability.
    pub fn predict_log_hazards(&self, records: &[PatientRecord]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(records.len());
        // evaluation is pure, so records can be scored one by one without
        // any cross-patient batch effect
        for r in records {
            let masks = vec![r.available];
            let fp = self.forward(&[r], &masks, Mode::Eval)?;
            out.push(fp.g.value(fp.log_hazard)[0]);
        }
        Ok(out)
    }
}
