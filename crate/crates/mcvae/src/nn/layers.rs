//! Layers used by the encoder/decoder stacks: dense, batch norm, dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{McvaeError, Result};

use super::params::{Binding, ParamId, Params};

/// Fully connected layer `y = x W + b` with `W: [in, out]`.
///
/// Weights initialize uniformly in `±1/sqrt(fan_in)`; biases start at zero.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(
        store: &mut Params,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let w = store.insert(&format!("{name}.w"), Tensor::matrix(in_dim, out_dim, data)?, true)?;
        let b = store.insert(&format!("{name}.b"), Tensor::zeros(&[out_dim]), true)?;
        Ok(Dense { w, b, in_dim, out_dim })
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        binding: &mut Binding,
        store: &Params,
        x: Var,
    ) -> Result<Var> {
        let w = binding.bind(g, store, self.w);
        let b = binding.bind(g, store, self.b);
        let rows = g.shape(x)[0];
        let h = g.matmul(x, w)?;
        let bb = g.broadcast_row(b, rows)?;
        g.add(h, bb)
    }
}

/// Batch statistics captured during a training forward pass, used to update
/// the running estimates afterwards (outside the graph).
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n-1 denominator) variance, the convention for running stats.
    pub var_unbiased: Vec<f64>,
    pub batch_size: usize,
}

/// Batch normalization over feature columns.
///
/// Training normalizes with biased batch variance; running estimates update
/// with the unbiased variance at momentum 0.1. Evaluation normalizes with
/// the stored running statistics and mutates nothing.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut Params, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.insert(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true)?;
        let beta = store.insert(&format!("{name}.beta"), Tensor::zeros(&[dim]), true)?;
        let running_mean =
            store.insert(&format!("{name}.running_mean"), Tensor::zeros(&[dim]), false)?;
        let running_var =
            store.insert(&format!("{name}.running_var"), Tensor::full(&[dim], 1.0), false)?;
        Ok(BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            dim,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Training-mode forward on `x: [n, dim]`, `n >= 2`. Returns the
    /// normalized output and the stats needed for the running update.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        binding: &mut Binding,
        store: &Params,
        x: Var,
    ) -> Result<(Var, BatchStats)> {
        let n = g.shape(x)[0];
        if n < 2 {
            return Err(McvaeError::InvalidArgument(format!(
                "batch norm needs at least 2 rows in training mode, got {n}"
            )));
        }
        let mean = g.mean(x, Some(0))?;
        let mean_b = g.broadcast_row(mean, n)?;
        let centered = g.sub(x, mean_b)?;
        let sq = g.square(centered);
        let var = g.mean(sq, Some(0))?; // biased
        let var_eps = g.add_scalar(var, self.eps);
        let std = g.sqrt(var_eps);
        let std_b = g.broadcast_row(std, n)?;
        let norm = g.div(centered, std_b)?;
        let y = self.affine(g, binding, store, norm, n)?;

        let mean_vals = g.value(mean).to_vec();
        let var_biased = g.value(var).to_vec();
        let correction = n as f64 / (n as f64 - 1.0);
        let var_unbiased: Vec<f64> = var_biased.iter().map(|v| v * correction).collect();
        Ok((
            y,
            BatchStats {
                mean: mean_vals,
                var_unbiased,
                batch_size: n,
            },
        ))
    }

    /// Evaluation-mode forward using running statistics.
    pub fn forward_eval(
        &self,
        g: &mut Graph,
        binding: &mut Binding,
        store: &Params,
        x: Var,
    ) -> Result<Var> {
        let n = g.shape(x)[0];
        let rm = binding.bind(g, store, self.running_mean);
        let rv = binding.bind(g, store, self.running_var);
        let rm_b = g.broadcast_row(rm, n)?;
        let centered = g.sub(x, rm_b)?;
        let rv_eps = g.add_scalar(rv, self.eps);
        let std = g.sqrt(rv_eps);
        let std_b = g.broadcast_row(std, n)?;
        let norm = g.div(centered, std_b)?;
        self.affine(g, binding, store, norm, n)
    }

    fn affine(
        &self,
        g: &mut Graph,
        binding: &mut Binding,
        store: &Params,
        norm: Var,
        n: usize,
    ) -> Result<Var> {
        let gamma = binding.bind(g, store, self.gamma);
        let beta = binding.bind(g, store, self.beta);
        let gamma_b = g.broadcast_row(gamma, n)?;
        let beta_b = g.broadcast_row(beta, n)?;
        let scaled = g.mul(norm, gamma_b)?;
        g.add(scaled, beta_b)
    }

    /// Fold freshly observed batch statistics into the running estimates.
    pub fn update_running(&self, store: &mut Params, stats: &BatchStats) {
        let m = self.momentum;
        {
            let rm = store.get_mut(self.running_mean).data_mut();
            for (r, b) in rm.iter_mut().zip(&stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        let rv = store.get_mut(self.running_var).data_mut();
        for (r, b) in rv.iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Inverted dropout: zero each element with probability `p` and scale the
/// survivors by `1/(1-p)`. Identity when `p == 0` or `train` is false.
pub fn feature_dropout(
    g: &mut Graph,
    x: Var,
    p: f64,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(McvaeError::InvalidArgument(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if !train || p == 0.0 {
        return Ok(x);
    }
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..g.value(x).len())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect();
    let mask_t = Tensor::new(g.shape(x).to_vec(), mask)?;
    let m = g.input(mask_t);
    g.mul(x, m)
}

/// `rows x cols` of standard normal draws as a constant graph node.
pub fn standard_normal_input(
    g: &mut Graph,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Ok(g.input(Tensor::matrix(rows, cols, data)?))
}
