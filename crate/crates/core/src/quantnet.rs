//! Two-head quantile regressor: a fully connected ReLU network with batch
//! normalization on the hidden layers, trained on the pinball loss with Adam.
//!
//! All trainable values live in one flat vector. Layer `l` owns, in order, a
//! row-major `fan_in × fan_out` weight block, a bias, and for hidden layers
//! the batch-norm scale and shift.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::seeded_rng;

pub const MODEL_SCHEMA: &str = "capguard-qnet-v1";

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// ρ_τ(y − ŷ).
pub fn pinball_loss(tau: f64, y: f64, y_hat: f64) -> f64 {
    let u = y - y_hat;
    if u >= 0.0 {
        tau * u
    } else {
        (tau - 1.0) * u
    }
}

/// ∂ρ_τ/∂ŷ, right-hand branch at the kink.
fn pinball_slope(tau: f64, y: f64, y_hat: f64) -> f64 {
    if y - y_hat >= 0.0 {
        -tau
    } else {
        1.0 - tau
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// (τ_lo, τ_hi).
    pub quantiles: [f64; 2],
    pub hidden: Vec<usize>,
    pub output_relu: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 5e-4,
            max_epochs: 1200,
            patience: 50,
            val_fraction: 0.1,
            seed: 0,
            quantiles: [0.05, 0.95],
            hidden: vec![380, 380],
            output_relu: true,
        }
    }
}

impl TrainConfig {
    /// Quantile levels (α/2, 1 − α/2).
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.quantiles = [alpha / 2.0, 1.0 - alpha / 2.0];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", format!("must be positive, got {}", self.learning_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return Err(Error::config("val_fraction", format!("must lie in (0, 0.5], got {}", self.val_fraction)));
        }
        let [lo, hi] = self.quantiles;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::config("quantiles", format!("need 0 < lo < hi < 1, got ({lo}, {hi})")));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Offsets of one layer's blocks inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Slot {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    /// Start of γ then β, hidden layers only.
    bn: Option<usize>,
}

fn layout(dims: &[usize]) -> (Vec<Slot>, usize) {
    let n_layers = dims.len() - 1;
    let mut slots = Vec::with_capacity(n_layers);
    let mut off = 0;
    for l in 0..n_layers {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let w = off;
        let b = w + fan_in * fan_out;
        off = b + fan_out;
        let bn = (l + 1 < n_layers).then(|| {
            let at = off;
            off += 2 * fan_out;
            at
        });
        slots.push(Slot { fan_in, fan_out, w, b, bn });
    }
    (slots, off)
}

impl Slot {
    fn weight<'a>(&self, theta: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.fan_in, self.fan_out), &theta[self.w..self.b]).expect("weight block")
    }

    fn bias<'a>(&self, theta: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&theta[self.b..self.b + self.fan_out])
    }

    fn gamma<'a>(&self, theta: &'a [f64]) -> ArrayView1<'a, f64> {
        let at = self.bn.expect("hidden layer");
        ArrayView1::from(&theta[at..at + self.fan_out])
    }

    fn beta<'a>(&self, theta: &'a [f64]) -> ArrayView1<'a, f64> {
        let at = self.bn.expect("hidden layer") + self.fan_out;
        ArrayView1::from(&theta[at..at + self.fan_out])
    }
}

struct BnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    pre: Array2<f64>,
    mean: Array1<f64>,
    var: Array1<f64>,
}

struct Cache {
    inputs: Vec<Array2<f64>>,
    bn: Vec<BnCache>,
    out_pre: Array2<f64>,
}

/// Training-mode loss with its gradient, for inspection and gradient checks.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub gradient: Vec<f64>,
    /// Smallest distance of any ReLU pre-activation or pinball residual from
    /// its kink.
    pub kink_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileModel {
    dims: Vec<usize>,
    slots: Vec<Slot>,
    theta: Vec<f64>,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    quantiles: [f64; 2],
    output_relu: bool,
    pub meta: TrainingMeta,
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn step(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl QuantileModel {
    /// Untrained network with uniform ±1/√fan_in weights and biases, unit
    /// batch-norm scale, identity input standardization.
    pub fn initialized(input_dim: usize, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::config("input_dim", "must be at least 1"));
        }
        let mut model = Self::blank(input_dim, cfg);
        let mut rng = seeded_rng(seed);
        model.init_params(&mut rng);
        model.meta.seed = seed;
        Ok(model)
    }

    fn blank(input_dim: usize, cfg: &TrainConfig) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(2);
        let (slots, n_params) = layout(&dims);
        let running_mean = cfg.hidden.iter().map(|&w| vec![0.0; w]).collect();
        let running_var = cfg.hidden.iter().map(|&w| vec![1.0; w]).collect();
        QuantileModel {
            dims,
            slots,
            theta: vec![0.0; n_params],
            running_mean,
            running_var,
            input_mean: vec![0.0; input_dim],
            input_std: vec![1.0; input_dim],
            quantiles: cfg.quantiles,
            output_relu: cfg.output_relu,
            meta: TrainingMeta {
                seed: cfg.seed,
                epochs_run: 0,
                best_epoch: 0,
                val_loss: f64::NAN,
            },
        }
    }

    fn init_params<R: Rng>(&mut self, rng: &mut R) {
        for slot in &self.slots {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for v in &mut self.theta[slot.w..slot.b + slot.fan_out] {
                *v = rng.random_range(-bound..bound);
            }
            if let Some(at) = slot.bn {
                self.theta[at..at + slot.fan_out].fill(1.0);
                self.theta[at + slot.fan_out..at + 2 * slot.fan_out].fill(0.0);
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn quantiles(&self) -> [f64; 2] {
        self.quantiles
    }

    pub fn parameters(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_parameters(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::Invalid(format!(
                "parameter vector has {} entries, model needs {}",
                theta.len(),
                self.theta.len()
            )));
        }
        self.theta = theta;
        Ok(())
    }

    fn standardize(&self, rows: &[Vec<f64>]) -> Result<Array2<f64>> {
        let d = self.input_dim();
        let mut x = Array2::zeros((rows.len(), d));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Domain(format!("input {i} has {} features, model expects {d}", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Domain(format!("input {i} feature {j} is not finite")));
                }
                x[[i, j]] = (v - self.input_mean[j]) / self.input_std[j];
            }
        }
        Ok(x)
    }

    fn forward_train(&self, x: &Array2<f64>) -> (Array2<f64>, Cache) {
        let mut cache = Cache {
            inputs: Vec::with_capacity(self.slots.len()),
            bn: Vec::with_capacity(self.slots.len() - 1),
            out_pre: Array2::zeros((0, 0)),
        };
        let mut h = x.clone();
        for slot in &self.slots {
            let mut z = h.dot(&slot.weight(&self.theta));
            z += &slot.bias(&self.theta);
            cache.inputs.push(h);
            if slot.bn.is_some() {
                let n = z.nrows() as f64;
                let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = &z - &mean;
                let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
                let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let xhat = centered * &inv_std;
                let pre = &xhat * &slot.gamma(&self.theta) + slot.beta(&self.theta);
                h = pre.mapv(relu);
                cache.bn.push(BnCache {
                    xhat,
                    inv_std,
                    pre,
                    mean,
                    var,
                });
            } else {
                h = if self.output_relu { z.mapv(relu) } else { z.clone() };
                cache.out_pre = z;
            }
        }
        (h, cache)
    }

    fn backward(&self, cache: &Cache, dout: Array2<f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.theta.len()];
        let mut dh = dout;
        for (l, slot) in self.slots.iter().enumerate().rev() {
            let dz = if let Some(at) = slot.bn {
                let bc = &cache.bn[l];
                let da = dh * &bc.pre.mapv(step);
                let dgamma = (&da * &bc.xhat).sum_axis(Axis(0));
                let dbeta = da.sum_axis(Axis(0));
                grad[at..at + slot.fan_out].copy_from_slice(dgamma.as_slice().expect("contiguous"));
                grad[at + slot.fan_out..at + 2 * slot.fan_out].copy_from_slice(dbeta.as_slice().expect("contiguous"));
                let n = da.nrows() as f64;
                let dxhat = da * slot.gamma(&self.theta);
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * &bc.xhat).sum_axis(Axis(0));
                (dxhat * n - &sum_dxhat - &bc.xhat * &sum_dxhat_xhat) * &(&bc.inv_std / n)
            } else if self.output_relu {
                dh * &cache.out_pre.mapv(step)
            } else {
                dh
            };
            let input = &cache.inputs[l];
            {
                let mut gw = ArrayViewMut2::from_shape((slot.fan_in, slot.fan_out), &mut grad[slot.w..slot.b])
                    .expect("weight block");
                general_mat_mul(1.0, &input.t(), &dz, 0.0, &mut gw);
            }
            let gb = dz.sum_axis(Axis(0));
            grad[slot.b..slot.b + slot.fan_out].copy_from_slice(gb.as_slice().expect("contiguous"));
            if l > 0 {
                dh = dz.dot(&slot.weight(&self.theta).t());
            } else {
                break;
            }
        }
        grad
    }

    /// Mean over samples of the summed two-head pinball loss, and its
    /// gradient with respect to the raw outputs.
    fn loss_and_slope(&self, out: &Array2<f64>, y: &[f64]) -> (f64, Array2<f64>) {
        let n = y.len() as f64;
        let mut loss = 0.0;
        let mut dout = Array2::zeros(out.raw_dim());
        for (i, &yi) in y.iter().enumerate() {
            for (k, &tau) in self.quantiles.iter().enumerate() {
                loss += pinball_loss(tau, yi, out[[i, k]]);
                dout[[i, k]] = pinball_slope(tau, yi, out[[i, k]]) / n;
            }
        }
        (loss / n, dout)
    }

    fn forward_infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        let mut hidden = 0;
        for slot in &self.slots {
            let mut z = h.dot(&slot.weight(&self.theta));
            z += &slot.bias(&self.theta);
            if slot.bn.is_some() {
                let mean = ArrayView1::from(&self.running_mean[hidden]);
                let scale = ArrayView1::from(&self.running_var[hidden]).mapv(|v| 1.0 / (v + BN_EPS).sqrt())
                    * slot.gamma(&self.theta);
                h = ((z - mean) * &scale + slot.beta(&self.theta)).mapv(relu);
                hidden += 1;
            } else {
                h = if self.output_relu { z.mapv(relu) } else { z };
            }
        }
        h
    }

    /// Loss and gradient in training mode (batch statistics), without
    /// touching the running statistics.
    pub fn training_objective(&self, x: &[Vec<f64>], y: &[f64]) -> Result<Objective> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(Error::Invalid("objective needs at least 2 samples and one label per row".into()));
        }
        let xs = self.standardize(x)?;
        let (out, cache) = self.forward_train(&xs);
        let (loss, dout) = self.loss_and_slope(&out, y);
        let gradient = self.backward(&cache, dout);
        let mut kink = f64::INFINITY;
        for bc in &cache.bn {
            kink = bc.pre.iter().fold(kink, |m, v| m.min(v.abs()));
        }
        if self.output_relu {
            kink = cache.out_pre.iter().fold(kink, |m, v| m.min(v.abs()));
        }
        for (i, &yi) in y.iter().enumerate() {
            for k in 0..2 {
                kink = kink.min((yi - out[[i, k]]).abs());
            }
        }
        Ok(Objective {
            loss,
            gradient,
            kink_distance: kink,
        })
    }

    /// Raw head outputs, unsorted, for a standardized batch.
    fn raw_outputs(&self, rows: &[Vec<f64>]) -> Result<Array2<f64>> {
        Ok(self.forward_infer(&self.standardize(rows)?))
    }

    /// Sorted (q_lo, q_hi) per row.
    pub fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.raw_outputs(rows)?;
        Ok(out
            .rows()
            .into_iter()
            .map(|r| (r[0].min(r[1]), r[0].max(r[1])))
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        Ok(self.predict_batch(&[x.to_vec()])?[0])
    }

    /// Mean two-head pinball loss in inference mode.
    pub fn pinball(&self, rows: &[Vec<f64>], y: &[f64]) -> Result<f64> {
        if rows.len() != y.len() || rows.is_empty() {
            return Err(Error::Invalid("need one label per row and at least one row".into()));
        }
        let out = self.raw_outputs(rows)?;
        Ok(self.loss_and_slope(&out, y).0)
    }

    fn update_running_stats(&mut self, cache: &Cache) {
        for (i, bc) in cache.bn.iter().enumerate() {
            let n = cache.inputs[0].nrows() as f64;
            let unbiased = n / (n - 1.0).max(1.0);
            for (j, (rm, rv)) in self.running_mean[i].iter_mut().zip(self.running_var[i].iter_mut()).enumerate() {
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * bc.mean[j];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * bc.var[j] * unbiased;
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut layers = Vec::with_capacity(self.slots.len());
        let mut hidden = 0;
        for slot in &self.slots {
            let batch_norm = slot.bn.map(|_| {
                let bn = BatchNormFile {
                    gamma: slot.gamma(&self.theta).to_vec(),
                    beta: slot.beta(&self.theta).to_vec(),
                    running_mean: self.running_mean[hidden].clone(),
                    running_var: self.running_var[hidden].clone(),
                };
                hidden += 1;
                bn
            });
            layers.push(LayerFile {
                fan_in: slot.fan_in,
                fan_out: slot.fan_out,
                weight: self.theta[slot.w..slot.b].to_vec(),
                bias: self.theta[slot.b..slot.b + slot.fan_out].to_vec(),
                batch_norm,
            });
        }
        let file = ModelFile {
            schema: MODEL_SCHEMA.to_string(),
            dims: self.dims.clone(),
            output_relu: self.output_relu,
            quantiles: self.quantiles,
            input_mean: self.input_mean.clone(),
            input_std: self.input_std.clone(),
            layers,
            meta: self.meta.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>");
        if found != MODEL_SCHEMA {
            return Err(Error::SchemaMismatch {
                expected: MODEL_SCHEMA.to_string(),
                found: found.to_string(),
            });
        }
        let file: ModelFile = serde_json::from_value(value)?;
        file.into_model()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct BatchNormFile {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    fan_in: usize,
    fan_out: usize,
    /// Row-major, `weight[i * fan_out + j]` connects input `i` to unit `j`.
    weight: Vec<f64>,
    bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    batch_norm: Option<BatchNormFile>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema: String,
    dims: Vec<usize>,
    output_relu: bool,
    quantiles: [f64; 2],
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    layers: Vec<LayerFile>,
    meta: TrainingMeta,
}

impl ModelFile {
    fn into_model(self) -> Result<QuantileModel> {
        let bad = |why: String| Error::Invalid(format!("malformed model file: {why}"));
        let dims = self.dims;
        if dims.len() < 2 || dims.contains(&0) || *dims.last().unwrap() != 2 {
            return Err(bad(format!("layer widths {dims:?}")));
        }
        if self.layers.len() != dims.len() - 1 {
            return Err(bad(format!("{} layers for widths {dims:?}", self.layers.len())));
        }
        let d = dims[0];
        if self.input_mean.len() != d || self.input_std.len() != d || self.input_std.iter().any(|&s| !(s > 0.0)) {
            return Err(bad("input standardization".into()));
        }
        let [lo, hi] = self.quantiles;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(bad(format!("quantile levels ({lo}, {hi})")));
        }
        let (slots, n_params) = layout(&dims);
        let mut theta = vec![0.0; n_params];
        let mut running_mean = Vec::new();
        let mut running_var = Vec::new();
        for (l, (slot, layer)) in slots.iter().zip(self.layers).enumerate() {
            if layer.fan_in != slot.fan_in
                || layer.fan_out != slot.fan_out
                || layer.weight.len() != slot.fan_in * slot.fan_out
                || layer.bias.len() != slot.fan_out
            {
                return Err(bad(format!("layer {l} shape")));
            }
            theta[slot.w..slot.b].copy_from_slice(&layer.weight);
            theta[slot.b..slot.b + slot.fan_out].copy_from_slice(&layer.bias);
            match (slot.bn, layer.batch_norm) {
                (Some(at), Some(bn)) => {
                    let w = slot.fan_out;
                    if [bn.gamma.len(), bn.beta.len(), bn.running_mean.len(), bn.running_var.len()] != [w; 4] {
                        return Err(bad(format!("layer {l} batch-norm shape")));
                    }
                    theta[at..at + w].copy_from_slice(&bn.gamma);
                    theta[at + w..at + 2 * w].copy_from_slice(&bn.beta);
                    running_mean.push(bn.running_mean);
                    running_var.push(bn.running_var);
                }
                (None, None) => {}
                _ => return Err(bad(format!("layer {l} batch-norm presence"))),
            }
        }
        Ok(QuantileModel {
            dims,
            slots,
            theta,
            running_mean,
            running_var,
            input_mean: self.input_mean,
            input_std: self.input_std,
            quantiles: self.quantiles,
            output_relu: self.output_relu,
            meta: self.meta,
        })
    }
}

/// Batches of the shuffled order; a trailing batch of one joins its
/// predecessor so batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

pub fn train(x: &[Vec<f64>], y: &[f64], cfg: &TrainConfig) -> Result<QuantileModel> {
    train_logged(x, y, cfg).map(|(m, _)| m)
}

/// Trains and returns the best-validation snapshot with the per-epoch log.
pub fn train_logged(x: &[Vec<f64>], y: &[f64], cfg: &TrainConfig) -> Result<(QuantileModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    let n = x.len();
    if y.len() != n {
        return Err(Error::Invalid(format!("{n} feature rows but {} labels", y.len())));
    }
    if n < 2 * cfg.batch_size {
        return Err(Error::Invalid(format!(
            "training needs at least {} samples (twice the batch size), got {n}",
            2 * cfg.batch_size
        )));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Invalid("feature rows must share a positive width".into()));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("label {i} is not finite")));
    }

    let mut rng = seeded_rng(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 2);
    let (val_idx, fit_idx) = order.split_at(n_val);
    let mut fit_idx = fit_idx.to_vec();

    let mut model = QuantileModel::blank(d, cfg);
    for j in 0..d {
        let col: Vec<f64> = fit_idx.iter().map(|&i| x[i][j]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        model.input_mean[j] = mean;
        // Constant columns pass through centred only.
        model.input_std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    model.init_params(&mut rng);
    let xs = model.standardize(x)?;
    let x_val = xs.select(Axis(0), val_idx);
    let y_val: Vec<f64> = val_idx.iter().map(|&i| y[i]).collect();

    let n_params = model.theta.len();
    let (mut m1, mut m2) = (vec![0.0; n_params], vec![0.0; n_params]);
    let mut t = 0i32;
    let mut best: Option<(f64, usize, QuantileModel)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        fit_idx.shuffle(&mut rng);
        let mut sum_loss = 0.0;
        for batch in batches(&fit_idx, cfg.batch_size) {
            let xb = xs.select(Axis(0), batch);
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let (out, cache) = model.forward_train(&xb);
            let (loss, dout) = model.loss_and_slope(&out, &yb);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let grad = model.backward(&cache, dout);
            t += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (((p, g), a), b) in model.theta.iter_mut().zip(&grad).zip(&mut m1).zip(&mut m2) {
                *a = ADAM_BETA1 * *a + (1.0 - ADAM_BETA1) * g;
                *b = ADAM_BETA2 * *b + (1.0 - ADAM_BETA2) * g * g;
                *p -= cfg.learning_rate * (*a / c1) / ((*b / c2).sqrt() + ADAM_EPS);
            }
            model.update_running_stats(&cache);
            sum_loss += loss * batch.len() as f64;
        }
        let train_loss = sum_loss / fit_idx.len() as f64;
        let val_loss = model.loss_and_slope(&model.forward_infer(&x_val), &y_val).0;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if epoch % 50 == 0 {
            log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let epochs_run = log.len();
    let (val_loss, best_epoch, mut model) = best.expect("at least one epoch");
    model.meta = TrainingMeta {
        seed: cfg.seed,
        epochs_run,
        best_epoch,
        val_loss,
    };
    Ok((model, log))
}

pub fn write_training_log<W: Write>(mut out: W, log: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_loss")?;
    for r in log {
        writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_loss)?;
    }
    Ok(())
}
