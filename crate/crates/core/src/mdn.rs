//! Mixture density network student.
//!
//! A ReLU MLP backbone maps the prompt representation `h` to three affine heads:
//! mixture logits (K), component means (K·d) and log-scales (K·d). Log-scales
//! are clamped at `ln(scale_floor)` inside the forward pass, so the gradient is
//! zero wherever the floor is active.
//!
//! Parameters live in one flat `Vec<f64>`; [`Layout`] maps it to layers.
//! Gradients are exact (hand-written backprop). A batch is reduced over fixed
//! chunks of consecutive records in order, so training is bit-reproducible for
//! any thread count.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PromptRecord;
use crate::error::{check_dim, Error, Result};
use crate::gmm::{log_sum_exp, GaussianMixture, DEFAULT_SCALE_FLOOR, LN_2PI};
use crate::par;
use crate::pca::read_f32s;

pub const CHECKPOINT_FORMAT: &str = "ssd-mdn";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEAD_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdnConfig {
    pub input_dim: usize,
    pub target_dim: usize,
    pub components: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub scale_floor: f64,
    pub seed: u64,
}

impl MdnConfig {
    pub fn new(input_dim: usize, target_dim: usize) -> Self {
        MdnConfig {
            input_dim,
            target_dim,
            components: 5,
            hidden_width: 128,
            depth: 2,
            scale_floor: DEFAULT_SCALE_FLOOR,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("target_dim", self.target_dim),
            ("components", self.components),
            ("hidden_width", self.hidden_width),
            ("depth", self.depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !(self.scale_floor > 0.0 && self.scale_floor.is_finite()) {
            return Err(Error::invalid("scale_floor must be positive"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// Offsets of each weight block in the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    /// (weight offset, bias offset, fan_in, fan_out) per backbone layer.
    layers: Vec<(usize, usize, usize, usize)>,
    heads: [(usize, usize, usize); 3],
    total: usize,
}

const LOGITS: usize = 0;
const MEANS: usize = 1;
const LOG_SCALES: usize = 2;

impl Layout {
    fn new(cfg: &MdnConfig) -> Self {
        let mut off = 0;
        let mut layers = Vec::with_capacity(cfg.depth);
        let mut fan_in = cfg.input_dim;
        for _ in 0..cfg.depth {
            let w = off;
            off += fan_in * cfg.hidden_width;
            let b = off;
            off += cfg.hidden_width;
            layers.push((w, b, fan_in, cfg.hidden_width));
            fan_in = cfg.hidden_width;
        }
        let k = cfg.components;
        let kd = k * cfg.target_dim;
        let mut heads = [(0, 0, 0); 3];
        for (slot, out) in heads.iter_mut().zip([k, kd, kd]) {
            let w = off;
            off += cfg.hidden_width * out;
            let b = off;
            off += out;
            *slot = (w, b, out);
        }
        Layout { layers, heads, total: off }
    }
}

const GRAD_CHUNK: usize = 8;

/// Borrowed training unit: one prompt representation and its teacher samples.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub h: &'a [f64],
    pub targets: &'a [Vec<f64>],
}

impl<'a> From<&'a PromptRecord> for Example<'a> {
    fn from(r: &'a PromptRecord) -> Self {
        Example { h: &r.h, targets: &r.samples }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdnModel {
    config: MdnConfig,
    params: Vec<f64>,
    pca_id: Option<String>,
    metrics: BTreeMap<String, f64>,
}

struct HeadOutput {
    logits: Vec<f64>,
    means: Vec<f64>,
    /// Clamped log-scales.
    log_scales: Vec<f64>,
    /// Whether each raw log-scale sat above the floor (gradient passes).
    active: Vec<bool>,
}

impl MdnModel {
    /// Random model whose heads start at a standard-normal marginal.
    pub fn new(config: MdnConfig) -> Result<Self> {
        let d = config.target_dim;
        Self::initialize(config, &vec![0.0; d], &vec![1.0; d])
    }

    /// Fan-in uniform backbone; mean-head bias at `target_mean`, log-scale bias at
    /// `ln(target_std)` so the initial student sits at the marginal target law.
    pub fn initialize(config: MdnConfig, target_mean: &[f64], target_std: &[f64]) -> Result<Self> {
        config.validate()?;
        check_dim("target mean", config.target_dim, target_mean.len())?;
        check_dim("target std", config.target_dim, target_std.len())?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; layout.total];
        for &(w, _, fan_in, fan_out) in &layout.layers {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[w..w + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
        }
        let h = config.hidden_width;
        let head_bound = HEAD_INIT_GAIN * (6.0 / h as f64).sqrt();
        for &(w, _, out) in &layout.heads {
            for p in &mut params[w..w + h * out] {
                *p = rng.random_range(-head_bound..head_bound);
            }
        }
        let (_, mb, _) = layout.heads[MEANS];
        let (_, sb, _) = layout.heads[LOG_SCALES];
        let d = config.target_dim;
        for k in 0..config.components {
            for j in 0..d {
                params[mb + k * d + j] = target_mean[j];
                params[sb + k * d + j] = target_std[j].max(config.scale_floor).ln();
            }
        }
        let mut model = MdnModel { config, params, pca_id: None, metrics: BTreeMap::new() };
        model.round_to_f32();
        Ok(model)
    }

    pub fn config(&self) -> &MdnConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        check_dim("parameter vector", self.params.len(), params.len())?;
        self.params = params;
        Ok(())
    }

    pub fn pca_id(&self) -> Option<&str> {
        self.pca_id.as_deref()
    }

    pub fn set_pca_id(&mut self, id: Option<String>) {
        self.pca_id = id;
    }

    pub fn metrics(&self) -> &BTreeMap<String, f64> {
        &self.metrics
    }

    pub fn set_metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    /// Snaps parameters to the f32 grid used by checkpoints.
    fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    /// Backbone activations: `acts[0] = h`, `acts[l]` the output of layer `l`.
    fn backbone(&self, layout: &Layout, h: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(layout.layers.len() + 1);
        acts.push(h.to_vec());
        for &(w, b, fan_in, fan_out) in &layout.layers {
            let input = acts.last().expect("input layer present");
            let out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &self.params[w + o * fan_in..w + (o + 1) * fan_in];
                    let z = self.params[b + o] + dot(row, input);
                    z.max(0.0)
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    fn heads(&self, layout: &Layout, top: &[f64]) -> HeadOutput {
        let h = self.config.hidden_width;
        let affine = |(w, b, out): (usize, usize, usize)| -> Vec<f64> {
            (0..out).map(|o| self.params[b + o] + dot(&self.params[w + o * h..w + (o + 1) * h], top)).collect()
        };
        let logits = affine(layout.heads[LOGITS]);
        let means = affine(layout.heads[MEANS]);
        let raw = affine(layout.heads[LOG_SCALES]);
        let floor = self.config.scale_floor.ln();
        let active = raw.iter().map(|&r| r > floor).collect();
        let log_scales = raw.iter().map(|&r| r.max(floor)).collect();
        HeadOutput { logits, means, log_scales, active }
    }

    fn mixture_from(&self, out: &HeadOutput) -> Result<GaussianMixture> {
        GaussianMixture::from_flat(
            softmax(&out.logits),
            out.means.clone(),
            out.log_scales.iter().map(|l| l.exp()).collect(),
            self.config.target_dim,
            self.config.scale_floor,
        )
    }

    /// Predicted mixture for one prompt representation.
    pub fn forward(&self, h: &[f64]) -> Result<GaussianMixture> {
        check_dim("h", self.config.input_dim, h.len())?;
        let layout = Layout::new(&self.config);
        let acts = self.backbone(&layout, h);
        let out = self.heads(&layout, acts.last().expect("top layer"));
        self.mixture_from(&out)
    }

    /// `-(1/S) Σ_s log q(z_s | h)`, composed from [`Self::forward`] and
    /// [`GaussianMixture::log_density`].
    pub fn nll_loss(&self, h: &[f64], targets: &[Vec<f64>]) -> Result<f64> {
        if targets.is_empty() {
            return Err(Error::invalid("nll_loss needs at least one target"));
        }
        let q = self.forward(h)?;
        let mut total = 0.0;
        for z in targets {
            total += q.log_density(z)?;
        }
        Ok(-total / targets.len() as f64)
    }

    fn check_example(&self, ex: &Example<'_>) -> Result<()> {
        check_dim("h", self.config.input_dim, ex.h.len())?;
        if ex.targets.is_empty() {
            return Err(Error::invalid("example has no targets"));
        }
        for z in ex.targets {
            check_dim("target", self.config.target_dim, z.len())?;
        }
        Ok(())
    }

    /// Loss and exact gradient of the per-example NLL, written into `grad`.
    fn example_loss_grad(&self, layout: &Layout, ex: &Example<'_>, grad: &mut [f64]) -> f64 {
        let cfg = &self.config;
        let (k, d, hw) = (cfg.components, cfg.target_dim, cfg.hidden_width);
        let acts = self.backbone(layout, ex.h);
        let top = acts.last().expect("top layer");
        let out = self.heads(layout, top);

        let log_norm = log_sum_exp(&out.logits);
        let log_pi: Vec<f64> = out.logits.iter().map(|a| a - log_norm).collect();
        let pi: Vec<f64> = log_pi.iter().map(|l| l.exp()).collect();
        let inv_var: Vec<f64> = out.log_scales.iter().map(|l| (-2.0 * l).exp()).collect();
        let const_term = -0.5 * LN_2PI * d as f64;
        let log_det: Vec<f64> = (0..k).map(|c| out.log_scales[c * d..(c + 1) * d].iter().sum()).collect();

        let mut d_logits = vec![0.0; k];
        let mut d_means = vec![0.0; k * d];
        let mut d_log_scales = vec![0.0; k * d];
        let inv_s = 1.0 / ex.targets.len() as f64;
        let mut loss = 0.0;
        let mut lp = vec![0.0; k];
        for z in ex.targets {
            for c in 0..k {
                let mut q = 0.0;
                for j in 0..d {
                    let diff = z[j] - out.means[c * d + j];
                    q += diff * diff * inv_var[c * d + j];
                }
                lp[c] = log_pi[c] + const_term - log_det[c] - 0.5 * q;
            }
            let lq = log_sum_exp(&lp);
            loss -= lq * inv_s;
            for c in 0..k {
                let r = (lp[c] - lq).exp();
                d_logits[c] += (pi[c] - r) * inv_s;
                if r == 0.0 {
                    continue;
                }
                for (j, &zj) in z.iter().enumerate() {
                    let i = c * d + j;
                    let diff = zj - out.means[i];
                    d_means[i] -= r * diff * inv_var[i] * inv_s;
                    if out.active[i] {
                        d_log_scales[i] -= r * (diff * diff * inv_var[i] - 1.0) * inv_s;
                    }
                }
            }
        }

        let mut d_top = vec![0.0; hw];
        for (head, dout) in [(LOGITS, &d_logits), (MEANS, &d_means), (LOG_SCALES, &d_log_scales)] {
            let (w, b, n_out) = layout.heads[head];
            for o in 0..n_out {
                let g = dout[o];
                if g == 0.0 {
                    continue;
                }
                grad[b + o] += g;
                let row = w + o * hw;
                for i in 0..hw {
                    grad[row + i] += g * top[i];
                    d_top[i] += g * self.params[row + i];
                }
            }
        }

        let mut d_act = d_top;
        for (l, &(w, b, fan_in, fan_out)) in layout.layers.iter().enumerate().rev() {
            let input = &acts[l];
            let output = &acts[l + 1];
            let mut d_in = vec![0.0; fan_in];
            for o in 0..fan_out {
                // relu'(z) = 1 iff the stored activation is positive
                if output[o] <= 0.0 || d_act[o] == 0.0 {
                    continue;
                }
                let g = d_act[o];
                grad[b + o] += g;
                let row = w + o * fan_in;
                for i in 0..fan_in {
                    grad[row + i] += g * input[i];
                    d_in[i] += g * self.params[row + i];
                }
            }
            d_act = d_in;
        }
        loss
    }

    /// Mean NLL over `batch` and its exact gradient with respect to [`Self::params`].
    pub fn loss_and_gradient(&self, batch: &[Example<'_>]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::invalid("gradient batch is empty"));
        }
        for ex in batch {
            self.check_example(ex)?;
        }
        let layout = Layout::new(&self.config);
        // fixed chunking keeps the summation order independent of the thread count
        let parts = par::map_indexed(batch.len().div_ceil(GRAD_CHUNK), |c| {
            let mut g = vec![0.0; layout.total];
            let end = (c * GRAD_CHUNK + GRAD_CHUNK).min(batch.len());
            let l: f64 = batch[c * GRAD_CHUNK..end].iter().map(|ex| self.example_loss_grad(&layout, ex, &mut g)).sum();
            (l, g)
        });
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; layout.total];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }

    pub fn nll_gradient(&self, batch: &[Example<'_>]) -> Result<Vec<f64>> {
        self.loss_and_gradient(batch).map(|(_, g)| g)
    }

    /// Mean NLL over a set of examples, evaluated in parallel.
    pub fn mean_nll(&self, examples: &[Example<'_>]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::invalid("no examples to score"));
        }
        let losses = par::try_map_slice(examples, |ex| self.nll_loss(ex.h, ex.targets))?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Writes a JSON header line followed by `param_count` little-endian f32 values.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            pca_id: self.pca_id.clone(),
            metrics: self.metrics.clone(),
            param_count: self.params.len(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut line = serde_json::to_vec(&header).expect("header serializes");
        line.push(b'\n');
        w.write_all(&line).map_err(|e| Error::io(path, e))?;
        let bytes: Vec<u8> = self.params.iter().flat_map(|&p| (p as f32).to_le_bytes()).collect();
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&line).map_err(|e| Error::format(path, format!("bad checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("not a checkpoint ({})", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {}", header.version)));
        }
        header.config.validate().map_err(|e| Error::format(path, e.to_string()))?;
        let expected = header.config.param_count();
        if header.param_count != expected {
            return Err(Error::format(
                path,
                format!("header declares {} parameters, config implies {expected}", header.param_count),
            ));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        if payload.len() != 4 * expected {
            return Err(Error::format(
                path,
                format!("expected {} parameter bytes, found {}", 4 * expected, payload.len()),
            ));
        }
        let params = read_f32s(&payload);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::format(path, "non-finite parameter"));
        }
        Ok(MdnModel { config: header.config, params, pca_id: header.pca_id, metrics: header.metrics })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: MdnConfig,
    pca_id: Option<String>,
    metrics: BTreeMap<String, f64>,
    param_count: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|a| (a - lse).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.1,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::invalid("validation_fraction must lie in (0, 1)"));
        }
        for (name, v) in
            [("learning_rate", self.learning_rate), ("clip_norm", self.clip_norm), ("epsilon", self.epsilon)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub train_config: TrainConfig,
    pub train_count: usize,
    pub val_count: usize,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub stopped_early: bool,
}

/// Adam with global-norm gradient clipping.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &mut [f64], cfg: &TrainConfig) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Per-dimension mean and (population) standard deviation of all samples.
///
/// Dimensions with (numerically) zero spread get the RMS spread of the others,
/// or 1 if every dimension is constant: starting at the scale floor would make
/// the initial loss explode under the small random mean-head offsets.
fn target_moments(records: &[&PromptRecord], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = records.iter().map(|r| r.samples.len()).sum::<usize>().max(1) as f64;
    let mut mean = vec![0.0; d];
    for z in records.iter().flat_map(|r| &r.samples) {
        for j in 0..d {
            mean[j] += z[j] / n;
        }
    }
    let mut var = vec![0.0; d];
    for z in records.iter().flat_map(|r| &r.samples) {
        for j in 0..d {
            var[j] += (z[j] - mean[j]).powi(2) / n;
        }
    }
    let mut std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let degenerate: Vec<bool> = std.iter().zip(&mean).map(|(s, m)| *s <= 1e-9 * m.abs().max(1.0)).collect();
    let live: Vec<f64> = std.iter().zip(&degenerate).filter(|(_, &dg)| !dg).map(|(s, _)| s * s).collect();
    let fallback = if live.is_empty() { 1.0 } else { (live.iter().sum::<f64>() / live.len() as f64).sqrt() };
    for (s, dg) in std.iter_mut().zip(degenerate) {
        if dg {
            *s = fallback;
        }
    }
    (mean, std)
}

/// Fits a student by conditional maximum likelihood over each record's samples.
///
/// The dataset is shuffled once with `train_cfg.seed`; the trailing
/// `validation_fraction` becomes the validation split. The returned model is
/// the snapshot with the lowest validation NLL, rounded to f32 precision.
pub fn train(
    records: &[PromptRecord],
    mdn_cfg: &MdnConfig,
    train_cfg: &TrainConfig,
) -> Result<(MdnModel, TrainingLog)> {
    mdn_cfg.validate()?;
    train_cfg.validate()?;
    if records.len() < train_cfg.batch_size {
        return Err(Error::invalid(format!(
            "dataset has {} records, fewer than batch size {}",
            records.len(),
            train_cfg.batch_size
        )));
    }
    for (i, r) in records.iter().enumerate() {
        if r.samples.is_empty() {
            return Err(Error::Record { index: i, message: "record has no target samples".into() });
        }
        check_dim("h", mdn_cfg.input_dim, r.h.len())?;
        for z in &r.samples {
            check_dim("sample", mdn_cfg.target_dim, z.len())?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((records.len() as f64 * train_cfg.validation_fraction).round() as usize).clamp(1, records.len() - 1);
    let (train_idx, val_idx) = order.split_at(records.len() - n_val);
    let mut train_idx = train_idx.to_vec();
    let train_recs: Vec<&PromptRecord> = train_idx.iter().map(|&i| &records[i]).collect();
    let val_examples: Vec<Example<'_>> = val_idx.iter().map(|&i| Example::from(&records[i])).collect();

    let (mean, std) = target_moments(&train_recs, mdn_cfg.target_dim);
    let mut model = MdnModel::initialize(mdn_cfg.clone(), &mean, &std)?;
    let mut adam = Adam::new(model.params.len());

    let mut best_params = model.params.clone();
    let mut best_val = model.mean_nll(&val_examples)?;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut since_best = 0;

    for epoch in 1..=train_cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_no, chunk) in train_idx.chunks(train_cfg.batch_size).enumerate() {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| Example::from(&records[i])).collect();
            let (loss, mut grad) = model.loss_and_gradient(&batch)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_no });
            }
            loss_sum += loss * chunk.len() as f64;
            adam.step(&mut model.params, &mut grad, train_cfg);
        }
        let train_nll = loss_sum / train_idx.len() as f64;
        let val_nll = model.mean_nll(&val_examples)?;
        epochs.push(EpochLog { epoch, train_nll, val_nll });
        if val_nll < best_val {
            best_val = val_nll;
            best_params.clone_from(&model.params);
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    model.params = best_params;
    model.round_to_f32();
    let val_after_rounding = model.mean_nll(&val_examples)?;
    model.set_metric("best_val_nll", val_after_rounding);
    model.set_metric("best_epoch", best_epoch as f64);
    let log = TrainingLog {
        train_config: train_cfg.clone(),
        train_count: train_idx.len(),
        val_count: val_examples.len(),
        epochs,
        best_epoch,
        best_val_nll: best_val,
        stopped_early,
    };
    Ok((model, log))
}
