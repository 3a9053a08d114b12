//! Ranking metrics, bootstrap uncertainty, baselines and experiment runners.
//!
//! Conventions:
//! * AUROC counts ties as one half (mid-rank statistic).
//! * AUPRC is average precision: precision at each distinct threshold weighted by
//!   the recall gained there (step interpolation).
//! * For hallucination detection the positive class is `label == 1` and higher
//!   scores mean higher risk. For OOD verification the positive class is the
//!   matched pair and the score is the log-likelihood.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{check_same_len, pair_for_ood, project_records, shuffled_indices, stream_rng, PromptRecord};
use crate::error::{check_dim, Error, Result};
use crate::gmm::GaussianMixture;
use crate::mdn::MdnModel;
use crate::par;
use crate::pca::PcaTransform;

/// What a score measures; only a tag, metrics treat all scores alike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    Entropy,
    NegativeLogLikelihood,
    LogLikelihood,
    ProbeProbability,
    Dispersion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
    kind: ScoreKind,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, kind: ScoreKind) -> Result<Self> {
        check_same_len("labels", scores.len(), labels.len())?;
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("labels must be 0 or 1, got {l}")));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("scores must be finite"));
        }
        Ok(ScoredSet { scores, labels, kind })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    fn resample(&self, idx: &[usize]) -> ScoredSet {
        ScoredSet {
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            kind: self.kind,
        }
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn mid_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = avg;
        }
        i = j;
    }
    ranks
}

pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let n1 = s.positives();
    let n0 = s.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let ranks = mid_ranks(&s.scores);
    let r1: f64 = ranks.iter().zip(&s.labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 as f64 * n0 as f64))
}

pub fn auprc(s: &ScoredSet) -> Result<f64> {
    let total_pos = s.positives();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut gained = 0;
        let mut j = i;
        while j < order.len() && s.scores[order[j]] == s.scores[order[i]] {
            if s.labels[order[j]] == 1 {
                gained += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += gained;
        if gained > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (gained as f64 / total_pos as f64);
        }
        i = j;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auroc,
    Auprc,
}

impl Metric {
    pub fn compute(self, s: &ScoredSet) -> Result<f64> {
        match self {
            Metric::Auroc => auroc(s),
            Metric::Auprc => auprc(s),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Auprc => "auprc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Name of the scoring method, e.g. `ssd-entropy`.
    pub score: String,
    pub kind: ScoreKind,
    pub metric: Metric,
    pub n: usize,
    pub point: f64,
    pub boot_mean: f64,
    pub boot_std: f64,
    /// 2.5% and 97.5% bootstrap percentiles.
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
    /// Resamples on which the metric was undefined.
    pub skipped: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn covers(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }
}

/// Evaluates `stat` on `resamples` index resamples of `0..n`; resample `r` uses
/// its own ChaCha stream, so the result does not depend on thread count.
/// Returns the defined values in resample order and the number skipped.
fn resample_stat<F>(n: usize, resamples: usize, seed: u64, stat: F) -> (Vec<f64>, usize)
where
    F: Fn(&[usize]) -> Option<f64> + Sync + Send,
{
    let vals = par::map_indexed(resamples, |r| {
        let mut rng = stream_rng(seed, r as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        stat(&idx)
    });
    let skipped = vals.iter().filter(|v| v.is_none()).count();
    (vals.into_iter().flatten().collect(), skipped)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub const DEFAULT_RESAMPLES: usize = 1000;

pub fn bootstrap(s: &ScoredSet, metric: Metric, resamples: usize, seed: u64) -> Result<EvalReport> {
    bootstrap_named(s, metric, resamples, seed, metric.name())
}

pub fn bootstrap_named(s: &ScoredSet, metric: Metric, resamples: usize, seed: u64, score: &str) -> Result<EvalReport> {
    if resamples == 0 {
        return Err(Error::invalid("resamples must be at least 1"));
    }
    let point = metric.compute(s)?;
    let (mut vals, skipped) = resample_stat(s.len(), resamples, seed, |idx| metric.compute(&s.resample(idx)).ok());
    if 2 * skipped > resamples || vals.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "{} undefined on {skipped} of {resamples} resamples",
            metric.name()
        )));
    }
    let (boot_mean, boot_std) = mean_std(&vals);
    vals.sort_by(f64::total_cmp);
    Ok(EvalReport {
        score: score.to_string(),
        kind: s.kind,
        metric,
        n: s.len(),
        point,
        boot_mean,
        boot_std,
        ci_low: percentile(&vals, 0.025),
        ci_high: percentile(&vals, 0.975),
        resamples,
        skipped,
        seed,
    })
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len("spearman input", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::invalid("spearman needs at least 2 points"));
    }
    let (ra, rb) = (mid_ranks(a), mid_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedMetric("spearman with zero rank variance".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Square root of the mean per-dimension sample variance (divisor `S - 1`).
pub fn teacher_dispersion(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!("dispersion needs at least 2 samples, got {}", samples.len())));
    }
    let d = samples[0].len();
    if d == 0 {
        return Err(Error::invalid("samples have dimension 0"));
    }
    for z in samples {
        check_dim("sample", d, z.len())?;
    }
    let s = samples.len() as f64;
    let total: f64 = (0..d)
        .map(|j| {
            let m = samples.iter().map(|z| z[j]).sum::<f64>() / s;
            samples.iter().map(|z| (z[j] - m).powi(2)).sum::<f64>() / (s - 1.0)
        })
        .sum();
    Ok((total / d as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub l2: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { l2: 1e-3, iterations: 500, seed: 0 }
    }
}

/// L2-regularized logistic regression on raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
    pub iterations: usize,
    pub seed: u64,
    pub final_loss: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl LinearProbe {
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        check_dim("probe features", self.weights.len(), x.len())?;
        Ok(self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        self.logit(x).map(sigmoid)
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
        check_same_len("labels", features.len(), labels.len())?;
        if features.is_empty() {
            return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
        }
        let mut hits = 0;
        for (x, &y) in features.iter().zip(labels) {
            hits += usize::from((self.logit(x)? > 0.0) == (y == 1));
        }
        Ok(hits as f64 / features.len() as f64)
    }
}

/// Full-batch accelerated gradient descent on standardized features with a
/// step of `1 / L`, `L` bounded by power iteration. Deterministic.
pub fn train_probe(features: &[Vec<f64>], labels: &[u8], cfg: &ProbeConfig) -> Result<LinearProbe> {
    check_same_len("labels", features.len(), labels.len())?;
    if !(cfg.l2 >= 0.0 && cfg.l2.is_finite()) {
        return Err(Error::invalid("probe l2 must be finite and non-negative"));
    }
    let n = features.len();
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("probe labels must be 0 or 1"));
    }
    if pos == 0 || pos == n {
        return Err(Error::UndefinedMetric("probe training needs both classes".into()));
    }
    let d = features[0].len();
    for x in features {
        check_dim("probe features", d, x.len())?;
    }
    let nf = n as f64;
    let mu: Vec<f64> = (0..d).map(|j| features.iter().map(|x| x[j]).sum::<f64>() / nf).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = features.iter().map(|x| (x[j] - mu[j]).powi(2)).sum::<f64>() / nf;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    // augmented design: standardized features plus a constant column for the bias
    let xs: Vec<Vec<f64>> =
        features.iter().map(|x| (0..d).map(|j| (x[j] - mu[j]) / sd[j]).chain([1.0]).collect()).collect();
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let m = d + 1;

    let mut v = vec![1.0; m];
    let mut lambda_max = 0.0;
    for _ in 0..100 {
        let mut next = vec![0.0; m];
        for x in &xs {
            let xv: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (nj, xj) in next.iter_mut().zip(x) {
                *nj += xj * xv / nf;
            }
        }
        let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        lambda_max = norm / v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v = next.into_iter().map(|a| a / norm).collect();
    }
    let lr = 1.0 / (0.25 * lambda_max * 1.05 + cfg.l2);

    let loss_grad = |w: &[f64]| -> (f64, Vec<f64>) {
        let mut g = vec![0.0; m];
        let mut loss = 0.0;
        for (x, &t) in xs.iter().zip(&y) {
            let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
            loss += softplus(z) - t * z;
            let r = (sigmoid(z) - t) / nf;
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += r * xj;
            }
        }
        loss /= nf;
        for j in 0..d {
            loss += 0.5 * cfg.l2 * w[j] * w[j];
            g[j] += cfg.l2 * w[j];
        }
        (loss, g)
    };

    let mut w = vec![0.0; m];
    let mut look = w.clone();
    let mut t = 1.0f64;
    for _ in 0..cfg.iterations {
        let (_, g) = loss_grad(&look);
        let next: Vec<f64> = look.iter().zip(&g).map(|(a, b)| a - lr * b).collect();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        look = next.iter().zip(&w).map(|(a, b)| a + beta * (a - b)).collect();
        w = next;
        t = t_next;
    }
    let (final_loss, _) = loss_grad(&w);
    if !final_loss.is_finite() || w.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFiniteLoss { epoch: cfg.iterations, batch: 0 });
    }
    let weights: Vec<f64> = (0..d).map(|j| w[j] / sd[j]).collect();
    let bias = w[d] - (0..d).map(|j| w[j] * mu[j] / sd[j]).sum::<f64>();
    Ok(LinearProbe { weights, bias, l2: cfg.l2, iterations: cfg.iterations, seed: cfg.seed, final_loss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub probe: ProbeConfig,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { probe: ProbeConfig::default(), validation_fraction: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweep {
    pub best_layer: usize,
    pub accuracy: BTreeMap<usize, f64>,
}

/// Fits one probe per layer on a shared seeded split and picks the layer with
/// the best validation accuracy; ties go to the deepest layer.
pub fn sweep_layers(layers: &BTreeMap<usize, Vec<Vec<f64>>>, targets: &[u8], cfg: &SweepConfig) -> Result<LayerSweep> {
    if layers.is_empty() {
        return Err(Error::invalid("layer sweep needs at least one layer"));
    }
    if !(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) {
        return Err(Error::invalid("validation_fraction must be in (0, 1)"));
    }
    for (&l, feats) in layers {
        check_same_len(&format!("layer {l} rows"), targets.len(), feats.len())?;
    }
    let n = targets.len();
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).max(1);
    if n_val >= n {
        return Err(Error::invalid("too few examples for a validation split"));
    }
    let idx = shuffled_indices(n, cfg.seed);
    let (val_idx, train_idx) = idx.split_at(n_val);
    let pick = |ix: &[usize], f: &[Vec<f64>]| -> (Vec<Vec<f64>>, Vec<u8>) {
        (ix.iter().map(|&i| f[i].clone()).collect(), ix.iter().map(|&i| targets[i]).collect())
    };
    let entries: Vec<(usize, &Vec<Vec<f64>>)> = layers.iter().map(|(&l, f)| (l, f)).collect();
    let accs = par::try_map_slice(&entries, |(_, feats)| {
        let (xt, yt) = pick(train_idx, feats);
        let (xv, yv) = pick(val_idx, feats);
        train_probe(&xt, &yt, &cfg.probe)?.accuracy(&xv, &yv)
    })?;
    let accuracy: BTreeMap<usize, f64> = entries.iter().map(|(l, _)| *l).zip(accs).collect();
    let best_layer = accuracy
        .iter()
        .fold(None::<(usize, f64)>, |best, (&l, &a)| match best {
            Some((_, ba)) if ba > a => best,
            _ => Some((l, a)),
        })
        .map(|(l, _)| l)
        .expect("non-empty");
    Ok(LayerSweep { best_layer, accuracy })
}

/// Anything that maps a prompt record to a predicted answer-embedding density.
pub trait Predictor: Sync {
    fn mixture(&self, record: &PromptRecord) -> Result<GaussianMixture>;

    /// Id of the PCA the predictor was trained against, if any.
    fn pca_id(&self) -> Option<&str> {
        None
    }
}

impl Predictor for MdnModel {
    fn mixture(&self, record: &PromptRecord) -> Result<GaussianMixture> {
        self.forward(&record.h)
    }

    fn pca_id(&self) -> Option<&str> {
        MdnModel::pca_id(self)
    }
}

/// Returns each record's ground-truth mixture (synthetic data only).
#[derive(Debug, Clone, Copy, Default)]
pub struct TruthOracle;

impl Predictor for TruthOracle {
    fn mixture(&self, record: &PromptRecord) -> Result<GaussianMixture> {
        record.truth.clone().ok_or_else(|| Error::invalid(format!("record {} has no ground-truth mixture", record.id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { resamples: DEFAULT_RESAMPLES, seed: 0 }
    }
}

/// Projects records and predicts one mixture per record, checking that the
/// predictor's target space matches the (projected) embeddings.
pub fn predict_all<P: Predictor + ?Sized>(
    predictor: &P,
    pca: Option<&PcaTransform>,
    records: &[PromptRecord],
) -> Result<(Vec<PromptRecord>, Vec<GaussianMixture>)> {
    if records.is_empty() {
        return Err(Error::invalid("no records to evaluate"));
    }
    match (predictor.pca_id(), pca) {
        (Some(want), Some(p)) if want != p.id() => {
            return Err(Error::invalid(format!("model was trained with PCA {want}, got PCA {}", p.id())));
        }
        (Some(want), None) => {
            return Err(Error::invalid(format!("model was trained with PCA {want}, but no PCA was given")));
        }
        _ => {}
    }
    // the oracle's truth lives in raw space, so predict before projecting
    let mixtures = par::try_map_slice(records, |r| predictor.mixture(r))?;
    let projected = project_records(records, pca)?;
    for (r, m) in projected.iter().zip(&mixtures) {
        check_dim("predicted mixture", r.default_embedding.len(), m.dim())?;
    }
    Ok((projected, mixtures))
}

fn report_pair(set: &ScoredSet, name: &str, cfg: &EvalConfig) -> Result<[EvalReport; 2]> {
    Ok([
        bootstrap_named(set, Metric::Auroc, cfg.resamples, cfg.seed, name)?,
        bootstrap_named(set, Metric::Auprc, cfg.resamples, cfg.seed, name)?,
    ])
}

/// Hallucination detection: AUROC and AUPRC for SSD entropy, SSD negative
/// log-likelihood of the default answer, teacher dispersion, and (when a
/// training set is given) a probability-of-correctness probe on `h`.
pub fn run_hallucination_eval<P: Predictor + ?Sized>(
    predictor: &P,
    pca: Option<&PcaTransform>,
    records: &[PromptRecord],
    probe_train: Option<&[PromptRecord]>,
    cfg: &EvalConfig,
) -> Result<Vec<EvalReport>> {
    let (projected, mixtures) = predict_all(predictor, pca, records)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let entropy: Vec<f64> = mixtures.iter().map(GaussianMixture::renyi2_entropy).collect();
    let nll = projected
        .iter()
        .zip(&mixtures)
        .map(|(r, m)| m.log_density(&r.default_embedding).map(|l| -l))
        .collect::<Result<Vec<_>>>()?;
    let td = par::try_map_slice(&projected, |r| teacher_dispersion(&r.samples))?;

    let mut out = Vec::new();
    out.extend(report_pair(&ScoredSet::new(entropy, labels.clone(), ScoreKind::Entropy)?, "ssd-entropy", cfg)?);
    out.extend(report_pair(&ScoredSet::new(nll, labels.clone(), ScoreKind::NegativeLogLikelihood)?, "ssd-nll", cfg)?);
    out.extend(report_pair(&ScoredSet::new(td, labels.clone(), ScoreKind::Dispersion)?, "teacher-dispersion", cfg)?);
    if let Some(train) = probe_train {
        let xs: Vec<Vec<f64>> = train.iter().map(|r| r.h.clone()).collect();
        let ys: Vec<u8> = train.iter().map(|r| r.label).collect();
        let probe = train_probe(&xs, &ys, &ProbeConfig { seed: cfg.seed, ..Default::default() })?;
        let scores = records.iter().map(|r| probe.predict_proba(&r.h)).collect::<Result<Vec<_>>>()?;
        out.extend(report_pair(&ScoredSet::new(scores, labels, ScoreKind::ProbeProbability)?, "pcp", cfg)?);
    }
    Ok(out)
}

/// Context verification: each prompt is scored against its own default answer
/// (positive) and one from another prompt (negative) by log-likelihood.
pub fn run_ood_eval<P: Predictor + ?Sized>(
    predictor: &P,
    pca: Option<&PcaTransform>,
    records: &[PromptRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let (projected, mixtures) = predict_all(predictor, pca, records)?;
    let pairs = pair_for_ood(records.len(), cfg.seed)?;
    let scores =
        par::try_map_slice(&pairs, |p| mixtures[p.prompt].log_density(&projected[p.answer].default_embedding))?;
    let labels = pairs.iter().map(|p| u8::from(p.matched)).collect();
    let set = ScoredSet::new(scores, labels, ScoreKind::LogLikelihood)?;
    bootstrap_named(&set, Metric::Auroc, cfg.resamples, cfg.seed, "ssd-loglik")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub n: usize,
    /// Spearman between predicted entropy and teacher dispersion.
    pub rho_dispersion: f64,
    /// Spearman between predicted and ground-truth entropy (raw space), when known.
    pub rho_truth: Option<f64>,
}

pub fn run_fidelity<P: Predictor + ?Sized>(
    predictor: &P,
    pca: Option<&PcaTransform>,
    records: &[PromptRecord],
) -> Result<FidelityReport> {
    let (projected, mixtures) = predict_all(predictor, pca, records)?;
    let predicted: Vec<f64> = mixtures.iter().map(GaussianMixture::renyi2_entropy).collect();
    let td = par::try_map_slice(&projected, |r| teacher_dispersion(&r.samples))?;
    let rho_dispersion = spearman(&predicted, &td)?;
    let rho_truth = if records.iter().all(|r| r.truth.is_some()) {
        let truth: Vec<f64> =
            records.iter().map(|r| r.truth.as_ref().map(GaussianMixture::renyi2_entropy).unwrap_or_default()).collect();
        Some(spearman(&predicted, &truth)?)
    } else {
        None
    };
    Ok(FidelityReport { n: records.len(), rho_dispersion, rho_truth })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusRow {
    /// `all`, `correct` (label 0) or `incorrect` (label 1).
    pub subset: String,
    pub n: usize,
    pub default_msd: f64,
    pub ssd_msd: f64,
    /// Bootstrap std of each MSD as a percentage of its mean.
    pub default_rel_std_pct: f64,
    pub ssd_rel_std_pct: f64,
    /// Relative MSD reduction of the mixture mean over the default, in percent.
    pub improvement_pct: f64,
    /// Fraction of prompts where the mixture mean is strictly closer.
    pub win_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub rows: Vec<ConsensusRow>,
    pub resamples: usize,
    pub seed: u64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn rel_std_pct(values: &[f64], cfg: &EvalConfig) -> f64 {
    let mean_of = |idx: &[usize]| idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64;
    let (boots, _) = resample_stat(values.len(), cfg.resamples, cfg.seed, |idx| Some(mean_of(idx)));
    let (m, s) = mean_std(&boots);
    if m == 0.0 {
        0.0
    } else {
        100.0 * s / m
    }
}

/// Consensus: squared distance to the sample centroid of the default answer
/// versus the predicted mixture mean.
pub fn run_consensus_eval<P: Predictor + ?Sized>(
    predictor: &P,
    pca: Option<&PcaTransform>,
    records: &[PromptRecord],
    cfg: &EvalConfig,
) -> Result<ConsensusReport> {
    if cfg.resamples == 0 {
        return Err(Error::invalid("resamples must be at least 1"));
    }
    let (projected, mixtures) = predict_all(predictor, pca, records)?;
    let dists: Vec<(f64, f64)> = projected
        .iter()
        .zip(&mixtures)
        .map(|(r, m)| {
            let s = r.samples.len() as f64;
            let d = r.default_embedding.len();
            let centroid: Vec<f64> = (0..d).map(|j| r.samples.iter().map(|z| z[j]).sum::<f64>() / s).collect();
            (sq_dist(&r.default_embedding, &centroid), sq_dist(&m.mean(), &centroid))
        })
        .collect();
    let mut rows = Vec::new();
    for (subset, keep) in [("all", None), ("correct", Some(0u8)), ("incorrect", Some(1u8))] {
        let sel: Vec<(f64, f64)> =
            dists.iter().zip(records).filter(|(_, r)| keep.is_none_or(|k| r.label == k)).map(|(d, _)| *d).collect();
        if sel.is_empty() {
            continue;
        }
        let n = sel.len() as f64;
        let def: Vec<f64> = sel.iter().map(|d| d.0).collect();
        let ssd: Vec<f64> = sel.iter().map(|d| d.1).collect();
        let default_msd = def.iter().sum::<f64>() / n;
        let ssd_msd = ssd.iter().sum::<f64>() / n;
        rows.push(ConsensusRow {
            subset: subset.to_string(),
            n: sel.len(),
            default_msd,
            ssd_msd,
            default_rel_std_pct: rel_std_pct(&def, cfg),
            ssd_rel_std_pct: rel_std_pct(&ssd, cfg),
            improvement_pct: if default_msd > 0.0 { 100.0 * (default_msd - ssd_msd) / default_msd } else { 0.0 },
            win_rate: sel.iter().filter(|(d, s)| s < d).count() as f64 / n,
        });
    }
    Ok(ConsensusReport { rows, resamples: cfg.resamples, seed: cfg.seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64], labels: &[u8]) -> ScoredSet {
        ScoredSet::new(scores.to_vec(), labels.to_vec(), ScoreKind::Entropy).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(auroc(&set(&[0.3; 5], &[0, 1, 0, 1, 1])).unwrap(), 0.5);
        assert!(matches!(auroc(&set(&[0.1, 0.2], &[1, 1])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&set(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0])).unwrap(), 1.0);
        // sweep: 0.9 -> P=0 R=0; 0.8 -> P=1/2 R=1; 0.2 -> P=1/3 R=1
        assert_eq!(auprc(&set(&[0.9, 0.8, 0.2], &[0, 1, 0])).unwrap(), 0.5);
        // one tied group holding everything: precision = prevalence
        assert_eq!(auprc(&set(&[1.0; 4], &[1, 0, 0, 0])).unwrap(), 0.25);
        assert!(matches!(auprc(&set(&[0.1, 0.2], &[0, 0])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn bootstrap_basics() {
        let s = set(&[0.9, 0.1, 0.8, 0.3, 0.5, 0.4], &[1, 0, 1, 0, 0, 1]);
        let a = bootstrap(&s, Metric::Auroc, 1, 3).unwrap();
        let b = bootstrap(&s, Metric::Auroc, 1, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.resamples, 1);
        assert!(bootstrap(&s, Metric::Auroc, 0, 3).is_err());

        let c = set(&[0.7; 40], &(0..40).map(|i| (i % 2) as u8).collect::<Vec<_>>());
        let r = bootstrap(&c, Metric::Auroc, 200, 1).unwrap();
        assert_eq!((r.boot_mean, r.boot_std, r.point), (0.5, 0.0, 0.5));
    }

    #[test]
    fn bootstrap_skips_and_fails_on_degenerate_resamples() {
        // one positive in 20: a resample misses it with probability (19/20)^20 ~ 0.36
        let mut labels = vec![0u8; 20];
        labels[0] = 1;
        let s = set(&(0..20).map(|i| i as f64).collect::<Vec<_>>(), &labels);
        let r = bootstrap(&s, Metric::Auroc, 500, 0).unwrap();
        assert!(r.skipped > 120 && r.skipped < 240, "{}", r.skipped);

        // two points of different classes: each resample is degenerate with probability 1/2
        let s = set(&[1.0, 2.0], &[1, 0]);
        let outcomes: Vec<bool> = (0..40).map(|seed| bootstrap(&s, Metric::Auroc, 9, seed).is_ok()).collect();
        assert!(outcomes.contains(&true) && outcomes.contains(&false));
        let failing = outcomes.iter().position(|ok| !ok).unwrap() as u64;
        assert!(matches!(bootstrap(&s, Metric::Auroc, 9, failing), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&a, &a).unwrap(), 1.0);
        assert_eq!(spearman(&a, &[-1.0, -2.0, -3.0, -4.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(spearman(&a, &[1.0; 4]), Err(Error::UndefinedMetric(_))));
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn dispersion_examples() {
        assert_eq!(teacher_dispersion(&vec![vec![1.0, 2.0]; 4]).unwrap(), 0.0);
        assert!((teacher_dispersion(&[vec![0.0], vec![2.0]]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(teacher_dispersion(&[vec![0.0]]).is_err());
        assert!(teacher_dispersion(&[vec![0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn probe_separable_and_folded() {
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s * (1.0 + (i as f64) * 0.05), 100.0 + (i as f64 * 0.37).sin()]
            })
            .collect();
        let ys: Vec<u8> = (0..40).map(|i| u8::from(i % 2 == 0)).collect();
        let p = train_probe(&xs, &ys, &ProbeConfig::default()).unwrap();
        assert_eq!(p.accuracy(&xs, &ys).unwrap(), 1.0);
        assert!(p.final_loss.is_finite());
        assert!(train_probe(&xs, &[1; 40], &ProbeConfig::default()).is_err());
    }

    #[test]
    fn sweep_rules() {
        let n = 200;
        let signal: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos()]).collect();
        let ys: Vec<u8> = signal.iter().map(|x| u8::from(x[0] + 0.5 * x[1] > 0.0)).collect();
        let noise: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64 * 12.9898).sin() * 43758.5453 % 1.0]).collect();
        let cfg = SweepConfig::default();

        let one = BTreeMap::from([(7, noise.clone())]);
        assert_eq!(sweep_layers(&one, &ys, &cfg).unwrap().best_layer, 7);

        let planted = BTreeMap::from([(0, noise.clone()), (3, signal.clone()), (5, noise.clone())]);
        assert_eq!(sweep_layers(&planted, &ys, &cfg).unwrap().best_layer, 3);

        let tied = BTreeMap::from([(2, signal.clone()), (4, signal.clone())]);
        assert_eq!(sweep_layers(&tied, &ys, &cfg).unwrap().best_layer, 4);

        assert!(sweep_layers(&one, &ys[..10], &cfg).is_err());
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
