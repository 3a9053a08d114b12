//! Prompt records, the NDJSON dataset format, and a synthetic teacher.
//!
//! A dataset file is one JSON header line followed by one JSON object per
//! record:
//!
//! ```text
//! {"format":"ssd-dataset","version":1,"d_h":32,"d_raw":16,"samples_per_prompt":32,"count":2,"split":"train","provenance":"..."}
//! {"id":"p0","h":[...],"samples":[[...],...],"default_embedding":[...],"label":0,"truth":{...}}
//! ```
//!
//! Floats are written as decimal with 17 significant digits, which round-trips
//! every f64 exactly. `truth` is only present for synthetic data.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gmm::GaussianMixture;
use crate::par;
use crate::pca::PcaTransform;

pub const DATASET_FORMAT: &str = "ssd-dataset";
pub const DATASET_VERSION: u32 = 1;

/// One prompt: its representation, teacher samples, default answer and label.
///
/// `label` is 1 for an incorrect (hallucinated) default answer, 0 for correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub h: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub default_embedding: Vec<f64>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<GaussianMixture>,
}

impl PromptRecord {
    /// Copy with samples and default embedding mapped through `pca`.
    /// The ground-truth mixture lives in raw space and is dropped.
    pub fn projected(&self, pca: &PcaTransform) -> Result<PromptRecord> {
        Ok(PromptRecord {
            id: self.id.clone(),
            h: self.h.clone(),
            samples: pca.transform_batch(&self.samples)?,
            default_embedding: pca.transform(&self.default_embedding)?,
            label: self.label,
            truth: None,
        })
    }
}

/// Projects every record, or clones them when no transform is given.
pub fn project_records(records: &[PromptRecord], pca: Option<&PcaTransform>) -> Result<Vec<PromptRecord>> {
    match pca {
        Some(p) => par::try_map_slice(records, |r| r.projected(p)),
        None => Ok(records.to_vec()),
    }
}

/// All teacher samples of all records, flattened (the PCA fitting set).
pub fn flatten_samples(records: &[PromptRecord]) -> Vec<Vec<f64>> {
    records.iter().flat_map(|r| r.samples.iter().cloned()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub d_h: usize,
    pub d_raw: usize,
    pub samples_per_prompt: usize,
    pub count: usize,
    pub split: Split,
    pub provenance: String,
}

impl DatasetHeader {
    pub fn new(d_h: usize, d_raw: usize, samples_per_prompt: usize, count: usize, split: Split) -> Self {
        DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            d_h,
            d_raw,
            samples_per_prompt,
            count,
            split,
            provenance: String::new(),
        }
    }

    /// Checks one record against the declared shape. Errors name the field.
    pub fn validate_record(&self, index: usize, r: &PromptRecord) -> Result<()> {
        let fail = |message: String| Error::Record { index, message };
        if r.h.len() != self.d_h {
            return Err(fail(format!("field h has {} values, header says d_h={}", r.h.len(), self.d_h)));
        }
        if r.samples.len() != self.samples_per_prompt {
            return Err(fail(format!(
                "field samples has {} entries, header says {}",
                r.samples.len(),
                self.samples_per_prompt
            )));
        }
        if let Some((s, z)) = r.samples.iter().enumerate().find(|(_, z)| z.len() != self.d_raw) {
            return Err(fail(format!("field samples[{s}] has {} values, header says d_raw={}", z.len(), self.d_raw)));
        }
        if r.default_embedding.len() != self.d_raw {
            return Err(fail(format!(
                "field default_embedding has {} values, header says d_raw={}",
                r.default_embedding.len(),
                self.d_raw
            )));
        }
        if r.label > 1 {
            return Err(fail(format!("field label must be 0 or 1, got {}", r.label)));
        }
        if let Some(t) = &r.truth {
            if t.dim() != self.d_raw {
                return Err(fail(format!("field truth has dimension {}, header says {}", t.dim(), self.d_raw)));
            }
        }
        let finite = r.h.iter().chain(r.samples.iter().flatten()).chain(&r.default_embedding);
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite value".into()));
        }
        Ok(())
    }
}

/// Header plus records held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<PromptRecord>,
}

impl Dataset {
    /// Splits off the last `n_test` records as a test set.
    pub fn split_tail(mut self, n_test: usize) -> Result<(Dataset, Dataset)> {
        if n_test == 0 || n_test >= self.records.len() {
            return Err(Error::invalid(format!("test size {n_test} must be in 1..{}", self.records.len())));
        }
        let test_records = self.records.split_off(self.records.len() - n_test);
        let mut train_header = self.header.clone();
        train_header.count = self.records.len();
        train_header.split = Split::Train;
        let mut test_header = self.header;
        test_header.count = test_records.len();
        test_header.split = Split::Test;
        Ok((
            Dataset { header: train_header, records: self.records },
            Dataset { header: test_header, records: test_records },
        ))
    }
}

/// Streaming reader over a dataset file.
pub struct DatasetReader {
    header: DatasetHeader,
    lines: Lines<BufReader<File>>,
    path: PathBuf,
    next_index: usize,
    done: bool,
}

impl DatasetReader {
    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }
}

impl Iterator for DatasetReader {
    type Item = Result<PromptRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let index = self.next_index;
        let line = loop {
            match self.lines.next() {
                None => {
                    self.done = true;
                    if index != self.header.count {
                        return Some(Err(Error::format(
                            &self.path,
                            format!("header declares {} records, file has {index}", self.header.count),
                        )));
                    }
                    return None;
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(Error::io(&self.path, e)));
                }
                Some(Ok(l)) if l.trim().is_empty() => continue,
                Some(Ok(l)) => break l,
            }
        };
        self.next_index += 1;
        if index >= self.header.count {
            self.done = true;
            return Some(Err(Error::Record {
                index,
                message: format!("record beyond declared count {}", self.header.count),
            }));
        }
        let parsed = serde_json::from_str::<PromptRecord>(&line)
            .map_err(|e| Error::Record { index, message: format!("malformed record: {e}") })
            .and_then(|r| self.header.validate_record(index, &r).map(|_| r));
        if parsed.is_err() {
            self.done = true;
        }
        Some(parsed)
    }
}

/// Opens a dataset and parses its header; records are read lazily.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetReader> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::format(path, "empty file (missing header)")),
    };
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::format(path, format!("not a dataset file ({})", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::format(path, format!("unsupported dataset version {}", header.version)));
    }
    Ok(DatasetReader { header, lines, path: path.to_path_buf(), next_index: 0, done: false })
}

/// Reads a whole dataset into memory.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let reader = read_dataset(path)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok(Dataset { header, records })
}

fn push_f64(out: &mut String, x: f64) {
    use std::fmt::Write as _;
    write!(out, "{x:.16e}").expect("writing to String");
}

fn push_vec(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, &x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_f64(out, x);
    }
    out.push(']');
}

fn push_matrix<'a>(out: &mut String, rows: impl Iterator<Item = &'a [f64]>) {
    out.push('[');
    for (i, row) in rows.enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_vec(out, row);
    }
    out.push(']');
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn record_to_json(r: &PromptRecord) -> String {
    let mut s = String::with_capacity(64 + 24 * (r.h.len() + r.samples.len() * r.default_embedding.len()));
    s.push_str("{\"id\":");
    s.push_str(&serde_json::to_string(&r.id).expect("string serializes"));
    s.push_str(",\"h\":");
    push_vec(&mut s, &r.h);
    s.push_str(",\"samples\":");
    push_matrix(&mut s, r.samples.iter().map(Vec::as_slice));
    s.push_str(",\"default_embedding\":");
    push_vec(&mut s, &r.default_embedding);
    s.push_str(",\"label\":");
    s.push_str(if r.label == 1 { "1" } else { "0" });
    if let Some(t) = &r.truth {
        s.push_str(",\"truth\":{\"weights\":");
        push_vec(&mut s, t.weights());
        s.push_str(",\"means\":");
        push_matrix(&mut s, (0..t.components()).map(|k| t.component_mean(k)));
        s.push_str(",\"scales\":");
        push_matrix(&mut s, (0..t.components()).map(|k| t.component_scales(k)));
        s.push('}');
    }
    s.push('}');
    s
}

/// Writes a dataset; the file only appears if the record count matches the header.
pub fn write_dataset<'a>(
    header: &DatasetHeader,
    records: impl IntoIterator<Item = &'a PromptRecord>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let result = write_to(header, records, &tmp, path);
    match result {
        Ok(()) => fs::rename(&tmp, path).map_err(|e| Error::io(path, e)),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn write_to<'a>(
    header: &DatasetHeader,
    records: impl IntoIterator<Item = &'a PromptRecord>,
    tmp: &Path,
    path: &Path,
) -> Result<()> {
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::invalid("header has an unknown format or version"));
    }
    let file = File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    let mut w = BufWriter::new(file);
    let mut line = serde_json::to_string(header).expect("header serializes");
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(|e| Error::io(tmp, e))?;
    let mut n = 0;
    for r in records {
        header.validate_record(n, r)?;
        let mut line = record_to_json(r);
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| Error::io(tmp, e))?;
        n += 1;
    }
    if n != header.count {
        return Err(Error::format(path, format!("header declares {} records but {n} were supplied", header.count)));
    }
    w.flush().map_err(|e| Error::io(tmp, e))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(&ds.header, &ds.records, path)
}

/// ChaCha8 stream `stream` of `seed`; independent per prompt so generation can run in parallel.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Parameters of the synthetic teacher.
///
/// Each prompt has a latent vector `u ~ N(0, I_{d_h})`; its ground-truth mixture
/// is a fixed smooth function of `u`:
///
/// * centre `c(u)` linear in `u`, per-coordinate spread `center_scale`;
/// * component count in `[min_components, max_components]`, set by a projection of `u`;
/// * component means `c(u) + separation · g(u) · d_k` for fixed unit directions
///   `d_k` and a spread factor `g(u) ∈ (0, 1)`;
/// * weights `softmax(W u)`; every component has isotropic scale
///   `component_scale · exp(scale_gain · v·u)` for a fixed unit vector `v`.
///
/// The observed representation is `h = u + noise · ε`. Labels are drawn as
/// `Bernoulli(sigmoid(label_slope · (H2 − midpoint)))`, where `midpoint`
/// defaults to the median ground-truth entropy of the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTeacherConfig {
    pub n_prompts: usize,
    pub d_h: usize,
    pub d_z: usize,
    pub samples_per_prompt: usize,
    pub min_components: usize,
    pub max_components: usize,
    pub separation: f64,
    pub component_scale: f64,
    pub scale_gain: f64,
    pub center_scale: f64,
    pub noise: f64,
    pub weight_gain: f64,
    pub label_midpoint: Option<f64>,
    pub label_slope: f64,
    pub seed: u64,
}

impl Default for SyntheticTeacherConfig {
    fn default() -> Self {
        SyntheticTeacherConfig {
            n_prompts: 5000,
            d_h: 32,
            d_z: 16,
            samples_per_prompt: 32,
            min_components: 2,
            max_components: 4,
            separation: 1.0,
            component_scale: 0.3,
            scale_gain: 0.1,
            center_scale: 1.0,
            noise: 0.05,
            weight_gain: 0.5,
            label_midpoint: None,
            label_slope: 10.0,
            seed: 0,
        }
    }
}

impl SyntheticTeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prompts == 0 || self.d_h == 0 || self.d_z == 0 || self.samples_per_prompt == 0 {
            return Err(Error::invalid("prompt count, dimensions and sample count must be positive"));
        }
        if self.min_components == 0 || self.min_components > self.max_components || self.max_components > 10 {
            return Err(Error::invalid("component range must satisfy 1 <= min <= max <= 10"));
        }
        for (name, v) in [("component_scale", self.component_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("separation", self.separation),
            ("scale_gain", self.scale_gain),
            ("center_scale", self.center_scale),
            ("noise", self.noise),
            ("weight_gain", self.weight_gain),
            ("label_slope", self.label_slope),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// The fixed map from latent prompt vector to ground-truth mixture.
struct TeacherWorld {
    center: Vec<f64>,
    count_dir: Vec<f64>,
    spread_dir: Vec<f64>,
    scale_dir: Vec<f64>,
    logit_map: Vec<f64>,
    directions: Vec<Vec<f64>>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let v = gaussian_vec(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn std_normal_cdf(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26 on erf; accuracy ~1e-7, only used to bucket component counts
    let t = 1.0 / (1.0 + 0.327_591_1 * x.abs() / std::f64::consts::SQRT_2);
    let poly =
        t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let erf = 1.0 - poly * (-(x * x) / 2.0).exp();
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

impl TeacherWorld {
    fn new(cfg: &SyntheticTeacherConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, u64::MAX);
        let (dh, dz, kmax) = (cfg.d_h, cfg.d_z, cfg.max_components);
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();
        TeacherWorld {
            center: gaussian_vec(&mut rng, dz * dh, cfg.center_scale * inv_sqrt_dh),
            count_dir: unit_vec(&mut rng, dh),
            spread_dir: unit_vec(&mut rng, dh),
            scale_dir: unit_vec(&mut rng, dh),
            logit_map: gaussian_vec(&mut rng, kmax * dh, cfg.weight_gain * inv_sqrt_dh),
            directions: (0..kmax).map(|_| unit_vec(&mut rng, dz)).collect(),
        }
    }

    fn mixture(&self, cfg: &SyntheticTeacherConfig, u: &[f64]) -> Result<GaussianMixture> {
        let (dh, dz) = (cfg.d_h, cfg.d_z);
        let dot = |a: &[f64]| a.iter().zip(u).map(|(x, y)| x * y).sum::<f64>();
        let center: Vec<f64> = (0..dz).map(|j| dot(&self.center[j * dh..(j + 1) * dh])).collect();
        let span = (cfg.max_components - cfg.min_components + 1) as f64;
        let k = (cfg.min_components + (span * std_normal_cdf(dot(&self.count_dir))) as usize).min(cfg.max_components);
        let spread = 1.0 / (1.0 + (-2.0 * dot(&self.spread_dir)).exp());
        let logits: Vec<f64> = (0..k).map(|c| dot(&self.logit_map[c * dh..(c + 1) * dh])).collect();
        let lse = crate::gmm::log_sum_exp(&logits);
        let weights: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        let means = (0..k)
            .map(|c| center.iter().zip(&self.directions[c]).map(|(m, d)| m + cfg.separation * spread * d).collect())
            .collect();
        let sigma = cfg.component_scale * (cfg.scale_gain * dot(&self.scale_dir)).exp();
        GaussianMixture::new(weights, means, vec![vec![sigma; dz]; k])
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Draws a dataset from the synthetic teacher. Byte-identical for a fixed config.
pub fn generate_synthetic(cfg: &SyntheticTeacherConfig) -> Result<Dataset> {
    cfg.validate()?;
    let world = TeacherWorld::new(cfg);
    let drawn = par::map_indexed(cfg.n_prompts, |i| -> Result<(PromptRecord, f64)> {
        let mut rng = stream_rng(cfg.seed, i as u64);
        let u = gaussian_vec(&mut rng, cfg.d_h, 1.0);
        let h: Vec<f64> = u.iter().map(|x| x + cfg.noise * rng.sample::<f64, _>(StandardNormal)).collect();
        let truth = world.mixture(cfg, &u)?;
        let samples = (0..cfg.samples_per_prompt).map(|_| truth.sample_one(&mut rng)).collect();
        let default_embedding = truth.sample_one(&mut rng);
        let entropy = truth.renyi2_entropy();
        Ok((
            PromptRecord { id: format!("p{i:06}"), h, samples, default_embedding, label: 0, truth: Some(truth) },
            entropy,
        ))
    });
    let (mut records, entropies): (Vec<_>, Vec<_>) = drawn.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let midpoint = cfg.label_midpoint.unwrap_or_else(|| median(&entropies));
    let mut label_rng = stream_rng(cfg.seed ^ 0x6c61_6265_6c73, 0);
    for (r, &h2) in records.iter_mut().zip(&entropies) {
        let p = sigmoid(cfg.label_slope * (h2 - midpoint));
        r.label = u8::from(label_rng.random::<f64>() < p);
    }
    let mut header = DatasetHeader::new(cfg.d_h, cfg.d_z, cfg.samples_per_prompt, records.len(), Split::All);
    header.provenance = format!("synthetic teacher: {}", serde_json::to_string(cfg).expect("config serializes"));
    Ok(Dataset { header, records })
}

/// One scored candidate for context verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OodPair {
    /// Record whose representation `h` is scored.
    pub prompt: usize,
    /// Record whose default embedding is the candidate answer.
    pub answer: usize,
    pub matched: bool,
}

/// Two entries per prompt: its own default answer, and the default answer of
/// another prompt chosen by a seeded derangement.
pub fn pair_for_ood(n: usize, seed: u64) -> Result<Vec<OodPair>> {
    if n < 2 {
        return Err(Error::invalid(format!("OOD pairing needs at least 2 prompts, got {n}")));
    }
    // Sattolo's shuffle yields a single n-cycle, hence no fixed points.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, 0x6f6f64);
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    let mut out = Vec::with_capacity(2 * n);
    for (i, &j) in perm.iter().enumerate() {
        debug_assert_ne!(i, j);
        out.push(OodPair { prompt: i, answer: i, matched: true });
        out.push(OodPair { prompt: i, answer: j, matched: false });
    }
    Ok(out)
}

/// Deterministic shuffle of `0..n` used for seeded splits.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, 0x73706c6974));
    idx
}

pub(crate) fn check_same_len(field: &str, a: usize, b: usize) -> Result<()> {
    check_dim(field, a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, d_h: usize, d: usize, s: usize, x: f64) -> PromptRecord {
        PromptRecord {
            id: id.into(),
            h: (0..d_h).map(|i| x + i as f64 * 0.1).collect(),
            samples: (0..s).map(|k| (0..d).map(|j| x * (k + j) as f64 / 3.0).collect()).collect(),
            default_embedding: vec![-x; d],
            label: (x > 0.0) as u8,
            truth: None,
        }
    }

    #[test]
    fn empty_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ndjson");
        let header = DatasetHeader::new(3, 2, 4, 0, Split::Test);
        write_dataset(&header, &[], &p).unwrap();
        let mut r = read_dataset(&p).unwrap();
        assert_eq!(r.header(), &header);
        assert!(r.next().is_none());
    }

    #[test]
    fn short_record_rejected_at_its_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ndjson");
        let header = DatasetHeader::new(3, 2, 4, 3, Split::Train);
        let recs = [record("a", 3, 2, 4, 1.0), record("b", 3, 2, 4, 2.0), record("c", 3, 2, 4, 3.0)];
        write_dataset(&header, &recs, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut bad = recs[1].clone();
        bad.samples.pop();
        lines[2] = record_to_json(&bad);
        fs::write(&p, lines.join("\n")).unwrap();
        let res: Vec<_> = read_dataset(&p).unwrap().collect();
        assert!(res[0].is_ok());
        match &res[1] {
            Err(Error::Record { index: 1, message }) => {
                assert!(message.contains("samples"), "{message}")
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(res.len(), 2);
    }

    #[test]
    fn malformed_line_names_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ndjson");
        let header = DatasetHeader::new(3, 2, 4, 2, Split::Train);
        write_dataset(&header, &[record("a", 3, 2, 4, 1.0), record("b", 3, 2, 4, 2.0)], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let broken = text.replacen("\"id\":\"b\"", "\"id\":", 1);
        fs::write(&p, broken).unwrap();
        let err = load_dataset(&p).unwrap_err();
        assert!(matches!(err, Error::Record { index: 1, .. }), "{err}");
    }

    #[test]
    fn count_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ndjson");
        let header = DatasetHeader::new(3, 2, 4, 3, Split::Train);
        let recs = [record("a", 3, 2, 4, 1.0), record("b", 3, 2, 4, 2.0)];
        assert!(write_dataset(&header, &recs, &p).is_err());
        assert!(!p.exists(), "writer must not finalize on a count mismatch");
        assert!(!dir.path().join("c.ndjson.partial").exists());

        let header2 = DatasetHeader::new(3, 2, 4, 2, Split::Train);
        write_dataset(&header2, &recs, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap().replacen("\"count\":2", "\"count\":3", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Format { .. })));
        let text = fs::read_to_string(&p).unwrap().replacen("\"count\":3", "\"count\":1", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Record { index: 1, .. })));
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ndjson");
        write_dataset(&DatasetHeader::new(3, 2, 4, 0, Split::Train), &[], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap().replace("\"version\":1", "\"version\":2");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn float_format_has_17_significant_digits() {
        let mut s = String::new();
        push_f64(&mut s, 0.1);
        assert_eq!(s, "1.0000000000000001e-1");
        assert_eq!(s.parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn degenerate_generator_has_constant_entropy() {
        let cfg = SyntheticTeacherConfig {
            n_prompts: 2000,
            separation: 0.0,
            scale_gain: 0.0,
            min_components: 1,
            max_components: 1,
            seed: 11,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let hs: Vec<f64> = ds.records.iter().map(|r| r.truth.as_ref().unwrap().renyi2_entropy()).collect();
        assert!(hs.iter().all(|h| (h - hs[0]).abs() < 1e-12));
        // midpoint = the constant entropy, so p = 1/2; binomial sd over 2000 draws is 0.011
        let rate = ds.records.iter().map(|r| r.label as f64).sum::<f64>() / 2000.0;
        assert!((rate - 0.5).abs() < 0.05, "{rate}");
    }

    #[test]
    fn generator_is_deterministic_and_entropies_reproducible() {
        let cfg = SyntheticTeacherConfig { n_prompts: 50, seed: 5, ..Default::default() };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let ja: Vec<String> = a.records.iter().map(record_to_json).collect();
        let jb: Vec<String> = b.records.iter().map(record_to_json).collect();
        assert_eq!(ja, jb);
        let c = generate_synthetic(&SyntheticTeacherConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.records[0].h, c.records[0].h);
    }

    #[test]
    fn sample_means_concentrate_on_truth() {
        let cfg = SyntheticTeacherConfig { n_prompts: 1000, seed: 21, ..Default::default() };
        let ds = generate_synthetic(&cfg).unwrap();
        let s = cfg.samples_per_prompt as f64;
        let ok = ds
            .records
            .iter()
            .filter(|r| {
                let t = r.truth.as_ref().unwrap();
                let mu = t.mean();
                (0..cfg.d_z).all(|j| {
                    // exact mixture variance along coordinate j
                    let var: f64 = (0..t.components())
                        .map(|k| {
                            let (m, sd) = (t.component_mean(k)[j], t.component_scales(k)[j]);
                            t.weights()[k] * (sd * sd + (m - mu[j]).powi(2))
                        })
                        .sum();
                    let emp = r.samples.iter().map(|z| z[j]).sum::<f64>() / s;
                    (emp - mu[j]).abs() <= 4.0 * (var / s).sqrt()
                })
            })
            .count();
        assert!(ok >= 990, "{ok}");
    }

    #[test]
    fn ood_pairing() {
        let p = pair_for_ood(2, 0).unwrap();
        assert_eq!(
            p,
            vec![
                OodPair { prompt: 0, answer: 0, matched: true },
                OodPair { prompt: 0, answer: 1, matched: false },
                OodPair { prompt: 1, answer: 1, matched: true },
                OodPair { prompt: 1, answer: 0, matched: false },
            ]
        );
        for n in [3, 10, 257] {
            let p = pair_for_ood(n, 9).unwrap();
            assert_eq!(p.len(), 2 * n);
            assert_eq!(p.iter().filter(|x| x.matched).count(), n);
            assert!(p.iter().all(|x| x.matched == (x.prompt == x.answer)));
            assert_eq!(p, pair_for_ood(n, 9).unwrap());
        }
        assert!(pair_for_ood(1, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn records_round_trip_bit_exactly(
            xs in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 12),
            label in 0u8..2,
        ) {
            let r = PromptRecord {
                id: "q\"uote\\d".into(),
                h: xs[..3].to_vec(),
                samples: vec![xs[3..6].to_vec(), xs[6..9].to_vec()],
                default_embedding: xs[9..12].to_vec(),
                label,
                truth: Some(GaussianMixture::new(vec![1.0], vec![xs[9..12].to_vec()], vec![vec![0.5, 1.0, 2.0]]).unwrap()),
            };
            let back: PromptRecord = serde_json::from_str(&record_to_json(&r)).unwrap();
            let bits = |r: &PromptRecord| -> Vec<u64> {
                r.h.iter().chain(r.samples.iter().flatten()).chain(&r.default_embedding).map(|v| v.to_bits()).collect()
            };
            proptest::prop_assert_eq!(bits(&back), bits(&r));
            proptest::prop_assert_eq!(back, r);
        }
    }
}
